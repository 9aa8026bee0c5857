"""Dense rank-4 tensors (batch, channel, row, column) and the differentiable
primitives the refine block is built from.

Every differentiable op comes as a ``*_forward`` returning ``(out, cache)``
and a ``*_backward`` taking the upstream gradient and the cache.  There is no
tape: callers compose layers explicitly and thread caches by hand.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

MAGIC = b"T4v1"


class ShapeError(ValueError):
    """Raised when tensor shapes do not line up."""


def as_tensor4(x, dtype=None) -> np.ndarray:
    """Validate ``x`` as a rank-4 array with every dimension >= 1."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected rank-4 tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"all dimensions must be >= 1, got shape {arr.shape}")
    return arr


@dataclass
class Param:
    """A value with a lazily materialized gradient of the same shape."""

    value: np.ndarray
    _grad: np.ndarray | None = field(default=None, repr=False)

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        g = np.asarray(g, dtype=self.value.dtype)
        if g.shape != self.value.shape:
            raise ShapeError(f"grad shape {g.shape} != value shape {self.value.shape}")
        self._grad = g

    def zero_grad(self):
        self._grad = None


# --------------------------------------------------------------------------
# convolution

def _pad(x, padding, value=0.0):
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _out_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _im2col(xp, kh, kw, stride, ho, wo):
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def conv2d_forward(x, weight, bias, stride=1, padding=0):
    """Cross-correlation of ``x`` (B, C, H, W) with ``weight`` (O, C, kH, kW)."""
    x = as_tensor4(x)
    weight = np.asarray(weight)
    bias = np.asarray(bias)
    if weight.ndim != 4:
        raise ShapeError(f"kernel must be rank-4, got shape {weight.shape}")
    o, c, kh, kw = weight.shape
    if x.shape[1] != c:
        raise ShapeError(f"input channels {x.shape[1]} != kernel in-channels {c}")
    if bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} != ({o},)")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    b, _, h, w = x.shape
    if h + 2 * padding < kh:
        raise ShapeError(f"padded height {h + 2 * padding} < kernel height {kh}")
    if w + 2 * padding < kw:
        raise ShapeError(f"padded width {w + 2 * padding} < kernel width {kw}")
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)

    if kh == 1 and kw == 1 and padding == 0:
        cols = x[:, :, ::stride, ::stride].reshape(b, c, ho * wo)
    else:
        cols = _im2col(_pad(x, padding), kh, kw, stride, ho, wo)
    wmat = weight.reshape(o, -1)
    out = np.matmul(wmat, cols) + bias[None, :, None]
    cache = (x.shape, cols, weight, stride, padding)
    return out.reshape(b, o, ho, wo), cache


def conv2d_backward(dout, cache):
    """Return ``(dx, dweight, dbias)``."""
    xshape, cols, weight, stride, padding = cache
    b, c, h, w = xshape
    o, _, kh, kw = weight.shape
    ho, wo = dout.shape[2:]
    d = dout.reshape(b, o, ho * wo)
    dbias = d.sum(axis=(0, 2))
    dweight = np.einsum("bol,bkl->ok", d, cols).reshape(weight.shape)
    dcols = np.matmul(weight.reshape(o, -1).T, d)

    if kh == 1 and kw == 1 and padding == 0:
        if stride == 1:
            dx = dcols.reshape(xshape)
        else:
            dx = np.zeros(xshape, dtype=dcols.dtype)
            dx[:, :, ::stride, ::stride][:, :, :ho, :wo] = dcols.reshape(b, c, ho, wo)
        return dx, dweight, dbias

    dcols = dcols.reshape(b, c, kh, kw, ho, wo)
    dxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp, dweight, dbias


def conv2d(x, weight, bias, stride=1, padding=0):
    return conv2d_forward(x, weight, bias, stride, padding)[0]


# --------------------------------------------------------------------------
# max pooling

def maxpool2d_forward(x, kernel=2, stride=2, padding=0):
    """Max pooling with ``-inf`` padding.

    Ties go to the first element of the window in row-major order.  The cache
    holds the flat in-window argmax for every output pixel.
    """
    x = as_tensor4(x)
    if kernel < 1 or stride < 1 or padding < 0:
        raise ValueError("kernel and stride must be >= 1, padding >= 0")
    b, c, h, w = x.shape
    if h + 2 * padding < kernel or w + 2 * padding < kernel:
        raise ShapeError(f"pool window {kernel} larger than padded input {(h, w)}")
    ho, wo = _out_size(h, kernel, stride, padding), _out_size(w, kernel, stride, padding)
    xp = _pad(x, padding, value=-np.inf)
    windows = np.empty((b, c, kernel * kernel, ho, wo), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            windows[:, :, i * kernel + j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    arg = windows.argmax(axis=2)
    out = np.take_along_axis(windows, arg[:, :, None], axis=2)[:, :, 0]
    return out, (x.shape, arg, kernel, stride, padding)


def maxpool2d_backward(dout, cache):
    xshape, arg, kernel, stride, padding = cache
    b, c, h, w = xshape
    ho, wo = arg.shape[2:]
    dxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=dout.dtype)
    for i in range(kernel):
        for j in range(kernel):
            mask = arg == i * kernel + j
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(mask, dout, 0)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return (dxp,)


def maxpool2d(x, kernel=2, stride=2, padding=0):
    return maxpool2d_forward(x, kernel, stride, padding)[0]


# --------------------------------------------------------------------------
# channel concat, relu

def concat_channels_forward(inputs: Sequence[np.ndarray]):
    if not inputs:
        raise ShapeError("need at least one tensor to concatenate")
    arrs = [as_tensor4(t) for t in inputs]
    b, _, h, w = arrs[0].shape
    for k, t in enumerate(arrs[1:], start=1):
        if t.shape[0] != b:
            raise ShapeError(f"input {k}: batch {t.shape[0]} != {b}")
        if t.shape[2:] != (h, w):
            raise ShapeError(f"input {k}: spatial {t.shape[2:]} != {(h, w)}")
    sizes = [t.shape[1] for t in arrs]
    return np.concatenate(arrs, axis=1), sizes


def concat_channels_backward(dout, sizes):
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(dout, splits, axis=1))


def concat_channels(inputs):
    return concat_channels_forward(inputs)[0]


def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def relu_backward(dout, mask):
    return (np.where(mask, dout, 0).astype(dout.dtype, copy=False),)


def relu(x):
    return relu_forward(x)[0]


# --------------------------------------------------------------------------
# finite differences

@dataclass
class GradCheckReport:
    max_rel_error: list[float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_rel_error)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error) if self.max_rel_error else 0.0


def finite_diff_check(
    forward: Callable,
    backward: Callable,
    inputs: Sequence[np.ndarray],
    epsilon: float = 1e-4,
    tolerance: float = 1e-5,
    seed: int = 0,
    check: Sequence[int] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``forward(*inputs)`` returns ``(out, cache)`` and ``backward(dout, cache)``
    returns one gradient per input.  A fixed random projection ``L = <R, out>``
    turns the output into a scalar.  ``check`` restricts which inputs are
    perturbed (all by default).  Everything runs in float64.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    out, cache = forward(*inputs)
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("forward produced non-finite values")
    rng = np.random.default_rng(seed)
    proj = rng.uniform(-1.0, 1.0, size=out.shape)
    grads = backward(proj, cache)
    indices = range(len(inputs)) if check is None else check

    errors = []
    for idx in indices:
        analytic = np.asarray(grads[idx], dtype=np.float64)
        if analytic.shape != inputs[idx].shape:
            raise ShapeError(f"grad {idx} shape {analytic.shape} != input shape {inputs[idx].shape}")
        if not np.all(np.isfinite(analytic)):
            raise FloatingPointError(f"non-finite analytic gradient for input {idx}")
        x = inputs[idx]
        numeric = np.zeros_like(x)
        flat = x.reshape(-1)
        nflat = numeric.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            op = np.asarray(forward(*inputs)[0], dtype=np.float64)
            flat[k] = orig - epsilon
            om = np.asarray(forward(*inputs)[0], dtype=np.float64)
            flat[k] = orig
            # project the difference so untouched outputs cancel exactly
            nflat[k] = float(np.sum(proj * (op - om))) / (2 * epsilon)
        if not np.all(np.isfinite(numeric)):
            raise FloatingPointError(f"non-finite numeric gradient for input {idx}")
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        errors.append(float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0)
    return GradCheckReport(errors, tolerance)


# --------------------------------------------------------------------------
# T4v1 serialization

def tensor_to_bytes(x) -> bytes:
    x = as_tensor4(x)
    header = MAGIC + struct.pack("<4Q", *x.shape)
    return header + np.ascontiguousarray(x, dtype="<f8").tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise ValueError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    shape = struct.unpack("<4Q", buf[4:36])
    n = int(np.prod(shape))
    body = buf[36:]
    if len(body) != 8 * n:
        raise ValueError(f"payload has {len(body)} bytes, expected {8 * n}")
    return np.frombuffer(body, dtype="<f8").reshape(shape).astype(np.float64)


def save_tensor(path, x):
    Path(path).write_bytes(tensor_to_bytes(x))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# parameter directories: one T4v1 file per tensor plus a text manifest

MANIFEST = "manifest.txt"


def save_params(directory, params: dict[str, np.ndarray], config: dict | None = None):
    """Write ``params`` as ``<name>.t4`` files and a manifest of shapes/config.

    Tensors of rank < 4 are stored with trailing unit dims; the manifest keeps
    the logical shape.
    """
    import json

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["# frnhead parameter manifest"]
    for key, value in sorted((config or {}).items()):
        lines.append(f"config {key}={json.dumps(value, sort_keys=True)}")
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=np.float64)
        if arr.ndim > 4:
            raise ShapeError(f"{name}: rank {arr.ndim} > 4")
        shape = arr.shape
        save_tensor(directory / f"{name}.t4", arr.reshape(shape + (1,) * (4 - arr.ndim)))
        lines.append(f"tensor {name} {','.join(str(s) for s in shape)}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")


def load_params(directory) -> tuple[dict[str, np.ndarray], dict]:
    import json

    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    params, config = {}, {}
    for line in manifest.read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        kind, rest = line.split(" ", 1)
        if kind == "config":
            key, value = rest.split("=", 1)
            config[key] = json.loads(value)
        elif kind == "tensor":
            name, shape_txt = rest.split(" ")
            shape = tuple(int(s) for s in shape_txt.split(",")) if shape_txt else ()
            params[name] = load_tensor(directory / f"{name}.t4").reshape(shape)
        else:
            raise ValueError(f"unknown manifest line: {line!r}")
    return params, config
