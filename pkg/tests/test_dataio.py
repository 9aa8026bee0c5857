import warnings

import numpy as np
import pytest

from frnhead.dataio import (
    Annotation,
    AnnotationError,
    PlacementError,
    SceneSpec,
    decode_image,
    encode_image,
    generate_scene,
    load_annotations,
    load_image,
    parse_voc_xml,
    read_detections_csv,
    save_image,
    write_detections_csv,
    write_voc_xml,
)
from frnhead.geometry import BBox, Detection, iou, is_small

MINIMAL = b"""<annotation><filename>img1.jpg</filename>
<size><width>10</width><height>10</height><depth>3</depth></size>
<object><name>person</name><bndbox><xmin>1</xmin><ymin>2</ymin><xmax>3</xmax><ymax>4</ymax></bndbox></object>
</annotation>"""


def test_parse_minimal():
    ann = parse_voc_xml(MINIMAL)
    assert ann.image_id == "img1" and (ann.width, ann.height) == (10, 10)
    assert ann.boxes == [BBox(1, 2, 3, 4)]


def test_parse_zero_objects():
    ann = parse_voc_xml(b"<annotation><size><width>5</width><height>6</height></size></annotation>")
    assert ann.boxes == []


def test_parse_name_filter():
    assert parse_voc_xml(MINIMAL, names=["head"]).boxes == []
    assert len(parse_voc_xml(MINIMAL, names=["person"]).boxes) == 1


def test_parse_errors():
    with pytest.raises(AnnotationError, match="malformed"):
        parse_voc_xml(b"<annotation><size>")
    with pytest.raises(AnnotationError, match="size"):
        parse_voc_xml(b"<annotation></annotation>")


def test_out_of_image_box_clamped_or_rejected():
    xml = MINIMAL.replace(b"<xmax>3</xmax>", b"<xmax>12</xmax>")
    with pytest.warns(UserWarning, match="clamped"):
        ann = parse_voc_xml(xml)
    assert ann.boxes == [BBox(1, 2, 10, 4)]
    with pytest.raises(AnnotationError):
        parse_voc_xml(xml, strict=True)


def test_voc_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    boxes = []
    for _ in range(20):
        x, y = rng.uniform(0, 400, 2)
        boxes.append(BBox(x, y, x + rng.uniform(1, 40), y + rng.uniform(1, 40)))
    boxes.append(BBox(1, 2, 3, 4))
    ann = Annotation("frame", 640, 480, boxes)
    back = parse_voc_xml(write_voc_xml(ann))
    assert back == ann
    (tmp_path / "frame.xml").write_bytes(write_voc_xml(ann))
    assert load_annotations(tmp_path) == {"frame": ann}


def test_write_empty_and_fractional():
    empty = write_voc_xml(Annotation("e", 4, 4, []))
    assert parse_voc_xml(empty).boxes == []
    frac = write_voc_xml(Annotation("f", 100, 100, [BBox(0.1, 1 / 3, 50.123456789012345, 60)]))
    assert b"0.3333333333333333" in frac and repr(50.123456789012345).encode() in frac


def test_pgm_ones():
    img = decode_image(b"P5\n2 2\n255\n" + bytes([255] * 4))
    assert img.shape == (1, 1, 2, 2) and np.all(img == 1.0)


def test_pgm_header_comments():
    img = decode_image(b"P5\n# made by hand\n3 1\n255\n" + bytes([0, 51, 255]))
    np.testing.assert_allclose(img[0, 0, 0], [0, 0.2, 1])


def test_ppm_color():
    img = decode_image(b"P6 1 1 255 " + bytes([255, 0, 51]))
    assert img.shape == (1, 3, 1, 1)
    np.testing.assert_allclose(img[0, :, 0, 0], [1, 0, 0.2])


@pytest.mark.parametrize("c", [1, 3])
def test_image_roundtrip_exact(tmp_path, c):
    rng = np.random.default_rng(1)
    pix = rng.integers(0, 256, (1, c, 7, 5)).astype(np.uint8)
    data = encode_image(pix / 255.0)
    assert encode_image(decode_image(data)) == data
    save_image(tmp_path / "a.pnm", pix / 255.0)
    np.testing.assert_array_equal(np.rint(load_image(tmp_path / "a.pnm") * 255), pix)


def test_image_unsupported():
    with pytest.raises(ValueError, match="P5/P6"):
        decode_image(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError, match="maxval"):
        decode_image(b"P5\n1 1\n65535\n\x00\x00")


def test_detections_csv_roundtrip():
    dets = {"a": [Detection(BBox(0.5, 1, 2.25, 3), 0.75)], "b": []}
    text = write_detections_csv(dets)
    assert text.splitlines()[0] == "image_id,xmin,ymin,xmax,ymax,score"
    assert read_detections_csv(text) == {"a": dets["a"]}


def test_blank_scene():
    img, ann = generate_scene(SceneSpec(n_small=0, n_large=0, seed=3))
    assert img.shape == (1, 1, 256, 256) and ann.boxes == []
    assert img.std() > 0


def test_scene_deterministic():
    a, _ = generate_scene(SceneSpec(seed=5))
    b, _ = generate_scene(SceneSpec(seed=5))
    assert a.tobytes() == b.tobytes()


def test_scene_populations():
    _, ann = generate_scene(SceneSpec(n_small=10, n_large=5, seed=11))
    assert len(ann.boxes) == 15
    assert sum(is_small(b) for b in ann.boxes) == 10
    for b in ann.boxes:
        assert 0 <= b.xmin and b.xmax <= 256 and 0 <= b.ymin and b.ymax <= 256
        if not is_small(b):
            assert (b.width + b.height) / 2 >= 24


def test_scene_overlap_bound():
    for seed in range(10):
        _, ann = generate_scene(SceneSpec(n_small=12, n_large=4, seed=seed))
        for i, a in enumerate(ann.boxes):
            for b in ann.boxes[i + 1:]:
                assert iou(a, b) <= 0.3


def test_scene_too_dense():
    with pytest.raises(PlacementError):
        generate_scene(SceneSpec(width=64, height=64, n_small=0, n_large=20, large_radius=(20, 30),
                                 max_iou=0.0, max_tries=50))
