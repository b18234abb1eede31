import numpy as np
import pytest

from oracles import disk_count
from sonoreg.errors import ShapeError, ValidationError
from sonoreg.features import (
    DetectorSettings,
    Keypoint,
    apply_feature_map,
    detect_keypoints,
    feature_map,
    keypoint_mask,
)
from sonoreg.imagecore import Image


def blob(size=64, cx=31.0, cy=29.0, sigma=3.0):
    ys, xs = np.mgrid[0:size, 0:size]
    return np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma**2))


def test_constant_image_has_no_keypoints():
    assert detect_keypoints(np.full((32, 32), 0.4)) == []


def test_blob_detected_near_center():
    kps = detect_keypoints(blob())
    assert kps
    assert min(np.hypot(k.x - 31.0, k.y - 29.0) for k in kps) <= 2.0


def test_shifted_blob_moves_keypoint():
    a = detect_keypoints(blob(cx=30.0, cy=30.0))
    b = detect_keypoints(blob(cx=35.0, cy=28.0))
    assert (b[0].x - a[0].x, b[0].y - a[0].y) == pytest.approx((5.0, -2.0), abs=0.05)


def test_order_is_deterministic_and_sorted():
    from sonoreg.phantom import default_spec, render

    img = render(default_spec(1, 96), 3.0)[0]
    a, b = detect_keypoints(img), detect_keypoints(img)
    assert a == b
    assert len(a) > 5
    keys = [(-k.response, k.y, k.x) for k in a]
    assert keys == sorted(keys)


def test_threshold_filters_weak_responses():
    weak = 0.2 * blob()
    assert detect_keypoints(weak, DetectorSettings(contrast_threshold=0.5)) == []
    assert detect_keypoints(weak, DetectorSettings(contrast_threshold=0.001))


def test_detector_settings_and_size_checks():
    with pytest.raises(ValidationError):
        DetectorSettings(octaves=0)
    with pytest.raises(ValidationError):
        DetectorSettings(sigma=0.4)
    with pytest.raises(ShapeError):
        detect_keypoints(np.zeros((10, 40)))


def test_constant_image_falls_back_to_all_ones():
    m = feature_map(np.full((24, 24), 0.3))
    assert m.area() == 24 * 24


def test_single_disk_pixel_count():
    m = keypoint_mask((32, 32), [Keypoint(16.0, 16.0, 1.6, 1.0)], 3)
    assert disk_count(3) == 29
    assert m.area() == 29


def test_two_distant_disks_add_up():
    kps = [Keypoint(8.0, 8.0, 1.6, 1.0), Keypoint(40.0, 30.0, 1.6, 0.5)]
    m = keypoint_mask((48, 64), kps, 5)
    assert m.area() == 2 * disk_count(5)


def test_disk_is_clipped_at_border():
    m = keypoint_mask((20, 20), [Keypoint(0.0, 0.0, 1.6, 1.0)], 3)
    expected = sum(1 for x in range(4) for y in range(4) if x * x + y * y <= 9)
    assert m.area() == expected


def test_apply_feature_map():
    rng = np.random.default_rng(0)
    img = Image(rng.random((12, 12)))
    assert apply_feature_map(img, np.ones((12, 12))) == img
    assert not apply_feature_map(img, np.zeros((12, 12))).data.any()
    m = (rng.random((12, 12)) > 0.5).astype(np.uint8)
    np.testing.assert_array_equal(apply_feature_map(img, m).data, img.data * m)
