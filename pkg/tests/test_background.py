import numpy as np
import pytest

from fodfom.background import (
    DECISION_AREA_GATE,
    DECISION_EMITTED,
    DECISION_NO_DETECTION,
    BlurSpec,
    OutOfBoundsBoxError,
    blur_box,
    foreground_fraction,
    make_background,
)
from fodfom.tensorio import BoundingBox, DetectionRecord

from oracles import naive_blur


def test_fraction_half():
    img = np.zeros((100, 100), dtype=np.uint8)
    assert foreground_fraction(img, (0, 0, 50, 100)) == 0.5


def test_fraction_full():
    img = np.zeros((64, 64, 3), dtype=np.uint8)
    assert foreground_fraction(img, (0, 0, 64, 64)) == 1.0


def test_fraction_224_case():
    img = np.zeros((224, 224), dtype=np.uint8)
    assert foreground_fraction(img, (10, 10, 110, 110)) == 10000 / 50176


def test_fraction_out_of_bounds():
    img = np.zeros((32, 32), dtype=np.uint8)
    with pytest.raises(OutOfBoundsBoxError):
        foreground_fraction(img, (0, 0, 40, 10))


def test_blur_constant_image_unchanged():
    img = np.full((16, 16, 3), 77, dtype=np.uint8)
    out = blur_box(img, (2, 3, 12, 14), 5)
    assert np.array_equal(out, img)


def test_blur_k1_identity():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(20, 20, 3), dtype=np.uint8)
    out = blur_box(img, (0, 0, 20, 20), 1)
    assert np.array_equal(out, img)


def test_blur_ramp_matches_naive():
    img = np.arange(64, dtype=np.uint8).reshape(8, 8) * 3
    out = blur_box(img, (2, 2, 6, 6), 3)
    assert np.array_equal(out, naive_blur(img, (2, 2, 6, 6), 3))


def test_blur_outside_box_untouched():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, size=(24, 24, 3), dtype=np.uint8)
    box = (5, 6, 15, 18)
    out = blur_box(img, box, 7)
    mask = np.ones_like(img, dtype=bool)
    mask[6:18, 5:15] = False
    assert np.array_equal(out[mask], img[mask])


def test_blur_bounded_by_input_range():
    rng = np.random.default_rng(2)
    img = rng.integers(40, 200, size=(20, 20), dtype=np.uint8)
    out = blur_box(img, (0, 0, 20, 20), 9)
    assert out.min() >= img.min()
    assert out.max() <= img.max()


@pytest.mark.parametrize("k", [1, 2, 3, 5, 50])
def test_blur_matches_naive_random(k):
    rng = np.random.default_rng(k)
    for _ in range(3):
        h = int(rng.integers(6, 33))
        w = int(rng.integers(6, 33))
        channels = int(rng.choice([1, 3]))
        shape = (h, w) if channels == 1 else (h, w, channels)
        img = rng.integers(0, 256, size=shape, dtype=np.uint8)
        x0 = int(rng.integers(0, w - 2))
        y0 = int(rng.integers(0, h - 2))
        x1 = int(rng.integers(x0 + 1, w + 1))
        y1 = int(rng.integers(y0 + 1, h + 1))
        out = blur_box(img, (x0, y0, x1, y1), k)
        assert np.array_equal(out, naive_blur(img, (x0, y0, x1, y1), k))


def test_blur_float_box_coordinates():
    rng = np.random.default_rng(4)
    img = rng.integers(0, 256, size=(20, 20, 3), dtype=np.uint8)
    out = blur_box(img, (2.4, 3.7, 10.2, 12.9), 3)
    assert np.array_equal(out, naive_blur(img, (2.4, 3.7, 10.2, 12.9), 3))


def _detection(boxes):
    return DetectionRecord(image_id="img", boxes=boxes)


def test_gate_skips_large_foreground():
    img = np.zeros((100, 100, 3), dtype=np.uint8)
    det = _detection([BoundingBox(0, 0, 60, 100, 0.9)])  # fraction 0.6
    result, decision = make_background(img, det, BlurSpec(50, 50.0))
    assert result is None
    assert decision.decision == DECISION_AREA_GATE
    assert decision.fraction == pytest.approx(0.6)


def test_gate_emits_small_foreground_and_blurs_only_box():
    rng = np.random.default_rng(7)
    img = rng.integers(0, 256, size=(40, 40, 3), dtype=np.uint8)
    det = _detection([BoundingBox(10, 10, 14, 14, 0.8)])
    result, decision = make_background(img, det, BlurSpec(5, 50.0))
    assert decision.decision == DECISION_EMITTED
    mask = np.ones_like(img, dtype=bool)
    mask[10:14, 10:14] = False
    assert np.array_equal(result[mask], img[mask])
    assert not np.array_equal(result[10:14, 10:14], img[10:14, 10:14])


def test_highest_confidence_box_wins():
    img = np.zeros((50, 50, 3), dtype=np.uint8)
    img[:, :, 0] = np.tile(np.arange(50, dtype=np.uint8) * 5, (50, 1))
    low = BoundingBox(0, 0, 10, 10, 0.4)
    high = BoundingBox(20, 20, 30, 30, 0.9)
    result, decision = make_background(img, _detection([high, low]), BlurSpec(9, 50.0))
    assert decision.box == (20, 20, 30, 30)
    expected = blur_box(img, (20, 20, 30, 30), 9)
    assert np.array_equal(result, expected)


def test_no_detection_decision():
    img = np.zeros((10, 10, 3), dtype=np.uint8)
    result, decision = make_background(img, _detection([]), BlurSpec(3, 50.0))
    assert result is None
    assert decision.decision == DECISION_NO_DETECTION


def test_gate_boundary_is_strict():
    img = np.zeros((100, 100, 3), dtype=np.uint8)
    det = _detection([BoundingBox(0, 0, 50, 100, 0.9)])  # exactly beta/100
    result, decision = make_background(img, det, BlurSpec(3, 50.0))
    assert result is None
    assert decision.decision == DECISION_AREA_GATE


def test_blur_spec_validation():
    with pytest.raises(ValueError):
        BlurSpec(kernel_size=0)
    with pytest.raises(ValueError):
        BlurSpec(beta_percent=0.0)
