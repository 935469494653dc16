import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from nucleo.synth import SynthConfig, generate


def test_single_nucleus():
    image, gt = generate(SynthConfig(height=64, width=64, count=(1, 1), touching_prob=0.0, seed=1))
    assert len(gt) == 1 and gt.complete
    x, y = gt.centers[0]
    assert gt.masks[int(round(y)), int(round(x))] == 1
    assert gt.isolated.tolist() == [True]
    assert gt.pairs == []
    assert image.shape == (64, 64) and image.min() >= 0.0 and image.max() <= 1.0


@pytest.mark.parametrize("seed", range(5))
def test_touching_pair(seed):
    _, gt = generate(SynthConfig(height=96, width=96, count=(2, 2), touching_prob=1.0, seed=seed))
    assert len(gt) == 2 and gt.pairs == [(0, 1)]
    assert gt.isolated.tolist() == [False, False]
    four = ndimage.generate_binary_structure(2, 1)
    assert np.any(ndimage.binary_dilation(gt.masks == 1, four) & (gt.masks == 2))


def test_seed_determinism():
    cfg = SynthConfig(seed=42, touching_prob=0.3)
    (a, ga), (b, gb) = generate(cfg), generate(cfg)
    assert a.tobytes() == b.tobytes()
    assert ga.masks.tobytes() == gb.masks.tobytes()
    assert ga.centers.tobytes() == gb.centers.tobytes()
    assert ga.boxes.tobytes() == gb.boxes.tobytes()
    c, _ = generate(SynthConfig(seed=43, touching_prob=0.3))
    assert c.tobytes() != a.tobytes()


def test_blank_image():
    image, gt = generate(SynthConfig(height=32, width=40, count=(0, 0), seed=0))
    assert len(gt) == 0 and not gt.masks.any()
    assert gt.centers.shape == (0, 2) and gt.boxes.shape == (0, 4)
    assert abs(image.mean() - 0.1) < 0.01


def test_crowded_request_returns_fewer():
    _, gt = generate(SynthConfig(height=40, width=40, count=(30, 30), seed=0))
    assert not gt.complete and 0 < len(gt) < 30


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(long_axis=(20, 10))
    with pytest.raises(ValueError):
        SynthConfig(touching_prob=1.5)
    with pytest.raises(ValueError):
        SynthConfig(background=0.7, foreground=0.6)
    with pytest.raises(ValueError):
        SynthConfig(short_axis=(0.0, 5.0))
    with pytest.raises(ValueError):
        SynthConfig(noise_std=-0.1)


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_ground_truth_invariants(seed, touching):
    _, gt = generate(SynthConfig(height=128, width=128, count=(2, 8), touching_prob=touching,
                                 seed=seed))
    n = len(gt)
    assert set(np.unique(gt.masks).tolist()) <= set(range(n + 1))
    four = ndimage.generate_binary_structure(2, 1)
    for i in range(n):
        m = gt.masks == i + 1
        assert m.any()
        rows, cols = np.nonzero(m)
        assert gt.boxes[i].tolist() == [cols.min(), rows.min(), cols.max(), rows.max()]
        x0, y0, x1, y1 = gt.boxes[i]
        cx, cy = gt.centers[i]
        assert x0 <= cx <= x1 and y0 <= cy <= y1
        ring = ndimage.binary_dilation(m, four) & ~m
        touches = np.any(gt.masks[ring] > 0)
        assert gt.isolated[i] == (not touches)
        if gt.isolated[i]:
            # whole ellipse inside the image: the mask centroid is the center
            assert np.hypot(cols.mean() - cx, rows.mean() - cy) <= 1.0
    for a, b in gt.pairs:
        assert not gt.isolated[a] and not gt.isolated[b]
