from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nucleo.annotations import from_ground_truth
from nucleo.synth import SynthConfig, generate
from nucleo.training import TrainConfig, calibrate_threshold, train

settings.register_profile("nucleo", deadline=None, max_examples=60, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("nucleo")

SMALL = dict(height=128, width=128, count=(3, 6))


def small_corpus(seeds, **overrides):
    cfg = {**SMALL, **overrides}
    images, truths = [], []
    for s in seeds:
        im, gt = generate(SynthConfig(seed=s, **cfg))
        images.append(im)
        truths.append(gt)
    return images, truths


@pytest.fixture(scope="session")
def small_model():
    """A quickly trained model on 128 x 128 synthetic images, with a calibrated threshold."""
    images, truths = small_corpus(range(24))
    anns = [from_ground_truth(f"{i}.png", gt) for i, gt in enumerate(truths)]
    cfg = TrainConfig(n_patches=8000, max_vmf_samples=60_000, n_mixtures=4, seed=0)
    model = train(images, anns, cfg)
    val_images, val_truths = small_corpus(range(500, 506))
    threshold, _ = calibrate_threshold(model, val_images, [g.centers for g in val_truths])
    return replace(model, score_threshold=threshold)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
