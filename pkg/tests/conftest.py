import numpy as np
import pytest

from pathlib import Path

from quadcd.backends import ScriptedBackend, ScriptedScenario
from quadcd.decoupling import BACKGROUND, OBJECT, SegmentMask, SegmentationSet
from quadcd.distcore import LogitVector
from quadcd.engine import CHANNELS, ChannelLogits

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


def make_channels(original, dual, residual, non_visual) -> ChannelLogits:
    return ChannelLogits(
        original=LogitVector(np.asarray(original, dtype=np.float64)),
        dual=LogitVector(np.asarray(dual, dtype=np.float64)),
        residual=LogitVector(np.asarray(residual, dtype=np.float64)),
        non_visual=LogitVector(np.asarray(non_visual, dtype=np.float64)),
    )


def random_scripted(rng: np.random.Generator, vocab_size: int, steps: int) -> ScriptedBackend:
    """Scripted backend with uniform-random logit tables; stop is the last
    vocab entry and stays unlikely so decodes run the full table."""
    vocab = tuple(f"t{i}" for i in range(vocab_size - 1)) + ("</s>",)
    table = {}
    for step in range(steps):
        for channel in CHANNELS:
            vals = rng.uniform(-3.0, 3.0, size=vocab_size)
            vals[-1] = -10.0
            table[(step, channel)] = vals
    scenario = ScriptedScenario(
        vocab=vocab, steps=steps, stop_token=vocab_size - 1, table=table
    )
    return ScriptedBackend(scenario)


def random_segmentation(rng: np.random.Generator) -> SegmentationSet:
    """Random partition of a small grid into 1..6 objects plus background."""
    width = int(rng.integers(2, 13))
    height = int(rng.integers(2, 13))
    pixels = [(r, c) for r in range(height) for c in range(width)]
    # background + objects each need a pixel of their own
    n_objects = int(rng.integers(1, min(7, len(pixels))))
    # background keeps at least one pixel, every object keeps at least one
    while True:
        owners = rng.integers(0, n_objects + 1, size=len(pixels))
        if all((owners == k).any() for k in range(n_objects + 1)):
            break
    masks = [
        SegmentMask(
            "bg",
            BACKGROUND,
            frozenset(p for p, o in zip(pixels, owners) if o == 0),
        )
    ]
    for k in range(1, n_objects + 1):
        masks.append(
            SegmentMask(
                f"obj{k:02d}",
                OBJECT,
                frozenset(p for p, o in zip(pixels, owners) if o == k),
            )
        )
    return SegmentationSet(width=width, height=height, masks=tuple(masks))
