import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from chorusbench.annotations import AnnotationSet, Event, SpeciesVocabulary
from chorusbench.synthesis import AudioClip, generate_synthetic_pool

SR = 32000


@pytest.fixture(scope="session")
def tone_pool():
    return generate_synthetic_pool(5, 12, seed=101)


@pytest.fixture
def rng():
    return np.random.default_rng(20240)


def make_tone_clip(freq=440.0, duration=5.0, sr=SR, amp=0.5, code="TONE",
                   events=None):
    t = np.arange(round(duration * sr)) / sr
    samples = amp * np.sin(2 * np.pi * freq * t)
    if events is None:
        events = (Event(0.0, duration, code),)
    return AudioClip(samples, sr,
                     AnnotationSet(tuple(events), f"{code.lower()}_{freq:g}",
                                   duration))


def random_roll(rng, vocab, n_frames, frame_hop, density=0.1):
    from chorusbench.annotations import EventRoll
    matrix = (rng.random((vocab.size, n_frames)) < density).astype(np.uint8)
    return EventRoll(matrix, frame_hop, vocab)
