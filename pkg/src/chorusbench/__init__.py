"""Benchmark toolkit for polyphonic detection in dense birdsong scenes.

Modules:
    annotations -- event lists, species vocabularies, event rolls
    synthesis   -- polyphony-controlled scene synthesis and augmentation
    features    -- log-mel spectrogram front end and feature cache
    crnn        -- frame-wise CRNN detector, training, checkpoints
    metrics     -- segment-based F-score / error-rate evaluation
    experiments -- orchestration, reporting, dataset statistics
"""

__version__ = "0.1.0"
