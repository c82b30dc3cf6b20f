"""Silent-speech sentence recognition from facial inertial sensors.

Preprocessing, synthetic data and augmentation, a small reverse-mode
autodiff engine, a Conformer-lite encoder, CTC loss and decoding, training
and the evaluation protocols.
"""

__version__ = "0.1.0"
