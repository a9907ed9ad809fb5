"""svkit: a desk-scale speaker-verification toolkit.

Raw audio or log Mel-filterbank features go through an optional
wav2vec-style transformer encoder, a TDNN + statistics-pooling + maxout
head trained with AAM-Softmax, and a cosine / adaptive s-norm / channel
normalization scoring back-end evaluated with EER and minDCF.
"""

from svkit.errors import (
    ChunkTooShortError,
    ConfigError,
    DataError,
    SvkitError,
    WavDecodeError,
)

__version__ = "0.1.0"

__all__ = [
    "ChunkTooShortError",
    "ConfigError",
    "DataError",
    "SvkitError",
    "WavDecodeError",
    "__version__",
]
