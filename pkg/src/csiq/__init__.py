"""CSI feedback codec toolkit.

Synthetic channel generation, delay-domain preprocessing, a learnable
codeword quantizer trained end to end through a soft-rounding surrogate,
uniform and mu-law baselines, magnitude-adaptive phase quantization,
arithmetic entropy coding, and an experiment harness with a CLI.
"""

__version__ = "0.1.0"

__all__ = [
    "bitstream",
    "channelgen",
    "codec",
    "gradflow",
    "harness",
    "phaseq",
    "quantizers",
]
