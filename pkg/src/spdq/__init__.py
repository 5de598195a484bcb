"""Low-bit weight quantization with staged, distillation-based QAT.

The package is organized around six pieces: a numpy-backed reverse-mode
autodiff engine (``autodiff``), the group-wise bilevel weight codec
(``quant``), offline calibration via clip search and adaptive rounding
(``calibration``), the bidirectional distillation losses (``distill``), the
staged vision / projector / language training pipeline over a synthetic
two-tower model (``model``, ``data``, ``pipeline``), and the run harness
(``config``, ``container``, ``cli``).
"""

__version__ = "0.1.0"
