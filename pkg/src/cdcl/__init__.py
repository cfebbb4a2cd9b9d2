"""Blind super-resolution with content-decoupled contrastive degradation learning,
built on a small numpy autodiff engine."""

__version__ = "0.1.0"
