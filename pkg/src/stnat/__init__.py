"""Spike-triggered non-autoregressive transformer for speech recognition,
built on a small numpy autodiff core."""

__version__ = "0.1.0"
