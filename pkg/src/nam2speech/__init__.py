"""Desk-scale NAM-to-speech toolkit: DSP, alignment, CTC, diffusion, seq2seq and WER."""

__version__ = "0.1.0"
