"""Parameter-efficient fine-tuning toolkit for time-series forecasting
transformers: a desk-scale Chronos-style encoder-decoder, five adapter
families (LoRA, BitFit, LN tuning, VeRA, FourierFT), the ICU-vitals
preprocessing recipe, probabilistic evaluation, and exact trainable
parameter accounting."""

__version__ = "0.1.0"
