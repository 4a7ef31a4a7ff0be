"""Multimodal next-day volume movement prediction from news headlines and
intraday trading grids, with prompt-tuned news encoding, a pre-trained data
encoder, cross-modal alignment and a three-head ensemble."""

__version__ = "0.1.0"
