"""trajseq: desk-scale conditional sequence modeling for driving trajectories."""

__version__ = "0.1.0"
