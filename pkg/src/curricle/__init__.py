"""Curriculum replacement sampling for recurrent language models."""

from . import corpus, neighbors, schedules, seqmodel, trainer

__version__ = "0.1.0"
