"""Part-factorized generative modeling of polyphonic scores."""

from .score import Beats, Event, Part, Score, beats, event

__all__ = ["Beats", "Event", "Part", "Score", "beats", "event"]
__version__ = "0.1.0"
