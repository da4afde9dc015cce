"""Score followers: each exposes `step(window) -> ScorePositionEstimate` and a `grid`."""
from typing import Optional, Sequence

from ..models import OnsetGrid, ReferencePerformance
from .hmm import HmmConfig, HmmFollower
from .oltw import OltwEnsemble

FOLLOWER_KINDS = ("hmm", "oltw")


def create_follower(
    kind: str,
    grid: OnsetGrid,
    references: Sequence[ReferencePerformance] = (),
    initial_bpm: float = 120.0,
    hmm_config: Optional[HmmConfig] = None,
    window_sec: float = 2.0,
    step_sec: float = 0.1,
):
    if kind == "hmm":
        return HmmFollower(grid, hmm_config, initial_bpm)
    if kind == "oltw":
        return OltwEnsemble(references, grid, window_sec, step_sec)
    raise ValueError(f"unknown follower {kind!r}, valid followers: {', '.join(FOLLOWER_KINDS)}")
