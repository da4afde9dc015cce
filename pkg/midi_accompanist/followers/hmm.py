"""
HMM score follower: a switching Kalman filter whose discrete states are the solo score onsets
(one match state and one insertion state per onset) and whose continuous state is the beat period.

State layout: index `j` is the match state of onset `j`, index `N + j` its insertion state.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from ..errors import ScoreFormatError
from ..models import InputWindow, OnsetGrid, ScorePositionEstimate

logger = logging.getLogger(__name__)

N_PITCHES = 128
LIKELIHOOD_FLOOR = 1e-300


@dataclass(frozen=True)
class HmmConfig:
    p_self: float = 0.5
    p_insert: float = 0.05
    p_insert_stay: float = 0.3
    p_skip: float = 0.1
    max_skip: int = 4
    q_match: float = 0.95
    q_spur: float = 0.02
    ioi_sigma_scale: float = 0.2
    ioi_sigma_floor: float = 0.02
    ioi_flat_density: float = 0.5
    epsilon: float = 0.01
    init_variance: float = 0.01
    process_variance: float = 1e-4
    observation_variance: float = 0.0025

    def __post_init__(self):
        for name in ("p_self", "p_insert", "p_insert_stay", "p_skip", "q_match", "q_spur", "epsilon"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must be within (0, 1), got {value}")
        if self.p_self + self.p_insert >= 1.0:
            raise ValueError("p_self + p_insert must leave probability for advancing")
        if self.max_skip < 0:
            raise ValueError(f"max_skip must not be negative, got {self.max_skip}")
        for name in ("ioi_sigma_floor", "ioi_flat_density", "init_variance", "process_variance", "observation_variance"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.ioi_sigma_scale < 0:
            raise ValueError("ioi_sigma_scale must not be negative")

    def advance_weights(self, available: int) -> np.ndarray:
        """Normalized geometric weights for advancing 1..min(max_skip + 1, available) onsets."""
        count = min(self.max_skip + 1, available)
        weights = self.p_skip ** np.arange(count, dtype=float)
        return weights / weights.sum()


@dataclass(frozen=True)
class HmmState:
    grid: OnsetGrid
    config: HmmConfig
    belief: np.ndarray
    transitions: np.ndarray
    expected: np.ndarray
    kalman_beat_period: float
    kalman_variance: float
    last_window_end_sec: Optional[float] = None
    last_onset_index: Optional[int] = None
    last_onset_sec: Optional[float] = None
    last_reported_onset_index: int = 0

    @property
    def n_onsets(self) -> int:
        return len(self.grid)


def transition_matrix(n_onsets: int, config: HmmConfig) -> np.ndarray:
    n = n_onsets
    matrix = np.zeros((2 * n, 2 * n))
    advance_mass = 1.0 - config.p_self - config.p_insert
    for i in range(n):
        matrix[i, i] = config.p_self
        matrix[i, n + i] = config.p_insert
        available = n - 1 - i
        if available:
            weights = config.advance_weights(available)
            matrix[i, i + 1:i + 1 + len(weights)] = advance_mass * weights
        else:
            matrix[i, i] += advance_mass

        matrix[n + i, n + i] = config.p_insert_stay
        exit_mass = 1.0 - config.p_insert_stay
        if available:
            weights = config.advance_weights(available)
            matrix[n + i, i + 1:i + 1 + len(weights)] = exit_mass * weights
        else:
            matrix[n + i, i] = exit_mass
    return matrix


def hmm_init(grid: OnsetGrid, config: Optional[HmmConfig] = None, initial_bpm: float = 120.0) -> HmmState:
    config = config or HmmConfig()
    n = len(grid)
    if n == 0:
        raise ScoreFormatError("the solo part has no onsets to follow")
    if initial_bpm <= 0:
        raise ValueError(f"initial_bpm must be positive, got {initial_bpm}")

    belief = np.full(2 * n, config.epsilon / max(2 * n - 1, 1))
    belief[0] = 1.0 - config.epsilon

    expected = np.zeros((2 * n, N_PITCHES))
    for j, pitches in enumerate(grid.pitch_sets):
        expected[j, sorted(pitches)] = 1.0

    return HmmState(
        grid=grid,
        config=config,
        belief=belief,
        transitions=transition_matrix(n, config),
        expected=expected,
        kalman_beat_period=60.0 / float(initial_bpm),
        kalman_variance=config.init_variance,
    )


def pitch_log_likelihood(state: HmmState, pitches) -> np.ndarray:
    c = state.config
    observed = np.zeros(N_PITCHES)
    observed[sorted(pitches)] = 1.0
    if_expected = observed * math.log(c.q_match) + (1.0 - observed) * math.log(1.0 - c.q_match)
    if_unexpected = observed * math.log(c.q_spur) + (1.0 - observed) * math.log(1.0 - c.q_spur)
    return state.expected @ if_expected + (1.0 - state.expected) @ if_unexpected


def ioi_factors(state: HmmState, ioi_sec: float) -> np.ndarray:
    """Per-transition IOI likelihood for an elapsed time of `ioi_sec` since the previous window."""
    c = state.config
    n = state.n_onsets
    onsets = state.grid.as_array()
    predicted = state.kalman_beat_period * np.clip(onsets[None, :] - onsets[:, None], 0.0, None)
    sigma = c.ioi_sigma_scale * predicted + c.ioi_sigma_floor
    density = np.exp(-0.5 * ((ioi_sec - predicted) / sigma) ** 2) / (sigma * math.sqrt(2.0 * math.pi))
    factors = np.full((2 * n, 2 * n), c.ioi_flat_density)
    factors[:n, :n] = density
    return factors


def entropy(belief: np.ndarray) -> float:
    nonzero = belief[belief > 0]
    return float(-(nonzero * np.log(nonzero)).sum())


def _kalman_update(state: HmmState, onset_index: int, window_end: float) -> Tuple[float, float]:
    c = state.config
    delta_score = state.grid.onsets[onset_index] - state.grid.onsets[state.last_onset_index]
    elapsed = window_end - state.last_onset_sec
    variance = state.kalman_variance + c.process_variance
    gain = variance * delta_score / (variance * delta_score ** 2 + c.observation_variance)
    mean = state.kalman_beat_period + gain * (elapsed - state.kalman_beat_period * delta_score)
    return mean, (1.0 - gain * delta_score) * variance


def hmm_step(state: HmmState, window: InputWindow) -> Tuple[HmmState, ScorePositionEstimate]:
    """One forward-algorithm step on a window with note-ons."""
    if window.is_empty:
        raise ValueError("empty windows bypass the HMM")
    n = state.n_onsets

    if state.last_window_end_sec is None:
        weights = state.transitions
    else:
        weights = state.transitions * ioi_factors(state, window.window_end_sec - state.last_window_end_sec)
    predicted = state.belief @ weights

    log_likelihood = pitch_log_likelihood(state, window.pitches)
    posterior = predicted * np.exp(log_likelihood - log_likelihood.max())
    posterior = np.maximum(posterior, LIKELIHOOD_FLOOR)
    posterior /= posterior.sum()

    map_state = int(np.argmax(posterior))
    is_match = map_state < n

    mean, variance = state.kalman_beat_period, state.kalman_variance
    last_onset_index, last_onset_sec = state.last_onset_index, state.last_onset_sec
    if is_match:
        if last_onset_index is None:
            last_onset_index, last_onset_sec = map_state, window.window_end_sec
        elif map_state > last_onset_index:
            mean, variance = _kalman_update(state, map_state, window.window_end_sec)
            last_onset_index, last_onset_sec = map_state, window.window_end_sec

    reported = max(map_state if is_match else state.last_reported_onset_index, state.last_reported_onset_index)
    logger.debug(
        f"hmm window {window.frame_index}: map={'match' if is_match else 'insert'}:{map_state % n} "
        f"entropy={entropy(posterior):.4f} b={mean:.4f}"
    )

    new_state = replace(
        state,
        belief=posterior,
        kalman_beat_period=mean,
        kalman_variance=variance,
        last_window_end_sec=window.window_end_sec,
        last_onset_index=last_onset_index,
        last_onset_sec=last_onset_sec,
        last_reported_onset_index=reported,
    )
    estimate = ScorePositionEstimate(
        score_onset_beats=state.grid.onsets[reported],
        onset_index=reported,
        confidence=float(posterior[map_state]),
        timestamp_sec=window.window_end_sec,
    )
    return new_state, estimate


class HmmFollower:
    """Owns an HmmState; empty windows leave the belief untouched."""

    kind = "hmm"

    def __init__(self, grid: OnsetGrid, config: Optional[HmmConfig] = None, initial_bpm: float = 120.0):
        self.state = hmm_init(grid, config, initial_bpm)
        self.estimate: Optional[ScorePositionEstimate] = None

    @property
    def grid(self) -> OnsetGrid:
        return self.state.grid

    @property
    def beat_period(self) -> float:
        return self.state.kalman_beat_period

    def step(self, window: InputWindow) -> ScorePositionEstimate:
        if window.is_empty:
            if self.estimate is None:
                return ScorePositionEstimate(self.grid.onsets[0], 0, float(self.state.belief[0]), window.window_end_sec)
            return replace(self.estimate, timestamp_sec=window.window_end_sec)
        self.state, self.estimate = hmm_step(self.state, window)
        return self.estimate
