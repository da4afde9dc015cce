"""
On-line time warping against reference performances that are already aligned to the score.

Both sides are 10 ms frames of sounding pitches. The reference grid starts at its first onset
rounded down to a frame boundary, which is also how the windower phases live input, so an
unwarped replay of the reference lands on the same frame indices.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from ..midi_io import WINDOW_SEC, frame_index, grid_origin
from ..models import ONSET_TOLERANCE, InputWindow, OnsetGrid, ReferencePerformance, ScorePositionEstimate

logger = logging.getLogger(__name__)

N_PITCHES = 128
SUSTAIN_CAP_SEC = 2.0
_TIE = 1e-9


@dataclass(frozen=True)
class FrameSequence:
    frames: np.ndarray
    frame_points: np.ndarray
    score_points: np.ndarray
    start_sec: float
    hop_sec: float = WINDOW_SEC

    def __len__(self) -> int:
        return len(self.frames)

    def frame_to_score(self, index: float) -> float:
        return float(np.interp(index, self.frame_points, self.score_points))

    def onset_index(self, score_position: float) -> int:
        return max(int(np.searchsorted(self.score_points, score_position + ONSET_TOLERANCE, side="right")) - 1, 0)


def jaccard_distance(frame: np.ndarray, frames: np.ndarray) -> np.ndarray:
    """1 - |a & b| / |a | b| of `frame` against every row of `frames`; two silent frames are identical."""
    frames = np.atleast_2d(frames)
    intersection = (frames & frame).sum(axis=1)
    union = (frames | frame).sum(axis=1)
    return np.where(union == 0, 0.0, 1.0 - intersection / np.maximum(union, 1))


def jaccard_matrix(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    q = query.astype(np.int32)
    r = reference.astype(np.int32)
    intersection = q @ r.T
    union = q.sum(axis=1)[:, None] + r.sum(axis=1)[None, :] - intersection
    return np.where(union == 0, 0.0, 1.0 - intersection / np.maximum(union, 1))


def featurize_reference(ref: ReferencePerformance, hop_sec: float = WINDOW_SEC) -> FrameSequence:
    if not ref.notes:
        raise ValueError("reference performance has no notes")
    start = grid_origin(min(n.onset_sec for n in ref.notes), hop_sec)
    spans = []
    for note in ref.notes:
        offset = min(note.offset_sec, note.onset_sec + SUSTAIN_CAP_SEC)
        begin = frame_index(note.onset_sec, start, hop_sec)
        end = max(int(math.ceil((offset - start) / hop_sec - 1e-9)), begin + 1)
        spans.append((note.pitch, begin, end))

    n_frames = max(end for _, _, end in spans) + 1
    frames = np.zeros((n_frames, N_PITCHES), dtype=bool)
    for pitch, begin, end in spans:
        frames[begin:end, pitch] = True

    points: Dict[int, float] = {}
    for score_onset, perf_onset in ref.alignment:
        k = frame_index(perf_onset, start, hop_sec)
        points[k] = max(points.get(k, -math.inf), score_onset)
    keys = sorted(points)
    scores = np.maximum.accumulate(np.array([points[k] for k in keys], dtype=float))
    return FrameSequence(frames, np.array(keys, dtype=float), scores, start, hop_sec)


class InputFramer:
    """Turns windows into sustained pitch-activity frames matching `featurize_reference`."""

    def __init__(self):
        self.active: Dict[int, float] = {}

    def frame(self, window: InputWindow) -> np.ndarray:
        start = window.window_start_sec
        for pitch in [p for p, onset in self.active.items() if onset < start - SUSTAIN_CAP_SEC + 1e-9]:
            del self.active[pitch]

        sounding = {p for p in self.active if window.releases.get(p, math.inf) > start + 1e-9}
        sounding.update(window.onsets)
        frame = np.zeros(N_PITCHES, dtype=bool)
        frame[sorted(sounding)] = True

        for pitch, released in window.releases.items():
            onset = window.onset_times.get(pitch)
            if onset is None or onset <= released:
                self.active.pop(pitch, None)
        for pitch in window.onsets:
            released = window.releases.get(pitch)
            if released is None or window.onset_times.get(pitch, window.window_end_sec) > released:
                self.active[pitch] = window.onset_times.get(pitch, window.window_end_sec)
        return frame


@dataclass
class OltwState:
    ref: FrameSequence
    window_size_frames: int = 200
    step_size_frames: int = 10
    current_ref_index: int = 0
    input_index: int = -1
    row: Optional[np.ndarray] = None
    run_extra: int = 0
    reported_position: Optional[float] = None
    end_of_reference: bool = False
    framer: InputFramer = field(default_factory=InputFramer)

    def __post_init__(self):
        if self.window_size_frames < 1 or self.step_size_frames < 1:
            raise ValueError("window and step sizes must be at least one frame")
        if self.step_size_frames >= self.window_size_frames:
            raise ValueError("step size must be smaller than the window size")

    @classmethod
    def create(cls, ref: FrameSequence, window_sec: float = 2.0, step_sec: float = 0.1) -> "OltwState":
        return cls(ref, int(round(window_sec / ref.hop_sec)), int(round(step_sec / ref.hop_sec)))

    @property
    def endpoint_cost(self) -> float:
        if self.row is None:
            return math.inf
        return float(self.row[len(self.ref) - 1])


def _estimate(state: OltwState, timestamp: float, confidence: float) -> ScorePositionEstimate:
    position = state.ref.frame_to_score(state.current_ref_index)
    if state.reported_position is not None:
        position = max(position, state.reported_position)
    state.reported_position = position
    return ScorePositionEstimate(position, state.ref.onset_index(position), confidence, timestamp, state.end_of_reference)


def _extend(state: OltwState, frame: np.ndarray) -> Tuple[int, int]:
    """Adds one input row to the banded cost matrix; returns the band [lo, hi)."""
    m = len(state.ref)
    hi = min(m, state.current_ref_index + state.step_size_frames + 1)
    lo = max(0, hi - state.window_size_frames)
    costs = jaccard_distance(frame, state.ref.frames[lo:hi])
    row = np.full(m, math.inf)
    if state.row is None:
        row[lo:hi] = np.cumsum(costs)
    else:
        prev = state.row
        diagonal = np.full(hi - lo, math.inf)
        if lo > 0:
            diagonal[0] = prev[lo - 1]
        diagonal[1:] = prev[lo:hi - 1]
        tmp = costs + np.minimum(prev[lo:hi], diagonal)
        cumulative = np.cumsum(costs)
        row[lo:hi] = cumulative + np.minimum.accumulate(tmp - cumulative)
    state.row = row
    return lo, hi


def oltw_step(state: OltwState, window: InputWindow) -> Tuple[OltwState, ScorePositionEstimate]:
    """Advance the alignment by one input frame. The state is updated in place and returned."""
    frame = state.framer.frame(window)
    if state.row is None and not frame.any():
        return state, _estimate(state, window.window_end_sec, 1.0)

    state.input_index += 1
    m = len(state.ref)
    lo, hi = _extend(state, frame)
    t = state.input_index
    cur = state.current_ref_index

    reach = state.step_size_frames if state.run_extra < state.step_size_frames else 1
    candidates = range(cur, min(cur + reach, hi - 1) + 1)
    normalized = {j: state.row[j] / (t + j + 2) for j in candidates if math.isfinite(state.row[j])}

    if state.input_index == 0:
        order = sorted(normalized)
    else:
        order = sorted(j for j in normalized if j > cur) + [cur]
    best = min(normalized.values()) if normalized else math.inf
    chosen = next((j for j in order if j in normalized and normalized[j] <= best + _TIE), cur)

    jump = chosen - cur
    state.run_extra = state.run_extra + jump - 1 if jump > 1 else 0
    state.current_ref_index = chosen

    if chosen >= m - 1 and not state.end_of_reference:
        state.end_of_reference = True
        logger.warning(f"reference exhausted at input frame {t}, position pinned to the final onset")

    confidence = 1.0 - min(best, 1.0) if math.isfinite(best) else 0.0
    return state, _estimate(state, window.window_end_sec, confidence)


def combine_estimates(
    estimates: Sequence[ScorePositionEstimate], timestamp: float, previous: Optional[float] = None, ref: Optional[FrameSequence] = None
) -> ScorePositionEstimate:
    """Mean score position of the members, never behind `previous`."""
    position = float(np.mean([e.score_onset_beats for e in estimates]))
    if previous is not None:
        position = max(position, previous)
    return ScorePositionEstimate(
        score_onset_beats=position,
        onset_index=ref.onset_index(position) if ref is not None else estimates[0].onset_index,
        confidence=float(np.mean([e.confidence for e in estimates])),
        timestamp_sec=timestamp,
        end_of_reference=all(e.end_of_reference for e in estimates),
    )


def ensemble_step(followers: Sequence[OltwState], window: InputWindow, previous: Optional[float] = None) -> ScorePositionEstimate:
    """Steps every follower with the same window and reports the mean score position."""
    if not followers:
        raise ValueError("an ensemble needs at least one follower")
    estimates = [oltw_step(state, window)[1] for state in followers]
    return combine_estimates(estimates, window.window_end_sec, previous, followers[0].ref)


class OltwEnsemble:
    """Ensemble of OLTW followers, one per reference performance."""

    kind = "oltw"

    def __init__(self, references: Sequence[ReferencePerformance], grid: Optional[OnsetGrid] = None, window_sec: float = 2.0, step_sec: float = 0.1):
        if not references:
            raise ValueError("the OLTW follower needs at least one reference performance")
        self.grid = grid
        self.window_sec = window_sec
        self.step_sec = step_sec
        self.sequences = [featurize_reference(ref) for ref in references]
        self.followers = [OltwState.create(seq, window_sec, step_sec) for seq in self.sequences]
        self.estimate: Optional[ScorePositionEstimate] = None

    def step(self, window: InputWindow) -> ScorePositionEstimate:
        previous = self.estimate.score_onset_beats if self.estimate is not None else None
        estimate = ensemble_step(self.followers, window, previous)
        if self.grid is not None:
            estimate = ScorePositionEstimate(
                estimate.score_onset_beats,
                max(self.grid.index_at(estimate.score_onset_beats), 0),
                estimate.confidence,
                estimate.timestamp_sec,
                estimate.end_of_reference,
            )
        self.estimate = estimate
        return estimate
