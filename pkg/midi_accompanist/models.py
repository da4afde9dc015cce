from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum
from fractions import Fraction
from functools import cached_property
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import AlignmentError, ScoreFormatError

MIN_BEAT_PERIOD = 0.05
MAX_BEAT_PERIOD = 5.0
ONSET_TOLERANCE = 1e-9


class Part(str, Enum):
    SOLO = "solo"
    ACCOMPANIMENT = "accompaniment"


@dataclass(frozen=True)
class ScoreNote:
    id: str
    pitch: int
    onset_beats: Fraction
    duration_beats: Fraction
    part: Part

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ScoreFormatError(f"note {self.id}: pitch {self.pitch} outside [0, 127]")
        if self.duration_beats <= 0:
            raise ScoreFormatError(f"note {self.id}: duration must be positive, got {self.duration_beats}")
        if self.onset_beats < 0:
            raise ScoreFormatError(f"note {self.id}: negative onset {self.onset_beats}")

    @property
    def offset_beats(self) -> Fraction:
        return self.onset_beats + self.duration_beats


@dataclass(frozen=True)
class Score:
    notes: Tuple[ScoreNote, ...]
    beats_per_measure: int = 4
    beat_unit: int = 4
    initial_bpm: Optional[Decimal] = None

    def __post_init__(self):
        seen = set()
        for note in self.notes:
            if note.id in seen:
                raise ScoreFormatError(f"duplicate note id {note.id!r}")
            seen.add(note.id)
        if self.initial_bpm is not None and self.initial_bpm <= 0:
            raise ScoreFormatError(f"initial_bpm must be positive, got {self.initial_bpm}")

    def part_notes(self, part: Part) -> List[ScoreNote]:
        return sorted(
            (n for n in self.notes if n.part == part),
            key=lambda n: (n.onset_beats, n.pitch, n.id),
        )

    def has_part(self, part: Part) -> bool:
        return any(n.part == part for n in self.notes)

    def require_duet(self):
        for part in Part:
            if not self.has_part(part):
                raise ScoreFormatError(f"score has no {part.value} notes")

    def note_by_id(self, note_id: str) -> ScoreNote:
        return self._notes_by_id[note_id]

    @cached_property
    def _notes_by_id(self) -> Dict[str, ScoreNote]:
        return {n.id: n for n in self.notes}

    @property
    def default_beat_period(self) -> float:
        bpm = self.initial_bpm if self.initial_bpm is not None else Decimal(120)
        return 60.0 / float(bpm)


@dataclass(frozen=True)
class OnsetGrid:
    """
    Distinct score onsets of one part with their inter-onset intervals.
    `pitch_sets[i]` holds every pitch sounding from onset i, `note_ids[i]` the notes starting there.
    """

    onsets: Tuple[float, ...]
    iois: Tuple[float, ...]
    pitch_sets: Tuple[FrozenSet[int], ...] = ()
    note_ids: Tuple[Tuple[str, ...], ...] = ()

    def __post_init__(self):
        if len(self.iois) != max(len(self.onsets) - 1, 0):
            raise ValueError("iois must have one entry less than onsets")
        if any(ioi <= 0 for ioi in self.iois):
            raise ValueError("onsets must be strictly increasing")

    def __len__(self) -> int:
        return len(self.onsets)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.onsets, dtype=float)

    def index_at(self, position: float) -> int:
        """Index of the last onset at or before `position` (-1 before the first onset)."""
        return bisect.bisect_right(self.onsets, position + ONSET_TOLERANCE) - 1


@dataclass(frozen=True)
class PerformedNote:
    pitch: int
    onset_sec: float
    duration_sec: float
    velocity: int

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch {self.pitch} outside [0, 127]")
        if self.onset_sec < 0:
            raise ValueError(f"negative onset {self.onset_sec}")
        if self.duration_sec <= 0:
            raise ValueError(f"duration must be positive, got {self.duration_sec}")
        if not 1 <= self.velocity <= 127:
            raise ValueError(f"velocity {self.velocity} outside [1, 127]")

    @property
    def offset_sec(self) -> float:
        return self.onset_sec + self.duration_sec


@dataclass(frozen=True)
class TempoCurve:
    """
    Beat period (sec/beat) as a function of score position.

    `beat_periods[i]` belongs to the segment starting at `score_onsets[i]`. With "step"
    interpolation the value holds over the whole segment; with "linear" it is interpolated
    between segment starts. Both extrapolate with the end values.
    """

    score_onsets: Tuple[float, ...]
    beat_periods: Tuple[float, ...]
    interpolation: str = "step"

    def __call__(self, score_onset: float) -> float:
        if self.interpolation == "linear":
            return float(np.interp(score_onset, self.score_onsets, self.beat_periods))
        idx = bisect.bisect_right(self.score_onsets, score_onset + ONSET_TOLERANCE) - 1
        return self.beat_periods[min(max(idx, 0), len(self.beat_periods) - 1)]

    @classmethod
    def mean_of(cls, curves: Sequence["TempoCurve"]) -> Callable[[float], float]:
        if len(curves) == 1:
            return curves[0]

        def averaged(score_onset: float) -> float:
            return float(np.mean([curve(score_onset) for curve in curves]))

        return averaged


@dataclass(frozen=True)
class ReferencePerformance:
    """A recorded performance together with its (score onset, performed onset) alignment."""

    notes: Tuple[PerformedNote, ...]
    alignment: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        if not self.alignment:
            raise AlignmentError("alignment is empty")
        for (s0, p0), (s1, p1) in zip(self.alignment, self.alignment[1:]):
            if s1 <= s0:
                raise AlignmentError(f"score onsets not strictly increasing at {s1}")
            if p1 <= p0:
                raise AlignmentError(f"performed onsets not strictly increasing at score onset {s1} ({p1} <= {p0})")

    @property
    def score_onsets(self) -> np.ndarray:
        return np.array([s for s, _ in self.alignment], dtype=float)

    @property
    def perf_onsets(self) -> np.ndarray:
        return np.array([p for _, p in self.alignment], dtype=float)

    def tempo_curve(self, interpolation: str = "step") -> TempoCurve:
        score_onsets = self.score_onsets
        perf_onsets = self.perf_onsets
        if len(score_onsets) < 2:
            raise AlignmentError("a tempo curve needs at least two aligned onsets")
        periods = list(np.diff(perf_onsets) / np.diff(score_onsets))
        # the last aligned onset continues the final segment's tempo
        periods.append(periods[-1])
        return TempoCurve(tuple(float(s) for s in score_onsets), tuple(float(p) for p in periods), interpolation)

    def perf_time_at(self, score_onset: float) -> float:
        return float(np.interp(score_onset, self.score_onsets, self.perf_onsets))


class EventKind(str, Enum):
    NOTE_ON = "note_on"
    NOTE_OFF = "note_off"


@dataclass(frozen=True)
class MidiEvent:
    kind: EventKind
    pitch: int
    velocity: int
    timestamp_sec: float

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch {self.pitch} outside [0, 127]")
        if not 0 <= self.velocity <= 127:
            raise ValueError(f"velocity {self.velocity} outside [0, 127]")
        if self.kind == EventKind.NOTE_ON and self.velocity == 0:
            object.__setattr__(self, "kind", EventKind.NOTE_OFF)

    @property
    def is_note_on(self) -> bool:
        return self.kind == EventKind.NOTE_ON


@dataclass(frozen=True)
class InputWindow:
    """
    One 10 ms slice of input. Every note-on inside shares `window_end_sec` as its performed
    onset; `onset_times` keeps the exact arrival times for micro-timing.
    """

    window_end_sec: float
    frame_index: int
    onsets: Dict[int, int] = field(default_factory=dict)
    onset_times: Dict[int, float] = field(default_factory=dict)
    releases: Dict[int, float] = field(default_factory=dict)
    width_sec: float = 0.01

    @property
    def pitches(self) -> FrozenSet[int]:
        return frozenset(self.onsets)

    @property
    def is_empty(self) -> bool:
        return not self.onsets

    @property
    def window_start_sec(self) -> float:
        return self.window_end_sec - self.width_sec


@dataclass(frozen=True)
class ScorePositionEstimate:
    score_onset_beats: float
    onset_index: int
    confidence: float
    timestamp_sec: float
    end_of_reference: bool = False


@dataclass(frozen=True)
class ExpressiveParams:
    velocity: float
    beat_period: float
    articulation_log_ratio: float = 0.0
    microtiming: Dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class AccompanimentEvent:
    pitch: int
    onset_sec: float
    duration_sec: float
    velocity: int
    source_note_id: str = ""
    score_onset_beats: float = 0.0
    beat_period: float = 0.5
    microtiming: float = 0.0

    def __post_init__(self):
        if self.duration_sec <= 0:
            raise ValueError(f"duration must be positive, got {self.duration_sec}")

    @property
    def offset_sec(self) -> float:
        return self.onset_sec + self.duration_sec


def clamp_beat_period(beat_period: float) -> float:
    return min(max(beat_period, MIN_BEAT_PERIOD), MAX_BEAT_PERIOD)


def chord_onsets(notes: Iterable[PerformedNote], tolerance: float = 0.0) -> List[float]:
    """Distinct sorted note onsets; onsets closer than `tolerance` collapse to the earliest."""
    result: List[float] = []
    for onset in sorted(n.onset_sec for n in notes):
        if not result or onset - result[-1] > tolerance:
            result.append(onset)
    return result
