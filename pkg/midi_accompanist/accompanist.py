"""
Encoder of the soloist's expression and decoder/scheduler of the accompaniment.

The encoder reads tempo, articulation, dynamics and micro-timing off aligned soloist onsets.
The decoder renders accompaniment notes from those parameters and the tempo model's prediction.
"""
import bisect
import heapq
import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .midi_io import TrackedNote
from .models import (
    ONSET_TOLERANCE,
    AccompanimentEvent,
    ExpressiveParams,
    OnsetGrid,
    Part,
    ReferencePerformance,
    Score,
    ScoreNote,
    clamp_beat_period,
)
from .tempo_models import TempoModelState

logger = logging.getLogger(__name__)

MIN_DURATION_SEC = 0.01


@dataclass(frozen=True)
class AccompanistConfig:
    balance: float = 0.8
    velocity_ema: float = 0.7
    retime_horizon_ms: float = 20.0
    max_skip: int = 4

    def __post_init__(self):
        if self.balance <= 0:
            raise ValueError(f"balance must be positive, got {self.balance}")
        if not 0.0 <= self.velocity_ema < 1.0:
            raise ValueError(f"velocity_ema must be within [0, 1), got {self.velocity_ema}")
        if self.retime_horizon_ms < 0:
            raise ValueError("retime_horizon_ms must not be negative")
        if self.max_skip < 1:
            raise ValueError("max_skip must be at least 1")


@dataclass(frozen=True)
class AlignedOnset:
    """A soloist chord the follower placed on a score onset."""

    perf_onset_sec: float
    score_onset_beats: float
    notes: Sequence[TrackedNote] = ()
    completed: Sequence[Tuple[TrackedNote, float]] = ()
    prev_perf_onset_sec: Optional[float] = None
    prev_score_onset_beats: Optional[float] = None
    note_ids: Dict[int, str] = field(default_factory=dict)

    @property
    def delta_perf(self) -> Optional[float]:
        if self.prev_perf_onset_sec is None:
            return None
        return self.perf_onset_sec - self.prev_perf_onset_sec

    @property
    def delta_score(self) -> Optional[float]:
        if self.prev_score_onset_beats is None:
            return None
        return self.score_onset_beats - self.prev_score_onset_beats


def encode_soloist(onset: AlignedOnset, previous: Optional[ExpressiveParams], default_beat_period: float, velocity_ema: float = 0.7) -> ExpressiveParams:
    """
    b = δperf / δscore, a = mean log2(dp / (ds * b)) over notes that have been released,
    velocity = EMA of chord-mean velocity, and ξ = note onset - chord onset.
    """
    if onset.delta_perf is not None and onset.delta_score and onset.delta_perf > 0:
        beat_period = clamp_beat_period(onset.delta_perf / onset.delta_score)
    elif previous is not None:
        beat_period = previous.beat_period
    else:
        beat_period = default_beat_period

    ratios = [
        math.log2(note.duration_sec / (score_duration * beat_period))
        for note, score_duration in onset.completed
        if note.duration_sec and score_duration > 0
    ]
    if ratios:
        articulation = float(np.mean(ratios))
    else:
        articulation = previous.articulation_log_ratio if previous is not None else 0.0

    if onset.notes:
        chord_velocity = float(np.mean([n.velocity for n in onset.notes]))
        if previous is None:
            velocity = chord_velocity
        else:
            velocity = velocity_ema * previous.velocity + (1.0 - velocity_ema) * chord_velocity
    else:
        velocity = previous.velocity if previous is not None else 64.0

    microtiming = {
        onset.note_ids.get(n.pitch, f"pitch-{n.pitch}"): n.onset_sec - onset.perf_onset_sec
        for n in onset.notes
    }
    return ExpressiveParams(
        velocity=min(max(velocity, 1.0), 127.0),
        beat_period=beat_period,
        articulation_log_ratio=articulation,
        microtiming=microtiming,
    )


@dataclass(frozen=True)
class AccompanimentReference:
    """Per-note micro-timing and velocity ratio taken from a recorded accompaniment."""

    microtiming: Dict[str, float]
    velocity_ratio: Dict[str, float]

    @classmethod
    def from_performance(cls, score: Score, ref: ReferencePerformance, tolerance_sec: float = 0.05) -> "AccompanimentReference":
        notes = score.part_notes(Part.ACCOMPANIMENT)
        chords: Dict[float, List[ScoreNote]] = {}
        for note in notes:
            chords.setdefault(float(note.onset_beats), []).append(note)

        performed = sorted(ref.notes, key=lambda n: n.onset_sec)
        performed_onsets = [n.onset_sec for n in performed]
        used = set()
        microtiming, velocity_ratio = {}, {}
        for score_onset, chord in chords.items():
            chord_onset = ref.perf_time_at(score_onset)
            lo = bisect.bisect_left(performed_onsets, chord_onset - tolerance_sec)
            hi = bisect.bisect_right(performed_onsets, chord_onset + tolerance_sec)
            matched = {}
            for note in chord:
                candidates = [k for k in range(lo, hi) if k not in used and performed[k].pitch == note.pitch]
                if candidates:
                    k = min(candidates, key=lambda k: abs(performed_onsets[k] - chord_onset))
                    used.add(k)
                    matched[note.id] = performed[k]
            if not matched:
                continue
            mean_velocity = float(np.mean([n.velocity for n in matched.values()]))
            for note_id, perf_note in matched.items():
                microtiming[note_id] = perf_note.onset_sec - chord_onset
                velocity_ratio[note_id] = perf_note.velocity / mean_velocity
        return cls(microtiming, velocity_ratio)


def decode_accompaniment(
    params: ExpressiveParams,
    tempo_state: TempoModelState,
    notes: Sequence[ScoreNote],
    anchor_beats: float,
    reference: Optional[AccompanimentReference] = None,
    balance: float = 0.8,
) -> List[AccompanimentEvent]:
    """
    Renders `notes` around the tempo model's predicted onset, which belongs to score position
    `anchor_beats`. Onsets away from the anchor are extrapolated at the model's beat period.
    """
    beat_period = tempo_state.b
    anchor_sec = tempo_state.o_hat
    if anchor_sec is None:
        raise ValueError("the tempo model has not observed an onset yet")

    events = []
    for note in notes:
        score_onset = float(note.onset_beats)
        xi = reference.microtiming.get(note.id, 0.0) if reference else 0.0
        ratio = reference.velocity_ratio.get(note.id, 1.0) if reference else 1.0
        duration = max(2.0 ** params.articulation_log_ratio * float(note.duration_beats) * beat_period, MIN_DURATION_SEC)
        velocity = int(min(max(round(balance * params.velocity * ratio), 1), 127))
        events.append(
            AccompanimentEvent(
                pitch=note.pitch,
                onset_sec=anchor_sec + (score_onset - anchor_beats) * beat_period + xi,
                duration_sec=duration,
                velocity=velocity,
                source_note_id=note.id,
                score_onset_beats=score_onset,
                beat_period=beat_period,
                microtiming=xi,
            )
        )
    return sorted(events, key=lambda e: (e.onset_sec, e.pitch))


def select_accompaniment(
    notes: Sequence[ScoreNote], grid: OnsetGrid, last_index: Optional[int], index: int, max_skip: int = 4
) -> Tuple[List[ScoreNote], int]:
    """
    Accompaniment notes owed once the soloist reached onset `index`: those up to the next solo onset
    that the step at `last_index` did not already cover. A jump over more than `max_skip` onsets
    drops the notes of the older skipped onsets; the second value counts them.
    """
    onsets = grid.onsets
    upper = onsets[index + 1] if index + 1 < len(onsets) else math.inf
    if last_index is None:
        covered = -math.inf
    elif last_index + 1 < len(onsets):
        covered = onsets[last_index + 1]
    else:
        covered = math.inf
    skipped = last_index is not None and index - last_index > max_skip
    floor = onsets[index - max_skip] if skipped else -math.inf

    selected, dropped = [], 0
    for note in notes:
        s = float(note.onset_beats)
        if s <= covered + ONSET_TOLERANCE or s > upper + ONSET_TOLERANCE:
            continue
        if s <= floor + ONSET_TOLERANCE:
            dropped += 1
            continue
        selected.append(note)
    if dropped:
        logger.warning(f"soloist jumped {index - last_index} onsets, {dropped} accompaniment notes dropped")
    return selected, dropped


@dataclass(order=True)
class _Pending:
    onset_sec: float
    sequence: int
    event: AccompanimentEvent = field(compare=False)


class Scheduler:
    """
    Pending accompaniment events. Re-timing moves only events at least `horizon_sec` in the future;
    events already handed out are never retracted.
    """

    def __init__(self, horizon_sec: float = 0.02):
        self.horizon_sec = horizon_sec
        self._heap: List[_Pending] = []
        self._sequence = itertools.count()

    def __len__(self) -> int:
        return len(self._heap)

    def add(self, events: Sequence[AccompanimentEvent]):
        for event in events:
            heapq.heappush(self._heap, _Pending(event.onset_sec, next(self._sequence), event))

    def retime(self, now: float, anchor_sec: float, anchor_beats: float, beat_period: float) -> int:
        moved = 0
        entries = []
        for pending in self._heap:
            event = pending.event
            if event.onset_sec >= now + self.horizon_sec:
                onset = anchor_sec + (event.score_onset_beats - anchor_beats) * beat_period + event.microtiming
                duration = max(event.duration_sec * beat_period / event.beat_period, MIN_DURATION_SEC)
                event = replace(event, onset_sec=onset, duration_sec=duration, beat_period=beat_period)
                moved += 1
            entries.append(_Pending(event.onset_sec, pending.sequence, event))
        heapq.heapify(entries)
        self._heap = entries
        return moved

    def due(self, now: float) -> List[AccompanimentEvent]:
        events = []
        while self._heap and self._heap[0].onset_sec <= now:
            events.append(heapq.heappop(self._heap).event)
        return events

    def drain(self) -> List[AccompanimentEvent]:
        events = [heapq.heappop(self._heap).event for _ in range(len(self._heap))]
        return events

    @property
    def next_onset(self) -> Optional[float]:
        return self._heap[0].onset_sec if self._heap else None
