"""
Synthetic duet corpus: a solo melody over accompaniment chords, rendered under a tempo profile
with optional onset jitter and grace-note ornaments. Piece names carry the corpus version; every
piece has a fixed seed.
"""
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .models import PerformedNote, Part, ReferencePerformance, Score, ScoreNote

CORPUS_VERSION = 1

SCALE = (60, 62, 64, 65, 67, 69, 71, 72, 74, 76)
CHORDS = ((48, 55, 64), (53, 57, 60), (55, 59, 62), (45, 52, 60))
ARTICULATION = 0.9

GRACE_PREFIX = "g"
GRACE_BEATS = Fraction(1, 32)
GRACE_NOTES = 3
GRACE_SEC = 0.06


def rng_for(seed: int) -> np.random.Generator:
    """The seeded generator every experiment uses (PCG64)."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class TempoProfile:
    """
    Beat period over score position: `constant`, `ritardando` (linear slow-down by `amount` over
    `length` beats) or `rubato` (sinusoid of relative depth `amount` and period `length` beats).
    The shape begins at beat `start`; before it the beat period is constant.
    """

    kind: str = "constant"
    beat_period: float = 0.5
    amount: float = 0.0
    length: float = 32.0
    start: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "ritardando", "rubato"):
            raise ValueError(f"unknown tempo profile {self.kind!r}")
        if self.beat_period <= 0 or self.length <= 0:
            raise ValueError("beat period and length must be positive")
        if self.start < 0:
            raise ValueError(f"start must not be negative, got {self.start}")

    def period_at(self, beats: float) -> float:
        x = max(beats - self.start, 0.0)
        if self.kind == "ritardando":
            return self.beat_period * (1.0 + self.amount * x / self.length)
        if self.kind == "rubato":
            return self.beat_period * (1.0 + self.amount * math.sin(2.0 * math.pi * x / self.length))
        return self.beat_period

    def time_at(self, beats: float) -> float:
        """Performed time of a score position: the integral of the beat period."""
        b, a, length = self.beat_period, self.amount, self.length
        x = max(beats - self.start, 0.0)
        if self.kind == "ritardando":
            return b * (beats + a * x ** 2 / (2.0 * length))
        if self.kind == "rubato":
            return b * (beats + a * length / (2.0 * math.pi) * (1.0 - math.cos(2.0 * math.pi * x / length)))
        return b * beats


@dataclass(frozen=True)
class SyntheticPiece:
    name: str
    seed: int
    score: Score
    solo: Tuple[PerformedNote, ...]
    accompaniment: Tuple[PerformedNote, ...]
    solo_alignment: Tuple[Tuple[float, float], ...]
    accompaniment_alignment: Tuple[Tuple[float, float], ...]
    profile: TempoProfile

    def solo_reference(self) -> ReferencePerformance:
        return ReferencePerformance(self.solo, self.solo_alignment)

    def accompaniment_reference(self) -> ReferencePerformance:
        return ReferencePerformance(self.accompaniment, self.accompaniment_alignment)


def is_grace(note: ScoreNote) -> bool:
    return note.id.startswith(GRACE_PREFIX)


def _grace_steps(note: ScoreNote) -> int:
    """How many grace slots before its main note a grace note sits (ids are `g<melody index>-<slot>`)."""
    return GRACE_NOTES - int(note.id.rsplit("-", 1)[1])


def compose(n_onsets: int, seed: int, chord_every: int = 2, ornament_every: int = 0, ornament_from: int = 0) -> Score:
    """
    A melody of `n_onsets` notes (half or whole beats, no repeated pitch twice in a row) over block chords.
    With `ornament_every`, every such melody note from index `ornament_from` on is preceded by
    `GRACE_NOTES` grace notes of `GRACE_BEATS` that take their time from the previous note.
    """
    rng = rng_for(seed)
    notes: List[ScoreNote] = []
    onset = Fraction(0)
    previous = None
    for i in range(n_onsets):
        duration = Fraction(1, 2) if rng.random() < 0.3 else Fraction(1)
        choices = [p for p in SCALE if p != previous]
        pitch = int(choices[int(rng.integers(len(choices)))])
        if ornament_every and i >= max(ornament_from, 1) and i % ornament_every == 0:
            notes[-1] = replace(notes[-1], duration_beats=notes[-1].duration_beats - GRACE_NOTES * GRACE_BEATS)
            for j in range(GRACE_NOTES):
                steps = GRACE_NOTES - j
                notes.append(ScoreNote(f"{GRACE_PREFIX}{i}-{j}", pitch + steps, onset - steps * GRACE_BEATS, GRACE_BEATS, Part.SOLO))
        notes.append(ScoreNote(f"s{i}", pitch, onset, duration, Part.SOLO))
        previous = pitch
        onset += duration

    end = onset
    chord_onset = Fraction(0)
    k = 0
    while chord_onset < end:
        duration = min(Fraction(chord_every), end - chord_onset)
        for j, pitch in enumerate(CHORDS[k % len(CHORDS)]):
            notes.append(ScoreNote(f"a{k}-{j}", pitch, chord_onset, duration, Part.ACCOMPANIMENT))
        chord_onset += chord_every
        k += 1
    return Score(tuple(notes), initial_bpm=None)


def performance_timing(score: Score, profile: TempoProfile, grace_sec: float = GRACE_SEC) -> Callable[[Fraction], float]:
    """
    Nominal performed time (from the start) of a score position. Grace notes are played `grace_sec`
    apart ahead of their main note whatever the tempo; everything else follows the profile.
    """
    graces: Dict[Fraction, float] = {}
    for note in score.part_notes(Part.SOLO):
        if is_grace(note):
            steps = _grace_steps(note)
            main = note.onset_beats + steps * GRACE_BEATS
            graces[note.onset_beats] = profile.time_at(float(main)) - steps * grace_sec

    def timing(beats: Fraction) -> float:
        if beats in graces:
            return graces[beats]
        return profile.time_at(float(beats))

    return timing


def _perform(
    notes: Sequence[ScoreNote],
    timing: Callable[[Fraction], float],
    jitter: Dict[Fraction, float],
    start_sec: float,
    velocity: int,
    rng: np.random.Generator,
) -> Tuple[List[PerformedNote], List[Tuple[float, float]]]:
    performed, alignment = [], {}
    for note in notes:
        onset = start_sec + timing(note.onset_beats) + jitter.get(note.onset_beats, 0.0)
        offset = start_sec + timing(note.offset_beats)
        duration = max((offset - onset) * ARTICULATION, 0.01)
        performed.append(PerformedNote(note.pitch, onset, duration, int(velocity + rng.integers(-8, 9))))
        alignment[float(note.onset_beats)] = onset
    return performed, sorted(alignment.items())


def generate_piece(
    name: str,
    n_onsets: int,
    profile: TempoProfile,
    jitter_sec: float = 0.0,
    seed: int = 0,
    start_sec: float = 1.0,
    ornament_every: int = 0,
    ornament_from: int = 0,
    grace_sec: float = GRACE_SEC,
) -> SyntheticPiece:
    score = compose(n_onsets, seed, ornament_every=ornament_every, ornament_from=ornament_from)
    timing = performance_timing(score, profile, grace_sec)
    rng = rng_for(seed + 1)

    jitter: Dict[Fraction, float] = {}
    if jitter_sec > 0:
        onsets = sorted({n.onset_beats for n in score.notes})
        noise = rng.normal(0.0, jitter_sec, len(onsets))
        # keep the jittered onsets in score order
        times = [start_sec + timing(o) + e for o, e in zip(onsets, noise)]
        for k in range(1, len(times)):
            times[k] = max(times[k], times[k - 1] + 0.02)
        jitter = {o: t - start_sec - timing(o) for o, t in zip(onsets, times)}

    solo, solo_alignment = _perform(score.part_notes(Part.SOLO), timing, jitter, start_sec, 72, rng)
    accompaniment, accompaniment_alignment = _perform(score.part_notes(Part.ACCOMPANIMENT), timing, jitter, start_sec, 56, rng)
    return SyntheticPiece(
        name=name,
        seed=seed,
        score=score,
        solo=tuple(solo),
        accompaniment=tuple(accompaniment),
        solo_alignment=tuple(solo_alignment),
        accompaniment_alignment=tuple(accompaniment_alignment),
        profile=profile,
    )


def expressive_piece(seed: int = 7, n_onsets: int = 96, jitter_sec: float = 0.003) -> Tuple[SyntheticPiece, SyntheticPiece]:
    """
    An ornamented rubato piece with jitter, and its jitter-free rendition to serve as the tempo
    reference. The tempo holds for the opening bars, then swells every two bars; from the 24th
    melody note on, every sixth one is preceded by a slide of grace notes played at a fixed speed.
    """
    profile = TempoProfile("rubato", 0.5, 0.05, 8.0, start=12.0)
    ornaments = dict(ornament_every=6, ornament_from=24)
    test = generate_piece(f"ornamented-jitter-v{CORPUS_VERSION}", n_onsets, profile, jitter_sec, seed, **ornaments)
    reference = generate_piece(f"ornamented-v{CORPUS_VERSION}", n_onsets, profile, 0.0, seed, **ornaments)
    return test, reference


def default_corpus(n_onsets: int = 200) -> List[SyntheticPiece]:
    v = CORPUS_VERSION
    return [
        generate_piece(f"constant-v{v}", n_onsets, TempoProfile("constant", 0.5), seed=11),
        generate_piece(f"ritardando-v{v}", n_onsets, TempoProfile("ritardando", 0.45, 0.5, 200.0), seed=12),
        generate_piece(f"rubato-v{v}", n_onsets, TempoProfile("rubato", 0.5, 0.05, 32.0), seed=13),
        generate_piece(f"rubato-jitter-v{v}", n_onsets, TempoProfile("rubato", 0.5, 0.05, 32.0), jitter_sec=0.02, seed=13),
    ]


def piece_by_name(name: str, n_onsets: int = 200) -> Optional[SyntheticPiece]:
    return next((p for p in default_corpus(n_onsets) if p.name == name), None)
