import csv
import io
import json
import logging
import os
from collections import defaultdict, deque
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import mido

from .errors import AlignmentError, MidiImportError, ScoreFormatError
from .models import ONSET_TOLERANCE, OnsetGrid, Part, PerformedNote, ReferencePerformance, Score, ScoreNote

logger = logging.getLogger(__name__)

SCORE_FORMAT_VERSION = 1
ALIGNMENT_HEADER = ["score_onset_beats", "perf_onset_sec"]
DEFAULT_PPQ = 480
DEFAULT_TEMPO = 500000  # microseconds per beat, 120 bpm


def _to_fraction(value, field_name: str, note_id: str) -> Fraction:
    if isinstance(value, bool) or not isinstance(value, (str, int)):
        raise ScoreFormatError(f"note {note_id}: {field_name} must be a decimal string, got {value!r}")
    try:
        return Fraction(Decimal(str(value)))
    except (InvalidOperation, ValueError):
        raise ScoreFormatError(f"note {note_id}: {field_name} is not a decimal: {value!r}")


def _format_beats(value: Fraction) -> str:
    if value.denominator == 1:
        return str(value.numerator)
    decimal = Decimal(value.numerator) / Decimal(value.denominator)
    return format(decimal.normalize(), "f")


def parse_score(document: Union[bytes, str], duet: bool = True) -> Score:
    """
    Parse a score document:

        {"version": 1, "time_signature": "3/4", "initial_bpm": "96",
         "notes": [{"id": "s1", "pitch": 60, "onset_beats": "0", "duration_beats": "1.5", "part": "solo"}, ...]}
    """
    try:
        data = json.loads(document)
    except (json.JSONDecodeError, UnicodeDecodeError) as ex:
        raise ScoreFormatError(f"score document is not valid JSON: {ex}")

    if not isinstance(data, dict):
        raise ScoreFormatError("score document must be an object")
    if data.get("version") != SCORE_FORMAT_VERSION:
        raise ScoreFormatError(f"unsupported score document version {data.get('version')!r}")

    time_signature = str(data.get("time_signature", "4/4"))
    try:
        beats_per_measure, beat_unit = (int(v) for v in time_signature.split("/"))
    except ValueError:
        raise ScoreFormatError(f"malformed time signature {time_signature!r}")

    initial_bpm = None
    if data.get("initial_bpm") is not None:
        try:
            initial_bpm = Decimal(str(data["initial_bpm"]))
        except InvalidOperation:
            raise ScoreFormatError(f"malformed initial_bpm {data['initial_bpm']!r}")

    raw_notes = data.get("notes")
    if not isinstance(raw_notes, list) or not raw_notes:
        raise ScoreFormatError("score document has no notes")

    notes = []
    for i, raw in enumerate(raw_notes):
        if not isinstance(raw, dict):
            raise ScoreFormatError(f"note #{i} is not an object")
        missing = {"id", "pitch", "onset_beats", "duration_beats", "part"} - raw.keys()
        if missing:
            raise ScoreFormatError(f"note #{i} is missing {', '.join(sorted(missing))}")
        note_id = str(raw["id"])
        if isinstance(raw["pitch"], bool) or not isinstance(raw["pitch"], int):
            raise ScoreFormatError(f"note {note_id}: pitch must be an integer")
        try:
            part = Part(raw["part"])
        except ValueError:
            raise ScoreFormatError(f"note {note_id}: unknown part {raw['part']!r}")
        notes.append(
            ScoreNote(
                id=note_id,
                pitch=raw["pitch"],
                onset_beats=_to_fraction(raw["onset_beats"], "onset_beats", note_id),
                duration_beats=_to_fraction(raw["duration_beats"], "duration_beats", note_id),
                part=part,
            )
        )

    score = Score(
        notes=tuple(notes),
        beats_per_measure=beats_per_measure,
        beat_unit=beat_unit,
        initial_bpm=initial_bpm,
    )
    if duet:
        score.require_duet()
    return score


def dump_score(score: Score) -> bytes:
    data = {
        "version": SCORE_FORMAT_VERSION,
        "time_signature": f"{score.beats_per_measure}/{score.beat_unit}",
        "notes": [
            {
                "id": n.id,
                "pitch": n.pitch,
                "onset_beats": _format_beats(n.onset_beats),
                "duration_beats": _format_beats(n.duration_beats),
                "part": n.part.value,
            }
            for n in score.notes
        ],
    }
    if score.initial_bpm is not None:
        data["initial_bpm"] = str(score.initial_bpm)
    return json.dumps(data, indent=2).encode("utf-8")


def _open_midi(smf: bytes) -> mido.MidiFile:
    try:
        return mido.MidiFile(file=io.BytesIO(smf))
    except (OSError, EOFError, ValueError, KeyError, IndexError) as ex:
        raise MidiImportError(f"invalid standard MIDI file: {ex}")


def _collapse_onsets(ticks: Iterable[int], tolerance: int) -> Dict[int, int]:
    """Map each onset tick to the earliest tick of its cluster (neighbours within `tolerance`)."""
    mapping = {}
    anchor = previous = None
    for tick in sorted(set(ticks)):
        if previous is None or tick - previous > tolerance:
            anchor = tick
        mapping[tick] = anchor
        previous = tick
    return mapping


def import_midi_score(smf: bytes, part_map: Mapping[int, Union[Part, str]], duet: bool = True, chord_tolerance_ticks: int = 1) -> Score:
    """
    Read a type 0/1 SMF as a score. `part_map` maps track indices to parts; unmapped tracks are ignored.
    Note-offs close the earliest open note-on of the same pitch.
    """
    mid = _open_midi(smf)
    if mid.type not in (0, 1):
        raise MidiImportError(f"SMF type {mid.type} is not supported")
    if mid.ticks_per_beat <= 0:
        raise MidiImportError("SMPTE time division is not supported")
    ppq = mid.ticks_per_beat

    initial_bpm = None
    beats_per_measure, beat_unit = 4, 4
    raw: Dict[Part, List[Tuple[int, int, int, int]]] = defaultdict(list)  # part -> (on, off, pitch, track)

    for track_index, track in enumerate(mid.tracks):
        part = part_map.get(track_index)
        part = Part(part) if part is not None else None
        open_notes: Dict[int, deque] = defaultdict(deque)
        tick = 0
        for msg in track:
            tick += msg.time
            if msg.type == "set_tempo" and initial_bpm is None:
                initial_bpm = Decimal(str(round(mido.tempo2bpm(msg.tempo), 6)))
            elif msg.type == "time_signature":
                beats_per_measure, beat_unit = msg.numerator, msg.denominator
            elif part is None:
                continue
            elif msg.type == "note_on" and msg.velocity > 0:
                open_notes[msg.note].append(tick)
            elif msg.type in ("note_off", "note_on"):
                if not open_notes[msg.note]:
                    logger.warning(f"track {track_index}: note-off without note-on for pitch {msg.note} at tick {tick}")
                    continue
                on_tick = open_notes[msg.note].popleft()
                if tick == on_tick:
                    logger.warning(f"track {track_index}: dropping zero-length note {msg.note} at tick {tick}")
                    continue
                raw[part].append((on_tick, tick, msg.note, track_index))
        for pitch, ticks in open_notes.items():
            if ticks:
                raise MidiImportError(f"track {track_index}: note-on for pitch {pitch} at tick {ticks[0]} is never released")

    notes = []
    for part, entries in raw.items():
        snap = _collapse_onsets((on for on, _, _, _ in entries), chord_tolerance_ticks)
        for i, (on, off, pitch, track_index) in enumerate(sorted(entries)):
            notes.append(
                ScoreNote(
                    id=f"{part.value}-{track_index}-{i}",
                    pitch=pitch,
                    onset_beats=Fraction(snap[on], ppq),
                    duration_beats=Fraction(off - on, ppq),
                    part=part,
                )
            )

    if not notes:
        raise MidiImportError("no notes found in the mapped tracks")
    score = Score(notes=tuple(notes), beats_per_measure=beats_per_measure, beat_unit=beat_unit, initial_bpm=initial_bpm)
    if duet:
        score.require_duet()
    return score


def _track_from_events(events: List[Tuple[int, int, mido.Message]]) -> mido.MidiTrack:
    track = mido.MidiTrack()
    last = 0
    for tick, _, msg in sorted(events, key=lambda e: (e[0], e[1])):
        track.append(msg.copy(time=tick - last))
        last = tick
    track.append(mido.MetaMessage("end_of_track", time=0))
    return track


def export_midi_score(score: Score, ppq: int = DEFAULT_PPQ) -> bytes:
    """Type 1 SMF: a conductor track followed by one track per part (solo first)."""
    mid = mido.MidiFile(type=1, ticks_per_beat=ppq)
    bpm = float(score.initial_bpm) if score.initial_bpm is not None else 120.0
    conductor = mido.MidiTrack()
    conductor.append(mido.MetaMessage("set_tempo", tempo=mido.bpm2tempo(bpm), time=0))
    conductor.append(
        mido.MetaMessage("time_signature", numerator=score.beats_per_measure, denominator=score.beat_unit, time=0)
    )
    conductor.append(mido.MetaMessage("end_of_track", time=0))
    mid.tracks.append(conductor)

    for part in Part:
        events = []
        for note in score.part_notes(part):
            on = round(note.onset_beats * ppq)
            off = round(note.offset_beats * ppq)
            events.append((on, 1, mido.Message("note_on", note=note.pitch, velocity=64)))
            events.append((off, 0, mido.Message("note_off", note=note.pitch, velocity=0)))
        mid.tracks.append(_track_from_events(events))

    buffer = io.BytesIO()
    mid.save(file=buffer)
    return buffer.getvalue()


def build_onset_grid(score: Score, part: Part = Part.SOLO) -> OnsetGrid:
    notes = score.part_notes(part)
    if not notes:
        raise ScoreFormatError(f"score has no {part.value} notes")
    groups: Dict[Fraction, List[ScoreNote]] = defaultdict(list)
    for note in notes:
        groups[note.onset_beats].append(note)
    onsets = sorted(groups)
    return OnsetGrid(
        onsets=tuple(float(o) for o in onsets),
        iois=tuple(float(b - a) for a, b in zip(onsets, onsets[1:])),
        pitch_sets=tuple(frozenset(n.pitch for n in groups[o]) for o in onsets),
        note_ids=tuple(tuple(n.id for n in groups[o]) for o in onsets),
    )


def read_performance(smf: bytes) -> List[PerformedNote]:
    """Performed notes in seconds, honouring the file's tempo map."""
    mid = _open_midi(smf)
    if mid.ticks_per_beat <= 0:
        raise MidiImportError("SMPTE time division is not supported")

    open_notes: Dict[int, deque] = defaultdict(deque)
    notes = []
    now = 0.0
    for msg in mid:
        now += msg.time
        if msg.type == "note_on" and msg.velocity > 0:
            open_notes[msg.note].append((now, msg.velocity))
        elif msg.type in ("note_off", "note_on"):
            if not open_notes[msg.note]:
                continue
            onset, velocity = open_notes[msg.note].popleft()
            if now > onset:
                notes.append(PerformedNote(msg.note, onset, now - onset, velocity))
    for pitch, pending in open_notes.items():
        for onset, velocity in pending:
            logger.warning(f"note {pitch} at {onset:.3f}s never released; closing it at the end of the file")
            notes.append(PerformedNote(pitch, onset, max(now - onset, 0.01), velocity))
    return sorted(notes, key=lambda n: (n.onset_sec, n.pitch))


def write_performance(notes: Sequence[PerformedNote], ppq: int = DEFAULT_PPQ, tempo: int = DEFAULT_TEMPO) -> bytes:
    mid = mido.MidiFile(type=0, ticks_per_beat=ppq)
    events = [(0, -1, mido.MetaMessage("set_tempo", tempo=tempo))]
    for note in notes:
        on = round(mido.second2tick(note.onset_sec, ppq, tempo))
        off = max(round(mido.second2tick(note.offset_sec, ppq, tempo)), on + 1)
        events.append((on, 1, mido.Message("note_on", note=note.pitch, velocity=note.velocity)))
        events.append((off, 0, mido.Message("note_off", note=note.pitch, velocity=0)))
    mid.tracks.append(_track_from_events(events))
    buffer = io.BytesIO()
    mid.save(file=buffer)
    return buffer.getvalue()


def parse_alignment_csv(alignment_csv: Union[bytes, str]) -> List[Tuple[float, float]]:
    text = alignment_csv.decode("utf-8") if isinstance(alignment_csv, bytes) else alignment_csv
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ALIGNMENT_HEADER:
        raise AlignmentError(f"alignment CSV must start with the header {','.join(ALIGNMENT_HEADER)}")
    rows = []
    for line_number, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            rows.append((float(Decimal(row[0].strip())), float(Decimal(row[1].strip()))))
        except (IndexError, InvalidOperation):
            raise AlignmentError(f"line {line_number}: malformed row {row!r}")
    return rows


def dump_alignment_csv(alignment: Sequence[Tuple[float, float]]) -> bytes:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(ALIGNMENT_HEADER)
    for score_onset, perf_onset in alignment:
        writer.writerow([f"{score_onset:.6f}".rstrip("0").rstrip("."), f"{perf_onset:.6f}"])
    return buffer.getvalue().encode("utf-8")


def load_reference(
    perf: Union[bytes, Sequence[PerformedNote]],
    alignment_csv: Union[bytes, str, Sequence[Tuple[float, float]]],
    score: Score,
    part: Part = Part.SOLO,
) -> ReferencePerformance:
    """
    Combine a recorded performance with its alignment. The alignment must name every distinct
    score onset of `part` exactly once.
    """
    notes = read_performance(perf) if isinstance(perf, (bytes, bytearray)) else list(perf)
    if isinstance(alignment_csv, (bytes, str)):
        alignment = parse_alignment_csv(alignment_csv)
    else:
        alignment = [(float(s), float(p)) for s, p in alignment_csv]

    grid = build_onset_grid(score, part)
    expected = list(grid.onsets)
    given = [s for s, _ in alignment]
    for onset in expected:
        matches = sum(1 for s in given if abs(s - onset) <= ONSET_TOLERANCE)
        if matches == 0:
            raise AlignmentError(f"score onset {onset} is missing from the alignment")
        if matches > 1:
            raise AlignmentError(f"score onset {onset} appears {matches} times in the alignment")
    if len(given) != len(expected):
        extra = [s for s in given if all(abs(s - o) > ONSET_TOLERANCE for o in expected)]
        raise AlignmentError(f"alignment names onsets that are not in the {part.value} part: {extra}")

    return ReferencePerformance(notes=tuple(notes), alignment=tuple(alignment))


def parse_part_map(value: Optional[str]) -> Dict[int, Part]:
    """`"1=solo,2=accompaniment"` -> {1: Part.SOLO, 2: Part.ACCOMPANIMENT}"""
    if not value:
        return {1: Part.SOLO, 2: Part.ACCOMPANIMENT}
    result = {}
    for item in value.split(","):
        track, _, part = item.partition("=")
        try:
            result[int(track.strip())] = Part(part.strip())
        except ValueError:
            raise ScoreFormatError(f"part map entry {item.strip()!r} is not <track>=solo or <track>=accompaniment")
    return result


def render_deadpan(score: Score, part: Part = Part.SOLO, beat_period: Optional[float] = None, velocity: int = 64) -> ReferencePerformance:
    """A mechanical rendition of `part` at a constant beat period, aligned by construction."""
    beat_period = beat_period or score.default_beat_period
    notes = [
        PerformedNote(n.pitch, float(n.onset_beats) * beat_period, float(n.duration_beats) * beat_period, velocity)
        for n in score.part_notes(part)
    ]
    grid = build_onset_grid(score, part)
    alignment = tuple((onset, onset * beat_period) for onset in grid.onsets)
    return ReferencePerformance(notes=tuple(notes), alignment=alignment)


def read_score_file(path: str, part_map: Optional[str] = None) -> Score:
    """A score document (.json) or a MIDI file whose tracks are assigned by `part_map`."""
    with open(path, "rb") as f:
        data = f.read()
    if path.lower().endswith((".mid", ".midi")):
        return import_midi_score(data, parse_part_map(part_map))
    return parse_score(data)


def alignment_path_for(perf_path: str) -> str:
    base, _ = os.path.splitext(perf_path)
    return base + ".csv"


def read_reference_file(path: str, score: Score, part: Part = Part.SOLO) -> ReferencePerformance:
    """A recorded performance and the alignment CSV stored next to it under the same name."""
    alignment_path = alignment_path_for(path)
    if not os.path.exists(alignment_path):
        raise AlignmentError(f"no alignment file {alignment_path} for reference {path}")
    with open(path, "rb") as f:
        perf = f.read()
    with open(alignment_path, "rb") as f:
        alignment = f.read()
    return load_reference(perf, alignment, score, part)
