import csv
import io
import logging
import queue
import time
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import mido

from .accompanist import (
    AccompanimentReference,
    AccompanistConfig,
    AlignedOnset,
    Scheduler,
    decode_accompaniment,
    encode_soloist,
    select_accompaniment,
)
from .config import RunConfig
from .errors import SinkUnavailableError
from .followers import create_follower
from .midi_io import EventEmitter, NoteTracker, OutputStage, PortSink, Windower, window_events
from .models import AccompanimentEvent, EventKind, ExpressiveParams, InputWindow, MidiEvent, Part, ReferencePerformance, Score, ScorePositionEstimate
from .tempo_models import TempoModel, TempoObservation, reference_tempo
from .utils import build_onset_grid, render_deadpan

logger = logging.getLogger(__name__)

LOG_HEADER = ["score_onset_beats", "estimated_position", "predicted_next_onset_sec", "beat_period", "asynchrony_ms"]


@dataclass(frozen=True)
class OnsetLogEntry:
    score_onset_beats: float
    estimated_position: float
    predicted_next_onset_sec: float
    beat_period: float
    asynchrony_ms: float


class AccompanimentService:
    """
    The accompaniment pipeline for one performance: windows go through the score follower, aligned
    soloist onsets update the encoder and the tempo model, and the decoded accompaniment is handed
    to the emitter when due. Leaving the context flushes every sounding note.
    """

    def __init__(
        self,
        score: Score,
        follower,
        tempo_model: TempoModel,
        emitter,
        config: Optional[AccompanistConfig] = None,
        reference: Optional[AccompanimentReference] = None,
    ):
        self.score = score
        self.grid = build_onset_grid(score)
        self.accompaniment = score.part_notes(Part.ACCOMPANIMENT)
        self.follower = follower
        self.tempo_model = tempo_model
        self.emitter = emitter
        self.config = config or AccompanistConfig()
        self.reference = reference
        self.tracker = NoteTracker()
        self.scheduler = Scheduler(self.config.retime_horizon_ms / 1000.0)
        self.params: Optional[ExpressiveParams] = None
        self.log: List[OnsetLogEntry] = []
        self.dropped_notes = 0
        self.last_index: Optional[int] = None
        self.last_onset_sec: Optional[float] = None
        self.closed = False

    def __enter__(self):
        logger.info(f"Accompaniment session started: {len(self.grid)} solo onsets, {len(self.accompaniment)} accompaniment notes")
        return self

    def __exit__(self, type, value, tb):
        self.close()

    def _dispatch_due(self, now: float):
        for event in self.scheduler.due(now):
            self.emitter.emit(event)

    def process_window(self, window: InputWindow) -> Optional[OnsetLogEntry]:
        self._dispatch_due(window.window_end_sec)
        started = self.tracker.update(window)
        estimate = self.follower.step(window)
        if window.is_empty:
            return None
        if self.last_index is not None and estimate.onset_index <= self.last_index:
            return None
        return self._aligned(window, estimate, started)

    def _score_durations(self, index: int) -> Dict[int, tuple]:
        notes = [self.score.note_by_id(note_id) for note_id in self.grid.note_ids[index]]
        return {n.pitch: (n.id, float(n.duration_beats)) for n in notes}

    def _aligned(self, window: InputWindow, estimate: ScorePositionEstimate, started) -> OnsetLogEntry:
        index = estimate.onset_index
        onsets = self.grid.onsets
        score_onset = onsets[index]
        now = window.window_end_sec

        by_pitch = self._score_durations(index)
        for note in started:
            note.score_onset_index = index
        completed = []
        for note in self.tracker.drain_completed():
            if note.score_onset_index is None:
                continue
            match = self._score_durations(note.score_onset_index).get(note.pitch)
            if match is not None:
                completed.append((note, match[1]))

        previous_score = onsets[self.last_index] if self.last_index is not None else None
        aligned = AlignedOnset(
            perf_onset_sec=now,
            score_onset_beats=score_onset,
            notes=started,
            completed=completed,
            prev_perf_onset_sec=self.last_onset_sec,
            prev_score_onset_beats=previous_score,
            note_ids={pitch: note_id for pitch, (note_id, _) in by_pitch.items()},
        )
        self.params = encode_soloist(aligned, self.params, self.tempo_model.state.tau_0, self.config.velocity_ema)

        predicted = self.tempo_model.predicted_onset
        asynchrony_ms = 1000.0 * (predicted - now) if predicted is not None else 0.0
        if index + 1 < len(onsets):
            delta_score, next_onset = onsets[index + 1] - score_onset, onsets[index + 1]
        else:
            delta_score = self.grid.iois[-1] if self.grid.iois else 1.0
            next_onset = score_onset + delta_score
        o_hat, beat_period = self.tempo_model.observe(
            TempoObservation(
                o_n=now,
                delta_score_n=delta_score,
                delta_perf_n=aligned.delta_perf,
                delta_score_prev=aligned.delta_score,
                score_onset_next=next_onset,
            )
        )

        self.scheduler.retime(now, o_hat, next_onset, beat_period)
        notes, dropped = select_accompaniment(self.accompaniment, self.grid, self.last_index, index, self.config.max_skip)
        self.dropped_notes += dropped
        for event in decode_accompaniment(self.params, self.tempo_model.state, notes, next_onset, self.reference, self.config.balance):
            if event.onset_sec < now:
                self.emitter.emit(event, now)
            else:
                self.scheduler.add([event])

        self.last_index = index
        self.last_onset_sec = now
        entry = OnsetLogEntry(score_onset, estimate.score_onset_beats, o_hat, beat_period, asynchrony_ms)
        self.log.append(entry)
        logger.info(
            f"onset {score_onset:g}: position {estimate.score_onset_beats:.3f}, next {o_hat:.3f}s, "
            f"b {beat_period:.4f}, asynchrony {asynchrony_ms:.1f} ms"
        )
        return entry

    def run(self, windows: Iterable[InputWindow]) -> List[OnsetLogEntry]:
        for window in windows:
            self.process_window(window)
        return self.log

    def finish(self):
        """Input is over: the pending accompaniment plays out at the last beat period."""
        for event in self.scheduler.drain():
            self.emitter.emit(event)

    def close(self):
        if self.closed:
            return
        self.closed = True
        self.finish()
        self.emitter.close()
        logger.info(f"Accompaniment session closed: {len(self.log)} aligned onsets, {self.dropped_notes} notes dropped")

    def log_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        for e in self.log:
            writer.writerow(
                [
                    f"{e.score_onset_beats:g}",
                    f"{e.estimated_position:.6f}",
                    f"{e.predicted_next_onset_sec:.6f}",
                    f"{e.beat_period:.6f}",
                    f"{e.asynchrony_ms:.3f}",
                ]
            )
        return buffer.getvalue()


class LiveSession:
    """
    Live mode: a mido input callback feeds a queue, this thread windows and processes it,
    and an OutputStage thread plays the accompaniment. All notes are released on exit.
    """

    LOOKAHEAD_SEC = 0.005

    def __init__(
        self,
        service_factory: Callable[[object], AccompanimentService],
        input_port: Optional[str],
        output_port: Optional[str],
        latency_ms: float = 0.0,
    ):
        self.inbox: "queue.Queue[MidiEvent]" = queue.Queue()
        self.started = time.monotonic()
        self.windower = Windower()
        self.output = OutputStage(EventEmitter(PortSink(output_port), latency_ms / 1000.0), self.clock)
        self.live_emitter = _SubmitEmitter(self.output)
        self.service = service_factory(self.live_emitter)
        try:
            self.port = mido.open_input(input_port, callback=self._on_message)
        except (OSError, IOError) as ex:
            self.output.emitter.close()
            raise SinkUnavailableError(f"cannot open MIDI input {input_port!r}: {ex}")

    def clock(self) -> float:
        return time.monotonic() - self.started

    def _on_message(self, msg: mido.Message):
        if msg.type in ("note_on", "note_off"):
            kind = EventKind.NOTE_ON if msg.type == "note_on" else EventKind.NOTE_OFF
            self.inbox.put(MidiEvent(kind, msg.note, msg.velocity, self.clock()))

    def run(self, should_stop: Callable[[], bool] = lambda: False):
        self.output.start()
        logger.info(f"Listening on {self.port.name}")
        try:
            with self.service:
                while not should_stop():
                    try:
                        windows = self.windower.push(self.inbox.get(timeout=self.windower.width_sec))
                    except queue.Empty:
                        windows = self.windower.advance(self.clock())
                    for window in windows:
                        self.service.process_window(window)
                    for event in self.service.scheduler.due(self.clock() + self.LOOKAHEAD_SEC):
                        self.output.submit(event)
        finally:
            self.port.close()
            self.output.stop()


class _SubmitEmitter:
    """Emitter facade that forwards to the output thread, which does its own timing."""

    def __init__(self, output: OutputStage):
        self.output = output

    def emit(self, event: AccompanimentEvent, now: Optional[float] = None):
        self.output.submit(event)

    def close(self):
        pass


def build_service(
    config: RunConfig,
    score: Score,
    emitter,
    references: Sequence[ReferencePerformance] = (),
    accompaniment_reference: Optional[ReferencePerformance] = None,
) -> AccompanimentService:
    """
    Wire follower, tempo model and accompanist from the run configuration. Without recorded
    references the OLTW follower aligns against a mechanical rendition of the solo part, and
    the tempo expectation falls back to the linear model.
    """
    grid = build_onset_grid(score)
    initial_bpm = config.initial_bpm or 60.0 / score.default_beat_period
    tau_0 = 60.0 / initial_bpm
    follower_references = list(references) or [render_deadpan(score, Part.SOLO, tau_0)]
    follower = create_follower(
        config.follower, grid, follower_references, initial_bpm, config.hmm_config(), config.oltw_window_sec, config.oltw_step_sec
    )
    phi = reference_tempo(references, config.interpolation, config.blend)
    tempo_model = TempoModel.create(config.variant, tau_0, config.tempo_params, phi, grid.onsets[0])
    reference = AccompanimentReference.from_performance(score, accompaniment_reference) if accompaniment_reference else None
    return AccompanimentService(score, follower, tempo_model, emitter, config.accompanist_config(), reference)


def replay_session(service: AccompanimentService, events: Iterable[MidiEvent]) -> List[OnsetLogEntry]:
    """Virtual-clock replay: windowing, processing and emission in one deterministic loop."""
    with service:
        service.run(window_events(events))
    return service.log
