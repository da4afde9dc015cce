import logging
import os

import click
import mido
from dotenv import load_dotenv

from midi_accompanist.config import RunConfig, load_config
from midi_accompanist.errors import AccompanistError, ConfigError
from midi_accompanist.evaluation import (
    DEFAULT_GRIDS,
    follower_csv,
    format_follower_table,
    format_tempo_table,
    oracle_follower_report,
    perturb_performance,
    run_follower_experiment,
    search_variants,
    tempo_csv,
)
from midi_accompanist.followers import FOLLOWER_KINDS
from midi_accompanist.midi_io import EventEmitter, SmfSink, replay_performance
from midi_accompanist.models import Part
from midi_accompanist.services import LiveSession, build_service, replay_session
from midi_accompanist.synthetic import default_corpus, expressive_piece, piece_by_name
from midi_accompanist.tempo_models import DEFAULT_PARAMS, TempoVariant, reference_tempo
from midi_accompanist.utils import dump_alignment_csv, dump_score, read_reference_file, read_score_file, write_performance

load_dotenv()

ACCOMPANIST_CONFIG = os.getenv("ACCOMPANIST_CONFIG")
ACCOMPANIST_LOG = os.getenv("ACCOMPANIST_LOG", "accompanist.log")


def _load(ctx: click.Context, **overrides) -> RunConfig:
    config: RunConfig = ctx.obj["config"]
    return config.with_overrides(**overrides)


def _write(path: str, data: bytes):
    with open(path, "wb") as f:
        f.write(data)
    logging.info(f"Wrote {path}")


def _references(paths, score, part=Part.SOLO):
    return [read_reference_file(path, score, part) for path in paths]


class AccompanistGroup(click.Group):
    """Reports AccompanistError the same way for every command: logged, printed in red, exit status 1."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except AccompanistError as ex:
            logging.error(f"{type(ex).__name__}: {ex}")
            click.secho(f"Error: {ex}", fg="red", err=True)
            ctx.exit(1)


@click.group(cls=AccompanistGroup)
@click.option("--config", "config_path", default=ACCOMPANIST_CONFIG, help="Run configuration file (dotted key=value lines).")
@click.option("--log", "log_file", default=ACCOMPANIST_LOG, show_default=True, help="Log file.")
@click.option("--seed", type=int, default=None, help="Seed for every random draw.")
@click.option("--verbose", is_flag=True, help="Log at DEBUG level.")
@click.pass_context
def cli(ctx, config_path, log_file, seed, verbose):
    """Follow a soloist against a score and play the accompaniment."""
    logging.basicConfig(filename=log_file, encoding="utf-8", level=logging.DEBUG if verbose else logging.INFO)
    ctx.ensure_object(dict)
    ctx.obj["config"] = load_config(config_path).with_overrides(seed=seed)


@cli.command()
@click.option("--score", help="Score document (.json) or MIDI file.")
@click.option("--solo", help="Recorded solo performance (.mid).")
@click.option("--follower", help=f"Score follower: {', '.join(FOLLOWER_KINDS)}.")
@click.option("--tempo", "tempo_variant", help=f"Tempo model: {', '.join(v.value for v in TempoVariant)}.")
@click.option("--refs", "references", multiple=True, help="Reference performance (.mid with a .csv alignment next to it).")
@click.option("--accomp-ref", "accomp_reference", help="Accompaniment reference performance for micro-timing and velocity.")
@click.option("--initial-bpm", type=float, help="Tempo before the first onset.")
@click.option("--out", "output", help="Accompaniment SMF to write.")
@click.option("--onset-log", help="Per-onset CSV log to write.")
@click.option("--speed", type=float, help="Playback speed of the solo file.")
@click.pass_context
def replay(ctx, **options):
    """Replay a recorded solo and render the accompaniment to a MIDI file."""
    config = _load(ctx, mode="replay", **options).validate()
    score = read_score_file(config.score, config.part_map)
    references = _references(config.references, score)
    accompaniment_reference = read_reference_file(config.accomp_reference, score, Part.ACCOMPANIMENT) if config.accomp_reference else None

    base, _ = os.path.splitext(config.solo)
    output = config.output or f"{base}_accompaniment.mid"
    onset_log = config.onset_log or f"{os.path.splitext(output)[0]}_onsets.csv"

    sink = SmfSink()
    # the rendered file carries score time; latency only applies to a live port
    service = build_service(config, score, EventEmitter(sink, 0.0), references, accompaniment_reference)
    with open(config.solo, "rb") as f:
        events = replay_performance(f.read(), config.speed)
    log = replay_session(service, events)

    _write(output, sink.to_bytes())
    _write(onset_log, service.log_csv().encode("utf-8"))
    click.echo(f"{len(log)} aligned onsets, {service.emitter.late_count} late notes. Wrote {output} and {onset_log}")


@cli.command()
@click.option("--score", help="Score document (.json) or MIDI file.")
@click.option("--follower", help=f"Score follower: {', '.join(FOLLOWER_KINDS)}.")
@click.option("--tempo", "tempo_variant", help="Tempo model.")
@click.option("--refs", "references", multiple=True, help="Reference performance (.mid with a .csv alignment next to it).")
@click.option("--accomp-ref", "accomp_reference", help="Accompaniment reference performance.")
@click.option("--initial-bpm", type=float, help="Tempo before the first onset.")
@click.option("--input-port", help="MIDI input port name.")
@click.option("--output-port", help="MIDI output port name.")
@click.option("--latency-ms", type=float, help="Output latency to compensate.")
@click.option("--list-ports", is_flag=True, help="List the MIDI ports and exit.")
@click.pass_context
def live(ctx, list_ports, **options):
    """Accompany a live soloist from a MIDI input port."""
    if list_ports:
        click.echo("Inputs:\n  " + "\n  ".join(mido.get_input_names()))
        click.echo("Outputs:\n  " + "\n  ".join(mido.get_output_names()))
        return
    config = _load(ctx, mode="live", **options).validate()
    score = read_score_file(config.score, config.part_map)
    references = _references(config.references, score)
    accompaniment_reference = read_reference_file(config.accomp_reference, score, Part.ACCOMPANIMENT) if config.accomp_reference else None

    session = LiveSession(
        lambda emitter: build_service(config, score, emitter, references, accompaniment_reference),
        config.input_port,
        config.output_port,
        config.latency_ms,
    )
    click.echo(f"Listening on {session.port.name}, press Ctrl+C to stop.")
    try:
        session.run()
    except KeyboardInterrupt:
        logging.info("Live session stopped by the user")


@cli.group("eval")
def evaluate():
    """Score follower and tempo model experiments."""


@evaluate.command("follower")
@click.option("--score", help="Score document; without it the synthetic rubato piece is used.")
@click.option("--perf", help="Test performance (.mid with a .csv alignment next to it).")
@click.option("--refs", "references", multiple=True, help="Reference performances; default is perturbed copies of the test performance.")
@click.option("--kind", "kinds", multiple=True, type=click.Choice(FOLLOWER_KINDS), help="Followers to evaluate (default: all).")
@click.option("--sigma-ms", type=float, default=100.0, show_default=True, help="Onset noise of the perturbed references.")
@click.option("--count", type=int, default=5, show_default=True, help="Number of perturbed references.")
@click.option("--oracle/--no-oracle", default=True, help="Include the offline DTW bound.")
@click.option("--csv", "csv_path", help="Also write the report as CSV.")
@click.pass_context
def eval_follower(ctx, score, perf, references, kinds, sigma_ms, count, oracle, csv_path):
    """Median asynchrony of the score followers against the test alignment."""
    config = _load(ctx, mode="eval")
    if score and perf:
        score_model = read_score_file(score, config.part_map)
        test = read_reference_file(perf, score_model)
    elif score or perf:
        raise ConfigError("eval follower needs both --score and --perf, or neither")
    else:
        piece = piece_by_name("rubato-v1")
        score_model, test = piece.score, piece.solo_reference()
    refs = _references(references, score_model) or perturb_performance(test, sigma_ms, count, config.seed)

    reports = [
        run_follower_experiment(score_model, test, refs, kind, config.hmm_config(), config.oltw_window_sec, config.oltw_step_sec)
        for kind in kinds or FOLLOWER_KINDS
    ]
    if oracle:
        reports.append(oracle_follower_report(score_model, test, refs))
    click.echo(format_follower_table(reports))
    if csv_path:
        _write(csv_path, follower_csv(reports).encode("utf-8"))


@evaluate.command("tempo")
@click.option("--variant", "variants", multiple=True, help="Tempo models to evaluate (default: all).")
@click.option("--grid", type=click.Choice(["default", "single"]), default="default", show_default=True, help="Full grid search or the default parameters only.")
@click.option("--score", help="Score document; without it the synthetic expressive piece is used.")
@click.option("--perf", help="Test performance (.mid with a .csv alignment next to it).")
@click.option("--ref", "reference", help="Reference performance giving the tempo expectation.")
@click.option("--csv", "csv_path", help="Also write the report as CSV.")
@click.pass_context
def eval_tempo(ctx, variants, grid, score, perf, reference, csv_path):
    """Onset and tempo prediction errors of the tempo models after grid search."""
    config = _load(ctx, mode="eval")
    try:
        selected = [TempoVariant.parse(v) for v in variants] or list(TempoVariant)
    except ValueError as ex:
        raise ConfigError(str(ex))

    if score and perf:
        score_model = read_score_file(score, config.part_map)
        test = read_reference_file(perf, score_model)
        references = [read_reference_file(reference, score_model)] if reference else []
    elif score or perf:
        raise ConfigError("eval tempo needs both --score and --perf, or neither")
    else:
        piece, reference_piece = expressive_piece()
        score_model, test, references = piece.score, piece.solo_reference(), [reference_piece.solo_reference()]

    tau_0 = 60.0 / config.initial_bpm if config.initial_bpm else score_model.default_beat_period
    phi = reference_tempo(references, config.interpolation, config.blend)
    grids = DEFAULT_GRIDS if grid == "default" else {v: [dict(DEFAULT_PARAMS[v])] for v in TempoVariant}
    best = search_variants(list(test.perf_onsets), list(test.score_onsets), tau_0, phi, selected, grids)

    reports = [best[v] for v in selected]
    click.echo(format_tempo_table(reports))
    if csv_path:
        _write(csv_path, tempo_csv(reports).encode("utf-8"))


@cli.command()
@click.argument("outdir", type=click.Path(file_okay=False))
@click.option("--onsets", type=int, default=200, show_default=True, help="Solo onsets per piece.")
def corpus(outdir, onsets):
    """Write the synthetic corpus: score, solo and accompaniment performances with alignments."""
    os.makedirs(outdir, exist_ok=True)
    for piece in default_corpus(onsets):
        base = os.path.join(outdir, piece.name)
        _write(f"{base}.json", dump_score(piece.score))
        for part, notes, alignment in (
            ("solo", piece.solo, piece.solo_alignment),
            ("accompaniment", piece.accompaniment, piece.accompaniment_alignment),
        ):
            _write(f"{base}_{part}.mid", write_performance(notes))
            _write(f"{base}_{part}.csv", dump_alignment_csv(alignment))
        click.echo(f"{piece.name}: {len(piece.solo)} solo notes, {len(piece.accompaniment)} accompaniment notes")


def main():
    cli(obj={})


if __name__ == "__main__":
    main()
