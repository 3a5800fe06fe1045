"""``structinfill`` command line.

Every option can also be set through an environment variable named
``STRUCTINFILL_<COMMAND>_<OPTION>``, e.g. ``STRUCTINFILL_INFILL_TOP_P=0.8``.
Failures print one ``error: <Kind>: <message>`` line on stderr and exit
with status 1 (2 for usage errors).
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click
import yaml

from .errors import ConfigError, CoverageError, InfillError, ParseError
from .infill import (
    Sampling,
    copy_baseline,
    generate,
    load_request,
    request_from_example,
    write_outputs,
)
from .ingest import (
    DEFAULT_FORMS,
    build_test_cases,
    build_training_examples,
    load_corpus_dir,
    load_midi,
    make_synthetic_corpus,
    split_corpus,
    write_dataset,
    read_dataset,
)
from .metrics import evaluate
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .structure import read_annotation_file
from .tokenizer import read_token_file, write_token_file
from .train import TrainConfig, train_loop

ENV_PREFIX = "STRUCTINFILL"

log = logging.getLogger("structinfill")

PRESETS = {
    "default": (ModelConfig, {}),
    "tiny": (ModelConfig.tiny, {"learning_rate": 1e-3}),
}


def _plan(value: str | None) -> list[int] | None:
    if value is None:
        return None
    try:
        return [int(v) for v in value.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"--plan expects comma-separated integers, got {value!r}") from exc


@click.group(context_settings={"auto_envvar_prefix": ENV_PREFIX, "show_default": True})
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose: bool) -> None:
    """Structure-aware symbolic-music infilling."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


@cli.command()
@click.argument("midi_in", type=click.Path(exists=True, dir_okay=False))
@click.argument("annotation", type=click.Path(exists=True, dir_okay=False))
@click.argument("tokens_out", type=click.Path(dir_okay=False))
@click.option("--song-id", help="Annotation key; defaults to the MIDI file stem.")
def tokenize(midi_in, annotation, tokens_out, song_id):
    """Encode the melody of MIDI_IN as one token line."""
    song_id = song_id or Path(midi_in).stem
    annotations = read_annotation_file(annotation)
    if song_id not in annotations:
        raise ParseError(f"{annotation}: no annotation line for song {song_id!r}")
    song = load_midi(midi_in, annotations[song_id], song_id)
    write_token_file(tokens_out, [song.encode(0, song.n_bars)])


@cli.command("build-dataset")
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--corpus", type=click.Path(exists=True, file_okay=False),
              help="Directory of .mid files plus annotations.tsv.")
@click.option("--synthetic", type=int, help="Build a synthetic corpus from this seed instead.")
@click.option("--songs", "n_songs", default=16, help="Synthetic corpus size.")
@click.option("--form", "forms", multiple=True, help="Synthetic phrase form; repeatable.")
@click.option("--ratio", default=0.9, help="Training share of the song split.")
@click.option("--seed", default=0, help="Split seed.")
@click.option("--no-split", is_flag=True, help="Use every song for both files.")
def build_dataset(out_dir, corpus, synthetic, n_songs, forms, ratio, seed, no_split):
    """Write train.txt (training examples) and test.txt (4-bar test cases)."""
    if (corpus is None) == (synthetic is None):
        raise ConfigError("give exactly one of --corpus or --synthetic")
    if corpus is not None:
        songs = load_corpus_dir(corpus)
    else:
        songs = make_synthetic_corpus(synthetic, n_songs, forms or DEFAULT_FORMS)
    if not songs:
        raise CoverageError("corpus holds no songs")
    train_songs, test_songs = (songs, songs) if no_split else split_corpus(songs, ratio, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_train = write_dataset(out / "train.txt", [e for s in train_songs for e in build_training_examples(s)])
    n_test = write_dataset(out / "test.txt", build_test_cases(test_songs))
    summary = (
        f"songs {len(songs)} (train {len(train_songs)}, test {len(test_songs)}); "
        f"training examples {n_train}; test cases {n_test}"
    )
    log.info(summary)
    click.echo(summary)


@cli.command()
@click.argument("dataset", type=click.Path(exists=True, dir_okay=False))
@click.argument("checkpoint_out", type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="YAML with optional 'preset', 'model' and 'train' sections.")
@click.option("--preset", type=click.Choice(sorted(PRESETS)), help="Model size preset.")
@click.option("--steps", type=int, help="Override train.max_steps.")
@click.option("--seed", type=int, help="Override train.seed.")
@click.option("--lr", type=float, help="Override train.learning_rate.")
@click.option("--log", "log_path", type=click.Path(dir_okay=False),
              help="Per-step 'step,loss' log; defaults to CHECKPOINT_OUT with .loss.csv.")
def train(dataset, checkpoint_out, config_path, preset, steps, seed, lr, log_path):
    """Train on DATASET and save the final weights to CHECKPOINT_OUT."""
    raw = yaml.safe_load(Path(config_path).read_text()) if config_path else {}
    raw = raw or {}
    make_model, train_defaults = PRESETS[preset or raw.get("preset", "default")]
    model_cfg = make_model(**(raw.get("model") or {}))
    train_dict = {**train_defaults, **(raw.get("train") or {})}
    for key, value in (("max_steps", steps), ("seed", seed), ("learning_rate", lr)):
        if value is not None:
            train_dict[key] = value
    train_cfg = TrainConfig.from_dict(train_dict)
    examples = read_dataset(dataset)
    log_path = log_path or str(Path(checkpoint_out).with_suffix(".loss.csv"))
    result = train_loop(examples, model_cfg, train_cfg, checkpoint_path=checkpoint_out, log_path=log_path)
    final = f"{result.losses[-1]:.4f}" if result.losses else "n/a"
    click.echo(f"steps {train_cfg.max_steps}; final loss {final}; checkpoint {checkpoint_out}")


@cli.command()
@click.argument("checkpoint_out", type=click.Path(dir_okay=False))
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default="default")
@click.option("--seed", default=0)
def init(checkpoint_out, preset, seed):
    """Save freshly initialised weights."""
    save_checkpoint(checkpoint_out, build_model(PRESETS[preset][0](), seed=seed), {"step": 0})


@cli.command()
@click.argument("request_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "midi_out", required=True, type=click.Path(dir_okay=False),
              help="Target MIDI; '<stem>_spliced.mid' and '<stem>.txt' are written beside it.")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--baseline", type=click.Choice(["copy"]), help="Skip the model and copy contexts.")
@click.option("--top-p", type=float, help="Nucleus threshold (request default 0.9).")
@click.option("--temperature", type=float)
@click.option("--bars", type=int, help="Number of bars to generate.")
@click.option("--plan", help="Per-bar structure indices, e.g. '1,1,2,2'.")
@click.option("--seed", type=int)
def infill(request_file, midi_out, checkpoint, baseline, top_p, temperature, bars, plan, seed):
    """Fill the gap described by REQUEST_FILE (YAML or JSON)."""
    request = load_request(
        request_file, bar_count=bars, bar_plan=_plan(plan), top_p=top_p, seed=seed,
        temperature=temperature,
    )
    if baseline == "copy":
        tokens, complete = copy_baseline(request), True
    else:
        if checkpoint is None:
            raise ConfigError("--checkpoint is required unless --baseline copy is given")
        result = generate(request, load_checkpoint(checkpoint))
        tokens, complete = result.tokens, result.complete
    paths = write_outputs(tokens, request, midi_out)
    if not complete:
        click.echo("warning: max_tokens reached before the last bar closed", err=True)
    click.echo(f"{tokens.bar_count()} bars -> {paths['target']}")


@cli.command("infill-cases")
@click.argument("cases", type=click.Path(exists=True, dir_okay=False))
@click.argument("outputs", type=click.Path(dir_okay=False))
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--baseline", type=click.Choice(["copy"]))
@click.option("--top-p", default=0.9)
@click.option("--temperature", default=1.0)
@click.option("--greedy", is_flag=True)
@click.option("--seed", default=0, help="Case i is sampled with seed + i.")
def infill_cases(cases, outputs, checkpoint, baseline, top_p, temperature, greedy, seed):
    """Infill every target of a dataset file; one token line per case in OUTPUTS."""
    examples = read_dataset(cases)
    model = None
    if baseline is None:
        if checkpoint is None:
            raise ConfigError("--checkpoint is required unless --baseline copy is given")
        model = load_checkpoint(checkpoint)
    results = []
    for i, ex in enumerate(examples):
        request = request_from_example(ex, Sampling(top_p, temperature, seed + i, greedy))
        results.append(copy_baseline(request) if model is None else generate(request, model).tokens)
    write_token_file(outputs, results)
    click.echo(f"{len(results)} outputs -> {outputs}")


@cli.command("eval")
@click.argument("cases", type=click.Path(exists=True, dir_okay=False))
@click.argument("outputs", type=click.Path(exists=True, dir_okay=False))
@click.argument("report_out", type=click.Path(dir_okay=False))
@click.option("--name", default="model", help="Row label in the table.")
def eval_cmd(cases, outputs, report_out, name):
    """Score OUTPUTS against CASES; writes the table and a per-case CSV beside it."""
    report = evaluate(read_dataset(cases), read_token_file(outputs), name=name)
    report_out = Path(report_out)
    report_out.write_text(report.to_table())
    report_out.with_suffix(".csv").write_text(report.to_records())
    click.echo(report.to_table(), nl=False)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="structinfill", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        click.echo("error: Aborted", err=True)
        return 1
    except click.UsageError as exc:
        click.echo(f"error: UsageError: {exc.format_message()}", err=True)
        return 2
    except (InfillError, OSError, yaml.YAMLError, click.ClickException) as exc:
        msg = " ".join(str(exc).split())
        click.echo(f"error: {type(exc).__name__}: {msg}", err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
