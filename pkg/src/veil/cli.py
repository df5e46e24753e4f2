"""Command-line entry point: train, protect, restore, purify, evaluate."""

from __future__ import annotations

import json
import shlex
import subprocess
import tempfile
from pathlib import Path

import click

from . import pipeline, speaker, training
from .audio import Manifest, ManifestEntry, Waveform, load_manifest, load_wav, save_wav
from .purify import METHODS, PurifyConfig
from .speaker import TrainedExtractor, build_trials, load_trials, save_trials
from .training import Checkpoint, TrainingConfig, load_training_config


def _fail(e: Exception):
    raise click.ClickException(str(e))


def _input_manifest(manifest_path, in_wav) -> Manifest:
    if (manifest_path is None) == (in_wav is None):
        raise click.ClickException("provide exactly one of --manifest or --in")
    if manifest_path is not None:
        return load_manifest(manifest_path)
    path = Path(in_wav)
    if not path.exists():
        raise click.ClickException(f"input WAV not found: {path}")
    return Manifest([ManifestEntry(path.stem, "unknown", path)])


def _command_asr_backend(cmd: str):
    argv = shlex.split(cmd)

    def backend(wav_path) -> str:
        result = subprocess.run(
            argv + [str(wav_path)], capture_output=True, text=True, check=True
        )
        return result.stdout.strip()

    return backend


def _command_quality_backend(cmd: str):
    argv = shlex.split(cmd)

    def backend(ref: Waveform, test: Waveform) -> float:
        with tempfile.TemporaryDirectory(prefix="veil-quality-") as tmp:
            ref_path = Path(tmp) / "ref.wav"
            test_path = Path(tmp) / "test.wav"
            save_wav(ref, ref_path)
            save_wav(test, test_path)
            result = subprocess.run(
                argv + [str(ref_path), str(test_path)],
                capture_output=True,
                text=True,
                check=True,
            )
        return float(result.stdout.strip())

    return backend


@click.group()
def main():
    """Reversible voice-privacy toolkit."""


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(), help="JSON training config.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--extractor", "extractor_path", type=click.Path(),
              help="Speaker extractor checkpoint; trained on the manifest when absent.")
@click.option("--epochs", type=int, help="Override the configured epoch count.")
@click.option("--seed", type=int, help="Override the configured seed.")
def train(manifest_path, config_path, out_path, extractor_path, epochs, seed):
    """Jointly train the perturbation generator and removal net."""
    try:
        manifest = load_manifest(manifest_path)
        config = load_training_config(config_path) if config_path else TrainingConfig()
        overrides = {}
        if epochs is not None:
            overrides["epochs"] = epochs
        if seed is not None:
            overrides["seed"] = seed
        if extractor_path is not None:
            overrides["extractor_path"] = str(extractor_path)
        if overrides:
            config = TrainingConfig.from_dict({**config.to_dict(), **overrides})

        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        if config.extractor_path:
            extractor = TrainedExtractor.load(config.extractor_path)
            click.echo(f"loaded extractor {config.extractor_path}")
        else:
            click.echo("no extractor given; training the built-in toy extractor")
            extractor = speaker.train_toy_extractor(
                manifest, speaker.ExtractorTrainConfig(seed=config.seed)
            )
            ex_path = out_path.with_suffix(".extractor.veil")
            extractor.save(ex_path)
            click.echo(
                f"extractor trained (accuracy {extractor.train_accuracy:.3f}) -> {ex_path}"
            )

        ckpt = training.train_joint(manifest, config, extractor, checkpoint_path=out_path)
        csv_path = out_path.with_suffix(".losses.csv")
        training.write_loss_csv(ckpt, csv_path)
        last = {c: ckpt.loss_history[c][-1] for c in training.LOSS_COLUMNS[1:]}
        click.echo(f"trained {ckpt.epoch} epochs -> {out_path}")
        click.echo(f"loss curve -> {csv_path}")
        click.echo("final losses: " + ", ".join(f"{k}={v:.4f}" for k, v in last.items()))
    except click.ClickException:
        raise
    except Exception as e:
        _fail(e)


@main.command()
@click.option("--manifest", "manifest_path", type=click.Path())
@click.option("--in", "in_wav", type=click.Path(), help="Single input WAV.")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--epsilon", type=float, help="Validate against the checkpoint intensity.")
@click.option("--jobs", type=int, default=1, show_default=True)
def protect(manifest_path, in_wav, checkpoint_path, out_dir, epsilon, jobs):
    """Add speaker-adversarial perturbations to audio."""
    try:
        manifest = _input_manifest(manifest_path, in_wav)
        ckpt = Checkpoint.load(checkpoint_path)
        ckpt.validate_epsilon(epsilon)
        _, results = pipeline.protect_manifest(manifest, ckpt, out_dir, jobs=jobs)
        for r in results:
            note = (
                f", resampled from {r.resampled_from} Hz" if r.resampled_from else ""
            )
            click.echo(
                f"{r.entry.utterance_id}: snr_to_input={r.snr_db:.2f} dB, "
                f"clamped={r.clamped}{note}"
            )
        click.echo(f"protected {len(results)} utterance(s) -> {out_dir}")
    except click.ClickException:
        raise
    except Exception as e:
        _fail(e)


@main.command()
@click.option("--manifest", "manifest_path", type=click.Path())
@click.option("--in", "in_wav", type=click.Path(), help="Single input WAV.")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--ref", "ref_manifest_path", type=click.Path(),
              help="Manifest of originals; logs the restored-to-original SNR.")
@click.option("--epsilon", type=float, help="Validate against the checkpoint intensity.")
@click.option("--jobs", type=int, default=1, show_default=True)
def restore(manifest_path, in_wav, checkpoint_path, out_dir, ref_manifest_path, epsilon, jobs):
    """Predict and remove the perturbation from protected audio."""
    try:
        manifest = _input_manifest(manifest_path, in_wav)
        ckpt = Checkpoint.load(checkpoint_path)
        ckpt.validate_epsilon(epsilon)
        restored, results = pipeline.restore_manifest(manifest, ckpt, out_dir, jobs=jobs)
        if ref_manifest_path:
            from .audio import compute_snr

            refs = load_manifest(ref_manifest_path)
            for r in results:
                ref = load_wav(refs.by_id(r.entry.utterance_id).path)
                rst = load_wav(r.entry.path)
                click.echo(
                    f"{r.entry.utterance_id}: snr_to_original={compute_snr(ref, rst):.2f} dB"
                )
        click.echo(f"restored {len(results)} utterance(s) -> {out_dir}")
    except click.ClickException:
        raise
    except Exception as e:
        _fail(e)


@main.command()
@click.option("--manifest", "manifest_path", type=click.Path())
@click.option("--in", "in_wav", type=click.Path(), help="Single input WAV.")
@click.option("--method", type=click.Choice(METHODS), required=True)
@click.option("--snr", "snr_db", type=float, default=25.0, show_default=True)
@click.option("--factor", type=int, default=256, show_default=True)
@click.option("--kernel", type=int, default=3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--jobs", type=int, default=1, show_default=True)
def purify(manifest_path, in_wav, method, snr_db, factor, kernel, seed, out_dir, jobs):
    """Apply a perturbation-unaware purification baseline."""
    try:
        manifest = _input_manifest(manifest_path, in_wav)
        config = PurifyConfig(method=method, snr_db=snr_db, quant_factor=factor, kernel=kernel)
        _, results = pipeline.purify_manifest(manifest, config, out_dir, seed=seed, jobs=jobs)
        click.echo(f"purified {len(results)} utterance(s) with {method} -> {out_dir}")
    except click.ClickException:
        raise
    except Exception as e:
        _fail(e)


@main.command()
@click.option("--ref-manifest", "ref_manifest_path", required=True, type=click.Path())
@click.option("--test-manifest", "test_manifest_path", required=True, type=click.Path())
@click.option("--extractor", "extractor_path", required=True, type=click.Path())
@click.option("--condition", required=True, help="Label, e.g. rec-adv.")
@click.option("--trials", "trials_path", type=click.Path(),
              help="Trial list file; built from the reference manifest when absent.")
@click.option("--targets", type=int, default=1, show_default=True)
@click.option("--nontargets", type=int, default=30, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--asr-cmd", help="Command turning a WAV path into a transcript on stdout.")
@click.option("--quality-cmd", help="Command turning (ref, test) WAV paths into a score.")
@click.option("--jobs", type=int, default=1, show_default=True)
def evaluate(ref_manifest_path, test_manifest_path, extractor_path, condition, trials_path,
             targets, nontargets, seed, out_path, asr_cmd, quality_cmd, jobs):
    """Evaluate a reference/test manifest pair into a JSON report."""
    try:
        ref_manifest = load_manifest(ref_manifest_path)
        test_manifest = load_manifest(test_manifest_path)
        extractor = TrainedExtractor.load(extractor_path)
        backend = pipeline.backend_from_extractor(extractor)
        if trials_path:
            trials = load_trials(trials_path)
        else:
            trials = build_trials(ref_manifest, targets, nontargets, seed)
            trials_out = pipeline.cache_dir() / f"{condition}.trials.txt"
            save_trials(trials, trials_out)
            click.echo(f"built {len(trials)} trials -> {trials_out}")
        missing = [
            u
            for t in trials
            for u, m in ((t.enroll_utt, ref_manifest), (t.test_utt, test_manifest))
            if not any(e.utterance_id == u for e in m)
        ]
        if missing:
            raise click.ClickException(
                f"trial utterances missing from manifests: {sorted(set(missing))[:5]}"
            )
        report, scored = pipeline.evaluate_condition(
            condition,
            ref_manifest,
            test_manifest,
            backend,
            trials=trials,
            asr_backend=_command_asr_backend(asr_cmd) if asr_cmd else None,
            quality_backend=_command_quality_backend(quality_cmd) if quality_cmd else None,
            jobs=jobs,
        )
        scores_out = pipeline.cache_dir() / f"{condition}.scores.txt"
        speaker.save_scores(scored, scores_out)
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n")
        click.echo(f"scores -> {scores_out}")
        click.echo(f"report -> {out_path}")
        if report.eer_percent is not None:
            click.echo(f"{condition}: EER {report.eer_percent:.2f}%")
    except click.ClickException:
        raise
    except Exception as e:
        _fail(e)


@main.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path(), help="Write the JSON report here.")
def gradcheck(seed, out_path):
    """Check analytic gradients against central finite differences."""
    try:
        report = training.gradcheck(seed=seed)
        click.echo(
            f"checked {report.n_checked} parameters, "
            f"max relative error {report.max_relative_error:.3e}"
        )
        if out_path:
            Path(out_path).write_text(
                json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n"
            )
            click.echo(f"report -> {out_path}")
    except click.ClickException:
        raise
    except Exception as e:
        _fail(e)


if __name__ == "__main__":
    main()
