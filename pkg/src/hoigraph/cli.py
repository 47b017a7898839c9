"""Command-line surface: synth / train / eval / infer / ablate / plot / dump-graph.

Every run writes a manifest (resolved config, seed, git revision, timings)
next to its outputs; passing ``--manifest`` to a subcommand re-executes it
from a stored manifest alone.  Exit codes: 0 success, 1 runtime failure,
2 configuration error.
"""

from __future__ import annotations

import dataclasses
import json
import os
import subprocess
import sys
import time

import click

from . import data as data_mod
from .config import (AppConfig, ConfigError, EvalSettings, ModelConfig,
                     ProviderConfig, TrainSettings, load_config)
from .evaluation import (ablation_run, evaluate_hico, evaluate_vcoco,
                         format_ablation_table)
from .graph import StageFlags
from .model import InteractionModel, build_providers


def _git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return "unknown"


def _out_dir(path: str) -> str:
    path = os.environ.get("HOIGRAPH_OUT", path)
    os.makedirs(path, exist_ok=True)
    return path


def write_manifest(out_dir: str, command: str, cfg: AppConfig, args: dict,
                   seconds: float) -> str:
    import hashlib

    config = {
        "model": dataclasses.asdict(cfg.model),
        "providers": dataclasses.asdict(cfg.providers),
        "train": dataclasses.asdict(cfg.train),
        "eval": dataclasses.asdict(cfg.eval),
        "synth": cfg.synth,
    }
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    manifest = {
        "command": command,
        "args": args,
        "config": config,
        "config_hash": hashlib.sha256(blob).hexdigest()[:16],
        "seed": cfg.train.seed,
        "git_revision": _git_revision(),
        "seconds": round(seconds, 4),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return path


def _load_manifest(path: str) -> tuple[AppConfig, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg = AppConfig(
        model=ModelConfig(**manifest["config"]["model"]),
        providers=ProviderConfig(**manifest["config"]["providers"]),
        train=TrainSettings(**manifest["config"]["train"]),
        eval=EvalSettings(**manifest["config"]["eval"]),
        synth=manifest["config"].get("synth", {}),
    )
    return cfg, manifest.get("args", {})


def _resolve(config_path, manifest_path, overrides) -> tuple[AppConfig, dict]:
    if manifest_path is not None:
        return _load_manifest(manifest_path)
    return load_config(config_path, overrides), {}


def _build_model(cfg: AppConfig, dataset, flags: StageFlags = StageFlags()):
    dims = dataset.embed_dims or {}
    mismatched = {k: (dims[k], getattr(cfg.model, k)) for k in ("d_v", "d_t", "d_b")
                  if k in dims and dims[k] != getattr(cfg.model, k)}
    if "d_node" in dims and dims["d_node"] != cfg.model.d:
        mismatched["d_node"] = (dims["d_node"], cfg.model.d)
    if mismatched:
        click.echo(f"warning: dataset was generated for embedding dims "
                   f"{dims}, model config differs on {sorted(mismatched)}", err=True)
    providers = build_providers(cfg.providers, cfg.model, dataset.provider_seed)
    return InteractionModel(cfg.model, dataset.registry, providers, stage_flags=flags)


def _hico_metrics(cfg: AppConfig, dataset, preds) -> dict:
    split = dataset.split_registry()
    out = {}
    for setting in ("default", "known-object"):
        m = evaluate_hico(preds, dataset.test_ground_truth(),
                          dataset.registry.class_index, split, setting,
                          cfg.eval.iou_threshold)
        out[setting] = {k: m[k] for k in ("full", "rare", "non_rare")}
    return out


class _Fail(click.ClickException):
    exit_code = 1


@click.group()
def main():
    """Desk-scale human-object interaction detection pipeline."""


def _common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True),
                      default=None, help="YAML config file")(fn)
    fn = click.option("--manifest", "manifest_path", type=click.Path(exists=True),
                      default=None, help="re-run from a stored manifest")(fn)
    return fn


def _run(command: str, body):
    t0 = time.perf_counter()
    try:
        return body(t0)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    except (data_mod.ParseError, data_mod.DatasetVersionError) as exc:
        click.echo(f"{command}: {exc}", err=True)
        sys.exit(1)
    except click.ClickException:
        raise
    except Exception as exc:
        click.echo(f"{command} failed: {exc}", err=True)
        sys.exit(1)


@main.command()
@_common_options
@click.option("--task", type=str, default=None)
@click.option("--scenes", type=int, default=None)
@click.option("--test-scenes", type=int, default=None)
@click.option("--categories", type=int, default=None)
@click.option("--long-tail", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--provider-seed", type=int, default=None)
@click.option("--embed-dim", type=int, default=None)
@click.option("--out", "out_path", type=click.Path(), required=True)
def synth(config_path, manifest_path, task, scenes, test_scenes, categories,
          long_tail, seed, provider_seed, embed_dim, out_path):
    """Generate a synthetic dataset with a controllable label rule."""

    def body(t0):
        overrides = {"synth": {
            "task": task, "scenes": scenes, "test_scenes": test_scenes,
            "num_categories": categories, "long_tail": long_tail, "seed": seed,
            "provider_seed": provider_seed, "embed_dim": embed_dim,
        }}
        cfg, margs = _resolve(config_path, manifest_path, overrides)
        synth_args = {k: v for k, v in cfg.synth.items() if v is not None}
        try:
            spec = data_mod.SynthTaskSpec(**synth_args)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        dataset = data_mod.generate_synthetic(spec)
        data_mod.save_dataset(out_path, dataset)
        out_dir = _out_dir(os.path.dirname(os.path.abspath(out_path)))
        write_manifest(out_dir, "synth", cfg, {"out": os.path.basename(out_path)},
                       time.perf_counter() - t0)
        click.echo(f"wrote {out_path}: {len(dataset.train)} train / "
                   f"{len(dataset.test)} test scenes ({spec.task})")

    _run("synth", body)


@main.command()
@_common_options
@click.option("--data", "data_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--eval-every", type=int, default=None)
@click.option("--resume", "resume", is_flag=True, default=False,
              help="continue from <out>/latest checkpoint")
def train(config_path, manifest_path, data_path, out_path, epochs, lr,
          batch_size, seed, eval_every, resume):
    """Train the interaction predictor on a dataset."""

    def body(t0):
        from .training import train as run_train

        overrides = {"train": {"epochs": epochs, "lr": lr, "batch_size": batch_size,
                               "seed": seed, "eval_every": eval_every}}
        cfg, _ = _resolve(config_path, manifest_path, overrides)
        dataset = data_mod.load_dataset(data_path)
        out_dir = _out_dir(out_path)
        model = _build_model(cfg, dataset)

        def eval_fn(m):
            preds = m.predict_dataset(dataset.test)
            metrics = evaluate_hico(preds, dataset.test_ground_truth(),
                                    dataset.registry.class_index,
                                    dataset.split_registry(), "default")
            return {"map_full": metrics["full"]}

        resume_from = os.path.join(out_dir, "latest") if resume else None
        result = run_train(model, dataset, cfg.train, out_dir=out_dir,
                           resume_from=resume_from,
                           eval_fn=eval_fn if cfg.train.eval_every else None)
        write_manifest(out_dir, "train", cfg, {"data": data_path},
                       time.perf_counter() - t0)
        click.echo(f"trained {result.epochs_run} epochs, final loss "
                   f"{result.final_loss:.6f}, checkpoint {result.checkpoint_path}")

    _run("train", body)


@main.command(name="eval")
@_common_options
@click.option("--data", "data_path", type=click.Path(exists=True), required=True)
@click.option("--checkpoint", type=click.Path(exists=True), default=None)
@click.option("--preds", "preds_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_path", type=click.Path(), default=None)
def eval_cmd(config_path, manifest_path, data_path, checkpoint, preds_path, out_path):
    """Evaluate a checkpoint or a prediction file under every metric setting."""

    def body(t0):
        cfg, _ = _resolve(config_path, manifest_path, {})
        dataset = data_mod.load_dataset(data_path)
        if (checkpoint is None) == (preds_path is None):
            raise ConfigError("pass exactly one of --checkpoint / --preds")
        if checkpoint is not None:
            model = _build_model(cfg, dataset)
            model.load(checkpoint)
            preds = model.predict_dataset(dataset.test)
        else:
            preds = data_mod.load_predictions(preds_path)
        report = {"hico": _hico_metrics(cfg, dataset, preds)}
        gts = dataset.test_ground_truth()
        report["vcoco"] = {
            "scenario_1": evaluate_vcoco(preds, gts, 1)["role_ap"],
            "scenario_2": evaluate_vcoco(preds, gts, 2)["role_ap"],
        }
        for setting, vals in report["hico"].items():
            click.echo(f"[{setting}] full={vals['full']:.4f} rare={vals['rare']:.4f} "
                       f"non-rare={vals['non_rare']:.4f}")
        click.echo(f"[vcoco] scenario1={report['vcoco']['scenario_1']:.4f} "
                   f"scenario2={report['vcoco']['scenario_2']:.4f}")
        if out_path:
            out_dir = _out_dir(out_path)
            with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
                json.dump(report, fh, sort_keys=True, indent=1)
            write_manifest(out_dir, "eval", cfg, {"data": data_path},
                           time.perf_counter() - t0)

    _run("eval", body)


@main.command()
@_common_options
@click.option("--data", "data_path", type=click.Path(exists=True), required=True)
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--limit", type=int, default=None, help="keep top-k per image")
def infer(config_path, manifest_path, data_path, checkpoint, out_path, limit):
    """Write predictions for the test scenes of a dataset."""

    def body(t0):
        cfg, _ = _resolve(config_path, manifest_path, {})
        dataset = data_mod.load_dataset(data_path)
        model = _build_model(cfg, dataset)
        model.load(checkpoint)
        preds = model.predict_dataset(dataset.test)
        if limit is not None:
            kept, seen = [], {}
            for p in preds:
                c = seen.get(p.image_key, 0)
                if c < limit:
                    kept.append(p)
                    seen[p.image_key] = c + 1
            preds = kept
        data_mod.save_predictions(out_path, preds)
        out_dir = _out_dir(os.path.dirname(os.path.abspath(out_path)))
        write_manifest(out_dir, "infer", cfg, {"data": data_path},
                       time.perf_counter() - t0)
        click.echo(f"wrote {len(preds)} predictions to {out_path}")

    _run("infer", body)


@main.command()
@_common_options
@click.option("--data", "data_path", type=click.Path(exists=True), required=True)
@click.option("--stages", type=str, default="",
              help="comma-separated stages to ablate, e.g. 'visual,textual'")
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--seed", type=int, default=None)
def ablate(config_path, manifest_path, data_path, stages, out_path, epochs, lr, seed):
    """Train/evaluate the vanilla model and one model per ablated stage."""

    def body(t0):
        overrides = {"train": {"epochs": epochs, "lr": lr, "seed": seed}}
        cfg, _ = _resolve(config_path, manifest_path, overrides)
        dataset = data_mod.load_dataset(data_path)
        stage_list = [s.strip() for s in stages.split(",") if s.strip()]
        out_dir = _out_dir(out_path)
        rows = ablation_run(dataset, cfg.model, cfg.train, stage_list, out_dir=out_dir)
        table = format_ablation_table(rows)
        click.echo(table)
        with open(os.path.join(out_dir, "ablation.json"), "w") as fh:
            json.dump(rows, fh, sort_keys=True, indent=1)
        with open(os.path.join(out_dir, "ablation.txt"), "w") as fh:
            fh.write(table + "\n")
        write_manifest(out_dir, "ablate", cfg,
                       {"data": data_path, "stages": stage_list},
                       time.perf_counter() - t0)

    _run("ablate", body)


@main.command()
@_common_options
@click.option("--data", "data_path", type=click.Path(exists=True), required=True)
@click.option("--preds", "preds_path", type=click.Path(exists=True), default=None)
@click.option("--checkpoint", type=click.Path(exists=True), default=None)
@click.option("--attention-key", type=str, default=None,
              help="also render attention heatmaps for this test image")
@click.option("--out", "out_path", type=click.Path(), required=True)
def plot(config_path, manifest_path, data_path, preds_path, checkpoint,
         attention_key, out_path):
    """Render PR curves (and optionally attention heatmaps) as PNG files."""

    def body(t0):
        from .plots import attention_heatmaps, pr_curves

        cfg, _ = _resolve(config_path, manifest_path, {})
        dataset = data_mod.load_dataset(data_path)
        out_dir = _out_dir(out_path)
        model = None
        if checkpoint is not None:
            model = _build_model(cfg, dataset)
            model.load(checkpoint)
        if preds_path is not None:
            preds = data_mod.load_predictions(preds_path)
        elif model is not None:
            preds = model.predict_dataset(dataset.test)
        else:
            raise ConfigError("pass --preds or --checkpoint")
        paths = pr_curves(preds, dataset.test_ground_truth(), dataset.registry, out_dir)
        if attention_key is not None:
            if model is None:
                raise ConfigError("--attention-key needs --checkpoint")
            scene = next((s for s in dataset.test if s.key == attention_key), None)
            if scene is None:
                raise _Fail(f"no test scene with key {attention_key!r}")
            paths += attention_heatmaps(model.attention_export(scene), out_dir)
        write_manifest(out_dir, "plot", cfg, {"data": data_path},
                       time.perf_counter() - t0)
        click.echo(f"wrote {len(paths)} plots to {out_dir}")

    _run("plot", body)


@main.command(name="dump-graph")
@_common_options
@click.option("--data", "data_path", type=click.Path(exists=True), required=True)
@click.option("--checkpoint", type=click.Path(exists=True), default=None)
@click.option("--image", "image_key", type=str, required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def dump_graph(config_path, manifest_path, data_path, checkpoint, image_key, out_path):
    """Dump per-iteration node / edge / gate tensors for one image."""

    def body(t0):
        cfg, _ = _resolve(config_path, manifest_path, {})
        dataset = data_mod.load_dataset(data_path)
        scene = next((s for s in dataset.train + dataset.test if s.key == image_key),
                     None)
        if scene is None:
            raise _Fail(f"no scene with key {image_key!r}")
        model = _build_model(cfg, dataset)
        if checkpoint is not None:
            model.load(checkpoint)
        dump = model.dump_graph(scene)
        with open(out_path, "w", encoding="utf-8") as fh:
            json.dump(dump, fh, sort_keys=True)
            fh.write("\n")
        click.echo(f"wrote graph dump for {image_key} to {out_path}")

    _run("dump-graph", body)


if __name__ == "__main__":
    main()
