"""``fusenet-uq`` command line.

Subcommands: ``train``, ``eval``, ``noise-sweep``, ``ood`` and ``predict``.
Each reads a JSON experiment config; artifacts go to ``output.dir`` (or
``--out``). Outputs are a pure function of config, dataset bytes and seeds;
timestamps are written only to the ``run.log`` sidecar.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from fusenet_uq.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from fusenet_uq.config import ConfigError, ExperimentConfig, load_config
from fusenet_uq.data import (
    DataError,
    DatasetManifest,
    LabeledSet,
    LoadError,
    SYNTHETIC_CLASSES,
    NoiseSpec,
    add_gaussian_noise,
    load_dataset,
    read_idx,
    read_pgm,
    stratified_split,
    synthesize_dataset,
    synthesize_digits,
    synthesize_noise_images,
    to_unit_images,
)
from fusenet_uq.kernels import BACKEND
from fusenet_uq.metrics import CSV_COLUMNS, evaluate_predictions, reports_to_csv
from fusenet_uq.models import KINDS, ModelSpec, SpecError, build_model
from fusenet_uq.rng import derive_seed
from fusenet_uq.train import evaluate, fit
from fusenet_uq.uncertainty import EnsembleConfig, EnsembleConfigError, emcd_predict, ood_report

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_IO = 0, 2, 3, 4
SWEEP_COLUMNS = ("DL Model", "Noise STD", "Precision", "Recall", "F-Measure", "Accuracy")

log = logging.getLogger("fusenet_uq")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --- helpers ----------------------------------------------------------------------

def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _geometry(cfg: ExperimentConfig) -> tuple:
    return (cfg.model.input_size, cfg.model.input_size)


def _dataset(cfg: ExperimentConfig, manifest: Optional[str], synthetic: bool) -> LabeledSet:
    if manifest is None and not synthetic:
        synthetic = cfg.data.synthetic
        manifest = cfg.data.manifest
    if synthetic:
        if cfg.model.num_classes != 3 or cfg.model.channels != 1:
            raise CliError(EXIT_CONFIG, "the synthetic set has 3 classes and 1 channel")
        return synthesize_dataset(cfg.data.n_per_class, cfg.data.seed, cfg.model.input_size)
    path = Path(manifest)
    if not path.exists():
        raise CliError(EXIT_DATA, f"manifest not found: {path}")
    return load_dataset(DatasetManifest.read(path, _geometry(cfg)), cfg.model.num_classes)


def _splits(cfg: ExperimentConfig, ds: LabeledSet) -> tuple:
    """(train, val, test) per ``data.split``."""
    return stratified_split(ds, tuple(cfg.data.split), cfg.data.seed)


def _load_models(paths: Sequence[str]) -> dict:
    """Checkpoints grouped by model kind (insertion order kept)."""
    if not paths:
        raise CliError(EXIT_CONFIG, "at least one --checkpoints path is required")
    groups: dict = {}
    for p in paths:
        try:
            model, _ = load_checkpoint(p)
        except FileNotFoundError:
            raise CliError(EXIT_IO, f"checkpoint not found: {p}") from None
        groups.setdefault(model.spec.kind, []).append(model)
    for kind, models in groups.items():
        ref = models[0].spec.to_dict()
        if any(m.spec.to_dict() != ref for m in models[1:]):
            raise CliError(EXIT_CONFIG, f"incompatible checkpoint specs for {kind}")
    return groups


def _check_input_shape(groups: dict, x: np.ndarray) -> None:
    for kind, models in groups.items():
        shape = tuple(models[0].spec.input_shape)
        if tuple(x.shape[1:]) != shape:
            raise CliError(EXIT_CONFIG, f"{kind} checkpoints expect inputs {shape}, data has {tuple(x.shape[1:])}")


def _ensemble(cfg: ExperimentConfig, n_models: int, passes: int) -> EnsembleConfig:
    return EnsembleConfig(n_models, passes, cfg.ensemble.base_seed)


def _score(models, ds: LabeledSet, cfg: ExperimentConfig, emcd: Optional[int], jobs: int):
    if emcd is None:
        return evaluate(models, ds)
    ens = _ensemble(cfg, len(models), emcd)
    probs = emcd_predict(models, ds.x, ens, keep_passes=False, jobs=jobs).class_mean
    return probs, evaluate_predictions(ds.y, probs, models[0].spec.num_classes)


def _read_images(path: str, geometry: tuple) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_DATA, f"input not found: {p}")
    if p.suffix.lower() == ".pgm":
        return to_unit_images(read_pgm(p)[None], geometry)
    raw = read_idx(p)
    if raw.ndim == 2:
        raw = raw[None]
    if raw.ndim != 3:
        raise CliError(EXIT_DATA, f"{p}: expected a rank-2 or rank-3 image archive")
    return to_unit_images(raw, geometry)


# --- commands -----------------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, args) -> dict:
    spec = ModelSpec.default(cfg.model.kind, (cfg.model.channels, *_geometry(cfg)), cfg.model.num_classes)
    train, val, _ = _splits(cfg, _dataset(cfg, args.manifest, args.synthetic))
    out = Path(cfg.output.dir)
    # where artifacts go does not change what is trained
    digest_src = {k: v for k, v in cfg.to_dict().items() if k != "output"}
    written = []
    for e in range(cfg.ensemble.num_models):
        seed = derive_seed(cfg.train.seed, e)
        model = build_model(spec, seed)
        model, history = fit(model, train, dataclasses.replace(cfg.train, seed=seed), val_set=val)
        stem = f"{spec.kind}_{e}"
        ckpt = out / "checkpoints" / f"{stem}.ufnc"
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, ckpt, seed, digest_src)
        _write(out / f"{stem}_history.csv", history.to_csv())
        log.info("trained %s member %d (seed %d, best epoch %s)", spec.kind, e, seed, history.best_epoch)
        written.append(str(ckpt))
    return {"checkpoints": written}


def cmd_eval(cfg: ExperimentConfig, args) -> dict:
    groups = _load_models(args.checkpoints)
    _, _, test = _splits(cfg, _dataset(cfg, args.manifest, args.synthetic))
    _check_input_shape(groups, test.x)
    condition = "deterministic" if args.emcd is None else f"emcd T={args.emcd}"
    rows, detail = [], {}
    for kind, models in groups.items():
        _, report = _score(models, test, cfg, args.emcd, args.jobs)
        rows.append(report.row(kind, condition))
        detail[kind] = report.to_dict()
        log.info("evaluated %s (%s): accuracy %.3f", kind, condition, report.accuracy)
    out = Path(cfg.output.dir)
    _write(out / "eval.csv", reports_to_csv(rows))
    _write(out / "eval.json", json.dumps({"condition": condition, "models": detail}, indent=2, sort_keys=True))
    return {"rows": rows}


def cmd_noise_sweep(cfg: ExperimentConfig, args) -> dict:
    grid = cfg.noise.grid if args.grid is None else args.grid
    if any(s < 0 for s in grid):
        raise CliError(EXIT_CONFIG, "noise std values must be >= 0")
    groups = _load_models(args.checkpoints)
    _, _, test = _splits(cfg, _dataset(cfg, args.manifest, args.synthetic))
    _check_input_shape(groups, test.x)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    rows = []
    for kind, models in groups.items():
        for std in grid:
            noisy = LabeledSet(add_gaussian_noise(test.x, NoiseSpec(float(std), cfg.noise.clip_to_unit), cfg.noise.seed), test.y, test.class_names)
            _, report = _score(models, noisy, cfg, args.emcd, args.jobs)
            row = report.row(kind, f"{std:g}")
            writer.writerow([kind, f"{std:g}", *(row[c] for c in CSV_COLUMNS[2:])])
            rows.append(row)
    _write(Path(cfg.output.dir) / "noise_sweep.csv", buf.getvalue())
    return {"rows": rows}


def _image_set(cfg: ExperimentConfig, which: str, args) -> np.ndarray:
    n, g = cfg.data.ood_count, cfg.model.input_size
    if which == "test":
        _, _, test = _splits(cfg, _dataset(cfg, args.manifest, args.synthetic))
        return test.x[:n]
    if which == "digits":
        return synthesize_digits(n, cfg.data.seed, g)
    if which == "noise":
        return synthesize_noise_images(n, cfg.data.seed, g)
    p = Path(which)
    if p.suffix.lower() == ".csv":
        if not p.exists():
            raise CliError(EXIT_DATA, f"manifest not found: {p}")
        return load_dataset(DatasetManifest.read(p, _geometry(cfg)), None).x
    return _read_images(which, _geometry(cfg))


def cmd_ood(cfg: ExperimentConfig, args) -> dict:
    groups = _load_models(args.checkpoints)
    x_in = _image_set(cfg, args.in_set, args)
    x_ood = _image_set(cfg, args.ood_set or cfg.data.ood, args)
    if len(x_in) == 0 or len(x_ood) == 0:
        raise CliError(EXIT_DATA, "the in-distribution and OOD sets must be non-empty")
    _check_input_shape(groups, x_in)
    _check_input_shape(groups, x_ood)
    passes = args.emcd if args.emcd is not None else cfg.ensemble.passes_per_model
    ens = EnsembleConfig(1, passes, cfg.ensemble.base_seed)
    names = None
    if cfg.data.synthetic and cfg.model.num_classes == 3:
        names = list(SYNTHETIC_CLASSES)
    report = ood_report(groups, x_in, x_ood, ens, names, jobs=args.jobs)
    out = Path(cfg.output.dir)
    _write(out / "ood.csv", report.to_csv())
    _write(out / "ood.json", report.to_json())
    for kind, rec in report.models.items():
        log.info("ood %s: entropy in %.4f, ood %.4f", kind, rec["in"].mean_entropy, rec["ood"].mean_entropy)
    return {"report": report.to_dict()}


def cmd_predict(cfg: ExperimentConfig, args) -> dict:
    groups = _load_models(args.checkpoints)
    x = np.concatenate([_read_images(p, _geometry(cfg)) for p in args.input])
    _check_input_shape(groups, x)
    passes = args.emcd if args.emcd is not None else cfg.ensemble.passes_per_model
    result = {}
    for kind, models in groups.items():
        s = emcd_predict(models, x, _ensemble(cfg, len(models), passes), keep_passes=False, jobs=args.jobs)
        result[kind] = [
            {
                "input": path,
                "predicted_class": int(s.predicted_class[i]),
                "class_mean": s.class_mean[i].tolist(),
                "class_std": s.class_std[i].tolist(),
                "entropy": float(s.entropy[i]),
                "num_passes": s.num_passes,
            }
            for i, path in enumerate(args.input)
        ]
    text = json.dumps(result, indent=2, sort_keys=True)
    _write(Path(cfg.output.dir) / "predict.json", text)
    print(text)
    return result


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "noise-sweep": cmd_noise_sweep,
    "ood": cmd_ood,
    "predict": cmd_predict,
}


# --- argument parsing ---------------------------------------------------------------

def _grid(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}; expected comma-separated numbers") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusenet-uq", description="Fusion CNN training and ensemble MC-dropout uncertainty.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--jobs", type=int, default=1, help="worker threads for Monte Carlo passes")
        src = p.add_mutually_exclusive_group()
        src.add_argument("--synthetic", action="store_true", help="use the synthetic surrogate set")
        src.add_argument("--manifest", help="dataset manifest CSV (path,label,class_name)")
        if name == "train":
            p.add_argument("--spec", choices=KINDS, help="model kind (overrides model.kind)")
            p.add_argument("--models", type=int, help="ensemble size (overrides ensemble.num_models)")
        else:
            p.add_argument("--checkpoints", nargs="+", required=True)
            p.add_argument("--emcd", type=int, metavar="T", help="Monte Carlo passes per model")
        if name == "noise-sweep":
            p.add_argument("--grid", type=_grid, help="comma-separated noise std values")
        if name == "ood":
            p.add_argument("--in-set", default="test", help="'test' or a manifest/image path")
            p.add_argument("--ood-set", help="'digits', 'noise' or a manifest/image path")
        if name == "predict":
            p.add_argument("--input", nargs="+", required=True, help="PGM or IDX image files")
    return parser


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.out:
        cfg.output = dataclasses.replace(cfg.output, dir=args.out)
    if getattr(args, "spec", None):
        cfg.model = dataclasses.replace(cfg.model, kind=args.spec)
    if getattr(args, "models", None) is not None:
        if args.models < 1:
            raise CliError(EXIT_CONFIG, "--models must be >= 1")
        cfg.ensemble = dataclasses.replace(cfg.ensemble, num_models=args.models)
    if getattr(args, "emcd", None) is not None and args.emcd < 1:
        raise CliError(EXIT_CONFIG, "--emcd must be >= 1")
    if args.jobs < 1:
        raise CliError(EXIT_CONFIG, "--jobs must be >= 1")
    if args.synthetic:
        cfg.data = dataclasses.replace(cfg.data, synthetic=True)
    return cfg


def _setup_log(out: Path) -> logging.Handler:
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    handler = None
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        handler = _setup_log(Path(cfg.output.dir))
        log.info("fusenet-uq %s (kernels: %s)", args.command, BACKEND)
        COMMANDS[args.command](cfg, args)
        return EXIT_OK
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except (ConfigError, SpecError, EnsembleConfigError) as exc:
        code, msg = EXIT_CONFIG, str(exc)
    except (LoadError, DataError) as exc:
        code, msg = EXIT_DATA, str(exc)
    except CheckpointError as exc:
        code, msg = EXIT_IO, str(exc)
    except OSError as exc:
        code, msg = EXIT_IO, f"{exc.filename or ''}: {exc.strerror or exc}".lstrip(": ")
    finally:
        if handler is not None:
            log.removeHandler(handler)
            handler.close()
    print(f"fusenet-uq {args.command}: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
