"""Ensemble Monte Carlo Dropout prediction and OOD summaries.

Each of ``E`` trained models is run ``T`` times in ``mc_inference`` mode
(dropout on, batchnorm frozen), giving ``N = E*T`` softmax vectors per
input. Their mean is the prediction, their per-class population standard
deviation the uncertainty.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from fusenet_uq.models import Model, predict_proba
from fusenet_uq.rng import stream
from fusenet_uq.tensor import ContractError, ShapeError


class EnsembleConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnsembleConfig:
    num_models: int = 5
    passes_per_model: int = 10
    base_seed: int = 0
    batch_size: int = 100

    def __post_init__(self):
        if self.num_models < 1 or self.passes_per_model < 1:
            raise EnsembleConfigError("num_models and passes_per_model must be >= 1")

    @property
    def total_passes(self) -> int:
        return self.num_models * self.passes_per_model

    def pass_rng(self, model_index: int, pass_index: int):
        return stream(self.base_seed, 7, model_index, pass_index)


@dataclass
class PredictiveSummary:
    """EMCD output for a batch of ``B`` inputs and ``K`` classes."""

    class_mean: np.ndarray  # [B, K]
    class_std: np.ndarray  # [B, K]
    entropy: np.ndarray  # [B], nats
    predicted_class: np.ndarray  # [B]
    num_passes: int
    passes: Optional[np.ndarray] = field(default=None, repr=False)  # [N, B, K]


def predictive_entropy(class_mean) -> np.ndarray:
    """``-sum p ln p`` over the last axis, with ``0 ln 0 = 0``."""
    p = np.asarray(class_mean, dtype=np.float64)
    if np.any(p < -1e-12) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise ContractError("entropy needs normalised probability vectors")
    p = np.clip(p, 0.0, 1.0)
    logs = np.log(np.where(p > 0, p, 1.0))
    return np.maximum(-(p * logs).sum(axis=-1), 0.0)


def summarize_passes(passes: np.ndarray, keep: bool = True) -> PredictiveSummary:
    """Aggregate stacked pass outputs ``[N, B, K]`` (in pass-index order)."""
    passes = np.asarray(passes, dtype=np.float64)
    if passes.ndim != 3 or len(passes) == 0:
        raise ShapeError(f"expected passes of shape [N, B, K], got {passes.shape}")
    ref = passes[0]
    dev = passes - ref
    # shifting by the first pass keeps identical passes exactly identical
    mean = ref + dev.mean(axis=0)
    std = np.sqrt(((dev - (mean - ref)) ** 2).mean(axis=0))
    return PredictiveSummary(
        class_mean=mean,
        class_std=std,
        entropy=predictive_entropy(mean),
        predicted_class=mean.argmax(axis=-1),
        num_passes=len(passes),
        passes=passes if keep else None,
    )


def _check_models(models: Sequence[Model], config: EnsembleConfig):
    if len(models) != config.num_models:
        raise EnsembleConfigError(f"config expects {config.num_models} models, got {len(models)}")
    ref = models[0].spec.to_dict()
    for m in models[1:]:
        if m.spec.to_dict() != ref:
            raise EnsembleConfigError("all ensemble members must share one ModelSpec")


def run_passes(models: Sequence[Model], x: np.ndarray, config: EnsembleConfig, jobs: int = 1) -> np.ndarray:
    """All ``E*T`` Monte Carlo dropout passes, stacked model-major as ``[N, B, K]``.

    ``jobs > 1`` runs passes on a thread pool; each pass owns its RNG stream
    and results are placed by pass index, so the output does not depend on
    ``jobs``.
    """
    _check_models(models, config)
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    shape = tuple(models[0].spec.input_shape)
    if x.ndim != 4 or tuple(x.shape[1:]) != shape:
        raise ShapeError(f"inputs must be [B, {', '.join(map(str, shape))}], got {x.shape}; resize them first")
    if jobs < 1:
        raise ValueError(f"jobs must be >= 1, got {jobs}")
    tasks = [(e, t) for e in range(len(models)) for t in range(config.passes_per_model)]

    def one(task):
        e, t = task
        return predict_proba(models[e], x, "mc_inference", config.pass_rng(e, t), config.batch_size)

    if jobs == 1:
        return np.stack([one(task) for task in tasks])
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return np.stack(list(pool.map(one, tasks)))


def emcd_predict(
    models: Sequence[Model],
    x: np.ndarray,
    config: Optional[EnsembleConfig] = None,
    keep_passes: bool = True,
    jobs: int = 1,
) -> PredictiveSummary:
    """Ensemble Monte Carlo Dropout prediction for ``x[B, C, H, W]`` (or one ``[C, H, W]`` image)."""
    models = list(models)
    config = config or EnsembleConfig(num_models=len(models))
    return summarize_passes(run_passes(models, x, config, jobs), keep=keep_passes)


# --- out-of-distribution reporting -------------------------------------------------

@dataclass
class SetSummary:
    class_mean: list  # per-class Mean, averaged over samples
    class_std: list  # per-class STD, averaged over samples
    mean_entropy: float
    mean_max_std: float
    entropy: list  # per-sample
    max_std: list  # per-sample

    @classmethod
    def from_summary(cls, s: PredictiveSummary) -> "SetSummary":
        max_std = s.class_std.max(axis=1)
        return cls(
            s.class_mean.mean(axis=0).tolist(),
            s.class_std.mean(axis=0).tolist(),
            float(s.entropy.mean()),
            float(max_std.mean()),
            s.entropy.tolist(),
            max_std.tolist(),
        )


@dataclass
class OodReport:
    class_names: list
    models: dict  # kind -> {"in", "ood": SetSummary, "num_passes": int, "uncertainty_disabled": bool}
    passes_per_model: int

    def to_dict(self) -> dict:
        out = {"class_names": self.class_names, "passes_per_model": self.passes_per_model, "models": {}}
        for kind, rec in self.models.items():
            out["models"][kind] = {
                "num_passes": rec["num_passes"],
                "uncertainty_disabled": rec["uncertainty_disabled"],
                "in": vars(rec["in"]),
                "ood": vars(rec["ood"]),
            }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """Per-class Mean/STD rows per model and set, plus entropy summaries."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "set", "statistic", *self.class_names, "mean_entropy", "mean_max_std", "flag"])
        for kind, rec in self.models.items():
            flag = "uncertainty disabled" if rec["uncertainty_disabled"] else ""
            for which in ("in", "ood"):
                s = rec[which]
                tail = [f"{s.mean_entropy:.6f}", f"{s.mean_max_std:.6f}", flag]
                w.writerow([kind, which, "Mean", *(f"{v:.6f}" for v in s.class_mean), *tail])
                w.writerow([kind, which, "STD", *(f"{v:.6f}" for v in s.class_std), *tail])
        return buf.getvalue()


def ood_report(
    models_by_kind: dict,
    samples_in: np.ndarray,
    samples_ood: np.ndarray,
    config: EnsembleConfig,
    class_names: Optional[Sequence[str]] = None,
    jobs: int = 1,
) -> OodReport:
    """Compare EMCD uncertainty on in-distribution vs out-of-distribution samples.

    ``models_by_kind`` maps a label (e.g. the model kind) to its list of
    ensemble members; ``config.num_models`` must match each list.
    """
    if len(samples_in) == 0 or len(samples_ood) == 0:
        raise ValueError("both sample sets must be non-empty")
    records = {}
    k = None
    for kind, models in models_by_kind.items():
        models = list(models)
        cfg = EnsembleConfig(len(models), config.passes_per_model, config.base_seed, config.batch_size)
        s_in = emcd_predict(models, samples_in, cfg, keep_passes=False, jobs=jobs)
        s_ood = emcd_predict(models, samples_ood, cfg, keep_passes=False, jobs=jobs)
        k = s_in.class_mean.shape[1]
        records[kind] = {
            "in": SetSummary.from_summary(s_in),
            "ood": SetSummary.from_summary(s_ood),
            "num_passes": cfg.total_passes,
            "uncertainty_disabled": all(m.spec.dropout_disabled() for m in models),
        }
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    return OodReport(names, records, config.passes_per_model)
