"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The empirical criteria (5-7) share models trained once per session on the
32x32 synthetic set: 300 training and 100 test images per class.
"""

import json
import time

import numpy as np
import pytest

from fusenet_uq import tensor as T
from fusenet_uq.checkpoint import CheckpointError, dumps, loads
from fusenet_uq.cli import main as cli_main
from fusenet_uq.data import (
    NOISE_GRID,
    NoiseSpec,
    add_gaussian_noise,
    stratified_split,
    synthesize_dataset,
    synthesize_digits,
    synthesize_noise_images,
)
from fusenet_uq.layers import dense, mc_dropout
from fusenet_uq.metrics import report_from_confusion, roc_auc
from fusenet_uq.models import ModelSpec, build_model, predict_proba
from fusenet_uq.rng import stream
from fusenet_uq.tensor import GradTape, Tensor
from fusenet_uq.train import TrainConfig, fit
from fusenet_uq.uncertainty import EnsembleConfig, emcd_predict

from oracles import concordance_auc, finite_difference, hand_weighted_metrics, naive_conv2d, relative_error

GEOMETRY = 32
SEEDS = (0, 1, 2)
F64 = np.float64


# --- shared trained models --------------------------------------------------------

class Trained:
    def __init__(self):
        data = synthesize_dataset(400, seed=0, geometry=GEOMETRY)
        self.train, self.test = stratified_split(data, (0.75, 0.25), seed=0)
        self.models = {}
        self.seconds = {}

    def get(self, kind, seed):
        key = (kind, seed)
        if key not in self.models:
            start = time.perf_counter()
            model = build_model(ModelSpec.default(kind, (1, GEOMETRY, GEOMETRY)), seed)
            model, history = fit(model, self.train, TrainConfig(epochs=20, seed=seed))
            self.seconds[key] = time.perf_counter() - start
            self.models[key] = (model, history)
        return self.models[key][0]

    def accuracy(self, model, x=None):
        x = self.test.x if x is None else x
        return float((predict_proba(model, x).argmax(1) == self.test.y).mean())


@pytest.fixture(scope="module")
def trained():
    return Trained()


# --- criterion 1: gradients -------------------------------------------------------

def _away_from_zero(rng, shape):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < 0.05, x + np.sign(x + 1e-12) * 0.1, x)


def _case(op, rng):
    """(input arrays, function of Tensors -> Tensor) for one random instance of ``op``."""
    r = lambda *s: rng.standard_normal(s)
    d = lambda lo=1, hi=4: int(rng.integers(lo, hi + 1))
    if op == "add":
        m, n = d(), d()
        return [r(m, n), r(n)], lambda a, b: T.add(a, b)
    if op == "sub":
        m, n = d(), d()
        return [r(m, n), r(m, 1)], lambda a, b: T.sub(a, b)
    if op == "mul":
        m, n = d(), d()
        return [r(m, n), r(1, n)], lambda a, b: T.mul(a, b)
    if op == "relu":
        return [_away_from_zero(rng, (d(), d(), d()))], T.relu
    if op == "sum":
        shape = (d(), d(), d())
        axis = [None, 0, 1, 2, (0, 2)][int(rng.integers(5))]
        return [r(*shape)], lambda a: T.tsum(a, axis)
    if op == "mean":
        shape = (d(), d(), d())
        axis = [None, 0, 1, 2, (1, 2)][int(rng.integers(5))]
        return [r(*shape)], lambda a: T.mean(a, axis)
    if op == "reshape":
        m, n, k = d(), d(), d()
        return [r(m, n, k)], lambda a: T.reshape(a, (n, m * k))
    if op == "concat":
        m, n1, n2 = d(), d(), d()
        return [r(m, n1), r(m, n2)], lambda a, b: T.concat([a, b], axis=1)
    if op == "matmul":
        m, k, n = d(), d(), d()
        return [r(m, k), r(k, n)], T.matmul
    if op == "conv2d":
        b, c, f = d(1, 2), d(1, 2), d(1, 2)
        h, w = d(2, 5), d(2, 5)
        k = int(rng.choice([1, 3, 5]))
        return [r(b, c, h, w), r(f, c, k, k), r(f)], T.conv2d
    if op == "maxpool2d":
        b, c, h, w = d(1, 2), d(1, 2), 2 * d(1, 3), 2 * d(1, 3)
        return [r(b, c, h, w)], lambda a: T.maxpool2d(a, 2, 2)
    if op == "global_average_pool":
        return [r(d(1, 2), d(1, 3), d(1, 4), d(1, 4))], T.global_average_pool
    if op == "batchnorm_train":
        b, c, h, w = d(2, 3), d(1, 3), d(1, 3), d(1, 3)
        return [r(b, c, h, w), r(c), r(c)], lambda x, g, bt: T.batchnorm(x, g, bt, None, "train")
    if op == "batchnorm_eval":
        b, c, h, w = d(1, 3), d(1, 3), d(1, 3), d(1, 3)
        stats = T.BatchNormStats(rng.standard_normal(c), rng.uniform(0.5, 2.0, c))
        return [r(b, c, h, w), r(c), r(c)], lambda x, g, bt: T.batchnorm(x, g, bt, stats, "eval")
    if op == "softmax":
        return [r(d(), d(2, 5))], T.softmax
    if op == "cross_entropy":
        n, k = d(), d(2, 5)
        p = rng.uniform(0.05, 1.0, (n, k))
        labels = rng.integers(0, k, n)
        return [p / p.sum(1, keepdims=True)], lambda a: T.cross_entropy(a, labels)
    if op == "softmax_cross_entropy":
        n, k = d(), d(2, 5)
        labels = rng.integers(0, k, n)
        return [r(n, k)], lambda a: T.softmax_cross_entropy(a, labels)
    if op == "dense_relu":
        n, i, o = d(), d(), d()
        x, w, b = r(n, i), r(i, o), r(o)
        pre = x @ w + b
        b = np.where(np.abs(pre).min(0) < 0.05, b + 0.2, b)
        return [x, w, b], lambda a, ww, bb: dense(a, ww, bb, "relu")
    if op == "mc_dropout":
        seed = int(rng.integers(1 << 30))
        return [r(d(), d())], lambda a: mc_dropout(a, 0.4, stream(seed), True)
    raise KeyError(op)


GRAD_OPS = (
    "add", "sub", "mul", "relu", "sum", "mean", "reshape", "concat", "matmul", "conv2d",
    "maxpool2d", "global_average_pool", "batchnorm_train", "batchnorm_eval", "softmax",
    "cross_entropy", "softmax_cross_entropy", "dense_relu", "mc_dropout",
)
CASES_PER_OP = 20


def _grad_check(op, seed):
    rng = np.random.default_rng(seed)
    arrays, fn = _case(op, rng)
    out_shape = fn(*[Tensor(a, dtype=F64) for a in arrays]).shape
    weights = rng.standard_normal(out_shape) if out_shape else np.ones(())

    def scalar(*arrs):
        return float((fn(*[Tensor(a, dtype=F64) for a in arrs]).data * weights).sum())

    leaves = [Tensor(a.copy(), requires_grad=True, dtype=F64) for a in arrays]
    with GradTape() as tape:
        out = fn(*leaves)
        loss = T.tsum(T.mul(out, Tensor(weights, dtype=F64))) if out.shape else out
    tape.backward(loss)
    numeric = finite_difference(scalar, [a.copy() for a in arrays], h=1e-5)
    return max(relative_error(t.grad, n) for t, n in zip(leaves, numeric))


def test_criterion_1_gradient_correctness(acceptance_log):
    start = time.perf_counter()
    worst, failures = 0.0, []
    for op in GRAD_OPS:
        for case in range(CASES_PER_OP):
            err = _grad_check(op, 1000 * GRAD_OPS.index(op) + case)
            worst = max(worst, err)
            if not err < 1e-4:
                failures.append((op, case, err))
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 120
    acceptance_log(
        1, "finite-difference gradient checks", ok,
        f"{len(GRAD_OPS)} ops x {CASES_PER_OP} cases, worst rel err {worst:.2e}, {elapsed:.1f}s",
    )
    assert not failures, failures[:5]
    assert elapsed < 120


# --- criterion 2: convolution oracle ----------------------------------------------

def test_criterion_2_conv_matches_naive(acceptance_log):
    rng = np.random.default_rng(2)
    worst = 0.0
    for case in range(50):
        b, c, f = rng.integers(1, 4, 3)
        h, w = rng.integers(1, 9, 2)
        k = int(rng.choice([1, 3, 5, 7]))
        x = rng.standard_normal((b, c, h, w))
        wt = rng.standard_normal((f, c, k, k))
        bias = rng.standard_normal(f) if case % 2 else None
        fast = T.conv2d(Tensor(x, dtype=F64), Tensor(wt, dtype=F64), None if bias is None else Tensor(bias, dtype=F64)).data
        ref = naive_conv2d(x, wt, bias)
        worst = max(worst, float(np.abs(fast - ref).max() / max(np.abs(ref).max(), 1e-300)))
    ok = worst <= 1e-5
    acceptance_log(2, "conv2d vs naive loop reference", ok, f"50 cases, worst rel err {worst:.2e}")
    assert ok


# --- criteria 3 and 4: EMCD algebra -------------------------------------------------

def test_criterion_3_emcd_degeneracy(acceptance_log):
    rng = np.random.default_rng(3)
    x = rng.uniform(0, 1, (6, 1, GEOMETRY, GEOMETRY)).astype(np.float32)
    problems = []
    for kind in ("simple_cnn", "multi_headed_cnn", "fusenet"):
        spec = ModelSpec.default(kind, (1, GEOMETRY, GEOMETRY)).without_dropout()
        reference = build_model(spec, 11)
        det = predict_proba(reference, x, "deterministic")
        for e, t in ((1, 1), (1, 5), (3, 4)):
            members = [build_model(spec, 11) for _ in range(e)]
            s = emcd_predict(members, x, EnsembleConfig(e, t, base_seed=5))
            if not np.all(s.class_std == 0.0):
                problems.append(f"{kind} E={e} T={t}: nonzero std")
            if not np.array_equal(s.class_mean, det.astype(np.float64)):
                problems.append(f"{kind} E={e} T={t}: mean differs from deterministic")
            if not np.array_equal(s.predicted_class, det.argmax(1)):
                problems.append(f"{kind} E={e} T={t}: class differs")
    acceptance_log(3, "EMCD collapses to deterministic with zero dropout", not problems, "; ".join(problems) or "3 kinds x 3 (E, T)")
    assert not problems


def test_criterion_4_emcd_mean_identity(acceptance_log):
    rng = np.random.default_rng(4)
    x = rng.uniform(0, 1, (5, 1, GEOMETRY, GEOMETRY)).astype(np.float32)
    spec = ModelSpec.default("fusenet", (1, GEOMETRY, GEOMETRY))
    e, t = 3, 4
    members = [build_model(spec, s) for s in range(e)]
    s = emcd_predict(members, x, EnsembleConfig(e, t, base_seed=9))
    passes = s.passes
    flat = passes.mean(axis=0)
    nested = passes.reshape(e, t, *passes.shape[1:]).mean(axis=1).mean(axis=0)
    err_stored = float(np.abs(s.class_mean - flat).max())
    err_nested = float(np.abs(s.class_mean - nested).max())
    err_std = float(np.abs(s.class_std - passes.std(axis=0)).max())
    spread = float(s.class_std.max())
    ok = err_stored <= 1e-6 and err_nested <= 1e-9 and err_std <= 1e-9 and spread > 0
    acceptance_log(
        4, "EMCD mean equals pass average; ExT equals flat N", ok,
        f"|mean-avg| {err_stored:.1e}, |mean-nested| {err_nested:.1e}, |std-flat| {err_std:.1e}, max std {spread:.3f}",
    )
    assert ok


# --- criterion 5: surrogate training -------------------------------------------------

def test_criterion_5_surrogate_training(trained, acceptance_log):
    accs = {}
    for kind in ("simple_cnn", "multi_headed_cnn", "fusenet"):
        accs[kind] = trained.accuracy(trained.get(kind, 0))
    total = sum(trained.seconds[(k, 0)] for k in accs)
    epochs = max(len(trained.models[(k, 0)][1].rows) for k in accs)
    ok = all(a >= 0.95 for a in accs.values()) and total < 600 and epochs <= 20 and accs["fusenet"] >= accs["simple_cnn"]
    detail = ", ".join(f"{k} {100 * a:.3f}%" for k, a in accs.items()) + f"; {total:.0f}s total, <= {epochs} epochs"
    acceptance_log(5, "all architectures >= 95% and fusenet >= simple CNN", ok, detail)
    assert all(a >= 0.95 for a in accs.values()), accs
    assert total < 600 and epochs <= 20
    assert accs["fusenet"] >= accs["simple_cnn"], accs


# --- criterion 6: noise sweep --------------------------------------------------------

def _sweep(trained, model):
    return [
        trained.accuracy(model, add_gaussian_noise(trained.test.x, NoiseSpec(std), seed=1))
        for std in NOISE_GRID
    ]


def test_criterion_6_noise_sweep(trained, acceptance_log):
    monotone_ok, wins, lines = True, 0, []
    for kind in ("simple_cnn", "multi_headed_cnn", "fusenet"):
        model = trained.get(kind, 0)
        accs = _sweep(trained, model)
        monotone_ok &= accs[-1] <= accs[0]
        lines.append(f"{kind}[s0] " + "/".join(f"{a:.3f}" for a in accs))
    drops = []
    for seed in SEEDS:
        d = {}
        for kind in ("simple_cnn", "fusenet"):
            model = trained.get(kind, seed)
            accs = _sweep(trained, model)
            monotone_ok &= accs[-1] <= accs[0]
            d[kind] = trained.accuracy(model) - accs[-1]
        wins += d["fusenet"] <= d["simple_cnn"]
        drops.append(f"seed {seed}: fusenet {d['fusenet']:.3f} vs simple {d['simple_cnn']:.3f}")
    ok = monotone_ok and wins >= 2
    acceptance_log(6, "noise sweep: acc(0.6) <= acc(1e-4); fusenet drop <= simple in >= 2/3 seeds", ok, "; ".join(drops))
    for line in lines:
        print("   ", line)
    assert monotone_ok
    assert wins >= 2, drops


# --- criterion 7: OOD separation -------------------------------------------------------

def test_criterion_7_ood_separation(trained, acceptance_log):
    model = trained.get("fusenet", 0)
    cfg = EnsembleConfig(num_models=1, passes_per_model=50, base_seed=0)
    h_in = float(emcd_predict([model], trained.test.x[:100], cfg, keep_passes=False).entropy.mean())
    h_noise = float(emcd_predict([model], synthesize_noise_images(100, 0, GEOMETRY), cfg, keep_passes=False).entropy.mean())
    h_digits = float(emcd_predict([model], synthesize_digits(100, 0, GEOMETRY), cfg, keep_passes=False).entropy.mean())
    ok = h_noise >= h_in + 0.1
    acceptance_log(
        7, "OOD (noise images) entropy >= in-distribution + 0.1 nat, N=50", ok,
        f"in {h_in:.3f}, noise {h_noise:.3f}, digits {h_digits:.3f} (digits reported, not gated)",
    )
    assert ok


# --- criterion 8: metrics oracles ------------------------------------------------------

def test_criterion_8_metrics_oracles(acceptance_log):
    problems = []
    confusion = [[8, 2], [3, 7]]
    report = report_from_confusion(confusion)
    hand = hand_weighted_metrics(confusion)
    hand_f = 2 * hand["precision"] * hand["recall"] / (hand["precision"] + hand["recall"])
    expected = {
        "precision": 100 * hand["precision"], "recall": 100 * hand["recall"], "accuracy": 100 * hand["accuracy"],
        "f_measure": 100 * hand_f, "weighted_f1": 100 * hand["weighted_f1"],
    }
    for key, value in expected.items():
        if f"{getattr(report, key):.3f}" != f"{float(value):.3f}":
            problems.append(f"{key} {getattr(report, key):.3f} != {float(value):.3f}")
    if (f"{report.precision:.3f}", f"{report.recall:.3f}", f"{report.accuracy:.3f}") != ("75.253", "75.000", "75.000"):
        problems.append("fixed-matrix values")

    rng = np.random.default_rng(8)
    for _ in range(100):
        k = int(rng.integers(2, 6))
        c = rng.integers(0, 20, (k, k))
        c[rng.integers(k), rng.integers(k)] += 1
        r = report_from_confusion(c)
        if r.recall != r.accuracy:
            problems.append(f"recall {r.recall!r} != accuracy {r.accuracy!r}")
            break

    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(4, 16))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        s = np.round(rng.uniform(0, 1, n), 1)  # coarse grid forces ties
        scores = np.stack([1 - s, s], axis=1)
        auc = roc_auc(scores, y)[1][1]
        ref = concordance_auc(s[y == 1], s[y == 0])
        worst = max(worst, abs(auc - float(ref)))
    if worst > 1e-9:
        problems.append(f"AUC error {worst:.2e}")
    acceptance_log(8, "metrics match hand counts, recall == accuracy, AUC == concordance", not problems,
                   "; ".join(problems) or f"P {report.precision:.3f} R {report.recall:.3f} F {report.f_measure:.3f} wF1 {report.weighted_f1:.3f}; AUC err {worst:.1e}")
    assert not problems


# --- criterion 9: determinism and persistence -------------------------------------------

def _run_cli(tmp, tag, config):
    out = tmp / tag
    cfg_path = tmp / "config.json"
    cfg_path.write_text(json.dumps(config))
    codes = [cli_main(["train", "--config", str(cfg_path), "--synthetic", "--out", str(out)])]
    ckpts = sorted(str(p) for p in (out / "checkpoints").glob("*.ufnc"))
    for cmd in (["eval"], ["eval", "--emcd", "3"], ["noise-sweep", "--grid", "0,0.2"], ["ood", "--ood-set", "noise", "--emcd", "3"]):
        codes.append(cli_main([cmd[0], "--config", str(cfg_path), "--synthetic", "--out", str(out), "--checkpoints", *ckpts, *cmd[1:]]))
    artifacts = {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file() and p.name != "run.log"}
    return codes, artifacts


def test_criterion_9_determinism_and_persistence(tmp_path, acceptance_log):
    problems = []
    config = {
        "model": {"kind": "fusenet", "input_size": 32},
        "train": {"epochs": 1, "seed": 3},
        "ensemble": {"num_models": 2, "passes_per_model": 2},
        "data": {"n_per_class": 12, "ood_count": 6},
    }
    codes_a, art_a = _run_cli(tmp_path, "a", config)
    codes_b, art_b = _run_cli(tmp_path, "b", config)
    if any(codes_a + codes_b):
        problems.append(f"exit codes {codes_a} {codes_b}")
    if set(art_a) != set(art_b) or any(art_a[k] != art_b[k] for k in art_a):
        problems.append("rerun artifacts differ")
    if not any(k.endswith(".ufnc") for k in art_a):
        problems.append("no checkpoints written")

    spec = ModelSpec.default("fusenet", (1, GEOMETRY, GEOMETRY))
    model = build_model(spec, 21)
    x = np.random.default_rng(9).uniform(0, 1, (4, 1, GEOMETRY, GEOMETRY)).astype(np.float32)
    blob = dumps(model, seed=21)
    restored, meta = loads(blob)
    if not np.array_equal(predict_proba(model, x), predict_proba(restored, x)) or meta.seed != 21:
        problems.append("round trip not bit-identical")

    corruptions = {
        "bad magic": b"X" + blob[1:],
        "version mismatch": blob[:4] + (999).to_bytes(2, "little") + blob[6:],
        "truncated": blob[:-7],
        "trailing bytes": blob + b"\0",
    }
    named = {}
    for expect, raw in corruptions.items():
        try:
            loads(raw)
            named[expect] = "accepted"
        except CheckpointError as exc:
            named[expect] = str(exc)
        if expect.split()[0] not in named[expect]:
            problems.append(f"{expect}: {named[expect]}")
    acceptance_log(9, "byte-identical reruns, bit-exact round trip, named load errors", not problems,
                   "; ".join(problems) or f"{len(art_a)} artifacts identical across reruns")
    assert not problems
