"""Acceptance criteria; each test prints one PASS/FAIL line.

Criteria 5 to 8 need the MCMP benchmark CSV, located through the
``KOOPVM_MCMP_CSV`` environment variable. They fail when it is absent.
"""

import json
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from koopvm import numcore as nc
from koopvm.analysis import binned_mae, export_koopman, sensitivity
from koopvm.cli import main
from koopvm.data import (
    MCMP_EXPECTED_Q,
    StageFrame,
    SyntheticConfig,
    clean_labels,
    generate_synthetic,
    load_dataset,
    mcmp_schema,
)
from koopvm.koopman import build_koopman, propagate_deterministic, propagate_gaussian, propagate_log_gaussian
from koopvm.model import LossWeights, build_model, loss_kld, loss_total
from koopvm.nn import MLP
from koopvm.train import TrainConfig, load_config, prepare, train_ann_baseline, train_model

ROOT = Path(__file__).resolve().parents[1]
MCMP_ENV = "KOOPVM_MCMP_CSV"


def verdict(capsys, number: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
    assert ok, detail


# --------------------------------------------------------------------------
# 1-3: numerical oracles
# --------------------------------------------------------------------------

def test_criterion_01_gradient_oracle(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    model = build_model("sdk", [4, 4], [2, 2], d_h=6, rng=rng)
    # off the ReLU kinks so central differences are meaningful
    for p in model.parameters():
        p.data[...] = rng.normal(scale=0.5, size=p.shape)
    xs = [rng.normal(size=(8, 4)), rng.normal(size=(8, 4))]
    ys = [rng.normal(size=(8, 2)), rng.normal(size=(8, 2))]
    eps = model.forward(xs, mode="train", rng=rng).eps

    def f():
        return loss_total(model.forward(xs, mode="train", eps=eps), ys, None, LossWeights())[0]

    params = model.parameters()
    per_param = [nc.finite_diff_check(f, [p], h=1e-5) for p in params]
    seconds = time.perf_counter() - start
    n_total = sum(p.data.size for p in params)
    n_ok = sum(p.data.size for p, e in zip(params, per_param) if e <= 1e-4)
    verdict(capsys, 1, n_ok == n_total and seconds < 10,
            f"{n_ok}/{n_total} scalar parameters within 1e-4 (max {max(per_param):.2e}), {seconds:.1f}s")


def test_criterion_02_closed_forms(capsys):
    e = np.e
    errors = []
    g = propagate_gaussian([[0.3, -1.2]], [[0.5, 2.0]], [0.0, 0.0], [0.0, 0.0], [[4.0, 1.0]], [[2.0, 3.0]])
    errors += [np.abs(g.mu.data - [[0.3, -1.2]]).max(), np.abs(g.sigma.data - [[0.5, 2.0]]).max()]
    g = propagate_gaussian([[1.0, -0.5]], [[1.0, e]], [0.5, 2.0], [1.0, 1.0], [[2.0, 1.0]], [[e, 1.0]])
    errors += [np.abs(g.mu.data - [[2.0, 1.5]]).max(), np.abs(g.sigma.data - [[e, e]]).max()]
    errors.append(abs(loss_kld([[1.0]], [[1.0]]).item() - 0.5))
    errors.append(abs(loss_kld([[0.0]], [[np.sqrt(e)]]).item() - 0.5 * (e - 2)))
    kld0 = abs(loss_kld([[0.0]], [[1.0]]).item())
    worst = max(errors)
    verdict(capsys, 2, worst <= 1e-12 and kld0 <= 1e-15, f"max closed-form error {worst:.1e}, KLD(N(0,1)||N(0,1)) = {kld0:.1e}")


def test_criterion_03_structural_invariants(capsys):
    rng = np.random.default_rng(3)
    trials = 10_000
    off_diag = sigma_bad = 0
    affine_err = 0.0
    for _ in range(trials):
        d = int(rng.integers(1, 9))
        lam = rng.normal(scale=3.0, size=d)
        K = build_koopman(lam)
        off_diag += int(np.count_nonzero(K - np.diag(np.diag(K))))

        g = propagate_log_gaussian(nc.Tensor(rng.normal(size=(1, d))), nc.Tensor(rng.normal(scale=8, size=(1, d))),
                                   nc.Tensor(rng.normal(scale=4, size=d)), nc.Tensor(rng.normal(scale=4, size=d)),
                                   nc.Tensor(rng.normal(size=(1, d))), nc.Tensor(rng.normal(scale=8, size=(1, d))))
        sigma_bad += int(np.sum(~(g.sigma.data > 0)))

        a, b = rng.normal(size=(2, 1, d)), rng.normal(size=(2, 1, d))
        w = rng.uniform()
        mixed = propagate_deterministic(w * a[0] + (1 - w) * b[0], w * a[1] + (1 - w) * b[1], eigenvalues=lam).data
        split = w * propagate_deterministic(a[0], a[1], eigenvalues=lam).data + (1 - w) * propagate_deterministic(b[0], b[1], eigenvalues=lam).data
        affine_err = max(affine_err, float(np.abs(mixed - split).max() / max(1.0, np.abs(split).max())))

    # causality: 10,000 perturbed rows across 100 random models
    causal_bad = 0
    for i in range(100):
        model = build_model(["s-aek", "e-aek", "sdk"][i % 3], [3, 2], [2, 2], d_h=4, rng=rng)
        x1 = rng.normal(size=(100, 3))
        base = model.predict([x1, rng.normal(size=(100, 2))])[0]
        moved = model.predict([x1, rng.normal(scale=100.0, size=(100, 2))])[0]
        causal_bad += int(np.sum(np.any(base != moved, axis=1)))

    ok = off_diag == 0 and sigma_bad == 0 and affine_err <= 1e-12 and causal_bad == 0
    verdict(capsys, 3, ok, f"{trials} trials: off-diagonal nonzeros {off_diag}, non-positive sigma {sigma_bad}, "
                           f"affinity error {affine_err:.1e}, causality violations {causal_bad}")


# --------------------------------------------------------------------------
# 4: synthetic propagation oracle
# --------------------------------------------------------------------------

SYNTH_TRAIN = TrainConfig(variant="sdk", latent_dim=16, recon_epochs=20, predict_epochs=30,
                          finetune_epochs=300, patience=20)


def _sdk_vs_local(coupling: float) -> tuple[float, float]:
    ds = generate_synthetic(SyntheticConfig(n_samples=5000, coupling=coupling, noise=0.2, seed=0))
    data = prepare(ds.frames, SYNTH_TRAIN)
    sdk = train_model(ds.frames, SYNTH_TRAIN, data).test_report.stage_mse[1]
    local = train_ann_baseline(data, SYNTH_TRAIN, inputs="local").test_report.stage_mse[1]
    return sdk, local


def test_criterion_04_synthetic_propagation(capsys):
    start = time.perf_counter()
    sdk_strong, local_strong = _sdk_vs_local(1.0)
    sdk_zero, local_zero = _sdk_vs_local(0.0)
    seconds = time.perf_counter() - start
    gain = 1.0 - sdk_strong / local_strong
    gap = abs(sdk_zero - local_zero) / local_zero
    ok = gain >= 0.2 and gap < 0.1 and seconds < 300
    verdict(capsys, 4, ok, f"coupled: SDK {sdk_strong:.4f} vs local {local_strong:.4f} ({gain:.0%} lower); "
                           f"uncoupled: {sdk_zero:.4f} vs {local_zero:.4f} ({gap:.1%} apart); {seconds:.0f}s")


# --------------------------------------------------------------------------
# 5-8: MCMP benchmark
# --------------------------------------------------------------------------

def _mcmp_path() -> Path | None:
    value = os.environ.get(MCMP_ENV)
    return Path(value) if value and Path(value).is_file() else None


def _require_mcmp(capsys, number: int) -> Path:
    path = _mcmp_path()
    if path is None:
        verdict(capsys, number, False, f"MCMP CSV not available (set {MCMP_ENV} to the benchmark file)")
    return path


@pytest.fixture(scope="module")
def mcmp_runs():
    """All three Koopman variants x 10 seeds under the desk-scale config, trained once."""
    path = _mcmp_path()
    if path is None:
        return None
    frames, report = clean_labels(load_dataset(path, mcmp_schema()), expected_q=MCMP_EXPECTED_Q)
    base = load_config(ROOT / "configs" / "desk.toml")
    data = prepare(frames, base)
    start = time.perf_counter()
    runs = {v: [train_model(frames, replace(base, variant=v, seed=s), data) for s in range(10)]
            for v in ("s-aek", "e-aek", "sdk")}
    return {"runs": runs, "data": data, "report": report, "seconds": time.perf_counter() - start}


def test_criterion_05_mcmp_cleaning(capsys):
    path = _require_mcmp(capsys, 5)
    raw = load_dataset(path, mcmp_schema())
    frames, report = clean_labels(raw, expected_q=MCMP_EXPECTED_Q)
    if report.q == list(MCMP_EXPECTED_Q):
        verdict(capsys, 5, True, f"q = {report.q}")
        return
    # a different hosted version: check the documented deviation and the rules themselves
    violations = []
    for f_raw, f, s in zip(raw, frames, report.stages):
        for j, name in enumerate(f_raw.label_names):
            zero_share = np.mean(f_raw.Y[:, j] == 0.0)
            if (name in s.dropped) != (zero_share > 0.2):
                violations.append(f"{name}: zero share {zero_share:.3f}")
        for j, name in enumerate(f.label_names):
            col = f.Y[:, j]
            fin = np.isfinite(col)
            far = fin & (np.abs(col - np.median(col[fin])) > 3.5 * np.std(col[fin], ddof=1))
            if np.any(f.mask[:, j] & far):
                violations.append(f"{name}: outlier kept")
    documented = any("differ from expected" in n for n in report.notes)
    verdict(capsys, 5, documented and not violations,
            f"q = {report.q} (expected {list(MCMP_EXPECTED_Q)}), deviation documented: {documented}, rule violations: {violations}")


def test_criterion_06_mcmp_benchmark(capsys, mcmp_runs):
    _require_mcmp(capsys, 6)
    runs = mcmp_runs["runs"]
    mean = {v: float(np.mean([r.test_report.total_mse for r in rs])) for v, rs in runs.items()}
    sdk_s1 = float(np.mean([r.test_report.stage_mse[0] for r in runs["sdk"]]))
    sdk_s2 = float(np.mean([r.test_report.stage_mse[1] for r in runs["sdk"]]))
    ordering = mean["sdk"] < mean["e-aek"] < mean["s-aek"]
    band = 0.015 <= mean["sdk"] <= 0.033
    harder = sdk_s2 > sdk_s1
    minutes = mcmp_runs["seconds"] / 60
    verdict(capsys, 6, ordering and band and harder and minutes < 45,
            f"total MSE S-AEK {mean['s-aek']:.4f}, E-AEK {mean['e-aek']:.4f}, SDK {mean['sdk']:.4f}; "
            f"SDK stage I {sdk_s1:.4f} / II {sdk_s2:.4f}; {minutes:.1f} min")


def test_criterion_07_binned_mae(capsys, mcmp_runs):
    _require_mcmp(capsys, 7)
    runs, test = mcmp_runs["runs"], mcmp_runs["data"].test
    wins = 0
    for seed in range(10):
        tables = {v: {round(r.center, 6): r.mae_mean for r in binned_mae(runs[v][seed].model, test)} for v in runs}
        centers = set(tables["sdk"]) & set(tables["e-aek"]) & set(tables["s-aek"])
        window = [c for c in centers if 35.6 - 1e-9 <= c <= 36.2 + 1e-9]
        e_vs_s = bool(window) and np.mean([tables["e-aek"][c] for c in window]) <= np.mean([tables["s-aek"][c] for c in window])
        sdk_best = bool(centers) and all(tables["sdk"][c] <= min(tables["e-aek"][c], tables["s-aek"][c]) for c in centers)
        wins += int(e_vs_s and sdk_best)
    verdict(capsys, 7, wins >= 7, f"ordering holds in {wins}/10 seeds")


def test_criterion_08_koopman_sparsity(capsys, mcmp_runs):
    _require_mcmp(capsys, 8)
    run = mcmp_runs["runs"]["sdk"][0]
    counts = export_koopman(run.model, mcmp_runs["data"].test, tau=0.01).counts()
    d_h = run.model.d_h
    verdict(capsys, 8, all(0 < c < d_h for c in counts.values()), f"non-zero counts {counts} with d_h = {d_h}")


# --------------------------------------------------------------------------
# 9-10
# --------------------------------------------------------------------------

def test_criterion_09_determinism(capsys, tmp_path):
    assert main(["synth", "--out", str(tmp_path / "syn"), "--n", "600", "--seed", "0"]) == 0
    (tmp_path / "c.toml").write_text("[train]\nlatent_dim = 8\nrecon_epochs = 3\npredict_epochs = 3\nfinetune_epochs = 5\n")
    reports = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = main(["train", "--seed", "0", "--data", str(tmp_path / "syn" / "data.csv"),
                     "--schema", str(tmp_path / "syn" / "schema.toml"), "--config", str(tmp_path / "c.toml"),
                     "--out", str(out)])
        assert code == 0
        reports.append((out / "eval_report.json").read_bytes())
    metrics = json.loads(reports[0])["test"]["total_mse"]
    verdict(capsys, 9, reports[0] == reports[1], f"eval reports byte-identical: {reports[0] == reports[1]} (test MSE {metrics!r})")


def test_criterion_10_sensitivity_of_linear_model(capsys):
    rng = np.random.default_rng(10)
    W = rng.normal(size=(3, 5))
    net = MLP([5, 3])
    net.layers[0].weight.data[:] = W
    net.layers[0].bias.data[:] = rng.normal(size=3)
    frame = StageFrame(rng.normal(size=(40, 5)), np.zeros((40, 3)), np.ones((40, 3), bool), tuple("abcde"), tuple("xyz"))
    err = float(np.max(np.abs(sensitivity(net, [frame]).values - np.abs(W))))
    verdict(capsys, 10, err <= 1e-10, f"max |S - |W|| = {err:.1e}")
