"""Acceptance criteria, each run at its stated tolerance.

Every test prints one ``criterion N: PASS|FAIL ...`` line; the lines are also
gathered into a summary section at the end of the pytest run.
"""

import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from nucleonet.checkpoint import restore_cae
from nucleonet.cli import main
from nucleonet.data import CLASS_TITLES, load_images, load_manifest
from nucleonet.evaluation import auroc
from nucleonet.gradcheck import TOLERANCE, run_all
from nucleonet.losses import WeightMatrixSpec, combined_loss, wmse
from nucleonet.autodiff import Conv2D, MaxPool2
from nucleonet.models import ModelSpec, build_cnn
from nucleonet.training import ExperimentConfig, pretrain_cae, split_dataset
from test_evaluation import pairwise_auroc
from test_losses import loop_weight_matrix


def exact_loop_wmse(x, r, d, c, w):
    """Double loop over pixels with exactly rounded accumulation (math.fsum),
    so the oracle itself carries no summation error at the 1e-12 scale."""
    import math

    W = loop_weight_matrix(d, c, w)
    terms = []
    for img_x, img_r in zip(x, r):
        for ch in range(x.shape[1]):
            for i in range(d):
                for j in range(d):
                    terms.append(W[i, j] * (img_r[ch, i, j] - img_x[ch, i, j]) ** 2)
    return math.fsum(terms) / x.shape[0]


def record(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


@pytest.fixture(scope="module")
def synthetic_2000(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth2000")
    start = time.perf_counter()
    assert main(["gen-synth", "--seed", "0", "--count", "2000", "--out", str(root / "data")]) == 0
    assert main(["extract-features", "--manifest", str(root / "data/manifest.csv"), "--dim", "128",
                 "--out", str(root / "feats.nfv")]) == 0
    return root, time.perf_counter() - start


def test_criterion_1_gradients():
    start = time.perf_counter()
    results = run_all(seed=0)
    elapsed = time.perf_counter() - start
    worst_name, worst = max(results, key=lambda r: r[1])
    names = {n for n, _ in results}
    covered = {"loss.wmse", "loss.bce", "loss.ce", "loss.combined",
               "model.default", "model.w", "model.wf", "model.wfm"} <= names
    ok = covered and worst < TOLERANCE and elapsed < 120
    record(1, ok, f"{len(results)} checks, max rel err {worst:.2e} ({worst_name}), {elapsed:.0f}s")


def test_criterion_2_wmse_oracle():
    rng = np.random.default_rng(2)
    worst = worst_mse = 0.0
    for _ in range(1000):
        d = int(rng.integers(1, 17))
        c = int(rng.choice([k for k in range(1, d + 1) if (d - k) % 2 == 0]))
        w = float(rng.uniform(1, 10))
        n, ch = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        x, r = rng.random((n, ch, d, d)), rng.random((n, ch, d, d))
        loss, _ = wmse(x, r, WeightMatrixSpec(d, c, w))
        worst = max(worst, abs(loss - exact_loop_wmse(x, r, d, c, w)))
        plain, _ = wmse(x, r, WeightMatrixSpec(d, c, 1.0))
        worst_mse = max(worst_mse, abs(plain - math.fsum(((r - x) ** 2).ravel()) / n))
    record(2, worst <= 1e-12 and worst_mse <= 1e-12,
           f"max |wmse - loop| {worst:.1e}, max |w=1 - mse| {worst_mse:.1e}")


def test_criterion_3_combined_endpoints():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(200):
        l_ml, l_sl = rng.uniform(0, 10, 2)
        for m, expected in ((0.0, l_sl), (0.6, 0.6 * l_ml + 0.4 * l_sl), (1.0, l_ml)):
            worst = max(worst, abs(combined_loss(l_ml, l_sl, m).total - expected))
    record(3, worst <= 1e-12, f"max endpoint deviation {worst:.1e}")


def test_criterion_4_auroc_oracle():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(500):
        n = int(rng.integers(2, 61))
        levels = int(rng.integers(1, max(2, n // 2) + 1))
        scores = rng.integers(0, levels, n) / levels
        if rng.random() < 0.5:
            scores = np.where(rng.random(n) < 0.5, scores, rng.random(n))
        truths = rng.integers(0, 2, n)
        truths[rng.choice(n, 2, replace=False)] = [0, 1]
        worst = max(worst, abs(auroc(scores, truths) - pairwise_auroc(scores, truths)))
    example = auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    record(4, worst <= 1e-12 and example == 0.75, f"max |trapezoid - pairwise| {worst:.1e}, example {example}")


def test_criterion_5_architecture_trace():
    expected = [
        ("conv1", (80, 30, 30)), ("conv2", (80, 28, 28)), ("conv3", (120, 26, 26)), ("pool1", (120, 13, 13)),
        ("conv4", (100, 11, 11)), ("conv5", (140, 9, 9)), ("conv6", (140, 7, 7)), ("pool2", (140, 3, 3)),
    ]
    spec = ModelSpec(variant="default", n_attr=19, n_shape=0, shared_labels=0).validate()
    net = build_cnn(spec, rng=0)
    acts = net.trunk.forward_trace(np.zeros((1, 3, 32, 32)))
    conv = [(l.name, a.shape[1:]) for l, a in acts if isinstance(l, (Conv2D, MaxPool2))]
    dense = [a.shape[1] for l, a in acts if l.name in ("fc1", "fc2")]
    out = net.forward(np.zeros((1, 3, 32, 32)), np.zeros((1, 19)))["flat"]
    ok = (conv == expected and dense == [400, 100] and spec.feedback_dim == 19
          and spec.concat_width == 119 and out.shape == (1, 19))
    record(5, ok, f"trace {conv[0][1]}..{conv[-1][1]}, fc {dense}, concat {spec.concat_width}")


def _cli(args, env_threads="0"):
    env = {**os.environ, "NUCLEONET_THREADS": env_threads}
    return subprocess.run([sys.executable, "-m", "nucleonet", *args], env=env, capture_output=True, text=True)


def test_criterion_6_determinism(tmp_path):
    assert _cli(["gen-synth", "--seed", "6", "--count", "60", "--out", str(tmp_path / "data")]).returncode == 0
    assert _cli(["extract-features", "--manifest", str(tmp_path / "data/manifest.csv"), "--dim", "32",
                 "--out", str(tmp_path / "f.nfv")]).returncode == 0
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"rounds": 2, "cae_epochs": 2, "cycle_epochs": 2, "filter_divisor": 10,
                               "feature_dim": 32, "split_fraction": 0.3,
                               "manifest": str(tmp_path / "data/manifest.csv"), "features": str(tmp_path / "f.nfv")}))
    for run in ("a", "b"):
        proc = _cli(["train", "--variant", "wfm", "--config", str(cfg), "--out", str(tmp_path / run)])
        assert proc.returncode == 0, proc.stderr
    def artifacts(run):
        # the resolved config records the run's own --out path, so it is compared separately
        return sorted(p.relative_to(run) for p in run.rglob("*") if p.is_file() and p.name != "resolved_config.json")

    files, other = artifacts(tmp_path / "a"), artifacts(tmp_path / "b")
    differing = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    n_ckpt = sum(f.suffix == ".ckpt" for f in files)
    configs = [json.loads((tmp_path / run / "resolved_config.json").read_text()) for run in ("a", "b")]
    for c in configs:
        c.pop("out")
    ok = (files == other and not differing and n_ckpt == 4 and Path("report.csv") in files
          and Path("report.json") in files and configs[0] == configs[1])
    record(6, ok, f"{len(files)} files ({n_ckpt} checkpoints) compared, {len(differing)} differ {differing[:3]}")


def test_criterion_7_synthetic_learning(synthetic_2000):
    root, gen_seconds = synthetic_2000
    cfg = root / "c7.json"
    cfg.write_text(json.dumps({"rounds": 1, "cae_epochs": 30, "cycle_epochs": 30, "filter_divisor": 4,
                               "split_fraction": 0.2, "lr": {"wfm": 5e-4}, "feature_dim": 128}))
    start = time.perf_counter()
    code = main(["train", "--variant", "wfm", "--config", str(cfg), "--manifest", str(root / "data/manifest.csv"),
                 "--features", str(root / "feats.nfv"), "--out", str(root / "run7")])
    elapsed = time.perf_counter() - start + gen_seconds
    assert code == 0
    rep = json.loads((root / "run7/eval_wfm.json").read_text())[0]
    n_test = len(split_dataset(2000, 0, 0.2)[1])
    attrs = [rep["per_class"][t] for t in CLASS_TITLES[:10] if rep["per_class"][t] is not None]
    attr_mean, shape_mean = float(np.mean(attrs)), rep["mean_shape_auroc"]
    ok = n_test == 400 and shape_mean >= 0.90 and attr_mean >= 0.85 and elapsed < 1800
    record(7, ok, f"shape AuROC {shape_mean:.4f} (>= 0.90), attribute AuROC {attr_mean:.4f} (>= 0.85), "
                  f"{n_test} held out, {elapsed / 60:.1f} min")


def test_criterion_8_center_weighting(synthetic_2000):
    root, _ = synthetic_2000
    manifest = load_manifest(root / "data/manifest.csv")
    images = load_images(manifest)
    train_idx, test_idx = split_dataset(len(manifest), 0, 0.2)
    train = images[train_idx[:800]]
    held_out = images[test_idx].astype(np.float64)
    cfg = ExperimentConfig(cae_epochs=12, filter_divisor=4).validate()
    spec = cfg.model_spec("w")
    errors = {}
    for w in (5.0, 1.0):
        ckpt, _ = pretrain_cae(train, spec, cfg, WeightMatrixSpec(32, 20, w))
        cae = restore_cae(ckpt, dtype=np.float64)
        recon = np.concatenate([cae.forward(held_out[i:i + 100]) for i in range(0, len(held_out), 100)])
        win = WeightMatrixSpec(32, 20).window
        errors[w] = float(np.mean((recon - held_out)[..., win, win] ** 2))
    record(8, errors[5.0] <= errors[1.0],
           f"center-window MSE w=5 {errors[5.0]:.5f} <= w=1 {errors[1.0]:.5f}")


def test_criterion_9_combo_columns(tmp_path):
    assert main(["gen-synth", "--seed", "9", "--count", "150", "--out", str(tmp_path / "data")]) == 0
    assert main(["extract-features", "--manifest", str(tmp_path / "data/manifest.csv"), "--dim", "32",
                 "--out", str(tmp_path / "f.nfv")]) == 0
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"rounds": 2, "cae_epochs": 1, "cycle_epochs": 2, "filter_divisor": 10,
                               "feature_dim": 32, "split_fraction": 0.4,
                               "manifest": str(tmp_path / "data/manifest.csv"), "features": str(tmp_path / "f.nfv")}))
    run = tmp_path / "run"
    assert main(["train", "--variant", "combo", "--config", str(cfg), "--out", str(run)]) == 0
    # re-evaluate each variant separately from the saved checkpoints on the same splits
    evals = {}
    for v in ("wf", "wfm", "combo"):
        assert main(["eval", "--variant", v, "--config", str(cfg), "--run", str(run),
                     "--out", str(tmp_path / f"ev_{v}")]) == 0
        evals[v] = json.loads((tmp_path / f"ev_{v}" / f"eval_{v}.json").read_text())
    attrs, shapes = CLASS_TITLES[:10], CLASS_TITLES[10:]
    compared, ok = 0, True
    for r in range(2):
        combo, wf, wfm = (evals[v][r]["per_class"] for v in ("combo", "wf", "wfm"))
        ok &= all(combo[t] == wf[t] for t in attrs) and all(combo[t] == wfm[t] for t in shapes)
        ok &= evals["combo"][r]["shape_error"] == evals["wfm"][r]["shape_error"]
        ok &= evals["combo"][r]["attr_error"] == evals["wf"][r]["attr_error"]
        compared += sum(combo[t] is not None for t in CLASS_TITLES)
    record(9, ok and compared > 0, f"{compared} defined class columns over 2 rounds match their source model")
