"""The eight acceptance criteria, one test each.

Every test prints a single ``CRITERION n PASS|FAIL`` line; the lines are also
repeated in the terminal summary (see conftest.py).
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from flattenet.checks import bijection_rows, equivalence_check, run_gradcheck
from flattenet.complexity import analyze, baseline_conv_descriptor, describe
from flattenet.head import FlatteningModule, load_config, shipped_configs
from flattenet.lab.backbone import ToyBackboneSpec
from flattenet.lab.optim import Adam
from flattenet.lab.tasks import SyntheticTask
from flattenet.lab.train import TrainConfig, train
from flattenet.layers import BatchNorm, ConvSpec
from flattenet.model import FlatteNet
from flattenet.shuffle import connectivity_check, connectivity_matrix


def _millions(n):
    return n / 1e6


# 1 ---------------------------------------------------------------------------

def _instantiated_head(name):
    spec = load_config(name)
    head = FlatteningModule(spec, np.random.default_rng(0), np.float32)
    return sum(p.size for p in head.params())


def _instantiated_conv(c_in, c_out, k, bn):
    # np.empty does not touch the pages, so the 75M-element weight is cheap to allocate
    weight = np.empty(ConvSpec(c_in, c_out, k=k).weight_shape, dtype=np.float32)
    extra = sum(p.size for p in BatchNorm(c_out).params()) if bn else 0
    return weight.size + extra


def test_criterion_1_parameter_counts(criterion):
    cases = [
        ("table1 head", 0.23, _instantiated_head("table1"), describe("table1", predictor=False).params),
        ("expand=8 head", 0.71, _instantiated_head("table2_expand8"),
         describe("table2_expand8", predictor=False).params),
        ("regular 1x1 conv", 4.19, _instantiated_conv(2048, 2048, 1, True),
         analyze(baseline_conv_descriptor(2048, 2048, 1)).params),
        ("naive 3x3 conv", 75.50, _instantiated_conv(2048, 4096, 3, False),
         analyze(baseline_conv_descriptor(2048, 4096, 3, bn=False)).params),
        ("table7 head", 1.40, _instantiated_head("table7"), describe("table7", predictor=False).params),
    ]
    parts, ok = [], True
    for label, target, oracle, counted in cases:
        good = oracle == counted and abs(_millions(counted) - target) <= 0.01 + 1e-9
        ok &= good
        parts.append(f"{label} {_millions(counted):.4f}M (target {target:.2f})")
    criterion(1, ok, "; ".join(parts))


# 2 ---------------------------------------------------------------------------

def test_criterion_2_backbone_totals(criterion):
    rep = describe("table1", backbone="resnet50", input_hw=(256, 256))
    params, gmacs = _millions(rep.params), rep.macs / 1e9
    ok = abs(params - 23.77) <= 0.01 * 23.77 and abs(gmacs - 4.99) <= 0.10 * 4.99
    criterion(2, ok, f"resnet50+table1 {params:.3f}M params (23.77 +-1%), {gmacs:.3f} GMACs (4.99 +-10%)")


# 3 ---------------------------------------------------------------------------

def test_criterion_3_equivalence_all_configs(criterion):
    start = time.perf_counter()
    worst_loss = worst_grad = 0.0
    checked = []
    for name in shipped_configs():
        spec = load_config(name)
        for kind in ("mse", "ce") if spec.classes > 1 else ("mse",):
            dl, dg = equivalence_check(spec, seed=0, kind=kind)
            worst_loss, worst_grad = max(worst_loss, dl), max(worst_grad, dg)
            checked.append(f"{name}/{kind}")
    elapsed = time.perf_counter() - start
    ok = worst_loss <= 1e-12 and worst_grad <= 1e-10 and elapsed < 60
    criterion(3, ok, f"{len(checked)} config/loss pairs, max |dloss| {worst_loss:.2e}, "
                     f"max |dgrad| {worst_grad:.2e}, {elapsed:.1f}s")


# 4 ---------------------------------------------------------------------------

def test_criterion_4_bijections(criterion):
    rows = bijection_rows(seed=0)
    ok = all(r.status == "pass" for r in rows)
    criterion(4, ok, "; ".join(f"{r.name}: {r.status}" for r in rows))


# 5 ---------------------------------------------------------------------------

def test_criterion_5_gradients(criterion):
    start = time.perf_counter()
    rows = run_gradcheck(seed=0, eps=1e-5, tol=1e-4)
    worst = max(rows, key=lambda r: r.value)
    ops = {r.name.split("(")[0] for r in rows}
    ok = all(r.status == "pass" for r in rows) and time.perf_counter() - start < 120
    criterion(5, ok, f"{len(ops)} ops, {len(rows)} shapes, worst {worst.name} rel err {worst.value:.2e}")


# 6 ---------------------------------------------------------------------------

def test_criterion_6_density(criterion):
    parts, ok = [], True
    for name in ("table1", "table7"):
        for i, layer in enumerate(load_config(name).layers):
            dense = bool(connectivity_matrix(layer.g1, layer.g2, layer.g3, layer.c_in).all())
            ok &= dense and connectivity_check(layer.g1, layer.g2, layer.g3, layer.c_in)
            parts.append(f"{name}[{i}] {'dense' if dense else 'NOT dense'}")
    mutated = replace(load_config("table1").layers[0], g2=1)
    caught = not connectivity_check(mutated.g1, mutated.g2, mutated.g3, mutated.c_in)
    caught &= not connectivity_matrix(mutated.g1, mutated.g2, mutated.g3, mutated.c_in).all()
    parts.append(f"g2=1 mutation {'detected' if caught else 'MISSED'}")
    criterion(6, ok and caught, "; ".join(parts))


# 7 and 8 ---------------------------------------------------------------------

MAIN_STEPS = 200


def _main_run(directory):
    """Keypoint task at 64x64: default toy backbone, toy_keypoints head, 200 fresh-batch steps."""
    spec = load_config("toy_keypoints")
    model = FlatteNet.build(spec, ToyBackboneSpec(c_out=spec.c_in), seed=1, dtype=np.float32,
                            predictor_init_std=1e-3)
    task = SyntheticTask("keypoints", image_size=64, num=spec.classes, sigma=1.0, seed=0)
    cfg = TrainConfig(epochs=5, steps_per_epoch=MAIN_STEPS // 5, batch_size=8, eval_size=32)
    directory.mkdir(parents=True, exist_ok=True)
    history = train(model, task, Adam(model.params(), lr=1e-3), cfg,
                    history_path=directory / "history.jsonl", checkpoint_dir=directory / "ckpt")
    return history


@pytest.fixture(scope="module")
def main_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    start = time.perf_counter()
    first = _main_run(root / "run1")
    elapsed = time.perf_counter() - start
    _main_run(root / "run2")
    return root, first, elapsed


def _depth_run(name):
    """128x128 input, five-stage narrow backbone (4x4 features), fixed 64-image pool, 200 steps."""
    spec = load_config(name)
    bb = ToyBackboneSpec(widths=(16, 32, 64, 128, 256), c_out=spec.c_in)
    model = FlatteNet.build(spec, bb, seed=1, dtype=np.float32, predictor_init_std=1e-3)
    task = SyntheticTask("keypoints", image_size=128, num=spec.classes, sigma=1.0, seed=0)
    cfg = TrainConfig(epochs=25, batch_size=8, train_size=64, eval_size=32)
    return train(model, task, Adam(model.params(), lr=1e-3), cfg)


@pytest.mark.slow
def test_criterion_7_trainability(main_runs, criterion):
    start = time.perf_counter()
    _, history, main_time = main_runs
    ratio = history[-1]["eval_loss"] / history[0]["eval_loss"]
    pck = history[-1]["metric"] / 100
    ok = history[-1]["step"] == MAIN_STEPS and ratio < 0.25 and pck > 0.9
    parts = [f"64px: {history[-1]['step']} steps, eval MSE x{ratio:.3f} (<0.25), PCKh@0.5 {pck:.3f} (>0.9)"]
    for depth, name in ((5, "toy_sub5"), (6, "toy_sub6"), (7, "toy_sub7")):
        h = _depth_run(name)
        r = h[-1]["loss"] / h[0]["loss"]
        ok &= h[-1]["step"] == MAIN_STEPS and r < 0.5
        parts.append(f"depth {depth}: train loss x{r:.3f} (<0.5)")
    total = main_time + time.perf_counter() - start
    ok &= total < 300
    parts.append(f"{total:.0f}s")
    criterion(7, ok, "; ".join(parts))


@pytest.mark.slow
def test_criterion_8_determinism(main_runs, criterion):
    root = main_runs[0]
    a, b = root / "run1", root / "run2"
    same_history = (a / "history.jsonl").read_bytes() == (b / "history.jsonl").read_bytes()
    files = sorted(p.relative_to(a / "ckpt") for p in (a / "ckpt").iterdir())
    other = sorted(p.relative_to(b / "ckpt") for p in (b / "ckpt").iterdir())
    same_ckpt = files == other and all((a / "ckpt" / f).read_bytes() == (b / "ckpt" / f).read_bytes()
                                       for f in files)
    criterion(8, same_history and same_ckpt and len(files) > 1,
            f"history {'identical' if same_history else 'DIFFERS'}, "
            f"checkpoint ({len(files)} files) {'identical' if same_ckpt else 'DIFFERS'}")
