"""Acceptance criteria, one test each.

Every test records a ``PASS``/``FAIL`` line that is printed in the terminal
summary (see conftest.py) and also written to stdout, so ``pytest -s`` shows
them inline.
"""

import csv
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from gelovec import nn
from gelovec.block import GeloVecBlock, GeloVecConfig, edge_blend, gas_chebyshev, make_variant
from gelovec.cli import main
from gelovec.data import gen_synthetic, load_checkpoint, save_checkpoint, stack_records
from gelovec.network import ModelConfig, build_model
from gelovec.tensor import matmul_spatial
from gelovec.train import fit
from oracles import loop_chebyshev, loop_conv2d, loop_matmul_spatial, loop_maxpool2d

INSTANCES = 50
BOUNDARY_EPOCHS = 12
BOUNDARY_SEEDS = range(5)


def record(number, title, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


# 1 --------------------------------------------------------------------------


def test_1_model_gradient_suite():
    start = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "gelovec", "gradcheck", "--scope", "model"],
                          capture_output=True, text=True)
    elapsed = time.perf_counter() - start
    first = proc.stdout.splitlines()[0] if proc.stdout else proc.stderr.strip()
    passed = proc.returncode == 0 and elapsed < 600
    record(1, "gradcheck --scope model", passed, f"exit {proc.returncode}, {elapsed:.0f}s, {first}")


# 2 --------------------------------------------------------------------------


def _conv_instances(rng):
    for _ in range(INSTANCES):
        k = int(rng.choice([1, 2, 3, 5]))
        stride, dil = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        pad = int(rng.integers(0, k))
        mode = "replicate" if rng.random() < 0.3 else "zero"
        span = dil * (k - 1) + 1
        h, w = (int(rng.integers(max(1, span - 2 * pad), 8)) for _ in range(2))
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = rng.standard_normal((int(rng.integers(1, 3)), cin, h, w)).astype(np.float32)
        wt = rng.standard_normal((cout, cin, k, k)).astype(np.float32)
        b = rng.standard_normal(cout).astype(np.float32)
        got, _ = nn.conv2d(x, wt, b, stride, pad, dil, mode)
        yield np.abs(got - loop_conv2d(x, wt, b, stride, pad, dil, mode)).max()


def _maxpool_instances(rng):
    for _ in range(INSTANCES):
        k, s = int(rng.integers(2, 4)), int(rng.integers(1, 3))
        pad = int(rng.integers(0, k // 2 + 1))
        x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 4)),
                                 int(rng.integers(k, 9)), int(rng.integers(k, 9)))).astype(np.float32)
        got, _ = nn.maxpool2d(x, k, s, pad)
        yield np.abs(got - loop_maxpool2d(x, k, s, pad)).max()


def _chebyshev_instances(rng):
    for _ in range(INSTANCES):
        radius, dil = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        f = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 4)),
                                 int(rng.integers(1, 7)), int(rng.integers(1, 7)))).astype(np.float32)
        w = rng.uniform(0.1, 2.0, (2 * radius + 1) ** 2 - 1).astype(np.float32)
        got, _ = gas_chebyshev(f, w, radius, dil)
        yield np.abs(got - loop_chebyshev(f, w, radius, dil)).max()


def _matmul_instances(rng):
    for _ in range(INSTANCES):
        b, d = int(rng.integers(1, 3)), int(rng.integers(1, 5))
        q = rng.standard_normal((b, d, int(rng.integers(1, 5)), int(rng.integers(1, 5)))).astype(np.float32)
        k = rng.standard_normal((b, d, int(rng.integers(1, 5)), int(rng.integers(1, 5)))).astype(np.float32)
        yield np.abs(matmul_spatial(q, k) - loop_matmul_spatial(q, k)).max()


def test_2_oracle_equivalence():
    rng = np.random.default_rng(2024)
    worst = {}
    for name, gen in [("conv2d", _conv_instances), ("maxpool2d", _maxpool_instances),
                      ("gas_chebyshev", _chebyshev_instances), ("matmul_spatial", _matmul_instances)]:
        errors = list(gen(rng))
        worst[name] = (len(errors), max(errors))
    passed = all(n >= INSTANCES and e <= 1e-5 for n, e in worst.values())
    detail = ", ".join(f"{k} {n} cases max {e:.1e}" for k, (n, e) in worst.items())
    record(2, "loop-oracle equivalence", passed, detail)


# 3 --------------------------------------------------------------------------


def test_3_equation_invariants():
    rng = np.random.default_rng(3)
    cfg = GeloVecConfig(channels=16, reduced=4, bases=4, dilation=2, attention_grid_cap=6)
    worst_norm, in_range, endpoints, row_err, monotone = 0.0, True, True, 0.0, True
    for trial in range(20):
        block = GeloVecBlock(cfg, seed=trial)
        block.params["lambda"][...] = rng.uniform(0.1, 3.0)
        block.record = True
        x = rng.standard_normal((2, 16, 6, 6)).astype(np.float32)
        block.forward(x)

        fibers = block.b_ortho.reshape(2, 4, 4, 6, 6).astype(np.float64)
        worst_norm = max(worst_norm, np.abs(np.linalg.norm(fibers, axis=2) - 1).max())

        d_norm = block.last_d_norm
        gate = block._edge_cache[2]
        in_range &= bool(np.all((d_norm > 0) & (d_norm < 1)) and np.all((gate > 0) & (gate < 1)))

        y_obt, f_edge = block._edge_cache[0], block._edge_cache[1]
        zeros, ones = np.zeros_like(gate), np.ones_like(gate)
        endpoints &= (np.array_equal(edge_blend(y_obt, f_edge, zeros), y_obt)
                      and np.array_equal(edge_blend(y_obt, f_edge, ones), f_edge))

        attn = block.last_attention.astype(np.float64)
        row_err = max(row_err, np.abs(attn.sum(axis=-1) - 1).max())

        y_edge = rng.standard_normal((1, 16, 4, 4)).astype(np.float32)
        d = rng.random((1, 1, 4, 4)).astype(np.float32)
        block.geo_attention(y_edge, d)
        base = block.last_attention.copy()
        for j in rng.choice(16, 4, replace=False):
            bumped = d.copy()
            bumped.reshape(-1)[j] += rng.uniform(0.01, 0.5)
            block.geo_attention(y_edge, bumped)
            monotone &= bool(np.all(block.last_attention[0, :, j] <= base[0, :, j]))
    passed = worst_norm <= 1e-5 and in_range and endpoints and row_err <= 1e-6 and monotone
    detail = (f"fiber norm err {worst_norm:.1e}, D_norm/gate in (0,1) {in_range}, "
              f"gate endpoints exact {endpoints}, row-sum err {row_err:.1e}, monotone {monotone}")
    record(3, "equation invariants", passed, detail)


# 4 --------------------------------------------------------------------------


def test_4_variant_shapes():
    rng = np.random.default_rng(4)
    shapes = {}
    for level, side in [("Low", 56), ("Mid", 28), ("High", 14), ("VeryHigh", 7)]:
        cfg = make_variant(level)
        x = rng.standard_normal((1, cfg.channels, side, side)).astype(np.float32)
        shapes[level] = GeloVecBlock(cfg, seed=0).forward(x).shape == x.shape
    record(4, "variant shape contract", all(shapes.values()),
           ", ".join(f"{k} {'ok' if v else 'changed'}" for k, v in shapes.items()))


# 5 --------------------------------------------------------------------------


@pytest.mark.slow
def test_5_easy_tier_training():
    x, y = stack_records(gen_synthetic(200, 64, "easy", seed=0))
    ex, ey = stack_records(gen_synthetic(100, 64, "easy", seed=1))
    model = build_model(ModelConfig(), seed=0)
    start = time.perf_counter()
    history, _ = fit(model, x, y, epochs=50, seed=0, eval_images=ex, eval_masks=ey, stop_iou=0.90)
    elapsed = time.perf_counter() - start
    epoch, _, metrics = history[-1]
    passed = metrics.iou >= 0.90 and elapsed < 1800
    record(5, "easy-tier training", passed,
           f"held-out IoU {metrics.iou:.4f} after {epoch} epochs, {elapsed / 60:.1f} min")


# 6 --------------------------------------------------------------------------


def _final_iou(csv_path):
    with open(csv_path) as fh:
        return float(list(csv.DictReader(fh))[-1]["iou"])


@pytest.mark.slow
def test_6_gelovec_vs_baseline(tmp_path):
    eval_dir = tmp_path / "eval"
    assert main(["gen-data", "--count", "100", "--size", "64", "--difficulty", "boundary",
                 "--seed", "1", "--out", str(eval_dir)]) == 0
    common = ["--epochs", str(BOUNDARY_EPOCHS), "--set", "synthetic_difficulty=boundary",
              "--set", "synthetic_count=200", "--set", f"eval_data={eval_dir / 'manifest.tsv'}"]
    ious = {"gelovec": [], "baseline": []}
    for seed in BOUNDARY_SEEDS:
        for kind in ious:
            out = tmp_path / f"{kind}{seed}"
            extra = ["--baseline"] if kind == "baseline" else []
            assert main(["train", "--out", str(out), "--seed", str(seed), *common, *extra]) == 0
            ious[kind].append(_final_iou(out / "metrics.csv"))
    gv, base = np.median(ious["gelovec"]), np.median(ious["baseline"])
    detail = (f"median IoU GeloVec {gv:.4f} vs baseline {base:.4f} "
              f"(runs {[round(v, 4) for v in ious['gelovec']]} vs {[round(v, 4) for v in ious['baseline']]})")
    record(6, "GeloVec >= baseline on boundary tier", gv >= base, detail)


# 7 --------------------------------------------------------------------------


def test_7_train_determinism(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs=2\nsynthetic_count=16\nsynthetic_difficulty=boundary\nseed=11\n")
    runs = [tmp_path / "a", tmp_path / "b"]
    for out in runs:
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    same = {name: (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes()
            for name in ("metrics.csv", "model.ckpt")}
    record(7, "train determinism", all(same.values()),
           ", ".join(f"{k} {'identical' if v else 'differs'}" for k, v in same.items()))


# 8 --------------------------------------------------------------------------


def test_8_checkpoint_round_trip(tmp_path):
    model = build_model(ModelConfig(), seed=8)
    model.forward(np.random.default_rng(8).random((2, 3, 64, 64)).astype(np.float32))
    first, second = tmp_path / "first.ckpt", tmp_path / "second.ckpt"
    save_checkpoint(first, model.state_dict(), step=4321)
    tensors, step = load_checkpoint(first)
    save_checkpoint(second, tensors, step)
    identical = first.read_bytes() == second.read_bytes()
    record(8, "checkpoint round trip", identical,
           f"{len(tensors)} tensors, {first.stat().st_size} bytes, {'identical' if identical else 'differs'}")
