"""Acceptance suite: one test per criterion, each printing a PASS line.

The expensive criteria share session-scoped training runs on the pinned
64x64 benchmark (2000 train / 500 held-out samples, seed-pinned configs from
``posecascade/configs/toy64.json``).  Budgets:

  * criteria 4/5/6 use the benchmark's configured epoch budget,
  * criterion 7 compares schemes i/ii/iii under one larger equal budget
    (every scheme gets exactly the same total number of SGD epochs),
  * criterion 10 trains the receptive-field family under its own equal,
    shorter budget.

Run with ``pytest tests/test_acceptance.py -v -s`` to watch the PASS lines.
"""

import time
from types import SimpleNamespace

import numpy as np
import pytest

from posecascade.architecture import build_cpm
from posecascade.config import arch_spec, dataset_configs, packaged_config, train_config
from posecascade.evaluation import stage_curve
from posecascade.synth import SynthDataset
from posecascade.training import train

# Budgets for the scheme-comparison criteria (epochs; see module docstring).
BENCH_EPOCHS = 16      # criteria 4, 5, 6
SCHEMES_EPOCHS = 30    # criterion 7
RF_SWEEP_EPOCHS = 10   # criterion 10


def report(criterion: int, message: str) -> None:
    print(f"\nACCEPTANCE {criterion:02d} PASS: {message}")


@pytest.fixture(scope="session")
def bench():
    cfg = packaged_config("toy64")
    train_cfg, test_cfg = dataset_configs(cfg)
    return SimpleNamespace(
        cfg=cfg,
        spec=arch_spec(cfg),
        train_data=SynthDataset(train_cfg),
        test_data=SynthDataset(test_cfg),
        sigma=cfg["train"]["sigma"],
    )


def _run_scheme(bench, scheme: str, epochs: int):
    model = build_cpm(bench.spec, seed=bench.cfg["seed"])
    config = train_config(bench.cfg, scheme=scheme, epochs=epochs)
    start = time.time()
    result = train(model, bench.train_data, config, val_data=bench.test_data)
    seconds = time.time() - start
    curve = stage_curve(model, bench.test_data, bench.sigma, radii=[0.2])
    return SimpleNamespace(model=model, result=result, seconds=seconds,
                           pck=[float(c.overall[0]) for c in curve])


@pytest.fixture(scope="session")
def run_i(bench):
    return _run_scheme(bench, "i", BENCH_EPOCHS)


@pytest.fixture(scope="session")
def run_iv(bench):
    return _run_scheme(bench, "iv", BENCH_EPOCHS)


@pytest.fixture(scope="session")
def scheme_trio(bench):
    return {s: _run_scheme(bench, s, SCHEMES_EPOCHS) for s in ("i", "ii", "iii")}


# -- criterion 1: gradient correctness ----------------------------------------


def test_criterion_1_gradient_correctness():
    from posecascade.engine import (
        Tape, Tensor, backward, check_gradients, concat_channels, conv2d,
        maxpool2, mul, relu, sum_all,
    )
    from posecascade.receptive import design_default_specs
    from posecascade.training import stage_loss, total_loss

    start = time.time()
    rng = np.random.default_rng(2)

    def gradcheck(build, tensors, rtol):
        with Tape() as tape:
            loss = build()
            backward(loss, tape)
        analytic = [t.grad.copy() for t in tensors]
        worst = check_gradients(lambda: build().item(), tensors, analytic, rtol=rtol)
        assert worst <= 1.0, f"scaled gradient error {worst:.3f} > 1"

    # every primitive op, double precision at 1e-6
    x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True, dtype=np.float64)
    k = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.5, requires_grad=True, dtype=np.float64)
    b = Tensor(rng.normal(size=3) * 0.1, requires_grad=True, dtype=np.float64)
    gradcheck(lambda: sum_all(mul(conv2d(x, k, b, stride=2, padding=1),
                                  conv2d(x, k, b, stride=2, padding=1))),
              [x, k, b], rtol=1e-6)

    data = rng.permutation(36).reshape(1, 1, 6, 6) * 0.31
    xp = Tensor(data, requires_grad=True, dtype=np.float64)

    def pool_loss():
        out, _ = maxpool2(xp)
        return sum_all(mul(out, out))

    gradcheck(pool_loss, [xp], rtol=1e-6)

    xr_data = rng.normal(size=(5, 5))
    xr_data[np.abs(xr_data) < 0.05] += 0.2
    xr = Tensor(xr_data, requires_grad=True, dtype=np.float64)
    gradcheck(lambda: sum_all(mul(relu(xr), relu(xr))), [xr], rtol=1e-6)

    ca = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True, dtype=np.float64)
    cb = Tensor(rng.normal(size=(1, 1, 4, 4)), requires_grad=True, dtype=np.float64)
    gradcheck(lambda: sum_all(mul(concat_channels(ca, cb), concat_channels(ca, cb))),
              [ca, cb], rtol=1e-6)

    # single precision at 1e-4; moderate magnitudes keep the FD oracle's own
    # float32 noise comfortably below the tolerance being verified
    xs = Tensor((rng.normal(size=(1, 1, 6, 6)) * 0.3).astype(np.float32),
                requires_grad=True)
    ks = Tensor((rng.normal(size=(2, 1, 3, 3)) * 0.3).astype(np.float32),
                requires_grad=True)
    bs = Tensor(np.full(2, 0.1, dtype=np.float32), requires_grad=True)
    with Tape() as tape:
        loss32 = sum_all(mul(conv2d(xs, ks, bs, padding=1),
                             conv2d(xs, ks, bs, padding=1)))
        backward(loss32, tape)
    analytic32 = [t.grad.copy() for t in (xs, ks, bs)]
    worst32 = check_gradients(
        lambda: sum_all(mul(conv2d(xs, ks, bs, padding=1),
                            conv2d(xs, ks, bs, padding=1))).item(),
        [xs, ks, bs], analytic32, eps=1e-2, rtol=1e-4)
    assert worst32 <= 1.0, f"float32 scaled gradient error {worst32:.3f} > 1"

    # full 2-stage model on 16x16 inputs: every parameter, double precision.
    # A noise image avoids the exact maxpool ties a constant background would
    # create (the criterion excludes such decision-boundary neighborhoods).
    spec = design_default_specs(5, (16, 16), target_stage1_rf=8, target_context_rf=3,
                                stages=2, heatmap_stride=2, base_width=2,
                                context_width=3)
    model = build_cpm(spec, seed=1, dtype=np.float64)
    for p in model.unique_parameters():
        # move off the zero-bias init: it puts relu-dead cells exactly on the
        # kink, which the criterion's epsilon-exclusion is about
        p.tensor.data += rng.normal(scale=0.05, size=p.tensor.data.shape)
    hm = spec.heatmap_size
    image = Tensor(rng.normal(size=(1, 1, 16, 16)), dtype=np.float64)
    center = Tensor(rng.random(size=(1, 1, *hm)), dtype=np.float64)
    t1 = Tensor(rng.random(size=(1, spec.parts + 1, *hm)), dtype=np.float64)
    later = Tensor(rng.random(size=(1, spec.parts + 1, *hm)), dtype=np.float64)

    def cpm_loss():
        outs = model.forward(image, center)
        return total_loss([stage_loss(outs[0], t1), stage_loss(outs[1], later)])

    params = model.unique_parameters()
    with Tape() as tape:
        loss = cpm_loss()
        backward(loss, tape)
    from posecascade.engine import check_gradients as check

    analytic = [p.tensor.grad.copy() for p in params]
    worst = check(lambda: cpm_loss().item(), [p.tensor for p in params],
                  analytic, rtol=1e-6)
    assert worst <= 1.0, f"full-model scaled gradient error {worst:.3f} > 1"

    elapsed = time.time() - start
    assert elapsed < 120, f"criterion 1 took {elapsed:.0f}s, budget is 120s"
    n_scalars = sum(p.tensor.data.size for p in params)
    report(1, f"all primitive ops and a 2-stage model ({n_scalars} parameters) match "
              f"central finite differences (worst scaled error {worst:.3f}); "
              f"{elapsed:.0f}s < 120s")


# -- criterion 2: receptive-field oracle equivalence ---------------------------


def test_criterion_2_rf_oracle_equivalence():
    from posecascade.receptive import chain_rf

    import test_receptive as rf_tests

    start = time.time()
    rng = np.random.default_rng(77)
    checked = 0
    while checked < 20:
        layers = rf_tests.random_stack(rng)
        chain = chain_rf(layers)
        rf, jump = chain[-1].rf, chain[-1].jump
        if rf > 48:
            continue
        measured = rf_tests.perturbation_rf(layers, rf, jump)
        assert measured == rf, f"oracle {measured} != closed form {rf} for {layers}"
        checked += 1
    elapsed = time.time() - start
    assert elapsed < 60, f"criterion 2 took {elapsed:.0f}s, budget is 60s"
    report(2, f"closed-form receptive fields equal the pixel-perturbation oracle "
              f"on {checked} random stacks (integer equality); {elapsed:.0f}s < 60s")


# -- criterion 3: loss identities ----------------------------------------------


def test_criterion_3_loss_identities():
    from posecascade.engine import Tensor
    from posecascade.training import stage_loss, total_loss

    start = time.time()
    rng = np.random.default_rng(5)
    # dyadic values: float32 arithmetic on them is exact, so "exactly delta^2"
    # is a meaningful assertion
    pred = (rng.integers(0, 64, size=(2, 6, 16, 16)) / 64.0).astype(np.float32)
    assert stage_loss(Tensor(pred), Tensor(pred.copy())).item() == 0.0

    losses = [Tensor(np.asarray(v, dtype=np.float32)) for v in (0.5, 1.25, 2.0)]
    assert total_loss(losses).item() == 0.5 + 1.25 + 2.0

    for delta in (0.5, 0.25, 1.0):
        perturbed = pred.copy()
        perturbed[1, 3, 7, 9] += np.float32(delta)
        assert stage_loss(Tensor(perturbed), Tensor(pred.copy())).item() == delta * delta

    elapsed = time.time() - start
    assert elapsed < 10, f"criterion 3 took {elapsed:.1f}s, budget is 10s"
    report(3, f"stage_loss(x,x)=0, total_loss is the exact stage sum, single-cell "
              f"perturbations cost exactly delta^2; {elapsed:.2f}s < 10s")


# -- criteria 4-7: the pinned benchmark ------------------------------------------


def test_criterion_4_toy_end_to_end(run_i):
    final = run_i.pck[-1]
    assert run_i.result.epochs_run <= 30
    assert run_i.seconds <= 20 * 60, f"training took {run_i.seconds:.0f}s > 20min"
    assert final >= 0.90, f"final-stage PCK@0.2 {final:.4f} < 0.90"
    report(4, f"scheme (i), 3 stages, 2000 samples: PCK@0.2 = {final:.4f} >= 0.90 "
              f"in {run_i.result.epochs_run} epochs, {run_i.seconds / 60:.1f} min < 20 min")


def test_criterion_5_stagewise_improvement(run_i):
    s1, s3 = run_i.pck[0], run_i.pck[-1]
    assert s3 >= s1 + 0.02, f"stage-3 {s3:.4f} not >= stage-1 {s1:.4f} + 0.02"
    report(5, f"per-stage PCK@0.2 on the criterion-4 run: stage1 {s1:.4f} -> "
              f"stage3 {s3:.4f} (gap {s3 - s1:+.4f} >= 0.02)")


def test_criterion_6_intermediate_supervision_effect(run_i, run_iv):
    total = run_i.seconds + run_iv.seconds
    assert total <= 40 * 60, f"both runs took {total:.0f}s > 40min"
    g_i = run_i.result.grad_stats.mean_abs(1, "stage1/")
    g_iv = run_iv.result.grad_stats.mean_abs(1, "stage1/")
    assert g_i > g_iv, f"epoch-1 stage-1 |grad|: (i) {g_i:.3e} not > (iv) {g_iv:.3e}"
    assert run_i.pck[-1] >= run_iv.pck[-1], \
        f"final PCK: (i) {run_i.pck[-1]:.4f} < (iv) {run_iv.pck[-1]:.4f}"
    report(6, f"epoch-1 stage-1 mean |grad|: (i) {g_i:.3e} > (iv) {g_iv:.3e} "
              f"(x{g_i / g_iv:.0f}); final PCK@0.2 (i) {run_i.pck[-1]:.4f} >= "
              f"(iv) {run_iv.pck[-1]:.4f}; {total / 60:.1f} min < 40 min")


def test_criterion_7_training_scheme_ordering(scheme_trio):
    p = {s: scheme_trio[s].pck[-1] for s in ("i", "ii", "iii")}
    epochs = {s: scheme_trio[s].result.epochs_run for s in p}
    assert all(e <= SCHEMES_EPOCHS for e in epochs.values())
    assert p["i"] >= p["iii"] - 0.01, f"(i) {p['i']:.4f} < (iii) {p['iii']:.4f} - 0.01"
    assert p["iii"] >= p["ii"] - 0.01, f"(iii) {p['iii']:.4f} < (ii) {p['ii']:.4f} - 0.01"
    report(7, f"equal {SCHEMES_EPOCHS}-epoch budget: PCK@0.2 (i) {p['i']:.4f} >= "
              f"(iii) {p['iii']:.4f} >= (ii) {p['ii']:.4f} (ties within 0.01)")


# -- criterion 8: belief-map properties -------------------------------------------


def test_criterion_8_belief_map_properties():
    from posecascade.beliefs import Keypoints, extract_keypoints, ideal_beliefs

    start = time.time()
    stride, size = 4, (12, 12)

    def grid(col, row):
        return (col * stride + stride / 2, row * stride + stride / 2)

    kps = Keypoints.from_coords([grid(3, 5)])
    stack = ideal_beliefs(kps, sigma=2.0, stride=stride, map_size=size)
    assert stack.scores[0, 5, 3] == 1.0

    rng = np.random.default_rng(0)
    for _ in range(20):
        pts = Keypoints(rng.uniform(0, 48, size=(3, 2)))
        bg = ideal_beliefs(pts, sigma=3.0, stride=stride, map_size=size).background()
        assert bg.min() >= 0.0 and bg.max() <= 1.0

    base = ideal_beliefs(Keypoints.from_coords([grid(3, 3)]), 2.0, stride, size)
    shifted = ideal_beliefs(Keypoints.from_coords([grid(5, 6)]), 2.0, stride, size)
    np.testing.assert_allclose(shifted.scores[0, 3:, 2:], base.scores[0, :-3, :-2],
                               rtol=0, atol=1e-7)

    coords = [grid(1, 1), grid(9, 2), grid(4, 10)]  # separations > 6 sigma
    well = Keypoints.from_coords(coords)
    recovered = extract_keypoints(ideal_beliefs(well, 1.5, stride, size), stride)
    np.testing.assert_array_equal(recovered.xy, well.xy)

    elapsed = time.time() - start
    assert elapsed < 10, f"criterion 8 took {elapsed:.1f}s, budget is 10s"
    report(8, f"peak exactly 1.0 at grid-aligned truth, background in [0,1], "
              f"grid-shift equivariance, exact extract(ideal) recovery; "
              f"{elapsed:.2f}s < 10s")


# -- criterion 9: reproducibility ---------------------------------------------------


def test_criterion_9_reproducibility(tmp_path):
    import json

    from posecascade.cli import main

    config = {
        "seed": 13,
        "dataset": {"canvas": [32, 32], "train_count": 10, "test_count": 4,
                    "train_seed": 601, "test_seed": 602,
                    "gen": {"figure_scale": [0.45, 0.55], "margin": 2.0,
                            "second_figure_prob": 0.0}},
        "arch": {"stages": 2, "parts": 5, "input_size": [32, 32],
                 "heatmap_stride": 4, "target_stage1_rf": 10,
                 "target_context_rf": 3, "base_width": 3, "context_width": 4},
        "train": {"scheme": "i", "epochs": 3, "batch_size": 4,
                  "learning_rate": 5e-6, "momentum": 0.9, "sigma": 2.5,
                  "snapshot_every": 1, "rotation_range": 10.0,
                  "scale_range": [0.95, 1.05]},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(config))
    data_dir = tmp_path / "data"
    assert main(["gen", "--config", str(cfg_path), "--out", str(data_dir)]) == 0

    runs = [tmp_path / "runA", tmp_path / "runB"]
    for out in runs:
        assert main(["train", "--config", str(cfg_path), "--out", str(out),
                     "--data", str(data_dir)]) == 0
    metrics_a = (runs[0] / "metrics.csv").read_bytes()
    assert metrics_a == (runs[1] / "metrics.csv").read_bytes()
    assert (runs[0] / "final.ckpt").read_bytes() == (runs[1] / "final.ckpt").read_bytes()

    resumed = tmp_path / "resumed"
    snap = runs[0] / "checkpoints" / "epoch_0001.ckpt"
    assert main(["train", "--config", str(cfg_path), "--out", str(resumed),
                 "--data", str(data_dir), "--resume", str(snap)]) == 0
    assert (resumed / "metrics.csv").read_bytes() == metrics_a
    assert (resumed / "final.ckpt").read_bytes() == (runs[0] / "final.ckpt").read_bytes()

    report(9, "cmd_train reruns are bitwise-identical (metrics.csv and checkpoint); "
              "resume-from-snapshot reproduces the uninterrupted run bitwise")


# -- criterion 10: receptive-field sweep ---------------------------------------------


def test_criterion_10_rf_sweep(bench):
    from posecascade.architecture import spec_parameter_count
    from posecascade.evaluation import rf_sweep
    from posecascade.receptive import build_rf_family

    start = time.time()
    family = build_rf_family(bench.spec.parts, bench.spec.input_size,
                             bench.cfg["rf_sweep"]["context_rf_targets"],
                             stages=bench.spec.stages,
                             heatmap_stride=bench.spec.heatmap_stride,
                             base_width=bench.cfg["arch"]["base_width"],
                             target_stage1_rf=bench.cfg["arch"]["target_stage1_rf"])
    counts = [spec_parameter_count(s) for s in family]
    mean = float(np.mean(counts))
    assert max(abs(c - mean) for c in counts) <= 0.10 * mean

    config = train_config(bench.cfg, epochs=RF_SWEEP_EPOCHS,
                          learning_rate=bench.cfg["rf_sweep"]["learning_rate"])
    rows = rf_sweep(family, bench.train_data, bench.test_data, config,
                    seed=bench.cfg["seed"])
    elapsed = time.time() - start
    assert elapsed <= 3600, f"criterion 10 took {elapsed:.0f}s > 1h"
    assert rows[-1].pck_at_02 > rows[0].pck_at_02, \
        f"PCK at largest RF {rows[-1].pck_at_02:.4f} not above smallest " \
        f"{rows[0].pck_at_02:.4f}"
    table = ", ".join(f"rf {r.rf_beliefs} cells ({r.parameters} params): "
                      f"{r.pck_at_02:.4f}" for r in rows)
    report(10, f"equal-parameter family, {RF_SWEEP_EPOCHS}-epoch budget each: {table}; "
               f"largest beats smallest; {elapsed / 60:.1f} min < 60 min")
