"""End-to-end acceptance criteria.

Each test carries ``criterion(number, title)``; conftest prints one PASS/FAIL
line per criterion at the end of the run. Criteria 4 and 6 share one
desk-scale training run (about 30 minutes).
"""

import csv
import json
import math
import time

import numpy as np
import pytest

from metasurrogate import cli
from metasurrogate import dataset as ds
from metasurrogate import geometry as g
from metasurrogate import neuralnet as nn
from metasurrogate import physics as ph
from metasurrogate import surrogate as sg
from metasurrogate.physics import Layer, MaterialSpec, PatternKind, StackConfig

pytestmark = pytest.mark.acceptance

SEEDS = [0, 1, 2, 3, 4]
H = 1e-3
TOL = 1e-3

DESK_N = 2000
DESK_RES = 64
DESK_SEED = 42
DESK_SPLIT = (0.9, 0.05, 0.05)
DESK_BUDGET_S = 30 * 60
DESK_MAX_EPOCHS = 1000
TARGET_CS = 0.995
TARGET_MSE = 0.003


# --- 1: oracle physics ------------------------------------------------------


@pytest.mark.criterion(1, "oracle physics suite")
def test_c1_oracle_physics(detail):
    t0 = time.perf_counter()
    f = ph.frequency_grid_hz()

    # lossless metal-backed stacks: bare, and with purely reactive sheets
    rng = np.random.default_rng(1)
    worst_lossless = 0.0
    for _ in range(50):
        n = int(rng.integers(1, 5))
        layers = tuple(
            Layer(MaterialSpec(rng.uniform(1, 12), 0.0, rng.uniform(1, 4), 0.0),
                  rng.uniform(0.1, 5.0))
            for _ in range(n)
        )
        stack = StackConfig(layers, validate=False)
        for sheets in ([None] * n, [1j * rng.uniform(-500, 500, f.size) for _ in range(n)]):
            gamma = ph.reflection_gamma(stack, sheets=sheets)
            worst_lossless = max(worst_lossless, np.abs(np.abs(gamma) - 1.0).max())
    detail(f"lossless max||G|-1|={worst_lossless:.1e}")
    assert worst_lossless <= 1e-6

    idx = int(np.argmin(np.abs(ph.frequency_grid() - 14.0)))
    quarter_mm = ph.C0 / f[idx] / 4 * 1e3
    salisbury = StackConfig((Layer(MaterialSpec(1.0), quarter_mm),), PatternKind.RESISTIVE,
                            ph.ETA0, 10.0, validate=False)
    s11 = ph.reflection_spectrum(salisbury, sheets=[ph.ETA0])
    detail(f"salisbury S11 at design={s11[idx]:.1f} dB")
    assert s11[idx] == ph.DB_FLOOR

    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        stack = ds.sample_stack(rng)
        cls = g.CLASSES[int(rng.integers(len(g.CLASSES)))]
        grid = g.render(g.sample_pattern(cls, rng, 32), 32)
        worst = max(worst, np.abs(ph.reflection_gamma(stack, grid)).max())
    detail(f"passivity max|G|={worst:.9f} over 1000")
    assert worst <= 1.0 + 1e-9

    elapsed = time.perf_counter() - t0
    detail(f"{elapsed:.1f}s")
    assert elapsed < 10.0


# --- 2: gradients -----------------------------------------------------------


def _layer_errors(seed):
    rng = np.random.default_rng(seed)
    errs = []

    def check(f, x, analytic):
        errs.append(nn.relative_error(analytic, nn.numerical_gradient(f, x, H)))

    x = rng.normal(size=(2, 5, 6, 3))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    r = rng.normal(size=(2, 5, 6, 4))
    f = lambda: float(np.sum(nn.conv2d_forward(x, w, b)[0] * r))
    dx, dw, db = nn.conv2d_backward(r, nn.conv2d_forward(x, w, b)[1])
    for p, d in ((x, dx), (w, dw), (b, db)):
        check(f, p, d)

    for shape in ((4, 3), (3, 4, 4, 2)):
        c = shape[-1]
        x = rng.normal(size=shape)
        gamma, beta = rng.uniform(0.5, 1.5, c), rng.normal(size=c)
        r = rng.normal(size=shape)
        f = lambda: float(np.sum(
            nn.batchnorm_forward(x, gamma, beta, np.zeros(c), np.ones(c))[0] * r))
        cache = nn.batchnorm_forward(x, gamma, beta, np.zeros(c), np.ones(c))[1]
        dx, dg, db = nn.batchnorm_backward(r, cache)
        for p, d in ((x, dx), (gamma, dg), (beta, db)):
            check(f, p, d)

    # inputs kept further than h from the kink
    x = rng.uniform(0.05, 2.0, size=(4, 6)) * rng.choice([-1.0, 1.0], size=(4, 6))
    r = rng.normal(size=(4, 6))
    f = lambda: float(np.sum(nn.leaky_relu_forward(x)[0] * r))
    check(f, x, nn.leaky_relu_backward(r, nn.leaky_relu_forward(x)[1]))

    # distinct values spaced beyond h keep each window's argmax fixed
    x = rng.permutation(2 * 4 * 4 * 3).reshape(2, 4, 4, 3) * 0.1
    r = rng.normal(size=(2, 2, 2, 3))
    f = lambda: float(np.sum(nn.maxpool2d_forward(x)[0] * r))
    check(f, x, nn.maxpool2d_backward(r, nn.maxpool2d_forward(x)[1]))

    x, w, b = rng.normal(size=(3, 5)), rng.normal(size=(4, 5)), rng.normal(size=4)
    r = rng.normal(size=(3, 4))
    f = lambda: float(np.sum(nn.linear_forward(x, w, b)[0] * r))
    dx, dw, db = nn.linear_backward(r, nn.linear_forward(x, w, b)[1])
    for p, d in ((x, dx), (w, dw), (b, db)):
        check(f, p, d)

    for delta in (0.25, 3.0):
        p, t = rng.normal(size=(3, 20)), rng.normal(size=(3, 20))
        p[np.abs(np.abs(p - t) - delta) < 0.01] += 0.05
        f = lambda: nn.huber_loss(p, t, delta)[0]
        check(f, p, nn.huber_loss(p, t, delta)[1])
    return max(errs)


def _tiny_network_error(seed):
    desc = sg.ArchitectureDescriptor(16, (2, 2, 2, 2), 14, (8, 8), 5)
    model = sg.build(desc, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(100 + seed)
    x, c, t = rng.uniform(size=(4, 16, 16)), rng.uniform(size=(4, 14)), rng.uniform(size=(4, 5))

    def f():
        return nn.huber_loss(model.forward(x, c, train=True), t, 3.0)[0]

    model.zero_grad()
    _, grad = nn.huber_loss(model.forward(x, c, train=True), t, 3.0)
    model.backward(grad)
    analytic = {k: v.copy() for k, v in model.named_grads().items()}
    worst, kept_total, total = 0.0, 0, 0
    for name, p in model.named_params().items():
        numeric, kept = nn.numerical_gradient_piecewise(f, p, model.branch_signature, H)
        worst = max(worst, nn.relative_error(analytic[name][kept], numeric[kept]))
        kept_total += int(kept.sum())
        total += p.size
    return worst, kept_total / total


@pytest.mark.criterion(2, "gradient suite")
def test_c2_gradients(detail):
    t0 = time.perf_counter()
    layer_worst = max(_layer_errors(s) for s in SEEDS)
    net = [_tiny_network_error(s) for s in SEEDS]
    net_worst = max(e for e, _ in net)
    kept = min(k for _, k in net)
    elapsed = time.perf_counter() - t0
    detail(f"layers max rel err={layer_worst:.1e}")
    detail(f"tiny net max rel err={net_worst:.1e} (min kept {kept:.0%})")
    detail(f"{len(SEEDS)} seeds, {elapsed:.1f}s")
    assert layer_worst < TOL
    assert net_worst < TOL
    # coordinates straddling a kink are skipped; most must remain
    assert kept >= 0.7
    assert elapsed < 120.0


# --- 3: huber ---------------------------------------------------------------


@pytest.mark.criterion(3, "Huber identities")
def test_c3_huber(detail):
    for delta in (0.25, 1.0, 3.0):
        for sign in (1.0, -1.0):
            loss, _ = nn.huber_loss(np.array([sign * delta]), np.zeros(1), delta)
            assert loss == 0.5 * delta * delta
    rng = np.random.default_rng(3)
    for _ in range(20):
        # dyadic values keep every product and sum exact in float64
        p = rng.integers(-64, 64, size=(8, 201)) / 64.0
        t = rng.integers(-64, 64, size=(8, 201)) / 64.0
        loss, _ = nn.huber_loss(p, t, 1e6)
        e = p - t
        assert loss == 0.5 * float(np.mean(e * e))
    assert sg.TrainConfig().delta == 3.0
    args = cli.build_parser().parse_args(["train", "--data", "d", "--out", "o"])
    assert args.delta == 3.0
    detail("boundary exact; large delta == 0.5*MSE exact; default delta=3")


# --- 4 and 6: desk-scale training -------------------------------------------


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    data = ds.generate(DESK_N, DESK_RES, DESK_SEED)
    ds.split(data, DESK_SPLIT, DESK_SEED)
    ds.save(data, root / "data")
    model = sg.build(sg.ArchitectureDescriptor(DESK_RES), seed=0)
    config = sg.TrainConfig(
        epochs=DESK_MAX_EPOCHS, batch_size=32, learning_rate=1e-4, delta=3.0, seed=0,
        target_val_cs=TARGET_CS, target_val_mse=TARGET_MSE, max_seconds=DESK_BUDGET_S,
    )
    history = sg.train(model, data, config)
    sg.save_model(model, root / "model")
    with open(root / "history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(sg.HISTORY_FIELDS)
        writer.writerows([row[k] for k in sg.HISTORY_FIELDS] for row in history)
    return {"root": root, "data": data, "model": model, "history": history}


@pytest.mark.criterion(4, "desk-scale training reaches val CS>=0.995 and MSE<=0.003")
def test_c4_desk_training(desk, detail):
    history = desk["history"]
    best = min(history, key=lambda r: r["val_mse"])
    last = history[-1]
    detail(f"{len(history)} epochs in {last['seconds']:.0f}s")
    detail(f"best val_mse={best['val_mse']:.5f} at epoch {best['epoch']} "
           f"(val_cs={best['val_cs']:.5f})")
    detail(f"history at {desk['root'] / 'history.csv'}")
    hit = [r for r in history if r["val_cs"] >= TARGET_CS and r["val_mse"] <= TARGET_MSE]
    assert hit, "validation targets not reached within the epoch and time budget"
    assert hit[0]["epoch"] <= DESK_MAX_EPOCHS
    assert hit[0]["seconds"] <= DESK_BUDGET_S


@pytest.mark.criterion(6, "band agreement on the desk-scale test split")
def test_c6_band_agreement(desk, detail):
    report = cli.evaluate_report(desk["model"], desk["data"], ["test"], -10.0, timing_samples=5)
    agreement = report["band_agreement"]
    detail(f"{agreement['agreeing']}/{agreement['total']} agree "
           f"({agreement['fraction']:.1%}) at +-{agreement['tolerance_ghz']:.2f} GHz")
    assert agreement["fraction"] >= 0.9


# --- 5: delta sweep ---------------------------------------------------------


@pytest.mark.criterion(5, "delta sweep over 0.25:3.0:0.25 at 200 epochs")
def test_c5_delta_sweep(tmp_path, detail):
    # full grid and epoch count; a 100-sample 16x16 dataset keeps the run short
    assert cli.main(["gen", "--n", "100", "--res", "16", "--seed", "42",
                     "--split", "0.8,0.1,0.1", "--out", str(tmp_path / "data")]) == 0
    assert cli.main(["sweep-delta", "--data", str(tmp_path / "data"),
                     "--grid", "0.25:3.0:0.25", "--epochs", "200",
                     "--out", str(tmp_path / "sweep")]) == 0
    with open(tmp_path / "sweep" / "sweep.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["delta", "val_mse", "val_mae"]
    deltas = [float(r[0]) for r in rows[1:]]
    assert deltas == [0.25 * k for k in range(1, 13)]
    report = json.loads((tmp_path / "sweep" / "sweep.json").read_text())
    assert report["epochs"] == 200
    mses = [r["val_mse"] for r in report["sweep"]]
    assert all(math.isfinite(m) for m in mses)
    assert report["selected_delta"] == report["sweep"][int(np.argmin(mses))]["delta"]
    assert (tmp_path / "sweep" / "sweep.png").is_file()
    detail(f"12 points, selected delta={report['selected_delta']:g} "
           f"(val_mse={min(mses):.5f})")


# --- 7: speed ---------------------------------------------------------------


@pytest.mark.criterion(7, "inference <=50 ms/sample at 64x64 and time-ratio report")
def test_c7_speed(tmp_path, detail):
    model = sg.build(sg.ArchitectureDescriptor(64), seed=0)
    data = ds.generate(40, 64, 5)
    per_sample = cli.time_inference(model, data.images[:20], data.configs[:20])
    detail(f"surrogate {per_sample * 1e3:.1f} ms/sample")
    assert per_sample <= 0.050

    assert cli.main(["gen", "--n", "40", "--res", "64", "--seed", "5",
                     "--split", "0.5,0.25,0.25", "--out", str(tmp_path / "data")]) == 0
    sg.save_model(model, tmp_path / "model")
    report_path = tmp_path / "report.json"
    assert cli.main(["eval", "--model", str(tmp_path / "model"), "--data",
                     str(tmp_path / "data"), "--report", str(report_path)]) == 0
    timing = json.loads(report_path.read_text())["timing"]
    ratio = timing["surrogate_to_oracle_ratio"]
    assert ratio == pytest.approx(
        timing["surrogate_seconds_per_sample"] / timing["oracle_seconds_per_sample"])
    assert math.isfinite(ratio) and ratio > 0
    detail(f"surrogate/oracle time ratio={ratio:.3g}")


# --- 8: reproducibility -----------------------------------------------------


@pytest.mark.criterion(8, "reproducibility and formats")
def test_c8_reproducibility(tmp_path, detail):
    for name in ("a", "b"):
        assert cli.main(["gen", "--n", "100", "--res", "64", "--seed", "42",
                         "--out", str(tmp_path / name)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    data = ds.load(tmp_path / "a")
    losses = []
    for run in range(2):
        model = sg.build(sg.ArchitectureDescriptor(64), seed=0)
        history = sg.train(model, data, sg.TrainConfig(epochs=1, seed=0, deterministic=True))
        losses.append(history[0]["train_huber"])
    assert losses[0] == losses[1]

    sg.save_model(model, tmp_path / "model", include_optimizer=True)
    loaded = sg.load_model(tmp_path / "model")
    before, after = model.state_tensors(), loaded.state_tensors()
    assert before.keys() == after.keys()
    for k in before:
        assert before[k].dtype == after[k].dtype
        assert before[k].tobytes() == after[k].tobytes()
    x, c, _ = data.subset("test")
    assert model.predict_normalized(x, c).tobytes() == loaded.predict_normalized(x, c).tobytes()
    detail(f"{len(files)} dataset files identical; save/load bit-exact; "
           f"epoch-1 train_huber {losses[0]:.6e} twice")
