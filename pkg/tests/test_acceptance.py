"""Acceptance suite: one or more tests per numbered criterion.

Each test carries ``@pytest.mark.criterion(n, title)``; the conftest hook
prints a PASS/FAIL line per criterion at the end of the run. Training-backed
criteria (6, 7, 8) share one cached run per LoRA rank and are marked ``slow``.
"""

import json
import time

import numpy as np
import pytest

from conftest import crandn
from fapt.baselines import vec_prony_fit, vec_prony_predict
from fapt.cli import main
from fapt.evaluation import NO_PREDICTION, STATIONARY, MisoScenario, run_benchmark
from fapt.io import read_dataset, write_dataset
from fapt.model import ModelConfig, PortLLM
from fapt.nn import (MLP, BatchNorm2d, Conv2d, DownSampling, LayerNorm, LeakyReLU, Linear,
                     LoRALinear, MultiHeadAttention, TransformerBlock, finite_diff_check)
from fapt.nn.layers import GELU
from fapt.ports import (brute_force_port_oracle, gather_port_channels, select_port_miso,
                        select_ports, table_accuracy, validation_nmse)
from fapt.scenario import KMH, ChannelDataset, ScenarioConfig, build_dataset, generate_samples
from fapt.training import TrainConfig, evaluate, lr_at_epoch, nmse_loss, port_validation, train

criterion = pytest.mark.criterion


def _elapsed_below(t0, seconds):
    took = time.perf_counter() - t0
    assert took < seconds, f"took {took:.1f} s, budget {seconds} s"


# ---------------------------------------------------------------------------
# 1. zero-init identity
# ---------------------------------------------------------------------------

@criterion(1, "LoRA zero-init identity")
@pytest.mark.parametrize("prompt", [False, True])
def test_c1_zero_init_identity(prompt, rng):
    t0 = time.perf_counter()
    model = PortLLM(ModelConfig(prompt_enabled=prompt))
    assert all(np.all(a.lora_b.value == 0) for a in model.adapters())
    if prompt:
        fc2 = model.prompt.mlp.fc2
        assert np.all(fc2.weight.value == 0) and np.all(fc2.bias.value == 0)
    model.eval()
    x = crandn(rng, 3, 8, 20, 10)
    assert np.array_equal(model.forward(x), model.forward(x, adapters=False))
    _elapsed_below(t0, 10)


# ---------------------------------------------------------------------------
# 2. gradient fidelity
# ---------------------------------------------------------------------------

def _module_check(mod, x, seed=0):
    r = np.random.default_rng(seed).standard_normal(mod.forward(x).shape)
    mod.zero_grad()
    dx = mod.backward(r)
    params = [p for _, p in mod.named_parameters() if p.trainable]
    return finite_diff_check(lambda: float(np.sum(mod.forward(x) * r)),
                             [x] + [p.value for p in params], [dx] + [p.grad.copy() for p in params],
                             max_coords=20, seed=seed)


def _layers(rng):
    ln = LayerNorm(6)
    ln.gamma.value[...] = rng.standard_normal(6)
    bn = BatchNorm2d(3)
    bn.gamma.value[...] = rng.standard_normal(3)
    lora = LoRALinear(Linear(6, 5, rng), 2, rng)
    lora.lora_b.value[...] = rng.standard_normal(lora.lora_b.shape)
    blk = TransformerBlock(16, 2, rng, lora_rank=2, n_layers=2)
    for name, p in blk.named_parameters():
        if name.endswith("lora_b"):
            p.value[...] = 0.05 * rng.standard_normal(p.shape)
    return [
        ("linear", Linear(5, 4, rng), (3, 5)),
        ("gelu", GELU(), (4, 6)),
        ("leaky_relu", LeakyReLU(0.01), (4, 6)),
        ("layernorm", ln, (3, 4, 6)),
        ("batchnorm", bn, (4, 3, 5, 4)),
        ("conv2d", Conv2d(2, 3, 3, 2, 1, rng), (2, 2, 5, 4)),
        ("downsampling", DownSampling(2, rng), (3, 2, 6, 5)),
        ("attention", MultiHeadAttention(8, 2, rng), (2, 5, 8)),
        ("causal_attention", MultiHeadAttention(8, 2, rng, causal=True), (2, 5, 8)),
        ("lora_linear", lora, (3, 6)),
        ("mlp", MLP(4, 7, 3, rng), (2, 3, 4)),
        ("transformer_block", blk, (2, 4, 16)),
    ]


@criterion(2, "gradient fidelity")
def test_c2_layer_gradients():
    rng = np.random.default_rng(2)
    worst = {}
    for name, mod, shape in _layers(rng):
        worst[name] = _module_check(mod, rng.standard_normal(shape) + 0.01)
    assert max(worst.values()) <= 1e-5, worst


@criterion(2, "gradient fidelity")
@pytest.mark.parametrize("prompt", [False, True])
def test_c2_pipeline_gradients(prompt):
    rng = np.random.default_rng(22)
    cfg = ModelConfig(t_in=4, f_out=4, n=8, m=8, d_model=16, n_heads=2, n_layers=2, d_hidden=32,
                      lora_rank=2, prompt_enabled=prompt, prompt_len=8)
    model = PortLLM(cfg)
    for ad in model.adapters():
        ad.lora_b.value[...] = 0.05 * rng.standard_normal(ad.lora_b.value.shape)
    if prompt:
        w = model.prompt.mlp.fc2.weight.value
        w[...] = 0.05 * rng.standard_normal(w.shape)
    x = crandn(rng, 3, 4, 8, 8)
    truth = crandn(rng, 3, 4, 8, 8)
    model.train()
    model.zero_grad()
    _, dr, di = nmse_loss(model.forward(x), truth, batched=True)
    model.backward(dr, di)
    params = model.trainable_parameters()
    err = finite_diff_check(lambda: nmse_loss(model.forward(x), truth, batched=True)[0],
                            [p.value for _, p in params], [p.grad.copy() for _, p in params],
                            max_coords=12)
    assert err <= 1e-5


# ---------------------------------------------------------------------------
# 3. port-selection oracle
# ---------------------------------------------------------------------------

@criterion(3, "port-selection oracle")
def test_c3_port_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    for i in range(1000):
        n, m = rng.integers(1, 21, 2)
        nt = int(rng.integers(1, 5))
        pred = crandn(rng, nt, n, m)
        ref = crandn(rng, nt, n, m)
        if i % 4 == 0:                     # coarse values force exact ties
            pred = np.round(pred)
            ref = np.round(ref)
        assert select_port_miso(pred, ref) == brute_force_port_oracle(pred, ref)
    _elapsed_below(t0, 30)


# ---------------------------------------------------------------------------
# 4. zero-velocity invariance
# ---------------------------------------------------------------------------

@criterion(4, "zero-velocity invariance")
def test_c4_zero_velocity():
    cfg = ScenarioConfig(n_paths=5, speed_range=(0.0, 0.0))
    data = generate_samples(cfg, 3)
    ref_tables = data.reference
    # one single-antenna stack per (sample, horizon step)
    ports = select_ports(data.future[:, :, None], ref_tables[:, :, None])
    assert ports.shape == (3, cfg.f_out) and np.all(ports == 0)
    got = gather_port_channels(data.future, ports)
    assert np.array_equal(got, ref_tables[..., 0, 0])
    curve, overall = port_validation(data.future, data.future, data.reference)
    assert overall == -np.inf and np.all(curve == -np.inf)
    assert validation_nmse(got, ref_tables[..., 0, 0]) == -np.inf


# ---------------------------------------------------------------------------
# 5. Vec Prony exactness
# ---------------------------------------------------------------------------

@criterion(5, "Vec Prony exactness")
def test_c5_prony_exact():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(300):
        k = int(rng.integers(1, 3))
        z = np.exp(rng.uniform(-0.05, 0.02, k) + 1j * rng.uniform(-np.pi, np.pi, k))
        amp = crandn(rng, k, 6)
        n = np.arange(8 + 8)
        series = np.einsum("kt,kc->tc", z[:, None] ** n[None, :], amp)
        hist, fut = series[:8], series[8:]
        pred = vec_prony_predict(vec_prony_fit(hist, order=2), hist, 8)
        worst = max(worst, np.linalg.norm(pred - fut) / np.linalg.norm(fut))
    assert worst < 1e-8


# ---------------------------------------------------------------------------
# 6-8. training-backed criteria
# ---------------------------------------------------------------------------

TOY_SCENARIO = ScenarioConfig(n_paths=4)
TOY_MODEL = ModelConfig(d_model=64, n_layers=2, n_heads=4, t_in=8, f_out=8, n=20, m=10)
TOY_TRAIN = TrainConfig(alpha_max=2e-3, warmup_epochs=25, total_epochs=150, batch_train=32)


@pytest.fixture(scope="module")
def toy_data():
    train_set, test_set = build_dataset(TOY_SCENARIO, 2000)
    # same UEs and path sets, fresh sample groups, speed pinned to 120 km/h
    fast = generate_samples(TOY_SCENARIO.with_(speed_range=(120 * KMH, 120 * KMH)), 400, start=2000)
    return train_set, test_set, fast


@pytest.fixture(scope="module")
def toy_runs(toy_data):
    cache = {}

    def run(rank):
        if rank not in cache:
            train_set, test_set, _ = toy_data
            model = PortLLM(TOY_MODEL.with_(lora_rank=rank))
            t0 = time.perf_counter()
            report = train(model, train_set, test_set, TOY_TRAIN)
            cache[rank] = (model, report, time.perf_counter() - t0)
        return cache[rank]

    return run


@pytest.mark.slow
@criterion(6, "toy end-to-end training")
def test_c6_training_improves(toy_runs):
    _, report, took = toy_runs(4)
    test_db = report.column("test_nmse_db")
    gain = test_db[0] - test_db[-1]
    assert gain >= 10.0, f"test NMSE {test_db[0]:.2f} -> {test_db[-1]:.2f} dB ({gain:.2f} dB gain)"
    assert took <= 15 * 60


@pytest.mark.slow
@criterion(6, "toy end-to-end training")
def test_c6_beats_hold_last_at_120kmh(toy_runs, toy_data):
    from fapt.baselines import HoldLast
    model, _, _ = toy_runs(4)
    fast = toy_data[2]
    ours = evaluate(model, fast).validation_curve_db
    hold = evaluate(HoldLast(), fast).validation_curve_db
    assert np.all(ours <= hold - 3.0), (ours.round(2), hold.round(2))


@pytest.mark.slow
@criterion(7, "LoRA rank sweep direction")
def test_c7_rank_four_not_worst(toy_runs):
    acc, took = {}, 0.0
    for r in (1, 4, 16):
        _, report, t = toy_runs(r)
        acc[r] = report.rows[-1].accuracy_pct
        took += t
    assert acc[4] > min(acc[1], acc[16]), acc
    assert took <= 45 * 60


@pytest.mark.slow
@criterion(8, "SE ordering")
def test_c8_se_ordering(toy_runs):
    model, _, _ = toy_runs(4)
    t0 = time.perf_counter()
    sc = MisoScenario(TOY_SCENARIO, speed_mps=120 * KMH, snr_grid=(0.0, 10.0, 20.0, 30.0),
                      n_trials=200)
    assert TOY_SCENARIO.n_ue == 10 and (sc.geom.n_y, sc.geom.n_z) == (2, 8)
    rep = run_benchmark(sc, {"neural": model})
    st, ours, none = rep.se(STATIONARY), rep.se("neural"), rep.se(NO_PREDICTION)
    assert np.all(st >= ours) and np.all(ours >= none), (st.round(3), ours.round(3), none.round(3))
    _elapsed_below(t0, 10 * 60)


# ---------------------------------------------------------------------------
# 9-10. schedule endpoints and metric fixed points
# ---------------------------------------------------------------------------

@criterion(9, "LR schedule endpoints")
def test_c9_lr_endpoints():
    cfg = TrainConfig()
    assert abs(lr_at_epoch(0, cfg) - 4e-6) <= 1e-12
    assert abs(lr_at_epoch(100, cfg) - 1e-3) <= 1e-12
    assert abs(lr_at_epoch(600, cfg) - 4e-6) <= 1e-12


@criterion(10, "metric fixed points")
def test_c10_metric_fixed_points(rng):
    truth = crandn(rng, 3, 8, 5, 4)
    assert table_accuracy(truth, truth) == 100.0
    assert nmse_loss(truth, truth)[0] == 0.0
    assert abs(nmse_loss(np.zeros_like(truth), truth)[0] - 1.0) <= 1e-9
    h = crandn(rng, 10, 16)
    assert abs(validation_nmse(1.1 * h, h) + 20.0) <= 1e-9


# ---------------------------------------------------------------------------
# 11. reproducibility
# ---------------------------------------------------------------------------

REPRO_TRAIN = ("d_model = 16\nn_heads = 2\nn_layers = 2\nd_hidden = 32\nlora_rank = 2\n"
               "warmup_epochs = 1\ntotal_epochs = 3\nbatch_train = 8\n")


def _loss_trace(csv_path):
    lines = [ln for ln in open(csv_path) if not ln.startswith("#")]
    return lines


@criterion(11, "reproducibility")
def test_c11_reproducible_across_runs_and_threads(tmp_path, monkeypatch):
    tcfg = tmp_path / "train.cfg"
    tcfg.write_text(REPRO_TRAIN)
    blobs, traces, ckpts = [], [], []
    for i, threads in enumerate(("1", "4", "1")):
        monkeypatch.setenv("FAPT_THREADS", threads)
        data = tmp_path / f"d{i}.bin"
        assert main(["gen-data", "--out", str(data), "--samples", "24", "--seed", "11"]) == 0
        blobs.append(data.read_bytes())
        ck = tmp_path / f"m{i}.ckpt"
        assert main(["train", "--data", str(data), "--config", str(tcfg), "--out", str(ck),
                     "--seed", "5"]) == 0
        traces.append(_loss_trace(str(ck) + ".csv"))
        ckpts.append(ck.read_bytes())
        manifest = json.loads((tmp_path / f"m{i}.ckpt.manifest.json").read_text())
        assert manifest["seed"] == 5
    assert blobs[0] == blobs[1] == blobs[2]
    assert len(traces[0]) == 4 and traces[0] == traces[1] == traces[2]
    assert ckpts[0] == ckpts[1] == ckpts[2]


# ---------------------------------------------------------------------------
# 12. persistence
# ---------------------------------------------------------------------------

def _same_dataset(a, b):
    for name in ("past", "future", "reference", "ue_id", "speed", "t0_slot", "seed"):
        x, y = getattr(a, name), getattr(b, name)
        assert x.dtype == y.dtype and x.shape == y.shape and x.tobytes() == y.tobytes()


@criterion(12, "persistence")
def test_c12_round_trips(tmp_path, rng):
    t0 = time.perf_counter()
    cfg = ScenarioConfig(n_paths=3)
    for ds in (generate_samples(cfg, 5), ChannelDataset.empty(8, 8, 20, 10)):
        path = tmp_path / f"d{len(ds)}.bin"
        write_dataset(path, ds)
        _same_dataset(ds, read_dataset(path))
    model = PortLLM(ModelConfig(d_model=16, n_heads=2, n_layers=2, d_hidden=32, lora_rank=2,
                                prompt_enabled=True, prompt_len=8))
    for ad in model.adapters():
        ad.lora_b.value[...] = rng.standard_normal(ad.lora_b.value.shape)
    model.train()
    model.forward(crandn(rng, 4, 8, 20, 10))          # move batch-norm running statistics
    first = tmp_path / "a.ckpt"
    model.save(first)
    back = PortLLM.load(first)
    for (na, pa), (nb, pb) in zip(model.named_parameters(), back.named_parameters()):
        assert na == nb and pa.value.tobytes() == pb.value.tobytes()
    second = tmp_path / "b.ckpt"
    back.save(second)
    assert first.read_bytes() == second.read_bytes()
    _elapsed_below(t0, 10)
