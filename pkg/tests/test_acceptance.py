"""Acceptance suite: one test per criterion, tolerances pinned.

The desk-scale CSTR experiment (criterion 6) simulates its own data and
trains 3 tasks x 5 seeds x 2 variants; expect roughly 15-25 minutes on a
single CPU core.
"""

import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest
import torch

from dacn import losses
from dacn.config import load_config
from dacn.cstr_sim import (
    PlantState,
    all_fault_ids,
    default_sim_config,
    derivatives,
    generate_dataset,
    rk4,
    simulate,
    steady_state,
)
from dacn.dataio import TaskSpec, build_task, ingest_csv, save_bundle
from dacn.evaluation import accuracy, class_counts, confusion, worst_of_runs
from dacn.hpo import SearchSpace, search
from dacn.model import DACN, adain, count_params, instance_stats
from dacn.trainer import OWNERS, TrainConfig, compare_variants, train_step

from conftest import make_toy_task

DESK_EPOCHS = {"epochs_pretrain": 20, "epochs_train": 20}
DESK_SAMPLES_PER_CLASS = 200
DESK_SEEDS = [0, 1, 2, 3, 4]
DESK_BUDGET_S = 45 * 60


# --- brute-force references ----------------------------------------------------


def ref_ce(c, y):
    return -sum(math.log(max(float(c[i, y[i]]), 1e-12)) for i in range(len(y))) / len(y)


def ref_supcon(g, y, tau):
    g = g / g.norm(dim=1, keepdim=True)
    n = len(g)
    out = 0.0
    for i in range(n):
        denom = sum(math.exp(float(g[i] @ g[k]) / tau) for k in range(n) if k != i)
        for j in range(n):
            if j != i and y[j] == y[i]:
                out -= math.log(math.exp(float(g[i] @ g[j]) / tau) / denom) / (n - 1)
    return out


def ref_disc(d, dp):
    return -sum(math.log(float(v)) for v in d) - sum(math.log(1 - float(v)) for v in dp)


def test_criterion_1_loss_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 9))
        L = int(rng.integers(2, 5))
        y = torch.as_tensor(rng.integers(0, L, n))
        c = torch.softmax(torch.as_tensor(rng.normal(size=(n, L))), 1)
        cp = torch.softmax(torch.as_tensor(rng.normal(size=(n, L))), 1)
        g = torch.as_tensor(rng.normal(size=(2 * n, 6)))
        tau = float(rng.uniform(0.1, 1.0))
        d = torch.as_tensor(rng.uniform(0.01, 0.99, (n, 1)))
        dp = torch.as_tensor(rng.uniform(0.01, 0.99, (n, 1)))
        assert abs(losses.ce_seen(c, y).item() - ref_ce(c, y)) < 1e-6
        assert abs(losses.ce_pseudo(cp, y).item() - ref_ce(cp, y)) < 1e-6
        yy = torch.cat([y, y])
        assert abs(losses.supcon(g, yy, tau).item() - ref_supcon(g, yy, tau)) < 1e-6
        assert abs(losses.disc_loss(d, dp).item() - ref_disc(d, dp)) < 1e-6
    assert time.perf_counter() - t0 < 10


def test_criterion_2_gradient_contract():
    t0 = time.perf_counter()
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        m = DACN(v=2, n_classes=2, k=8, width=2, hidden=4, dropout=0.0, seed=1).train()
        assert sum(p.numel() for p in m.parameters()) <= 500
        x = torch.randn(6, 2, 8, generator=torch.Generator().manual_seed(2))
        y = torch.tensor([0, 1, 1, 0, 1, 0])
        cfg = TrainConfig(dropout_rate=0.0)

        def run():
            return train_step(m, x, y, cfg, torch.Generator().manual_seed(5))

        grads = run()["grads"]
        params = list(m.parameters())
        groups = m.groups()
        eps, checked = 1e-6, 0
        for obj, owned in OWNERS.items():
            for name, ps in groups.items():
                for p in ps:
                    g = grads[obj][next(i for i, q in enumerate(params) if q is p)]
                    if name not in owned:
                        assert not g.any(), (obj, name)
                        continue
                    flat = p.data.view(-1)
                    for c in range(flat.numel()):
                        orig = flat[c].item()
                        flat[c] = orig + eps
                        hi = run()[obj].item()
                        flat[c] = orig - eps
                        lo = run()[obj].item()
                        flat[c] = orig
                        fd = (hi - lo) / (2 * eps)
                        an = g.view(-1)[c].item()
                        assert an == pytest.approx(fd, rel=1e-4, abs=1e-8), (obj, name, c)
                        checked += 1
        assert checked == sum(p.numel() for p in params)
    finally:
        torch.set_default_dtype(old)
    assert time.perf_counter() - t0 < 60


def test_criterion_3_shape_pipeline_and_param_count():
    cfg = load_config("cstr_t1")
    L = len(cfg["classes"])
    m = DACN(v=7, n_classes=L, k=64).eval()
    x = torch.randn(3, 7, 64)
    f = m.extract(x)
    assert f.shape == (3, 128, 16) and f.flatten(1).shape == (3, 2048)
    assert m.G.fc.in_features == 2048 and m.G.fc.out_features == 256
    g = m.invariant_features(f)
    c = m.classify(g)
    assert g.shape == (3, 256) and c.shape == (3, L)
    assert m.D.fc.in_features == 256 * L and m.discriminate(g, c).shape == (3, 1)
    # reported figure, and the shift implied by our channel/class counts
    reported = 630_413
    assert count_params(DACN(v=10, n_classes=13), "inference") == reported
    n = count_params(m, "inference")
    assert n == reported + 3 * 128 * (7 - 10) + 257 * (L - 13)
    assert abs(n - reported) / reported < 0.01


def test_criterion_4_transformer_closed_form():
    f = torch.randn(8, 128, 16) * 2.5 + 0.7
    mu, sigma = instance_stats(f)
    assert torch.allclose(adain(f, sigma.squeeze(-1), mu.squeeze(-1)), f, atol=1e-5)
    out = adain(f, torch.ones(8, 128), torch.zeros(8, 128))
    assert (out.mean(-1).abs() < 1e-5).all()
    assert ((out.std(-1, unbiased=False) - 1).abs() < 1e-5).all()


def test_criterion_5_simulator_physics():
    from scipy.optimize import fsolve

    sim = default_sim_config()
    p = sim.params
    st, qc = steady_state(p, sim.setpoint)
    z = fsolve(lambda z: derivatives(PlantState(z[0], sim.setpoint, z[1]), z[2], p), [0.4, sim.setpoint - 4, 0.008],
               xtol=1e-12)
    oracle = PlantState(z[0], sim.setpoint, z[1])
    assert max(abs(r) for r in derivatives(oracle, z[2], p)) < 1e-8
    assert max(abs(r) for r in derivatives(st, qc, p)) < 1e-8

    def err(dt):
        y, t = np.array([1.0]), 0.0
        for _ in range(int(round(1 / dt))):
            y, t = rk4(lambda t, y: -y, t, y, dt), t + dt
        return abs(y[0] - math.exp(-1))

    order = math.log2(err(0.1) / err(0.05))
    assert 3.8 < order < 4.2

    faults = [f for f in all_fault_ids(sim) if f != "F0"]
    assert len(faults) == 12
    base = simulate("M1", "F0", duration=260, seed=9)
    pre = base.times < sim.onset
    for fid in faults:
        s = simulate("M1", fid, duration=260, seed=9)
        assert np.array_equal(s.channels[pre], base.channels[pre]), fid


@pytest.fixture(scope="module")
def cstr_desk_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cstr")
    t0 = time.perf_counter()
    sim = default_sim_config()
    generate_dataset(list(sim.modes), all_fault_ids(sim), out, sim, seed=0)
    return ingest_csv(out), time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_6_desk_scale_cstr(cstr_desk_data):
    series, sim_s = cstr_desk_data
    t0 = time.perf_counter()
    results = {}
    for name in ("cstr_t1", "cstr_t2", "cstr_t3"):
        cfg = load_config(name)
        cfg.update(DESK_EPOCHS, samples_per_class=DESK_SAMPLES_PER_CLASS)
        task = build_task(TaskSpec.from_config(cfg), series)
        reports = compare_variants(task, TrainConfig.from_config(cfg), DESK_SEEDS, ("full", "A1"))
        full, a1 = worst_of_runs(reports["full"]), worst_of_runs(reports["A1"])
        results[name] = {
            "full_test1": [r.test1.acc for r in reports["full"]],
            "full_test2": [r.test2_acc for r in reports["full"]],
            "a1_test2": [r.test2_acc for r in reports["A1"]],
            "worst_full_test1": full.test1.acc,
            "worst_full_test2": full.test2_acc,
            "worst_a1_test2": a1.test2_acc,
        }
    elapsed = sim_s + time.perf_counter() - t0
    print(json.dumps({"elapsed_s": elapsed, **results}, indent=1))
    for name, r in results.items():
        # worst-of-5 test1 of the full model: every run must clear the bar
        assert min(r["full_test1"]) >= 0.90, (name, r)
    wins = sum(r["worst_full_test2"] >= r["worst_a1_test2"] for r in results.values())
    assert wins >= 2, results
    assert elapsed < DESK_BUDGET_S


def test_criterion_7_metric_identities():
    rng = np.random.default_rng(7)
    t, p = rng.integers(0, 5, 1000), rng.integers(0, 5, 1000)
    m = confusion(t, p, 5)
    assert accuracy(m) == np.mean(t == p)
    for l in range(5):
        c = class_counts(m, l)
        assert c["TP"] + c["FN"] + c["FP"] + c["TN"] == 1000


def test_criterion_8_reproducible_runs(tmp_path):
    bundle = save_bundle(make_toy_task(), tmp_path / "toy.npz")
    outputs = []
    for i in range(2):
        run = tmp_path / f"run{i}"
        cmd = [sys.executable, "-m", "dacn.cli", "ablate", "--variant", "full", "--seeds", "3",
               "--bundle", str(bundle), "--run-dir", str(run),
               "--set", "epochs_pretrain=3", "--set", "epochs_train=3", "--set", "batch_size=16"]
        subprocess.run(cmd, check=True, capture_output=True)
        rows = [json.loads(l) for l in (run / "full_seed3.jsonl").read_text().splitlines()]
        for r in rows:
            r.pop("wall_s", None)
            r.pop("checkpoint", None)
        outputs.append(((run / "full_seed3.safetensors").read_bytes(), rows))
    assert outputs[0][0] == outputs[1][0]
    assert outputs[0][1] == outputs[1][1]
    assert len(outputs[0][1]) == 1 + 3 + 3


def test_criterion_9_hpo_hygiene(tmp_path):
    task = make_toy_task()
    template = TrainConfig(epochs_pretrain=3, epochs_train=2, batch_size=16)
    best, trials = search(SearchSpace(budget=4, seed=1), task, template, log_path=tmp_path / "t.csv")
    assert task.test2_reads == 0
    top = max(t.pseudo_acc for t in trials)
    winner = next(t for t in trials if t.pseudo_acc == top)
    assert best.weights.lambda1 == winner.params["lambda1"] and best.learning_rate == winner.params["learning_rate"]
