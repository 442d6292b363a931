"""Acceptance criteria 1 to 11, each at its stated tolerance and runtime.

Every test records one PASS/FAIL line (printed in the terminal summary) before
asserting. The RL experiments take about 22 minutes in total on one CPU.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest
import yaml
from conftest import ACCEPTANCE, fixture_triples

from ceip.autodiff import Tensor
from ceip.data import Pairs, Trajectory, TransitionTriple, build_condition_pairs, split_train_val
from ceip.envs import PointReachEnv
from ceip.flow import (
    AffineMap,
    FlowTrainConfig,
    affine_forward,
    affine_inverse,
    affine_log_likelihood,
    flow_dataset_nll,
    flow_nll,
    load_flow,
    make_flow,
    single_effective_affine,
    train_single_flow,
)
from ceip.harness import pipeline as pl
from ceip.harness.cli import main
from ceip.harness.config import ExperimentConfig
from ceip.mixture import (
    MU_OFFSET,
    CombinedFlow,
    _coeff_loss,
    base_outputs,
    combined_effective_affine,
    combined_nll,
    injected_flow,
    train_combination,
)
from ceip.numerics import MlpSpec, finite_difference_grad, grad_scalar, init_params, load_checkpoint
from ceip.retrieval import RetrievalDatabase, retrieve_next
from ceip.rl.prior import prior_step, single_flow_bundle

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SEEDS = [0, 1, 2, 3, 4]


def verdict(n, ok, detail, elapsed, limit=None):
    ok = bool(ok) and (limit is None or elapsed < limit)
    budget = f" (limit {limit:.0f} s)" if limit is not None else ""
    ACCEPTANCE[n] = f"{'PASS' if ok else 'FAIL'}  criterion {n:2d}: {detail}; {elapsed:.1f} s{budget}"
    assert ok, ACCEPTANCE[n]


def rel_err(g, fd):
    return float(np.linalg.norm(g - fd) / max(np.linalg.norm(g), np.linalg.norm(fd), 1e-300))


# exact suites --------------------------------------------------------------------

def test_criterion_01_flow_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10_000):
        q = int(rng.integers(1, 7))
        m = AffineMap(np.exp(rng.uniform(-10, 10, q)), rng.normal(size=q) * 10.0 ** rng.uniform(-3, 3))
        a = rng.normal(size=q) * 10.0 ** rng.uniform(-3, 3)
        back = affine_forward(m, affine_inverse(m, a))
        worst = max(worst, float(np.max(np.abs(back - a) / (1 + np.abs(a)))))
    grid = np.linspace(-50, 50, 200_001)
    mass = [np.trapezoid(np.exp(affine_log_likelihood(AffineMap(np.array([s]), np.array([d])), grid[:, None])),
                         grid) for s, d in [(1.0, 0.0), (2.0, 0.0), (0.3, 1.5), (5.0, -2.0)]]
    ll0 = affine_log_likelihood(AffineMap(np.ones(2), np.zeros(2)), np.zeros(2))
    ll2 = affine_log_likelihood(AffineMap(np.full(2, 2.0), np.zeros(2)), np.zeros(2))
    ll_err = max(abs(ll0 + np.log(2 * np.pi)), abs(ll2 + np.log(2 * np.pi) + 2 * np.log(2.0)))
    mass_err = max(abs(x - 1) for x in mass)
    ok = worst <= 1e-9 and mass_err <= 1e-3 and ll_err <= 1e-9
    verdict(1, ok, f"round-trip {worst:.1e}, mass error {mass_err:.1e}, log-lik error {ll_err:.1e}",
            time.perf_counter() - t0, 10)


def test_criterion_02_gradient_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    flow_errs, coeff_errs = [], []
    for i in range(100):
        cd, q, n = (int(x) for x in rng.integers(1, 4, size=3))
        batch = int(rng.integers(3, 9))
        u, a = rng.normal(size=(batch, cd)), rng.normal(size=(batch, q))

        f = make_flow(cd, q, (int(rng.integers(2, 7)),), batchnorm=bool(i % 2), rng=rng)
        nc = f.c_params.size
        p0 = np.concatenate([f.c_params, f.d_params])
        obj = lambda p: flow_nll(p[:nc], p[nc:], f, u, a, training=True)[0]  # noqa: E731
        fd = finite_difference_grad(lambda v: float(obj(Tensor(v)).data), p0)
        flow_errs.append(rel_err(grad_scalar(obj, p0), fd))

        flows = [make_flow(cd, q, (3,), rng=rng) for _ in range(n)]
        spec = MlpSpec(cd, (int(rng.integers(2, 7)),), 2 * n)
        cf = CombinedFlow(flows, spec, init_params(spec, rng))
        cs, ds = base_outputs(cf, u)
        cobj = lambda p: _coeff_loss(p, spec, None, u, a, np.exp(cs), ds, MU_OFFSET, True)[0]  # noqa: E731
        fd = finite_difference_grad(lambda v: float(cobj(Tensor(v)).data), cf.coeff_params)
        coeff_errs.append(rel_err(grad_scalar(cobj, cf.coeff_params), fd))
    worst = max(max(flow_errs), max(coeff_errs))
    verdict(2, worst <= 1e-4, f"worst relative error flow {max(flow_errs):.1e}, coefficients {max(coeff_errs):.1e}",
            time.perf_counter() - t0, 30)


def test_criterion_03_mle_recovery():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    n = 5000
    pairs = Pairs(np.zeros((n, 1)), 2.0 * rng.normal(size=(n, 1)) + 1.0)
    m = single_effective_affine(train_single_flow(pairs, FlowTrainConfig()), np.zeros(1))
    scale, shift = float(m.scale[0]), float(m.shift[0])
    ok = abs(scale / 2.0 - 1) <= 0.05 and abs(shift - 1.0) <= 0.05
    verdict(3, ok, f"scale {scale:.4f}, shift {shift:.4f}", time.perf_counter() - t0, 60)


def _sample(flow, u, rng):
    m = single_effective_affine(flow, u)
    return affine_forward(m, rng.normal(size=m.scale.shape))


def test_criterion_04_mixture_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    flows = [make_flow(3, 2, (16,), rng=rng) for _ in range(3)]
    for f in flows:
        f.c_params *= 0.3
    digests = [f.digest() for f in flows]
    u = rng.uniform(-1, 1, size=(40, 3))
    inj = 0.0
    for j in range(3):
        onehot = np.eye(3)[j]
        a, b = combined_effective_affine(injected_flow(flows, onehot, onehot), u), single_effective_affine(flows[j], u)
        inj = max(inj, float(np.max(np.abs(a.scale - b.scale))), float(np.max(np.abs(a.shift - b.shift))))
    cfg = FlowTrainConfig(epochs=60, batch_size=64, lr=3e-3, clip_norm=10.0, hidden_widths=(16,), seed=0)
    gaps = []
    for j in range(3):
        uj = rng.uniform(-1, 1, size=(1500, 3))
        pairs = Pairs(uj, _sample(flows[j], uj, rng))
        cf = train_combination(flows, pairs, cfg)
        _, val = split_train_val(pairs, 1 - cfg.val_ratio, cfg.seed)
        gaps.append(combined_nll(cf, val) - flow_dataset_nll(flows[j], val))
    frozen = [f.digest() for f in flows] == digests
    ok = inj <= 1e-12 and max(abs(g) for g in gaps) <= 0.1 and frozen
    verdict(4, ok, f"injection error {inj:.1e}, NLL gaps {', '.join(f'{g:+.3f}' for g in gaps)}, "
            f"digests {'unchanged' if frozen else 'CHANGED'}", time.perf_counter() - t0, 120)


def test_criterion_05_parrot_reduction():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    env = PointReachEnv()
    flow = make_flow(env.state_dim, env.action_dim, (32,), rng=rng)
    bundle = single_flow_bundle(flow)
    worst = 0.0
    for ep in range(5):
        s, done = env.reset(ep), False
        bundle.reset_episode()
        while not done:
            z = rng.uniform(-3, 3, size=env.action_dim)
            direct = affine_forward(single_effective_affine(flow, s), z)
            got = bundle.effective_map(s)
            a = prior_step(bundle, s, z)
            worst = max(worst, float(np.max(np.abs(affine_forward(got, z) - direct))),
                        float(np.max(np.abs(a - np.clip(direct, -1, 1)))))
            s, _, done = env.step(a)
    verdict(5, worst <= 1e-12, f"max per-step action difference {worst:.1e}", time.perf_counter() - t0, 5)


def test_criterion_06_push_forward():
    t0 = time.perf_counter()
    db = RetrievalDatabase(fixture_triples())
    first = retrieve_next(db, np.array([0.0]))
    second = retrieve_next(db, np.array([0.0]))
    free = RetrievalDatabase(fixture_triples(), penalty=0.0)
    third = [retrieve_next(free, np.array([0.0]))[0][0] for _ in range(2)]
    fixture_ok = (first[0][0], first[2], second[0][0], second[2], third) == (1.0, 0, 2.0, 1, [1.0, 1.0])

    rng = np.random.default_rng(4)
    mono_ok = True
    for _ in range(300):
        T, ds = int(rng.integers(2, 40)), int(rng.integers(1, 6))
        half = 0.5 / np.sqrt(ds)  # every squared distance below the penalty C = 1
        states = rng.uniform(0, half, size=(T + 1, ds))
        tdb = RetrievalDatabase.from_trajectories([Trajectory(states, np.zeros((T + 1, 1)))])
        q = rng.uniform(0, half, size=ds)
        seen = []
        while len(seen) < T and (not seen or seen[-1] < T - 1):
            seen.append(tdb.retrieve_next(q).step_index)
        mono_ok &= all(b > a for a, b in zip(seen, seen[1:])) and seen[-1] == T - 1

    nn_ok = True
    for _ in range(1000):
        n, ds = int(rng.integers(1, 12)), int(rng.integers(1, 4))
        keys = rng.normal(size=(n, ds))
        triples = [TransitionTriple(keys[i], np.zeros(1), keys[i] + 1, int(rng.integers(0, 3)), i) for i in range(n)]
        zdb = RetrievalDatabase(triples, penalty=0.0)
        for _ in range(3):
            q = rng.normal(size=ds)
            d2 = ((keys - q) ** 2).sum(axis=1)
            best = min(range(n), key=lambda i: (d2[i], triples[i].traj_id, triples[i].step_index))
            r = zdb.retrieve_next(q)
            nn_ok &= (r.traj_id, r.step_index) == (triples[best].traj_id, triples[best].step_index)
    verdict(6, fixture_ok and mono_ok and nn_ok,
            f"fixture {fixture_ok}, monotone {mono_ok}, C=0 nearest neighbour {nn_ok}", time.perf_counter() - t0, 10)


# desk-scale experiments ----------------------------------------------------------

def run_experiment(name, variants, root):
    cfg = ExperimentConfig.load(CONFIGS / name)
    ws = pl.Workspace(root)
    results = pl.run_many(cfg, ws, variants, SEEDS)
    by = {v: [r for r in results if r.variant == v] for v in variants}
    return cfg, ws, results, by


def peak_abs_c(cfg, ws, results):
    """Largest |c(u)| before clamping seen in RL runs and on all demonstration conditions."""
    peaks = [0.0]
    for r in results:
        info = json.loads((r.run_dir / "run.json").read_text())
        peaks.append(info.get("peak_abs_c", 0.0))
    ds, _ = pl.stage_data(cfg, ws)
    trajs = ds.all_trajectories()
    for p in sorted((ws.root / "cache").rglob("flow_*.ckpt")):
        _, meta = load_checkpoint(p)
        u = build_condition_pairs(trajs, meta["explicit"]).u
        peaks.append(float(np.abs(load_flow(p).raw_c(u)).max()))
    return max(peaks)


def mean_final(rs, attr):
    return float(np.mean([getattr(r.report.final, attr) for r in rs]))


@pytest.mark.slow
def test_criterion_07_point_reach_headline(tmp_path):
    t0 = time.perf_counter()
    cfg, ws, results, by = run_experiment("point_reach.yaml", ["CEIP", "naive"], tmp_path)
    ceip, naive = mean_final(by["CEIP"], "mean_return"), mean_final(by["naive"], "mean_return")
    steps = {r.report.final.step for r in results}
    peak = peak_abs_c(cfg, ws, results)
    ok = ceip >= -15 and ceip - naive >= 10 and steps == {30_000} and peak < 10
    verdict(7, ok, f"CEIP {ceip:.2f}, naive {naive:.2f}, margin {ceip - naive:.2f}, peak |c| {peak:.2f}",
            time.perf_counter() - t0, 20 * 60)


@pytest.mark.slow
def test_criterion_08_forward_beats_stall(tmp_path):
    t0 = time.perf_counter()
    fwd, nofwd = "CEIP+TS+EX+forward", "CEIP+TS+EX"
    cfg, ws, results, by = run_experiment("waypoint_stall.yaml", [fwd, nofwd], tmp_path)
    a, b = mean_final(by[fwd], "mean_subtasks"), mean_final(by[nofwd], "mean_subtasks")
    peak = peak_abs_c(cfg, ws, results)
    verdict(8, a > b and peak < 10, f"subtasks forward {a:.2f} vs no forward {b:.2f}, peak |c| {peak:.2f}",
            time.perf_counter() - t0, 20 * 60)


@pytest.mark.slow
def test_criterion_09_missing_subtask_needs_ts_flow(tmp_path):
    t0 = time.perf_counter()
    ts, nots = "CEIP+TS+EX+forward", "CEIP+EX+forward"
    cfg, ws, results, by = run_experiment("waypoint_missing.yaml", [ts, nots], tmp_path)
    a, b = mean_final(by[ts], "mean_subtasks"), mean_final(by[nots], "mean_subtasks")
    peak = peak_abs_c(cfg, ws, results)
    verdict(9, a > b and peak < 10, f"subtasks with TS flow {a:.2f} vs without {b:.2f}, peak |c| {peak:.2f}",
            time.perf_counter() - t0, 20 * 60)


@pytest.mark.slow
def test_criterion_10_bc_ordering(tmp_path):
    t0 = time.perf_counter()
    _, _, _, by = run_experiment("waypoint_bc.yaml", ["BC", "BC+EX"], tmp_path)
    bc, ex = mean_final(by["BC"], "mean_subtasks"), mean_final(by["BC+EX"], "mean_subtasks")
    verdict(10, ex >= bc, f"subtasks BC+EX {ex:.2f} vs BC {bc:.2f}", time.perf_counter() - t0)


@pytest.mark.slow
def test_criterion_11_reproducibility(tmp_path):
    t0 = time.perf_counter()
    raw = yaml.safe_load((CONFIGS / "point_reach.yaml").read_text())
    raw.update(variant="CEIP+TS+EX+forward", seeds=[0])
    cfg_path = tmp_path / "repro.yaml"
    cfg_path.write_text(yaml.safe_dump(raw))
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [main(["pipeline", "--config", str(cfg_path), "--out", str(o)]) for o in outs]
    pattern = ("*.ckpt", "eval.csv", "*.jsonl")
    files = [sorted(p.relative_to(o) for pat in pattern for p in o.rglob(pat)) for o in outs]
    same = files[0] == files[1] and all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files[0])
    n_ckpt = sum(f.suffix == ".ckpt" for f in files[0])
    ok = codes == [0, 0] and same and n_ckpt >= 3 and any(f.name == "eval.csv" for f in files[0])
    verdict(11, ok, f"{len(files[0])} artifacts ({n_ckpt} checkpoints) {'identical' if same else 'DIFFER'}",
            time.perf_counter() - t0)
