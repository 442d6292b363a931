import numpy as np
import pytest
from conftest import const_flow, fixture_triples
from hypothesis import given, settings
from hypothesis import strategies as st

from ceip.autodiff import Tensor
from ceip.data import Pairs, Trajectory
from ceip.envs import PointReachConfig, PointReachEnv, ReachExpert
from ceip.flow import FlowTrainConfig, identity_flow, make_flow, single_effective_affine
from ceip.mixture import parrot_flow
from ceip.numerics import NumericError
from ceip.retrieval import RetrievalDatabase
from ceip.rl import sac as sac_mod
from ceip.rl.bc import train_bc
from ceip.rl.evaluate import CSV_COLUMNS, EvalReport, EvalRow, ReplayPolicy, ScriptedPolicy, evaluate, read_report_csv
from ceip.rl.prior import PriorBundle, PriorConfigError, identity_bundle, prior_step, single_flow_bundle
from ceip.rl.sac import LatentGaussianPolicy, ReplayBuffer, SacConfig, train_sac

# prior ---------------------------------------------------------------------------


def test_identity_prior_is_clipped_latent():
    b = identity_bundle(3, 2)
    s = np.array([0.3, -1.0, 2.0])
    np.testing.assert_array_equal(prior_step(b, s, [0.5, -0.25]), [0.5, -0.25])
    np.testing.assert_array_equal(prior_step(b, s, [2.5, -3.0]), [1.0, -1.0])


def test_forward_retrieval_advances_condition():
    db = RetrievalDatabase(fixture_triples())
    b = PriorBundle(parrot_flow(identity_flow(2, 1)), db, use_explicit=True, use_forward=True)
    u1, u2 = b.condition([0.0]), b.condition([0.0])
    np.testing.assert_array_equal(u1, [0.0, 1.0])
    np.testing.assert_array_equal(u2, [0.0, 2.0])
    b.reset_episode()
    np.testing.assert_array_equal(b.condition([0.0]), [0.0, 1.0])
    assert db.marker(0) == -1  # the bundle works on its own marker set


def test_without_forward_retrieval_repeats():
    db = RetrievalDatabase(fixture_triples())
    b = PriorBundle(parrot_flow(identity_flow(2, 1)), db, use_explicit=True, use_forward=False)
    np.testing.assert_array_equal(b.condition([0.0]), b.condition([0.0]))


def test_prior_without_database_is_pure():
    f = make_flow(3, 2, (4,), rng=np.random.default_rng(0))
    b = single_flow_bundle(f)
    s, z = np.array([0.1, 0.2, 0.3]), np.array([0.4, -0.1])
    np.testing.assert_array_equal(prior_step(b, s, z), prior_step(b, s, z))


def test_bundle_invariants():
    db = RetrievalDatabase(fixture_triples())
    with pytest.raises(PriorConfigError):
        PriorBundle(parrot_flow(identity_flow(2, 1)), db, use_explicit=False, use_forward=True)
    with pytest.raises(PriorConfigError):
        PriorBundle(parrot_flow(identity_flow(2, 1)), None, use_explicit=True)
    with pytest.raises(PriorConfigError):
        PriorBundle(parrot_flow(identity_flow(3, 1)), db, use_explicit=True)


def test_parrot_reduction_per_step():
    rng = np.random.default_rng(1)
    f = make_flow(10, 4, (32,), rng=rng)
    b = single_flow_bundle(f)
    env = PointReachEnv()
    s = env.reset(0)
    done = False
    while not done:
        z = rng.uniform(-3, 3, size=4)
        a = prior_step(b, s, z)
        m = single_effective_affine(f, s)
        direct = np.clip(m.scale * z + m.shift, -1, 1)
        assert np.max(np.abs(a - direct)) <= 1e-12
        s, _, done = env.step(a)


def test_prior_map_uses_flow_constants():
    b = single_flow_bundle(const_flow(1, [np.log(0.5)], [0.25]))
    np.testing.assert_allclose(prior_step(b, [0.0], [1.0]), [0.75])


# policy --------------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.1, 100.0))
def test_latent_box_respected(seed, scale):
    rng = np.random.default_rng(seed)
    pol = LatentGaussianPolicy.create(5, 3, (8,), rng)
    pol.params = pol.params * scale
    s = rng.normal(size=(20, 5)) * scale
    for z in (pol.mean_z(s), pol.sample(s, rng)):
        assert np.all(np.abs(z) <= 3.0)


def test_squashed_log_density_matches_change_of_variables():
    rng = np.random.default_rng(2)
    pol = LatentGaussianPolicy.create(3, 2, (6,), rng)
    s = rng.normal(size=(7, 3))
    eps = rng.standard_normal((7, 2))
    z, logp = pol.sample_with_logp(s, eps)
    mean, log_std = pol.heads(s)
    u = mean + np.exp(log_std) * eps
    gauss = (-0.5 * eps**2 - 0.5 * np.log(2 * np.pi) - log_std).sum(axis=1)
    # d(3 tanh u)/du = 3 sech^2 u; log cosh keeps precision where tanh saturates
    jac = (np.log(3.0) - 2.0 * np.log(np.cosh(u))).sum(axis=1)
    np.testing.assert_allclose(logp, gauss - jac, rtol=1e-9, atol=1e-9)
    z2, logp2 = pol.rsample(Tensor(pol.params), s, eps)
    np.testing.assert_allclose(z2.data, z, rtol=1e-12)
    np.testing.assert_allclose(logp2.data, logp, rtol=1e-12)


def test_replay_buffer_wraps():
    buf = ReplayBuffer(3, 2, 1)
    for i in range(5):
        buf.add(np.full(2, i), [i * 0.1], -1.0, np.full(2, i + 1), i == 4)
    assert len(buf) == 3
    assert sorted(buf.s[:, 0].tolist()) == [2.0, 3.0, 4.0]


def test_sac_config_validation():
    with pytest.raises(ValueError):
        SacConfig(total_steps=100, warmup_random_steps=100)
    with pytest.raises(ValueError):
        SacConfig(entropy_mode="bogus")


SMALL = dict(total_steps=2000, warmup_random_steps=200, batch_size=32, hidden_widths=(16,),
             eval_interval=500, eval_episodes=2, seed=0)


def test_train_sac_row_count_and_latent_buffer(monkeypatch):
    stored = []
    orig = ReplayBuffer.add

    def spy(self, s, z, r, s2, done):
        stored.append(np.asarray(z))
        orig(self, s, z, r, s2, done)

    monkeypatch.setattr(ReplayBuffer, "add", spy)
    # a prior that halves latents makes env actions and latents distinguishable
    b = single_flow_bundle(const_flow(10, [np.log(0.5)] * 4, [0.0] * 4))
    pol, rep = train_sac(PointReachEnv, b, SacConfig(**SMALL))
    assert [r.step for r in rep.rows] == [500, 1000, 1500, 2000]
    assert all(len(r.returns) == 2 for r in rep.rows)
    assert all(-40 <= r.mean_return <= 0 for r in rep.rows)
    z = np.array(stored)
    assert z.shape == (2000, 4) and np.abs(z).max() > 1.0 and np.abs(z).max() <= 3.0


def test_train_sac_is_deterministic():
    cfg = SacConfig(**{**SMALL, "total_steps": 600, "eval_interval": 300})
    a = train_sac(PointReachEnv, identity_bundle(10, 4), cfg)
    b = train_sac(PointReachEnv, identity_bundle(10, 4), cfg)
    np.testing.assert_array_equal(a[0].params, b[0].params)
    assert a[1].rows == b[1].rows


def test_train_sac_numeric_failure_keeps_report(monkeypatch):
    calls = {"n": 0}

    def boom(self, batch, rng):
        calls["n"] += 1
        if calls["n"] > 150:
            raise NumericError("forced")
        return {}

    monkeypatch.setattr(sac_mod.SacAgent, "update", boom)
    cfg = SacConfig(**{**SMALL, "total_steps": 1000, "eval_interval": 100})
    with pytest.raises(NumericError) as err:
        train_sac(PointReachEnv, identity_bundle(10, 4), cfg)
    assert isinstance(err.value.checkpoint, EvalReport)
    assert [r.step for r in err.value.checkpoint.rows] == [100, 200, 300]


def test_explicit_training_resets_markers_once_per_episode():
    trajs_db = RetrievalDatabase(fixture_triples())
    resets = {"env": 0, "db": 0}

    class OneDimEnv:
        state_dim, action_dim, terminal, subtasks_completed = 1, 1, False, 0

        def __init__(self):
            self.t = 0

        def reset(self, seed=None):
            resets["env"] += 1
            self.t = 0
            return np.zeros(1)

        def step(self, a):
            self.t += 1
            return np.zeros(1), 0.0, self.t >= 10

    class CountingBundle(PriorBundle):
        def reset_episode(self):
            resets["db"] += 1
            super().reset_episode()

    b = CountingBundle(parrot_flow(identity_flow(2, 1)), trajs_db, use_explicit=True, use_forward=True)
    cfg = SacConfig(**{**SMALL, "total_steps": 300, "eval_interval": 1000, "warmup_random_steps": 299})
    train_sac(OneDimEnv, b, cfg)
    # 300 steps of 10-step episodes: the initial reset plus one after each of 30 episodes
    assert resets["env"] == resets["db"] == 31


# evaluation ----------------------------------------------------------------------

def test_evaluate_counts_and_determinism():
    pol = LatentGaussianPolicy.create(10, 4, (8,), np.random.default_rng(0))
    a = evaluate(pol, identity_bundle(10, 4), PointReachEnv, 3, seed=5)
    b = evaluate(pol, identity_bundle(10, 4), PointReachEnv, 3, seed=5)
    assert len(a.rows[0].returns) == 3
    assert a.rows == b.rows


def test_scripted_expert_through_identity_prior_near_optimal():
    cfg = PointReachConfig()
    pol = ScriptedPolicy(lambda env: ReachExpert(env.goal, cfg.step_scale, noise=0.0))
    rep = evaluate(pol, identity_bundle(10, 4), lambda: PointReachEnv(cfg), 10, seed=0)
    assert rep.final.mean_return >= -12


def test_replay_policy_open_loop():
    t = Trajectory(np.zeros((2, 3)), np.array([[0.5, -0.5], [1.0, 0.0]]))
    p = ReplayPolicy([t])
    p.reset_episode()
    out = [p.act(None) for _ in range(3)]
    np.testing.assert_array_equal(out, [[0.5, -0.5], [1.0, 0.0], [0.0, 0.0]])


def test_report_csv_round_trip(tmp_path):
    rep = EvalReport([EvalRow(500, (-1.0, -3.0), (40, 40), (0, 0)), EvalRow(1000, (-2.0,), (40,), (1,))], "abc")
    rep.to_csv(tmp_path / "eval.csv")
    rows = read_report_csv(tmp_path / "eval.csv")
    assert tuple(rows[0]) == CSV_COLUMNS
    assert [int(r["step"]) for r in rows] == [500, 1000]
    assert float(rows[0]["mean_return"]) == -2.0 and float(rows[0]["std_return"]) == 1.0
    assert rows[1]["config_hash"] == "abc"


# behavior cloning ------------------------------------------------------------------

def test_bc_memorizes_single_pair():
    pairs = Pairs(np.array([[0.3, -0.2]]), np.array([[0.7, -0.4]]))
    cfg = FlowTrainConfig(epochs=3000, batch_size=1, lr=1e-2, clip_norm=1.0, hidden_widths=(16,),
                          early_stop_min_batches=10**6)
    pol = train_bc(pairs, cfg)
    assert np.sum((pol.predict(pairs.u) - pairs.a) ** 2) < 1e-6


def test_bc_with_explicit_prior_queries_like_prior_step():
    db = RetrievalDatabase(fixture_triples())
    spec_pairs = Pairs(np.array([[0.0, 1.0], [0.5, 2.0]]), np.array([[0.1], [0.2]]))
    pol = train_bc(spec_pairs, FlowTrainConfig(epochs=2, batch_size=2, hidden_widths=(4,)), db, use_forward=True)
    b = PriorBundle(parrot_flow(identity_flow(2, 1)), db, use_explicit=True, use_forward=True)
    pol.reset_episode()
    b.reset_episode()
    for _ in range(3):
        np.testing.assert_array_equal(pol.condition([0.0]), b.condition([0.0]))


def test_bc_explicit_needs_matching_condition():
    db = RetrievalDatabase(fixture_triples())
    with pytest.raises(ValueError):
        train_bc(Pairs(np.zeros((3, 1)), np.zeros((3, 1))), FlowTrainConfig(epochs=1), db)


def test_bc_actions_clipped():
    pairs = Pairs(np.zeros((4, 1)), np.full((4, 1), 5.0))
    pol = train_bc(pairs, FlowTrainConfig(epochs=200, batch_size=4, lr=1e-2, clip_norm=1.0, hidden_widths=(4,)))
    assert pol.act(np.zeros(1))[0] == 1.0
