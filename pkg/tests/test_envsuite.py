import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from udil.envsuite import (
    ENV_NAMES,
    EnvSpec,
    FiniteMDP,
    LineEnv,
    Side,
    exact_occupancy,
    expected_reward_equivalence_check,
    gen_expert_demos,
    ground_truth_map,
    make_env,
    make_expert_line,
    make_grid_chain,
    make_learner_line,
    make_ordered_pairs,
    scripted_progress,
    state_visitation,
)

from oracles import line_recurrence


def _run(env, actions, seed=0):
    obs = [env.reset(1, seed=seed)]
    for a in actions:
        obs.append(env.step(np.array([[a]])))
    return np.concatenate(obs)


def test_envspec_rejects_nonpositive():
    with pytest.raises(ValueError):
        EnvSpec(0, 1, 10, "x")


def test_zero_actions_fixed_point():
    s = _run(make_expert_line(), [0.0] * 50)
    assert (s[:, 0] == 0).all() and (s[:, 1] == 0).all()


def test_full_forward_matches_recurrence():
    env = make_expert_line()
    s = _run(env, [1.0] * 100)
    assert s[-1, 0] == pytest.approx(line_recurrence(0.5, 100), abs=1e-12)
    assert s[-1, 0] == pytest.approx(9.85, abs=1e-9)
    assert s[2, 1] == 1.0 and s[1, 1] == 0.5


def test_nuisance_uncorrelated_with_actions():
    env = make_expert_line(seed=4)
    r = np.random.default_rng(0)
    acts = r.uniform(-1, 1, size=10_000)
    s = _run(env, acts)
    for j in range(2, 5):
        rho = np.corrcoef(acts, s[1:, j])[0, 1]
        assert abs(rho) < 0.05


def test_nuisance_bit_identical_under_action_intervention():
    r = np.random.default_rng(1)
    a = _run(make_expert_line(seed=2), r.uniform(-1, 1, 200), seed=5)
    b = _run(make_expert_line(seed=2), r.uniform(-1, 1, 200), seed=5)
    np.testing.assert_array_equal(a[:, 2:], b[:, 2:])
    assert np.abs(a[:, 2:]).max() <= 1.0


def test_env_deterministic_given_seed_and_actions():
    acts = np.linspace(-1, 1, 60)
    np.testing.assert_array_equal(_run(make_expert_line(seed=3), acts, 9),
                                  _run(make_expert_line(seed=3), acts, 9))


def test_wall_stops_backward_motion():
    s = _run(make_expert_line(), [-1.0] * 30)
    assert (s[:, 0] == 0).all() and (s[:, 1] >= 0).all()


def test_negated_scaled_recovers_canonical():
    acts = np.sin(np.arange(80))
    e = _run(make_expert_line(seed=1), acts, 3)
    l = _run(make_learner_line("negated-scaled", seed=1), acts, 3)
    np.testing.assert_allclose(-l[:, 0] / 2.5, e[:, 0], atol=1e-12)
    np.testing.assert_array_equal(l[:, 1:], e[:, 1:])


def test_identity_permutation_equals_expert():
    acts = np.cos(np.arange(80))
    e = _run(make_expert_line(seed=1), acts, 3)
    l = _run(make_learner_line("permuted", seed=1, perm=np.arange(5)), acts, 3)
    np.testing.assert_array_equal(e, l)


def test_extra_nuisance_shape_and_gain():
    env = make_learner_line("extra-nuisance")
    assert env.state_dim == 7 and env.action_gain == 0.25
    s = _run(env, [1.0])
    assert s[1, 1] == 0.25


@pytest.mark.parametrize("variant", ["permuted", "negated-scaled", "extra-nuisance"])
def test_ground_truth_map_within_bound(variant):
    env = make_learner_line(variant, seed=2)
    W = ground_truth_map(env)
    assert np.abs(W).max() <= 2.5 < 5
    acts = np.tanh(np.arange(40) - 20.0)
    s = _run(env, acts, 1)
    np.testing.assert_allclose(s @ W.T, env.canonical(s)[:, :2], atol=1e-12)


def test_make_env_by_name():
    for name in ENV_NAMES:
        assert make_env(name).spec.domain_name == name
    assert make_env("permuted").spec.domain_name == "learner-line-permuted"
    with pytest.raises(ValueError):
        make_env("hopper")


def test_learner_progress_in_canonical_units():
    for name in ENV_NAMES:
        env = make_env(name)
        gain = 0.25 if "extra" in name else 0.5
        assert scripted_progress(env, 100) == pytest.approx(line_recurrence(gain, 100), abs=1e-12)


def test_step_before_reset_errors():
    with pytest.raises(RuntimeError):
        LineEnv().step(np.zeros((1, 1)))


# -- demos ----------------------------------------------------------------------

def test_gen_expert_demos_shape():
    d = gen_expert_demos(make_expert_line(), 20, 100, seed=0)
    assert len(d.trajectories) == 20
    assert all(len(t) == 101 for t in d.trajectories)
    assert all(t[-1, 0] > 9 for t in d.trajectories)
    assert len(gen_expert_demos(make_expert_line(), 1, 100).trajectories) == 1


def test_gen_expert_demos_deterministic():
    a = gen_expert_demos(make_expert_line(), 3, 20, seed=5)
    b = gen_expert_demos(make_expert_line(), 3, 20, seed=5)
    for x, y in zip(a.trajectories, b.trajectories):
        np.testing.assert_array_equal(x, y)


# -- ordered pairs ----------------------------------------------------------------

@given(st.integers(1, 500), st.sampled_from(list(Side)), st.integers(0, 1000))
def test_ordered_pairs_constraint(n, side, seed):
    p = make_ordered_pairs(n, side, seed).pairs
    assert p.shape == (n, 2)
    assert ((p[:, 1] < p[:, 0]) if side is Side.EXPERT else (p[:, 1] > p[:, 0])).all()
    assert ((p >= 0) & (p <= 1)).all()


def test_ordered_pairs_rate_and_marginals():
    _, rate = make_ordered_pairs(5_000, "expert", seed=0, return_rate=True)
    assert abs(rate - 0.5) < 0.02
    e = make_ordered_pairs(100_000, "expert", seed=1).pairs
    l = make_ordered_pairs(100_000, "learner", seed=1).pairs
    assert abs(e[:, 0].mean() - 2 / 3) < 0.01
    assert abs(l[:, 0].mean() - 1 / 3) < 0.01


def test_ordered_pairs_deterministic_and_validated():
    np.testing.assert_array_equal(make_ordered_pairs(50, "learner", 3).pairs,
                                  make_ordered_pairs(50, "learner", 3).pairs)
    with pytest.raises(ValueError):
        make_ordered_pairs(0, "expert")


# -- finite MDP oracles -----------------------------------------------------------

def _random_policy(rng, S):
    return rng.dirichlet(np.ones(2), size=S)


def test_grid_chain_validation_and_plain_chain():
    with pytest.raises(ValueError):
        make_grid_chain(1)
    with pytest.raises(ValueError):
        make_grid_chain(3, gamma=1.0)
    m = make_grid_chain(4)
    assert m.n_states == 4
    np.testing.assert_allclose(m.P.sum(axis=2), 1.0)


def test_self_loop_occupancy():
    m = FiniteMDP(np.ones((1, 1, 1)), np.ones(1))
    assert exact_occupancy(m, np.ones((1, 1)), 0.9)[0, 0] == pytest.approx(10.0, abs=1e-12)


def test_two_state_cycle_visitation():
    P = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    m = FiniteMDP(P, np.array([1.0, 0.0]))
    np.testing.assert_allclose(state_visitation(m, np.ones((2, 1)), 0.5), [4 / 3, 2 / 3], atol=1e-12)


def test_always_right_concentrates_right():
    m = make_grid_chain(3)
    pol = np.tile([0.0, 1.0], (3, 1))
    d = state_visitation(m, pol, 0.9)
    assert d.argmax() == 2


@given(st.integers(0, 10_000))
def test_occupancy_sums_and_uniform_nuisance(seed):
    r = np.random.default_rng(seed)
    m = make_grid_chain(int(r.integers(2, 6)), int(r.integers(1, 4)))
    pol = _random_policy(r, m.n_states)
    rho = exact_occupancy(m, pol, 0.9)
    assert abs(rho.sum() - 10.0) < 1e-12 * 10
    assert abs(exact_occupancy(m, pol, 0.9, normalized=True).sum() - 1.0) < 1e-12
    # nuisance tag of s' is uniform under every policy
    U = int(m.labels[:, 1].max()) + 1
    tag_mass = np.array([rho[:, m.labels[:, 1] == u].sum() for u in range(U)])
    init_mass = np.array([m.init[m.labels[:, 1] == u].sum() for u in range(U)])
    np.testing.assert_allclose(tag_mass / rho.sum(), init_mass / init_mass.sum(), atol=1e-12)


def test_occupancy_matches_monte_carlo():
    r = np.random.default_rng(0)
    m = make_grid_chain(3, 2)
    pol = _random_policy(r, m.n_states)
    gamma, n, T = 0.9, 100_000, 200
    s = r.choice(m.n_states, size=n, p=m.init)
    acc = np.zeros((n, m.n_states))
    disc = 1.0
    for _ in range(T):
        acc[np.arange(n), s] += disc
        a = (r.random(n) < pol[s, 1]).astype(int)
        cdf = np.cumsum(m.P[a, s], axis=1)
        s = np.minimum((r.random(n)[:, None] > cdf).sum(axis=1), m.n_states - 1)
        disc *= gamma
    mean, se = acc.mean(axis=0), acc.std(axis=0, ddof=1) / np.sqrt(n)
    exact = state_visitation(m, pol, gamma)
    assert (np.abs(mean - exact) <= 3 * se + 1e-9).all()


def test_reward_equivalence_examples():
    m = make_grid_chain(3, 2, 0.9)
    right = np.tile([0.0, 1.0], (m.n_states, 1))
    full, emb, ok = expected_reward_equivalence_check(m, right, lambda s, t: 1.0, 0.9)
    assert full == pytest.approx(10.0, abs=1e-12) and ok
    full, emb, ok = expected_reward_equivalence_check(m, right, lambda s, t: float(t[0] > s[0]), 0.9)
    assert ok and abs(full - emb) <= 1e-12
    _, _, ok = expected_reward_equivalence_check(m, right, lambda s, t: float(t[1] == 1), 0.9)
    assert not ok
