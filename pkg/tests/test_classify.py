import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import score_difference_spread, vote_oracle
from dc3do.classify import (
    check_stage_schedule,
    classify_adaptive,
    classify_latent,
    classify_multiview,
    draw_trials,
    majority_vote,
    posterior,
    threshold_vote,
    trial_losses,
)
from dc3do.nets import ModelDims, create_model
from dc3do.rng import make_rng
from dc3do.schedule import make_schedule

SCHED = make_schedule(1000)


def exact_for(c_star, z0):
    """Recovers the true noise for class c_star, predicts zero for every other class."""
    z0 = np.asarray(z0, dtype=np.float64)

    def f(z_t, t, c):
        eps = (z_t - SCHED.alpha[t - 1][:, None] * z0) / SCHED.sigma[t - 1][:, None]
        return np.where((np.asarray(c) == c_star)[:, None], eps, 0.0)

    return f


@pytest.mark.parametrize("c_star", [0, 2, 3])
def test_oracle_denoiser_always_wins(c_star):
    rng = np.random.default_rng(c_star)
    for seed in range(10):
        z0 = rng.normal(size=6)
        r = classify_latent(exact_for(c_star, z0), z0, [0, 1, 2, 3], 4, seed, SCHED)
        assert r.predicted == c_star
        assert r.mean_losses[r.candidates.index(c_star)] == pytest.approx(0, abs=1e-18)


def test_identical_embeddings_tie_to_lowest():
    model = create_model(ModelDims(d_z=4, hidden=8, n_classes=3, T=1000), SCHED, 0)
    model.params["den.embed"][2] = model.params["den.embed"][1]
    r = classify_latent(model, np.ones(4), [2, 1], 8, 0, SCHED)
    assert r.mean_losses[0] == r.mean_losses[1]
    assert r.predicted == 1


def test_deterministic_and_schema():
    model = create_model(ModelDims(d_z=4, hidden=8, n_classes=3, T=1000), SCHED, 0)
    a = classify_latent(model, np.ones(4), [0, 1, 2], 1, 7, SCHED)
    assert a == classify_latent(model, np.ones(4), [0, 1, 2], 1, 7, SCHED)
    d = a.to_dict()
    assert set(d) >= {"candidates", "mean_losses", "posterior", "predicted", "trials_used"}
    assert sum(d["posterior"]) == pytest.approx(1, abs=1e-9)
    assert d["trials_used"] == [1, 1, 1]


def test_paired_trials_are_shared():
    seen = []

    def spy(z_t, t, c):
        seen.append((np.asarray(t).copy(), np.asarray(c).copy()))
        return np.zeros_like(z_t)

    classify_latent(spy, np.zeros(3), [0, 1, 2], 5, 1, SCHED)
    (t, c), = seen
    assert np.array_equal(t[:5], t[5:10]) and np.array_equal(t[:5], t[10:])
    t_ref, _ = draw_trials(5, 3, SCHED, make_rng(1, "trials"))
    assert np.array_equal(t[:5], t_ref)


@pytest.mark.parametrize("cands, n", [([0], 4), ([], 4), ([0, 0], 4), ([0, 1], 0)])
def test_bad_arguments(cands, n):
    with pytest.raises(ValueError):
        classify_latent(lambda z, t, c: z, np.zeros(2), cands, n, 0, SCHED)


def test_shared_per_trial_term_cancels():
    # a loss component common to every candidate on a trial shifts all scores
    # equally, so score differences and the winner are unchanged
    model = create_model(ModelDims(d_z=4, hidden=8, n_classes=3, T=1000), SCHED, 1)
    rng = np.random.default_rng(0)
    z0 = rng.normal(size=4)
    t, eps = draw_trials(32, 4, SCHED, rng)
    base = trial_losses(model, z0, [0, 1, 2], t, eps, SCHED)
    shifted = base + rng.normal(scale=50, size=32)[None, :]
    for a, b in itertools.combinations(range(3), 2):
        assert (shifted[a] - shifted[b]).mean() == pytest.approx((base[a] - base[b]).mean(), abs=1e-9)
    assert np.argmin(shifted.mean(1)) == np.argmin(base.mean(1))


def test_summation_order_independent():
    model = create_model(ModelDims(d_z=8, hidden=16, n_classes=3, T=1000), SCHED, 2)
    rng = np.random.default_rng(1)
    z0 = rng.normal(size=8)
    t, eps = draw_trials(64, 8, SCHED, rng)
    batched = trial_losses(model, z0, [0, 1, 2], t, eps, SCHED).mean(axis=1)
    for c, m in zip([0, 1, 2], batched):
        serial = 0.0
        for j in reversed(range(64)):
            serial += float(trial_losses(model, z0, [c], t[j : j + 1], eps[j : j + 1], SCHED)[0, 0])
        assert serial / 64 == pytest.approx(m, abs=1e-9)


def test_paired_sampling_reduces_variance(trained_model, toy_data, sched):
    z0 = trained_model.encode(toy_data[0][0])
    paired = score_difference_spread(trained_model, z0, [0, 1], 16, 100, sched, paired=True)
    indep = score_difference_spread(trained_model, z0, [0, 1], 16, 100, sched, paired=False)
    assert indep >= 2 * paired


# ---------------------------------------------------------------- posterior


def test_posterior_examples():
    assert np.allclose(posterior([3.0, 3.0, 3.0]), 1 / 3)
    p = posterior([0.0, 1000.0])
    assert abs(p[0] - 1) <= 1e-9 and p[1] <= 1e-9
    assert np.allclose(posterior([2.0, 2.0], [0.9, 0.1]), [0.9, 0.1])


@pytest.mark.parametrize("losses, prior", [([np.nan, 1], None), ([np.inf, 1], None), ([], None),
                                           ([1, 2], [0.5, 0.6]), ([1, 2], [1.0, 0.0]), ([1, 2], [1.0])])
def test_posterior_errors(losses, prior):
    with pytest.raises(ValueError):
        posterior(losses, prior)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=8))
def test_posterior_properties(losses):
    p = posterior(losses)
    assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-9
    assert p[np.argmin(losses)] == p.max()


# ---------------------------------------------------------------- adaptive


def stage_oracle(h, candidates, stages, seed):
    """Plain re-implementation of successive pruning with per-trial losses h[c](t)."""
    rng = make_rng(seed, "trials")
    total = {c: 0.0 for c in candidates}
    count = {c: 0 for c in candidates}
    alive, history = list(candidates), [list(candidates)]
    for n, keep in stages:
        t, _ = draw_trials(n, 3, SCHED, rng)
        for c in alive:
            total[c] += sum(h[c](tj) for tj in t)
            count[c] += n
        alive = sorted(sorted(alive, key=lambda c: (total[c] / count[c], c))[:keep])
        history.append(alive)
    return history, count


def t_dependent_denoiser(h):
    # returns eps + sqrt(h_c(t)) e_0, so the trial loss is exactly h_c(t)
    def wrapped(z0):
        def g(z_t, t, c):
            eps = (z_t - SCHED.alpha[t - 1][:, None] * z0) / SCHED.sigma[t - 1][:, None]
            bump = np.array([np.sqrt(h[int(ci)](int(ti))) for ci, ti in zip(c, t)])
            out = eps.copy()
            out[:, 0] += bump
            return out
        return g

    return wrapped


def test_adaptive_matches_hand_simulation():
    h = {0: lambda t: t / 1000, 1: lambda t: 0.5, 2: lambda t: 1 - t / 1000}
    z0 = np.zeros(3)
    stages = [(2, 2), (2, 1)]
    for seed in range(20):
        r = classify_adaptive(t_dependent_denoiser(h)(z0), z0, [0, 1, 2], stages, seed, SCHED)
        history, count = stage_oracle(h, [0, 1, 2], stages, seed)
        assert r.survivors == history
        assert r.trials_used == [count[c] for c in [0, 1, 2]]
        assert r.predicted == history[-1][0]


def test_adaptive_single_stage_reduces_to_plain():
    model = create_model(ModelDims(d_z=4, hidden=8, n_classes=3, T=1000), SCHED, 3)
    z0 = np.random.default_rng(0).normal(size=4)
    for seed in range(5):
        a = classify_adaptive(model, z0, [0, 1, 2], [(12, 1)], seed, SCHED)
        b = classify_latent(model, z0, [0, 1, 2], 12, seed, SCHED)
        assert a.predicted == b.predicted
        np.testing.assert_allclose(a.mean_losses, b.mean_losses, rtol=1e-12)


def test_adaptive_evaluation_budget():
    calls = []

    def counting(z_t, t, c):
        calls.append(len(z_t))
        return np.zeros_like(z_t) + np.asarray(c)[:, None]

    classify_adaptive(counting, np.zeros(3), [0, 1, 2, 3], [(4, 2), (4, 1)], 0, SCHED)
    assert sum(calls) == 4 * 4 + 4 * 2 < 8 * 4
    calls.clear()
    classify_adaptive(counting, np.zeros(3), [0, 1, 2, 3], [(8, 1)], 0, SCHED)
    assert sum(calls) == 8 * 4


@pytest.mark.parametrize("stages", [[], [(2, 2), (2, 2)], [(2, 1), (2, 2)], [(0, 1)], [(2, 0)]])
def test_bad_stage_schedules(stages):
    with pytest.raises(ValueError):
        check_stage_schedule(stages)


# ---------------------------------------------------------------- votes


def test_vote_examples():
    assert majority_vote([1, 1, 0, 0, 1, 1], 2) == 1
    assert majority_vote([1, 1, 1, 0, 0, 0], 2) == 1
    assert majority_vote([2, 0, 2, 1]) == 2
    assert majority_vote([2, 0, 0, 2, 1], 3) == 0  # multiway tie goes low
    with pytest.raises(ValueError):
        majority_vote([])


def test_vote_exhaustive_binary_n6():
    for votes in itertools.product([0, 1], repeat=6):
        assert majority_vote(list(votes), 2) == vote_oracle(votes) == threshold_vote(votes)


def sign_views(pattern, size=8):
    # huge pixel magnitudes keep the sign of z_t readable at every timestep
    return [np.full((size, size), 1e6 if v else -1e6) for v in pattern]


def sign_oracle(z_t, t, c):
    winner = (z_t.mean(axis=1) > 0).astype(int)
    return np.where((np.asarray(c) == winner)[:, None], 0.0, 10.0) * np.ones_like(z_t)


@pytest.mark.parametrize("cands", [[0, 1], [1, 0]])
def test_multiview_threshold_rule(cands):
    rec = classify_multiview(sign_oracle, sign_views([1, 1, 1, 0, 0, 0]), cands, 4, 0, SCHED)
    assert rec.votes == [1, 1, 1, 0, 0, 0] and rec.final == 1
    rec = classify_multiview(sign_oracle, sign_views([1, 1, 0, 0, 0, 0]), cands, 4, 0, SCHED)
    assert rec.final == 0
    rec = classify_multiview(sign_oracle, sign_views([1, 1, 1, 0, 0, 0]), cands, 4, 0, SCHED, positive=0)
    assert rec.final == 0


def test_multiview_identical_and_single_views():
    model = create_model(ModelDims(d_z=64, hidden=8, n_classes=3, T=1000), SCHED, 5)
    view = np.random.default_rng(0).random((8, 8))
    single = classify_latent(model, 2 * view.reshape(-1) - 1, [0, 1, 2], 6, 3, SCHED).predicted
    assert classify_multiview(model, [view] * 5, [0, 1, 2], 6, 3, SCHED).final == single
    assert classify_multiview(model, [view], [0, 1, 2], 6, 3, SCHED).final == single


def test_multiview_errors():
    with pytest.raises(ValueError):
        classify_multiview(sign_oracle, [], [0, 1], 2, 0, SCHED)
    with pytest.raises(ValueError, match="inconsistent"):
        classify_multiview(sign_oracle, [np.zeros((8, 8)), np.zeros((16, 16))], [0, 1], 2, 0, SCHED)
    with pytest.raises(ValueError):
        classify_multiview(sign_oracle, sign_views([1]), [0, 1], 2, 0, SCHED, positive=5)
