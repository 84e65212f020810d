"""Diffusion classification by comparing per-class noise-prediction losses.

For an input latent ``z0`` and a set of candidate labels, draw trial pairs
``(t_j, eps_j)`` and score every candidate ``c`` by the mean of
``||eps_j - eps_hat(alpha_t z0 + sigma_t eps_j, t_j, c)||^2``. The same
pairs are reused for every candidate, so the noise common to all candidates
cancels in score differences. The predicted label is the lowest score, ties
going to the lowest label id.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .rng import make_rng
from .schedule import NoiseSchedule, eps_losses


@dataclass
class ClassificationResult:
    candidates: list[int]
    mean_losses: list[float]
    posterior: list[float]
    predicted: int
    trials_used: list[int]
    survivors: list[list[int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class VoteRecord:
    votes: list[int]
    final: int
    views: list[ClassificationResult] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"votes": self.votes, "final": self.final}


def draw_trials(n: int, dim: int, sched: NoiseSchedule, rng: np.random.Generator):
    """``n`` timesteps uniform in ``1..T`` followed by ``n`` standard-normal noise vectors."""
    t = rng.integers(1, sched.T + 1, n)
    eps = rng.standard_normal((n, dim))
    return t, eps


def trial_losses(denoiser, z0, candidates, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """Loss matrix of shape ``(len(candidates), len(t))`` for shared trials."""
    z0 = np.asarray(z0, dtype=np.float64).reshape(1, -1)
    n = len(t)
    k = len(candidates)
    if k == 0 or n == 0:
        return np.zeros((k, n))
    labels = np.repeat(np.asarray(candidates, dtype=np.int64), n)
    losses = eps_losses(denoiser, z0, labels, np.tile(t, k), np.tile(eps, (k, 1)), sched)
    return losses.reshape(k, n)


def _argmin_lowest(candidates, scores) -> int:
    scores = np.asarray(scores)
    best = scores.min()
    return min(c for c, s in zip(candidates, scores) if s == best)


def _check_candidates(candidates):
    candidates = [int(c) for c in candidates]
    if len(candidates) < 2:
        raise ValueError("need at least two candidate classes")
    if len(set(candidates)) != len(candidates):
        raise ValueError("duplicate candidate classes")
    return candidates


def posterior(mean_losses, prior=None) -> np.ndarray:
    """Bayes posterior with ``exp(-loss)`` standing in for the class likelihood.

    The minimum loss is subtracted before exponentiating.
    """
    losses = np.asarray(mean_losses, dtype=np.float64)
    if losses.size == 0 or not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite and non-empty")
    if prior is None:
        prior = np.full(len(losses), 1.0 / len(losses))
    prior = np.asarray(prior, dtype=np.float64)
    if prior.shape != losses.shape or np.any(prior <= 0) or abs(prior.sum() - 1) > 1e-9:
        raise ValueError("prior must be positive, sum to 1 and match the losses")
    w = prior * np.exp(-(losses - losses.min()))
    return w / w.sum()


def classify_latent(denoiser, z0, candidates, n_trials: int, seed: int, sched: NoiseSchedule,
                    prior=None, paired: bool = True) -> ClassificationResult:
    """Score each candidate on ``n_trials`` trials and pick the lowest mean loss.

    With ``paired=False`` every candidate gets its own independent trials;
    that mode exists only to measure what pairing buys.
    """
    candidates = _check_candidates(candidates)
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    z0 = np.asarray(z0, dtype=np.float64).reshape(-1)
    rng = make_rng(seed, "trials")
    if paired:
        t, eps = draw_trials(n_trials, len(z0), sched, rng)
        losses = trial_losses(denoiser, z0, candidates, t, eps, sched)
    else:
        rows = []
        for c in candidates:
            t, eps = draw_trials(n_trials, len(z0), sched, rng)
            rows.append(trial_losses(denoiser, z0, [c], t, eps, sched)[0])
        losses = np.stack(rows)
    means = losses.mean(axis=1)
    return ClassificationResult(
        candidates=candidates,
        mean_losses=means.tolist(),
        posterior=posterior(means, prior).tolist(),
        predicted=_argmin_lowest(candidates, means),
        trials_used=[n_trials] * len(candidates),
        survivors=[candidates],
    )


def check_stage_schedule(stages, n_candidates: int | None = None) -> list[tuple[int, int]]:
    stages = [(int(n), int(k)) for n, k in stages]
    if not stages:
        raise ValueError("empty stage schedule")
    for n, k in stages:
        if n < 1 or k < 1:
            raise ValueError(f"stage ({n}, {k}): trials and keep must be >= 1")
    keeps = [k for _, k in stages]
    if any(b >= a for a, b in zip(keeps, keeps[1:])):
        raise ValueError(f"keep counts must be strictly decreasing, got {keeps}")
    return stages


def classify_adaptive(denoiser, z0, candidates, stages, seed: int, sched: NoiseSchedule, prior=None) -> ClassificationResult:
    """Successive halving over candidates.

    Each stage ``(trials, keep)`` draws ``trials`` fresh shared pairs, scores
    the surviving candidates on them, and keeps the ``keep`` candidates with
    the lowest running mean (accumulated over all stages so far). Pruned
    candidates report the running mean they were pruned with.
    """
    candidates = _check_candidates(candidates)
    stages = check_stage_schedule(stages)
    z0 = np.asarray(z0, dtype=np.float64).reshape(-1)
    rng = make_rng(seed, "trials")
    total = dict.fromkeys(candidates, 0.0)
    count = dict.fromkeys(candidates, 0)
    alive = list(candidates)
    history = [list(alive)]
    for n, keep in stages:
        t, eps = draw_trials(n, len(z0), sched, rng)
        losses = trial_losses(denoiser, z0, alive, t, eps, sched)
        for c, row in zip(alive, losses):
            total[c] += row.sum()
            count[c] += n
        means = np.array([total[c] / count[c] for c in alive])
        order = np.lexsort((np.array(alive), means))
        alive = sorted(alive[i] for i in order[: min(keep, len(alive))])
        history.append(list(alive))
    means = np.array([total[c] / count[c] for c in candidates])
    final_means = [total[c] / count[c] for c in alive]
    return ClassificationResult(
        candidates=candidates,
        mean_losses=means.tolist(),
        posterior=posterior(means, prior).tolist(),
        predicted=_argmin_lowest(alive, final_means),
        trials_used=[count[c] for c in candidates],
        survivors=history,
    )


def threshold_vote(votes) -> int:
    """Binary rule: 1 when at least half of the votes are 1."""
    votes = [int(v) for v in votes]
    if not votes:
        raise ValueError("no votes")
    if any(v not in (0, 1) for v in votes):
        raise ValueError("binary votes must be 0 or 1")
    return int(2 * sum(votes) >= len(votes))


def majority_vote(votes, n_classes: int | None = None) -> int:
    """Most common vote, ties to the lowest id.

    With ``n_classes == 2`` this is the threshold rule instead, so a tie
    goes to class 1 (the positive class).
    """
    votes = [int(v) for v in votes]
    if not votes:
        raise ValueError("no votes")
    if n_classes == 2:
        return threshold_vote(votes)
    counts = np.bincount(votes, minlength=n_classes or 0)
    return int(np.argmax(counts))


def image_vector(pixels) -> np.ndarray:
    """Depth pixels in [0, 1] mapped to [-1, 1] and flattened."""
    return 2.0 * np.asarray(pixels, dtype=np.float64).reshape(-1) - 1.0


def classify_multiview(model2d, views, candidates, n_trials: int, seed: int, sched: NoiseSchedule,
                       positive: int | None = None) -> VoteRecord:
    """Classify every view on its own and combine by vote.

    Every view uses the same trial seed. With two candidates the views vote
    positive or negative and the threshold rule decides, so a tie goes to
    ``positive``. It defaults to the larger id, which makes plain 0/1 votes
    follow the rule directly; pass ``positive=c`` for a (c, not-c) pair.
    """
    if not views:
        raise ValueError("no views")
    sizes = {np.asarray(getattr(v, "pixels", v)).shape for v in views}
    if len(sizes) != 1:
        raise ValueError(f"inconsistent view sizes {sorted(sizes)}")
    candidates = _check_candidates(candidates)
    results = [classify_latent(model2d, image_vector(getattr(v, "pixels", v)), candidates, n_trials, seed, sched)
               for v in views]
    votes = [r.predicted for r in results]
    if len(candidates) == 2:
        positive = max(candidates) if positive is None else int(positive)
        if positive not in candidates:
            raise ValueError(f"positive class {positive} is not a candidate")
        negative = candidates[0] if candidates[1] == positive else candidates[1]
        final = positive if threshold_vote([int(v == positive) for v in votes]) else negative
    else:
        final = majority_vote(votes)
    return VoteRecord(votes=votes, final=final, views=results)
