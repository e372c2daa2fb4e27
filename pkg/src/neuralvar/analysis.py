"""Evaluators for perturbation flatness, the Gaussian KL term, the PAC-Bayes
bound, and the weight-noise robustness sweep."""

import warnings
from dataclasses import dataclass

import numpy as np

from .models import evaluate, forward_loss
from .optim import NoiseSpec, sample_noise


@dataclass
class NvEstimate:
    b: float
    family: str
    perturbed_loss: float  # Monte-Carlo mean of loss at theta + eps
    clean_loss: float
    delta: float  # |perturbed_loss - clean_loss|
    num_samples: int
    stderr: float
    skipped: int = 0  # perturbations that produced a non-finite loss


@dataclass
class RobustnessCurve:
    scales: list
    mean_accuracy: list
    std_accuracy: list
    trials: int


def dataset_loss(params, config, dataset, head=0, batch_size=1000):
    """Mean cross-entropy over a full dataset, streamed in batches."""
    total = 0.0
    for i in range(0, dataset.n, batch_size):
        xb = dataset.images[i : i + batch_size]
        yb = dataset.labels[i : i + batch_size]
        loss, _ = forward_loss(params, config, xb, yb, head=head)
        total += float(loss.data) * xb.shape[0]
    return total / dataset.n


def estimate_nvr(params, loss_fn, noise, num_samples, rng):
    """Monte-Carlo estimate of the expected loss under weight noise.

    loss_fn(params) -> scalar is evaluated at `num_samples` independently
    perturbed copies of the weights; the weights are restored bit-identically.
    Non-finite draws are excluded with a warning.
    """
    if num_samples < 2:
        raise ValueError("num_samples must be >= 2")
    clean = float(loss_fn(params))
    if noise.b == 0.0:
        return NvEstimate(noise.b, noise.family, clean, clean, 0.0, num_samples, 0.0)
    orig = {n: t.data for n, t in params.items()}
    shapes = params.shapes()
    draws = []
    skipped = 0
    try:
        for _ in range(num_samples):
            eps = sample_noise(noise, shapes, rng, orig[next(iter(orig))].dtype)
            for n, t in params.items():
                t.data = orig[n] + eps[n]
            val = float(loss_fn(params))
            if np.isfinite(val):
                draws.append(val)
            else:
                skipped += 1
    finally:
        for n, t in params.items():
            t.data = orig[n]
    if skipped:
        warnings.warn(f"excluded {skipped} non-finite perturbed-loss draws")
    if len(draws) < 2:
        raise ArithmeticError("fewer than 2 finite perturbed-loss draws")
    draws = np.array(draws)
    mean = float(draws.mean())
    stderr = float(draws.std(ddof=1) / np.sqrt(len(draws)))
    return NvEstimate(noise.b, noise.family, mean, clean,
                      abs(mean - clean), len(draws), stderr, skipped)


def estimate_nv_delta(params, loss_fn, b, num_samples, rng):
    """(delta, confidence half-width): |E[L(theta+eps)] - L(theta)| under
    gaussian noise of scale b, with a 3-stderr half-width."""
    est = estimate_nvr(params, loss_fn, NoiseSpec("gaussian", b), num_samples, rng)
    return est.delta, 3.0 * est.stderr


def robustness_sweep(params, config, test_dataset, scales, trials, rng, head=0):
    """Mean/std test accuracy under isotropic gaussian weight noise, per scale.

    Weights are restored exactly after every trial.
    """
    scales = list(scales)
    if any(s2 <= s1 for s1, s2 in zip(scales, scales[1:])):
        raise ValueError("scales must be strictly increasing")
    orig = {n: t.data for n, t in params.items()}
    shapes = params.shapes()
    means, stds = [], []
    try:
        for s in scales:
            accs = []
            for _ in range(trials):
                if s > 0:
                    eps = sample_noise(NoiseSpec("gaussian", s), shapes, rng,
                                       orig[next(iter(orig))].dtype)
                    for n, t in params.items():
                        t.data = orig[n] + eps[n]
                else:
                    for n, t in params.items():
                        t.data = orig[n]
                accs.append(evaluate(params, config, test_dataset.images,
                                     test_dataset.labels, head=head))
            means.append(float(np.mean(accs)))
            stds.append(float(np.std(accs)))
    finally:
        for n, t in params.items():
            t.data = orig[n]
    return RobustnessCurve(scales, means, stds, trials)


def kl_gaussian_posterior_prior(theta_star, b, sigma):
    """KL( N(theta*, b^2 I) || N(0, sigma^2 I) ) in closed form:
    sum_i [ log(sigma/b) + (b^2 + theta*_i^2) / (2 sigma^2) - 1/2 ]."""
    if b <= 0 or sigma <= 0:
        raise ValueError("b and sigma must be positive")
    theta = np.asarray(theta_star, dtype=np.float64).ravel()
    n = theta.size
    return float(n * (np.log(sigma / b) + b**2 / (2 * sigma**2) - 0.5)
                 + np.sum(theta**2) / (2 * sigma**2))


def pac_bayes_bound(empirical_risk, kl, m, confidence_delta, nv_delta=0.0):
    """empirical_risk + 4 sqrt( (kl + ln(2m/Delta)) / m ) + nv_delta."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if not 0.0 < confidence_delta < 1.0:
        raise ValueError("confidence_delta must be in (0, 1)")
    if kl < 0:
        raise ValueError("kl must be >= 0")
    return float(empirical_risk + 4.0 * np.sqrt((kl + np.log(2.0 * m / confidence_delta)) / m)
                 + nv_delta)


def generalization_gap(train_accuracy, test_accuracy):
    for v in (train_accuracy, test_accuracy):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"accuracy {v} outside [0, 1]")
    return train_accuracy - test_accuracy
