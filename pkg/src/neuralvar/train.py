"""Minibatch training loop shared by the CLI experiments and the continual runner."""

import numpy as np

from . import optim
from .autodiff import backward
from .models import evaluate, forward_loss, loss_and_grads


class OptimizerHandle:
    """One uniform step/evaluate/finalize surface over sgd, adam, psgd and
    their perturb/de-noise (nvrm-) variants."""

    KINDS = ("sgd", "adam", "psgd", "nvrm-sgd", "nvrm-adam")

    def __init__(self, kind, params, lr, momentum=0.0, weight_decay=0.0,
                 beta1=0.9, beta2=0.999, eps=1e-8, noise=None, names=None):
        if kind not in self.KINDS:
            raise optim.ConfigError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.noise = noise if noise is not None else optim.NoiseSpec("gaussian", 0.0)
        if kind in ("sgd", "psgd", "nvrm-sgd"):
            self.state = optim.SgdState(lr=lr, momentum=momentum, weight_decay=weight_decay)
        else:
            self.state = optim.AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                                         weight_decay=weight_decay)
        self.nvrm = None
        if kind.startswith("nvrm"):
            self.nvrm = optim.NvrmState(self.state, self.noise, params, names=names)

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = value

    def step(self, params, grads, rng):
        if self.nvrm is not None:
            optim.nvrm_step(self.nvrm, params, grads, rng)
        elif self.kind == "psgd":
            optim.psgd_step(self.state, self.noise, params, grads, rng)
        elif self.kind == "sgd":
            optim.sgd_step(self.state, params, grads)
        else:
            optim.adam_step(self.state, params, grads)

    def eval_clean(self, params, fn):
        """Run fn at de-noised weights (a no-op wrapper for plain optimizers)."""
        if self.nvrm is not None and self.nvrm.perturbed:
            return optim.with_clean_weights(self.nvrm, params, fn)
        return fn()

    def finalize(self, params):
        if self.nvrm is not None and self.nvrm.perturbed:
            optim.nvrm_finalize(self.nvrm, params)

    def rearm(self, params):
        """Start a new perturbation era (epsilon = 0) at the current weights;
        used at continual task boundaries."""
        if self.nvrm is not None:
            self.nvrm.clean = {n: params[n].data.copy() for n in self.nvrm.names}
            self.nvrm.eps = {n: np.zeros_like(params[n].data) for n in self.nvrm.names}
            self.nvrm.perturbed = True


def iterate_batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def train_epoch(params, config, dataset, opt, rng, batch_size, head=0, penalty_fn=None):
    """One shuffled pass; returns mean minibatch loss (at the live, possibly
    perturbed weights). penalty_fn(tape, base_loss, params) may extend the
    loss (e.g. with an anchoring penalty)."""
    total, batches = 0.0, 0
    for idx in iterate_batches(dataset.n, batch_size, rng):
        xb = dataset.images[idx]
        yb = dataset.labels[idx]
        if penalty_fn is None:
            loss, grads = loss_and_grads(params, config, xb, yb, head=head)
        else:
            params.zero_grad()
            base, tape = forward_loss(params, config, xb, yb, head=head)
            total_loss = penalty_fn(tape, base, params)
            backward(tape, total_loss)
            loss = float(total_loss.data)
            grads = {n: t.grad for n, t in params.items() if t.grad is not None}
        opt.step(params, grads, rng)
        total += loss
        batches += 1
    return total / max(batches, 1)


def subset_accuracy(params, config, dataset, mask, opt, head=0):
    """(overall, clean-subset, noisy-subset) train accuracy at de-noised weights."""
    def _eval(sel=None):
        if sel is None:
            return evaluate(params, config, dataset.images, dataset.labels, head=head)
        return evaluate(params, config, dataset.images[sel], dataset.labels[sel], head=head)

    overall = opt.eval_clean(params, lambda: _eval())
    if mask is None or not mask.any():
        return overall, overall, None
    clean = opt.eval_clean(params, lambda: _eval(~mask))
    noisy = opt.eval_clean(params, lambda: _eval(mask))
    return overall, clean, noisy
