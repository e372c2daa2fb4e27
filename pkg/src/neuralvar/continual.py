"""Continual learning over permuted/split task sequences, with optional
elastic weight consolidation (EWC)."""

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .autodiff import Tensor, backward, add
from .data import make_permuted_tasks, make_split_tasks, task_dataset
from .models import FcnConfig, evaluate, fcn_init, forward_loss
from .optim import NoiseSpec
from .train import OptimizerHandle, train_epoch


@dataclass
class EwcAnchor:
    """Snapshot of weights after a task plus their diagonal Fisher importance."""

    anchor: dict  # name -> weight array copy
    fisher: dict  # name -> importance array, >= 0
    lam: float


@dataclass
class ContinualReport:
    """accuracy[(trained_through, task)] = test accuracy of `task` after the
    model finished training task index `trained_through`."""

    num_tasks: int
    accuracy: dict = field(default_factory=dict)

    def record(self, trained_through, task, acc):
        self.accuracy[(trained_through, task)] = acc

    def base_task_trace(self):
        return [self.accuracy[(t, 0)] for t in range(self.num_tasks)]

    def mean_accuracy_trace(self):
        return [
            float(np.mean([self.accuracy[(t, j)] for j in range(t + 1)]))
            for t in range(self.num_tasks)
        ]

    def to_jsonl(self, path):
        with open(path, "w") as f:
            for (t, j), acc in sorted(self.accuracy.items()):
                f.write(json.dumps({"trained_through": t, "task": j, "accuracy": acc}) + "\n")


def fisher_diagonal(params, config, dataset, num_samples, rng, head=0):
    """Empirical diagonal Fisher: mean squared gradient of the log-likelihood
    at the observed label, over sampled training points.

    Per-sample FCN gradients factor as (input activation) x (output delta)
    per layer, so the mean of squared gradients is a single matmul of squared
    activations against squared deltas — no per-sample loop.
    """
    if num_samples < 1 or num_samples > dataset.n:
        raise ValueError(f"num_samples must be in [1, {dataset.n}]")
    idx = rng.choice(dataset.n, size=num_samples, replace=False)
    x = dataset.images[idx]
    y = dataset.labels[idx]

    num_hidden = len(config.layer_widths) - 2
    acts = [x]  # layer inputs
    zs = []
    h = x
    for i in range(num_hidden):
        z = h @ params[f"w{i}"].data + params[f"b{i}"].data
        zs.append(z)
        h = np.maximum(z, 0.0)
        acts.append(h)
    logits = h @ params[f"head{head}_w"].data + params[f"head{head}_b"].data

    m = logits.max(axis=1, keepdims=True)
    ez = np.exp(logits - m)
    probs = ez / ez.sum(axis=1, keepdims=True)
    delta = probs
    delta[np.arange(num_samples), y] -= 1.0  # d(-log p_y)/d(logits), per sample

    fisher = {}
    fisher[f"head{head}_w"] = (acts[-1] ** 2).T @ (delta**2) / num_samples
    fisher[f"head{head}_b"] = (delta**2).sum(axis=0) / num_samples
    back = delta @ params[f"head{head}_w"].data.T
    for i in reversed(range(num_hidden)):
        dz = np.where(zs[i] > 0.0, back, 0.0)
        fisher[f"w{i}"] = (acts[i] ** 2).T @ (dz**2) / num_samples
        fisher[f"b{i}"] = (dz**2).sum(axis=0) / num_samples
        if i:
            back = dz @ params[f"w{i}"].data.T
    return fisher


class EwcPenalty:
    """Sum over anchors of (lam/2) * sum_i F_i (theta_i - theta*_i)^2.

    The per-anchor quadratics are folded once into a single equivalent
    quadratic per parameter (a = sum lam*F, b = sum lam*F*theta*,
    c = sum lam*F*theta*^2), so the per-batch cost is independent of how many
    tasks have been anchored.
    """

    def __init__(self, anchors):
        self.terms = {}  # name -> (a, b, c)
        for anc in anchors:
            for n, fisher in anc.fisher.items():
                f = anc.lam * fisher
                th = anc.anchor[n]
                if n in self.terms:
                    a, b, c = self.terms[n]
                    self.terms[n] = (a + f, b + f * th, c + f * th * th)
                else:
                    self.terms[n] = (f, f * th, f * th * th)

    def node(self, tape, params):
        """Penalty as a scalar Tensor on the live tape, or None if empty."""
        if not self.terms:
            return None
        total = 0.0
        grads = []
        inputs = []
        for n, (a, b, c) in self.terms.items():
            if n not in params:
                continue
            val, g = kernels.ewc_penalty(params[n].data, a, b, c)
            total += val
            grads.append(g)
            inputs.append(params[n])
        out = Tensor(np.asarray(total))

        def bwd(gout):
            s = float(gout)
            return grads if s == 1.0 else [g * s for g in grads]

        return tape.record(out, inputs, bwd)

    def apply(self, tape, base_loss, params):
        penalty = self.node(tape, params)
        return base_loss if penalty is None else add(tape, base_loss, penalty)


def ewc_penalty(tape, params, anchors):
    """Aggregated EWC penalty on the live tape (see EwcPenalty)."""
    return EwcPenalty(anchors).node(tape, params)


def ewc_loss(tape, base_loss, params, anchors):
    penalty = ewc_penalty(tape, params, anchors)
    return base_loss if penalty is None else add(tape, base_loss, penalty)


@dataclass
class ContinualConfig:
    kind: str = "permuted"  # or "split"
    num_tasks: int = 5
    optimizer: str = "adam"  # adam | nvrm-adam | sgd | nvrm-sgd
    lr: float = 1e-3
    momentum: float = 0.0
    weight_decay: float = 1e-4
    batch_size: int = 256
    epochs_per_task: int = 1
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec("gaussian", 0.0))
    ewc_lambda: float = 0.0
    fisher_samples: int = 500
    hidden: tuple = (1024, 1024)
    dtype: type = np.float64
    # which test accuracies to compute: "all" = every seen task after every
    # task (full lower triangle), "own+final" = each task right after training
    # it plus everything after the last task, "final" = last task only
    eval_mode: str = "all"


def run_task_sequence(cfg, train_ds, test_ds, rng, task_cache=None):
    """Train tasks in order; after each task, de-noise and evaluate every
    already-seen task's test split. Returns (ContinualReport, params).

    task_cache: optional dict shared across runs on the same datasets whose
    seeds draw identical task sequences; memoizes the per-task data views
    (which are pure functions of dataset + transform) to skip re-permuting.
    Entries are keyed on the transform itself, so a mismatched sequence
    misses rather than corrupts."""
    d = train_ds.images.shape[1]
    if cfg.kind == "permuted":
        seq = make_permuted_tasks(d, cfg.num_tasks, rng)
        heads = 1
        out_width = train_ds.num_classes
    elif cfg.kind == "split":
        pairs = [(2 * i, 2 * i + 1) for i in range(cfg.num_tasks)]
        seq = make_split_tasks(pairs)
        heads = cfg.num_tasks
        out_width = 2
    else:
        raise ValueError(f"unknown continual kind {cfg.kind!r}")
    if cfg.eval_mode not in ("all", "own+final", "final"):
        raise ValueError(f"unknown eval_mode {cfg.eval_mode!r}")

    def get_task(ds, tag, t):
        if task_cache is None:
            return task_dataset(seq, ds, t)
        if seq.kind == "permuted":
            key = (tag, t, seq.permutations[t].tobytes())
        else:
            key = (tag, t, seq.class_pairs[t])
        hit = task_cache.get(key)
        if hit is None:
            hit = task_cache[key] = task_dataset(seq, ds, t)
        return hit

    config = FcnConfig(layer_widths=(d, *cfg.hidden, out_width), heads=heads)
    params = fcn_init(config, rng, dtype=cfg.dtype)
    trunk = [n for n in params.names if not n.startswith("head")]

    report = ContinualReport(num_tasks=cfg.num_tasks)
    anchors = []
    opt = None
    for t in range(cfg.num_tasks):
        task_train, head = get_task(train_ds, "train", t)
        trainable = trunk + [f"head{head}_w", f"head{head}_b"]
        # split tasks get a fresh optimizer; permuted keeps one across tasks
        if opt is None or cfg.kind == "split":
            opt = OptimizerHandle(
                cfg.optimizer, params, lr=cfg.lr, momentum=cfg.momentum,
                weight_decay=cfg.weight_decay, noise=cfg.noise, names=trainable,
            )
        else:
            opt.rearm(params)

        penalty_fn = None
        if anchors:
            penalty_fn = EwcPenalty(anchors).apply  # aggregated once per task
        for _ in range(cfg.epochs_per_task):
            train_epoch(params, config, task_train, opt, rng, cfg.batch_size,
                        head=head, penalty_fn=penalty_fn)

        # de-noise before anchoring and evaluation
        opt.finalize(params)
        if cfg.ewc_lambda > 0:
            fisher = fisher_diagonal(params, config, task_train,
                                     min(cfg.fisher_samples, task_train.n), rng, head=head)
            anchor = {n: params[n].data.copy() for n in fisher}
            anchors.append(EwcAnchor(anchor=anchor, fisher=fisher, lam=cfg.ewc_lambda))

        if cfg.eval_mode == "all" or t == cfg.num_tasks - 1:
            targets = range(t + 1)
        elif cfg.eval_mode == "own+final":
            targets = (t,)
        else:
            targets = ()
        for j in targets:
            task_test, head_j = get_task(test_ds, "test", j)
            acc = evaluate(params, config, task_test.images, task_test.labels, head=head_j)
            report.record(t, j, acc)
    return report, params
