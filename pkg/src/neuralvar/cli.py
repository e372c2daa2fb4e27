"""Config-driven experiment runner.

    neuralvar run --config exp.json [--seed N] [--trials N] [--out PATH]
                  [--format csv|jsonl] [--overwrite] [--precision f32|f64]
    neuralvar make-data --out DIR [--train N] [--test N] [--seed N]

Configs are JSON; flags override file values. Dataset files are looked up in
the config's data_dir or, failing that, $NV_DATA_DIR. Exit codes: 0 success,
2 config error, 3 runtime failure.
"""

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import datagen
from .analysis import (
    NvEstimate,
    dataset_loss,
    estimate_nvr,
    generalization_gap,
    robustness_sweep,
)
from .autodiff import backward, finite_diff_grad
from .continual import ContinualConfig, run_task_sequence
from .data import corrupt_asymmetric, corrupt_symmetric, load_idx, normalize
from .models import (
    FcnConfig,
    ParameterSet,
    Tensor,
    evaluate,
    fcn_init,
    forward_loss,
    load_checkpoint,
    save_checkpoint,
)
from .optim import NoiseSpec, make_rng
from .records import MetricRecord, emit_records
from .train import OptimizerHandle, subset_accuracy, train_epoch

KINDS = ("train", "continual", "robustness", "nv-estimate", "grad-check")

DEFAULTS = {
    "kind": None,
    "data_dir": None,
    "model": {"hidden": [1024, 1024], "heads": 1},
    "optimizer": {
        "name": "sgd", "lr": 0.1, "momentum": 0.0, "beta1": 0.9, "beta2": 0.999,
        "eps": 1e-8, "weight_decay": 0.0, "batch_size": 128, "epochs": 1,
        "lr_decay_every": 0,  # 0 = no decay; otherwise divide lr by 10 every K epochs
    },
    "noise": {"family": "gaussian", "b": 0.0},
    "corruption": {"kind": "none", "rate": 0.0},
    "ewc": {"lambda": 0.0, "fisher_samples": 500},
    "continual": {"kind": "permuted", "num_tasks": 5},
    "train_subset": 0,  # 0 = use the whole train split
    "scales": [0.0, 0.01, 0.012, 0.014, 0.016, 0.018, 0.02],
    "trials_per_scale": 10,
    "nv": {"num_samples": 20},
    "grad_check": {"instances": 100, "tolerance": 1e-4},
    "checkpoint_in": None,
    "checkpoint_out": None,
    "seed": None,
    "trials": 1,
    "out": None,
    "format": "csv",
    "precision": "f64",
}


class ConfigValidationError(ValueError):
    def __init__(self, problems):
        self.problems = problems
        super().__init__("invalid config: " + "; ".join(problems))


def merge_config(file_cfg, overrides):
    cfg = json.loads(json.dumps(DEFAULTS))  # deep copy
    for src in (file_cfg, overrides):
        for k, v in src.items():
            if isinstance(v, dict) and isinstance(cfg.get(k), dict):
                cfg[k].update(v)
            else:
                cfg[k] = v
    return cfg


def validate_config(cfg):
    p = []
    if cfg["kind"] not in KINDS:
        p.append(f"kind must be one of {KINDS}, got {cfg['kind']!r}")
    if cfg["seed"] is None:
        p.append("seed is mandatory")
    if cfg["trials"] < 1:
        p.append("trials must be >= 1")
    o = cfg["optimizer"]
    if o["name"] not in OptimizerHandle.KINDS:
        p.append(f"optimizer.name must be one of {OptimizerHandle.KINDS}")
    for f in ("lr", "momentum", "weight_decay"):
        if o[f] < 0:
            p.append(f"optimizer.{f} must be >= 0")
    if o["batch_size"] < 1 or o["epochs"] < 1:
        p.append("optimizer.batch_size and epochs must be >= 1")
    if cfg["noise"]["family"] not in ("gaussian", "laplace", "uniform"):
        p.append("noise.family must be gaussian|laplace|uniform")
    if cfg["noise"]["b"] < 0:
        p.append("noise.b must be >= 0")
    c = cfg["corruption"]
    if c["kind"] not in ("none", "symmetric", "asymmetric"):
        p.append("corruption.kind must be none|symmetric|asymmetric")
    if not 0.0 <= c["rate"] <= 1.0:
        p.append("corruption.rate must be in [0, 1]")
    if cfg["continual"]["kind"] not in ("permuted", "split"):
        p.append("continual.kind must be permuted|split")
    if cfg["ewc"]["lambda"] < 0:
        p.append("ewc.lambda must be >= 0")
    if cfg["precision"] not in ("f32", "f64"):
        p.append("precision must be f32|f64")
    if cfg["format"] not in ("csv", "jsonl"):
        p.append("format must be csv|jsonl")
    if cfg["kind"] != "grad-check" and not cfg["out"]:
        p.append("out path is required")
    needs_data = cfg["kind"] in ("train", "continual", "nv-estimate", "robustness")
    if needs_data and not (cfg["data_dir"] or os.environ.get("NV_DATA_DIR")):
        p.append("data_dir (or $NV_DATA_DIR) is required")
    if cfg["kind"] in ("robustness", "nv-estimate") and not cfg["checkpoint_in"]:
        p.append(f"{cfg['kind']} requires checkpoint_in")
    if p:
        raise ConfigValidationError(p)


def config_hash(cfg):
    hashed = {k: v for k, v in cfg.items() if k not in ("out", "format")}
    return hashlib.sha256(json.dumps(hashed, sort_keys=True).encode()).hexdigest()[:12]


def _dtype(cfg):
    return np.float64 if cfg["precision"] == "f64" else np.float32


def _load_data(cfg):
    root = cfg["data_dir"] or os.environ["NV_DATA_DIR"]
    dt = _dtype(cfg)
    train = load_idx(os.path.join(root, "train-images-idx3-ubyte"),
                     os.path.join(root, "train-labels-idx1-ubyte"), dtype=dt)
    test = load_idx(os.path.join(root, "t10k-images-idx3-ubyte"),
                    os.path.join(root, "t10k-labels-idx1-ubyte"), dtype=dt)
    train, test = normalize(train, test)
    if cfg["train_subset"]:
        n = min(cfg["train_subset"], train.n)
        train = type(train)(train.images[:n], train.labels[:n], train.num_classes)
    return train, test


def _model_config(cfg, in_width, out_width):
    return FcnConfig(layer_widths=(in_width, *cfg["model"]["hidden"], out_width),
                     heads=cfg["model"]["heads"])


def _noise(cfg):
    return NoiseSpec(cfg["noise"]["family"], cfg["noise"]["b"])


# ---------------------------------------------------------------------------
# experiment loops


def _run_train_trial(cfg, run_id, seed, records):
    rng = make_rng(seed)
    train_ds, test_ds = _load_data(cfg)
    flip_mask = None
    clean_labels = train_ds.labels
    c = cfg["corruption"]
    if c["kind"] == "symmetric":
        labels, flip_mask = corrupt_symmetric(train_ds.labels, c["rate"],
                                              train_ds.num_classes, rng)
        train_ds.labels = labels
    elif c["kind"] == "asymmetric":
        labels, flip_mask = corrupt_asymmetric(train_ds.labels, c["rate"],
                                               train_ds.num_classes, rng)
        train_ds.labels = labels

    config = _model_config(cfg, train_ds.images.shape[1], train_ds.num_classes)
    params = fcn_init(config, rng, dtype=_dtype(cfg))
    o = cfg["optimizer"]
    opt = OptimizerHandle(o["name"], params, lr=o["lr"], momentum=o["momentum"],
                          weight_decay=o["weight_decay"], beta1=o["beta1"],
                          beta2=o["beta2"], eps=o["eps"], noise=_noise(cfg))

    def emit(epoch, metric, value):
        records.append(MetricRecord(run_id, seed, cfg["kind"], epoch, metric,
                                    float(value), time.time()))

    for epoch in range(1, o["epochs"] + 1):
        if o["lr_decay_every"] and epoch > 1 and (epoch - 1) % o["lr_decay_every"] == 0:
            opt.lr /= 10.0
        mean_loss = train_epoch(params, config, train_ds, opt, rng, o["batch_size"])
        train_acc, clean_acc, noisy_acc = subset_accuracy(params, config, train_ds,
                                                          flip_mask, opt)
        test_acc = opt.eval_clean(params, lambda: evaluate(
            params, config, test_ds.images, test_ds.labels))
        emit(epoch, "train_loss", mean_loss)
        emit(epoch, "train_acc", train_acc)
        emit(epoch, "test_acc", test_acc)
        emit(epoch, "generalization_gap", generalization_gap(train_acc, test_acc))
        if flip_mask is not None and flip_mask.any():
            emit(epoch, "clean_subset_train_acc", clean_acc)
            emit(epoch, "noisy_subset_train_acc", noisy_acc)
    opt.finalize(params)
    if cfg["checkpoint_out"]:
        path = cfg["checkpoint_out"]
        if cfg["trials"] > 1:
            path = f"{path}.seed{seed}"
        save_checkpoint(params, path)


def _run_continual_trial(cfg, run_id, seed, records):
    rng = make_rng(seed)
    train_ds, test_ds = _load_data(cfg)
    o = cfg["optimizer"]
    ccfg = ContinualConfig(
        kind=cfg["continual"]["kind"], num_tasks=cfg["continual"]["num_tasks"],
        optimizer=o["name"], lr=o["lr"], momentum=o["momentum"],
        weight_decay=o["weight_decay"], batch_size=o["batch_size"],
        epochs_per_task=o["epochs"], noise=_noise(cfg),
        ewc_lambda=cfg["ewc"]["lambda"], fisher_samples=cfg["ewc"]["fisher_samples"],
        hidden=tuple(cfg["model"]["hidden"]), dtype=_dtype(cfg),
    )
    report, _ = run_task_sequence(ccfg, train_ds, test_ds, rng)
    for (t, j), acc in sorted(report.accuracy.items()):
        records.append(MetricRecord(run_id, seed, cfg["kind"], t, f"acc_task{j}",
                                    float(acc), time.time()))
    base = report.base_task_trace()
    mean = report.mean_accuracy_trace()
    for t in range(report.num_tasks):
        records.append(MetricRecord(run_id, seed, cfg["kind"], t, "base_task_acc",
                                    float(base[t]), time.time()))
        records.append(MetricRecord(run_id, seed, cfg["kind"], t, "mean_acc",
                                    float(mean[t]), time.time()))


def _params_from_checkpoint(path, dtype):
    entries = load_checkpoint(path)
    params = ParameterSet()
    for name, arr in entries.items():
        if not name.startswith("nvrm_eps:"):
            params.add(name, Tensor(arr.astype(dtype)))
    return params


def _run_robustness_trial(cfg, run_id, seed, records):
    rng = make_rng(seed)
    _, test_ds = _load_data(cfg)
    params = _params_from_checkpoint(cfg["checkpoint_in"], _dtype(cfg))
    config = _model_config(cfg, test_ds.images.shape[1], test_ds.num_classes)
    curve = robustness_sweep(params, config, test_ds, cfg["scales"],
                             cfg["trials_per_scale"], rng)
    for i, s in enumerate(curve.scales):
        records.append(MetricRecord(run_id, seed, cfg["kind"], i,
                                    f"mean_acc@{s}", curve.mean_accuracy[i], time.time()))
        records.append(MetricRecord(run_id, seed, cfg["kind"], i,
                                    f"std_acc@{s}", curve.std_accuracy[i], time.time()))


def _run_nv_estimate_trial(cfg, run_id, seed, records):
    rng = make_rng(seed)
    train_ds, _ = _load_data(cfg)
    params = _params_from_checkpoint(cfg["checkpoint_in"], _dtype(cfg))
    config = _model_config(cfg, train_ds.images.shape[1], train_ds.num_classes)
    est = estimate_nvr(params, lambda p: dataset_loss(p, config, train_ds),
                       _noise(cfg), cfg["nv"]["num_samples"], rng)
    for metric, value in (("perturbed_loss", est.perturbed_loss),
                          ("clean_loss", est.clean_loss), ("delta", est.delta),
                          ("stderr", est.stderr)):
        records.append(MetricRecord(run_id, seed, cfg["kind"], 0, metric,
                                    float(value), time.time()))


def _min_kink_distance(params, widths, x):
    """Smallest |pre-activation| over the hidden ReLU layers."""
    h = x
    dist = np.inf
    for i in range(len(widths) - 2):
        z = h @ params[f"w{i}"].data + params[f"b{i}"].data
        dist = min(dist, float(np.abs(z).min()))
        h = np.maximum(z, 0.0)
    return dist


def grad_check(instances, tolerance, seed):
    """Reverse-mode vs central finite differences on random small FCNs.

    Relative error uses max(|ad|, |fd|, 1e-6) in the denominator so dead-ReLU
    zero gradients compare at a fixed absolute floor. Instances whose hidden
    pre-activations sit within 1e-3 of a ReLU kink are redrawn: the loss is
    not differentiable there, so the comparison is meaningless (zero biases
    make exact-zero pre-activations common when a whole layer goes dead).
    """
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(instances):
        while True:
            widths = (int(rng.integers(3, 8)), int(rng.integers(4, 10)),
                      int(rng.integers(4, 10)), int(rng.integers(2, 5)))
            config = FcnConfig(layer_widths=widths)
            params = fcn_init(config, rng)
            for n in params.names:  # break the all-zero bias init
                if n.startswith("b"):
                    params[n].data += 0.1 * rng.normal(size=params[n].data.shape)
            x = rng.normal(size=(int(rng.integers(2, 9)), widths[0]))
            y = rng.integers(0, widths[-1], size=x.shape[0])
            if _min_kink_distance(params, widths, x) > 1e-3:
                break

        def loss_fn(p):
            loss, _ = forward_loss(p, config, x, y)
            return float(loss.data)

        params.zero_grad()
        loss, tape = forward_loss(params, config, x, y)
        backward(tape, loss)
        fd = finite_diff_grad(loss_fn, params, h=1e-5)
        for n, t in params.items():
            denom = np.maximum(np.maximum(np.abs(t.grad), np.abs(fd[n])), 1e-6)
            worst = max(worst, float(np.max(np.abs(t.grad - fd[n]) / denom)))
    return worst, worst < tolerance


def run_experiment(cfg, records=None):
    """Appends to and returns the records list; raises on validation or
    runtime failure (records gathered so far stay in the list)."""
    validate_config(cfg)
    h = config_hash(cfg)
    if records is None:
        records = []
    runner = {
        "train": _run_train_trial,
        "continual": _run_continual_trial,
        "robustness": _run_robustness_trial,
        "nv-estimate": _run_nv_estimate_trial,
    }
    if cfg["kind"] == "grad-check":
        worst, ok = grad_check(cfg["grad_check"]["instances"],
                               cfg["grad_check"]["tolerance"], cfg["seed"])
        print(f"grad-check: max relative error {worst:.3e} "
              f"({'PASS' if ok else 'FAIL'} at {cfg['grad_check']['tolerance']:g})")
        if not ok:
            raise RuntimeError("gradient check failed")
        return records
    for trial in range(cfg["trials"]):
        seed = cfg["seed"] + trial  # documented: trial seeds are base + index
        run_id = f"{h}-{seed}"
        runner[cfg["kind"]](cfg, run_id, seed, records)
    return records


# ---------------------------------------------------------------------------
# entry point


def _meta_path(out):
    return out + ".meta.json"


def _refuse_if_completed(cfg):
    meta = _meta_path(cfg["out"])
    if not os.path.exists(meta):
        return
    with open(meta) as f:
        prev = json.load(f)
    seeds = [cfg["seed"] + t for t in range(cfg["trials"])]
    if prev.get("config_hash") == config_hash(cfg) and set(seeds) & set(prev.get("seeds", [])):
        raise ConfigValidationError(
            [f"output {cfg['out']} already holds this (config, seed) run; use --overwrite"])


def main(argv=None):
    parser = argparse.ArgumentParser(prog="neuralvar", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    runp = sub.add_parser("run", help="run an experiment from a JSON config")
    runp.add_argument("--config", required=True)
    runp.add_argument("--seed", type=int)
    runp.add_argument("--trials", type=int)
    runp.add_argument("--out")
    runp.add_argument("--format", choices=("csv", "jsonl"))
    runp.add_argument("--overwrite", action="store_true")
    runp.add_argument("--precision", choices=("f32", "f64"))

    datap = sub.add_parser("make-data", help="write a synthetic digit corpus as IDX files")
    datap.add_argument("--out", required=True)
    datap.add_argument("--train", type=int, default=60000)
    datap.add_argument("--test", type=int, default=10000)
    datap.add_argument("--seed", type=int, default=12345)

    args = parser.parse_args(argv)

    if args.command == "make-data":
        paths = datagen.write_corpus(args.out, n_train=args.train, n_test=args.test,
                                     seed=args.seed)
        for split, (ip, lp) in paths.items():
            print(f"{split}: {ip} {lp}")
        return 0

    try:
        with open(args.config) as f:
            file_cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    overrides = {k: getattr(args, k) for k in ("seed", "trials", "out", "format", "precision")
                 if getattr(args, k) is not None}
    cfg = merge_config(file_cfg, overrides)

    try:
        validate_config(cfg)
        if cfg["out"] and not args.overwrite:
            _refuse_if_completed(cfg)
    except ConfigValidationError as e:
        for problem in e.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2

    records = []
    try:
        run_experiment(cfg, records)
    except Exception as e:
        if records and cfg["out"]:  # flush whatever completed before the failure
            emit_records(records, cfg["format"], cfg["out"])
        print(f"runtime failure: {e}", file=sys.stderr)
        return 3

    if records:
        emit_records(records, cfg["format"], cfg["out"])
        seeds = sorted({r.seed for r in records})
        with open(_meta_path(cfg["out"]), "w") as f:
            json.dump({"config_hash": config_hash(cfg), "seeds": seeds}, f)
        print(f"wrote {len(records)} records to {cfg['out']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
