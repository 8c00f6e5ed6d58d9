"""Command line entry point: ``deepthink <subcommand> [--config PATH] ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import diagnostics
from .act import ActConfig, act_run
from .config import RunConfig, load_run_config
from .data import (
    CorruptionSpec,
    ImageBatch,
    SynthSpec,
    corrupt,
    load_dataset,
    rotate_and_label,
    synth_dataset,
    write_dtc1,
)
from .errors import DeepThinkError
from .halt_estimator import aux_likelihoods, estimate_curve, report, write_curve_csv
from .network import DeepThinkNet, NetConfig, forward_iterate
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("deepthink")

NUM_CLASSES = {"cifar10": 10, "cifar100": 100}


def _load_paths(cfg: RunConfig, key: str) -> ImageBatch:
    path = cfg.require_path(key)
    return load_dataset(path, cfg.dataset)


def _training_data(cfg: RunConfig) -> ImageBatch:
    if cfg.dataset == "synthetic":
        return synth_dataset(_synth_spec(cfg, cfg.synth_samples, cfg.seed))
    return _load_paths(cfg, "train_path")


def _test_data(cfg: RunConfig) -> ImageBatch:
    if cfg.dataset == "synthetic":
        return synth_dataset(_synth_spec(cfg, cfg.synth_test_samples, cfg.seed + 1000))
    return _load_paths(cfg, "test_path")


def _synth_spec(cfg: RunConfig, n: int, seed: int) -> SynthSpec:
    return SynthSpec(
        num_classes=cfg.synth_classes,
        num_samples=n,
        size=cfg.synth_size,
        margin=cfg.synth_margin,
        gradient=cfg.synth_gradient,
        seed=seed,
    )


def _num_classes(cfg: RunConfig, data: ImageBatch) -> int:
    if cfg.num_classes is not None:
        return cfg.num_classes
    if cfg.dataset == "synthetic":
        return cfg.synth_classes
    if cfg.dataset in NUM_CLASSES:
        return NUM_CLASSES[cfg.dataset]
    return int(data.labels_main.max()) + 1 if len(data) else 1


def _eval_set(cfg: RunConfig) -> ImageBatch:
    """Test set with the configured corruption and random rotations applied."""
    data = _test_data(cfg)
    data = corrupt(data, CorruptionSpec(severity=cfg.severity), cfg.seed)
    return rotate_and_label(data, cfg.seed + 1)


def _load_net(cfg: RunConfig) -> DeepThinkNet:
    return load_checkpoint(cfg.require_path("checkpoint")).build_net()


class _Outputs:
    """Tracks artifacts under output_dir and writes the manifest."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.dir = Path(cfg.output_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.dir / name

    def finish(self) -> None:
        path = self.dir / "manifest.json"
        manifest = json.loads(path.read_text()) if path.exists() else {}
        manifest[self.command] = {
            "config_sha256": self.cfg.digest(),
            "config": self.cfg.canonical_text().splitlines(),
            "artifacts": sorted(self.files),
        }
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_train(cfg: RunConfig) -> int:
    data = _training_data(cfg)
    net_cfg = NetConfig(
        channels=cfg.channels,
        t_train=cfg.t_train,
        t_test=cfg.t_test,
        cell_kind=cfg.cell_kind,
        num_classes=_num_classes(cfg, data),
        downsample=cfg.downsample,
        input_channels=data.pixels.shape[1],
        recall_depth=cfg.recall_depth,
        ff_depth=cfg.ff_depth,
        act=cfg.act,
    )
    net = DeepThinkNet(net_cfg, seed=cfg.seed)
    out = _Outputs(cfg, "train")
    tcfg = TrainConfig(
        epochs=cfg.epochs,
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        batch_size=cfg.batch_size,
        sigma_noise=cfg.sigma_noise,
        train_fraction=cfg.train_fraction,
        target_train_acc=cfg.target_train_acc,
    )
    act = ActConfig(cfg.tau, cfg.epsilon_act, cfg.t_train) if cfg.act else None
    result = train(net, data, tcfg, seed=cfg.seed, act=act, metrics_path=out.path("metrics.csv"))
    save_checkpoint(out.path("checkpoint.dtck"), result.checkpoint())
    out.finish()
    print(f"trained {result.epochs_run} epoch(s); {net.num_parameters()} parameters; artifacts in {out.dir}")
    return 0


def cmd_estimate(cfg: RunConfig) -> int:
    net = _load_net(cfg)
    data = _eval_set(cfg)
    batches = [(b.pixels, b.labels_aux, b.labels_main) for b in data.batches(cfg.batch_size)]
    curve = estimate_curve(net, batches, cfg.t_test, workers=cfg.workers)
    rep = report(curve)
    out = _Outputs(cfg, "estimate")
    write_curve_csv(out.path("curve.csv"), curve)
    summary = {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in rep.summary().items()}
    out.path("report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if cfg.dump_aux_likelihood:
        _write_aux_likelihood(out.path("aux_likelihood.csv"), net, batches, cfg.t_test)
    out.finish()
    log.info("artifacts: %s", ", ".join(sorted(out.files)))
    print(f"t_opt = {rep.t_opt}")
    print(f"estimated accuracy (main @ t_opt) = {rep.acc_main_at_topt:.4f}")
    print(f"best accuracy (main @ t={rep.t_best}) = {rep.acc_main_max:.4f}")
    print(f"gap = {rep.gap:.4f}")
    if rep.correlation is not None:
        print(f"corr(acc_aux, acc_main) = {rep.correlation:.4f}")
    return 0


def _write_aux_likelihood(path, net, batches, t_test: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label_aux"] + [f"p_t{t}" for t in range(1, t_test + 1)])
        index = 0
        for X, aux, _ in batches:
            probs = aux_likelihoods(forward_iterate(net, X, t_test, keep_hidden=False), aux)
            for i in range(probs.shape[1]):
                w.writerow([index, int(aux[i])] + [repr(float(v)) for v in probs[:, i]])
                index += 1


def cmd_act_eval(cfg: RunConfig) -> int:
    net = _load_net(cfg)
    data = _eval_set(cfg)
    act = ActConfig(cfg.tau, cfg.epsilon_act, cfg.t_test)
    halts, correct_main, correct_aux = [], [], []
    for b in data.batches(cfg.batch_size):
        state, res = act_run(net, b.pixels, act)
        halts.extend(int(s) for s in state.halt_step)
        correct_main.extend((res.logits_main.data.argmax(1) == b.labels_main).astype(int).tolist())
        correct_aux.extend((res.logits_aux.data.argmax(1) == b.labels_aux).astype(int).tolist())
    halts_arr = np.array(halts)
    out = _Outputs(cfg, "act-eval")
    with open(out.path("act_halts.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "halt_step", "correct_main", "correct_aux"])
        for i, row in enumerate(zip(halts, correct_main, correct_aux)):
            w.writerow([i, *row])
    steps, counts = np.unique(halts_arr, return_counts=True)
    with open(out.path("act_histogram.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["halt_step", "count"])
        w.writerows(zip(steps.tolist(), counts.tolist()))
    mean, var = float(halts_arr.mean()), float(halts_arr.var())
    acc_main, acc_aux = float(np.mean(correct_main)), float(np.mean(correct_aux))
    with open(out.path("act_accuracy.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["samples", "acc_main", "acc_aux", "mean_halt_step", "var_halt_step"])
        w.writerow([len(halts), repr(acc_main), repr(acc_aux), repr(mean), repr(var)])
    out.finish()
    print(f"ACT accuracy {acc_main:.4f}; halt step mean {mean:.3f} var {var:.3f}")
    return 0


def cmd_diagnose(cfg: RunConfig) -> int:
    net = _load_net(cfg)
    data = _eval_set(cfg)
    batch = data.subset(np.arange(min(cfg.batch_size, len(data))))
    tr, states = diagnostics.trace(
        net, batch.pixels, batch.labels_main, batch.labels_aux, cfg.t_test, keep_states=True
    )
    out = _Outputs(cfg, "diagnose")
    diagnostics.write_trace_csv(out.path("trace.csv"), tr)
    maps = diagnostics.heatmap(net, batch.pixels[0], cfg.heatmap_list())
    for p in diagnostics.write_heatmaps(out.dir, maps):
        out.files.append(p.name)
    if cfg.dump_states:
        np.save(out.path("states.npy"), states)
    out.finish()
    print(f"wrote {len(tr)} trace rows and {len(maps)} heatmap(s) to {out.dir}")
    return 0


def cmd_corrupt(cfg: RunConfig) -> int:
    data = _test_data(cfg)
    noisy = corrupt(data, CorruptionSpec(severity=cfg.severity), cfg.seed)
    out = _Outputs(cfg, "corrupt")
    write_dtc1(out.path(f"corrupted_s{cfg.severity}.dtc1"), noisy)
    out.finish()
    print(f"wrote {len(noisy)} images at severity {cfg.severity}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "estimate": cmd_estimate,
    "act-eval": cmd_act_eval,
    "diagnose": cmd_diagnose,
    "corrupt": cmd_corrupt,
}


def _required_paths(cfg: RunConfig, command: str) -> list[str]:
    keys = [] if command in ("train", "corrupt") else ["checkpoint"]
    if cfg.dataset != "synthetic":
        keys.append("train_path" if command == "train" else "test_path")
    return keys


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepthink", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output directory (overrides output_dir)")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key"
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            print(f"error: --set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return 2
        overrides[key.strip()] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    try:
        cfg = load_run_config(args.config, overrides)
        for key in _required_paths(cfg, args.command):
            cfg.require_path(key)
        return COMMANDS[args.command](cfg)
    except DeepThinkError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, IndexError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
