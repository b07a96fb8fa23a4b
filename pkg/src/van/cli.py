"""Command-line entry point: gen | train | eval | verify | plotdata.

Configuration is a flat key=value file overridable by CLI flags; the
effective configuration is echoed to stdout and into every output CSV as
``# key=value`` comment lines (filesystem paths excluded so reruns with the
same seed are byte-identical regardless of output location). Exit codes:
0 success, 1 usage error, 2 runtime failure, 3 verification failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .data import SynthConfig, featurize, load_dataset, make_split, save_dataset
from .evaluate import TIOU_THRESHOLDS
from .losses import GaussianScalar, kl_regression_loss
from .network import (
    NetworkConfig,
    build,
    forward,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from .oracle import run_verification
from .train import TrainConfig, TrainingDiverged, evaluate_dataset, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunConfig:
    seed: int = 0
    variant: str = "baseline"
    k: int = 3
    d: int = 64
    hidden: int = 128
    classes: int = 5
    sigma_t2: float = 0.01
    lambda_reg: float = 1.0
    lr: float = 1e-3
    iters: int = 5000
    batch: int = 128
    optimizer: str = "sgd-momentum"
    momentum: float = 0.9
    cascade: int = 2
    nms: float = 0.5
    t_min: int = 120
    t_max: int = 200
    actions_min: int = 1
    actions_max: int = 3
    len_min: int = 24
    len_max: int = 60
    signal: float = 0.5
    noise_action: float = 1.5
    noise_background: float = 1.5
    jitter: float = 0.25
    positives: int = 4
    negatives: int = 6
    min_proposal_len: int = 8
    train_sequences: int = 200
    test_sequences: int = 100


#: keys that never appear in file headers (location metadata, not semantics)
PATH_KEYS = ("out", "dataset", "checkpoint", "config", "only", "command")


def parse_config_file(path: str) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """defaults < config file < explicit CLI flags."""
    cfg = RunConfig()
    by_name = {f.name: f for f in fields(RunConfig)}
    if getattr(args, "config", None):
        for key, raw in parse_config_file(args.config).items():
            if key not in by_name:
                raise UsageError(f"unknown config key {key!r}")
            ftype = by_name[key].type
            try:
                value = {"int": int, "float": float, "str": str}[ftype](raw)
            except ValueError as exc:
                raise UsageError(f"config key {key!r}: {exc}") from exc
            setattr(cfg, key, value)
    for name in by_name:
        cli_value = getattr(args, name, None)
        if cli_value is not None:
            setattr(cfg, name, cli_value)
    if cfg.variant not in ("baseline", "van_i", "van_o", "van_p"):
        raise UsageError(f"unknown variant {cfg.variant!r}")
    return cfg


def echo_lines(cfg: RunConfig) -> list[str]:
    return [f"{f.name}={getattr(cfg, f.name)}" for f in sorted(fields(RunConfig), key=lambda f: f.name)]


def _echo(cfg: RunConfig) -> None:
    for line in echo_lines(cfg):
        print(f"config {line}")


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path: Path, cfg: RunConfig, columns: list[str], rows: list[list]) -> None:
    with open(path, "w") as fh:
        for line in echo_lines(cfg):
            fh.write(f"# {line}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else _fmt(v) for v in row) + "\n")


def synth_config(cfg: RunConfig) -> SynthConfig:
    return SynthConfig.create(
        signal=cfg.signal,
        seed=cfg.seed,
        d=cfg.d,
        num_classes=cfg.classes,
        t_range=(cfg.t_min, cfg.t_max),
        actions_range=(cfg.actions_min, cfg.actions_max),
        len_range=(cfg.len_min, cfg.len_max),
        noise_action=cfg.noise_action,
        noise_background=cfg.noise_background,
        jitter=cfg.jitter,
        positives_per_action=cfg.positives,
        negatives_per_sequence=cfg.negatives,
        min_proposal_len=cfg.min_proposal_len,
        sigma_t2=cfg.sigma_t2,
    )


def network_config(cfg: RunConfig) -> NetworkConfig:
    return NetworkConfig(
        variant=cfg.variant, d=cfg.d, k=cfg.k, hidden=cfg.hidden,
        classes=cfg.classes, sigma_t2=cfg.sigma_t2,
    )


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg.batch, lr=cfg.lr, iters=cfg.iters, optimizer=cfg.optimizer,
        momentum=cfg.momentum, lambda_reg=cfg.lambda_reg, seed=cfg.seed,
        cascade_steps=cfg.cascade,
    )


def cmd_gen(cfg: RunConfig, out: Path) -> int:
    sc = synth_config(cfg)
    for split, count in (("train", cfg.train_sequences), ("test", cfg.test_sequences)):
        ds = make_split(sc, count, split)
        save_dataset(out / f"{split}.vds", ds)
        hist = {c: 0 for c in range(cfg.classes + 1)}
        for p in ds.proposals:
            hist[p.label] += 1
        hist_str = " ".join(f"{c}:{n}" for c, n in sorted(hist.items()))
        print(f"{split}: {len(ds.sequences)} sequences, {len(ds.proposals)} proposals, "
              f"labels {hist_str}")
    return 0


def cmd_train(cfg: RunConfig, out: Path, dataset_path: str) -> int:
    dataset = load_dataset(dataset_path)
    if dataset.config.d != cfg.d or dataset.config.num_classes != cfg.classes:
        raise UsageError("dataset geometry does not match the network configuration")
    nc = network_config(cfg)
    params = build(nc, cfg.seed)
    print(f"variant {cfg.variant}: {param_count(params)} parameters")
    params, curve = train(params, nc, dataset, train_config(cfg))
    save_checkpoint(out / "checkpoint.vckpt", params, nc, cfg.seed)
    rows = [
        [i, b.classification, b.regression, b.total] for i, b in enumerate(curve)
    ]
    write_csv(out / "loss.csv", cfg, ["iteration", "cls", "reg", "total"], rows)
    if curve:
        print(f"final loss total={curve[-1].total:.6f} cls={curve[-1].classification:.6f} "
              f"reg={curve[-1].regression:.6f}")
    return 0


def cmd_eval(cfg: RunConfig, out: Path, dataset_path: str, checkpoint_path: str) -> int:
    params, nc, _ = load_checkpoint(checkpoint_path)
    dataset = load_dataset(dataset_path)
    per_thr, avg, _ = evaluate_dataset(
        params, nc, dataset, steps=cfg.cascade, nms_threshold=cfg.nms,
        thresholds=TIOU_THRESHOLDS,
    )
    columns = ["variant", "k", "seed"] + [f"map_{t}" for t in TIOU_THRESHOLDS] + ["avg"]
    row = [nc.variant, nc.k, cfg.seed] + [per_thr[t] for t in TIOU_THRESHOLDS] + [avg]
    write_csv(out / "results.csv", cfg, columns, [row])
    shown = " ".join(f"mAP@{t}={per_thr[t]:.4f}" for t in TIOU_THRESHOLDS)
    print(f"{nc.variant} k={nc.k}: {shown} avg={avg:.4f}")
    return 0


def cmd_verify(cfg: RunConfig, out: Path, only: str | None) -> int:
    results = run_verification(only=only)
    if not results:
        raise UsageError(f"no verification checks match {only!r}")
    rows = []
    failed = 0
    for r in results:
        status = "info" if r.passed is None else ("pass" if r.passed else "FAIL")
        failed += status == "FAIL"
        rows.append([r.name, r.measured, "" if r.bound is None else _fmt(r.bound), status, r.note])
        bound = "" if r.bound is None else f" bound={r.bound:g}"
        print(f"{status:4} {r.name}: measured={r.measured:.3g}{bound} {r.note}")
    write_csv(out / "verify_report.csv", cfg,
              ["name", "measured", "bound", "status", "note"], rows)
    return 3 if failed else 0


def cmd_plotdata(cfg: RunConfig, out: Path, dataset_path: str | None,
                 checkpoint_path: str | None) -> int:
    # loss surface around mu_t = 0: symmetric mu grid, variance grid starting
    # exactly at sigma_t2
    half = np.linspace(0.0, 1.2, 41)
    mu_grid = np.concatenate([-half[::-1][:-1], half])
    s2_grid = cfg.sigma_t2 * np.power(10.0, np.linspace(0.0, 2.0, 41))
    target = GaussianScalar(0.0, cfg.sigma_t2)
    rows = []
    for s2 in s2_grid:
        for mu in mu_grid:
            rows.append([mu, s2, kl_regression_loss(target, GaussianScalar(mu, s2))])
    write_csv(out / "loss_surface.csv", cfg, ["mu_p", "sigma_p2", "loss"], rows)
    print(f"loss surface: {len(rows)} rows")

    if checkpoint_path and dataset_path:
        params, nc, _ = load_checkpoint(checkpoint_path)
        dataset = load_dataset(dataset_path)
        rows = []
        for prop in dataset.proposals:
            seq = dataset.sequence_by_id(prop.seq_id)
            feat = featurize(seq, prop, nc.k)
            det, _ = forward(params, nc, feat, mode="train")
            z = det.class_scores - det.class_scores.max()
            p = np.exp(z)
            p /= p.sum()
            cls = 1 + int(np.argmax(p[1:]))
            length = prop.end - prop.start
            rows.append([
                prop.seq_id, prop.start, prop.end, prop.label, cls, float(p[cls]),
                prop.start + float(det.boundary_mean[cls, 0]) * length,
                float(det.boundary_var[cls, 0]) * length**2,
                prop.end + float(det.boundary_mean[cls, 1]) * length,
                float(det.boundary_var[cls, 1]) * length**2,
            ])
        write_csv(out / "boundaries.csv", cfg,
                  ["seq_id", "prop_start", "prop_end", "label", "pred_class", "score",
                   "start_mean", "start_var", "end_mean", "end_var"], rows)
        print(f"boundary table: {len(rows)} rows")
    return 0


def _make_parser() -> _Parser:
    parser = _Parser(prog="van", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--variant", choices=("baseline", "van_i", "van_o", "van_p"))
        p.add_argument("--k", type=int)
        p.add_argument("--d", type=int)
        p.add_argument("--hidden", type=int)
        p.add_argument("--classes", type=int)
        p.add_argument("--cascade", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--iters", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--lambda-reg", dest="lambda_reg", type=float)
        p.add_argument("--sigma-t2", dest="sigma_t2", type=float)
        p.add_argument("--optimizer", choices=("sgd", "sgd-momentum"))
        p.add_argument("--momentum", type=float)
        p.add_argument("--nms", type=float)
        for name in ("t-min", "t-max", "actions-min", "actions-max", "len-min",
                     "len-max", "positives", "negatives", "min-proposal-len",
                     "train-sequences", "test-sequences"):
            p.add_argument(f"--{name}", dest=name.replace("-", "_"), type=int)
        for name in ("signal", "noise-action", "noise-background", "jitter"):
            p.add_argument(f"--{name}", dest=name.replace("-", "_"), type=float)

    add_common(sub.add_parser("gen", help="generate train/test dataset files"))
    p_train = sub.add_parser("train", help="train a variant on a dataset")
    add_common(p_train)
    p_train.add_argument("--dataset", required=True)
    p_eval = sub.add_parser("eval", help="cascade inference + NMS + mAP@tIoU")
    add_common(p_eval)
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--checkpoint", required=True)
    p_verify = sub.add_parser("verify", help="run the oracle verification suite")
    add_common(p_verify)
    p_verify.add_argument("--only", help="run only checks whose name contains this")
    p_plot = sub.add_parser("plotdata", help="emit loss-surface and boundary CSVs")
    add_common(p_plot)
    p_plot.add_argument("--dataset")
    p_plot.add_argument("--checkpoint")
    return parser


def main(argv=None) -> int:
    parser = _make_parser()
    try:
        args = parser.parse_args(argv)
        cfg = build_run_config(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    _echo(cfg)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "gen":
            return cmd_gen(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out, args.dataset)
        if args.command == "eval":
            return cmd_eval(cfg, out, args.dataset, args.checkpoint)
        if args.command == "verify":
            return cmd_verify(cfg, out, args.only)
        if args.command == "plotdata":
            return cmd_plotdata(cfg, out, args.dataset, args.checkpoint)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
