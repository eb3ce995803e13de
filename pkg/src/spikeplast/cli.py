"""Command-line entry point: ``spikeplast <command> [options]``.

Exit codes: 0 success, 1 runtime fault, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from .data import direct_encode, load_dataset, small_sample_subset
from .errors import ConfigError, SpecMismatch, SpikeplastError
from .pipeline import (ABLATIONS, MetricsRecord, Network, NetworkSpec, assign_votes, evaluate,
                       kernel_similarity, run_ablation, train_layerwise)

log = logging.getLogger("spikeplast")

DATASETS = ("mnist", "fashion", "cifar10", "mnist5k")
MECHANISMS = ("asf", "alic", "atb")
DEFAULT_SIZES = (20, 10, 5, 1)
LIMIT_SEED = 20240101


@dataclass
class RunConfig:
    dataset: str = "mnist"
    data_root: str | None = None
    seed: int = 0
    threads: int | None = None
    per_class: int | None = None
    train_limit: int | None = None
    test_limit: int | None = None
    out: str = "runs/latest"
    disable: list = field(default_factory=list)
    network: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {', '.join(DATASETS)}")
        for name in ("per_class", "train_limit", "test_limit", "threads"):
            v = getattr(self, name)
            if v is not None and int(v) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if int(self.seed) < 0:
            raise ConfigError("seed must be >= 0")
        bad = [m for m in self.disable if m not in MECHANISMS]
        if bad:
            raise ConfigError(f"cannot disable {bad}; choose from {', '.join(MECHANISMS)}")
        self.spec()
        _limit_threads(self.threads)

    def spec(self) -> NetworkSpec:
        spec = NetworkSpec.for_dataset(self.dataset, **self.network)
        return dataclasses.replace(spec, **{m: False for m in self.disable})

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


_TOP_KEYS = {f.name for f in dataclasses.fields(RunConfig)} - {"network"}
_NET_KEYS = {f.name for f in dataclasses.fields(NetworkSpec)}


def apply_dotted(cfg: RunConfig, items: dict) -> RunConfig:
    """Merge flat dotted keys (``seed``, ``network.fc_neurons`` ...) into ``cfg``."""
    for key, value in items.items():
        if key.startswith("network."):
            sub = key[len("network."):]
            if sub not in _NET_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            cfg.network[sub] = value
        elif key in _TOP_KEYS:
            setattr(cfg, key, value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return cfg


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        try:
            items = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {args.config} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(items, dict):
            raise ConfigError("config file must hold a JSON object of dotted keys")
        apply_dotted(cfg, items)
    flags = {}
    for name in ("dataset", "data_root", "seed", "threads", "per_class", "train_limit",
                 "test_limit", "out"):
        value = getattr(args, name, None)
        if value is not None:
            flags[name] = value
    if getattr(args, "disable", None):
        flags["disable"] = list(args.disable)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        flags[key] = _parse_value(value)
    apply_dotted(cfg, flags)
    try:
        cfg.validate()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return cfg


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------

def append_metrics(path: Path, records, **context) -> None:
    rows = [{**context, **r.csv_row()} for r in records]
    if not rows:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        if new:
            writer.writeheader()
        writer.writerows(rows)


def write_confusion(path: Path, rec: MetricsRecord) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["true"] + [str(c) for c in range(rec.confusion.shape[1])] + ["none"])
        for c, row in enumerate(rec.confusion):
            w.writerow([c] + row.tolist() + [int(rec.unpredicted[c])])


def write_summary(out: Path, command: str, cfg: RunConfig, spec: NetworkSpec | None,
                  records, **extra) -> Path:
    summary = {
        "command": command,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": cfg.to_json(),
        "network": spec.to_dict() if spec else None,
        "metrics": [r.to_json() for r in records],
        **extra,
    }
    out.mkdir(parents=True, exist_ok=True)
    path = out / "summary.json"
    path.write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def load_split(cfg: RunConfig, split: str, *, per_class=None, seed=None):
    raw = load_dataset(cfg.dataset, split, cfg.data_root)
    if split == "train" and per_class:
        raw = small_sample_subset(raw, int(per_class), cfg.seed if seed is None else seed)
    limit = cfg.train_limit if split == "train" else cfg.test_limit
    if limit and not (split == "train" and per_class) and int(limit) < len(raw):
        # a fixed subset, independent of the run seed, so runs stay comparable
        keep = np.random.default_rng(LIMIT_SEED).permutation(len(raw))[:int(limit)]
        raw = raw.subset(np.sort(keep))
    return raw


def _check_shape(spec: NetworkSpec, raw) -> None:
    if tuple(raw.sample_shape) != tuple(spec.in_shape):
        raise SpecMismatch(f"network expects inputs {spec.in_shape}, dataset has "
                           f"{raw.sample_shape}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = resolve_config(args)
    spec = cfg.spec()
    out = Path(cfg.out)
    train = load_split(cfg, "train", per_class=cfg.per_class)
    _check_shape(spec, train)
    x = direct_encode(train)
    ckpt = out / "checkpoint.spk"

    def on_epoch(phase, epoch, net):
        checkpoint.save(net, ckpt)
        log.info("%s epoch %d checkpointed to %s", phase, epoch, ckpt)

    t0 = time.perf_counter()
    net = train_layerwise(spec, x, cfg.seed, on_epoch=on_epoch, dump_dir=out)
    assign_votes(net, x, train.labels)
    checkpoint.save(net, ckpt)
    records = [evaluate(net, x, train.labels, split="train",
                        epoch=spec.epochs_conv + spec.epochs_fc)]
    test = _optional_test(cfg)
    if test is not None:
        records.append(evaluate(net, direct_encode(test), test.labels, split="test",
                                epoch=spec.epochs_conv + spec.epochs_fc))
        write_confusion(out / "confusion_test.csv", records[-1])
    append_metrics(out / "metrics.csv", records, command="train", dataset=cfg.dataset,
                   seed=cfg.seed, per_class=cfg.per_class or "")
    write_summary(out, "train", cfg, spec, records, checkpoint=str(ckpt),
                  train_samples=len(train), train_checksum=train.checksum,
                  kernel_similarity=kernel_similarity(net.conv.weights),
                  wall_time_s=time.perf_counter() - t0)
    for r in records:
        print(f"{r.split} accuracy {r.accuracy:.4f}")
    return 0


def _optional_test(cfg: RunConfig):
    try:
        return load_split(cfg, "test")
    except ConfigError as exc:
        log.warning("no test split evaluated: %s", exc)
        return None


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    net = checkpoint.load(args.checkpoint)
    if net.votes is None:
        raise SpecMismatch("checkpoint holds no voting table; train it to completion first")
    raw = load_split(cfg, args.split)
    _check_shape(net.spec, raw)
    rec = evaluate(net, direct_encode(raw), raw.labels, split=args.split)
    out = Path(cfg.out)
    write_confusion(out / f"confusion_{args.split}.csv", rec)
    append_metrics(out / "metrics.csv", [rec], command="eval", dataset=cfg.dataset,
                   seed=net.seed, per_class="")
    write_summary(out, "eval", cfg, net.spec, [rec], checkpoint=str(args.checkpoint))
    print(f"{args.split} accuracy {rec.accuracy:.4f}")
    return 0


def _parse_sets(specs) -> dict:
    if specs is None:
        return dict(ABLATIONS)
    sets = {"baseline": ()}
    for item in specs:
        if item in ("", "none"):
            continue
        flags = tuple(f.strip() for f in item.split("+") if f.strip())
        bad = [f for f in flags if f not in MECHANISMS]
        if bad:
            raise ConfigError(f"unknown mechanism(s) {bad} in ablation set {item!r}")
        sets["w/o " + "+".join(f.upper() for f in flags)] = flags
    return sets


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    spec = cfg.spec()
    sets = _parse_sets(args.sets)
    train = load_split(cfg, "train", per_class=cfg.per_class)
    test = load_split(cfg, "test")
    _check_shape(spec, train)
    x, xt = direct_encode(train), direct_encode(test)
    records = run_ablation(spec, sets, x, train.labels, xt, test.labels, cfg.seed)
    out = Path(cfg.out)
    append_metrics(out / "ablation.csv", records, command="ablate", dataset=cfg.dataset,
                   seed=cfg.seed, per_class=cfg.per_class or "")
    write_summary(out, "ablate", cfg, spec, records,
                  flag_sets={k: list(v) for k, v in sets.items()})
    for r in records:
        print(f"{r.label}: accuracy {r.accuracy:.4f}")
    return 0


def cmd_small_sample(args) -> int:
    cfg = resolve_config(args)
    spec = cfg.spec()
    sizes = args.sizes or ([cfg.per_class] if cfg.per_class else list(DEFAULT_SIZES))
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    full = load_dataset(cfg.dataset, "train", cfg.data_root)
    test = load_split(cfg, "test")
    _check_shape(spec, full)
    xt = direct_encode(test)
    out = Path(cfg.out)
    records, table = [], []
    for per_class in sizes:
        accs = []
        for seed in seeds:
            sub = small_sample_subset(full, per_class, seed)
            x = direct_encode(sub)
            t0 = time.perf_counter()
            net = train_layerwise(spec, x, seed)
            assign_votes(net, x, sub.labels)
            rec = evaluate(net, xt, test.labels, label=f"per_class={per_class}")
            rec.wall_time = time.perf_counter() - t0
            records.append(rec)
            accs.append(rec.accuracy)
            append_metrics(out / "small_sample.csv", [rec], command="small-sample",
                           dataset=cfg.dataset, seed=seed, per_class=per_class)
            print(f"per_class {per_class} seed {seed}: accuracy {rec.accuracy:.4f}", flush=True)
        table.append({"per_class": per_class, "samples": per_class * 10,
                      "mean_accuracy": float(np.mean(accs)), "std": float(np.std(accs)),
                      "seeds": seeds})
        print(f"per_class {per_class}: mean accuracy {np.mean(accs):.4f}")
    write_summary(out, "small-sample", cfg, spec, records, table=table)
    return 0


def _pgm(path: Path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=float)
    lo, hi = img.min(), img.max()
    if hi > lo:
        data = np.round((img - lo) / (hi - lo) * 255).astype(np.uint8)
    else:
        data = np.full(img.shape, 128, dtype=np.uint8)
    h, w = data.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def _tile(chw: np.ndarray) -> np.ndarray:
    """Lay channels side by side in a near-square grid."""
    c, h, w = chw.shape
    cols = int(np.ceil(np.sqrt(c)))
    rows = int(np.ceil(c / cols))
    grid = np.full((rows * h, cols * w), chw.min())
    for i in range(c):
        r, q = divmod(i, cols)
        grid[r * h:(r + 1) * h, q * w:(q + 1) * w] = chw[i]
    return grid


def export_weights(net: Network, out: Path, max_fc: int | None = None) -> tuple[int, int]:
    conv_dir, fc_dir = out / "conv", out / "fc"
    conv_dir.mkdir(parents=True, exist_ok=True)
    fc_dir.mkdir(parents=True, exist_ok=True)
    for i, kernel in enumerate(net.conv.weights):
        _pgm(conv_dir / f"kernel_{i:03d}.pgm", _tile(kernel) if kernel.shape[0] > 1 else kernel[0])
    shape = net.spec.conv_out_shape
    n_fc = net.fc.weights.shape[0] if max_fc is None else min(max_fc, net.fc.weights.shape[0])
    for j in range(n_fc):
        _pgm(fc_dir / f"neuron_{j:05d}.pgm", _tile(net.fc.weights[j].reshape(shape)))
    return net.conv.weights.shape[0], n_fc


def cmd_export_weights(args) -> int:
    net = checkpoint.load(args.checkpoint)
    out = Path(args.out or "weights")
    n_conv, n_fc = export_weights(net, out, args.max_fc)
    print(f"wrote {n_conv} kernel images and {n_fc} fc images under {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def _run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", choices=DATASETS)
    p.add_argument("--config", metavar="PATH", help="JSON object of flat dotted keys")
    p.add_argument("--data-root", dest="data_root", metavar="DIR",
                   help="dataset directory (default: $SPIKEPLAST_DATA)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="BLAS worker threads (default: all cores)")
    p.add_argument("--per-class", dest="per_class", type=int,
                   help="train on this many randomly drawn samples per class")
    p.add_argument("--train-limit", dest="train_limit", type=int,
                   help="train on a fixed random subset of N samples")
    p.add_argument("--test-limit", dest="test_limit", type=int,
                   help="evaluate on a fixed random subset of N test samples")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--disable", nargs="+", choices=MECHANISMS, metavar="{asf,alic,atb}")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one dotted config key, e.g. network.fc_neurons=1600")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spikeplast",
                     description="Unsupervised spiking networks trained with batched STDP.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train layer-wise, assign votes, write a checkpoint")
    _run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _run_options(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train with mechanisms switched off and compare")
    _run_options(p)
    p.add_argument("--sets", nargs="*", metavar="FLAGS",
                   help="ablation sets such as asf asf+alic asf+alic+atb "
                        "(default: those three; give none for the baseline only)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-weights", help="write conv kernels and fc weights as PGM images")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--max-fc", dest="max_fc", type=int, help="export only the first N fc neurons")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_export_weights)

    p = sub.add_parser("small-sample", help="repeat training on small per-class subsets")
    _run_options(p)
    p.add_argument("--sizes", nargs="+", type=int, metavar="N",
                   help="per-class sizes (default: 20 10 5 1)")
    p.add_argument("--seeds", type=int, default=3, help="number of consecutive seeds")
    p.set_defaults(func=cmd_small_sample)
    return parser


def _limit_threads(n) -> None:
    # caps the BLAS pool numpy calls into
    if n:
        from threadpoolctl import threadpool_limits
        threadpool_limits(int(n))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SpecMismatch) as exc:
        print(f"spikeplast: error: {exc}", file=sys.stderr)
        return 2
    except SpikeplastError as exc:
        print(f"spikeplast: {exc}", file=sys.stderr)
        return 1
    except (OSError, MemoryError) as exc:
        print(f"spikeplast: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
