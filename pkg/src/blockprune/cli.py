"""Command-line entry point: train, report, eval, export, flops.

Configuration precedence is flags > config file > profile > defaults, with
the ABP_SEED environment variable overriding the seed last. Exit codes:
0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import math
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from blockprune.checkpoint import load_checkpoint, save_checkpoint
from blockprune.compact import (
    CompactModel,
    CompressionReport,
    block_flops,
    count_flops,
    count_params,
    export_compact,
)
from blockprune.data import Dataset, SyntheticSpec, load_cifar_binary, synthetic_generate
from blockprune.errors import ConfigError
from blockprune.netcore import ARCHITECTURES, GateMask, GatedNetwork, NetworkSpec, build_network
from blockprune.schedule import TrainConfig, TrainLog, evaluate, run_stage1, run_stage2, run_stage3
from blockprune.sfp import SfpConfig, run_sfp, sfp_convention_flops


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # synthetic | cifar
    path: str | None = None
    format: str = "cifar10"
    stats: str = "canonical"
    num_classes: int | None = None
    image_size: int | None = None
    samples_per_class: int = 64
    separation: float = 10.0
    seed: int | None = None  # defaults to the training seed

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar"):
            raise ConfigError(f"unknown data source {self.source!r}")
        if self.format not in ("cifar10", "cifar100"):
            raise ConfigError(f"unknown data format {self.format!r}")
        if self.stats not in ("canonical", "computed"):
            raise ConfigError(f"unknown stats mode {self.stats!r}")


@dataclass(frozen=True)
class RunConfig:
    arch: str = "micro"
    gate: str = "conv"
    profile: str | None = None
    out_dir: str = "runs"
    run_id: str | None = None
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    sfp: SfpConfig | None = None

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown arch {self.arch!r} (choices: {sorted(ARCHITECTURES)})")
        if self.gate not in ("conv", "recur"):
            raise ConfigError(f"unknown gate {self.gate!r}")

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        return json.dumps(d, sort_keys=True, indent=2)


PROFILES = {
    "desk": {"train": {"e1": 5, "e2": 3, "e3": 5, "batch_size": 32, "augment": False}},
    "paper": {"train": {"e1": 60, "e2": 30, "e3": 60, "batch_size": 128, "augment": True}},
}

_TOP_KEYS = {"arch", "gate", "profile", "out_dir", "run_id", "train", "data", "sfp"}
_SECTION_FIELDS = {
    "train": {f.name for f in dataclasses.fields(TrainConfig)},
    "data": {f.name for f in dataclasses.fields(DataConfig)},
    "sfp": {f.name for f in dataclasses.fields(SfpConfig)},
}

_FLAG_PATHS = {
    "arch": ("arch",),
    "gate": ("gate",),
    "profile": ("profile",),
    "out": ("out_dir",),
    "run_id": ("run_id",),
    "gamma": ("train", "gamma"),
    "k": ("train", "k"),
    "tau": ("train", "tau"),
    "lam": ("train", "lam"),
    "lr": ("train", "lr"),
    "e1": ("train", "e1"),
    "e2": ("train", "e2"),
    "e3": ("train", "e3"),
    "batch_size": ("train", "batch_size"),
    "seed": ("train", "seed"),
    "augment": ("train", "augment"),
    "data_source": ("data", "source"),
    "data_path": ("data", "path"),
    "data_format": ("data", "format"),
    "data_stats": ("data", "stats"),
    "num_classes": ("data", "num_classes"),
    "image_size": ("data", "image_size"),
    "samples_per_class": ("data", "samples_per_class"),
    "separation": ("data", "separation"),
    "data_seed": ("data", "seed"),
    "sfp_rate": ("sfp", "rate"),
    "sfp_epochs": ("sfp", "epochs"),
    "sfp_cadence": ("sfp", "cadence"),
}


def _validate_keys(d: dict, source: str) -> None:
    unknown = set(d) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"{source}: unknown config key {sorted(unknown)[0]!r}")
    for section, allowed in _SECTION_FIELDS.items():
        sub = d.get(section)
        if sub is None:
            continue
        if not isinstance(sub, dict):
            raise ConfigError(f"{source}: section {section!r} must be a mapping")
        bad = set(sub) - allowed
        if bad:
            raise ConfigError(f"{source}: unknown config key {section}.{sorted(bad)[0]!r}")


def _deep_update(base: dict, overlay: dict) -> None:
    for key, value in overlay.items():
        if key == "sfp" and isinstance(value, dict) and base.get(key) is None:
            base[key] = dataclasses.asdict(SfpConfig())
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = copy.deepcopy(value)


def load_config_file(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    _validate_keys(raw, str(path))
    return raw


def build_run_config(file_cfg: dict | None, flags: dict | None = None) -> RunConfig:
    """Merge defaults, profile preset, config file, flags, and the seed env var."""
    flags = dict(flags or {})
    flag_tree: dict = {}
    for name, value in flags.items():
        if value is None:
            continue
        if name not in _FLAG_PATHS:
            raise ConfigError(f"unknown flag key {name!r}")
        node = flag_tree
        *parents, leaf = _FLAG_PATHS[name]
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value

    merged: dict = {
        "arch": "micro",
        "gate": "conv",
        "profile": None,
        "out_dir": "runs",
        "run_id": None,
        "train": dataclasses.asdict(TrainConfig()),
        "data": dataclasses.asdict(DataConfig()),
        "sfp": None,
    }
    profile = flag_tree.get("profile") or (file_cfg or {}).get("profile")
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r} (choices: {sorted(PROFILES)})")
        _deep_update(merged, PROFILES[profile])
        merged["profile"] = profile
    if file_cfg:
        _deep_update(merged, file_cfg)
    _deep_update(merged, flag_tree)

    env_seed = os.environ.get("ABP_SEED")
    if env_seed is not None:
        try:
            merged["train"]["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"ABP_SEED must be an integer, got {env_seed!r}") from exc

    return RunConfig(
        arch=merged["arch"],
        gate=merged["gate"],
        profile=merged["profile"],
        out_dir=merged["out_dir"],
        run_id=merged["run_id"],
        train=TrainConfig(**merged["train"]).resolve(),
        data=DataConfig(**merged["data"]),
        sfp=SfpConfig(**merged["sfp"]) if merged["sfp"] is not None else None,
    )


# ---------------------------------------------------------------------------
# dataset / spec resolution


def resolved_num_classes(cfg: RunConfig) -> int:
    if cfg.data.num_classes is not None:
        return cfg.data.num_classes
    if cfg.data.source == "cifar":
        return 100 if cfg.data.format == "cifar100" else 10
    return SyntheticSpec().num_classes


def resolved_image_size(cfg: RunConfig) -> int:
    if cfg.data.image_size is not None:
        return cfg.data.image_size
    if cfg.data.source == "cifar":
        return 32
    return 16 if cfg.arch == "micro" else 32


def build_dataset(cfg: RunConfig) -> Dataset:
    if cfg.data.source == "cifar":
        if cfg.data.path is None:
            raise ConfigError("cifar data source requires data.path")
        return load_cifar_binary(
            cfg.data.path,
            num_classes=resolved_num_classes(cfg),
            fmt=cfg.data.format,
            stats=cfg.data.stats,
        )
    seed = cfg.data.seed if cfg.data.seed is not None else cfg.train.seed
    return synthetic_generate(
        SyntheticSpec(
            num_classes=resolved_num_classes(cfg),
            samples_per_class=cfg.data.samples_per_class,
            image_size=resolved_image_size(cfg),
            seed=seed,
            blob_separation=cfg.data.separation,
        )
    )


def build_spec(cfg: RunConfig, dataset: Dataset) -> NetworkSpec:
    return ARCHITECTURES[cfg.arch](dataset.num_classes, image_size=dataset.image_size)


# ---------------------------------------------------------------------------
# training pipeline


@dataclass
class PipelineResult:
    run_dir: Path
    spec: NetworkSpec
    net: GatedNetwork
    mask: GateMask
    compact: CompactModel
    report: CompressionReport
    sfp_model: CompactModel | None
    sfp_report: CompressionReport | None
    accuracy: float
    iterations: int


def _acquire_lock(run_dir: Path) -> Path:
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        os.close(fd)
    except FileExistsError:
        raise ConfigError(f"{run_dir} is locked by another run (remove .lock if stale)")
    return lock


def _latest_checkpoint(run_dir: Path) -> tuple[Path, int] | None:
    best = None
    for p in run_dir.glob("stage*-iter*.ckpt"):
        stage_s, iter_s = p.stem.replace("stage", "").split("-iter")
        key = (int(stage_s), int(iter_s))
        if best is None or key > best[1]:
            best = (p, key)
    if best is None:
        return None
    return best[0], best[1][0]


def run_pipeline(cfg: RunConfig, resume: Path | None = None) -> PipelineResult:
    tcfg = cfg.train
    dataset = build_dataset(cfg)
    spec = build_spec(cfg, dataset)
    if resume is not None:
        run_dir = Path(resume)
        if not run_dir.is_dir():
            raise ConfigError(f"cannot resume: {run_dir} is not a directory")
    else:
        run_id = cfg.run_id or time.strftime("%Y%m%d-%H%M%S") + f"-s{tcfg.seed}"
        run_dir = Path(cfg.out_dir) / f"run-{run_id}"
        run_dir.mkdir(parents=True, exist_ok=True)
    lock = _acquire_lock(run_dir)
    try:
        (run_dir / "config.json").write_text(cfg.to_json() + "\n")
        log = TrainLog(run_dir)
        net, mask, start_stage, epoch = None, None, 1, 0
        if resume is not None:
            latest = _latest_checkpoint(run_dir)
            if latest is not None:
                ckpt_path, stage = latest
                loaded = load_checkpoint(ckpt_path)
                if loaded.kind != "gated":
                    raise ConfigError(f"cannot resume from {ckpt_path}: not a training checkpoint")
                net, mask = loaded.network, loaded.mask
                epoch = int(loaded.meta.get("epoch_offset", 0))
                start_stage = {1: 2, 2: 2, 3: 4}[stage]
        if net is None:
            net = build_network(spec, tcfg.seed, cfg.gate)
            mask = GateMask.initial(spec)

        iterations = 0
        if start_stage <= 1:
            run_stage1(net, mask, dataset, tcfg, log, epoch)
            epoch += tcfg.e1
        if start_stage <= 2:
            net, iterations, epoch = run_stage2(net, mask, dataset, tcfg, log, epoch)
        if start_stage <= 3:
            run_stage3(net, mask, dataset, tcfg, log, epoch)
            epoch += tcfg.e3

        compact_model = export_compact(net, mask)
        save_checkpoint(run_dir / "compact.ckpt", compact_model, meta={"arch": cfg.arch})
        report = CompressionReport.build(spec, compact_model)
        rows = [report.as_csv_row("abp", cfg.arch)]
        sections = [
            "[abp]",
            f"arch = {cfg.arch}",
            f"gate = {cfg.gate}",
            f"gamma = {tcfg.gamma}",
            f"pruned_blocks = {list(mask.pruned_indices())}",
            report.as_text(),
        ]

        sfp_model = sfp_report = None
        if cfg.sfp is not None and cfg.sfp.rate > 0:
            sfp_model, sfp_report = run_sfp(compact_model, dataset, cfg.sfp, tcfg, epoch)
            save_checkpoint(run_dir / "compact-sfp.ckpt", sfp_model, meta={"arch": cfg.arch})
            convention = sfp_convention_flops(compact_model, cfg.sfp.rate)
            convention_drop = (1 - convention / report.flops_baseline) * 100
            rows.append(sfp_report.as_csv_row("abp-sfp", cfg.arch))
            sections += [
                "",
                "[abp-sfp]",
                f"rate = {cfg.sfp.rate}",
                sfp_report.as_text(
                    {
                        "flops_sfp_convention": convention,
                        "flops_drop_pct_sfp_convention": f"{convention_drop:.2f}",
                    }
                ),
            ]

        (run_dir / "report.txt").write_text("\n".join(sections) + "\n")
        (run_dir / "report.csv").write_text(
            CompressionReport.CSV_HEADER + "\n" + "\n".join(rows) + "\n"
        )
        final_model = sfp_model if sfp_model is not None else compact_model
        accuracy = evaluate(final_model, dataset)
        log.event(f"final accuracy {accuracy:.4f}")
        return PipelineResult(
            run_dir=run_dir,
            spec=spec,
            net=net,
            mask=mask,
            compact=compact_model,
            report=report,
            sfp_model=sfp_model,
            sfp_report=sfp_report,
            accuracy=accuracy,
            iterations=iterations,
        )
    finally:
        lock.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# subcommands


def _flags_from_args(args: argparse.Namespace) -> dict:
    return {k: getattr(args, k) for k in _FLAG_PATHS if hasattr(args, k)}


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    file_cfg = None
    if getattr(args, "resume", None):
        saved = Path(args.resume) / "config.json"
        if args.config:
            raise ConfigError("--resume reuses the run's config.json; drop --config")
        if saved.exists():
            file_cfg = load_config_file(saved)
            file_cfg.pop("run_id", None)
    elif args.config:
        file_cfg = load_config_file(args.config)
    return build_run_config(file_cfg, _flags_from_args(args))


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    resume = Path(args.resume) if args.resume else None
    result = run_pipeline(cfg, resume=resume)
    print(f"run directory: {result.run_dir}")
    print(f"pruned blocks: {list(result.mask.pruned_indices())}")
    print((result.run_dir / "report.txt").read_text().rstrip())
    print(f"accuracy = {result.accuracy:.4f}")
    return 0


def _mark_table(spec: NetworkSpec, mask: GateMask, marks: dict) -> str:
    lines = ["block stage mark state"]
    for l in range(spec.num_blocks):
        mark = marks.get(str(l), "absent")
        if isinstance(mark, float):
            mark = f"{mark:.6f}"
        lines.append(f"{l} {spec.stage_of(l)} {mark} {mask.state(l).value}")
    return "\n".join(lines)


def cmd_report(args: argparse.Namespace) -> int:
    loaded = load_checkpoint(args.checkpoint)
    arch = loaded.meta.get("arch", "custom")
    if loaded.kind == "gated":
        spec = loaded.network.spec
        pruned = set(loaded.mask.pruned_indices())
        current = spec.without_blocks(pruned) if pruned else spec
        report = CompressionReport.build(spec, current)
        method = "gated"
    else:
        compact = loaded.compact
        report = CompressionReport.build(compact.origin_spec, compact)
        narrowed = any(
            m != b.out_shape.channels for m, b in zip(compact.mid_channels, compact.spec.blocks)
        )
        method = "abp-sfp" if narrowed else "abp"
    if args.csv:
        print(CompressionReport.CSV_HEADER)
        print(report.as_csv_row(method, arch))
        return 0
    print(f"method = {method}")
    print(f"arch = {arch}")
    print(report.as_text())
    if loaded.kind == "gated":
        print()
        print(_mark_table(loaded.network.spec, loaded.mask, loaded.meta.get("marks", {})))
    return 0


def _eval_dataset(args: argparse.Namespace, num_classes: int) -> Dataset:
    flags = _flags_from_args(args)
    flags.setdefault("num_classes", num_classes)
    cfg = build_run_config(None, flags)
    return build_dataset(cfg)


def cmd_eval(args: argparse.Namespace) -> int:
    loaded = load_checkpoint(args.checkpoint)
    if loaded.kind == "gated":
        model = loaded.network
        num_classes = model.spec.num_classes
        dataset = _eval_dataset(args, num_classes)
        acc = evaluate(model, dataset, mask=loaded.mask)
    else:
        model = loaded.compact
        num_classes = model.spec.num_classes
        dataset = _eval_dataset(args, num_classes)
        acc = evaluate(model, dataset)
    print(f"accuracy = {acc:.4f}")
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    loaded = load_checkpoint(args.checkpoint)
    if loaded.kind != "gated":
        raise ConfigError("export expects a gated training checkpoint")
    compact = export_compact(loaded.network, loaded.mask)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("compact.ckpt")
    save_checkpoint(out, compact, meta={"arch": loaded.meta.get("arch", "custom")})
    print(f"wrote {out}")
    return 0


def cmd_flops(args: argparse.Namespace) -> int:
    num_classes = args.num_classes if args.num_classes is not None else 10
    spec = ARCHITECTURES[args.arch](num_classes)
    flops = count_flops(spec)
    params = count_params(spec)
    print(f"arch = {args.arch}")
    print(f"flops_baseline = {flops}")
    print(f"params_baseline = {params}")
    if args.gamma is not None:
        if not 0.0 <= args.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        removable = [b for b in spec.blocks if b.index not in set(spec.downsample_indices())]
        costs = {block_flops(b) for b in removable}
        if len(costs) != 1:
            raise ConfigError("prunable blocks have unequal costs; estimate needs a trained mask")
        n_prune = math.floor(args.gamma * spec.num_blocks)
        est = flops - n_prune * costs.pop()
        print(f"gamma = {args.gamma}")
        print(f"blocks_pruned = {n_prune}")
        print(f"flops_pruned_estimate = {est}")
        print(f"flops_drop_pct_estimate = {(1 - est / flops) * 100:.2f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-source", choices=["synthetic", "cifar"], default=None)
    p.add_argument("--data-path", default=None)
    p.add_argument("--data-format", choices=["cifar10", "cifar100"], default=None)
    p.add_argument("--data-stats", choices=["canonical", "computed"], default=None)
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--samples-per-class", type=int, default=None)
    p.add_argument("--separation", type=float, default=None)
    p.add_argument("--data-seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="blockprune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[], help="run the full pruning pipeline")
    t.add_argument("--config", default=None, help="JSON config file")
    t.add_argument("--resume", default=None, help="existing run directory to continue")
    t.add_argument("--arch", choices=sorted(ARCHITECTURES), default=None)
    t.add_argument("--gate", choices=["conv", "recur"], default=None)
    t.add_argument("--profile", choices=sorted(PROFILES), default=None)
    t.add_argument("--out", default=None, help="parent directory for run dirs")
    t.add_argument("--run-id", dest="run_id", default=None)
    t.add_argument("--gamma", type=float, default=None)
    t.add_argument("--k", type=int, default=None)
    t.add_argument("--tau", type=float, default=None)
    t.add_argument("--lam", type=float, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--e1", type=int, default=None)
    t.add_argument("--e2", type=int, default=None)
    t.add_argument("--e3", type=int, default=None)
    t.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    t.add_argument("--sfp-rate", dest="sfp_rate", type=float, default=None)
    t.add_argument("--sfp-epochs", dest="sfp_epochs", type=int, default=None)
    t.add_argument("--sfp-cadence", dest="sfp_cadence", type=int, default=None)
    _add_data_flags(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("report", help="compression report for a checkpoint")
    r.add_argument("checkpoint")
    r.add_argument("--csv", action="store_true")
    r.set_defaults(func=cmd_report)

    e = sub.add_parser("eval", help="top-1 accuracy of a checkpoint on a dataset")
    e.add_argument("checkpoint")
    e.add_argument("--seed", type=int, default=None)
    _add_data_flags(e)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="export a compact model from a training checkpoint")
    x.add_argument("checkpoint")
    x.add_argument("--out", default=None)
    x.set_defaults(func=cmd_export)

    f = sub.add_parser("flops", help="cost accounting for a stock architecture")
    f.add_argument("--arch", choices=sorted(ARCHITECTURES), required=True)
    f.add_argument("--gamma", type=float, default=None)
    f.add_argument("--num-classes", type=int, default=None)
    f.set_defaults(func=cmd_flops)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args) or 0
    except Exception as exc:  # runtime failure -> 2 per the exit-code contract
        print(f"blockprune: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
