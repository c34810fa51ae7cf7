"""Command-line pipeline: train, prune, finetune, expand, eval, report.

Every subcommand reads an optional flat JSON config (``--config``); any key
can be overridden with ``--<key> value``. Outputs go to ``--out_dir``
(default ``$CURLPRUNE_OUT/<subcommand>`` or ``runs/<subcommand>``) together
with the fully resolved config.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import __version__
from .accounting import count_macs_params
from .augment import expand_dataset, expansion_digest, load_expanded, write_expanded
from .data import Dataset, SyntheticSpec, load_idx, make_synthetic, normalize, sample_proxy
from .distill import FinetuneConfig, LogitStore, finetune
from .nn import ArchConfig, build_tiny_resnet, load_checkpoint, save_checkpoint
from .prune import CRITERIA, apply_surgery, discover_groups, make_plan, make_proxy, score_groups
from .training import MetricsLog, TrainConfig, accuracy, train_supervised

logger = logging.getLogger("curlprune")

CRITERION_COLUMNS = (("random", "Random"), ("weight_sum", "Weight Sum"), ("delta_loss", "ΔLoss"), ("kl", "KL"))
NO_DATA = "no data"


@dataclass
class RunConfig:
    # data
    dataset: str = "synthetic"  # synthetic | idx
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    class_count: int = 10
    train_per_class: int = 60  # limited split used for pruning and fine-tuning
    teacher_per_class: int = 300  # larger split the teacher is trained on (synthetic only)
    test_per_class: int = 100
    image_size: int = 32
    data_seed: int = 0
    noise: float = 0.2
    patch_amp: float = 0.3
    texture_amp: float = 0.05
    # architecture
    widths: str = "32,64,128"
    blocks: str = "2,2,2"
    stem_width: int = 16
    depthwise: bool = False
    # teacher training
    teacher_epochs: int = 15
    teacher_lr: float = 0.05
    teacher_warmup: int = 5
    # pruning
    criterion: str = "kl"
    target_macs_ratio: float = 0.5
    target_k: int = -1  # >= 0 overrides the MACs target
    retention_floor: float = 0.3
    proxy_size: int = 256
    # fine-tuning
    arm: str = "curl"
    epochs1: int = 25
    epochs2: int = 2
    lr1: float = 0.01
    lr2: float = 1e-4
    warmup1: int = 5
    temperature1: float = 2.0
    temperature2: float = 1.0
    alpha: float = 0.7
    eta: float = 1.0
    mixup_alpha: float = 1.0
    refine: bool = True
    expand: bool = True
    expanded_dir: str = ""
    match_budget: bool = True  # baseline arms get epochs1 + 6 * epochs2 epochs
    # shared
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    out_dir: str = ""

    def arch(self) -> ArchConfig:
        return ArchConfig(widths=_ints(self.widths), blocks=_ints(self.blocks), class_count=self.class_count,
                          image_size=self.image_size, stem_width=self.stem_width, depthwise=self.depthwise)

    def validate(self) -> list[str]:
        errors = []
        if self.dataset not in ("synthetic", "idx"):
            errors.append(f"dataset must be 'synthetic' or 'idx', got {self.dataset!r}")
        if self.dataset == "idx" and not (self.train_images and self.train_labels):
            errors.append("dataset=idx needs train_images and train_labels")
        if self.criterion not in CRITERIA:
            errors.append(f"criterion must be one of {list(CRITERIA)}, got {self.criterion!r}")
        if self.arm not in ("plain", "mixup", "kd_mixup", "curl"):
            errors.append(f"arm must be plain, mixup, kd_mixup or curl, got {self.arm!r}")
        if not 0 < self.target_macs_ratio <= 1:
            errors.append(f"target_macs_ratio must be in (0, 1], got {self.target_macs_ratio}")
        if not 0 < self.retention_floor <= 1:
            errors.append(f"retention_floor must be in (0, 1], got {self.retention_floor}")
        if not 0 <= self.alpha <= 1:
            errors.append(f"alpha must be in [0, 1], got {self.alpha}")
        for name in ("temperature1", "temperature2", "batch_size", "proxy_size", "class_count", "image_size"):
            if getattr(self, name) <= 0:
                errors.append(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("eta", "lr1", "lr2", "teacher_lr", "weight_decay", "epochs1", "epochs2", "teacher_epochs"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be nonnegative, got {getattr(self, name)}")
        if not 0 <= self.momentum < 1:
            errors.append(f"momentum must be in [0, 1), got {self.momentum}")
        if self.mixup_alpha < 0:
            errors.append(f"mixup_alpha must be nonnegative, got {self.mixup_alpha}")
        try:
            w, b = _ints(self.widths), _ints(self.blocks)
            if len(w) != len(b) or not w:
                errors.append(f"widths {self.widths!r} and blocks {self.blocks!r} must have equal nonzero length")
            if any(x < 4 for x in w):
                errors.append(f"every stage width must be >= 4, got {self.widths!r}")
            if any(x < 1 for x in b):
                errors.append(f"every stage needs >= 1 block, got {self.blocks!r}")
        except ValueError:
            errors.append(f"widths/blocks must be comma-separated integers, got {self.widths!r}/{self.blocks!r}")
        return errors


def _ints(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _parse_bool(text: str) -> bool:
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


class ConfigError(ValueError):
    pass


def resolve_config(path: str | None, overrides: dict) -> RunConfig:
    """Defaults < config file < command-line flags."""
    values = {}
    known = {f.name: f for f in fields(RunConfig)}
    if path:
        with open(path, encoding="utf-8") as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a flat JSON object")
        unknown = sorted(set(loaded) - set(known))
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {unknown}")
        for k, v in loaded.items():
            if isinstance(v, (list, tuple)):
                v = ",".join(str(x) for x in v)
            values[k] = v
    values.update({k: v for k, v in overrides.items() if v is not None})
    errors = []
    for k, v in list(values.items()):
        typ = known[k].type
        try:
            if typ in ("bool", bool):
                values[k] = v if isinstance(v, bool) else _parse_bool(v)
            elif typ in ("int", int):
                values[k] = int(v)
            elif typ in ("float", float):
                values[k] = float(v)
            else:
                values[k] = str(v)
        except (TypeError, ValueError, argparse.ArgumentTypeError):
            errors.append(f"{k}: cannot interpret {v!r} as {typ}")
    if errors:
        raise ConfigError("; ".join(errors))
    cfg = RunConfig(**values)
    problems = cfg.validate()
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    return cfg


# --------------------------------------------------------------------------
# helpers


def _out_dir(cfg: RunConfig, command: str) -> str:
    out = cfg.out_dir or os.path.join(os.environ.get("CURLPRUNE_OUT", "runs"), command)
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _snapshot_config(cfg: RunConfig, out: str, command: str, extra: dict | None = None) -> None:
    doc = {"command": command, "version": __version__, "config": asdict(cfg)}
    if extra:
        doc.update(extra)
    _write_json(os.path.join(out, "resolved_config.json"), doc)


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset, Dataset | None]:
    """(teacher training set, limited training set, test set)."""
    if cfg.dataset == "idx":
        train = load_idx(cfg.train_images, cfg.train_labels, class_count=cfg.class_count)
        test = None
        if cfg.test_images and cfg.test_labels:
            test = load_idx(cfg.test_images, cfg.test_labels, class_count=cfg.class_count, split="test")
        return train, train, test

    def spec(split, per_class):
        return SyntheticSpec(class_count=cfg.class_count, per_class=per_class, side=cfg.image_size,
                             seed=cfg.data_seed, split=split, noise=cfg.noise, patch_amp=cfg.patch_amp,
                             texture_amp=cfg.texture_amp)

    big = make_synthetic(spec("train", max(cfg.teacher_per_class, cfg.train_per_class)))
    keep = np.sort(np.concatenate([np.flatnonzero(big.labels == k)[:cfg.train_per_class]
                                   for k in range(cfg.class_count)]))
    limited = big.subset(keep)
    limited.meta = {"source": "synthetic", "parent": big.digest(), "per_class": cfg.train_per_class}
    return big, limited, make_synthetic(spec("test", cfg.test_per_class))


def _norm(net) -> tuple:
    norm = net.meta.get("norm")
    if norm is None:
        raise ConfigError("checkpoint has no input normalization statistics")
    return np.asarray(norm[0]), np.asarray(norm[1])


def _acc_or_none(net, ds, norm):
    return None if ds is None or len(ds) == 0 else round(accuracy(net, ds, norm), 4)


# --------------------------------------------------------------------------
# subcommands


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, "train")
    _snapshot_config(cfg, out, "train")
    big, _, test = load_datasets(cfg)
    mean, std = big.channel_stats()
    net = build_tiny_resnet(cfg.arch(), seed=cfg.seed)
    tcfg = TrainConfig(epochs=cfg.teacher_epochs, lr=cfg.teacher_lr, warmup_epochs=cfg.teacher_warmup,
                       batch_size=cfg.batch_size, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                       mixup_alpha=cfg.mixup_alpha, seed=cfg.seed)
    metrics = os.path.join(out, "metrics.jsonl")
    if os.path.exists(metrics):
        os.remove(metrics)
    log = MetricsLog(metrics)
    train_supervised(net, big, tcfg, (mean, std), test, log, phase="teacher")
    net.meta = {"role": "teacher", "norm": [mean.tolist(), std.tolist()], "train_digest": big.digest()}
    save_checkpoint(net, os.path.join(out, "teacher.ckpt"))
    report = {"train_accuracy": _acc_or_none(net, big, (mean, std)), "test_accuracy": _acc_or_none(net, test, (mean, std)),
              "final_loss": log.rows[-1]["loss"] if log.rows else None}
    _write_json(os.path.join(out, "train_report.json"), report)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_prune(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, "prune")
    _snapshot_config(cfg, out, "prune", {"teacher": args.teacher})
    net = load_checkpoint(args.teacher)
    norm = _norm(net)
    _, limited, test = load_datasets(cfg)
    idx = sample_proxy(limited, cfg.proxy_size, cfg.seed)
    proxy = make_proxy(net, normalize(limited.images[idx], *norm), idx, limited.labels[idx])
    groups = discover_groups(net)
    scores = score_groups(net, groups, cfg.criterion, proxy, cfg.seed)
    target = {"k": cfg.target_k} if cfg.target_k >= 0 else {"macs_ratio": cfg.target_macs_ratio}
    plan = make_plan(net, groups, scores, target, cfg.retention_floor, cfg.criterion, cfg.seed, proxy.digest)
    plan.save(os.path.join(out, "plan.json"))
    pruned = apply_surgery(net, plan)
    pruned.meta = dict(net.meta, role="pruned", criterion=cfg.criterion, seed=cfg.seed)
    save_checkpoint(pruned, os.path.join(out, "pruned.ckpt"))
    before, after = count_macs_params(net), count_macs_params(pruned)
    report = {
        "criterion": cfg.criterion, "seed": cfg.seed, "target": target, "retention_floor": cfg.retention_floor,
        "removed_groups": len(plan.removed), "shortfall": plan.shortfall,
        "macs_before": before[0], "macs_after": after[0], "params_before": before[1], "params_after": after[1],
        "macs_ratio": after[0] / before[0],
        "accuracy_before": _acc_or_none(net, test, norm), "accuracy_after": _acc_or_none(pruned, test, norm),
        "space_widths_after": pruned.space_widths(),
    }
    _write_json(os.path.join(out, "prune_report.json"), report)
    if plan.shortfall:
        print(f"warning: target not reached: {plan.shortfall}", file=sys.stderr)
    print(json.dumps({k: report[k] for k in ("criterion", "macs_ratio", "accuracy_before", "accuracy_after")},
                     sort_keys=True))
    return 0


def cmd_expand(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, "expand")
    _snapshot_config(cfg, out, "expand")
    _, limited, _ = load_datasets(cfg)
    manifest = write_expanded(expand_dataset(limited, cfg.seed), os.path.join(out, "expanded"))
    print(json.dumps({"count": manifest["count"], "digest": manifest["digest"]}))
    return 0


def cmd_finetune(cfg: RunConfig, args) -> int:
    if args.no_refine:
        cfg = dataclasses.replace(cfg, refine=False, eta=0.0)
    if args.no_expand:
        cfg = dataclasses.replace(cfg, expand=False)
    out = _out_dir(cfg, "finetune")
    _snapshot_config(cfg, out, "finetune", {"teacher": args.teacher, "pruned": args.pruned})
    teacher = load_checkpoint(args.teacher)
    student = load_checkpoint(args.pruned)
    if teacher.class_count != student.class_count:
        raise ConfigError(f"teacher has {teacher.class_count} classes, student {student.class_count}")
    norm = _norm(teacher)
    _, limited, test = load_datasets(cfg)
    expanded = None
    if cfg.arm == "curl" and cfg.expand:
        if cfg.expanded_dir and os.path.exists(os.path.join(cfg.expanded_dir, "manifest.json")):
            expanded = load_expanded(cfg.expanded_dir)
        else:
            if cfg.expanded_dir:
                logger.warning("expanded dataset %s missing; generating with seed %d", cfg.expanded_dir, cfg.seed)
            expanded = expand_dataset(limited, cfg.seed)
    fcfg = FinetuneConfig(arm=cfg.arm, epochs1=cfg.epochs1, epochs2=cfg.epochs2, lr1=cfg.lr1, lr2=cfg.lr2,
                          warmup1=cfg.warmup1, temperature1=cfg.temperature1, temperature2=cfg.temperature2,
                          alpha=cfg.alpha, eta=cfg.eta, mixup_alpha=cfg.mixup_alpha, expand=cfg.expand,
                          refine=cfg.refine, match_budget=cfg.match_budget, batch_size=cfg.batch_size, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay, seed=cfg.seed)
    metrics = os.path.join(out, "metrics.jsonl")
    if os.path.exists(metrics):
        os.remove(metrics)
    result = finetune(student, teacher, limited, fcfg, norm, eval_set=test, expanded=expanded,
                      log=MetricsLog(metrics), store_path=os.path.join(out, "logits.bin"))
    student.meta = dict(student.meta, role="finetuned", arm=cfg.arm)
    save_checkpoint(student, os.path.join(out, "final.ckpt"))
    macs, params = count_macs_params(student)
    report = {"arm": cfg.arm, "seed": cfg.seed, "refine": cfg.refine, "expand": cfg.expand, "eta": cfg.eta,
              "criterion": student.meta.get("criterion"), "final_accuracy": result.final_accuracy,
              "macs": macs, "params": params}
    _write_json(os.path.join(out, "finetune_report.json"), report)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    net = load_checkpoint(args.ckpt)
    norm = _norm(net)
    _, limited, test = load_datasets(cfg)
    macs, params = count_macs_params(net)
    report = {"checkpoint": args.ckpt, "train_accuracy": _acc_or_none(net, limited, norm),
              "test_accuracy": _acc_or_none(net, test, norm), "macs": macs, "params": params}
    print(json.dumps(report, sort_keys=True))
    return 0


def _mean(values):
    vals = [v for v in values if v is not None]
    return (sum(vals) / len(vals)) if vals else None


def _fmt(v, digits=2):
    if v is None:
        return NO_DATA
    if isinstance(v, float):
        return f"{v:.{digits}f}"
    return str(v)


def _table(header, rows) -> str:
    cells = [list(header)] + [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def build_report(run_dir: str) -> tuple[str, dict]:
    prune_reports, ft_reports = [], []
    for root, dirs, files in os.walk(run_dir):
        dirs.sort()
        for name, bucket in (("prune_report.json", prune_reports), ("finetune_report.json", ft_reports)):
            if name in files:
                with open(os.path.join(root, name), encoding="utf-8") as fh:
                    doc = json.load(fh)
                doc["run"] = os.path.relpath(root, run_dir)
                bucket.append(doc)
    by_crit = {c: [r for r in prune_reports if r.get("criterion") == c] for c, _ in CRITERION_COLUMNS}
    crit_row_pre = ["pre-finetune accuracy"] + [_mean([r.get("accuracy_after") for r in by_crit[c]])
                                                for c, _ in CRITERION_COLUMNS]
    crit_row_n = ["runs"] + [len(by_crit[c]) if by_crit[c] else None for c, _ in CRITERION_COLUMNS]
    ft_by_crit = {c: [r for r in ft_reports if r.get("criterion") == c] for c, _ in CRITERION_COLUMNS}
    crit_row_ft = ["final accuracy"] + [_mean([r.get("final_accuracy") for r in ft_by_crit[c]])
                                        for c, _ in CRITERION_COLUMNS]
    criterion_table = _table(["metric"] + [label for _, label in CRITERION_COLUMNS], [crit_row_pre, crit_row_ft, crit_row_n])

    arms = ("plain", "mixup", "kd_mixup", "curl")
    arm_row = ["final accuracy"] + [_mean([r.get("final_accuracy") for r in ft_reports if r.get("arm") == a])
                                    for a in arms]
    arm_table = _table(["metric"] + list(arms), [arm_row])

    size_rows = [[r["run"], r.get("criterion"), r.get("macs_before"), r.get("macs_after"), r.get("params_before"),
                  r.get("params_after"), r.get("accuracy_before"), r.get("accuracy_after")] for r in prune_reports]
    size_table = _table(["run", "criterion", "MACs before", "MACs after", "params before", "params after",
                         "acc before", "acc after"], size_rows)
    text = "\n\n".join([
        "Criterion comparison (mean over runs)", criterion_table,
        "Fine-tuning arms (mean over runs)", arm_table,
        "MACs and parameters", size_table if size_rows else NO_DATA,
    ]) + "\n"
    doc = {
        "criteria": {label: {"pre_finetune_accuracy": crit_row_pre[i + 1], "final_accuracy": crit_row_ft[i + 1],
                             "runs": len(by_crit[c])} for i, (c, label) in enumerate(CRITERION_COLUMNS)},
        "arms": {a: arm_row[i + 1] for i, a in enumerate(arms)},
        "prune_runs": prune_reports,
        "finetune_runs": ft_reports,
    }
    return text, doc


def cmd_report(cfg: RunConfig, args) -> int:
    run_dir = args.run_dir
    if not os.path.isdir(run_dir):
        raise ConfigError(f"run directory {run_dir} does not exist")
    text, doc = build_report(run_dir)
    with open(os.path.join(run_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    _write_json(os.path.join(run_dir, "report.json"), doc)
    print(text, end="")
    return 0


COMMANDS = {"train": cmd_train, "prune": cmd_prune, "finetune": cmd_finetune, "expand": cmd_expand,
            "eval": cmd_eval, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="curlprune", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("-v", "--verbose", action="store_true")
        group = p.add_argument_group("config overrides")
        for f in fields(RunConfig):
            kind = {"bool": _parse_bool, "int": int, "float": float}.get(f.type, str)
            group.add_argument(f"--{f.name}", type=kind, default=None, metavar=f.type.upper())
        if name in ("prune", "finetune"):
            p.add_argument("--teacher", required=True, help="teacher checkpoint")
        if name == "finetune":
            p.add_argument("--pruned", required=True, help="pruned student checkpoint")
            p.add_argument("--no-refine", action="store_true", help="freeze stored teacher logits (eta = 0)")
            p.add_argument("--no-expand", action="store_true", help="run step 2 on the original data")
        if name == "eval":
            p.add_argument("--ckpt", required=True)
        if name == "report":
            p.add_argument("--run_dir", "--run-dir", dest="run_dir",
                           default=os.environ.get("CURLPRUNE_OUT", "runs"))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    try:
        cfg = resolve_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2 if isinstance(err, ConfigError) else 1


if __name__ == "__main__":
    sys.exit(main())
