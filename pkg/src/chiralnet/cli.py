"""Command-line entry point.

Subcommands: generate, verify, train, eval, transform, inspect. Runs are
driven by a JSON config file with sections mirroring the module-level
options; unknown keys are rejected, flags override file values, and every
artifact embeds the resolved config plus the seed so runs can be repeated
exactly.

Exit codes: 0 success, 1 a check or metric defined as failing failed,
2 usage/config errors (including invalid transforms).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geom, molio, synthgen, training, verify
from .model import Model, ModelConfig
from .molio import FeatureConfig
from .synthgen import GenSpec, SplitManifest
from .training import TrainOptions


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    generate: dict = field(default_factory=dict)
    train: TrainOptions = field(default_factory=TrainOptions)
    eval: dict = field(default_factory=dict)
    verify: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "threads": self.threads,
            "features": self.features.to_dict(),
            "model": self.model.to_dict(),
            "generate": dict(self.generate),
            "train": self.train.to_dict(),
            "eval": dict(self.eval),
            "verify": dict(self.verify),
        }


_GENERATE_KEYS = {
    "task", "n_graphs", "conformers_per_stereoisomer", "jitter_sigma",
    "score_margin_range", "score_base_range",
}
_TRAIN_KEYS = {
    "task", "lr", "batch_size", "epochs", "scheme", "max_grad_norm",
    "val_triplets_per_stereoisomer",
}
_EVAL_KEYS = {"task", "margins"}
_VERIFY_KEYS = {"sample_size", "gradient_checks", "kinds"}
_FEATURE_KEYS = {
    "elements", "charges", "degrees", "h_counts", "hybridizations",
    "bond_orders", "include_chiral_tags",
}
_MODEL_KEYS = {
    "node_dim", "edge_dim", "h_dims", "gat_layers", "gat_heads", "f_e", "f_d",
    "f_angle", "f_alpha", "f_c", "f_phase", "f_out", "f_cmp", "z_dim",
    "use_cmp", "cmp_layers", "cmp_heads", "freeze_fc", "freeze_fphase",
    "mask_internal_coords", "gamma_aux", "task_head", "leaky_slope",
    "attention_slope",
}


def _reject_unknown(section: str, data: dict, allowed: set):
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in config section {section!r}")


def load_config(path: str | None, overrides: list[str] | None = None) -> RunConfig:
    """Load, validate and resolve a run config; `overrides` are repeated
    section.key=json-value assignments that win over the file."""
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: invalid JSON ({exc.msg})") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    for assignment in overrides or []:
        if "=" not in assignment:
            raise ConfigError(f"override {assignment!r} must look like section.key=value")
        dotted, _, value = assignment.partition("=")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value  # bare strings allowed
        target = raw
        *parents, leaf = dotted.split(".")
        for part in parents:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise ConfigError(f"override {assignment!r} descends into a non-object")
        target[leaf] = parsed

    _reject_unknown("<root>", raw, {
        "seed", "threads", "features", "model", "generate", "train", "eval", "verify",
    })
    features_raw = dict(raw.get("features", {}))
    _reject_unknown("features", features_raw, _FEATURE_KEYS)
    try:
        features = FeatureConfig.from_dict(features_raw)
    except TypeError as exc:
        raise ConfigError(f"features: {exc}") from None

    model_raw = dict(raw.get("model", {}))
    _reject_unknown("model", model_raw, _MODEL_KEYS)
    model_raw.setdefault("node_dim", features.node_width)
    model_raw.setdefault("edge_dim", features.edge_width)
    try:
        model = ModelConfig.from_dict(model_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from None
    if model.node_dim != features.node_width or model.edge_dim != features.edge_width:
        raise ConfigError(
            f"model dims ({model.node_dim}, {model.edge_dim}) do not match the "
            f"featurizer ({features.node_width}, {features.edge_width})"
        )

    generate_raw = dict(raw.get("generate", {}))
    _reject_unknown("generate", generate_raw, _GENERATE_KEYS)
    train_raw = dict(raw.get("train", {}))
    _reject_unknown("train", train_raw, _TRAIN_KEYS)
    eval_raw = dict(raw.get("eval", {}))
    _reject_unknown("eval", eval_raw, _EVAL_KEYS)
    verify_raw = dict(raw.get("verify", {}))
    _reject_unknown("verify", verify_raw, _VERIFY_KEYS)

    seed = raw.get("seed", 0)
    train_opts = TrainOptions(seed=seed, **train_raw)
    if train_opts.task not in training.TASKS:
        raise ConfigError(f"train.task must be one of {training.TASKS}")
    if train_opts.scheme not in training.SCHEMES:
        raise ConfigError(f"train.scheme must be one of {training.SCHEMES}")
    return RunConfig(
        seed=seed,
        threads=int(raw.get("threads", 1)),
        features=features,
        model=model,
        generate=generate_raw,
        train=train_opts,
        eval=eval_raw,
        verify=verify_raw,
    )


def _head_for_task(task: str) -> str:
    return {
        "contrastive": "embed", "rs": "classify2",
        "classify2": "classify2", "rank_regress": "regress",
    }[task]


def _read_records(path: str):
    return molio.parse_dataset_json(Path(path).read_text(encoding="utf-8"))


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    config = load_config(args.config, args.set)
    gen = dict(config.generate)
    task = gen.pop("task", config.train.task)
    if "score_margin_range" in gen:
        gen["score_margin_range"] = tuple(gen["score_margin_range"])
    if "score_base_range" in gen:
        gen["score_base_range"] = tuple(gen["score_base_range"])
    spec = GenSpec(seed=config.seed, **gen)
    records, manifest = synthgen.build_dataset(spec, task)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "dataset.jsonl").write_text(
        molio.write_dataset_json(records), encoding="utf-8"
    )
    payload = manifest.to_dict()
    payload.update({"config": config.to_dict(), "seed": config.seed, "task": task})
    _write_json(out_dir / "splits.json", payload)
    print(
        f"wrote {len(records)} conformers "
        f"({len(manifest.train)}/{len(manifest.val)}/{len(manifest.test)} graph splits) "
        f"to {out_dir}"
    )
    return 0


def _model_from(config: RunConfig, checkpoint: str | None, head: str) -> Model:
    if checkpoint:
        return Model.load(checkpoint)
    cfg = config.model
    if cfg.task_head != head:
        cfg = ModelConfig.from_dict({**cfg.to_dict(), "task_head": head})
    return Model.initialize(cfg, config.features, seed=config.seed)


def cmd_verify(args) -> int:
    config = load_config(args.config, args.set)
    records = _read_records(args.data)
    model = _model_from(config, args.checkpoint, config.model.task_head)
    opts = dict(config.verify)
    report = verify.run_suite(
        records, model, seed=config.seed,
        sample_size=int(opts.get("sample_size", 100)),
        threads=config.threads,
        kinds=tuple(opts.get("kinds", verify.CHECK_KINDS)),
        gradient_checks=int(opts.get("gradient_checks", 1)),
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.jsonl").write_text(report.to_jsonl(), encoding="utf-8")
    _write_json(
        out_dir / "summary.json",
        {"config": config.to_dict(), "seed": config.seed,
         "passed": report.passed, "summary": report.summary},
    )
    for kind, entry in report.summary["kinds"].items():
        print(f"{kind}: {entry['passed']}/{entry['checked']} ok={entry['ok']}")
    print(f"suite {'PASSED' if report.passed else 'FAILED'}")
    return 0 if report.passed else 1


def cmd_train(args) -> int:
    config = load_config(args.config, args.set)
    records = _read_records(args.data)
    manifest = SplitManifest.from_dict(
        json.loads(Path(args.splits).read_text(encoding="utf-8"))
    )
    train_idx, val_idx, _ = training.split_dataset(records, manifest)
    head = _head_for_task(config.train.task)
    model = _model_from(config, args.checkpoint, head)
    result = training.fit(model, train_idx, val_idx, config.train)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    best = Model(model.config, model.feature_config, result.best_store)
    best.save(
        out_dir / "checkpoint.json",
        extra={"run_config": config.to_dict(), "seed": config.seed,
               "best_val_metric": result.best_metric},
    )
    with open(out_dir / "log.jsonl", "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"config": config.to_dict(), "seed": config.seed}) + "\n")
        for record in result.log:
            fh.write(json.dumps(record) + "\n")
    print(
        f"trained {config.train.task} for {len(result.log)} epochs; "
        f"best val metric {result.best_metric}"
    )
    return 0


def cmd_eval(args) -> int:
    config = load_config(args.config, args.set)
    records = _read_records(args.data)
    task = config.eval.get("task", config.train.task)
    model = Model.load(args.checkpoint)
    if args.splits:
        manifest = SplitManifest.from_dict(
            json.loads(Path(args.splits).read_text(encoding="utf-8"))
        )
        _, _, test_idx = training.split_dataset(records, manifest)
        records = test_idx.records
    metrics = training.evaluate_metrics(
        model, records, task, margins=config.eval.get("margins")
    )
    _write_json(
        Path(args.out),
        {"config": config.to_dict(), "seed": config.seed, "metrics": metrics},
    )
    printable = {k: v for k, v in metrics.items() if k != "margin_slices"}
    print(json.dumps(printable, indent=2))
    return 0


def _parse_rotate_bond(text: str):
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError("--rotate-bond expects x,y,angle")
    return int(parts[0]), int(parts[1]), float(parts[2])


def cmd_transform(args) -> int:
    records = _read_records(args.input)
    modes = (args.reflect, args.rotate_bond is not None, args.rigid_random is not None)
    if sum(modes) != 1:
        raise ConfigError("choose exactly one of --reflect / --rotate-bond / --rigid-random")
    out = []
    if args.reflect:
        transform = geom.Reflection(np.array([0.0, 0.0, 1.0]))
        out = [geom.transform_conformer(r, transform) for r in records]
    elif args.rotate_bond is not None:
        x, y, angle = _parse_rotate_bond(args.rotate_bond)
        out = [
            geom.transform_conformer(r, geom.BondRotation(x, y, angle)) for r in records
        ]
    else:
        rng = np.random.default_rng(int(args.rigid_random))
        out = [
            geom.transform_conformer(r, geom.random_rigid(rng)) for r in records
        ]
    Path(args.out).write_text(molio.write_dataset_json(out), encoding="utf-8")
    print(f"transformed {len(out)} conformers -> {args.out}")
    return 0


def cmd_inspect(args) -> int:
    records = _read_records(args.input)
    limit = args.limit if args.limit is not None else 5
    for record in records[:limit]:
        internal = geom.enumerate_internal_coords(record)
        print(
            f"{record.stereoisomer_id} (graph {record.graph_id}): "
            f"{record.n_atoms} atoms, {len(record.bonds)} bonds, rs={record.labels.rs}"
        )
        print(
            f"  distances: {len(internal.bond_lengths)}  "
            f"angles: {len(internal.angle_values)}  "
            f"torsion groups: {len(internal.torsion_groups)}"
        )
        for group in internal.torsion_groups:
            torsions = ", ".join(
                f"({i},{j}): {psi:+.3f}" for (i, j), psi in zip(group.pairs, group.angles)
            )
            print(f"  bond {group.bond}: {len(group.pairs)} coupled torsions  [{torsions}]")
    if len(records) > limit:
        print(f"... {len(records) - limit} more records")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chiralnet",
        description="chirality-aware conformer encoder toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON run config")
        p.add_argument(
            "--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
            help="override a config value (repeatable; flags win over the file)",
        )

    p = sub.add_parser("generate", help="build a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("verify", help="run the invariance check suite")
    common(p)
    p.add_argument("--data", required=True, help="dataset JSONL")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--checkpoint", default=None, help="warm start from a checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--splits", default=None, help="restrict to the test split")
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("transform", help="transform every conformer in a dataset")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reflect", action="store_true", help="mirror through the xy-plane")
    p.add_argument("--rotate-bond", default=None, metavar="X,Y,ANGLE")
    p.add_argument("--rigid-random", default=None, metavar="SEED")
    p.set_defaults(fn=cmd_transform)

    p = sub.add_parser("inspect", help="print internal-coordinate summaries")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(fn=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, molio.SchemaError, training.DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except geom.GeometryError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
