"""Command-line front end for the full experiment pipeline.

Subcommands: ``generate``, ``corrupt``, ``split``, ``pretrain``,
``train``, ``evaluate``, ``hypergrad-check``. Every command reads an
optional JSON config (strictly validated: unknown keys are rejected),
applies ``--set section.key=value`` overrides (flags win), and writes
into ``--out``: the resolved ``config.json``, a ``seed`` file, the
command's artifacts, and a ``manifest.json`` listing output files with
sha256 hashes. Outputs are deterministic given the config and seed.

Errors are emitted as one JSON object on stderr; exit codes: 0 success,
2 config/data errors, 3 tolerance failure in ``hypergrad-check``.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import ignoring as ig
from . import metrics as mt
from . import models as M
from . import pretraining as P
from . import svgplot
from .diffcore import ParameterSet, make_rng
from .errors import ConfigError, LbiError

DEFAULT_CONFIG = {
    "seed": 0,
    "data": {
        "n": 2000,
        "d_img": 16,
        "n_concepts": 8,
        "noise_sigma": 0.3,
        "n_contexts": 3,
        "vocab_cap": 4631,
    },
    "corruption": {"label_flip_rate": 0.3, "mismatch_rate": 0.0},
    "split": {"ratios": [3, 1, 1], "stratify_by_type": True},
    "model": {"embed_dim": 16, "hidden_dim": 32},
    "train": {
        "epochs": 60,
        "batch_size": 64,
        "lr": 0.005,
        "betas": [0.9, 0.999],
        "use_image": True,
    },
    "ignoring": {
        "epochs": 60,
        "train_batch_size": 64,
        "val_batch_size": 128,
        "lr_w": 0.005,
        "betas_w": [0.9, 0.999],
        "lr_a": 0.01,
        "betas_a": [0.5, 0.999],
        "weight_decay_a": 3e-4,
        "xi": None,
        "fd_eps": None,
        "fd_eps_base": 1e-4,
        "removal_threshold": 0.5,
    },
    "pretrain": {
        "weights": [1, 1, 1],
        "epochs": 30,
        "batch_size": 256,
        "lr": 0.005,
        "betas": [0.5, 0.999],
        "negative_ratio": 1.0,
        "resample_pairs": True,
    },
    "hypergrad_check": {"n_instances": 50, "tolerance": 1e-2},
}

_NULLABLE = {("ignoring", "xi"), ("ignoring", "fd_eps"), ("ignoring", "removal_threshold")}

# deterministic per-purpose seed streams derived from the top-level seed
_SEED_STREAMS = {
    "data": 0,
    "corruption": 1,
    "split": 2,
    "model": 3,
    "train": 4,
    "pretrain": 5,
    "pretrain_model": 6,
    "retrain": 7,
    "check": 8,
}


def derive_seed(seed: int, purpose: str) -> int:
    return seed * 1009 + _SEED_STREAMS[purpose]


# ---------------------------------------------------------------------------
# Config plumbing.
# ---------------------------------------------------------------------------


def _check_value(path: str, value, default) -> None:
    key = tuple(path.split("."))
    if value is None:
        if key in _NULLABLE:
            return
        raise ConfigError(f"config field {path!r} must not be null")
    if default is None:
        # nullable fields hold numbers when set
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config field {path!r} must be a number or null")
        return
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config field {path!r} must be a boolean")
    elif isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config field {path!r} must be an integer")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config field {path!r} must be a number")
    elif isinstance(default, list):
        if not isinstance(value, list) or len(value) != len(default):
            raise ConfigError(
                f"config field {path!r} must be a list of length {len(default)}"
            )
        for item in value:
            if isinstance(item, bool) or not isinstance(item, (int, float)):
                raise ConfigError(f"config field {path!r} must hold numbers")


def resolve_config(overrides: dict | None) -> dict:
    """Defaults deep-merged with ``overrides``; unknown keys rejected."""
    resolved = copy.deepcopy(DEFAULT_CONFIG)
    if overrides is None:
        return resolved
    if not isinstance(overrides, dict):
        raise ConfigError("config document must be a JSON object")
    for section, value in overrides.items():
        if section not in resolved:
            raise ConfigError(f"unknown config key {section!r}")
        if isinstance(resolved[section], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            for key, sub in value.items():
                if key not in resolved[section]:
                    raise ConfigError(f"unknown config key {section!r}.{key!r}")
                default = DEFAULT_CONFIG[section][key]
                _check_value(f"{section}.{key}", sub, default)
                resolved[section][key] = sub
        else:
            _check_value(section, value, resolved[section])
            resolved[section] = value
    return resolved


def apply_set_overrides(config_doc: dict, assignments: list[str]) -> dict:
    """--set section.key=json_value, applied on top of the config file."""
    doc = copy.deepcopy(config_doc) if config_doc else {}
    for assignment in assignments or []:
        if "=" not in assignment:
            raise ConfigError(f"--set expects section.key=value, got {assignment!r}")
        target, raw = assignment.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # bare strings allowed
        parts = target.split(".")
        if len(parts) == 1:
            doc[parts[0]] = value
        elif len(parts) == 2:
            doc.setdefault(parts[0], {})[parts[1]] = value
        else:
            raise ConfigError(f"--set path too deep: {target!r}")
    return doc


def load_config(args) -> dict:
    doc = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        doc = json.loads(path.read_text())
    doc = apply_set_overrides(doc, getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    return resolve_config(doc)


def config_hash(resolved: dict) -> str:
    canon = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Output directory plumbing.
# ---------------------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class OutputDir:
    def __init__(self, root, command: str, config: dict):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.config = config
        self.hash = config_hash(config)
        _write_json(self.root / "config.json", config)
        (self.root / "seed").write_text(str(config["seed"]) + "\n")
        self.files = ["config.json", "seed"]

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.root / name

    def finish(self) -> Path:
        manifest = {
            "command": self.command,
            "config_hash": self.hash,
            "seed": self.config["seed"],
            "files": {
                name: _sha256(self.root / name) for name in sorted(set(self.files))
            },
        }
        _write_json(self.root / "manifest.json", manifest)
        return self.root / "manifest.json"


def _load_split(path, answer_table):
    examples = D.load_dataset(path)
    D.bind_answer_classes(examples, answer_table)
    return examples


def _dims_from(meta: dict, config: dict) -> M.ModelDims:
    return M.ModelDims(
        d_img=meta["d_img"],
        vocab_size=len(meta["vocab"]),
        embed_dim=config["model"]["embed_dim"],
        hidden_dim=config["model"]["hidden_dim"],
        n_answers=len(meta["answers"]),
    )


# ---------------------------------------------------------------------------
# Commands.
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    config = load_config(args)
    out = OutputDir(args.out, "generate", config)
    d = config["data"]
    dataset = D.generate_synthetic(
        n=d["n"],
        d_img=d["d_img"],
        n_concepts=d["n_concepts"],
        seed=derive_seed(config["seed"], "data"),
        noise_sigma=d["noise_sigma"],
        n_contexts=d["n_contexts"],
        vocab_cap=d["vocab_cap"],
    )
    D.save_dataset(dataset.examples, out.path("dataset.jsonl"))
    D.save_meta(
        out.path("meta.json"), dataset,
        extra={"seed": config["seed"], "config_hash": out.hash},
    )
    out.finish()
    return 0


def cmd_corrupt(args) -> int:
    config = load_config(args)
    out = OutputDir(args.out, "corrupt", config)
    meta = D.load_meta(args.meta)
    examples = D.load_dataset(args.dataset)
    D.bind_answer_classes(examples, meta["answers"])
    spec = D.CorruptionSpec(
        label_flip_rate=config["corruption"]["label_flip_rate"],
        mismatch_rate=config["corruption"]["mismatch_rate"],
        seed=derive_seed(config["seed"], "corruption"),
    )
    corrupted, mask = D.corrupt(examples, spec, meta["answers"])
    D.save_dataset(corrupted, out.path("dataset.jsonl"))
    _write_json(out.path("mask.json"), mask)
    out.finish()
    return 0


def cmd_split(args) -> int:
    config = load_config(args)
    out = OutputDir(args.out, "split", config)
    examples = D.load_dataset(args.dataset)
    spec = D.SplitSpec(
        ratios=tuple(config["split"]["ratios"]),
        stratify_by_type=config["split"]["stratify_by_type"],
        seed=derive_seed(config["seed"], "split"),
    )
    train, val, test = D.stratified_split(examples, spec)
    D.save_dataset(train, out.path("train.jsonl"))
    D.save_dataset(val, out.path("val.jsonl"))
    D.save_dataset(test, out.path("test.jsonl"))
    _write_json(
        out.path("split_manifest.json"),
        D.split_manifest(train, val, test, spec.seed, config["split"]["ratios"]),
    )
    out.finish()
    return 0


def _pretrain_config(config: dict, seed: int) -> P.PretrainConfig:
    pc = config["pretrain"]
    w = pc["weights"]
    return P.PretrainConfig(
        weights=P.JointWeights(w[0], w[1], w[2]),
        epochs=pc["epochs"],
        batch_size=pc["batch_size"],
        lr=pc["lr"],
        betas=tuple(pc["betas"]),
        negative_ratio=pc["negative_ratio"],
        seed=seed,
        resample_pairs=pc["resample_pairs"],
    )


def cmd_pretrain(args) -> int:
    config = load_config(args)
    out = OutputDir(args.out, "pretrain", config)
    meta = D.load_meta(args.meta)
    examples = _load_split(args.train, meta["answers"])
    vocab = D.Vocabulary(meta["vocab"])
    dims = _dims_from(meta, config)
    model = M.TwoTowerModel.create(dims, derive_seed(config["seed"], "pretrain_model"))
    curves = P.pretrain(
        model, examples, vocab,
        _pretrain_config(config, derive_seed(config["seed"], "pretrain")),
    )
    P.write_curves_csv(curves, out.path("curves.csv"))
    M.save_checkpoint(
        out.path("checkpoint.json"),
        M.Checkpoint(
            kind="two_tower",
            model=model,
            seed_lineage={
                "seed": config["seed"],
                "model_init": derive_seed(config["seed"], "pretrain_model"),
                "pretrain": derive_seed(config["seed"], "pretrain"),
            },
            vocab_tokens=meta["vocab"],
            answer_table=meta["answers"],
            config_hash=out.hash,
        ),
    )
    if args.plot:
        svgplot.line_plot(
            {
                key: [row[key] for row in curves]
                for key in ("loss_iq", "loss_ia", "loss_qa", "loss_joint")
            },
            out.path("curves.svg"),
            title="pretraining losses",
        )
    out.finish()
    return 0


def _report_payload(report: mt.EvalReport) -> dict:
    return report.to_dict()


def cmd_train(args) -> int:
    config = load_config(args)
    out = OutputDir(args.out, "train", config)
    meta = D.load_meta(args.meta)
    vocab = D.Vocabulary(meta["vocab"])
    answers = meta["answers"]
    train_examples = _load_split(args.train, answers)
    val_examples = _load_split(args.val, answers)
    test_examples = _load_split(args.test, answers)
    dims = _dims_from(meta, config)
    model_seed = derive_seed(config["seed"], "model")
    model = M.TwoTowerModel.create(dims, model_seed)
    if args.pretrained:
        ckpt = M.load_checkpoint(args.pretrained)
        if not isinstance(ckpt.model, M.TwoTowerModel):
            raise ConfigError("--pretrained expects a two-tower checkpoint")
        model = M.transfer_encoders(ckpt.model, model)

    use_ignoring = args.ignoring == "on"
    train_seed = derive_seed(config["seed"], "train")
    payload = {
        "config_hash": out.hash,
        "config": config,
        "seed": config["seed"],
        "ignoring": use_ignoring,
        "pretrained": bool(args.pretrained),
    }
    tc = config["train"]
    if use_ignoring:
        igc = config["ignoring"]
        lbi_cfg = ig.LbiConfig(
            epochs=igc["epochs"],
            train_batch_size=igc["train_batch_size"],
            val_batch_size=igc["val_batch_size"],
            lr_w=igc["lr_w"],
            betas_w=tuple(igc["betas_w"]),
            lr_a=igc["lr_a"],
            betas_a=tuple(igc["betas_a"]),
            weight_decay_a=igc["weight_decay_a"],
            xi=igc["xi"],
            fd_eps=igc["fd_eps"],
            fd_eps_base=igc["fd_eps_base"],
            seed=train_seed,
            removal_threshold=igc["removal_threshold"],
        )
        train_batch = M.make_vqa_batch(train_examples, vocab.size, dims.n_answers)
        val_batch = M.make_vqa_batch(val_examples, vocab.size, dims.n_answers)
        task = ig.VqaTask(model, train_batch, val_batch, use_image=tc["use_image"])
        result = ig.lbi_train(task, lbi_cfg)
        final_a = result.final_weights()
        corrupted = (
            np.array([bool(ex.corrupted) for ex in train_examples])
            if all(ex.corrupted is not None for ex in train_examples)
            else None
        )
        result.trace.write_csv(
            out.path("trace.csv"),
            example_ids=[ex.id for ex in train_examples],
            corrupted=corrupted,
        )
        report = P.evaluate_answer_model(
            model, test_examples, answers, use_image=tc["use_image"]
        )
        payload["metrics"] = _report_payload(report)
        payload["mean_a"] = float(np.mean(final_a))
        if corrupted is not None and corrupted.any() and not corrupted.all():
            payload["detection_auc"] = ig.detection_auc(final_a, corrupted)
            payload["mean_a_clean"] = float(np.mean(final_a[~corrupted]))
            payload["mean_a_corrupted"] = float(np.mean(final_a[corrupted]))
        if lbi_cfg.removal_threshold is not None:
            kept, removed_ids = ig.apply_removal(
                train_examples, final_a, lbi_cfg.removal_threshold
            )
            retrain_model = M.TwoTowerModel.create(dims, model_seed)
            if args.pretrained:
                retrain_model = M.transfer_encoders(ckpt.model, retrain_model)
            kept_batch = M.make_vqa_batch(kept, vocab.size, dims.n_answers)
            M.train_answer_model(
                retrain_model,
                kept_batch,
                M.TrainConfig(
                    epochs=tc["epochs"],
                    batch_size=tc["batch_size"],
                    lr=tc["lr"],
                    betas=tuple(tc["betas"]),
                    seed=derive_seed(config["seed"], "retrain"),
                    use_image=tc["use_image"],
                ),
            )
            removal_report = P.evaluate_answer_model(
                retrain_model, test_examples, answers, use_image=tc["use_image"]
            )
            payload["removal"] = {
                "threshold": lbi_cfg.removal_threshold,
                "n_removed": len(removed_ids),
                "removed_ids": removed_ids,
                "metrics": _report_payload(removal_report),
            }
        if args.plot:
            svgplot.histogram(
                final_a, out.path("a_hist.svg"), title="final ignoring weights"
            )
            svgplot.line_plot(
                {
                    "train": [
                        float(np.mean(s.train_losses)) for s in result.trace.snapshots
                    ],
                    "val": [s.mean_val_loss for s in result.trace.snapshots],
                },
                out.path("loss.svg"),
                title="mean losses per epoch",
            )
    else:
        batch = M.make_vqa_batch(train_examples, vocab.size, dims.n_answers)
        curve = M.train_answer_model(
            model,
            batch,
            M.TrainConfig(
                epochs=tc["epochs"],
                batch_size=tc["batch_size"],
                lr=tc["lr"],
                betas=tuple(tc["betas"]),
                seed=train_seed,
                use_image=tc["use_image"],
            ),
        )
        with open(out.path("train_curve.csv"), "w") as fh:
            fh.write("epoch,loss\n")
            for epoch, loss in enumerate(curve):
                fh.write(f"{epoch},{loss!r}\n")
        report = P.evaluate_answer_model(
            model, test_examples, answers, use_image=tc["use_image"]
        )
        payload["metrics"] = _report_payload(report)
        if args.plot:
            svgplot.line_plot({"train": curve}, out.path("loss.svg"), title="mean loss")

    M.save_checkpoint(
        out.path("checkpoint.json"),
        M.Checkpoint(
            kind="two_tower",
            model=model,
            seed_lineage={
                "seed": config["seed"],
                "model_init": model_seed,
                "train": train_seed,
            },
            vocab_tokens=meta["vocab"],
            answer_table=answers,
            config_hash=out.hash,
        ),
    )
    _write_json(out.path("report.json"), payload)
    report.to_tsv(out.path("report.tsv"))
    out.finish()
    return 0


def cmd_evaluate(args) -> int:
    config = load_config(args)
    out = OutputDir(args.out, "evaluate", config)
    ckpt = M.load_checkpoint(args.checkpoint)
    if ckpt.answer_table is None:
        raise ConfigError("checkpoint carries no answer table; cannot evaluate")
    examples = _load_split(args.split, ckpt.answer_table)
    report = P.evaluate_answer_model(
        ckpt.model, examples, ckpt.answer_table, use_image=not args.no_image
    )
    payload = {"config_hash": out.hash, "metrics": _report_payload(report)}
    _write_json(out.path("report.json"), payload)
    report.to_tsv(out.path("report.tsv"))
    out.finish()
    return 0


def _closed_form_instance():
    problem = ig.LeastSquaresProblem([[1.0]], [1.0], [[1.0]], [1.0])
    params = ParameterSet({"w": np.array([0.0])})
    return problem, params, np.ones(1), 0.1


def cmd_hypergrad_check(args) -> int:
    config = load_config(args)
    out = OutputDir(args.out, "hypergrad-check", config)
    hc = config["hypergrad_check"]
    tolerance = hc["tolerance"]
    rng = make_rng(derive_seed(config["seed"], "check"))
    instances = []

    problem, params, a, xi = _closed_form_instance()
    fd = ig.hypergrad_fd(problem, params, a, xi)
    exact = ig.hypergrad_exact(problem, params, a, xi)
    closed = ig.HypergradientReport(fd, exact)
    instances.append({"name": "closed-form-1d", **closed.to_dict()})

    for k in range(hc["n_instances"]):
        n_tr = int(rng.integers(2, 11))
        n_val = int(rng.integers(1, 6))
        dim = int(rng.integers(1, 5))
        problem = ig.LeastSquaresProblem(
            rng.uniform(-2, 2, (n_tr, dim)),
            rng.uniform(-2, 2, n_tr),
            rng.uniform(-2, 2, (n_val, dim)),
            rng.uniform(-2, 2, n_val),
        )
        params = ParameterSet({"w": rng.uniform(-1, 1, dim)})
        a = rng.uniform(0.1, 0.9, n_tr)
        fd = ig.hypergrad_fd(problem, params, a, 0.05)
        exact = ig.hypergrad_exact(problem, params, a, 0.05)
        rep = ig.HypergradientReport(fd, exact)
        instances.append({"name": f"least-squares-{k}", **rep.to_dict()})

    max_rel = max(inst["max_rel_deviation"] for inst in instances)
    passed = (
        max_rel < tolerance and abs(closed.estimate[0] - (-0.09)) < 1e-6
    )
    payload = {
        "config_hash": out.hash,
        "tolerance": tolerance,
        "closed_form_estimate": float(closed.estimate[0]),
        "closed_form_expected": -0.09,
        "max_rel_deviation": max_rel,
        "passed": bool(passed),
        "instances": instances,
    }
    _write_json(out.path("hypergrad_report.json"), payload)
    out.finish()
    return 0 if passed else 3


# ---------------------------------------------------------------------------
# Argument parsing.
# ---------------------------------------------------------------------------


def _add_common(sub):
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--config", help="JSON config file")
    sub.add_argument("--seed", type=int, help="override the top-level seed")
    sub.add_argument(
        "--set",
        action="append",
        metavar="SECTION.KEY=VALUE",
        help="override one config field (JSON-parsed value); repeatable",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lbi",
        description=(
            "Synthetic multimodal QA pipeline: generate data, corrupt it, "
            "split it, pretrain with self-supervised pairing tasks, train "
            "with learned per-example ignoring weights, and evaluate."
        ),
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("generate", help="generate a synthetic dataset")
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = subs.add_parser("corrupt", help="inject label flips / image mismatches")
    p.add_argument("--dataset", required=True)
    p.add_argument("--meta", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_corrupt)

    p = subs.add_parser("split", help="stratified train/val/test split")
    p.add_argument("--dataset", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_split)

    p = subs.add_parser("pretrain", help="joint self-supervised pretraining")
    p.add_argument("--train", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--plot", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = subs.add_parser("train", help="supervised training, with or without ignoring")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--ignoring", choices=["on", "off"], default="off")
    p.add_argument("--pretrained", help="checkpoint whose encoders seed the model")
    p.add_argument("--plot", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("evaluate", help="score a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--no-image", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = subs.add_parser(
        "hypergrad-check",
        help="compare the fast hypergradient against the exact unrolled oracle",
    )
    _add_common(p)
    p.set_defaults(func=cmd_hypergrad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LbiError as err:
        print(
            json.dumps(
                {"error": {"kind": type(err).__name__, "message": str(err)}},
                sort_keys=True,
            ),
            file=sys.stderr,
        )
        return 2
    except FileNotFoundError as err:
        print(
            json.dumps(
                {"error": {"kind": "FileNotFound", "message": str(err)}},
                sort_keys=True,
            ),
            file=sys.stderr,
        )
        return 2


if __name__ == "__main__":
    sys.exit(main())
