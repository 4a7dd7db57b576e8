"""Self-supervised pretraining tasks and the pretrain-then-finetune path.

Three tasks share the two-tower encoders:

* ``iq`` — does this question belong to this image? (binary match)
* ``ia`` — does this answer belong to this image? The answer text goes
  through the question encoder.
* ``qa`` — predict the answer class from the question alone (the
  image branch is zeroed), teaching question/answer correspondence.

Joint pretraining minimizes the weighted sum of the three mean losses,
drawing an independent batch per task each step. Pretrained encoders are
then copied into a fresh model and fine-tuned on labeled examples.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .diffcore import Adam, make_rng
from .errors import ConfigError, DataError, RunError
from .metrics import EvalReport, evaluate_answers
from .models import (
    ModelDims,
    PairBatch,
    TrainConfig,
    TwoTowerModel,
    VqaBatch,
    make_pair_batch,
    make_vqa_batch,
    train_answer_model,
    transfer_encoders,
)

PAIR_MODES = ("iq", "ia")


@dataclass
class JointWeights:
    """Non-negative weights for the iq/ia/qa losses."""

    iq: float = 1.0
    ia: float = 1.0
    qa: float = 1.0

    def __post_init__(self):
        for name in ("iq", "ia", "qa"):
            if getattr(self, name) < 0:
                raise ConfigError(f"joint weight {name} must be >= 0")

    def active(self) -> tuple[str, ...]:
        return tuple(n for n in ("iq", "ia", "qa") if getattr(self, n) > 0)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.iq, self.ia, self.qa)


@dataclass
class PretrainConfig:
    weights: JointWeights = field(default_factory=JointWeights)
    epochs: int = 30
    batch_size: int = 256
    lr: float = 0.005
    betas: tuple[float, float] = (0.5, 0.999)
    negative_ratio: float = 1.0
    seed: int = 0
    resample_pairs: bool = True  # fresh negatives every epoch when set

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size <= 0:
            raise ConfigError("batch size must be positive")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.negative_ratio <= 0:
            raise ConfigError(
                f"negative ratio must be positive, got {self.negative_ratio}"
            )


def _answer_tokens(example, vocab) -> list[int]:
    tokens = vocab.encode(example.answer.split())
    if not tokens:
        raise DataError(f"example {example.id} has an empty answer")
    return tokens


def sample_pairs(
    examples,
    vocab,
    mode: str,
    negative_ratio: float = 1.0,
    seed: int = 0,
) -> PairBatch:
    """All positives plus round(ratio * n) negatives, shuffled.

    Positives pair each image with its own question (``iq``) or answer
    (``ia``); negatives pair an image with the text of a uniformly drawn
    different example, so a negative never shares a source id.
    """
    if mode not in PAIR_MODES:
        raise ConfigError(f"pair mode must be one of {PAIR_MODES}, got {mode!r}")
    if len(examples) < 2:
        raise DataError("pair sampling needs at least 2 distinct examples")
    if negative_ratio <= 0:
        raise ConfigError("negative ratio must be positive")
    rng = make_rng(seed)
    n = len(examples)

    def right_tokens(ex):
        return list(ex.question) if mode == "iq" else _answer_tokens(ex, vocab)

    images = [ex.image_features for ex in examples]
    lefts, rights, labels, left_ids, right_ids = [], [], [], [], []
    for ex in examples:
        lefts.append(ex.image_features)
        rights.append(right_tokens(ex))
        labels.append(1.0)
        left_ids.append(ex.id)
        right_ids.append(ex.id)
    n_neg = int(round(negative_ratio * n))
    for _ in range(n_neg):
        i = int(rng.integers(0, n))
        j = i
        while j == i:
            j = int(rng.integers(0, n))
        lefts.append(images[i])
        rights.append(right_tokens(examples[j]))
        labels.append(0.0)
        left_ids.append(examples[i].id)
        right_ids.append(examples[j].id)

    order = rng.permutation(len(labels))
    batch = make_pair_batch(
        np.asarray(lefts, dtype=np.float64),
        rights,
        np.asarray(labels),
        np.asarray(left_ids),
        np.asarray(right_ids),
        vocab.size,
    )
    return batch.take(order)


def ssl_qa_losses(model: TwoTowerModel, batch: VqaBatch, params=None) -> np.ndarray:
    """Answer-from-question losses; identical to the no-image forward."""
    return model.answer_per_example_losses(batch, use_image=False, params=params)


def joint_pretrain_loss(
    model: TwoTowerModel,
    iq_batch: PairBatch | None,
    ia_batch: PairBatch | None,
    qa_batch: VqaBatch | None,
    weights: JointWeights,
) -> float:
    """weights.iq * mean(iq) + weights.ia * mean(ia) + weights.qa * mean(qa)."""
    if not weights.active():
        raise ConfigError("at least one joint weight must be positive")
    total = 0.0
    for name, batch in (("iq", iq_batch), ("ia", ia_batch), ("qa", qa_batch)):
        lam = getattr(weights, name)
        if lam == 0:
            continue
        if batch is None:
            raise DataError(f"task {name!r} has positive weight but no batch")
        if name == "qa":
            losses = ssl_qa_losses(model, batch)
        else:
            losses = model.match_per_example_losses(batch)
        total += lam * float(np.mean(losses))
    return total


def _joint_step_grads(model, weights, batches):
    """Weighted-mean gradients accumulated across the active tasks."""
    total = None
    task_losses = {}
    for name, batch in batches.items():
        lam = getattr(weights, name)
        wpe = np.full(batch.size, lam / batch.size)
        if name == "qa":
            loss, grads = model.answer_loss_and_grads(
                batch, use_image=False, example_weights=wpe
            )
        else:
            loss, grads = model.match_loss_and_grads(batch, example_weights=wpe)
        task_losses[name] = loss / lam  # back to the plain mean
        total = grads if total is None else total.add_scaled(grads, 1.0)
    return total, task_losses


def _batch_starts(n: int, batch_size: int) -> list[int]:
    return list(range(0, n, batch_size))


def pretrain(
    model: TwoTowerModel,
    examples,
    vocab,
    config: PretrainConfig,
) -> list[dict]:
    """Adam on the joint loss; returns one curve row per epoch.

    Rows carry the per-task mean losses (NaN for inactive tasks) plus
    the weighted joint loss. Pairs are resampled each epoch unless
    ``config.resample_pairs`` is off.
    """
    weights = config.weights
    if not weights.active():
        raise ConfigError("at least one joint weight must be positive")
    opt = Adam(model.params, lr=config.lr, betas=config.betas)
    rng = make_rng(config.seed)
    qa_all = (
        make_vqa_batch(examples, vocab.size, model.dims.n_answers)
        if weights.qa > 0
        else None
    )
    curves = []
    for epoch in range(config.epochs):
        pair_seed = config.seed + 7919 * epoch if config.resample_pairs else config.seed
        streams = {}
        if weights.iq > 0:
            streams["iq"] = sample_pairs(
                examples, vocab, "iq", config.negative_ratio, seed=pair_seed
            )
        if weights.ia > 0:
            streams["ia"] = sample_pairs(
                examples, vocab, "ia", config.negative_ratio, seed=pair_seed + 1
            )
        if weights.qa > 0:
            streams["qa"] = qa_all.take(rng.permutation(qa_all.size))

        starts = {
            name: _batch_starts(stream.size, config.batch_size)
            for name, stream in streams.items()
        }
        n_steps = max(len(s) for s in starts.values())
        sums = {name: 0.0 for name in streams}
        for step in range(n_steps):
            batches = {}
            for name, stream in streams.items():
                start = starts[name][step % len(starts[name])]
                idx = np.arange(start, min(start + config.batch_size, stream.size))
                batches[name] = stream.take(idx)
            grads, task_losses = _joint_step_grads(model, weights, batches)
            joint = sum(
                getattr(weights, name) * task_losses[name] for name in task_losses
            )
            if not np.isfinite(joint):
                raise RunError("pretraining loss is not finite", epoch=epoch)
            opt.step(model.params, grads)
            for name, value in task_losses.items():
                sums[name] += value
        row = {"epoch": epoch}
        for name in ("iq", "ia", "qa"):
            row[f"loss_{name}"] = (
                sums[name] / n_steps if name in streams else float("nan")
            )
        row["loss_joint"] = sum(
            getattr(weights, name) * sums[name] / n_steps for name in streams
        )
        curves.append(row)
    return curves


def write_curves_csv(curves: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss_iq", "loss_ia", "loss_qa", "loss_joint"])
        for row in curves:
            writer.writerow(
                [
                    row["epoch"],
                    repr(row["loss_iq"]),
                    repr(row["loss_ia"]),
                    repr(row["loss_qa"]),
                    repr(row["loss_joint"]),
                ]
            )


# ---------------------------------------------------------------------------
# Orchestration: pretrain -> transfer -> finetune -> evaluate.
# ---------------------------------------------------------------------------


def evaluate_answer_model(
    model: TwoTowerModel,
    examples,
    answer_table,
    use_image: bool = True,
) -> EvalReport:
    """Predict over ``examples`` and score against their answer strings."""
    batch = make_vqa_batch(examples, model.dims.vocab_size, model.dims.n_answers)
    pred_classes = model.predict_classes(batch, use_image=use_image)
    preds = [answer_table[c] for c in pred_classes]
    golds = [ex.answer for ex in examples]
    types = [ex.question_type for ex in examples]
    return evaluate_answers(preds, golds, types)


def pretrain_then_finetune(
    train_examples,
    test_examples,
    vocab,
    answer_table,
    dims: ModelDims,
    pretrain_config: PretrainConfig | None,
    finetune_config: TrainConfig,
    labeled_ids=None,
    model_seed: int = 0,
):
    """Full path: optional joint pretraining, transfer, supervised finetune.

    ``labeled_ids`` restricts fine-tuning to a subset of the training
    examples (by example id); pretraining always sees the full training
    set, treating its text as raw pairing material rather than labels.
    A ``pretrain_config`` of None, or one whose weights are all zero,
    skips pretraining entirely (training from scratch). Returns
    (model, report, curves).
    """
    if dims.vocab_size != vocab.size:
        raise ConfigError(
            f"model vocab size {dims.vocab_size} != vocabulary size {vocab.size}"
        )
    fresh = TwoTowerModel.create(dims, seed=model_seed)
    curves: list[dict] = []
    skip = pretrain_config is None or not pretrain_config.weights.active()
    if not skip:
        pre_model = TwoTowerModel.create(dims, seed=pretrain_config.seed)
        curves = pretrain(pre_model, train_examples, vocab, pretrain_config)
        model = transfer_encoders(pre_model, fresh)
    else:
        model = fresh
    if labeled_ids is not None:
        labeled = set(labeled_ids)
        finetune_examples = [ex for ex in train_examples if ex.id in labeled]
        if not finetune_examples:
            raise DataError("labeled_ids selects no training examples")
    else:
        finetune_examples = list(train_examples)
    batch = make_vqa_batch(finetune_examples, vocab.size, dims.n_answers)
    train_answer_model(model, batch, finetune_config)
    report = evaluate_answer_model(model, test_examples, answer_table)
    return model, report, curves
