"""Answer-classification models: an MLP and a two-tower multimodal net.

The two-tower model encodes an image feature vector and a mean-pooled
token sequence with separate encoders, fuses them through one tanh
hidden layer, and exposes two heads: a softmax answer classifier and a
sigmoid match scorer used by the self-supervised pairing tasks. Both
encoders can be transplanted from a pretrained instance into a fresh one
before fine-tuning.

Backward passes are hand-derived layer by layer (the family is fixed);
``tests`` check every gradient against central finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from .diffcore import Adam, ParameterSet, make_rng
from .errors import ConfigError, DataError, RunError, ShapeError

TANH = "tanh"  # the only hidden activation in this family


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    """U(-b, b) with b = sqrt(6 / (fan_out + fan_in)); shape = (out, in)."""
    fan_out, fan_in = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(layer_shapes: dict[str, tuple[int, ...]], seed: int) -> ParameterSet:
    """Xavier-uniform 2-D weights, zero 1-D biases, in insertion order.

    Deterministic in ``seed``; 2-D shapes are read as (fan_out, fan_in).
    """
    rng = make_rng(seed)
    out = []
    for name, shape in layer_shapes.items():
        if any(d <= 0 for d in shape):
            raise ConfigError(f"non-positive dimension in {name!r}: {shape}")
        if len(shape) == 2:
            out.append((name, xavier_uniform(rng, shape)))
        elif len(shape) == 1:
            out.append((name, np.zeros(shape)))
        else:
            raise ConfigError(f"unsupported parameter rank for {name!r}: {shape}")
    return ParameterSet(out)


def flatten_token_lists(token_lists) -> tuple[np.ndarray, np.ndarray]:
    """CSR-style (flat ids, offsets) from per-example token id lists."""
    offsets = np.zeros(len(token_lists) + 1, dtype=np.int64)
    for i, toks in enumerate(token_lists):
        if len(toks) == 0:
            raise DataError(f"example {i} has an empty token sequence")
        offsets[i + 1] = offsets[i] + len(toks)
    flat = np.empty(offsets[-1], dtype=np.int64)
    for i, toks in enumerate(token_lists):
        flat[offsets[i] : offsets[i + 1]] = toks
    return flat, offsets


def _check_token_ids(token_ids: np.ndarray, vocab_size: int) -> None:
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= vocab_size):
        raise DataError(
            f"token id out of range: ids must lie in [0, {vocab_size}), got "
            f"[{token_ids.min()}, {token_ids.max()}]"
        )


@dataclass
class VqaBatch:
    """Arrays for one batch of (image, question, answer-class) examples."""

    image_features: np.ndarray  # (B, d_img)
    token_ids: np.ndarray  # flat int64
    token_offsets: np.ndarray  # (B+1,) int64
    answer_classes: np.ndarray  # (B,) int64
    example_ids: np.ndarray  # (B,) int64, caller-defined global ids

    @property
    def size(self) -> int:
        return self.image_features.shape[0]

    def take(self, idx: np.ndarray) -> "VqaBatch":
        idx = np.asarray(idx, dtype=np.int64)
        segments = [
            self.token_ids[self.token_offsets[i] : self.token_offsets[i + 1]]
            for i in idx
        ]
        flat, offsets = flatten_token_lists(segments)
        return VqaBatch(
            image_features=np.ascontiguousarray(self.image_features[idx]),
            token_ids=flat,
            token_offsets=offsets,
            answer_classes=self.answer_classes[idx],
            example_ids=self.example_ids[idx],
        )


def make_vqa_batch(examples, vocab_size: int, n_answers: int) -> VqaBatch:
    """Validate and pack a list of examples (see ``lbi.data.VqaExample``)."""
    if not examples:
        raise DataError("cannot build a batch from zero examples")
    feats = np.ascontiguousarray([ex.image_features for ex in examples], dtype=np.float64)
    flat, offsets = flatten_token_lists([ex.question for ex in examples])
    _check_token_ids(flat, vocab_size)
    classes = np.empty(len(examples), dtype=np.int64)
    for i, ex in enumerate(examples):
        if ex.answer_class is None:
            raise DataError(
                f"example {ex.id} has no answer class; bind it to an answer table first"
            )
        if not (0 <= ex.answer_class < n_answers):
            raise DataError(
                f"example {ex.id}: answer class {ex.answer_class} outside [0, {n_answers})"
            )
        classes[i] = ex.answer_class
    ids = np.array([ex.id for ex in examples], dtype=np.int64)
    return VqaBatch(feats, flat, offsets, classes, ids)


@dataclass
class PairBatch:
    """Image/text pairs with binary match labels.

    Label 1 means both sides come from the same source example, label 0
    that the sides were drawn from different examples; the source ids are
    kept so tests can audit the sampler.
    """

    left_images: np.ndarray  # (B, d_img)
    token_ids: np.ndarray  # flat int64 (right-side text)
    token_offsets: np.ndarray  # (B+1,) int64
    labels: np.ndarray  # (B,) float64 in {0, 1}
    left_source_ids: np.ndarray  # (B,) int64
    right_source_ids: np.ndarray  # (B,) int64

    @property
    def size(self) -> int:
        return self.left_images.shape[0]

    def take(self, idx: np.ndarray) -> "PairBatch":
        idx = np.asarray(idx, dtype=np.int64)
        segments = [
            self.token_ids[self.token_offsets[i] : self.token_offsets[i + 1]]
            for i in idx
        ]
        flat, offsets = flatten_token_lists(segments)
        return PairBatch(
            left_images=np.ascontiguousarray(self.left_images[idx]),
            token_ids=flat,
            token_offsets=offsets,
            labels=self.labels[idx],
            left_source_ids=self.left_source_ids[idx],
            right_source_ids=self.right_source_ids[idx],
        )


def make_pair_batch(
    left_images, right_token_lists, labels, left_ids, right_ids, vocab_size: int
) -> PairBatch:
    labels = np.asarray(labels, dtype=np.float64)
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise DataError("pair labels must be 0 or 1")
    flat, offsets = flatten_token_lists(right_token_lists)
    _check_token_ids(flat, vocab_size)
    left_ids = np.asarray(left_ids, dtype=np.int64)
    right_ids = np.asarray(right_ids, dtype=np.int64)
    same = left_ids == right_ids
    if not np.array_equal(same, labels == 1.0):
        raise DataError("pair labels disagree with source ids")
    return PairBatch(
        left_images=np.ascontiguousarray(left_images, dtype=np.float64),
        token_ids=flat,
        token_offsets=offsets,
        labels=labels,
        left_source_ids=left_ids,
        right_source_ids=right_ids,
    )


# ---------------------------------------------------------------------------
# MLP classifier.
# ---------------------------------------------------------------------------


class MlpClassifier:
    """One-hidden-layer tanh MLP with a softmax head."""

    activation = TANH

    def __init__(self, input_dim: int, hidden_dim: int, n_classes: int, params: ParameterSet):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.n_classes = n_classes
        expected = {
            "w1": (hidden_dim, input_dim),
            "b1": (hidden_dim,),
            "w2": (n_classes, hidden_dim),
            "b2": (n_classes,),
        }
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(
                    f"parameter {name!r} has shape {params[name].shape}, expected {shape}"
                )
        self.params = params

    @classmethod
    def create(cls, input_dim: int, hidden_dim: int, n_classes: int, seed: int):
        params = init_params(
            {
                "w1": (hidden_dim, input_dim),
                "b1": (hidden_dim,),
                "w2": (n_classes, hidden_dim),
                "b2": (n_classes,),
            },
            seed,
        )
        return cls(input_dim, hidden_dim, n_classes, params)

    def _check_labels(self, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise DataError(
                f"label out of range [0, {self.n_classes}): "
                f"got [{labels.min()}, {labels.max()}]"
            )
        return labels

    def logits(self, x: np.ndarray, params: ParameterSet | None = None) -> np.ndarray:
        p = params if params is not None else self.params
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.shape[1] != self.input_dim:
            raise ShapeError(f"feature dim {x.shape[1]} != model input dim {self.input_dim}")
        h = K.tanh_fwd(K.linear_fwd(x, p["w1"], p["b1"]))
        return K.linear_fwd(h, p["w2"], p["b2"])

    def per_example_losses(self, x, labels, params: ParameterSet | None = None) -> np.ndarray:
        labels = self._check_labels(labels)
        losses, _ = K.softmax_xent_fwd(self.logits(x, params), labels)
        return losses

    def loss_and_grads(
        self,
        x,
        labels,
        example_weights: np.ndarray | None = None,
        params: ParameterSet | None = None,
    ) -> tuple[float, ParameterSet]:
        """Mean loss when ``example_weights`` is None, else sum of w_i * L_i."""
        p = params if params is not None else self.params
        labels = self._check_labels(labels)
        x = np.ascontiguousarray(x, dtype=np.float64)
        pre = K.linear_fwd(x, p["w1"], p["b1"])
        h = K.tanh_fwd(pre)
        logits = K.linear_fwd(h, p["w2"], p["b2"])
        losses, probs = K.softmax_xent_fwd(logits, labels)
        if example_weights is None:
            wpe = np.full(len(labels), 1.0 / len(labels))
            loss = float(np.mean(losses))
        else:
            wpe = np.ascontiguousarray(example_weights, dtype=np.float64)
            loss = float(np.dot(wpe, losses))
        dlogits = K.softmax_xent_bwd(probs, labels, wpe)
        dh, dw2, db2 = K.linear_bwd(h, p["w2"], dlogits)
        dpre = K.tanh_bwd(h, dh)
        _, dw1, db1 = K.linear_bwd(x, p["w1"], dpre, False)
        return loss, ParameterSet({"w1": dw1, "b1": db1, "w2": dw2, "b2": db2})


# ---------------------------------------------------------------------------
# Two-tower multimodal model.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelDims:
    d_img: int
    vocab_size: int
    embed_dim: int
    hidden_dim: int
    n_answers: int

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value <= 0:
                raise ConfigError(f"dimension {name} must be positive, got {value}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class TwoTowerModel:
    """Image encoder + question encoder -> fused tanh hidden -> two heads.

    The question encoder (embedding table, mean pool, linear) is also
    used to encode answer strings for the image-answer match task.
    """

    activation = TANH
    ENCODER_PARAMS = ("w_img", "b_img", "emb", "w_q", "b_q")

    def __init__(self, dims: ModelDims, params: ParameterSet):
        self.dims = dims
        e, h = dims.embed_dim, dims.hidden_dim
        expected = {
            "w_img": (e, dims.d_img),
            "b_img": (e,),
            "emb": (dims.vocab_size, e),
            "w_q": (e, e),
            "b_q": (e,),
            "w_fuse": (h, 2 * e),
            "b_fuse": (h,),
            "w_ans": (dims.n_answers, h),
            "b_ans": (dims.n_answers,),
            "w_match": (1, h),
            "b_match": (1,),
        }
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(
                    f"parameter {name!r} has shape {params[name].shape}, expected {shape}"
                )
        self.params = params

    @classmethod
    def create(cls, dims: ModelDims, seed: int) -> "TwoTowerModel":
        e, h = dims.embed_dim, dims.hidden_dim
        params = init_params(
            {
                "w_img": (e, dims.d_img),
                "b_img": (e,),
                "emb": (dims.vocab_size, e),
                "w_q": (e, e),
                "b_q": (e,),
                "w_fuse": (h, 2 * e),
                "b_fuse": (h,),
                "w_ans": (dims.n_answers, h),
                "b_ans": (dims.n_answers,),
                "w_match": (1, h),
                "b_match": (1,),
            },
            seed,
        )
        return cls(dims, params)

    def clone(self) -> "TwoTowerModel":
        return TwoTowerModel(self.dims, self.params.copy())

    # -- forward -----------------------------------------------------------

    def _forward_core(self, p, images, token_ids, token_offsets, use_image):
        n = token_offsets.shape[0] - 1
        if use_image:
            images = np.ascontiguousarray(images, dtype=np.float64)
            if images.shape != (n, self.dims.d_img):
                raise ShapeError(
                    f"image batch shape {images.shape} != ({n}, {self.dims.d_img})"
                )
            img_e = K.linear_fwd(images, p["w_img"], p["b_img"])
        else:
            img_e = np.zeros((n, self.dims.embed_dim))
        pooled, lengths = K.embed_meanpool_fwd(p["emb"], token_ids, token_offsets)
        q_e = K.linear_fwd(pooled, p["w_q"], p["b_q"])
        fused_in = np.ascontiguousarray(np.concatenate([img_e, q_e], axis=1))
        h = K.tanh_fwd(K.linear_fwd(fused_in, p["w_fuse"], p["b_fuse"]))
        return {
            "images": images if use_image else None,
            "pooled": pooled,
            "fused_in": fused_in,
            "h": h,
            "use_image": use_image,
        }

    def _backward_core(self, p, cache, dh, token_ids, token_offsets):
        """Gradients below the hidden layer; returns a name->grad dict."""
        e = self.dims.embed_dim
        dfused_pre = K.tanh_bwd(cache["h"], dh)
        dfused_in, dw_fuse, db_fuse = K.linear_bwd(
            cache["fused_in"], p["w_fuse"], dfused_pre
        )
        d_img_e = np.ascontiguousarray(dfused_in[:, :e])
        d_q_e = np.ascontiguousarray(dfused_in[:, e:])
        grads = {"w_fuse": dw_fuse, "b_fuse": db_fuse}
        if cache["use_image"]:
            _, dw_img, db_img = K.linear_bwd(cache["images"], p["w_img"], d_img_e, False)
            grads["w_img"] = dw_img
            grads["b_img"] = db_img
        else:
            grads["w_img"] = np.zeros_like(p["w_img"])
            grads["b_img"] = np.zeros_like(p["b_img"])
        dpooled, dw_q, db_q = K.linear_bwd(cache["pooled"], p["w_q"], d_q_e)
        grads["w_q"] = dw_q
        grads["b_q"] = db_q
        grads["emb"] = K.embed_meanpool_bwd(
            np.ascontiguousarray(dpooled), token_ids, token_offsets,
            self.dims.vocab_size,
        )
        return grads

    def _full_grads(self, partial: dict) -> ParameterSet:
        out = []
        for name, tensor in self.params.items():
            out.append((name, partial.get(name, np.zeros_like(tensor))))
        return ParameterSet(out)

    def answer_logits(
        self, batch: VqaBatch, use_image: bool = True, params: ParameterSet | None = None
    ) -> np.ndarray:
        p = params if params is not None else self.params
        cache = self._forward_core(
            p, batch.image_features, batch.token_ids, batch.token_offsets, use_image
        )
        return K.linear_fwd(cache["h"], p["w_ans"], p["b_ans"])

    def predict_classes(self, batch: VqaBatch, use_image: bool = True) -> np.ndarray:
        return np.argmax(self.answer_logits(batch, use_image), axis=1)

    def answer_per_example_losses(
        self, batch: VqaBatch, use_image: bool = True, params: ParameterSet | None = None
    ) -> np.ndarray:
        logits = self.answer_logits(batch, use_image, params)
        losses, _ = K.softmax_xent_fwd(logits, batch.answer_classes)
        return losses

    def answer_loss_and_grads(
        self,
        batch: VqaBatch,
        use_image: bool = True,
        example_weights: np.ndarray | None = None,
        params: ParameterSet | None = None,
    ) -> tuple[float, ParameterSet]:
        """Mean loss when ``example_weights`` is None, else sum of w_i * L_i."""
        p = params if params is not None else self.params
        cache = self._forward_core(
            p, batch.image_features, batch.token_ids, batch.token_offsets, use_image
        )
        logits = K.linear_fwd(cache["h"], p["w_ans"], p["b_ans"])
        losses, probs = K.softmax_xent_fwd(logits, batch.answer_classes)
        if example_weights is None:
            wpe = np.full(batch.size, 1.0 / batch.size)
            loss = float(np.mean(losses))
        else:
            wpe = np.ascontiguousarray(example_weights, dtype=np.float64)
            loss = float(np.dot(wpe, losses))
        dlogits = K.softmax_xent_bwd(probs, batch.answer_classes, wpe)
        dh, dw_ans, db_ans = K.linear_bwd(cache["h"], p["w_ans"], dlogits)
        grads = self._backward_core(p, cache, dh, batch.token_ids, batch.token_offsets)
        grads["w_ans"] = dw_ans
        grads["b_ans"] = db_ans
        return loss, self._full_grads(grads)

    # -- match head ----------------------------------------------------------

    def match_logits(self, pairs: PairBatch, params: ParameterSet | None = None) -> np.ndarray:
        p = params if params is not None else self.params
        cache = self._forward_core(
            p, pairs.left_images, pairs.token_ids, pairs.token_offsets, True
        )
        return K.linear_fwd(cache["h"], p["w_match"], p["b_match"]).reshape(-1)

    def match_per_example_losses(
        self, pairs: PairBatch, params: ParameterSet | None = None
    ) -> np.ndarray:
        z = self.match_logits(pairs, params)
        return K.bce_logits_fwd(np.ascontiguousarray(z), pairs.labels)

    def match_loss_and_grads(
        self,
        pairs: PairBatch,
        example_weights: np.ndarray | None = None,
        params: ParameterSet | None = None,
    ) -> tuple[float, ParameterSet]:
        p = params if params is not None else self.params
        cache = self._forward_core(
            p, pairs.left_images, pairs.token_ids, pairs.token_offsets, True
        )
        z = K.linear_fwd(cache["h"], p["w_match"], p["b_match"]).reshape(-1)
        losses = K.bce_logits_fwd(np.ascontiguousarray(z), pairs.labels)
        if example_weights is None:
            wpe = np.full(pairs.size, 1.0 / pairs.size)
            loss = float(np.mean(losses))
        else:
            wpe = np.ascontiguousarray(example_weights, dtype=np.float64)
            loss = float(np.dot(wpe, losses))
        dz = K.bce_logits_bwd(np.ascontiguousarray(z), pairs.labels, wpe)
        dh, dw_match, db_match = K.linear_bwd(
            cache["h"], p["w_match"], np.ascontiguousarray(dz[:, None])
        )
        grads = self._backward_core(p, cache, dh, pairs.token_ids, pairs.token_offsets)
        grads["w_match"] = dw_match
        grads["b_match"] = db_match
        return loss, self._full_grads(grads)


def transfer_encoders(pretrained: TwoTowerModel, fresh: TwoTowerModel) -> TwoTowerModel:
    """Copy encoder tensors from ``pretrained`` into a clone of ``fresh``.

    Heads and the fusion layer keep the fresh initialization; only the
    image and question encoders move.
    """
    for field_name in ("d_img", "vocab_size", "embed_dim"):
        a = getattr(pretrained.dims, field_name)
        b = getattr(fresh.dims, field_name)
        if a != b:
            raise ConfigError(
                f"encoder dimension mismatch: {field_name} is {a} in the "
                f"pretrained model but {b} in the fresh one"
            )
    out = fresh.clone()
    for name in TwoTowerModel.ENCODER_PARAMS:
        out.params[name] = pretrained.params[name].copy()
    return out


# ---------------------------------------------------------------------------
# Supervised training loop.
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 0.005
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    use_image: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size <= 0:
            raise ConfigError(f"batch size must be positive, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")


def train_answer_model(
    model: TwoTowerModel,
    batch: VqaBatch,
    config: TrainConfig,
) -> list[float]:
    """Minibatch Adam on the mean answer loss; returns per-epoch means."""
    rng = make_rng(config.seed)
    opt = Adam(model.params, lr=config.lr, betas=config.betas)
    curve = []
    n = batch.size
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            sub = batch.take(perm[start : start + config.batch_size])
            loss, grads = model.answer_loss_and_grads(sub, use_image=config.use_image)
            if not np.isfinite(loss):
                raise RunError("training loss is not finite", epoch=epoch)
            opt.step(model.params, grads)
            epoch_losses.append(loss)
        curve.append(float(np.mean(epoch_losses)))
    return curve


# ---------------------------------------------------------------------------
# Checkpoints: JSON with floats as decimal strings (lossless round trip).
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    kind: str
    model: TwoTowerModel | MlpClassifier
    seed_lineage: dict = field(default_factory=dict)
    vocab_tokens: list[str] | None = None
    answer_table: list[str] | None = None
    config_hash: str | None = None


def _tensor_to_json(t: np.ndarray) -> dict:
    # repr() of a Python float is the shortest decimal string that parses
    # back to the same bits, so the round trip is exact.
    return {"shape": list(t.shape), "data": [repr(float(x)) for x in t.ravel()]}


def _tensor_from_json(obj: dict) -> np.ndarray:
    data = np.array([float(s) for s in obj["data"]], dtype=np.float64)
    return data.reshape(obj["shape"])


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    model = checkpoint.model
    if isinstance(model, TwoTowerModel):
        dims = model.dims.to_dict()
    else:
        dims = {
            "input_dim": model.input_dim,
            "hidden_dim": model.hidden_dim,
            "n_classes": model.n_classes,
        }
    doc = {
        "kind": checkpoint.kind,
        "dims": dims,
        "seed_lineage": checkpoint.seed_lineage,
        "vocab_tokens": checkpoint.vocab_tokens,
        "answer_table": checkpoint.answer_table,
        "config_hash": checkpoint.config_hash,
        "params": {name: _tensor_to_json(t) for name, t in model.params.items()},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1))


def load_checkpoint(path) -> Checkpoint:
    doc = json.loads(Path(path).read_text())
    params = ParameterSet(
        (name, _tensor_from_json(obj)) for name, obj in sorted(doc["params"].items())
    )
    if doc["kind"] == "two_tower":
        model = TwoTowerModel(ModelDims(**doc["dims"]), params)
    elif doc["kind"] == "mlp":
        model = MlpClassifier(
            doc["dims"]["input_dim"], doc["dims"]["hidden_dim"],
            doc["dims"]["n_classes"], params,
        )
    else:
        raise DataError(f"unknown checkpoint kind {doc['kind']!r}")
    return Checkpoint(
        kind=doc["kind"],
        model=model,
        seed_lineage=doc.get("seed_lineage") or {},
        vocab_tokens=doc.get("vocab_tokens"),
        answer_table=doc.get("answer_table"),
        config_hash=doc.get("config_hash"),
    )
