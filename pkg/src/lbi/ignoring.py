"""Bilevel reweighting of training examples ("learning by ignoring").

Each training example i carries a weight a_i = sigmoid(s_i) in (0, 1)
that multiplies its loss; the weighted training objective is the plain
sum over the batch, sum_i a_i * L_i(W), so the gradient of that sum with
respect to a_i is exactly L_i. The weights are learned to minimize the
loss of a one-step-unrolled model on a clean validation set:

1. unroll:        W' = W - xi * grad_W sum_i a_i L_i(W)
2. hypergradient: dL_val/da_i ~= -xi * (L_i(W+) - L_i(W-)) / (2 eps)
   with W+- = W +- eps * grad_{W'} L_val(W'), a central-difference
   Hessian-vector approximation evaluated around the current weights,
3. alternate Adam steps on the weight logits s and on the model W.

``hypergrad_exact`` re-derives the same derivative by central
differences on each a_i with a full re-unroll, and serves as the
independent oracle for the fast estimate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .diffcore import Adam, ParameterSet, ensure_finite, make_rng
from .errors import ConfigError, DataError, NumericError, RunError
from .models import MlpClassifier, TwoTowerModel, VqaBatch

# sigmoid saturates to exactly 0.0 or 1.0 in float64 just past |x| ~ 37;
# clipping logits here keeps every weight strictly inside (0, 1).
LOGIT_CLIP = 30.0


def _sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))


@dataclass
class LbiConfig:
    """Hyperparameters for the alternating bilevel loop.

    Two optimizers run side by side: (lr_w, betas_w) drive the model
    weights, (lr_a, betas_a, weight_decay_a) drive the ignoring logits.
    ``xi`` is the unroll step (defaults to lr_w) and ``fd_eps`` the
    central-difference scalar (defaults to fd_eps_base / (1 + |g_val|),
    scaling the probe to the weight scale).
    """

    epochs: int = 60
    train_batch_size: int = 64
    val_batch_size: int = 128
    lr_w: float = 0.005
    betas_w: tuple[float, float] = (0.9, 0.999)
    lr_a: float = 0.01
    betas_a: tuple[float, float] = (0.5, 0.999)
    weight_decay_a: float = 3e-4
    xi: float | None = None
    fd_eps: float | None = None
    fd_eps_base: float = 1e-4
    seed: int = 0
    removal_threshold: float | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("train_batch_size", "val_batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lr_w <= 0:
            raise ConfigError(f"lr_w must be positive, got {self.lr_w}")
        if self.lr_a < 0:
            raise ConfigError(f"lr_a must be >= 0, got {self.lr_a}")
        if self.xi is not None and self.xi <= 0:
            raise ConfigError(f"xi must be positive, got {self.xi}")
        if self.fd_eps is not None and self.fd_eps <= 0:
            raise ConfigError(f"fd_eps must be positive, got {self.fd_eps}")
        if self.fd_eps_base <= 0:
            raise ConfigError("fd_eps_base must be positive")
        if self.weight_decay_a < 0:
            raise ConfigError("weight_decay_a must be >= 0")
        if self.removal_threshold is not None and not (
            0.0 <= self.removal_threshold <= 1.0
        ):
            raise ConfigError(
                f"removal threshold must lie in [0, 1], got {self.removal_threshold}"
            )


class IgnoringState:
    """Per-example weight logits with sparse Adam state.

    Only the logits of examples present in the current batch are
    updated; each coordinate keeps its own step count so bias correction
    stays exact under sparse updates.
    """

    def __init__(self, n_examples: int, initial_logit: float = 0.0):
        if n_examples <= 0:
            raise ConfigError("need at least one training example")
        self.logits = np.full(n_examples, float(initial_logit))
        self.m = np.zeros(n_examples)
        self.v = np.zeros(n_examples)
        self.steps = np.zeros(n_examples, dtype=np.int64)
        self.epoch = 0

    @property
    def n_examples(self) -> int:
        return self.logits.shape[0]

    def weights(self) -> np.ndarray:
        """Current a = sigmoid(s), strictly inside (0, 1)."""
        return _sigmoid(self.logits)

    def adam_update(
        self,
        ids: np.ndarray,
        grad: np.ndarray,
        lr: float,
        betas: tuple[float, float],
        weight_decay: float,
        eps: float = 1e-8,
    ) -> None:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_examples):
            raise DataError(
                f"example id out of range [0, {self.n_examples}): "
                f"got [{ids.min()}, {ids.max()}]"
            )
        b1, b2 = betas
        self.steps[ids] += 1
        t = self.steps[ids]
        self.m[ids] = b1 * self.m[ids] + (1 - b1) * grad
        self.v[ids] = b2 * self.v[ids] + (1 - b2) * grad * grad
        mhat = self.m[ids] / (1 - b1**t)
        vhat = self.v[ids] / (1 - b2**t)
        self.logits[ids] -= lr * mhat / (np.sqrt(vhat) + eps)
        if weight_decay > 0:
            self.logits[ids] *= 1 - lr * weight_decay
        np.clip(self.logits, -LOGIT_CLIP, LOGIT_CLIP, out=self.logits)


# ---------------------------------------------------------------------------
# The train/validation objective pair that the hypergradient machinery
# differentiates. Anything exposing these four methods works.
# ---------------------------------------------------------------------------


class LeastSquaresProblem:
    """1-D-to-n-D linear regression; the transparent test vehicle.

    Per-example training loss 0.5 * (w . x_i - y_i)^2, validation loss
    the sum of the same quantity over the validation rows.
    """

    def __init__(self, x_train, y_train, x_val, y_val):
        self.x_train = np.atleast_2d(np.asarray(x_train, dtype=np.float64))
        self.y_train = np.asarray(y_train, dtype=np.float64)
        self.x_val = np.atleast_2d(np.asarray(x_val, dtype=np.float64))
        self.y_val = np.asarray(y_val, dtype=np.float64)
        self.n_train = self.x_train.shape[0]

    def _residual(self, params, x, y):
        return x @ params["w"] - y

    def per_example_train_losses(self, params) -> np.ndarray:
        return 0.5 * self._residual(params, self.x_train, self.y_train) ** 2

    def train_grads(self, params, a) -> ParameterSet:
        r = self._residual(params, self.x_train, self.y_train)
        return ParameterSet({"w": (a * r) @ self.x_train})

    def val_loss(self, params) -> float:
        return float(0.5 * np.sum(self._residual(params, self.x_val, self.y_val) ** 2))

    def val_grads(self, params) -> tuple[float, ParameterSet]:
        r = self._residual(params, self.x_val, self.y_val)
        return float(0.5 * np.sum(r * r)), ParameterSet({"w": r @ self.x_val})


class ModelBatchProblem:
    """Binds an answer model to one train batch and one validation batch."""

    def __init__(
        self,
        model: TwoTowerModel | MlpClassifier,
        train_batch,
        val_batch,
        use_image: bool = True,
    ):
        self.model = model
        self.train_batch = train_batch
        self.val_batch = val_batch
        self.use_image = use_image
        self.n_train = train_batch.size if hasattr(train_batch, "size") else len(train_batch[1])

    def _losses(self, params, batch) -> np.ndarray:
        if isinstance(self.model, TwoTowerModel):
            return self.model.answer_per_example_losses(
                batch, use_image=self.use_image, params=params
            )
        return self.model.per_example_losses(batch[0], batch[1], params=params)

    def _loss_and_grads(self, params, batch, weights) -> tuple[float, ParameterSet]:
        if isinstance(self.model, TwoTowerModel):
            return self.model.answer_loss_and_grads(
                batch, use_image=self.use_image, example_weights=weights, params=params
            )
        return self.model.loss_and_grads(
            batch[0], batch[1], example_weights=weights, params=params
        )

    def per_example_train_losses(self, params) -> np.ndarray:
        return self._losses(params, self.train_batch)

    def train_grads(self, params, a) -> ParameterSet:
        return self._loss_and_grads(params, self.train_batch, np.asarray(a))[1]

    def train_loss_and_grads(self, params, a) -> tuple[float, ParameterSet]:
        return self._loss_and_grads(params, self.train_batch, np.asarray(a))

    def val_loss(self, params) -> float:
        return float(np.sum(self._losses(params, self.val_batch)))

    def val_grads(self, params) -> tuple[float, ParameterSet]:
        n = self.val_batch.size if hasattr(self.val_batch, "size") else len(self.val_batch[1])
        loss, grads = self._loss_and_grads(params, self.val_batch, np.ones(n))
        return loss, grads


# ---------------------------------------------------------------------------
# Hypergradients.
# ---------------------------------------------------------------------------


def weighted_train_loss(a: np.ndarray, per_example_losses: np.ndarray) -> float:
    """sum_i a_i * L_i; its gradient in a_i is L_i exactly."""
    a = np.asarray(a, dtype=np.float64)
    losses = np.asarray(per_example_losses, dtype=np.float64)
    if a.shape != losses.shape:
        raise DataError(
            f"weight vector of length {a.shape} does not index a loss vector "
            f"of length {losses.shape}"
        )
    return float(np.dot(a, losses))


def unrolled_step(problem, params: ParameterSet, a: np.ndarray, xi: float) -> ParameterSet:
    """One plain gradient-descent step on the weighted training sum."""
    if xi < 0:
        raise ConfigError(f"unroll step must be >= 0, got {xi}")
    if xi == 0:
        return params.copy()
    return params.add_scaled(problem.train_grads(params, a), -xi)


def hypergrad_fd(
    problem,
    params: ParameterSet,
    a: np.ndarray,
    xi: float,
    eps: float | None = None,
    eps_base: float = 1e-4,
) -> np.ndarray:
    """Fast per-example estimate of dL_val/da_i (see module docstring).

    ``eps`` defaults to eps_base / (1 + |g_val|), keeping the probe
    comparable to the weight scale.
    """
    a = np.asarray(a, dtype=np.float64)
    if xi == 0:
        return np.zeros(len(a))
    unrolled = unrolled_step(problem, params, a, xi)
    _, gval = problem.val_grads(unrolled)
    gnorm = gval.norm()
    if not np.isfinite(gnorm):
        raise NumericError("validation gradient is not finite", context="val_grads")
    if eps is None:
        eps = eps_base / (1.0 + gnorm)
    if eps <= 0:
        raise ConfigError(f"fd eps must be positive, got {eps}")
    plus = problem.per_example_train_losses(params.add_scaled(gval, eps))
    minus = problem.per_example_train_losses(params.add_scaled(gval, -eps))
    return ensure_finite(-xi * (plus - minus) / (2.0 * eps), "central difference")


def hypergrad_exact(
    problem,
    params: ParameterSet,
    a: np.ndarray,
    xi: float,
    step: float = 1e-6,
) -> np.ndarray:
    """Oracle: central differences on each a_i with a full re-unroll.

    O(n_train) re-evaluations of unroll + validation loss; intended for
    small instances only.
    """
    a = np.asarray(a, dtype=np.float64)
    out = np.empty(len(a))
    for i in range(len(a)):
        bumped = a.copy()
        bumped[i] = a[i] + step
        hi = problem.val_loss(unrolled_step(problem, params, bumped, xi))
        bumped[i] = a[i] - step
        lo = problem.val_loss(unrolled_step(problem, params, bumped, xi))
        out[i] = (hi - lo) / (2.0 * step)
    return out


@dataclass
class HypergradientReport:
    """Fast estimates next to oracle values, with deviation summaries."""

    estimate: np.ndarray
    oracle: np.ndarray
    max_abs_deviation: float = field(init=False)
    mean_abs_deviation: float = field(init=False)
    max_rel_deviation: float = field(init=False)
    mean_rel_deviation: float = field(init=False)

    def __post_init__(self):
        self.estimate = np.asarray(self.estimate, dtype=np.float64)
        self.oracle = np.asarray(self.oracle, dtype=np.float64)
        if self.estimate.shape != self.oracle.shape:
            raise DataError("estimate and oracle vectors differ in length")
        abs_dev = np.abs(self.estimate - self.oracle)
        self.max_abs_deviation = float(abs_dev.max(initial=0.0))
        self.mean_abs_deviation = float(abs_dev.mean()) if abs_dev.size else 0.0
        mask = np.abs(self.oracle) > 1e-8
        rel = abs_dev[mask] / np.abs(self.oracle[mask])
        self.max_rel_deviation = float(rel.max(initial=0.0))
        self.mean_rel_deviation = float(rel.mean()) if rel.size else 0.0

    def to_dict(self) -> dict:
        return {
            "estimate": [float(x) for x in self.estimate],
            "oracle": [float(x) for x in self.oracle],
            "max_abs_deviation": self.max_abs_deviation,
            "mean_abs_deviation": self.mean_abs_deviation,
            "max_rel_deviation": self.max_rel_deviation,
            "mean_rel_deviation": self.mean_rel_deviation,
        }


# ---------------------------------------------------------------------------
# Optional network parameterization of the weights.
# ---------------------------------------------------------------------------


class IgnoringNetwork:
    """Small tanh MLP mapping an example's feature vector to one logit.

    With zero parameters every weight is sigmoid(0) = 0.5; identical
    features always produce identical weights.
    """

    def __init__(self, feature_dim: int, hidden_dim: int, seed: int):
        from .models import init_params

        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.params = init_params(
            {
                "w1": (hidden_dim, feature_dim),
                "b1": (hidden_dim,),
                "w2": (1, hidden_dim),
                "b2": (1,),
            },
            seed,
        )

    def forward(self, features: np.ndarray, params: ParameterSet | None = None):
        from . import _kernels as K

        p = params if params is not None else self.params
        x = np.ascontiguousarray(features, dtype=np.float64)
        pre = K.linear_fwd(x, p["w1"], p["b1"])
        hidden = K.tanh_fwd(pre)
        logit = K.linear_fwd(hidden, p["w2"], p["b2"]).reshape(-1)
        a = _sigmoid(logit)
        return a, {"x": x, "hidden": hidden, "a": a}

    def grads_from_hypergrad(self, cache: dict, hypergrad: np.ndarray) -> ParameterSet:
        """Chain dL_val/da_i through sigmoid and the network body."""
        from . import _kernels as K

        a = cache["a"]
        dlogit = np.ascontiguousarray(hypergrad * a * (1.0 - a))[:, None]
        dhidden, dw2, db2 = K.linear_bwd(cache["hidden"], self.params["w2"], dlogit)
        dpre = K.tanh_bwd(cache["hidden"], dhidden)
        _, dw1, db1 = K.linear_bwd(cache["x"], self.params["w1"], dpre, False)
        return ParameterSet({"w1": dw1, "b1": db1, "w2": dw2, "b2": db2})


def ignoring_network_forward(net: IgnoringNetwork, features: np.ndarray) -> np.ndarray:
    a, _ = net.forward(features)
    return a


# ---------------------------------------------------------------------------
# The alternating training loop.
# ---------------------------------------------------------------------------


@dataclass
class EpochSnapshot:
    epoch: int
    weights: np.ndarray  # a over the full training set
    train_losses: np.ndarray  # per-example unweighted losses
    mean_val_loss: float


@dataclass
class LbiTrace:
    snapshots: list[EpochSnapshot] = field(default_factory=list)

    def write_csv(self, path, example_ids, corrupted=None) -> None:
        """One row per (epoch, example): epoch,example_id,a,loss[,corrupted]."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["epoch", "example_id", "a", "loss"]
            if corrupted is not None:
                header.append("corrupted")
            writer.writerow(header)
            for snap in self.snapshots:
                for i, ex_id in enumerate(example_ids):
                    row = [
                        snap.epoch,
                        int(ex_id),
                        repr(float(snap.weights[i])),
                        repr(float(snap.train_losses[i])),
                    ]
                    if corrupted is not None:
                        row.append(int(corrupted[i]))
                    writer.writerow(row)


@dataclass
class LbiResult:
    model: TwoTowerModel | MlpClassifier
    state: IgnoringState
    trace: LbiTrace
    network: IgnoringNetwork | None = None

    def final_weights(self) -> np.ndarray:
        if self.trace.snapshots:
            return self.trace.snapshots[-1].weights
        return self.state.weights()


class VqaTask:
    """Adapts a two-tower model plus dataset splits to the bilevel loop."""

    def __init__(self, model: TwoTowerModel, train_batch: VqaBatch, val_batch: VqaBatch,
                 use_image: bool = True):
        self.model = model
        self.train_all = train_batch
        self.val_all = val_batch
        self.use_image = use_image
        self.n_train = train_batch.size
        self.n_val = val_batch.size

    def problem(self, train_ids, val_ids) -> ModelBatchProblem:
        return ModelBatchProblem(
            self.model,
            self.train_all.take(train_ids),
            self.val_all.take(val_ids),
            use_image=self.use_image,
        )

    def train_losses_all(self, params=None) -> np.ndarray:
        return self.model.answer_per_example_losses(
            self.train_all, use_image=self.use_image, params=params
        )

    def mean_val_loss(self, params=None) -> float:
        return float(
            np.mean(
                self.model.answer_per_example_losses(
                    self.val_all, use_image=self.use_image, params=params
                )
            )
        )

    def example_features(self) -> np.ndarray:
        """Per-example features for the ignoring network: image vectors."""
        return self.train_all.image_features


class FeatureTask:
    """Same adaptation for the MLP on plain feature/label arrays."""

    def __init__(self, model: MlpClassifier, x_train, y_train, x_val, y_val):
        self.model = model
        self.x_train = np.asarray(x_train, dtype=np.float64)
        self.y_train = np.asarray(y_train, dtype=np.int64)
        self.x_val = np.asarray(x_val, dtype=np.float64)
        self.y_val = np.asarray(y_val, dtype=np.int64)
        self.n_train = len(self.y_train)
        self.n_val = len(self.y_val)

    def problem(self, train_ids, val_ids) -> ModelBatchProblem:
        return ModelBatchProblem(
            self.model,
            (self.x_train[train_ids], self.y_train[train_ids]),
            (self.x_val[val_ids], self.y_val[val_ids]),
        )

    def train_losses_all(self, params=None) -> np.ndarray:
        return self.model.per_example_losses(self.x_train, self.y_train, params=params)

    def mean_val_loss(self, params=None) -> float:
        return float(
            np.mean(self.model.per_example_losses(self.x_val, self.y_val, params=params))
        )

    def example_features(self) -> np.ndarray:
        return self.x_train


def lbi_train(
    task,
    config: LbiConfig,
    ignoring_network: IgnoringNetwork | None = None,
) -> LbiResult:
    """Alternate weight-logit updates and model updates until ``epochs``.

    Each iteration draws the next train batch and the next validation
    batch, estimates the hypergradient for the batch's examples, chains
    it through the sigmoid (or through the ignoring network when one is
    supplied), takes an Adam step on the logits, then an Adam step on
    the model against the re-weighted training sum. ``lr_a == 0``
    freezes the weights at their initial value.
    """
    rng = make_rng(config.seed)
    n_train, n_val = task.n_train, task.n_val
    state = IgnoringState(n_train)
    xi = config.xi if config.xi is not None else config.lr_w
    opt_w = Adam(task.model.params, lr=config.lr_w, betas=config.betas_w)
    opt_net = None
    features = None
    if ignoring_network is not None:
        features = task.example_features()
        if features.shape[1] != ignoring_network.feature_dim:
            raise ConfigError(
                f"ignoring network expects feature dim {ignoring_network.feature_dim}, "
                f"task provides {features.shape[1]}"
            )
        if config.lr_a > 0:
            opt_net = Adam(
                ignoring_network.params,
                lr=config.lr_a,
                betas=config.betas_a,
                weight_decay=config.weight_decay_a,
            )

    def current_weights(ids=None):
        if ignoring_network is None:
            a = state.weights()
        else:
            a, _ = ignoring_network.forward(features)
        return a if ids is None else a[ids]

    trace = LbiTrace()
    for epoch in range(config.epochs):
        perm = rng.permutation(n_train)
        val_perm = rng.permutation(n_val)
        try:
            _run_epoch(
                task, config, state, opt_w, opt_net, ignoring_network, features,
                perm, val_perm, xi, current_weights, epoch,
            )
        except NumericError as err:
            raise RunError(f"numeric breakdown: {err}", epoch=epoch) from err
        train_losses = task.train_losses_all()
        mean_val = task.mean_val_loss()
        if not (np.all(np.isfinite(train_losses)) and np.isfinite(mean_val)):
            raise RunError("loss diverged to non-finite values", epoch=epoch)
        state.epoch = epoch + 1
        trace.snapshots.append(
            EpochSnapshot(
                epoch=epoch,
                weights=current_weights().copy(),
                train_losses=train_losses,
                mean_val_loss=float(mean_val),
            )
        )
    return LbiResult(model=task.model, state=state, trace=trace, network=ignoring_network)


def _run_epoch(
    task, config, state, opt_w, opt_net, ignoring_network, features,
    perm, val_perm, xi, current_weights, epoch,
):
    """One pass over the training batches (step 1 then step 2 per batch)."""
    n_train, n_val = task.n_train, task.n_val
    val_pos = 0
    for start in range(0, n_train, config.train_batch_size):
        tr_ids = perm[start : start + config.train_batch_size]
        vb = min(config.val_batch_size, n_val)
        if val_pos + vb > n_val:
            val_pos = 0
        val_ids = val_perm[val_pos : val_pos + vb]
        val_pos += vb

        problem = task.problem(tr_ids, val_ids)
        if config.lr_a > 0:
            if ignoring_network is None:
                a_batch = state.weights()[tr_ids]
                h = hypergrad_fd(
                    problem, task.model.params, a_batch, xi,
                    eps=config.fd_eps, eps_base=config.fd_eps_base,
                )
                dlogits = h * a_batch * (1.0 - a_batch)
                state.adam_update(
                    tr_ids, dlogits, config.lr_a, config.betas_a,
                    config.weight_decay_a,
                )
            else:
                a_batch, cache = ignoring_network.forward(features[tr_ids])
                h = hypergrad_fd(
                    problem, task.model.params, a_batch, xi,
                    eps=config.fd_eps, eps_base=config.fd_eps_base,
                )
                net_grads = ignoring_network.grads_from_hypergrad(cache, h)
                opt_net.step(ignoring_network.params, net_grads)

        a_new = current_weights(tr_ids)
        loss_w, grads = problem.train_loss_and_grads(task.model.params, a_new)
        if not np.isfinite(loss_w):
            raise RunError("weighted training loss is not finite", epoch=epoch)
        opt_w.step(task.model.params, grads)


def apply_removal(examples: list, weights: np.ndarray, threshold: float):
    """Drop examples whose weight fell below ``threshold``.

    Returns (kept, removed_ids); refuses to remove everything.
    """
    if not (0.0 <= threshold <= 1.0):
        raise ConfigError(f"removal threshold must lie in [0, 1], got {threshold}")
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != len(examples):
        raise DataError(
            f"{len(weights)} weights do not cover {len(examples)} examples"
        )
    kept, removed_ids = [], []
    for ex, a in zip(examples, weights):
        if a < threshold:
            removed_ids.append(ex.id if hasattr(ex, "id") else len(removed_ids))
        else:
            kept.append(ex)
    if not kept:
        raise RunError("removal threshold would drop every training example")
    return kept, removed_ids


def detection_auc(weights: np.ndarray, corrupted_mask: np.ndarray) -> float:
    """AUC of (low weight => corrupted), by the rank-sum statistic."""
    weights = np.asarray(weights, dtype=np.float64)
    corrupted_mask = np.asarray(corrupted_mask, dtype=bool)
    pos = -weights[corrupted_mask]  # higher score should mean corrupted
    neg = -weights[~corrupted_mask]
    if len(pos) == 0 or len(neg) == 0:
        raise DataError("AUC needs both corrupted and clean examples")
    order = np.argsort(np.concatenate([pos, neg]), kind="mergesort")
    ranks = np.empty(len(order))
    ranks[order] = np.arange(1, len(order) + 1)
    # midranks for ties
    scores = np.concatenate([pos, neg])
    sorted_scores = scores[order]
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            mid = (i + j + 2) / 2.0
            for k in range(i, j + 1):
                ranks[order[k]] = mid
        i = j + 1
    r_pos = ranks[: len(pos)].sum()
    u = r_pos - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))
