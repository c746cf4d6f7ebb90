"""Gated-attention multiple-instance learner for slide-level tasks.

Architecture: instance projection D->M (ReLU, dropout 0.6 in training),
gated attention V,U: M->L with scorer L->1, softmax attention pooling to an
M-dim slide vector, affine head M->C (classification) or M->1 (regression).

Training is one bag per AdamW step with decoupled weight decay (the decay
factor applies multiplicatively, independent of the learning rate), early
stopping on validation MCC (classification) or negative validation MSE
(regression). Everything runs in float64 numpy with hand-written backprop so
gradients are finite-difference checkable and runs are bit-reproducible.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateFoldError, DivergenceError, EmptyBagError, ShapeError
from .metrics import confusion_matrix, mcc
from .rng import derive_seed, stream

GRID_LEARNING_RATES = [5e-5, 1e-4, 2e-4]
GRID_ATTN_DIMS = [256, 512, 1024]
GRID_FC_DIMS = [32, 128, 256]

PARAM_NAMES = ("w_proj", "b_proj", "w_gate_v", "b_gate_v",
               "w_gate_u", "b_gate_u", "w_score", "b_score",
               "w_head", "b_head")


@dataclass(frozen=True)
class AbmilConfig:
    lr: float = 1e-4
    attn_dim: int = 512          # projection width M
    fc_dim: int = 128            # gate hidden width L
    dropout: float = 0.6
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.95, 0.99)
    eps: float = 1e-4
    max_epochs: int = 50
    patience: int = 10
    task: str = "classification"
    n_classes: int | None = 2

    @property
    def n_outputs(self) -> int:
        return self.n_classes if self.task == "classification" else 1


def default_grid(task: str, n_classes: int | None = 2,
                 max_epochs: int = 50, patience: int = 10) -> list[AbmilConfig]:
    """The 27-point (lr, M, L) grid with all other settings fixed."""
    grid = []
    for lr, m, l in itertools.product(GRID_LEARNING_RATES, GRID_ATTN_DIMS, GRID_FC_DIMS):
        grid.append(AbmilConfig(lr=lr, attn_dim=m, fc_dim=l, task=task,
                                n_classes=n_classes, max_epochs=max_epochs,
                                patience=patience))
    return grid


@dataclass
class AbmilModel:
    params: dict[str, np.ndarray]
    config: AbmilConfig

    @property
    def input_dim(self) -> int:
        return self.params["w_proj"].shape[1]


def init_params(input_dim: int, config: AbmilConfig, seed: int) -> dict[str, np.ndarray]:
    """Fan-in-scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = stream(seed, "init")
    m, l, c = config.attn_dim, config.fc_dim, config.n_outputs

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return {
        "w_proj": uniform((m, input_dim), input_dim),
        "b_proj": uniform((m,), input_dim),
        "w_gate_v": uniform((l, m), m),
        "b_gate_v": uniform((l,), m),
        "w_gate_u": uniform((l, m), m),
        "b_gate_u": uniform((l,), m),
        "w_score": uniform((l,), l),
        "b_score": uniform((1,), l),
        "w_head": uniform((c, m), m),
        "b_head": uniform((c,), m),
    }


def _forward_cache(params: dict[str, np.ndarray], bag: np.ndarray,
                   drop_mask: np.ndarray | None = None) -> dict:
    """Full forward pass keeping intermediates for backprop.

    `bag` is (K, D) in canonical (ascending original index) order; the softmax
    and pooling reductions run in that order, so output is reproducible.
    """
    pre = bag @ params["w_proj"].T + params["b_proj"]          # (K, M)
    hidden = np.maximum(pre, 0.0)
    if drop_mask is not None:
        hidden = hidden * drop_mask
    gate_v = np.tanh(hidden @ params["w_gate_v"].T + params["b_gate_v"])   # (K, L)
    gate_u = 1.0 / (1.0 + np.exp(-(hidden @ params["w_gate_u"].T + params["b_gate_u"])))
    gated = gate_v * gate_u
    scores = gated @ params["w_score"] + params["b_score"][0]  # (K,)
    shifted = scores - scores.max()
    expw = np.exp(shifted)
    attn = expw / expw.sum()
    pooled = attn @ hidden                                     # (M,)
    output = params["w_head"] @ pooled + params["b_head"]      # (C,)
    return {"bag": bag, "pre": pre, "hidden": hidden, "gate_v": gate_v,
            "gate_u": gate_u, "gated": gated, "attn": attn, "pooled": pooled,
            "output": output, "drop_mask": drop_mask}


def forward(model: AbmilModel, bag: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate one bag (no dropout). Returns (bag_output, attention weights)."""
    bag = np.asarray(bag, dtype=np.float64)
    if bag.ndim != 2 or bag.shape[0] == 0:
        raise EmptyBagError(f"bag must be a nonempty (K, D) matrix, got {bag.shape}")
    if bag.shape[1] != model.input_dim:
        raise ShapeError(f"instance dim {bag.shape[1]} != model dim {model.input_dim}")
    cache = _forward_cache(model.params, bag)
    return cache["output"], cache["attn"]


def loss_and_grad(params: dict[str, np.ndarray], bag: np.ndarray, target,
                  task: str, drop_mask: np.ndarray | None = None
                  ) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact gradients for one bag.

    Classification: cross-entropy of softmax(output) vs the class index.
    Regression: squared error of the single output unit.
    """
    cache = _forward_cache(params, bag, drop_mask)
    output = cache["output"]
    if task == "classification":
        shifted = output - output.max()
        log_z = np.log(np.exp(shifted).sum())
        log_probs = shifted - log_z
        loss = -float(log_probs[int(target)])
        d_out = np.exp(log_probs)
        d_out[int(target)] -= 1.0
    else:
        diff = float(output[0]) - float(target)
        loss = diff * diff
        d_out = np.array([2.0 * diff])

    hidden, attn, gated = cache["hidden"], cache["attn"], cache["gated"]
    gate_v, gate_u = cache["gate_v"], cache["gate_u"]
    grads = {
        "w_head": np.outer(d_out, cache["pooled"]),
        "b_head": d_out.copy(),
    }
    d_pooled = params["w_head"].T @ d_out                      # (M,)
    d_attn = hidden @ d_pooled                                 # (K,)
    d_hidden = np.outer(attn, d_pooled)                        # (K, M)
    # softmax backward
    d_scores = attn * (d_attn - float(attn @ d_attn))          # (K,)
    grads["w_score"] = gated.T @ d_scores
    grads["b_score"] = np.array([d_scores.sum()])
    d_gated = np.outer(d_scores, params["w_score"])            # (K, L)
    d_gate_v = d_gated * gate_u
    d_gate_u = d_gated * gate_v
    d_pre_v = d_gate_v * (1.0 - gate_v ** 2)
    d_pre_u = d_gate_u * gate_u * (1.0 - gate_u)
    grads["w_gate_v"] = d_pre_v.T @ hidden
    grads["b_gate_v"] = d_pre_v.sum(axis=0)
    grads["w_gate_u"] = d_pre_u.T @ hidden
    grads["b_gate_u"] = d_pre_u.sum(axis=0)
    d_hidden += d_pre_v @ params["w_gate_v"] + d_pre_u @ params["w_gate_u"]
    if cache["drop_mask"] is not None:
        d_hidden = d_hidden * cache["drop_mask"]
    d_pre = d_hidden * (cache["pre"] > 0.0)
    grads["w_proj"] = d_pre.T @ cache["bag"]
    grads["b_proj"] = d_pre.sum(axis=0)
    return loss, grads


class AdamW:
    """Adam with decoupled multiplicative weight decay.

    The decay step is theta *= (1 - weight_decay) regardless of the learning
    rate; with weight_decay = 0 the update is exactly Adam's.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float, betas, eps: float,
                 weight_decay: float):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for key, grad in grads.items():
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * grad
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * grad * grad
            m_hat = self.m[key] / bc1
            v_hat = self.v[key] / bc2
            if self.weight_decay:
                params[key] *= 1.0 - self.weight_decay
            params[key] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainResult:
    model: AbmilModel
    best_epoch: int                   # 1-based
    val_curve: list[float]
    train_curve: list[float] = field(default_factory=list)
    best_flags: list[bool] = field(default_factory=list)


def _predict_bag(params, config: AbmilConfig, bag: np.ndarray):
    out = _forward_cache(params, bag)["output"]
    if config.task == "classification":
        return int(out.argmax())
    return float(out[0])


def _val_metric(params, config: AbmilConfig, bags: list[np.ndarray], targets) -> float:
    preds = [_predict_bag(params, config, bag) for bag in bags]
    if config.task == "classification":
        cm = confusion_matrix(targets, preds, config.n_classes)
        return mcc(cm)
    err = np.asarray(preds, dtype=np.float64) - np.asarray(targets, dtype=np.float64)
    return -float(np.mean(err * err))


def train(bags_train: list[np.ndarray], y_train, bags_val: list[np.ndarray], y_val,
          config: AbmilConfig, seed: int) -> TrainResult:
    """Train with early stopping; returns the parameters of the best
    validation epoch (validation MCC for classification, negative MSE for
    regression, patience per config)."""
    if not bags_train:
        raise EmptyBagError("no training bags")
    _check_task(config, y_train)
    input_dim = bags_train[0].shape[1]
    params = init_params(input_dim, config, seed)
    optimizer = AdamW(params, config.lr, config.betas, config.eps, config.weight_decay)

    best_metric = -np.inf
    best_epoch = 0
    best_params = None
    since_best = 0
    val_curve: list[float] = []
    train_curve: list[float] = []
    best_flags: list[bool] = []
    n = len(bags_train)
    for epoch in range(1, config.max_epochs + 1):
        order = stream(seed, "shuffle", epoch).permutation(n)
        drop_rng = stream(seed, "dropout", epoch)
        epoch_loss = 0.0
        for step, idx in enumerate(order):
            bag = bags_train[idx]
            mask = None
            if config.dropout > 0.0:
                keep = drop_rng.random((bag.shape[0], config.attn_dim)) >= config.dropout
                mask = keep / (1.0 - config.dropout)
            loss, grads = loss_and_grad(params, bag, y_train[idx], config.task, mask)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch} step {step}",
                                      epoch=epoch, step=step)
            optimizer.step(params, grads)
            epoch_loss += loss
        train_curve.append(epoch_loss / n)
        metric = _val_metric(params, config, bags_val, y_val)
        val_curve.append(metric)
        if metric > best_metric:
            best_metric = metric
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}
            since_best = 0
            best_flags.append(True)
        else:
            since_best += 1
            best_flags.append(False)
        if since_best >= config.patience:
            break
    return TrainResult(model=AbmilModel(params=best_params, config=config),
                       best_epoch=best_epoch, val_curve=val_curve,
                       train_curve=train_curve, best_flags=best_flags)


def retrain_full(bags: list[np.ndarray], targets, config: AbmilConfig,
                 epoch_budget: int, seed: int) -> AbmilModel:
    """Train for exactly `epoch_budget` epochs on all bags, no early stopping."""
    if epoch_budget < 1:
        raise ValueError(f"epoch budget must be >= 1, got {epoch_budget}")
    if not bags:
        raise EmptyBagError("no training bags")
    _check_task(config, targets)
    params = init_params(bags[0].shape[1], config, seed)
    optimizer = AdamW(params, config.lr, config.betas, config.eps, config.weight_decay)
    n = len(bags)
    for epoch in range(1, epoch_budget + 1):
        order = stream(seed, "shuffle", epoch).permutation(n)
        drop_rng = stream(seed, "dropout", epoch)
        for step, idx in enumerate(order):
            bag = bags[idx]
            mask = None
            if config.dropout > 0.0:
                keep = drop_rng.random((bag.shape[0], config.attn_dim)) >= config.dropout
                mask = keep / (1.0 - config.dropout)
            loss, grads = loss_and_grad(params, bag, targets[idx], config.task, mask)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch} step {step}",
                                      epoch=epoch, step=step)
            optimizer.step(params, grads)
    return AbmilModel(params=params, config=config)


def _check_task(config: AbmilConfig, targets) -> None:
    if config.task == "classification":
        present = set(int(t) for t in targets)
        missing = sorted(set(range(config.n_classes)) - present)
        if missing:
            raise DegenerateFoldError(f"classes {missing} absent from training bags")
    elif config.task != "regression":
        raise ValueError(f"unknown task {config.task!r}")


def predict(model: AbmilModel, bag: np.ndarray):
    """Class index (classification) or scalar value (regression) for one bag."""
    out, _ = forward(model, np.asarray(bag, dtype=np.float64))
    if model.config.task == "classification":
        return int(out.argmax())
    return float(out[0])


@dataclass
class GridSelection:
    config: AbmilConfig
    epoch_budget: int
    mean_metric: float
    per_config: list[dict]            # audit: config index, metric, failures


def grid_select(bags_by_id: dict[str, tuple[np.ndarray, object]],
                inner_splits, grid: list[AbmilConfig], seed: int) -> GridSelection:
    """Pick the grid config with the best mean inner-validation metric.

    `bags_by_id` maps bag_id -> (instance matrix, target); `inner_splits` is
    the list of inner train/val id splits from the fold plan. A fold that
    raises DegenerateFoldError is excluded from that config's mean (config
    invalid if every fold fails); a DivergenceError invalidates the config.
    Ties break toward lower lr, then smaller projection, then smaller gate
    width. The epoch budget is the rounded mean best epoch of the winner.
    """
    results = []
    for config_idx, config in enumerate(grid):
        metrics, epochs, failures = [], [], 0
        diverged = False
        for fold_idx, split in enumerate(inner_splits):
            run_seed = derive_seed(seed, "grid", config_idx, fold_idx)
            bags_tr = [bags_by_id[b][0] for b in split.train]
            y_tr = [bags_by_id[b][1] for b in split.train]
            bags_va = [bags_by_id[b][0] for b in split.val]
            y_va = [bags_by_id[b][1] for b in split.val]
            try:
                result = train(bags_tr, y_tr, bags_va, y_va, config, run_seed)
            except DegenerateFoldError:
                failures += 1
                continue
            except DivergenceError:
                diverged = True
                break
            metrics.append(max(result.val_curve))
            epochs.append(result.best_epoch)
        entry = {"config_idx": config_idx, "failures": failures,
                 "diverged": diverged}
        if diverged or not metrics:
            entry["metric"] = None
        else:
            entry["metric"] = float(np.mean(metrics))
            entry["epoch_budget"] = max(1, int(np.floor(np.mean(epochs) + 0.5)))
        results.append(entry)

    valid = [r for r in results if r["metric"] is not None]
    if not valid:
        raise DegenerateFoldError("every grid configuration failed on the inner folds")
    best = min(valid, key=lambda r: (-r["metric"],
                                     grid[r["config_idx"]].lr,
                                     grid[r["config_idx"]].attn_dim,
                                     grid[r["config_idx"]].fc_dim))
    return GridSelection(config=grid[best["config_idx"]],
                         epoch_budget=best["epoch_budget"],
                         mean_metric=best["metric"], per_config=results)


def write_training_log(path, result: TrainResult) -> None:
    """Per-run log CSV: epoch,train_loss,val_metric,is_best."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_metric", "is_best"])
        for i, (tl, vm, best) in enumerate(zip(result.train_curve, result.val_curve,
                                               result.best_flags), start=1):
            writer.writerow([i, repr(tl), repr(vm), int(best)])
