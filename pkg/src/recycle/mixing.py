"""Convex module mixing for target-task adaptation, plus the two baselines.

A mixed model combines, per adapted layer, the frozen adapter weights of the
selected source models with a fresh trainable adapter, using simplex weights
realized as the normalized exponential of free logits (one row per layer,
one extra row for mixing the final feature vectors). Training minimizes
cross-entropy plus a trade-off-weighted sum of distance correlations between
each source's features and the new model's features; only the fresh
adapters, the classifier head, and the mixing logits receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Graph, ShapeError, Tensor
from .dcor import dc_loss_sum
from .eft import EftConfig, EftLayerWeights, init_layer_weights
from .sources import (Backbone, DivergenceError, Pool, SourceModelRecord,
                      _batches, forward_features, new_eft_stack,
                      softmax_cross_entropy)
from .tasks import TaskSpec, TrainConfig

SIMPLEX_TOL = 1e-6


@dataclass
class MixingSpec:
    """Trainable mixing weights: logits of shape (layer rows + 1, m + 1).

    Row j < j_layers mixes layer j's adapter parameters; the final row mixes
    feature vectors. Column order is (source_1 .. source_m, new). The
    realized weights live on the simplex by construction.
    """

    logits: Tensor
    j_layers: int
    m: int

    def realized(self) -> Tensor:
        return ad.softmax(self.logits)

    def realized_array(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    @property
    def trainable(self) -> bool:
        return True


@dataclass
class FixedMixing:
    """Constant mixing weights (used by the fixed-weight feature sweep)."""

    weights: np.ndarray
    j_layers: int
    m: int

    def realized(self) -> Tensor:
        return Tensor(self.weights.astype(np.float32))

    def realized_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=np.float64)

    @property
    def trainable(self) -> bool:
        return False


def init_mixing(lambda_new: float, m: int, j_layers: int,
                dtype=np.float32) -> MixingSpec:
    """Logits whose realized weights are (s, .., s, lambda_new), s=(1-lambda_new)/m.

    All rows share the same initialization. With m=0 the single realized
    weight is 1 regardless of ``lambda_new``.
    """
    if m == 0:
        logits = np.zeros((j_layers + 1, 1), dtype=dtype)
        return MixingSpec(Tensor(logits, requires_grad=True), j_layers, 0)
    if not 0.0 < lambda_new < 1.0:
        raise ValueError(f"lambda_new must lie strictly inside (0, 1), got {lambda_new}")
    lam_source = (1.0 - lambda_new) / m
    row = np.log(np.array([lam_source] * m + [lambda_new], dtype=np.float64))
    logits = np.tile(row, (j_layers + 1, 1)).astype(dtype)
    return MixingSpec(Tensor(logits, requires_grad=True), j_layers, m)


def take_row(matrix: Tensor, j: int) -> Tensor:
    """Row slice of a 2-D tensor, differentiable back into the matrix."""
    out_data = matrix.data[j]
    graph = ad.active_graph()
    needs = graph is not None and matrix.requires_grad
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        def vjp(g):
            full = np.zeros_like(matrix.data)
            full[j] = g
            return (full,)

        graph.record(out, (matrix,), vjp)
    return out


def convex_combine(tensors: list[Tensor], weights) -> Tensor:
    """Weighted sum of same-shape tensors; weights may be a tensor or constants."""
    if not tensors:
        raise ValueError("convex_combine needs at least one tensor")
    base = tensors[0].shape
    for i, t in enumerate(tensors):
        if t.shape != base:
            raise ShapeError(f"operand {i} has shape {t.shape}, expected {base}")
    w_tensor = weights if isinstance(weights, Tensor) else None
    w = weights.data if w_tensor is not None else np.asarray(weights, dtype=np.float64)
    if w.reshape(-1).shape[0] != len(tensors):
        raise ShapeError(f"{len(tensors)} tensors but {w.size} weights")
    w_flat = w.reshape(-1)
    out_data = w_flat[0] * tensors[0].data
    for wi, t in zip(w_flat[1:], tensors[1:]):
        out_data = out_data + wi * t.data

    inputs = list(tensors) + ([w_tensor] if w_tensor is not None else [])
    graph = ad.active_graph()
    needs = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        def vjp(g):
            grads = [wi * g if t.requires_grad else None
                     for wi, t in zip(w_flat, tensors)]
            if w_tensor is not None:
                if w_tensor.requires_grad:
                    gw = np.array([np.sum(g * t.data) for t in tensors])
                    grads.append(gw.reshape(w_tensor.shape).astype(w_tensor.dtype))
                else:
                    grads.append(None)
            return grads

        graph.record(out, inputs, vjp)
    return out


def mix_params(theta_new_j: EftLayerWeights, source_layers: list[EftLayerWeights],
               lam_row) -> EftLayerWeights:
    """Effective adapter for one layer: convex combination of the frozen
    source adapters and the fresh one; gradients reach only the fresh
    adapter and the weights."""
    gw = convex_combine([s.groupwise for s in source_layers] + [theta_new_j.groupwise],
                        lam_row)
    pw = convex_combine([s.pointwise for s in source_layers] + [theta_new_j.pointwise],
                        lam_row)
    return EftLayerWeights(gw, pw)


def mix_features(f_t: Tensor, source_feats: list, lam_row) -> Tensor:
    """Convex combination of final feature vectors (sources first, new last)."""
    tensors = [sf if isinstance(sf, Tensor) else Tensor(np.asarray(sf))
               for sf in source_feats]
    widths = {t.shape[-1] for t in tensors} | {f_t.shape[-1]}
    if len(widths) > 1:
        raise ShapeError(f"feature widths differ: {sorted(widths)}")
    return convex_combine(tensors + [f_t], lam_row)


@dataclass
class MixedModel:
    """Target-task model built from selected sources plus fresh modules."""

    backbone: Backbone
    eft_cfg: EftConfig
    theta_new: list[EftLayerWeights]
    head_w: Tensor
    head_b: Tensor
    mixing: "MixingSpec | FixedMixing"
    source_stacks: list[list[EftLayerWeights]] = field(default_factory=list)
    source_feature_fns: list = field(default_factory=list)
    source_transforms: list = field(default_factory=list)
    selected_ids: list[str] = field(default_factory=list)
    feature_only: bool = False

    @property
    def m(self) -> int:
        return self.mixing.m

    def source_features(self, x: np.ndarray) -> list[np.ndarray]:
        """Frozen source features for a batch (no gradients ever)."""
        if self.source_feature_fns:
            return [np.asarray(fn(x), dtype=np.float32) for fn in self.source_feature_fns]
        return [forward_features(self.backbone, x, stack, self.eft_cfg).data
                for stack in self.source_stacks]

    def effective_eft(self, lam: Tensor) -> list[EftLayerWeights]:
        if self.feature_only or self.m == 0 or not self.source_stacks:
            return self.theta_new
        return [mix_params(self.theta_new[j],
                           [stack[j] for stack in self.source_stacks],
                           take_row(lam, j))
                for j in range(len(self.theta_new))]

    def forward(self, x: np.ndarray):
        """Returns (class logits, new-model features, source feature list)."""
        lam = self.mixing.realized()
        f_t = forward_features(self.backbone, x, self.effective_eft(lam), self.eft_cfg)
        src = self.source_features(x)
        if src:
            feature_row = take_row(lam, self.mixing.j_layers) if isinstance(lam, Tensor) \
                else lam[self.mixing.j_layers]
            combined = mix_features(f_t, src, feature_row)
        else:
            combined = f_t
        logits = ad.add(ad.matmul(combined, self.head_w), self.head_b)
        return logits, f_t, src

    def predict(self, x: np.ndarray) -> np.ndarray:
        logits, _, _ = self.forward(x)
        return logits.data.argmax(axis=1)

    def accuracy(self, task: TaskSpec, split: str, batch_size: int = 256) -> float:
        idx = task.split(split)
        correct = 0
        for start in range(0, idx.size, batch_size):
            chunk = idx[start:start + batch_size]
            correct += int((self.predict(task.x[chunk]) == task.y[chunk]).sum())
        return correct / idx.size

    def trainable_params(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for j, layer in enumerate(self.theta_new):
            params[f"theta_new.{j}.groupwise"] = layer.groupwise
            params[f"theta_new.{j}.pointwise"] = layer.pointwise
        params["classifier.weight"] = self.head_w
        params["classifier.bias"] = self.head_b
        if self.mixing.trainable:
            params["mixing.logits"] = self.mixing.logits
        return params

    def trainable_param_count(self) -> int:
        return sum(t.size for t in self.trainable_params().values())


def build_mixed_model(pool: Pool, selected_ids: list[str], task: TaskSpec,
                      train_cfg: TrainConfig, feature_only: bool = False,
                      fixed_lambda: np.ndarray | None = None) -> MixedModel:
    """Assemble a white-box mixed model from pooled records.

    The source adapter stacks must be shape-identical (they are, for a pool
    built over one trunk and adapter config); the fresh adapters follow the
    configured initialization and the head starts at zero.
    """
    records = [pool.record(mid) for mid in selected_ids]
    m = len(records)
    backbone, eft_cfg = pool.backbone, pool.eft_cfg
    shapes = None
    for r in records:
        s = [(tuple(l.groupwise.shape), tuple(l.pointwise.shape)) for l in r.eft]
        if shapes is None:
            shapes = s
        elif s != shapes:
            raise ShapeError(f"source {r.model_id} adapter shapes differ from the others")
    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 0x11]))
    theta_new = new_eft_stack(backbone, eft_cfg, train_cfg.theta_init, rng,
                              requires_grad=True)
    d, alpha = backbone.feature_dim, task.n_classes
    head_w = Tensor(np.zeros((d, alpha), dtype=np.float32), requires_grad=True)
    head_b = Tensor(np.zeros((alpha,), dtype=np.float32), requires_grad=True)
    j_layers = backbone.cfg.n_layers
    if fixed_lambda is not None:
        mixing: MixingSpec | FixedMixing = FixedMixing(
            np.asarray(fixed_lambda, dtype=np.float64), j_layers, m)
    else:
        lam_new = train_cfg.lambda_new if train_cfg.lambda_new is not None \
            else 1.0 / (m + 1)
        mixing = init_mixing(lam_new, m, j_layers)
    return MixedModel(
        backbone=backbone, eft_cfg=eft_cfg, theta_new=theta_new,
        head_w=head_w, head_b=head_b, mixing=mixing,
        source_stacks=[r.eft for r in records],
        selected_ids=list(selected_ids), feature_only=feature_only)


def _check_simplex(weights: np.ndarray) -> None:
    sums = weights.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > SIMPLEX_TOL) or np.any(weights <= 0.0):
        raise RuntimeError(f"mixing weights left the simplex: row sums {sums}")


def train_mixed(model: MixedModel, task: TaskSpec, sigma: float,
                train_cfg: TrainConfig) -> dict:
    """Minibatch training of the fresh modules, head, and mixing logits.

    Per batch: distance matrices and one correlation term per source, the
    combined loss, one optimizer step over the trainable set. Returns a
    history dict with per-epoch loss components, the realized mixing weights
    per epoch, and per-step simplex statistics.
    """
    if task.train_idx.size == 0:
        raise ValueError(f"task {task.task_id} has an empty train split")
    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 0x31]))
    history: dict = {"epoch": [], "loss_total": [], "loss_ce": [], "loss_dc": [],
                     "lambda": [], "degenerate_dc": 0,
                     "lambda_step_stats": {"rowsum_min": 1.0, "rowsum_max": 1.0,
                                           "entry_min": 1.0}}
    stats = history["lambda_step_stats"]
    with Graph() as graph:
        for name, t in model.trainable_params().items():
            graph.register(name, t)
        opt = Adam(graph.params.values(), lr=train_cfg.lr,
                   weight_decay=train_cfg.weight_decay)
        x, y = task.x, task.y
        for epoch in range(train_cfg.epochs):
            tot, ce_sum, dc_sum, n_batches = 0.0, 0.0, 0.0, 0
            for batch in _batches(task.train_idx.size, train_cfg.batch_size, rng):
                idx = task.train_idx[batch]
                logits, f_t, src = model.forward(x[idx])
                loss_ce = softmax_cross_entropy(logits, y[idx])
                if sigma != 0.0 and src:
                    loss_dc, degen = dc_loss_sum(src, f_t, sigma, return_degenerate=True)
                    history["degenerate_dc"] += degen
                    loss = ad.add(loss_ce, loss_dc)
                    dc_val = float(loss_dc.data)
                else:
                    loss = loss_ce
                    dc_val = 0.0
                if not np.isfinite(loss.data):
                    raise DivergenceError(epoch)
                opt.step(graph.backward(loss))
                lam = model.mixing.realized_array()
                _check_simplex(lam)
                sums = lam.sum(axis=-1)
                stats["rowsum_min"] = min(stats["rowsum_min"], float(sums.min()))
                stats["rowsum_max"] = max(stats["rowsum_max"], float(sums.max()))
                stats["entry_min"] = min(stats["entry_min"], float(lam.min()))
                tot += float(loss.data)
                ce_sum += float(loss_ce.data)
                dc_sum += dc_val
                n_batches += 1
            history["epoch"].append(epoch)
            history["loss_total"].append(tot / n_batches)
            history["loss_ce"].append(ce_sum / n_batches)
            history["loss_dc"].append(dc_sum / n_batches)
            history["lambda"].append(model.mixing.realized_array().tolist())
    history["val_acc"] = model.accuracy(task, "val") if task.val_idx.size else None
    return history


def train_independent(task: TaskSpec, backbone: Backbone, eft_cfg: EftConfig,
                      train_cfg: TrainConfig) -> tuple[MixedModel, dict]:
    """Baseline: fresh adapters and head trained on target data alone.

    Structurally a mixed model with zero sources, so it shares the exact
    training trajectory of ``train_mixed`` at m=0 under the same seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 0x11]))
    theta_new = new_eft_stack(backbone, eft_cfg, train_cfg.theta_init, rng,
                              requires_grad=True)
    d, alpha = backbone.feature_dim, task.n_classes
    model = MixedModel(
        backbone=backbone, eft_cfg=eft_cfg, theta_new=theta_new,
        head_w=Tensor(np.zeros((d, alpha), dtype=np.float32), requires_grad=True),
        head_b=Tensor(np.zeros((alpha,), dtype=np.float32), requires_grad=True),
        mixing=init_mixing(0.5, 0, backbone.cfg.n_layers))
    history = train_mixed(model, task, 0.0, train_cfg)
    return model, history


def finetune_source(record: SourceModelRecord, task: TaskSpec, backbone: Backbone,
                    train_cfg: TrainConfig) -> tuple[MixedModel, dict]:
    """Baseline: start from the top-1 source's adapters, re-head, and train.

    The pooled record itself is copied, never mutated.
    """
    theta = [EftLayerWeights(Tensor(l.groupwise.data.copy(), requires_grad=True),
                             Tensor(l.pointwise.data.copy(), requires_grad=True))
             for l in record.eft]
    d, alpha = backbone.feature_dim, task.n_classes
    model = MixedModel(
        backbone=backbone, eft_cfg=record.eft_cfg, theta_new=theta,
        head_w=Tensor(np.zeros((d, alpha), dtype=np.float32), requires_grad=True),
        head_b=Tensor(np.zeros((alpha,), dtype=np.float32), requires_grad=True),
        mixing=init_mixing(0.5, 0, backbone.cfg.n_layers))
    history = train_mixed(model, task, 0.0, train_cfg)
    return model, history
