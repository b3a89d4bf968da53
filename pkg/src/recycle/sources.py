"""Source model training over a frozen shared backbone, and the model pool.

A source model is a stack of per-layer adapters plus a linear classifier
trained on one task; the convolutional trunk is shared by every model and
never receives gradients. Trained models are persisted in a pool directory
(`manifest.json` plus one weight file per model) from which they can be
reloaded for selection and mixing.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Graph, Tensor
from .eft import EftConfig, EftLayerWeights, eft_forward, init_layer_weights
from .tasks import TaskSpec, TrainConfig


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries the offending epoch."""

    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 1
    channels: tuple[int, ...] = (8, 16, 16, 32)
    pool_after: tuple[int, ...] = (1, 3)   # conv indices followed by 2x2 mean pooling

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    @property
    def n_layers(self) -> int:
        return len(self.channels)

    def to_json(self) -> dict:
        return {"in_channels": self.in_channels, "channels": list(self.channels),
                "pool_after": list(self.pool_after)}

    @staticmethod
    def from_json(d: dict) -> "BackboneConfig":
        return BackboneConfig(in_channels=d["in_channels"],
                              channels=tuple(d["channels"]),
                              pool_after=tuple(d["pool_after"]))


class Backbone:
    """Frozen convolutional trunk shared by every model in a pool."""

    def __init__(self, cfg: BackboneConfig, weights: dict[str, np.ndarray], seed: int):
        self.cfg = cfg
        self.seed = seed
        self.convs = [Tensor(weights[f"conv{i}"], requires_grad=False)
                      for i in range(cfg.n_layers)]

    @classmethod
    def create(cls, cfg: BackboneConfig = BackboneConfig(), seed: int = 0) -> "Backbone":
        """Fixed-seed trunk with orthogonalized 3x3 filters (gain sqrt(2))."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBB]))
        weights = {}
        c_in = cfg.in_channels
        for i, c_out in enumerate(cfg.channels):
            fan_in = 9 * c_in
            mat = rng.standard_normal((fan_in, c_out))
            if fan_in >= c_out:
                q, _ = np.linalg.qr(mat)
            else:
                q = mat / np.sqrt(fan_in)
            w = (np.sqrt(2.0) * q[:, :c_out]).reshape(3, 3, c_in, c_out)
            weights[f"conv{i}"] = w.astype(np.float32)
            c_in = c_out
        return cls(cfg, weights, seed)

    @property
    def feature_dim(self) -> int:
        return self.cfg.feature_dim

    def weight_arrays(self) -> dict[str, np.ndarray]:
        return {f"conv{i}": t.data for i, t in enumerate(self.convs)}

    def digest(self) -> str:
        return ad.params_digest(self.weight_arrays())


def forward_features(backbone: Backbone, x, eft_weights: list[EftLayerWeights] | None = None,
                     eft_cfg: EftConfig | None = None) -> Tensor:
    """Trunk forward pass: conv -> adapter -> relu (-> pool), then global mean.

    Returns the pre-classifier feature matrix [n, d]. ``eft_weights`` holds
    one adapter per conv layer; pass None to run the bare trunk.
    """
    h = x if isinstance(x, Tensor) else Tensor(x)
    if eft_weights is not None and len(eft_weights) != backbone.cfg.n_layers:
        raise ValueError(
            f"got {len(eft_weights)} adapters for {backbone.cfg.n_layers} conv layers")
    for i, w in enumerate(backbone.convs):
        h = ad.conv2d(h, w, groups=1, padding=1)
        if eft_weights is not None:
            h = eft_forward(h, eft_weights[i], eft_cfg)
        h = ad.relu(h)
        if i in backbone.cfg.pool_after:
            h = ad.mean_pool2x2(h)
    return ad.global_mean_pool(h)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the true class under the softmax.

    Fused log-sum-exp form, so the value stays finite for extreme logits;
    the backward rule is (softmax - onehot) / n.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"logits must be [n, classes], got shape {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label outside [0, {k}): {labels.min()}..{labels.max()}")
    lse = np.logaddexp.reduce(logits.data, axis=-1)
    picked = logits.data[np.arange(n), labels]
    out_data = np.asarray((lse - picked).mean(), dtype=logits.dtype)

    graph = ad.active_graph()
    needs = graph is not None and logits.requires_grad
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        def vjp(g):
            g0 = np.asarray(g).reshape(-1)[0]
            shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
            p = np.exp(shifted)
            p /= p.sum(axis=-1, keepdims=True)
            p[np.arange(n), labels] -= 1.0
            return ((g0 / n) * p,)

        graph.record(out, (logits,), vjp)
    return out


@dataclass
class FeatureDataset:
    """Extracted feature rows paired with the target labels that produced them."""

    features: np.ndarray
    labels: np.ndarray
    model_id: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("feature row count differs from label count")

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class SourceModelRecord:
    """A pooled source model: adapter stack, classifier, and task metadata."""

    model_id: str
    eft: list[EftLayerWeights]
    head_w: np.ndarray
    head_b: np.ndarray
    feature_dim: int
    n_classes: int
    classes: list[int]
    task_id: str
    family: str
    eft_cfg: EftConfig
    val_acc: float
    seed: int

    def __post_init__(self):
        if self.head_w.shape != (self.feature_dim, self.n_classes):
            raise ValueError(
                f"classifier expects input dim {self.head_w.shape[0]}, record says {self.feature_dim}")

    def weight_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for j, layer in enumerate(self.eft):
            out[f"eft.{j}.groupwise"] = layer.groupwise.data
            out[f"eft.{j}.pointwise"] = layer.pointwise.data
        out["classifier.weight"] = self.head_w
        out["classifier.bias"] = self.head_b
        return out

    def digest(self) -> str:
        return ad.params_digest(self.weight_arrays())


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def new_eft_stack(backbone: Backbone, cfg: EftConfig, kind: str,
                  rng: np.random.Generator | None,
                  requires_grad: bool) -> list[EftLayerWeights]:
    return [init_layer_weights(k, cfg, rng=rng, kind=kind, requires_grad=requires_grad)
            for k in backbone.cfg.channels]


def train_source(task: TaskSpec, backbone: Backbone, cfg: EftConfig,
                 train_cfg: TrainConfig, model_id: str | None = None) -> SourceModelRecord:
    """Train adapters and a zero-initialized linear head on one task.

    Only the adapter and classifier tensors are registered for gradients;
    the backbone is bit-identical before and after.
    """
    if task.train_idx.size == 0 or task.val_idx.size == 0:
        raise ValueError(f"task {task.task_id} has an empty split")
    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 0x5E]))
    d = backbone.feature_dim
    alpha = task.n_classes
    eft_stack = new_eft_stack(backbone, cfg, train_cfg.theta_init, rng, requires_grad=True)
    head_w = Tensor(np.zeros((d, alpha), dtype=np.float32), requires_grad=True)
    head_b = Tensor(np.zeros((alpha,), dtype=np.float32), requires_grad=True)

    with Graph() as graph:
        for j, layer in enumerate(eft_stack):
            graph.register(f"eft.{j}.groupwise", layer.groupwise)
            graph.register(f"eft.{j}.pointwise", layer.pointwise)
        graph.register("classifier.weight", head_w)
        graph.register("classifier.bias", head_b)
        opt = Adam(graph.params.values(), lr=train_cfg.lr,
                   weight_decay=train_cfg.weight_decay)
        x, y = task.x, task.y
        for epoch in range(train_cfg.epochs):
            for batch in _batches(task.train_idx.size, train_cfg.batch_size, rng):
                idx = task.train_idx[batch]
                feats = forward_features(backbone, x[idx], eft_stack, cfg)
                logits = ad.add(ad.matmul(feats, head_w), head_b)
                loss = softmax_cross_entropy(logits, y[idx])
                if not np.isfinite(loss.data):
                    raise DivergenceError(epoch)
                opt.step(graph.backward(loss))

    for layer in eft_stack:
        layer.groupwise.requires_grad = False
        layer.pointwise.requires_grad = False
    record = SourceModelRecord(
        model_id=model_id or f"src_{task.task_id}",
        eft=eft_stack, head_w=head_w.data, head_b=head_b.data,
        feature_dim=d, n_classes=alpha, classes=list(task.classes),
        task_id=task.task_id, family=task.family, eft_cfg=cfg,
        val_acc=accuracy(backbone, eft_stack, cfg, head_w.data, head_b.data, task, "val"),
        seed=train_cfg.seed)
    return record


def extract_features(record: SourceModelRecord, backbone: Backbone, task: TaskSpec,
                     split: str = "train", batch_size: int = 256) -> FeatureDataset:
    """Pre-classifier features for a task split, in split-index order."""
    idx = task.split(split)
    if idx.size == 0:
        raise ValueError(f"split {split!r} of task {task.task_id} is empty")
    if record.feature_dim != backbone.feature_dim:
        raise ValueError(
            f"record feature dim {record.feature_dim} does not match backbone {backbone.feature_dim}")
    rows = []
    for start in range(0, idx.size, batch_size):
        chunk = idx[start:start + batch_size]
        feats = forward_features(backbone, task.x[chunk], record.eft, record.eft_cfg)
        rows.append(feats.data)
    return FeatureDataset(np.concatenate(rows), task.y[idx], record.model_id)


def accuracy(backbone: Backbone, eft_stack, eft_cfg, head_w: np.ndarray,
             head_b: np.ndarray, task: TaskSpec, split: str,
             batch_size: int = 256) -> float:
    """Argmax classification accuracy of an adapter stack + head on a split."""
    idx = task.split(split)
    correct = 0
    for start in range(0, idx.size, batch_size):
        chunk = idx[start:start + batch_size]
        feats = forward_features(backbone, task.x[chunk], eft_stack, eft_cfg)
        logits = feats.data @ head_w + head_b
        correct += int((logits.argmax(axis=1) == task.y[chunk]).sum())
    return correct / idx.size


# ---------------------------------------------------------------------------
# pool directory
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"


@dataclass
class Pool:
    root: Path
    backbone: Backbone
    eft_cfg: EftConfig
    records: list[SourceModelRecord] = field(default_factory=list)

    def record(self, model_id: str) -> SourceModelRecord:
        for r in self.records:
            if r.model_id == model_id:
                return r
        raise KeyError(model_id)


def _write_manifest(root: Path, manifest: dict) -> None:
    tmp = root / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    os.replace(tmp, root / MANIFEST)


def init_pool(root, backbone: Backbone, eft_cfg: EftConfig) -> Pool:
    """Create a pool directory holding the shared trunk and an empty model list."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    offsets = ad.write_blobs(root / "backbone.bin", backbone.weight_arrays())
    manifest = {
        "format": 1,
        "eft": {"a": eft_cfg.a, "b": eft_cfg.b, "gamma": eft_cfg.gamma},
        "backbone": {
            "config": backbone.cfg.to_json(),
            "seed": backbone.seed,
            "file": "backbone.bin",
            "offsets": offsets,
            "sha256": ad.file_digest(root / "backbone.bin"),
            "feature_dim": backbone.feature_dim,
        },
        "models": [],
    }
    _write_manifest(root, manifest)
    return Pool(root=root, backbone=backbone, eft_cfg=eft_cfg, records=[])


def append_model(pool: Pool, record: SourceModelRecord) -> None:
    """Persist a trained model and add it to the manifest; existing entries
    and weight files are never rewritten."""
    manifest = json.loads((pool.root / MANIFEST).read_text())
    if any(m["id"] == record.model_id for m in manifest["models"]):
        raise ValueError(f"model id {record.model_id!r} already in pool")
    fname = f"{record.model_id}.bin"
    offsets = ad.write_blobs(pool.root / fname, record.weight_arrays())
    manifest["models"].append({
        "id": record.model_id,
        "file": fname,
        "offsets": offsets,
        "sha256": ad.file_digest(pool.root / fname),
        "feature_dim": record.feature_dim,
        "n_classes": record.n_classes,
        "classes": list(map(int, record.classes)),
        "task_id": record.task_id,
        "family": record.family,
        "eft": {"a": record.eft_cfg.a, "b": record.eft_cfg.b, "gamma": record.eft_cfg.gamma},
        "val_acc": record.val_acc,
        "seed": record.seed,
    })
    _write_manifest(pool.root, manifest)
    pool.records.append(record)


def load_pool(root) -> Pool:
    root = Path(root)
    manifest = json.loads((root / MANIFEST).read_text())
    bcfg = BackboneConfig.from_json(manifest["backbone"]["config"])
    weights = ad.read_blobs(root / manifest["backbone"]["file"],
                            manifest["backbone"]["offsets"])
    backbone = Backbone(bcfg, weights, manifest["backbone"]["seed"])
    eft_cfg = EftConfig(**manifest["eft"])
    records = []
    for m in manifest["models"]:
        blobs = ad.read_blobs(root / m["file"], m["offsets"])
        n_layers = len(bcfg.channels)
        stack = [EftLayerWeights(Tensor(blobs[f"eft.{j}.groupwise"]),
                                 Tensor(blobs[f"eft.{j}.pointwise"]))
                 for j in range(n_layers)]
        records.append(SourceModelRecord(
            model_id=m["id"], eft=stack,
            head_w=blobs["classifier.weight"], head_b=blobs["classifier.bias"],
            feature_dim=m["feature_dim"], n_classes=m["n_classes"],
            classes=m["classes"], task_id=m["task_id"], family=m["family"],
            eft_cfg=EftConfig(**m["eft"]), val_acc=m["val_acc"], seed=m["seed"]))
    return Pool(root=root, backbone=backbone, eft_cfg=eft_cfg, records=records)
