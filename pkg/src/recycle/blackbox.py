"""Black-box adaptation: align source API feature widths, then mix features.

Here source models are reachable only through a feature function (no
weights). Each source's output is reduced to the target model's feature
width with a fixed-point independent component analysis (tanh contrast,
symmetric decorrelation, eigendecomposition whitening), fit once on the
target task's training features and then frozen. Mixing happens at the
feature level only; the target trunk keeps its own fresh adapters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .eft import EftConfig
from .mixing import MixedModel, init_mixing
from .sources import Backbone, BackboneConfig, Pool, SourceModelRecord, \
    extract_features, forward_features, new_eft_stack
from .autodiff import Tensor
from .tasks import TaskSpec, TrainConfig

# Degenerate whitening eigenvalues are floored here before the inverse square
# root; small batches are routinely rank-deficient.
_EIG_FLOOR = 1e-10

# Desk-scale target trunk for the black-box scenario (feature width 16,
# deliberately narrower than the pooled source models).
BLACKBOX_TARGET = BackboneConfig(channels=(4, 8, 8, 16))


@dataclass
class IcaTransformer:
    """Frozen centering + whitening + unmixing maps for one source."""

    mean: np.ndarray          # [d_in]
    whitening: np.ndarray     # [n_components, d_in]
    unmixing: np.ndarray      # [n_components, n_components]
    n_components: int
    converged: bool
    n_iter: int


def _sym_decorrelate(w: np.ndarray) -> np.ndarray:
    """W <- (W W^T)^(-1/2) W: rows become orthonormal."""
    s = w @ w.T
    vals, vecs = np.linalg.eigh(s)
    vals = np.maximum(vals, _EIG_FLOOR)
    return (vecs * (1.0 / np.sqrt(vals))) @ vecs.T @ w


def fastica_fit(x: np.ndarray, n_components: int, max_iter: int = 200,
                tol: float = 1e-4, seed: int = 0) -> IcaTransformer:
    """Fit the reducer: center, whiten via the covariance eigendecomposition,
    then parallel fixed-point iteration with the tanh contrast until the
    largest row update drops below ``tol`` (or ``max_iter`` passes, in which
    case the transformer is returned with ``converged=False``)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D data matrix, got shape {x.shape}")
    n, d_in = x.shape
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    if n_components > d_in:
        raise ValueError(f"n_components={n_components} exceeds input width {d_in}")
    if d_in > n:
        raise ValueError(f"need at least {d_in} rows to fit on width {d_in}, got {n}")

    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / n
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:n_components]
    vals = np.maximum(vals[order], _EIG_FLOOR)
    whitening = (vecs[:, order] / np.sqrt(vals)).T          # [c, d_in]
    z = whitening @ xc.T                                    # [c, n]

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1CA]))
    w = _sym_decorrelate(rng.standard_normal((n_components, n_components)))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        wz = w @ z
        g = np.tanh(wz)
        g_prime = 1.0 - g * g
        w_new = (g @ z.T) / n - (g_prime.mean(axis=1)[:, None] * w)
        w_new = _sym_decorrelate(w_new)
        delta = float(np.max(np.abs(np.abs(np.sum(w_new * w, axis=1)) - 1.0)))
        w = w_new
        if delta < tol:
            converged = True
            break
    return IcaTransformer(mean=mean, whitening=whitening, unmixing=w,
                          n_components=n_components, converged=converged, n_iter=it)


def fastica_transform(t: IcaTransformer, x: np.ndarray) -> np.ndarray:
    """Apply the frozen maps: (x - fit mean) through whitening then unmixing."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != t.mean.shape[0]:
        raise ValueError(
            f"width mismatch: transformer fit on {t.mean.shape[0]} columns, got {x.shape}")
    return (x - t.mean) @ t.whitening.T @ t.unmixing.T


@dataclass
class FeatureApi:
    """A source reachable only through its feature function."""

    api_id: str
    feature_dim: int
    extract: Callable[[np.ndarray], np.ndarray]


def pool_feature_api(record: SourceModelRecord, backbone: Backbone) -> FeatureApi:
    """Wrap a pooled model behind the feature-only interface (a stand-in for
    a remote endpoint)."""
    def extract(x: np.ndarray) -> np.ndarray:
        return forward_features(backbone, x, record.eft, record.eft_cfg).data

    return FeatureApi(api_id=record.model_id, feature_dim=record.feature_dim,
                      extract=extract)


def build_blackbox_model(apis: list[FeatureApi], target_backbone: Backbone,
                         target_eft_cfg: EftConfig, task: TaskSpec,
                         train_cfg: TrainConfig, max_iter: int = 200,
                         tol: float = 1e-4) -> MixedModel:
    """Feature-mixing-only model over dimension-aligned source APIs.

    One reducer is fit per source on the target training features and stays
    frozen for the whole run; trainables are the target trunk's adapters,
    the head, and the feature-mixing row.
    """
    d_t = target_backbone.feature_dim
    for api in apis:
        if api.feature_dim < d_t:
            raise ValueError(
                f"source {api.api_id} width {api.feature_dim} is below target width {d_t}")
    x_train = task.x[task.train_idx]
    fns = []
    transformers = []
    for i, api in enumerate(apis):
        feats = np.asarray(api.extract(x_train), dtype=np.float64)
        t = fastica_fit(feats, n_components=d_t, max_iter=max_iter, tol=tol,
                        seed=train_cfg.seed * 1000 + i)
        transformers.append(t)
        fns.append(lambda x, api=api, t=t: fastica_transform(t, api.extract(x)))

    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 0x11]))
    theta_new = new_eft_stack(target_backbone, target_eft_cfg, train_cfg.theta_init,
                              rng, requires_grad=True)
    alpha = task.n_classes
    m = len(apis)
    lam_new = train_cfg.lambda_new if train_cfg.lambda_new is not None else 1.0 / (m + 1)
    return MixedModel(
        backbone=target_backbone, eft_cfg=target_eft_cfg, theta_new=theta_new,
        head_w=Tensor(np.zeros((d_t, alpha), dtype=np.float32), requires_grad=True),
        head_b=Tensor(np.zeros((alpha,), dtype=np.float32), requires_grad=True),
        mixing=init_mixing(lam_new, m, j_layers=0),
        source_feature_fns=fns,
        source_transforms=transformers,
        selected_ids=[api.api_id for api in apis],
        feature_only=True)
