"""The MiCo architecture: stacked cluster routing + anchor reduction.

Each layer routes every instance to its most similar semantic anchor
(cosine similarity, hard assignment with a straight-through backward),
aggregates assigned instances into context vectors, refines instance
features with a residual MLP, then halves the anchor count with an
anchor-axis MLP. A pooling head turns the final instance features into
one bag-level vector for the task head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _accum, _make
from .errors import ConfigError, DataError, ShapeError

NORM_CLAMP = 1e-12

# diagnostic counter: zero-norm rows clamped inside cosine_alignment
_zero_norm_clamps = 0


def zero_norm_clamp_count() -> int:
    return _zero_norm_clamps


def reset_zero_norm_clamp_count() -> None:
    global _zero_norm_clamps
    _zero_norm_clamps = 0


@dataclass
class Assignment:
    """Record of one routing pass: similarities, hard choice, aggregation."""
    alignment: np.ndarray    # (M, K) cosine similarities
    hard: np.ndarray         # (M, K) one-hot forward values
    indices: np.ndarray      # (M,) chosen anchor per instance
    counts: np.ndarray       # (K,) instances per anchor
    aggregated: np.ndarray   # (K, d) aggregated anchor values


@dataclass
class MicoConfig:
    d: int
    anchors: int = 64               # K0, halved after every layer
    layers: int = 3
    mlp_hidden: int | None = None   # defaults to d
    task: str = "survival"          # "survival" | "subtype"
    survival_bins: int = 4
    subtype_classes: int = 2
    pooling: str = "gated_attention"  # "gated_attention" | "anchor_mean"
    ablate_route: bool = False
    ablate_reducer: bool = False
    ablate_kmeans_init: bool = False

    def __post_init__(self):
        if self.mlp_hidden is None:
            self.mlp_hidden = self.d
        self.validate()

    def validate(self) -> None:
        if self.d < 1:
            raise ConfigError(f"feature dim must be >= 1, got {self.d}")
        if self.layers < 1:
            raise ConfigError(f"layer count must be >= 1, got {self.layers}")
        if self.anchors < 1 or self.anchors % (2 ** self.layers) != 0:
            raise ConfigError(
                f"anchor count {self.anchors} must be divisible by 2^layers = {2 ** self.layers}")
        if self.task not in ("survival", "subtype"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.pooling not in ("gated_attention", "anchor_mean"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")

    @property
    def head_size(self) -> int:
        return self.survival_bins if self.task == "survival" else self.subtype_classes

    def to_dict(self) -> dict:
        return {
            "d": self.d, "anchors": self.anchors, "layers": self.layers,
            "mlp_hidden": self.mlp_hidden, "task": self.task,
            "survival_bins": self.survival_bins, "subtype_classes": self.subtype_classes,
            "pooling": self.pooling, "ablate_route": self.ablate_route,
            "ablate_reducer": self.ablate_reducer, "ablate_kmeans_init": self.ablate_kmeans_init,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MicoConfig":
        return cls(**{k: d[k] for k in (
            "d", "anchors", "layers", "mlp_hidden", "task", "survival_bins",
            "subtype_classes", "pooling", "ablate_route", "ablate_reducer",
            "ablate_kmeans_init") if k in d})


# ---------------------------------------------------------------------------
# routing ops

def cosine_alignment(H: Tensor, S: Tensor) -> Tensor:
    """Cosine similarity between every instance row and every anchor row.

    Zero-norm rows are clamped at NORM_CLAMP (counted, not fatal); the clamp
    contributes no gradient through the norm.
    """
    global _zero_norm_clamps
    if H.data.ndim != 2 or S.data.ndim != 2 or H.data.shape[1] != S.data.shape[1]:
        raise ShapeError(f"cosine_alignment: shapes {H.data.shape} and {S.data.shape} incompatible")
    if not (np.all(np.isfinite(H.data)) and np.all(np.isfinite(S.data))):
        raise DataError("cosine_alignment: non-finite input")

    u = np.linalg.norm(H.data, axis=1)
    v = np.linalg.norm(S.data, axis=1)
    n_clamped = int(np.sum(u < NORM_CLAMP) + np.sum(v < NORM_CLAMP))
    if n_clamped:
        _zero_norm_clamps += n_clamped
    u = np.maximum(u, NORM_CLAMP)
    v = np.maximum(v, NORM_CLAMP)
    A = (H.data / u[:, None]) @ (S.data / v[:, None]).T

    def build(out):
        def _bw():
            g = out.grad
            gH = (g / v[None, :]) @ S.data / u[:, None] \
                - H.data * ((g * A).sum(axis=1) / u ** 2)[:, None]
            gS = (g.T / u[None, :]) @ H.data / v[:, None] \
                - S.data * ((g * A).sum(axis=0) / v ** 2)[:, None]
            _accum(H, gH)
            _accum(S, gS)
        return _bw

    return _make(A, (H, S), "cosine_alignment", build)


def ste_assign(A: Tensor) -> Tensor:
    """Hard row-wise argmax assignment with a straight-through backward.

    Forward: exact one-hot rows (ties break toward the lowest anchor index).
    Backward: the upstream gradient passes through unchanged, as if the op
    were the identity on the similarity matrix.
    """
    if A.data.ndim != 2:
        raise ShapeError(f"ste_assign: rank-2 tensor required, got shape {A.data.shape}")
    if not np.all(np.isfinite(A.data)):
        raise DataError("ste_assign: non-finite similarities")
    idx = np.argmax(A.data, axis=1)
    hard = np.zeros_like(A.data)
    hard[np.arange(A.data.shape[0]), idx] = 1.0

    def build(out):
        def _bw():
            _accum(A, out.grad)
        return _bw

    return _make(hard, (A,), "ste_assign", build)


def aggregate_anchors(H: Tensor, A_hat: Tensor, S_prev: Tensor) -> tuple[Tensor, np.ndarray]:
    """Weighted mean of assigned instances per anchor.

    Anchors with zero assignment weight carry their previous value through
    bit-exactly and contribute no gradient to the instance features. The
    backward rule is exact for arbitrary non-negative weights, so the same op
    serves both hard one-hot routing and the soft relaxation used by the
    finite-difference suite.
    """
    M, d = H.data.shape
    K = S_prev.data.shape[0]
    if A_hat.data.shape != (M, K) or S_prev.data.shape != (K, d):
        raise ShapeError(
            f"aggregate_anchors: shapes H{H.data.shape} A{A_hat.data.shape} S{S_prev.data.shape} inconsistent")

    W = A_hat.data
    counts = W.sum(axis=0)
    empty = counts == 0.0
    safe = np.where(empty, 1.0, counts)
    agg = (W.T @ H.data) / safe[:, None]
    agg[empty] = S_prev.data[empty]

    def build(out):
        def _bw():
            g = out.grad
            g_eff = np.where(empty[:, None], 0.0, g)
            _accum(H, (W / safe[None, :]) @ g_eff)
            # d agg_k / d W[m,k] = (h_m - agg_k) / N_k
            _accum(A_hat, ((H.data @ g_eff.T) - (agg * g_eff).sum(axis=1)[None, :]) / safe[None, :])
            _accum(S_prev, np.where(empty[:, None], g, 0.0))
        return _bw

    out = _make(agg, (H, A_hat, S_prev), "aggregate_anchors", build)
    return out, counts


def route_update(H: Tensor, A_hat: Tensor, S_agg: Tensor,
                 w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
                 activation: str = "gelu") -> Tensor:
    """Residual instance refinement: h' = h + MLP(h + assigned context)."""
    ctx = ad.matmul(A_hat, S_agg)
    z = ad.add_bias(ad.matmul(ad.add(H, ctx), w1), b1)
    z = ad.gelu(z) if activation == "gelu" else z
    z = ad.add_bias(ad.matmul(z, w2), b2)
    return ad.add(H, z)


def cluster_reduce(S_agg: Tensor, r1: Tensor, rb1: Tensor, r2: Tensor, rb2: Tensor,
                   activation: str = "gelu") -> Tensor:
    """Halve the anchor count with an MLP applied along the anchor axis.

    Weights are shared across feature dimensions: the (K, d) anchor matrix is
    transposed to (d, K), mapped K -> K -> K/2, and transposed back.
    """
    K = S_agg.data.shape[0]
    if K < 2 or K % 2 != 0:
        raise ConfigError(f"cluster_reduce: anchor count {K} must be even and >= 2")
    z = ad.add_bias(ad.matmul(ad.transpose(S_agg), r1), rb1)
    z = ad.gelu(z) if activation == "gelu" else z
    z = ad.add_bias(ad.matmul(z, r2), rb2)
    return ad.transpose(z)


def gated_attention_pool(H: Tensor, V: Tensor, U: Tensor, w: Tensor) -> tuple[Tensor, np.ndarray]:
    """Gated attention over instances; returns the (1, d) pooled feature and
    the attention weights (which sum to 1)."""
    gate = ad.mul(ad.tanh(ad.matmul(H, V)), ad.sigmoid(ad.matmul(H, U)))
    scores = ad.reshape(ad.matmul(gate, w), (H.data.shape[0],))
    attn = ad.softmax(scores)
    pooled = ad.matmul(ad.reshape(attn, (1, H.data.shape[0])), H)
    return pooled, attn.data.copy()


def _soft_assign(A: Tensor) -> Tensor:
    """Row-softmax relaxation of the hard assignment (finite-difference mode)."""
    z = A.data - A.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    P = e / e.sum(axis=1, keepdims=True)

    def build(out):
        def _bw():
            g = out.grad
            _accum(A, P * (g - (g * P).sum(axis=1, keepdims=True)))
        return _bw

    return _make(P, (A,), "row_softmax", build)


# ---------------------------------------------------------------------------
# full model

class MicoModel:
    """Parameter container plus the forward pass over one bag."""

    def __init__(self, config: MicoConfig, rng: np.random.Generator,
                 anchor_init: np.ndarray | None = None):
        config.validate()
        self.config = config
        d, h = config.d, config.mlp_hidden
        self.params: dict[str, Tensor] = {}

        if anchor_init is None:
            anchor_init = rng.standard_normal((config.anchors, d))
        anchor_init = np.asarray(anchor_init, dtype=np.float64)
        if anchor_init.shape != (config.anchors, d):
            raise ConfigError(
                f"anchor init shape {anchor_init.shape} does not match ({config.anchors}, {d})")
        self._param("anchors", anchor_init)

        for l in range(config.layers):
            if not config.ablate_route:
                self._param(f"route{l}.w1", rng.standard_normal((d, h)) / np.sqrt(d))
                self._param(f"route{l}.b1", np.zeros(h))
                self._param(f"route{l}.w2", rng.standard_normal((h, d)) / np.sqrt(h))
                self._param(f"route{l}.b2", np.zeros(d))
            if not config.ablate_reducer and self._reduce_at(l):
                k = config.anchors // (2 ** l)
                self._param(f"reduce{l}.w1", rng.standard_normal((k, k)) / np.sqrt(k))
                self._param(f"reduce{l}.b1", np.zeros(k))
                self._param(f"reduce{l}.w2", rng.standard_normal((k, k // 2)) / np.sqrt(k))
                self._param(f"reduce{l}.b2", np.zeros(k // 2))

        if config.pooling == "gated_attention":
            self._param("attn.V", rng.standard_normal((d, h)) / np.sqrt(d))
            self._param("attn.U", rng.standard_normal((d, h)) / np.sqrt(d))
            self._param("attn.w", rng.standard_normal((h, 1)) / np.sqrt(h))

        self._param("head.w", rng.standard_normal((d, config.head_size)) / np.sqrt(d))
        self._param("head.b", np.zeros(config.head_size))

    def _reduce_at(self, layer: int) -> bool:
        # the reduction after the last layer feeds nothing unless anchor-mean
        # pooling consumes the final anchors
        return layer < self.config.layers - 1 or self.config.pooling == "anchor_mean"

    def _param(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in state:
                raise ConfigError(f"checkpoint is missing parameter {name!r}")
            if state[name].shape != p.data.shape:
                raise ConfigError(
                    f"parameter {name!r} shape {state[name].shape} != expected {p.data.shape}")
            p.data = np.array(state[name], dtype=np.float64, copy=True)

    def forward(self, features, assign_mode: str = "hard") -> tuple[Tensor, list[Assignment]]:
        """Run one bag through the layer stack, pooling and task head.

        ``assign_mode="soft"`` replaces the hard straight-through assignment
        with a row-softmax so the whole forward map is smooth; used only by
        the finite-difference gradient suite.
        """
        cfg = self.config
        H = features if isinstance(features, Tensor) else Tensor(features)
        if H.data.ndim != 2 or H.data.shape[1] != cfg.d:
            raise DataError(f"bag features must be (M, {cfg.d}), got {H.data.shape}")
        if H.data.shape[0] < 1:
            raise DataError("bag has no instances")
        if not np.all(np.isfinite(H.data)):
            raise DataError("bag features contain non-finite values")

        S = self.params["anchors"]
        assignments: list[Assignment] = []
        for l in range(cfg.layers):
            A = cosine_alignment(H, S)
            A_hat = ste_assign(A) if assign_mode == "hard" else _soft_assign(A)
            S_agg, counts = aggregate_anchors(H, A_hat, S)
            assignments.append(Assignment(
                alignment=A.data.copy(),
                hard=A_hat.data.copy(),
                indices=np.argmax(A.data, axis=1),
                counts=counts.copy(),
                aggregated=S_agg.data.copy(),
            ))
            if not cfg.ablate_route:
                H = route_update(H, A_hat, S_agg,
                                 self.params[f"route{l}.w1"], self.params[f"route{l}.b1"],
                                 self.params[f"route{l}.w2"], self.params[f"route{l}.b2"])
            if cfg.ablate_reducer or not self._reduce_at(l):
                S = S_agg
            else:
                S = cluster_reduce(S_agg,
                                   self.params[f"reduce{l}.w1"], self.params[f"reduce{l}.b1"],
                                   self.params[f"reduce{l}.w2"], self.params[f"reduce{l}.b2"])

        if cfg.pooling == "gated_attention":
            pooled, _ = gated_attention_pool(
                H, self.params["attn.V"], self.params["attn.U"], self.params["attn.w"])
        else:  # anchor_mean
            pooled = ad.reshape(ad.mean(S, axis=0), (1, cfg.d))

        out = ad.add_bias(ad.matmul(pooled, self.params["head.w"]), self.params["head.b"])
        return out, assignments


def random_anchor_init(pool: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Random anchors with per-dimension std matched to the pooled features."""
    pool = np.asarray(pool, dtype=np.float64)
    mu = pool.mean(axis=0)
    sd = pool.std(axis=0)
    return mu[None, :] + rng.standard_normal((k, pool.shape[1])) * sd[None, :]
