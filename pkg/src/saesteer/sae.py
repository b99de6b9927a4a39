"""Sparse autoencoder architectures: parameters, encode/decode, loss, stats.

Encoder weights are stored F x d and decoder weights d x F.  Inputs are
not shifted by the decoder bias before encoding.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from .io import ActivationDataset, read_container, write_container

ARCHITECTURES = ("ReLU", "Gated", "TopK", "BatchTopK", "JumpReLU")
_CANON = {a.lower(): a for a in ARCHITECTURES}

# which sparsity knob each architecture needs
_KNOB = {"ReLU": "lam", "Gated": "lam", "TopK": "k", "BatchTopK": "k", "JumpReLU": "target_l0"}


def canonical_arch(name: str) -> str:
    try:
        return _CANON[str(name).lower()]
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; expected one of {ARCHITECTURES}") from None


@dataclass(frozen=True)
class SaeConfig:
    architecture: str
    d: int
    F: int
    k: int | None = None
    lam: float | None = None
    target_l0: float | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "architecture", canonical_arch(self.architecture))
        if self.d < 1 or self.F < 1:
            raise ValueError("d and F must be positive")
        if self.F < self.d:
            raise ValueError(f"F={self.F} must be >= d={self.d}")
        need = _KNOB[self.architecture]
        for knob in ("k", "lam", "target_l0"):
            val = getattr(self, knob)
            if knob == need and val is None:
                raise ValueError(f"{self.architecture} requires {knob}")
            if knob != need and val is not None:
                raise ValueError(f"{self.architecture} does not take {knob}")
        if self.k is not None and not 1 <= self.k <= self.F:
            raise ValueError(f"k={self.k} must be in [1, F={self.F}]")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.target_l0 is not None and not 0 < self.target_l0 <= self.F:
            raise ValueError("target_l0 must be in (0, F]")

    @property
    def sparsity(self) -> float:
        return float(getattr(self, _KNOB[self.architecture]))


@dataclass
class SaeParams:
    arch: str
    W_enc: np.ndarray
    b_enc: np.ndarray
    W_dec: np.ndarray
    b_dec: np.ndarray
    threshold: np.ndarray | None = None
    r_mag: np.ndarray | None = None
    mag_bias: np.ndarray | None = None
    gate_bias: np.ndarray | None = None
    k: int | None = None
    inference_threshold: float | None = None

    @property
    def d(self) -> int:
        return self.W_enc.shape[1]

    @property
    def F(self) -> int:
        return self.W_enc.shape[0]

    def trainable(self) -> tuple[str, ...]:
        return TRAINABLE[self.arch]

    def copy(self) -> "SaeParams":
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = v.copy() if isinstance(v, np.ndarray) else v
        return SaeParams(**kw)


TRAINABLE = {
    "ReLU": ("W_enc", "b_enc", "W_dec", "b_dec"),
    "Gated": ("W_enc", "gate_bias", "r_mag", "mag_bias", "W_dec", "b_dec"),
    "TopK": ("W_enc", "b_enc", "W_dec", "b_dec"),
    "BatchTopK": ("W_enc", "b_enc", "W_dec", "b_dec"),
    "JumpReLU": ("W_enc", "b_enc", "W_dec", "b_dec", "threshold"),
}

JUMP_INIT_THRESHOLD = 1e-3


def init_params(config: SaeConfig) -> SaeParams:
    """Random unit-norm decoder, encoder initialised to its transpose."""
    rng = np.random.default_rng(config.seed)
    d, F = config.d, config.F
    W_dec = rng.normal(size=(d, F))
    W_dec /= np.linalg.norm(W_dec, axis=0, keepdims=True)
    p = SaeParams(config.architecture, W_dec.T.copy(), np.zeros(F), W_dec, np.zeros(d))
    if p.arch == "JumpReLU":
        p.threshold = np.full(F, JUMP_INIT_THRESHOLD)
    elif p.arch == "Gated":
        p.r_mag = np.zeros(F)
        p.mag_bias = np.zeros(F)
        p.gate_bias = np.zeros(F)
    elif p.arch in ("TopK", "BatchTopK"):
        p.k = config.k
    return p


def _as_batch(params: SaeParams, x) -> tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.ndim != 2 or X.shape[1] != params.d:
        raise ValueError(f"input width {X.shape[-1]} does not match d={params.d}")
    return X, single


def preactivations(params: SaeParams, X: np.ndarray) -> np.ndarray:
    if params.arch == "Gated":
        return X @ params.W_enc.T
    return X @ params.W_enc.T + params.b_enc


def _select_largest(z: np.ndarray, k: int) -> np.ndarray:
    """Per row of ``z``, mask of the k largest entries; ties at the cut go to lower indices."""
    n = z.shape[1]
    if k >= n:
        return np.ones(z.shape, dtype=bool)
    kth = -np.partition(-z, k - 1, axis=1)[:, k - 1:k]
    above = z > kth
    tied = z == kth
    need = k - above.sum(1, keepdims=True)
    return above | (tied & (np.cumsum(tied, axis=1) <= need))


def topk_mask(z: np.ndarray, k: int) -> np.ndarray:
    """Row-wise mask of the k largest strictly positive entries (lower index wins ties)."""
    return _select_largest(z, k) & (z > 0)


def batch_topk_mask(z: np.ndarray, k: int) -> np.ndarray:
    """Mask of the B*k largest strictly positive entries across the whole batch."""
    flat = z.reshape(1, -1)
    return _select_largest(flat, z.shape[0] * k).reshape(z.shape) & (z > 0)


def _encode(params: SaeParams, X: np.ndarray, training: bool) -> np.ndarray:
    z = preactivations(params, X)
    a = params.arch
    if a == "ReLU":
        return np.maximum(z, 0.0)
    if a == "TopK":
        return np.where(topk_mask(z, params.k), z, 0.0)
    if a == "BatchTopK":
        if training:
            return np.where(batch_topk_mask(z, params.k), z, 0.0)
        if params.inference_threshold is None:
            raise ValueError("BatchTopK inference threshold is not set")
        return np.where(z > params.inference_threshold, z, 0.0)
    if a == "JumpReLU":
        return np.where(z > params.threshold, z, 0.0)
    if a == "Gated":
        gate = (z + params.gate_bias) > 0
        mag = np.maximum(np.exp(params.r_mag) * z + params.mag_bias, 0.0)
        return np.where(gate, mag, 0.0)
    raise ValueError(a)


def encode(params: SaeParams, x) -> np.ndarray:
    """Code for one vector (or row-wise for a matrix); BatchTopK uses its inference threshold."""
    X, single = _as_batch(params, x)
    h = _encode(params, X, training=False)
    return h[0] if single else h


def encode_batch(params: SaeParams, X, training: bool = True) -> np.ndarray:
    """Batch codes; BatchTopK selects B*k entries jointly when ``training``."""
    X, _ = _as_batch(params, X)
    if len(X) < 1:
        raise ValueError("empty batch")
    return _encode(params, X, training)


def decode(params: SaeParams, h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != params.F:
        raise ValueError(f"code width {h.shape[-1]} does not match F={params.F}")
    return h @ params.W_dec.T + params.b_dec


class LossTerms(NamedTuple):
    total: float
    recon: float
    sparsity: float
    aux: float = 0.0


def loss(params: SaeParams, x, lambda_eff: float, training: bool = True) -> LossTerms:
    """Reconstruction plus sparsity penalty, averaged over rows.

    ReLU: lambda * L1(h).  Gated: lambda * L1 of the rectified gate
    preactivation.  JumpReLU: lambda * L0.  TopK/BatchTopK: no penalty.
    """
    X, _ = _as_batch(params, x)
    h = _encode(params, X, training)
    r = decode(params, h) - X
    recon = float((r * r).sum(1).mean())
    a = params.arch
    if a == "ReLU":
        sp = lambda_eff * float(h.sum(1).mean())
    elif a == "Gated":
        g = np.maximum(preactivations(params, X) + params.gate_bias, 0.0)
        sp = lambda_eff * float(g.sum(1).mean())
    elif a == "JumpReLU":
        sp = lambda_eff * float((h > 0).sum(1).mean())
    else:
        sp = 0.0
    return LossTerms(recon + sp, recon, sp)


def normalize_decoder_columns(params: SaeParams) -> SaeParams:
    """Return a copy with unit-norm decoder columns."""
    norms = np.linalg.norm(params.W_dec, axis=0)
    if np.any(norms == 0):
        raise ValueError(f"zero decoder column(s): {np.flatnonzero(norms == 0)[:5].tolist()}")
    out = params.copy()
    out.W_dec = params.W_dec / norms
    return out


def l0(codes) -> float:
    codes = np.atleast_2d(np.asarray(codes))
    if codes.shape[0] == 0:
        raise ValueError("empty batch")
    return float((codes > 0).sum(1).mean())


def feature_direction(params: SaeParams, f: int) -> np.ndarray:
    if not 0 <= f < params.F:
        raise IndexError(f"feature {f} out of range [0, {params.F})")
    return params.W_dec[:, f].copy()


def _unmasked_codes(params: SaeParams, dataset: ActivationDataset, chunk: int = 4096):
    rows = dataset.unmasked_indices()
    if len(rows) == 0:
        raise ValueError("dataset has no unmasked rows")
    for i in range(0, len(rows), chunk):
        yield rows[i:i + chunk], encode(params, dataset.activations[rows[i:i + chunk]])


def feature_max_activations(params: SaeParams, dataset: ActivationDataset) -> np.ndarray:
    """Max code value per feature over unmasked rows (0 where never active)."""
    m = np.zeros(params.F)
    for _, h in _unmasked_codes(params, dataset):
        np.maximum(m, h.max(0), out=m)
    return m


def feature_max_activation(params: SaeParams, dataset: ActivationDataset, f: int) -> float:
    if not 0 <= f < params.F:
        raise IndexError(f"feature {f} out of range [0, {params.F})")
    m = 0.0
    for _, h in _unmasked_codes(params, dataset):
        m = max(m, float(h[:, f].max()))
    return m


# checkpoint tensor names per architecture: (stored name, attribute, transpose)
_CKPT = {
    "ReLU": [("encoder.weight", "W_enc", False), ("encoder.bias", "b_enc", False),
             ("decoder.weight", "W_dec", False), ("bias", "b_dec", False)],
    "Gated": [("encoder.weight", "W_enc", False), ("gate_bias", "gate_bias", False),
              ("decoder.weight", "W_dec", False), ("decoder_bias", "b_dec", False),
              ("r_mag", "r_mag", False), ("mag_bias", "mag_bias", False)],
    "TopK": [("encoder.weight", "W_enc", False), ("encoder.bias", "b_enc", False),
             ("decoder.weight", "W_dec", False), ("b_dec", "b_dec", False)],
    "JumpReLU": [("W_enc", "W_enc", True), ("b_enc", "b_enc", False),
                 ("W_dec", "W_dec", True), ("b_dec", "b_dec", False),
                 ("threshold", "threshold", False)],
}
_CKPT["BatchTopK"] = _CKPT["TopK"]


def save_sae(path, params: SaeParams, meta: dict | None = None) -> None:
    tensors = {}
    for name, attr, tr in _CKPT[params.arch]:
        v = getattr(params, attr)
        tensors[name] = v.T if tr else v
    if params.arch in ("TopK", "BatchTopK"):
        tensors["k"] = np.array(float(params.k))
    if params.arch == "BatchTopK" and params.inference_threshold is not None:
        tensors["inference_threshold"] = np.array(params.inference_threshold)
    write_container(path, tensors, meta={"architecture": params.arch, **(meta or {})})


def load_sae(path) -> SaeParams:
    t, meta = read_container(path, with_meta=True)
    arch = canonical_arch(meta["architecture"])
    kw = {}
    for name, attr, tr in _CKPT[arch]:
        kw[attr] = t[name].T.copy() if tr else t[name]
    if arch == "Gated":
        kw["b_enc"] = np.zeros(kw["W_enc"].shape[0])
    p = SaeParams(arch, **kw)
    if arch in ("TopK", "BatchTopK"):
        p.k = int(t["k"])
    if "inference_threshold" in t:
        p.inference_threshold = float(t["inference_threshold"])
    return p
