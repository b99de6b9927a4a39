"""Token entropy, top-k token confidence, Delta Token Confidence and tiered feature selection."""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .corpus import BOS, default_vocab
from .sae import SaeParams, encode
from .toylm import HookPoint, TokenDistribution, ToyLM, next_token_distribution, softmax

DEFAULT_ALPHA = 10.0
DEFAULT_K = 1
DEFAULT_PREFIX = "From my experience,"
INTERVENTION_MODES = ("additive", "amplify")
TOPK_SIZES = (1, 2, 3, 4, 5)
QUANTILES = (0.99, 0.95, 0.90, 0.80)
SELECT_MODES = ("abs", "up", "down")


class InvalidDistributionError(ValueError):
    pass


def _probs(p) -> np.ndarray:
    q = np.asarray(p.probs if isinstance(p, TokenDistribution) else p, dtype=np.float64)
    if q.ndim != 1 or q.size == 0:
        raise InvalidDistributionError("distribution must be a non-empty vector")
    if np.any(q < 0) or not np.all(np.isfinite(q)) or abs(q.sum() - 1.0) > 1e-9:
        raise InvalidDistributionError("probabilities must be non-negative and sum to 1")
    return q


def token_entropy(p) -> float:
    """Natural-log entropy, with 0 log 0 = 0."""
    q = _probs(p)
    nz = q[q > 0]
    return float(-(nz * np.log(nz)).sum())


def top_k_indices(q: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries, ties broken by lower index."""
    return np.lexsort((np.arange(len(q)), -q))[:k]


def token_confidence(p, k: int = DEFAULT_K) -> float:
    """Mean negative log-probability of the k most likely tokens."""
    q = _probs(p)
    if not 1 <= k <= len(q):
        raise ValueError(f"k must be in [1, {len(q)}]")
    top = q[top_k_indices(q, k)]
    if np.any(top <= 0):
        raise InvalidDistributionError("zero probability inside the top-k set")
    return float(-np.log(top).mean())


@dataclass(frozen=True)
class DeltaRecord:
    feature: int
    delta: float
    k: int
    alpha: float

    @property
    def direction(self) -> str:
        return "UP" if self.delta > 0 else ("DOWN" if self.delta < 0 else "NEUTRAL")


def _code_factor(alpha: float, mode: str) -> float:
    if mode == "additive":
        return alpha
    if mode == "amplify":
        return alpha - 1.0
    raise ValueError(f"unknown intervention mode {mode!r}")


def feature_hook(params: SaeParams, feature: int, alpha: float, layer: int,
                 mode: str = "additive") -> HookPoint:
    """Add c * h_f(x) * v_f at every position, with c = alpha (additive) or alpha - 1 (amplify)."""
    if not 0 <= feature < params.F:
        raise IndexError(f"feature {feature} out of range [0, {params.F})")
    c = _code_factor(alpha, mode)
    v = params.W_dec[:, feature]

    def transform(x):
        h = encode(params, x.reshape(-1, params.d))[:, feature].reshape(x.shape[:-1])
        return x + c * h[..., None] * v

    return HookPoint(layer, transform)


def prefix_tokens(prefix: str | Sequence[int]) -> np.ndarray:
    if isinstance(prefix, str):
        return np.array([BOS] + default_vocab().encode(prefix), dtype=np.int64)
    return np.asarray(prefix, dtype=np.int64)


def delta_confidence(lm: ToyLM, params: SaeParams, feature: int, alpha: float = DEFAULT_ALPHA,
                     k: int = DEFAULT_K, prefix=DEFAULT_PREFIX, mode: str = "additive",
                     layer: int | None = None) -> DeltaRecord:
    """C_k under the single-feature intervention minus C_k at baseline."""
    toks = prefix_tokens(prefix)
    layer = lm.config.hook_layer if layer is None else layer
    hook = feature_hook(params, feature, alpha, layer, mode)
    base = next_token_distribution(lm, toks)
    steered = next_token_distribution(lm, toks, hook)
    return DeltaRecord(int(feature), token_confidence(steered, k) - token_confidence(base, k),
                       k, float(alpha))


def delta_confidence_all(lm: ToyLM, params: SaeParams, features: Sequence[int] | None = None,
                         alpha: float = DEFAULT_ALPHA, k: int = DEFAULT_K, prefix=DEFAULT_PREFIX,
                         mode: str = "additive", layer: int | None = None,
                         chunk: int = 256) -> list[DeltaRecord]:
    """Batched :func:`delta_confidence` over many features (one sequence per feature)."""
    toks = prefix_tokens(prefix)
    layer = lm.config.hook_layer if layer is None else layer
    feats = np.arange(params.F) if features is None else np.asarray(features, dtype=np.int64)
    if np.any((feats < 0) | (feats >= params.F)):
        raise IndexError("feature index out of range")
    c = _code_factor(alpha, mode)
    out: list[DeltaRecord] = []
    for s in range(0, len(feats), chunk):
        fs = feats[s:s + chunk]
        # Row 0 is the unsteered baseline, computed in the same batch so that
        # a zero intervention reproduces it bit for bit.
        rows = np.concatenate([[0], fs])
        coef = np.full(len(rows), c)
        coef[0] = 0.0
        V = params.W_dec[:, rows].T

        def transform(x, rows=rows, coef=coef, V=V):
            H = encode(params, x.reshape(-1, params.d)).reshape(x.shape[0], x.shape[1], -1)
            h = H[np.arange(len(rows)), :, rows] * coef[:, None]
            return x + h[..., None] * V[:, None, :]

        batch = np.tile(toks, (len(rows), 1))
        final, _ = lm.residuals(batch, HookPoint(layer, transform))
        probs = softmax(lm.readout(final[:, -1]))
        base = token_confidence(probs[0] / probs[0].sum(), k)
        for f, p in zip(fs, probs[1:]):
            out.append(DeltaRecord(int(f), token_confidence(p / p.sum(), k) - base, k, float(alpha)))
    return out


@dataclass(frozen=True)
class SelectionSet:
    features: tuple[int, ...]
    rule: tuple[str, float]  # ("topk", K) or ("quantile", q)
    mode: str

    def __post_init__(self):
        if len(set(self.features)) != len(self.features):
            raise ValueError("selected features must be unique")

    @property
    def label(self) -> str:
        kind, v = self.rule
        return f"{self.mode}-{kind}{int(v) if kind == 'topk' else v}"


def rank_and_tier(records: Sequence[DeltaRecord], rule: tuple[str, float], mode: str) -> SelectionSet:
    """Select features from a DeltaRecord pool.

    ``abs`` ranks by |delta|; ``up`` / ``down`` keep only positive / negative deltas.
    ``("topk", K)`` keeps the first K; ``("quantile", q)`` keeps deltas beyond the q-th
    percentile of the pool (the (1-q)-th for the lower tail).  Ties go to lower indices.
    """
    if not records:
        raise ValueError("empty DeltaRecord pool")
    if mode not in SELECT_MODES:
        raise ValueError(f"unknown selection mode {mode!r}")
    f = np.array([r.feature for r in records], dtype=np.int64)
    d = np.array([r.delta for r in records], dtype=np.float64)
    if len(set(f.tolist())) != len(f):
        raise ValueError("duplicate features in the pool")
    kind, value = rule
    if kind == "topk":
        if int(value) != value or value < 1:
            raise ValueError("top-K size must be a positive integer")
        up, down = d > 0, d < 0
        keep = {"abs": np.ones(len(d), bool), "up": up, "down": down}[mode]
    elif kind == "quantile":
        if not 0.5 <= value < 1:
            raise ValueError("quantile must be in [0.5, 1)")
        up = (d > np.quantile(d, value)) & (d > 0)
        down = (d < np.quantile(d, 1 - value)) & (d < 0)
        keep = {"abs": up | down, "up": up, "down": down}[mode]
    else:
        raise ValueError(f"unknown rule {kind!r}")
    key = {"abs": -np.abs(d), "up": -d, "down": d}[mode]
    order = np.lexsort((f, key))
    chosen = [int(f[i]) for i in order if keep[i]]
    if kind == "topk":
        chosen = chosen[:int(value)]
    return SelectionSet(tuple(chosen), (kind, float(value)), mode)


def default_tiers(records: Sequence[DeltaRecord], modes: Sequence[str] = SELECT_MODES,
                  sizes: Sequence[int] = TOPK_SIZES,
                  quantiles: Sequence[float] = QUANTILES) -> list[SelectionSet]:
    """All top-K and quantile tiers in each mode, dropping empty and duplicate sets."""
    tiers, seen = [], set()
    for mode in modes:
        rules = [("topk", float(K)) for K in sizes] + [("quantile", q) for q in quantiles]
        for rule in rules:
            s = rank_and_tier(records, rule, mode)
            if s.features and (s.mode, s.features) not in seen:
                seen.add((s.mode, s.features))
                tiers.append(s)
    return tiers


def select_best_tier(tiers: Sequence[SelectionSet],
                     evaluate: Callable[[SelectionSet], float]) -> tuple[SelectionSet, float]:
    """Tier with the highest score; ties go to the smaller tier, then the earlier one."""
    if not tiers:
        raise ValueError("no tiers to select from")
    scored = [(evaluate(t), t) for t in tiers]
    best_i = max(range(len(scored)), key=lambda i: (scored[i][0], -len(scored[i][1].features), -i))
    return scored[best_i][1], float(scored[best_i][0])


class Selector(Protocol):
    """Proposes candidate feature tiers from a pool; plug in any selection baseline."""

    name: str

    def tiers(self, lm: ToyLM, params: SaeParams, pool: Sequence[int]) -> list[SelectionSet]:
        ...


@dataclass
class DeltaConfidenceSelector:
    alpha: float = DEFAULT_ALPHA
    k: int = DEFAULT_K
    prefix: str = DEFAULT_PREFIX
    mode: str = "additive"
    layer: int | None = None
    name: str = "delta_confidence"

    def records(self, lm: ToyLM, params: SaeParams, pool: Sequence[int]) -> list[DeltaRecord]:
        return delta_confidence_all(lm, params, pool, self.alpha, self.k, self.prefix,
                                    self.mode, self.layer)

    def tiers(self, lm: ToyLM, params: SaeParams, pool: Sequence[int]) -> list[SelectionSet]:
        return default_tiers(self.records(lm, params, pool))


@dataclass
class RandomSelector:
    """Random subsets of the same sizes as the top-K tiers."""

    seed: int = 0
    sizes: tuple[int, ...] = TOPK_SIZES
    name: str = "random"

    def tiers(self, lm: ToyLM, params: SaeParams, pool: Sequence[int]) -> list[SelectionSet]:
        rng = np.random.default_rng(self.seed)
        order = [int(f) for f in rng.permutation(np.asarray(pool))]
        return [SelectionSet(tuple(order[:K]), ("topk", float(K)), "random")
                for K in self.sizes if K <= len(order)]
