"""A small deterministic decoder-only transformer over the toy word vocabulary.

Weights are random functions of the config seed, with one exception: the
readout (unembedding) is ridge-fit so that the model's next-token
distribution approximates the topic grammar's.  That makes generations
look like grammar text, which the synthetic judge can score.
"""

from __future__ import annotations

import hashlib
import json
import os
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .corpus import BOS, EOS, PAD, TOPIC_NAMES, TOPICS, CATEGORIES, Grammar, Vocab, pack_documents
from .io import ActivationDataset, ContainerError, read_container, write_container

LN_EPS = 1e-5
CACHE_VERSION = 1
READOUT_SMOOTHING = 0.02
READOUT_RIDGE = 1e-3
READOUT_DOCS = 400
READOUT_ITERS = 150
READOUT_L2 = 1e-4
RECENCY_SLOPES = np.array([0.0, 0.05, 0.5, 2.0])


@dataclass(frozen=True)
class ToyLmConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    context: int = 128
    seed: int = 0
    layer: int | None = None
    final_norm: bool = True

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "context"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0 <= self.hook_layer < self.n_layers:
            raise ValueError(f"layer {self.layer} outside [0, {self.n_layers})")

    @property
    def hook_layer(self) -> int:
        return self.n_layers // 2 if self.layer is None else self.layer


@dataclass(frozen=True)
class HookPoint:
    """Transform applied to the residual stream (T x d) right after block ``layer``."""

    layer: int
    transform: Callable[[np.ndarray], np.ndarray]


@dataclass
class TokenDistribution:
    probs: np.ndarray
    source: str = "baseline"
    logits: np.ndarray | None = field(default=None, repr=False)


def layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x * x * x)))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def _init_weights(cfg: ToyLmConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    V, d = cfg.vocab_size, cfg.d_model
    emb = rng.normal(0.0, 1.0, (V, d))
    # give content words a shared topic and category component so that the
    # bag of previous words carries linearly readable topic information
    vocab = Vocab(V)
    topic_dirs = rng.normal(0.0, 1.0, (len(TOPIC_NAMES), d))
    cat_dirs = rng.normal(0.0, 1.0, (len(CATEGORIES), d))
    for ti, topic in enumerate(TOPIC_NAMES):
        for ci, fam in enumerate(TOPICS[topic]):
            for w in fam:
                if w in vocab.index:
                    i = vocab.index[w]
                    emb[i] = 0.3 * emb[i] + 0.8 * topic_dirs[ti] + 0.8 * cat_dirs[ci]
    w = {"embed": emb, "pos": rng.normal(0.0, 0.3, (cfg.context, d))}
    s = 1.0 / np.sqrt(d)
    for b in range(cfg.n_layers):
        w[f"blocks.{b}.wq"] = rng.normal(0.0, s, (d, d))
        w[f"blocks.{b}.wk"] = rng.normal(0.0, s, (d, d))
        w[f"blocks.{b}.wv"] = rng.normal(0.0, s, (d, d))
        w[f"blocks.{b}.wo"] = rng.normal(0.0, 2.0 * s, (d, d))
        w[f"blocks.{b}.w1"] = rng.normal(0.0, s, (d, 4 * d))
        w[f"blocks.{b}.w2"] = rng.normal(0.0, 0.5 / np.sqrt(4 * d), (4 * d, d))
    # head 0 of the first block attends uniformly (bag of previous words)
    w["blocks.0.wq"][:, : d // cfg.n_heads] = 0.0
    w["unembed"] = rng.normal(0.0, s, (d, V))
    w["unembed_bias"] = np.zeros(V)
    return w


class ToyLM:
    """Immutable model instance; use :func:`init_lm` to build one."""

    def __init__(self, config: ToyLmConfig, weights: dict[str, np.ndarray]):
        self.config = config
        self.vocab = Vocab(config.vocab_size)
        self.weights = {}
        for k, v in weights.items():
            a = np.array(v, dtype=np.float64)
            a.setflags(write=False)
            self.weights[k] = a
        # per-head linear recency bias (ALiBi style); -inf above the diagonal
        n = config.context
        dist = np.arange(n)[:, None] - np.arange(n)[None, :]
        slopes = RECENCY_SLOPES[np.arange(config.n_heads) % len(RECENCY_SLOPES)]
        self._recency = np.where(dist >= 0, slopes[:, None, None] * dist, np.inf)

    @property
    def model_id(self) -> str:
        c = self.config
        return f"toylm-v{c.vocab_size}-d{c.d_model}-L{c.n_layers}-s{c.seed}"

    @property
    def unembed(self) -> np.ndarray:
        """Readout matrix (d x V); column t is the unembedding row of token t."""
        return self.weights["unembed"]

    def with_unembedding(self, W_U: np.ndarray, b_U: np.ndarray | None = None) -> "ToyLM":
        w = dict(self.weights)
        w["unembed"] = np.asarray(W_U, dtype=np.float64)
        if b_U is not None:
            w["unembed_bias"] = np.asarray(b_U, dtype=np.float64)
        return ToyLM(self.config, w)

    def _check(self, tokens: np.ndarray) -> None:
        if tokens.shape[-1] == 0:
            raise ValueError("empty token sequence")
        if tokens.shape[-1] > self.config.context:
            raise ValueError(f"sequence length {tokens.shape[-1]} exceeds context {self.config.context}")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise ValueError("token id outside vocabulary")

    def _block(self, x: np.ndarray, b: int) -> np.ndarray:
        w = self.weights
        T, d = x.shape[-2], x.shape[-1]
        H = self.config.n_heads
        dh = d // H
        h = layer_norm(x)
        heads = (*x.shape[:-1], H, dh)
        q = np.swapaxes((h @ w[f"blocks.{b}.wq"]).reshape(heads), -2, -3)
        k = np.swapaxes((h @ w[f"blocks.{b}.wk"]).reshape(heads), -2, -3)
        v = np.swapaxes((h @ w[f"blocks.{b}.wv"]).reshape(heads), -2, -3)
        att = (q @ np.swapaxes(k, -1, -2)) / np.sqrt(dh) - self._recency[:, :T, :T]
        o = np.swapaxes(softmax(att) @ v, -2, -3).reshape(x.shape)
        x = x + o @ w[f"blocks.{b}.wo"]
        x = x + gelu(layer_norm(x) @ w[f"blocks.{b}.w1"]) @ w[f"blocks.{b}.w2"]
        return x

    def residuals(self, tokens, hook: HookPoint | None = None, capture: int | None = None):
        """Run the blocks; return (final residual, captured pre-hook residual)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        self._check(tokens)
        if hook is not None and not 0 <= hook.layer < self.config.n_layers:
            raise ValueError(f"hook layer {hook.layer} outside [0, {self.config.n_layers})")
        if capture is None:
            capture = hook.layer if hook is not None else self.config.hook_layer
        T = tokens.shape[-1]
        x = self.weights["embed"][tokens] + self.weights["pos"][:T]
        captured = None
        for b in range(self.config.n_layers):
            x = self._block(x, b)
            if b == capture:
                captured = x.copy()
            if hook is not None and b == hook.layer:
                y = np.asarray(hook.transform(x), dtype=np.float64)
                if y.shape != x.shape:
                    raise ValueError("hook transform must preserve the residual shape")
                x = y
        return x, captured

    def readout(self, x: np.ndarray) -> np.ndarray:
        if self.config.final_norm:
            x = layer_norm(x)
        return x @ self.weights["unembed"] + self.weights["unembed_bias"]


def _fit_readout(X: np.ndarray, logq: np.ndarray) -> np.ndarray:
    """Softmax regression of the grammar distribution on residual features.

    Ridge on log-probabilities gives the starting point; L-BFGS then
    minimizes the cross-entropy against the smoothed target distribution.
    Returns a (d + 1) x V matrix whose last row is the bias.
    """
    N, d = X.shape
    X1 = np.hstack([X, np.ones((N, 1))])
    reg = READOUT_RIDGE * N * np.eye(d + 1)
    reg[-1, -1] = 0.0
    W0 = np.linalg.solve(X1.T @ X1 + reg, X1.T @ logq)
    Q = np.exp(logq)
    Q /= Q.sum(1, keepdims=True)
    V = Q.shape[1]

    def objective(flat):
        W = flat.reshape(d + 1, V)
        Z = X1 @ W
        Z -= Z.max(1, keepdims=True)
        logp = Z - np.log(np.exp(Z).sum(1, keepdims=True))
        loss = -(Q * logp).sum() / N + READOUT_L2 * (W[:-1] ** 2).sum()
        grad = X1.T @ (np.exp(logp) - Q) / N
        grad[:-1] += 2 * READOUT_L2 * W[:-1]
        return loss, grad.ravel()

    res = minimize(objective, W0.ravel(), jac=True, method="L-BFGS-B",
                   options={"maxiter": READOUT_ITERS})
    return res.x.reshape(d + 1, V)


@lru_cache(maxsize=16)
def _fitted_weights(cfg: ToyLmConfig) -> dict[str, np.ndarray]:
    w = _init_weights(cfg)
    vocab = Vocab(cfg.vocab_size)
    if vocab.n_real > cfg.vocab_size:
        return w  # vocabulary too small for the grammar: keep the random readout
    lm = ToyLM(cfg, w)
    grammar = Grammar(vocab)
    rng = np.random.default_rng([cfg.seed, 7919])
    docs, dists = [], []
    for _ in range(READOUT_DOCS):
        toks, _, q = grammar.sample_document(rng, with_dist=True)
        docs.append(toks)
        dists.append(q)
    chunks = pack_documents(docs, cfg.context)
    toks = np.stack([c[0] for c in chunks])
    keep = np.stack([c[1] for c in chunks]) >= 0
    feats = []
    for i in range(0, len(toks), 16):
        x, _ = lm.residuals(toks[i:i + 16])
        if cfg.final_norm:
            x = layer_norm(x)
        feats.append(x[keep[i:i + 16]])
    # packing keeps document order, so kept rows line up with the stacked targets
    X = np.concatenate(feats)
    Y = np.log((1 - READOUT_SMOOTHING) * np.concatenate(dists) + READOUT_SMOOTHING / cfg.vocab_size)
    sol = _fit_readout(X, Y)
    w["unembed"] = sol[:-1]
    w["unembed_bias"] = sol[-1]
    return w


def _cache_path(config: ToyLmConfig) -> Path | None:
    root = os.environ.get("SAESTEER_CACHE_DIR", str(Path.home() / ".cache" / "saesteer"))
    if root.lower() in ("", "0", "off", "none"):
        return None
    key = json.dumps({"v": CACHE_VERSION, **asdict(config)}, sort_keys=True)
    return Path(root) / f"toylm-{hashlib.sha256(key.encode()).hexdigest()[:16]}.bin"


def init_lm(config: ToyLmConfig) -> ToyLM:
    """Deterministic model for ``config``; the readout is fit to the grammar.

    Fitting takes tens of seconds, so fitted weights are cached on disk
    (``SAESTEER_CACHE_DIR``; set it to ``off`` to disable).
    """
    path = _cache_path(config)
    if path is not None and path.exists():
        try:
            return ToyLM(config, read_container(path))
        except (ContainerError, OSError):
            pass
    lm = ToyLM(config, _fitted_weights(config))
    if path is not None:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(f".{os.getpid()}.tmp")
            write_container(tmp, lm.weights)
            os.replace(tmp, path)
        except OSError:
            pass
    return lm


def forward_with_hook(lm: ToyLM, tokens, hook: HookPoint | None = None):
    """Return (final-position logits, residual at the hook layer before the hook)."""
    x, captured = lm.residuals(tokens, hook)
    return lm.readout(x[-1]), captured


def next_token_distribution(lm: ToyLM, prefix, hook: HookPoint | None = None) -> TokenDistribution:
    logits, _ = forward_with_hook(lm, prefix, hook)
    return TokenDistribution(softmax(logits), "baseline" if hook is None else "intervened", logits)


def generate(lm: ToyLM, prefix, max_tokens: int, hook: HookPoint | None = None,
             decode_seed: int = 0, temperature: float = 0.0) -> np.ndarray:
    """Extend ``prefix`` token by token; greedy unless ``temperature`` > 0.

    Stops after ``max_tokens`` new tokens, after emitting EOS, or when the
    context is full.  Returns prefix plus continuation.
    """
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    seq = [int(t) for t in prefix]
    rng = np.random.default_rng(decode_seed)
    for _ in range(max_tokens):
        if len(seq) >= lm.config.context:
            break
        logits, _ = forward_with_hook(lm, np.array(seq), hook)
        if temperature > 0:
            nxt = int(rng.choice(len(logits), p=softmax(logits / temperature)))
        else:
            nxt = int(np.argmax(logits))
        seq.append(nxt)
        if nxt == EOS:
            break
    return np.array(seq, dtype=np.int64)


def build_corpus(config: ToyLmConfig, n_tokens: int, seed: int, lm: ToyLM | None = None,
                 batch_chunks: int = 16) -> ActivationDataset:
    """Sample grammar documents, pack them and record residuals at the hook layer."""
    if n_tokens < config.context:
        raise ValueError("n_tokens must be at least the context length")
    lm = lm or init_lm(config)
    grammar = Grammar(lm.vocab)
    rng = np.random.default_rng(seed)
    docs = []
    total = 0
    while total < n_tokens + config.context:
        toks, _ = grammar.sample_document(rng)
        docs.append(toks)
        total += len(toks)
    chunks = pack_documents(docs, config.context)
    need = -(-n_tokens // config.context)
    chunks = chunks[:need]
    toks = np.stack([c[0] for c in chunks])
    dids = np.stack([c[1] for c in chunks])
    acts = []
    for i in range(0, len(toks), batch_chunks):
        _, cap = lm.residuals(toks[i:i + batch_chunks])
        acts.append(cap.reshape(-1, config.d_model))
    toks = toks.reshape(-1)[:n_tokens]
    dids = dids.reshape(-1)[:n_tokens]
    acts = np.concatenate(acts)[:n_tokens]
    special = (toks == PAD) | (toks == BOS) | (toks == EOS)
    return ActivationDataset(lm.model_id, config.hook_layer, toks, acts, special, dids)


def save_lm(path, lm: ToyLM) -> None:
    write_container(path, lm.weights, meta={"config": asdict(lm.config)})


def load_lm(path) -> ToyLM:
    w, meta = read_container(path, with_meta=True)
    return ToyLM(ToyLmConfig(**meta["config"]), w)
