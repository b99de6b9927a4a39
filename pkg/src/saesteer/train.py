"""SAE optimisation: schedules, analytic gradients, Adam, aux-k loss, training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .io import ActivationDataset, stream_batch_indices
from .sae import (
    LossTerms,
    SaeConfig,
    SaeParams,
    batch_topk_mask,
    encode_batch,
    init_params,
    preactivations,
    topk_mask,
)

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    batch: int
    lr: float = 3e-4
    # step counts left as None become 10% / 50% / 10% / 10% of total_steps
    lr_warmup_steps: int | None = None
    sparsity_warmup_steps: int | None = None
    decay_start_fraction: float = 0.8
    aux_k_coeff: float = 1 / 32
    k_aux: int = 32
    dead_window: int | None = None
    threshold_start: int | None = None
    threshold_momentum: float = 0.999
    jump_bandwidth: float = 1e-3
    jump_lambda_init: float = 0.05
    jump_lambda_rate: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        for name, frac in (("lr_warmup_steps", 0.1), ("sparsity_warmup_steps", 0.5),
                           ("dead_window", 0.1), ("threshold_start", 0.1)):
            if getattr(self, name) is None:
                object.__setattr__(self, name, max(1, int(self.total_steps * frac)))
        for name in ("total_steps", "batch", "lr_warmup_steps", "sparsity_warmup_steps",
                     "k_aux", "dead_window", "jump_bandwidth", "lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_warmup_steps >= self.total_steps:
            raise ValueError("lr_warmup_steps must be < total_steps")
        if self.sparsity_warmup_steps >= self.total_steps:
            raise ValueError("sparsity_warmup_steps must be < total_steps")
        if not 0 < self.decay_start_fraction < 1:
            raise ValueError("decay_start_fraction must be in (0, 1)")


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup, flat, then linear decay to 0 at total_steps."""
    if not 0 <= step <= config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps}]")
    T = config.total_steps
    start = config.decay_start_fraction * T
    warm = step / config.lr_warmup_steps
    decay = (T - step) / (T - start)
    return config.lr * min(1.0, warm, decay)


def lambda_eff_at(step: int, config: TrainConfig, lam: float) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    return lam * min(1.0, step / config.sparsity_warmup_steps)


def _aux_mask(z: np.ndarray, dead: np.ndarray, k_aux: int) -> np.ndarray:
    zd = np.where(dead, z, -np.inf)
    return topk_mask(zd, min(k_aux, int(dead.sum()))) if dead.any() else np.zeros(z.shape, bool)


def aux_k_loss(params: SaeParams, x, h, k_aux: int, dead: np.ndarray) -> float:
    """Error of reconstructing the residual x - x_hat from the top ``k_aux``
    dead latents (positive preactivations only), averaged over rows.

    The term is 0 when no latent is dead.
    """
    if params.arch not in ("TopK", "BatchTopK"):
        raise ValueError(f"aux-k loss is defined for TopK/BatchTopK, not {params.arch}")
    dead = np.asarray(dead, bool)
    if not dead.any():
        return 0.0
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    h = np.atleast_2d(h)
    e = X - (h @ params.W_dec.T + params.b_dec)
    z = preactivations(params, X)
    a = np.where(_aux_mask(z, dead, k_aux), z, 0.0)
    u = e - a @ params.W_dec.T
    return float((u * u).sum(1).mean())


@dataclass
class AuxContext:
    """Extra inputs for training objectives: the dead-latent mask (TopK
    family) and a frozen decoder for the Gated auxiliary term."""

    dead: np.ndarray | None = None
    frozen_W_dec: np.ndarray | None = None
    frozen_b_dec: np.ndarray | None = None


def objective(params: SaeParams, X, lambda_eff: float, ctx: AuxContext | None = None,
              config: TrainConfig | None = None, with_grad: bool = True):
    """Training objective and its exact gradient.

    Matches :func:`sae.loss` for ReLU.  TopK/BatchTopK add the scaled aux-k
    term.  Gated adds the rectified-gate reconstruction through a frozen
    decoder.  JumpReLU replaces the hard step by a linear ramp of width
    ``jump_bandwidth`` so the threshold receives a gradient.
    """
    cfg = config or TrainConfig(total_steps=2, batch=1, lr_warmup_steps=1, sparsity_warmup_steps=1)
    ctx = ctx or AuxContext()
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != params.d:
        raise ValueError(f"input width {X.shape[1]} does not match d={params.d}")
    B = len(X)
    a = params.arch
    z = preactivations(params, X)
    aux = 0.0
    g = {}
    if a == "ReLU":
        h = np.maximum(z, 0.0)
        sp = lambda_eff * h.sum() / B
    elif a in ("TopK", "BatchTopK"):
        mask = topk_mask(z, params.k) if a == "TopK" else batch_topk_mask(z, params.k)
        h = np.where(mask, z, 0.0)
        sp = 0.0
    elif a == "JumpReLU":
        eps = cfg.jump_bandwidth
        u = (z - params.threshold) / eps + 0.5
        s = np.clip(u, 0.0, 1.0)
        band = (u > 0) & (u < 1)
        h = z * s
        sp = lambda_eff * s.sum() / B
    elif a == "Gated":
        gpre = z + params.gate_bias
        gate = gpre > 0
        scale = np.exp(params.r_mag)
        mpre = scale * z + params.mag_bias
        h = np.where(gate, np.maximum(mpre, 0.0), 0.0)
        relu_g = np.maximum(gpre, 0.0)
        sp = lambda_eff * relu_g.sum() / B
        Wf = params.W_dec if ctx.frozen_W_dec is None else ctx.frozen_W_dec
        bf = params.b_dec if ctx.frozen_b_dec is None else ctx.frozen_b_dec
        ua = relu_g @ Wf.T + bf - X
        aux = float((ua * ua).sum() / B)
    else:
        raise ValueError(a)
    r = h @ params.W_dec.T + params.b_dec - X
    if a in ("TopK", "BatchTopK") and ctx.dead is not None and ctx.dead.any():
        amask = _aux_mask(z, ctx.dead, cfg.k_aux)
        act = np.where(amask, z, 0.0)
        ue = -r - act @ params.W_dec.T
        aux = cfg.aux_k_coeff * float((ue * ue).sum() / B)
    else:
        amask = None
    recon = float((r * r).sum() / B)
    terms = LossTerms(recon + sp + aux, recon, float(sp), aux)
    if not with_grad:
        return terms, None

    dxhat = 2.0 * r / B
    dh = dxhat @ params.W_dec
    g["W_dec"] = dxhat.T @ h
    g["b_dec"] = dxhat.sum(0)
    if a == "ReLU":
        dz = (dh + lambda_eff / B) * (z > 0)
    elif a in ("TopK", "BatchTopK"):
        if amask is not None:
            due = cfg.aux_k_coeff * 2.0 * ue / B
            # ue = -(xhat - x) - act @ W_dec.T
            dxhat_aux = -due
            g["W_dec"] += dxhat_aux.T @ h - due.T @ act
            g["b_dec"] += dxhat_aux.sum(0)
            dh = dh + dxhat_aux @ params.W_dec
            dz = dh * mask + (-due @ params.W_dec) * amask
        else:
            dz = dh * mask
    elif a == "JumpReLU":
        ds = dh * z + lambda_eff / B
        dz = dh * s + ds * band / eps
        g["threshold"] = -(ds * band).sum(0) / eps
    elif a == "Gated":
        dm = dh * gate * (mpre > 0)
        dz = dm * scale
        g["r_mag"] = (dm * scale * z).sum(0)
        g["mag_bias"] = dm.sum(0)
        drg = lambda_eff / B + (2.0 * ua / B) @ Wf
        dg = drg * gate
        g["gate_bias"] = dg.sum(0)
        dz = dz + dg
    g["W_enc"] = dz.T @ X
    if a != "Gated":
        g["b_enc"] = dz.sum(0)
    return terms, g


def grad(params: SaeParams, batch, lambda_eff: float, ctx: AuxContext | None = None,
         config: TrainConfig | None = None) -> dict[str, np.ndarray]:
    """Analytic gradients of :func:`objective` for every trainable tensor."""
    return objective(params, batch, lambda_eff, ctx, config)[1]


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(state: AdamState, params: SaeParams, grads: dict[str, np.ndarray], lr_t: float) -> None:
    """In-place Adam update of ``params`` and ``state``."""
    state.t += 1
    c1 = 1 - ADAM_BETA1**state.t
    c2 = 1 - ADAM_BETA2**state.t
    for name, gr in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(gr)
            state.v[name] = np.zeros_like(gr)
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * gr
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * gr * gr
        p = getattr(params, name)
        p -= lr_t * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def project_decoder_grad(W_dec: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Remove the component of each column gradient parallel to that (unit) column."""
    return G - W_dec * (W_dec * G).sum(0, keepdims=True)


@dataclass
class TrainMetrics:
    total: list = field(default_factory=list)
    recon: list = field(default_factory=list)
    sparsity: list = field(default_factory=list)
    l0: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    lambda_eff: list = field(default_factory=list)
    max_norm_error: list = field(default_factory=list)
    dead_fraction: float = 0.0

    @property
    def final_l0(self) -> float:
        n = max(1, len(self.l0) // 10)
        return float(np.mean(self.l0[-n:]))

    def as_dict(self) -> dict:
        return {
            "final_l0": self.final_l0,
            "dead_fraction": self.dead_fraction,
            "steps": len(self.total),
            "first_decile_loss": float(np.mean(self.total[: max(1, len(self.total) // 10)])),
            "last_decile_loss": float(np.mean(self.total[-max(1, len(self.total) // 10):])),
            "max_norm_error": float(np.max(self.max_norm_error)),
        }


def _batches(dataset: ActivationDataset, batch: int, seed: int):
    epoch = 0
    while True:
        yield from stream_batch_indices(dataset, batch, seed + 1_000_003 * epoch)
        epoch += 1


def train(dataset: ActivationDataset, sae_config: SaeConfig, train_config: TrainConfig,
          on_step=None) -> tuple[SaeParams, TrainMetrics]:
    """Train one SAE; decoder columns are renormalised after every step."""
    if dataset.d != sae_config.d:
        raise ValueError(f"dataset width {dataset.d} does not match SAE d={sae_config.d}")
    cfg = train_config
    params = init_params(sae_config)
    rows = dataset.unmasked_indices()
    params.b_dec = dataset.activations[rows].mean(0)
    state = AdamState()
    metrics = TrainMetrics()
    inactive = np.zeros(params.F, dtype=np.int64)
    arch = params.arch
    lam = sae_config.lam if sae_config.lam is not None else cfg.jump_lambda_init
    ema = None
    last_min = None
    batches = _batches(dataset, cfg.batch, cfg.seed)
    for step in range(cfg.total_steps):
        X = dataset.activations[next(batches)]
        lam_t = lambda_eff_at(step, cfg, lam)
        lr_t = lr_at(step, cfg)
        ctx = AuxContext()
        if arch in ("TopK", "BatchTopK"):
            ctx.dead = inactive >= cfg.dead_window
        elif arch == "Gated":
            ctx.frozen_W_dec, ctx.frozen_b_dec = params.W_dec.copy(), params.b_dec.copy()
        terms, g = objective(params, X, lam_t, ctx, cfg)
        g["W_dec"] = project_decoder_grad(params.W_dec, g["W_dec"])
        adam_step(state, params, g, lr_t)
        if params.threshold is not None:
            np.maximum(params.threshold, 0.0, out=params.threshold)
        params.W_dec /= np.linalg.norm(params.W_dec, axis=0, keepdims=True)

        h = encode_batch(params, X, training=True)
        active = (h > 0).any(0)
        inactive = np.where(active, 0, inactive + 1)
        row_l0 = float((h > 0).sum(1).mean())
        if arch == "BatchTopK":
            sel = h[h > 0]
            if sel.size:
                last_min = float(sel.min())
                if step >= cfg.threshold_start:
                    m = cfg.threshold_momentum
                    ema = last_min if ema is None else m * ema + (1 - m) * last_min
        if arch == "JumpReLU":
            # multiplicative controller that steers the measured L0 to target
            lam *= float(np.exp(cfg.jump_lambda_rate * np.clip(row_l0 / sae_config.target_l0 - 1, -1, 1)))
        metrics.total.append(terms.total)
        metrics.recon.append(terms.recon)
        metrics.sparsity.append(terms.sparsity)
        metrics.l0.append(row_l0)
        metrics.lr.append(lr_t)
        metrics.lambda_eff.append(lam_t)
        metrics.max_norm_error.append(float(np.abs(np.linalg.norm(params.W_dec, axis=0) - 1).max()))
        if on_step is not None:
            on_step(step, params, terms)
    if arch == "BatchTopK":
        if ema is None:
            log.warning("threshold tracking never started; using the last batch minimum")
            ema = last_min if last_min is not None else 0.0
        params.inference_threshold = ema
    metrics.dead_fraction = float((inactive >= cfg.dead_window).mean())
    return params, metrics
