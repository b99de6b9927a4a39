"""Oracles and fixtures shared by the unit tests and the acceptance suite."""

import itertools
import math

import numpy as np

from saesteer.corpus import default_vocab
from saesteer.sae import SaeConfig, SaeParams, init_params, preactivations
from saesteer.train import AuxContext, TrainConfig, objective

# ------------------------------------------------------------ gradient checks

GC_CONFIG = TrainConfig(total_steps=10, batch=4, lr_warmup_steps=1, sparsity_warmup_steps=1, k_aux=4)
KNOBS = {"ReLU": {"lam": 0.3}, "Gated": {"lam": 0.3}, "TopK": {"k": 3}, "BatchTopK": {"k": 3},
         "JumpReLU": {"target_l0": 4.0}}


def gradcheck_setup(arch: str):
    """Seeded (params, batch, context) at d=8, F=16, B=4 exercising every branch."""
    p = init_params(SaeConfig(arch, 8, 16, seed=1, **KNOBS[arch]))
    rng = np.random.default_rng(2)
    X = rng.normal(size=(4, 8))
    if arch != "Gated":
        p.b_enc = rng.normal(size=16) * 0.3
    p.b_dec = rng.normal(size=8) * 0.1
    ctx = AuxContext()
    if arch in ("TopK", "BatchTopK"):
        ctx.dead = np.arange(16) % 3 == 0
    if arch == "Gated":
        p.r_mag = rng.normal(size=16) * 0.2
        p.mag_bias = rng.normal(size=16) * 0.2
        p.gate_bias = rng.normal(size=16) * 0.2
        ctx.frozen_W_dec = p.W_dec.copy() + 0.1
        ctx.frozen_b_dec = p.b_dec.copy()
    if arch == "JumpReLU":
        z = preactivations(p, X)
        # odd latents sit inside the threshold ramp on row 0, even ones well away from it
        thr = np.abs(rng.normal(size=16))
        thr[1::2] = z[0, 1::2] - 2e-4
        p.threshold = np.maximum(thr, 0.0)
    return p, X, ctx


def finite_difference(p: SaeParams, X, lam, ctx, name, h=1e-6):
    P = getattr(p, name)
    G = np.zeros_like(P)
    for i in np.ndindex(P.shape):
        old = P[i]
        P[i] = old + h
        up = objective(p, X, lam, ctx, GC_CONFIG, with_grad=False)[0].total
        P[i] = old - h
        down = objective(p, X, lam, ctx, GC_CONFIG, with_grad=False)[0].total
        P[i] = old
        G[i] = (up - down) / (2 * h)
    return G


def max_relative_error(a, n):
    rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-300)
    # both exactly zero analytically and numerically flat: nothing to compare
    rel[(a == 0) & (np.abs(n) < 1e-9)] = 0.0
    return float(rel.max())


# ------------------------------------------------------------ rank statistics

def brute_tau_b(x, y):
    """Pair-counting tau-b: (P - Q) / sqrt((P + Q + Tx)(P + Q + Ty))."""
    P = Q = Tx = Ty = 0
    for i, j in itertools.combinations(range(len(x)), 2):
        dx, dy = x[i] - x[j], y[i] - y[j]
        if dx == 0 and dy == 0:
            continue
        if dx == 0:
            Tx += 1
        elif dy == 0:
            Ty += 1
        elif (dx > 0) == (dy > 0):
            P += 1
        else:
            Q += 1
    return (P - Q) / math.sqrt((P + Q + Tx) * (P + Q + Ty))


def random_tie_pair(rng):
    """x, y of length 3..12 on a small integer support, so ties are common."""
    n = int(rng.integers(3, 13))
    while True:
        x = rng.integers(0, 5, n).astype(float)
        y = rng.integers(0, 5, n).astype(float)
        if len(set(x)) > 1 and len(set(y)) > 1:
            return x, y


# ------------------------------------------------------------ autointerp

DOC_LEN = 100


def sparse_codes(n: int, F: int, seed: int, spikes: int = 40) -> np.ndarray:
    """Each latent fires at ``spikes`` random rows with exponential magnitudes."""
    rng = np.random.default_rng(seed)
    H = np.zeros((n, F))
    for f in range(F):
        rows = rng.choice(n, size=spikes, replace=False)
        H[rows, f] = rng.exponential(size=spikes) + 0.05
    return H


def layout(n: int):
    doc_ids = np.arange(n) // DOC_LEN
    special = np.zeros(n, bool)
    special[::DOC_LEN] = True  # a BOS at the start of every document
    return doc_ids, special


# ------------------------------------------------------------ planted features

def plant_readout_atom(params: SaeParams, lm, token: str, feature: int = 0) -> SaeParams:
    """Copy of ``params`` whose ``feature`` decodes along the readout column of ``token``
    and is active (code 1) on every input."""
    q = params.copy()
    u = lm.unembed[:, default_vocab().index[token]]
    q.W_dec[:, feature] = u / np.linalg.norm(u)
    q.W_enc[feature] = 0.0
    q.b_enc[feature] = 1.0
    return q
