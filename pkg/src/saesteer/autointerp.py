"""Automated interpretability: window sampling, labels, per-latent accuracy, SAE score."""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .io import ActivationDataset
from .judge import JudgeError
from .sae import SaeParams, encode

log = logging.getLogger(__name__)

BUFFER = 10
WINDOW = 2 * BUFFER + 1
N_TOP, N_IW, N_RANDOM = 12, 7, 10
GEN_TOP, GEN_IW = 10, 5
TAU_FRACTION = 0.01


class InsufficientDataError(ValueError):
    pass


@dataclass
class WindowSample:
    latent: int
    sequence: int  # document id
    position: int  # offset of the center inside its document
    center: int  # flat row index of the center
    tokens: np.ndarray
    activations: np.ndarray
    kind: str  # "top", "iw" or "random"


@dataclass
class LatentEvalSet:
    latent: int
    generation: list[WindowSample]
    scoring: list[WindowSample]
    tau_act: float
    v_max: float
    counts: dict = field(default_factory=dict)


@dataclass
class InterpScore:
    latent: int
    accuracy: float
    description: str
    flagged: bool = False


def valid_centers(doc_ids: np.ndarray, special_mask: np.ndarray) -> np.ndarray:
    """Unmasked rows whose 21-token window lies inside one document."""
    n = len(doc_ids)
    c = np.arange(BUFFER, n - BUFFER)
    ok = (~special_mask[c]) & (doc_ids[c] >= 0)
    ok &= (doc_ids[c - BUFFER] == doc_ids[c]) & (doc_ids[c + BUFFER] == doc_ids[c])
    return c[ok]


def _window(acts, tokens, doc_ids, latent, c, kind) -> WindowSample:
    sl = slice(c - BUFFER, c + BUFFER + 1)
    doc = int(doc_ids[c])
    start = c
    while start > 0 and doc_ids[start - 1] == doc:
        start -= 1
    return WindowSample(latent, doc, int(c - start), int(c),
                        None if tokens is None else np.asarray(tokens[sl]),
                        np.asarray(acts[sl], dtype=np.float64), kind)


def collect_windows(acts: np.ndarray, doc_ids: np.ndarray, special_mask: np.ndarray, latent: int,
                    seed: int, tokens: np.ndarray | None = None,
                    centers: np.ndarray | None = None) -> LatentEvalSet:
    """Sample Top / importance-weighted / random windows for one latent.

    ``acts`` holds the latent's activation at every row of the dataset.
    """
    acts = np.asarray(acts, dtype=np.float64)
    doc_ids = np.asarray(doc_ids)
    if centers is None:
        centers = valid_centers(doc_ids, np.asarray(special_mask, bool))
    rng = np.random.default_rng([seed, latent])
    a = acts[centers]
    order = centers[np.argsort(-a, kind="stable")]
    top = []
    for c in order:
        if acts[c] <= 0 or len(top) == N_TOP:
            break
        if all(abs(int(c) - t) >= WINDOW for t in top):
            top.append(int(c))
    if len(top) < N_TOP:
        raise InsufficientDataError(f"latent {latent}: only {len(top)} non-overlapping positive peaks")
    floor = acts[top[-1]]
    pool = centers[(a > 0) & (a < floor) & ~np.isin(centers, top)]
    if len(pool) < N_IW:
        raise InsufficientDataError(f"latent {latent}: {len(pool)} importance-weighted candidates")
    w = acts[pool]
    iw = [int(c) for c in rng.choice(pool, size=N_IW, replace=False, p=w / w.sum())]
    rest = centers[~np.isin(centers, top + iw)]
    if len(rest) < N_RANDOM:
        raise InsufficientDataError(f"latent {latent}: {len(rest)} random candidates")
    rnd = [int(c) for c in rng.choice(rest, size=N_RANDOM, replace=False)]

    mk = lambda c, kind: _window(acts, tokens, doc_ids, latent, c, kind)  # noqa: E731
    top_w = [mk(c, "top") for c in top]
    iw_w = [mk(c, "iw") for c in iw]
    rnd_w = [mk(c, "random") for c in rnd]
    v_max = float(max(w.activations.max() for w in top_w))
    tp = rng.permutation(N_TOP)
    ip = rng.permutation(N_IW)
    generation = [top_w[i] for i in tp[:GEN_TOP]] + [iw_w[i] for i in ip[:GEN_IW]]
    scoring = [top_w[i] for i in tp[GEN_TOP:]] + [iw_w[i] for i in ip[GEN_IW:]] + rnd_w
    scoring = [scoring[i] for i in rng.permutation(len(scoring))]
    return LatentEvalSet(latent, generation, scoring, TAU_FRACTION * v_max, v_max,
                         {"top": len(top_w), "iw": len(iw_w), "random": len(rnd_w)})


def ground_truth(window: WindowSample, tau_act: float) -> int:
    return int(np.max(window.activations) > tau_act)


def score_latent(evalset: LatentEvalSet, judge, decode: Callable | None = None) -> InterpScore:
    """Describe from the generation windows, predict the scoring windows, return accuracy."""
    decode = decode or (lambda ids: " ".join(str(int(i)) for i in ids))
    try:
        desc = judge.describe(evalset.generation, evalset.tau_act, decode)
        pred = judge.predict(desc, evalset.scoring, evalset.tau_act, decode)
    except JudgeError as exc:
        log.warning("latent %d: judge failed (%s)", evalset.latent, exc)
        return InterpScore(evalset.latent, 0.0, "", flagged=True)
    labels = [ground_truth(w, evalset.tau_act) for w in evalset.scoring]
    correct = sum(int(j in pred) == y for j, y in enumerate(labels))
    return InterpScore(evalset.latent, correct / len(labels), desc)


@dataclass
class InterpResult:
    mu: float
    scores: list[InterpScore]
    concepts: list[tuple[str, str]]  # (concept id, description)
    concept_latents: list[int]
    n_attempted: int


def interp_score_from_codes(H: np.ndarray, doc_ids, special_mask, judge, seed: int,
                            n_latents: int = 200, concept_size: int = 25, layer: int = 0,
                            tokens=None, decode: Callable | None = None) -> InterpResult:
    """Score up to ``n_latents`` latents (random order, skipping unscorable ones)
    and average accuracy over a seeded concept subset."""
    rng = np.random.default_rng(seed)
    centers = valid_centers(np.asarray(doc_ids), np.asarray(special_mask, bool))
    F = H.shape[1]
    scores = []
    attempted = 0
    for f in rng.permutation(F):
        if len(scores) == n_latents:
            break
        attempted += 1
        try:
            es = collect_windows(H[:, f], doc_ids, special_mask, int(f), seed, tokens, centers)
        except InsufficientDataError:
            continue
        s = score_latent(es, judge, decode)
        if not s.flagged:
            scores.append(s)
    if len(scores) < concept_size:
        raise InsufficientDataError(f"only {len(scores)} scorable latents, need {concept_size}")
    pick = np.sort(rng.choice(len(scores), size=concept_size, replace=False))
    chosen = [scores[i] for i in pick]
    mu = float(np.mean([s.accuracy for s in chosen]))
    concepts = [(f"{layer}_{s.latent}", s.description) for s in chosen]
    return InterpResult(mu, scores, concepts, [s.latent for s in chosen], attempted)


def sae_interp_score(params: SaeParams, dataset: ActivationDataset, judge, seed: int,
                     n_latents: int = 200, concept_size: int = 25,
                     decode: Callable | None = None, chunk: int = 8192) -> InterpResult:
    H = np.concatenate([encode(params, dataset.activations[i:i + chunk])
                        for i in range(0, len(dataset), chunk)])
    return interp_score_from_codes(H, dataset.doc_ids, dataset.special_mask, judge, seed,
                                   n_latents, concept_size, dataset.layer, dataset.tokens, decode)
