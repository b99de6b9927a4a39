"""Concordance, tie-corrected Kendall tau-b, axis-conditioned averages and resampling intervals."""

from __future__ import annotations

import logging
from collections import defaultdict
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

log = logging.getLogger(__name__)

AXES = {"A": "architecture", "B": "sparsity_slot", "C": "model"}
N_PERM = 10_000
N_BOOT = 10_000
LEVEL = 0.95
MAX_SKIP_FRACTION = 0.1


class DegenerateInputError(ValueError):
    """Raised when tau-b is undefined (fewer than two points or a constant variable)."""


@dataclass(frozen=True)
class ScoreRecord:
    sae_id: str
    architecture: str
    sparsity_slot: str
    model: str
    mu: float
    g: float
    gain: float | None = None

    def axis_label(self, axis: str) -> str:
        return getattr(self, AXES[axis])


@dataclass
class TauResult:
    tau_b: float
    n: int
    pairs: int
    p_value: float | None = None
    ci: tuple[float, float] | None = None
    ci_method: str | None = None  # "bca_bootstrap" or "permutation_null"
    ids: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return {"tau_b": self.tau_b, "n": self.n, "pairs": self.pairs, "p_value": self.p_value,
                "ci": list(self.ci) if self.ci else None, "ci_method": self.ci_method,
                "ids": list(self.ids)}


@dataclass
class AxisSummary:
    axis: str
    groups: list[tuple[str, TauResult]]
    psi: float
    se: float | None
    boot_ci: tuple[float, float] | None
    skipped: list[str] = field(default_factory=list)


def concordance(a: ScoreRecord, b: ScoreRecord, x_field: str = "mu", y_field: str = "g") -> int:
    """sign(x_a - x_b) * sign(y_a - y_b)."""
    try:
        xa, xb, ya, yb = (getattr(r, f) for r, f in ((a, x_field), (b, x_field), (a, y_field), (b, y_field)))
    except AttributeError as exc:
        raise KeyError(str(exc)) from exc
    if None in (xa, xb, ya, yb):
        raise KeyError(f"field {x_field!r} or {y_field!r} missing")
    return int(np.sign(xa - xb) * np.sign(ya - yb))


def _pair_signs(v: np.ndarray) -> np.ndarray:
    """sign(v_i - v_j) over i < j along the last axis."""
    i, j = np.triu_indices(v.shape[-1], 1)
    return np.sign(v[..., i] - v[..., j])


def _tau_from_signs(sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    s = (sx * sy).sum(-1)
    nx = (sx != 0).sum(-1)
    ny = (sy != 0).sum(-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return s / np.sqrt(nx * ny)


def kendall_tau_b(x: Sequence[float], y: Sequence[float]) -> TauResult:
    """Tie-corrected Kendall rank correlation (P - Q) / sqrt((n0 - n1)(n0 - n2))."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D arrays of equal length")
    n = len(x)
    if n < 2:
        raise DegenerateInputError("need at least two points")
    sx, sy = _pair_signs(x), _pair_signs(y)
    if not sx.any() or not sy.any():
        raise DegenerateInputError("a variable is constant; tau-b is undefined")
    tau = float(np.clip(_tau_from_signs(sx, sy), -1.0, 1.0))
    return TauResult(tau, n, n * (n - 1) // 2)


def permutation_test(x, y, n_perm: int = N_PERM, seed: int = 0,
                     level: float = LEVEL, chunk: int = 1000) -> tuple[float, tuple[float, float]]:
    """Two-sided permutation p-value and the central null interval of tau-b."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 3:
        raise ValueError("permutation test needs at least 3 points")
    if n_perm < 1:
        raise ValueError("n_perm must be positive")
    obs = kendall_tau_b(x, y).tau_b
    sx = _pair_signs(x)
    rng = np.random.default_rng(seed)
    null = np.empty(n_perm)
    for s in range(0, n_perm, chunk):
        m = min(chunk, n_perm - s)
        perms = rng.permuted(np.tile(y, (m, 1)), axis=1)
        null[s:s + m] = _tau_from_signs(sx, _pair_signs(perms))
    # Small tolerance so that ties with the observed value count as extreme.
    extreme = np.sum(np.abs(null) >= abs(obs) - 1e-12)
    p = (1.0 + extreme) / (n_perm + 1.0)
    a = (1 - level) / 2
    lo, hi = np.quantile(null, [a, 1 - a])
    return float(p), (float(lo), float(hi))


def bootstrap_indices(n: int, n_boot: int, seed: int) -> np.ndarray:
    """Resample stream: row b holds the record indices of replicate b."""
    return np.random.default_rng(seed).integers(0, n, size=(n_boot, n))


def jackknife_values(stat: Callable[[np.ndarray], float], n: int) -> np.ndarray:
    keep = ~np.eye(n, dtype=bool)
    return np.array([stat(np.flatnonzero(keep[i])) for i in range(n)])


def bca_from_samples(boot: np.ndarray, observed: float, jack: np.ndarray,
                     level: float = LEVEL) -> tuple[float, float]:
    """BCa percentile interval from bootstrap replicates and jackknife values."""
    boot = np.asarray(boot, dtype=np.float64)
    B = len(boot)
    if np.all(boot == boot[0]):
        return float(boot[0]), float(boot[0])
    frac = np.mean(boot < observed)
    frac = np.clip(frac, 1.0 / (2 * B), 1.0 - 1.0 / (2 * B))
    z0 = norm.ppf(frac)
    d = jack.mean() - jack
    den = 6.0 * (d ** 2).sum() ** 1.5
    acc = float((d ** 3).sum() / den) if den > 0 else 0.0
    za = norm.ppf([(1 - level) / 2, (1 + level) / 2])
    adj = norm.cdf(z0 + (z0 + za) / (1 - acc * (z0 + za)))
    lo, hi = np.quantile(boot, adj)
    return float(lo), float(hi)


def bootstrap_tau(x: np.ndarray, y: np.ndarray, idx: np.ndarray, chunk: int = 500) -> np.ndarray:
    """tau-b on each resample (NaN where undefined)."""
    out = np.empty(len(idx))
    for s in range(0, len(idx), chunk):
        ii = idx[s:s + chunk]
        out[s:s + len(ii)] = _tau_from_signs(_pair_signs(x[ii]), _pair_signs(y[ii]))
    return out


def bca_bootstrap_ci(x, y, n_boot: int = N_BOOT, seed: int = 0,
                     level: float = LEVEL) -> tuple[float, float]:
    """Bias-corrected and accelerated bootstrap interval for tau-b over record pairs."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    if n < 8:
        raise ValueError("BCa interval needs at least 8 records")
    if n_boot < 1000:
        raise ValueError("n_boot must be at least 1000")
    observed = kendall_tau_b(x, y).tau_b
    boot = bootstrap_tau(x, y, bootstrap_indices(n, n_boot, seed))
    bad = np.isnan(boot)
    if bad.any():
        log.info("skipped %d degenerate bootstrap resamples", int(bad.sum()))
    if bad.mean() > MAX_SKIP_FRACTION:
        raise DegenerateInputError(f"{int(bad.sum())} of {n_boot} resamples were degenerate")
    jack = jackknife_values(lambda ii: kendall_tau_b(x[ii], y[ii]).tau_b, n)
    return bca_from_samples(boot[~bad], observed, jack, level)


def psi_from_taus(taus: Sequence[float]) -> tuple[float, float | None]:
    """Mean of group tau-b values and its jackknife standard error."""
    t = np.asarray(taus, dtype=np.float64)
    if len(t) == 0:
        raise ValueError("no groups")
    psi = float(t.mean())
    G = len(t)
    if G < 2:
        return psi, None
    loo = (t.sum() - t) / (G - 1)
    se = float(np.sqrt((G - 1) / G * ((loo - loo.mean()) ** 2).sum()))
    return psi, se


def aggregate_psi(values: Sequence[float] | Sequence[AxisSummary]) -> float:
    """Unweighted mean of per-axis psi values."""
    vals = [v.psi if isinstance(v, AxisSummary) else float(v) for v in values]
    if not vals:
        raise ValueError("no axes")
    return float(np.mean(vals))


def _group(records: Sequence[ScoreRecord], axis: str) -> dict[str, list[ScoreRecord]]:
    if axis not in AXES:
        raise ValueError(f"unknown axis {axis!r}")
    groups: dict[str, list[ScoreRecord]] = defaultdict(list)
    for r in records:
        groups[r.axis_label(axis)].append(r)
    return dict(sorted(groups.items()))


def group_tau(records: Sequence[ScoreRecord], x_field: str = "mu", y_field: str = "g",
              n_perm: int | None = N_PERM, seed: int = 0) -> TauResult:
    x = [getattr(r, x_field) for r in records]
    y = [getattr(r, y_field) for r in records]
    res = kendall_tau_b(x, y)
    res.ids = tuple(r.sae_id for r in records)
    if n_perm and len(records) >= 3:
        res.p_value, res.ci = permutation_test(x, y, n_perm, seed)
        res.ci_method = "permutation_null"
    return res


def granulated_psi(records: Sequence[ScoreRecord], axis: str, x_field: str = "mu",
                   y_field: str = "g", n_perm: int | None = N_PERM, n_boot: int = N_BOOT,
                   seed: int = 0, level: float = LEVEL) -> AxisSummary:
    """Group records by one design axis, compute tau-b per group and average.

    Groups where tau-b is undefined are skipped and listed in ``skipped``.
    """
    groups, skipped = [], []
    for label, members in _group(records, axis).items():
        try:
            groups.append((label, group_tau(members, x_field, y_field, n_perm, seed)))
        except DegenerateInputError as exc:
            log.warning("axis %s group %s skipped: %s", axis, label, exc)
            skipped.append(label)
    if not groups:
        raise DegenerateInputError(f"axis {axis}: no group with a defined tau-b")
    taus = np.array([g.tau_b for _, g in groups])
    psi, se = psi_from_taus(taus)
    ci = None
    if len(taus) >= 2:
        rng = np.random.default_rng(seed)
        means = taus[rng.integers(0, len(taus), size=(n_boot, len(taus)))].mean(1)
        a = (1 - level) / 2
        lo, hi = np.quantile(means, [a, 1 - a])
        ci = (float(lo), float(hi))
    return AxisSummary(axis, groups, psi, se, ci, skipped)


def overall_tau(records: Sequence[ScoreRecord], x_field: str = "mu", y_field: str = "g",
                n_perm: int = N_PERM, n_boot: int = N_BOOT, seed: int = 0,
                level: float = LEVEL) -> TauResult:
    """Pooled tau-b with a permutation p-value and a BCa interval."""
    x = np.array([getattr(r, x_field) for r in records], dtype=np.float64)
    y = np.array([getattr(r, y_field) for r in records], dtype=np.float64)
    res = kendall_tau_b(x, y)
    res.ids = tuple(r.sae_id for r in records)
    if len(x) >= 3:
        res.p_value, _ = permutation_test(x, y, n_perm, seed)
    if len(x) >= 8:
        try:
            res.ci = bca_bootstrap_ci(x, y, n_boot, seed, level)
            res.ci_method = "bca_bootstrap"
        except DegenerateInputError as exc:
            log.warning("overall BCa interval unavailable: %s", exc)
    return res


def sparsity_slots(sparsity: Sequence[float], families: Sequence[tuple]) -> list[str]:
    """Rank-based slot of each SAE within its family sweep.

    ``sparsity`` is a sparsity level per SAE where larger means sparser;
    ``families`` groups SAEs (e.g. by (model, architecture)).  Slot 0 is the
    densest member of each family; ties share the lower slot.
    """
    if len(sparsity) != len(families):
        raise ValueError("sparsity and families must have equal length")
    slots = [""] * len(sparsity)
    byfam: dict[tuple, list[int]] = defaultdict(list)
    for i, fam in enumerate(families):
        byfam[fam].append(i)
    for members in byfam.values():
        levels = sorted({sparsity[i] for i in members})
        for i in members:
            slots[i] = f"s{levels.index(sparsity[i])}"
    return slots
