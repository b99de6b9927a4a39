import itertools
import math
from statistics import NormalDist

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from helpers import brute_tau_b, random_tie_pair
from saesteer.rankstats import (
    AxisSummary,
    DegenerateInputError,
    ScoreRecord,
    aggregate_psi,
    bca_bootstrap_ci,
    bca_from_samples,
    bootstrap_indices,
    bootstrap_tau,
    concordance,
    granulated_psi,
    kendall_tau_b,
    permutation_test,
    psi_from_taus,
    sparsity_slots,
)


def test_tau_matches_pair_counting_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        x, y = random_tie_pair(rng)
        assert abs(kendall_tau_b(x, y).tau_b - brute_tau_b(x, y)) <= 1e-12


def test_tau_examples():
    assert kendall_tau_b([1, 2, 3, 4], [1, 2, 3, 4]).tau_b == 1.0
    assert kendall_tau_b([1, 2, 3, 4], [4, 3, 2, 1]).tau_b == -1.0
    assert kendall_tau_b([1, 2, 3], [1, 3, 2]).tau_b == pytest.approx(1 / 3, abs=1e-15)
    assert kendall_tau_b([1, 1, 2], [1, 2, 3]).tau_b == pytest.approx(2 / math.sqrt(6), abs=1e-15)
    r = kendall_tau_b(np.arange(7), np.arange(7) ** 2)
    assert r.n == 7 and r.pairs == 21


def test_tau_degenerate():
    with pytest.raises(DegenerateInputError):
        kendall_tau_b([1, 1, 1], [1, 2, 3])
    with pytest.raises(DegenerateInputError):
        kendall_tau_b([1], [2])
    with pytest.raises(ValueError):
        kendall_tau_b([1, 2, 3], [1, 2])


distinct = st.lists(st.floats(-100, 100, allow_nan=False), min_size=3, max_size=12, unique=True)


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_tau_symmetry_and_sign(data):
    n = data.draw(st.integers(3, 12))
    x = data.draw(st.lists(st.integers(0, 4), min_size=n, max_size=n))
    y = data.draw(st.lists(st.integers(0, 4), min_size=n, max_size=n))
    assume(len(set(x)) > 1 and len(set(y)) > 1)
    t = kendall_tau_b(x, y).tau_b
    assert -1.0 <= t <= 1.0
    assert kendall_tau_b(y, x).tau_b == t
    assert kendall_tau_b(x, [-v for v in y]).tau_b == -t


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-20, 20), min_size=3, max_size=12), st.lists(st.integers(-20, 20), min_size=3, max_size=12))
def test_tau_monotone_invariance(x, y):
    n = min(len(x), len(y))
    x, y = np.array(x[:n], float), np.array(y[:n], float)
    assume(len(set(x)) > 1 and len(set(y)) > 1)
    t = kendall_tau_b(x, y).tau_b
    assert kendall_tau_b(np.exp(x / 10), y).tau_b == t
    assert kendall_tau_b(x, y ** 3 + 2 * y).tau_b == t


@settings(max_examples=100, deadline=None)
@given(distinct, st.randoms(use_true_random=False))
def test_no_ties_equals_mean_concordance(x, rnd):
    y = [rnd.uniform(-1, 1) for _ in x]
    assume(len(set(y)) == len(y))
    recs = [ScoreRecord(str(i), "a", "s0", "m", xi, yi) for i, (xi, yi) in enumerate(zip(x, y))]
    pairs = list(itertools.combinations(recs, 2))
    mean_v = sum(concordance(a, b) for a, b in pairs) / len(pairs)
    assert abs(kendall_tau_b(x, y).tau_b - mean_v) <= 1e-12


def test_concordance_examples():
    def rec(mu, g):
        return ScoreRecord("x", "a", "s0", "m", mu, g)

    assert concordance(rec(2, 2), rec(1, 1)) == 1
    assert concordance(rec(1, 2), rec(1, 1)) == 0
    assert concordance(rec(2, 1), rec(1, 2)) == -1
    with pytest.raises(KeyError):
        concordance(rec(1, 1), rec(2, 2), y_field="gain")
    with pytest.raises(KeyError):
        concordance(rec(1, 1), rec(2, 2), x_field="nope")


def test_permutation_perfect_agreement():
    for n in (6, 10):
        x = np.arange(n, dtype=float)
        p, (lo, hi) = permutation_test(x, x, n_perm=10_000, seed=1)
        assert p <= 0.01
        assert lo < 0 < hi


def test_permutation_errors():
    with pytest.raises(ValueError):
        permutation_test([1, 2, 3], [3, 1, 2], n_perm=0)
    with pytest.raises(ValueError):
        permutation_test([1, 2], [2, 1])


def test_permutation_reproducible():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=12), rng.normal(size=12)
    assert permutation_test(x, y, 2000, seed=9) == permutation_test(x, y, 2000, seed=9)


def test_permutation_null_coverage():
    rng = np.random.default_rng(11)
    inside = 0
    for trial in range(100):
        x, y = rng.normal(size=15), rng.normal(size=15)
        t = kendall_tau_b(x, y).tau_b
        _, (lo, hi) = permutation_test(x, y, n_perm=2000, seed=trial)
        inside += lo <= t <= hi
    assert inside >= 93


def test_bca_perfect_agreement():
    x = np.arange(12, dtype=float)
    assert bca_bootstrap_ci(x, x, n_boot=2000, seed=0) == (1.0, 1.0)


def test_bca_reduces_to_percentile():
    rng = np.random.default_rng(2)
    boot = rng.normal(size=5000)
    observed = float(np.median(boot))  # exactly half below: z0 = 0
    jack = np.zeros(10)  # flat jackknife: zero acceleration
    got = bca_from_samples(boot, observed, jack)
    assert got == pytest.approx(tuple(np.quantile(boot, [0.025, 0.975])), abs=1e-12)


def reference_bca(x, y, idx, level=0.95):
    """Loop-based BCa written from the textbook definition."""
    nd = NormalDist()
    obs = brute_tau_b(x, y)
    reps = []
    for row in idx:
        xs, ys = x[row], y[row]
        if len(set(xs)) < 2 or len(set(ys)) < 2:
            continue
        reps.append(brute_tau_b(xs, ys))
    reps.sort()
    B = len(reps)
    z0 = nd.inv_cdf(sum(r < obs for r in reps) / B)
    jack = [brute_tau_b(np.delete(x, i), np.delete(y, i)) for i in range(len(x))]
    m = sum(jack) / len(jack)
    num = sum((m - j) ** 3 for j in jack)
    den = 6 * sum((m - j) ** 2 for j in jack) ** 1.5
    a = num / den

    def pct(q):
        z = nd.inv_cdf(q)
        return nd.cdf(z0 + (z0 + z) / (1 - a * (z0 + z)))

    def quantile(q):
        pos = q * (B - 1)
        lo = int(math.floor(pos))
        hi = min(lo + 1, B - 1)
        return reps[lo] + (pos - lo) * (reps[hi] - reps[lo])

    return quantile(pct((1 - level) / 2)), quantile(pct((1 + level) / 2))


def test_bca_matches_reference():
    rng = np.random.default_rng(21)
    x = rng.normal(size=30)
    y = 0.6 * x + rng.normal(size=30)
    got = bca_bootstrap_ci(x, y, n_boot=2000, seed=5)
    want = reference_bca(x, y, bootstrap_indices(30, 2000, 5))
    assert got == pytest.approx(want, abs=1e-12)
    assert got[0] < kendall_tau_b(x, y).tau_b < got[1]


def test_bca_errors():
    x = np.arange(7, dtype=float)
    with pytest.raises(ValueError):
        bca_bootstrap_ci(x, x)
    with pytest.raises(ValueError):
        bca_bootstrap_ci(np.arange(10.0), np.arange(10.0), n_boot=10)
    # two distinct x values among 10: most resamples keep both, but enough collapse to trip the limit
    xs = np.array([0.0] * 9 + [1.0])
    with pytest.raises(DegenerateInputError):
        bca_bootstrap_ci(xs, np.arange(10.0), n_boot=2000, seed=0)


def test_bootstrap_tau_nan_for_degenerate():
    x = np.arange(4.0)
    out = bootstrap_tau(x, x, np.array([[0, 0, 0, 0], [0, 1, 2, 3]]))
    assert np.isnan(out[0]) and out[1] == 1.0


def test_psi_examples():
    assert psi_from_taus([0.42]) == (0.42, None)
    assert psi_from_taus([1.0, -1.0])[0] == 0.0
    psi, se = psi_from_taus([0.3203, -0.2026, 0.4248, 0.3595, 0.3856])
    assert abs(psi - 0.2575) <= 5e-4
    assert se > 0
    with pytest.raises(ValueError):
        psi_from_taus([])


def test_psi_jackknife_se_matches_standard_error_of_mean():
    t = np.array([0.1, 0.5, -0.2, 0.3])
    _, se = psi_from_taus(t)
    # for the mean, the jackknife SE reduces to s / sqrt(G)
    assert se == pytest.approx(t.std(ddof=1) / math.sqrt(len(t)), rel=1e-12)


def test_aggregate_examples():
    assert abs(aggregate_psi([0.2575, 0.1651, 0.3272]) - 0.2499) <= 5e-4
    assert abs(aggregate_psi([-0.0719, 0.0127, -0.1111]) - (-0.0568)) <= 5e-4
    assert aggregate_psi([0.3, 0.3, 0.3]) == pytest.approx(0.3, abs=1e-15)
    summary = AxisSummary("A", [], 0.2, None, None)
    assert aggregate_psi([summary, 0.4]) == pytest.approx(0.3, abs=1e-15)
    with pytest.raises(ValueError):
        aggregate_psi([])


def _records(groups):
    out = []
    for label, pairs in groups.items():
        for i, (mu, g) in enumerate(pairs):
            out.append(ScoreRecord(f"{label}{i}", label, f"s{i}", "m0", mu, g))
    return out


def test_granulated_psi_two_groups():
    recs = _records({"TopK": [(1, 1), (2, 2), (3, 3)], "ReLU": [(1, 3), (2, 2), (3, 1)]})
    s = granulated_psi(recs, "A", n_perm=200, n_boot=200)
    assert s.psi == 0.0
    assert [lbl for lbl, _ in s.groups] == ["ReLU", "TopK"]
    assert all(r.ci_method == "permutation_null" for _, r in s.groups)
    assert s.groups[1][1].ids == ("TopK0", "TopK1", "TopK2")


def test_granulated_psi_one_group():
    recs = _records({"TopK": [(1, 1), (2, 3), (3, 2), (4, 4)]})
    s = granulated_psi(recs, "A", n_perm=None)
    assert s.psi == kendall_tau_b([1, 2, 3, 4], [1, 3, 2, 4]).tau_b
    assert s.se is None and s.boot_ci is None


def test_granulated_psi_skips_degenerate_group():
    recs = _records({"TopK": [(1, 1), (2, 2), (3, 3)], "Flat": [(1, 5), (2, 5), (3, 5)]})
    s = granulated_psi(recs, "A", n_perm=None)
    assert s.skipped == ["Flat"]
    assert s.psi == 1.0
    with pytest.raises(DegenerateInputError):
        granulated_psi(_records({"Flat": [(1, 5), (2, 5)]}), "A", n_perm=None)


def test_granulated_psi_group_order_invariant():
    rng = np.random.default_rng(4)
    groups = {k: [tuple(v) for v in rng.normal(size=(5, 2))] for k in ("a", "b", "c")}
    recs = _records(groups)
    a = granulated_psi(recs, "A", n_perm=None, n_boot=500)
    b = granulated_psi(recs[::-1], "A", n_perm=None, n_boot=500)
    assert a.psi == b.psi
    assert a.boot_ci == b.boot_ci


def test_granulated_psi_unknown_axis():
    with pytest.raises(ValueError):
        granulated_psi(_records({"a": [(1, 1), (2, 2)]}), "D")


def test_sparsity_slots():
    fams = [("m", "TopK")] * 3 + [("m", "ReLU")] * 2
    assert sparsity_slots([64, 16, 32, 3.0, 1.0], fams) == ["s2", "s0", "s1", "s1", "s0"]
    assert sparsity_slots([5, 5], [("m", "a")] * 2) == ["s0", "s0"]
    with pytest.raises(ValueError):
        sparsity_slots([1.0], [])
