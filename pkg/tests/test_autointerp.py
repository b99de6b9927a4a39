import numpy as np
import pytest

from helpers import layout, sparse_codes
from saesteer.autointerp import (
    GEN_IW,
    GEN_TOP,
    InsufficientDataError,
    LatentEvalSet,
    WindowSample,
    collect_windows,
    ground_truth,
    interp_score_from_codes,
    sae_interp_score,
    score_latent,
    valid_centers,
)
from saesteer.judge import HeuristicInterpJudge, OracleInterpJudge
from saesteer.sae import SaeConfig, init_params

class NoneJudge:
    def describe(self, windows, tau_act, decode):
        return "nothing"

    def predict(self, description, windows, tau_act, decode):
        return set()


def test_window_counts_and_split():
    n = 6000
    H = sparse_codes(n, 1, seed=0)
    doc_ids, special = layout(n)
    es = collect_windows(H[:, 0], doc_ids, special, 0, seed=1)
    assert es.counts == {"top": 12, "iw": 7, "random": 10}
    assert len(es.generation) == 15 and len(es.scoring) == 14
    kinds_gen = [w.kind for w in es.generation]
    kinds_score = [w.kind for w in es.scoring]
    assert kinds_gen.count("top") == GEN_TOP and kinds_gen.count("iw") == GEN_IW
    assert kinds_score.count("top") == 2 and kinds_score.count("iw") == 2
    assert kinds_score.count("random") == 10
    centers = [w.center for w in es.generation + es.scoring]
    assert len(set(centers)) == len(centers)
    tops = sorted(w.center for w in es.generation + es.scoring if w.kind == "top")
    assert all(b - a >= 21 for a, b in zip(tops, tops[1:]))


def test_windows_stay_inside_documents():
    n = 6000
    H = sparse_codes(n, 1, seed=0)
    doc_ids, special = layout(n)
    es = collect_windows(H[:, 0], doc_ids, special, 0, seed=1)
    for w in es.generation + es.scoring:
        assert len(w.activations) == 21
        assert np.all(doc_ids[w.center - 10:w.center + 11] == w.sequence)
        assert not special[w.center]


def test_tau_act():
    n = 6000
    H = sparse_codes(n, 1, seed=0)
    doc_ids, special = layout(n)
    H[valid_centers(doc_ids, special)[500], 0] = 10.0
    es = collect_windows(H[:, 0], doc_ids, special, 0, seed=1)
    assert es.v_max == 10.0
    assert es.tau_act == pytest.approx(0.1, abs=1e-15)


def _w(acts, j=0):
    a = np.asarray(acts, dtype=float)
    return WindowSample(0, j, 10, 10, np.zeros(len(a), int), a, "random")


def test_ground_truth_rules():
    assert ground_truth(_w(np.zeros(21)), 0.1) == 0
    hot = np.zeros(21)
    hot[4] = 10.0
    assert ground_truth(_w(hot), 0.1) == 1
    edge = np.zeros(21)
    edge[7] = 0.1
    assert ground_truth(_w(edge), 0.1) == 0


def test_oracle_and_inverted_judges():
    n = 6000
    H = sparse_codes(n, 1, seed=0)
    doc_ids, special = layout(n)
    es = collect_windows(H[:, 0], doc_ids, special, 0, seed=1)
    assert score_latent(es, OracleInterpJudge()).accuracy == 1.0
    assert score_latent(es, OracleInterpJudge(invert=True)).accuracy == 0.0


def test_none_answer_counts_agreement():
    scoring = []
    for j in range(14):
        a = np.zeros(21)
        if j in (1, 5, 9, 13):
            a[10] = 2.0
        scoring.append(_w(a, j))
    es = LatentEvalSet(0, [_w(np.ones(21))], scoring, tau_act=0.02, v_max=2.0)
    assert score_latent(es, NoneJudge()).accuracy == pytest.approx(10 / 14, abs=1e-15)


def test_never_active_latent():
    n = 3000
    doc_ids, special = layout(n)
    with pytest.raises(InsufficientDataError):
        collect_windows(np.zeros(n), doc_ids, special, 0, seed=0)


def test_window_sampling_deterministic():
    n = 6000
    H = sparse_codes(n, 1, seed=0)
    doc_ids, special = layout(n)
    a = collect_windows(H[:, 0], doc_ids, special, 0, seed=5)
    b = collect_windows(H[:, 0], doc_ids, special, 0, seed=5)
    assert [w.center for w in a.generation] == [w.center for w in b.generation]
    assert [w.center for w in a.scoring] == [w.center for w in b.scoring]


def test_valid_centers_excludes_boundaries():
    doc_ids, special = layout(300)
    c = valid_centers(doc_ids, special)
    for x in c:
        assert doc_ids[x - 10] == doc_ids[x + 10] == doc_ids[x]
    assert 0 not in c and 100 not in c and 95 not in c


@pytest.fixture(scope="module")
def codes200():
    n = 20_000
    return sparse_codes(n, 220, seed=2), *layout(n)


def test_mu_oracle_is_one(codes200):
    H, doc_ids, special = codes200
    res = interp_score_from_codes(H, doc_ids, special, OracleInterpJudge(), seed=0,
                                  n_latents=50, concept_size=25)
    assert res.mu == 1.0
    assert len(res.concepts) == 25


def test_mu_corrupted_oracle(codes200):
    H, doc_ids, special = codes200
    res = interp_score_from_codes(H, doc_ids, special, OracleInterpJudge(rho=0.2, seed=1), seed=0,
                                  n_latents=200, concept_size=200)
    assert len(res.scores) == 200
    assert abs(res.mu - 0.8) <= 0.03


def test_mu_deterministic(codes200):
    H, doc_ids, special = codes200
    runs = [interp_score_from_codes(H, doc_ids, special, OracleInterpJudge(rho=0.3), seed=4,
                                    n_latents=40, concept_size=10) for _ in range(2)]
    assert runs[0].concept_latents == runs[1].concept_latents
    assert runs[0].mu == runs[1].mu


def test_concept_subset_mean():
    class HalfJudge(OracleInterpJudge):
        """Perfect on even latents, inverted on odd ones."""

        def predict(self, description, windows, tau_act, decode):
            self.invert = windows[0].latent % 2 == 1
            return super().predict(description, windows, tau_act, decode)

    n = 20_000
    H = sparse_codes(n, 40, seed=3)
    doc_ids, special = layout(n)
    res = interp_score_from_codes(H, doc_ids, special, HalfJudge(), seed=0, n_latents=40,
                                  concept_size=40)
    acc = {s.latent: s.accuracy for s in res.scores}
    assert all(acc[f] == (1.0 if f % 2 == 0 else 0.0) for f in acc)
    assert len(acc) == 40
    assert res.mu == 0.5


def test_heuristic_judge_on_toy_sae(small_corpus):
    p = init_params(SaeConfig("ReLU", 64, 64, lam=0.1, seed=0))
    p.b_enc[:] = -0.5
    res = sae_interp_score(p, small_corpus, HeuristicInterpJudge(), seed=0, n_latents=12,
                           concept_size=4, decode=lambda ids: " ".join(str(int(i)) for i in ids))
    assert 0.0 <= res.mu <= 1.0
    assert all(cid.startswith(f"{small_corpus.layer}_") for cid, _ in res.concepts)
