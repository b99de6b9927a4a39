"""Pipeline stages.  Each stage reads its inputs from the run directory and the
result store, writes its outputs, and records a hash of everything it depended
on so that a rerun with the same configuration is a no-op."""

from __future__ import annotations

import fnmatch
import hashlib
import json
import logging
from collections.abc import Callable
from pathlib import Path

import numpy as np

from .autointerp import InsufficientDataError, sae_interp_score
from .confidence import DeltaConfidenceSelector, RandomSelector, default_tiers, select_best_tier
from .config import ConfigError, ExperimentConfig, SaeRun
from .corpus import default_vocab, make_instructions
from .io import ActivationDataset, ResultStore, load_dataset, save_dataset
from .judge import (ExternalJudge, HeuristicInterpJudge, HttpJudgeClient, OracleInterpJudge,
                    SyntheticJudge)
from .rankstats import AXES, DegenerateInputError, ScoreRecord, granulated_psi, overall_tau
from .rankstats import aggregate_psi, sparsity_slots
from .sae import feature_max_activations, load_sae, save_sae
from .steering import (GenerationSettings, evaluate_concept, make_task, sae_steering_score,
                       steering_gain, UndefinedGainError)
from .toylm import ToyLM, build_corpus, init_lm, load_lm, save_lm
from .train import train

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train-sae", "eval-interp", "eval-steering", "select-features",
          "rank-analysis", "report")
ANALYSIS_ID = "all"


class MissingDependencyError(RuntimeError):
    pass


def _hash(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n")


class Pipeline:
    def __init__(self, config: ExperimentConfig, force: bool = False, runs_filter: str | None = None):
        self.cfg = config
        self.out = Path(config.output)
        self.force = force
        self.runs = [r for r in config.runs if runs_filter is None or fnmatch.fnmatch(r.run_id, runs_filter)]
        if not self.runs:
            raise ConfigError(f"no run matches {runs_filter!r}")
        self.out.mkdir(parents=True, exist_ok=True)
        self.store = ResultStore(self.out / "results.jsonl")
        self.vocab = default_vocab()

    # ------------------------------------------------------------ bookkeeping
    def _record(self, kind: str, run_id: str) -> dict:
        try:
            return self.store.get(kind, run_id)
        except KeyError:
            raise MissingDependencyError(f"{kind} output for {run_id} is missing; run that stage first") from None

    def _fresh(self, kind: str, run_id: str, h: str) -> bool:
        try:
            rec = self.store.get(kind, run_id)
        except KeyError:
            return False
        if rec.get("hash") == h and not self.force:
            log.info("%s %s: up to date", kind, run_id)
            return True
        self.store.discard(kind, run_id)
        return False

    def _save(self, kind: str, run_id: str, h: str, **fields) -> None:
        self.store.append({"kind": kind, "run_id": run_id, "hash": h, **fields})

    def _data_dir(self, model: str) -> Path:
        return self.out / "data" / model

    def _lm(self, run: SaeRun) -> ToyLM:
        if self.cfg.lm.activations:
            raise ConfigError("steering and selection need the toy LM, not an external activation dump")
        self._record("dataset", run.model)
        return load_lm(self._data_dir(run.model) / "lm.saet")

    def _dataset(self, run: SaeRun) -> ActivationDataset:
        self._record("dataset", run.model)
        return load_dataset(self._data_dir(run.model) / "acts.saet")

    def _models(self) -> dict[str, int]:
        return {r.model: r.model_seed for r in self.runs}

    # ------------------------------------------------------------ stages
    def gen_data(self) -> None:
        for model, seed in self._models().items():
            h = _hash(self.cfg.lm, self.cfg.seeds["data"], seed)
            if self._fresh("dataset", model, h):
                continue
            d = self._data_dir(model)
            d.mkdir(parents=True, exist_ok=True)
            if self.cfg.lm.activations:
                ds = load_dataset(self.cfg.lm.activations)
            else:
                lm = init_lm(self.cfg.lm.lm_config(seed))
                save_lm(d / "lm.saet", lm)
                ds = build_corpus(lm.config, self.cfg.lm.n_tokens, self.cfg.seeds["data"], lm)
            save_dataset(d / "acts.saet", ds)
            self._save("dataset", model, h, rows=len(ds), d=ds.d, layer=ds.layer, model_id=ds.model_id)
            log.info("gen-data %s: %d rows", model, len(ds))

    def train_sae(self) -> None:
        for run in self.runs:
            up = self._record("dataset", run.model)["hash"]
            h = _hash(up, self.cfg.train, run.sae)
            if self._fresh("sae", run.run_id, h):
                continue
            ds = self._dataset(run)
            params, metrics = train(ds, run.sae, self.cfg.train)
            path = self.out / "saes" / f"{run.run_id}.saet"
            path.parent.mkdir(parents=True, exist_ok=True)
            save_sae(path, params)
            m = metrics.as_dict()
            self._save("sae", run.run_id, h, architecture=run.sae.architecture, model=run.model,
                       sparsity=run.sae.sparsity, F=run.sae.F, path=str(path.relative_to(self.out)), **m)
            log.info("train-sae %s: final L0 %.2f", run.run_id, m["final_l0"])

    def _interp_judge(self, seed: int):
        j = self.cfg.interp.judge
        if j == "heuristic":
            return HeuristicInterpJudge()
        if j == "oracle":
            return OracleInterpJudge(self.cfg.interp.oracle_rho, seed)
        return self._external()

    def _external(self) -> ExternalJudge:
        e = self.cfg.judge
        client = HttpJudgeClient(e.endpoint, e.model, e.token_env, retries=e.retries,
                                 max_in_flight=e.max_in_flight, audit_path=self.out / "judge_audit.jsonl")
        return ExternalJudge(client)

    def _params(self, run: SaeRun):
        rec = self._record("sae", run.run_id)
        return load_sae(self.out / rec["path"])

    def eval_interp(self) -> None:
        seed = self.cfg.seeds["interp"]
        judge = None
        for run in self.runs:
            up = self._record("sae", run.run_id)["hash"]
            h = _hash(up, self.cfg.interp, seed, self.cfg.judge if self.cfg.interp.judge == "external" else None)
            if self._fresh("interp", run.run_id, h):
                continue
            judge = judge or self._interp_judge(seed)
            ds = self._dataset(run)
            try:
                res = sae_interp_score(self._params(run), ds, judge, seed, self.cfg.interp.n_latents,
                                       self.cfg.interp.concept_size, decode=self.vocab.decode)
            except InsufficientDataError as exc:
                raise RuntimeError(f"{run.run_id}: {exc}") from exc
            concepts = [[int(lat), desc] for lat, (_, desc) in zip(res.concept_latents, res.concepts)]
            self._save("interp", run.run_id, h, mu=res.mu, n_scored=len(res.scores),
                       n_attempted=res.n_attempted, layer=ds.layer, concepts=concepts,
                       accuracies={str(s.latent): s.accuracy for s in res.scores})
            log.info("eval-interp %s: mu %.3f", run.run_id, res.mu)

    def _steer_judge(self):
        return SyntheticJudge(self.cfg.seeds["steer"]) if self.cfg.steer.judge == "synthetic" else self._external()

    def eval_steering(self) -> None:
        st = self.cfg.steer
        seed = self.cfg.seeds["steer"]
        judge = None
        pool = make_instructions(st.pool_size, np.random.default_rng([seed, 7]))
        settings = GenerationSettings(st.max_tokens, st.temperature, seed)
        for run in self.runs:
            interp = self._record("interp", run.run_id)
            h = _hash(interp["hash"], st, seed, self.cfg.judge if st.judge == "external" else None)
            if self._fresh("steering", run.run_id, h):
                continue
            judge = judge or self._steer_judge()
            lm, ds, params = self._lm(run), self._dataset(run), self._params(run)
            scales = feature_max_activations(params, ds)
            layer = interp["layer"]
            per_concept, detail = {}, {}
            for latent, desc in interp["concepts"]:
                pick = np.random.default_rng([seed, latent]).choice(len(pool), st.n_instructions, replace=False)
                task = make_task(layer, latent, desc, [pool[i] for i in pick], seed)
                out = evaluate_concept(task, params, float(scales[latent]), layer, lm, judge,
                                       st.grid, settings, st.mode, self.vocab)
                per_concept[str(latent)] = {"dev_means": {f"{a:g}": v for a, v in out.dev_means.items()},
                                            "best_factor": out.best_factor, "best_dev": out.best_dev,
                                            "heldout": out.heldout_mean, "flagged": out.flagged}
                detail[str(latent)] = [
                    {"split": r.split, "instruction": task.instructions[r.instruction], "factor": r.factor,
                     "text": r.text, "score": r.score, "flagged": r.flagged,
                     "rating": None if r.rating is None else [r.rating.concept, r.rating.instruction,
                                                              r.rating.fluency]}
                    for r in out.records]
            g = sae_steering_score([c["heldout"] for c in per_concept.values()])
            _write_json(self.out / "steer" / f"{run.run_id}.json", detail)
            self._save("steering", run.run_id, h, g=g, concepts=per_concept,
                       n_flagged=sum(c["flagged"] for c in per_concept.values()))
            log.info("eval-steering %s: g %.3f", run.run_id, g)

    def select_features(self) -> None:
        sc = self.cfg.select
        seed = self.cfg.seeds["select"]
        for run in self.runs:
            steer = self._record("steering", run.run_id)
            h = _hash(steer["hash"], sc, seed)
            if self._fresh("selection", run.run_id, h):
                continue
            lm, params = self._lm(run), self._params(run)
            concepts = steer["concepts"]
            pool = sorted(int(f) for f in concepts)
            layer = self._record("interp", run.run_id)["layer"]
            selector = DeltaConfidenceSelector(sc.alpha, sc.k, sc.prefix, sc.mode, layer)
            every = selector.records(lm, params, range(params.F))
            in_pool = [r for r in every if r.feature in set(pool)]
            tiers = default_tiers(in_pool)

            def dev(t):
                return float(np.mean([concepts[str(f)]["best_dev"] for f in t.features]))

            def held(t):
                return float(np.mean([concepts[str(f)]["heldout"] for f in t.features]))

            best, best_dev = select_best_tier(tiers, dev)
            rnd_tiers = RandomSelector(seed).tiers(lm, params, pool)
            rnd, _ = select_best_tier(rnd_tiers, dev)
            base = steer["g"]
            selected, rsel = held(best), held(rnd)

            def gain(v):
                try:
                    return steering_gain(base, v)
                except UndefinedGainError:
                    return None

            _write_json(self.out / "select" / f"{run.run_id}.json",
                        {"delta": [[r.feature, r.delta] for r in every],
                         "tiers": [{"label": t.label, "features": list(t.features), "dev": dev(t)}
                                   for t in tiers]})
            self._save("selection", run.run_id, h, base=base, selected=selected, gain=gain(selected),
                       tier=best.label, features=list(best.features), tier_dev=best_dev,
                       random_selected=rsel, random_gain=gain(rsel), random_features=list(rnd.features),
                       n_pool=len(pool), alpha=sc.alpha, k=sc.k)
            log.info("select-features %s: %s -> %.3f (base %.3f)", run.run_id, best.label, selected, base)

    # ------------------------------------------------------------ analysis
    def score_records(self) -> list[ScoreRecord]:
        rows = []
        for run in self.cfg.runs:
            mu = self._record("interp", run.run_id)["mu"]
            g = self._record("steering", run.run_id)["g"]
            has = self.store.has("selection", run.run_id)
            gain = self.store.get("selection", run.run_id)["gain"] if has else None
            rows.append((run, mu, g, gain))
        slots = sparsity_slots([_sparser(r.sae) for r, *_ in rows],
                               [(r.model, r.sae.architecture) for r, *_ in rows])
        return [ScoreRecord(r.run_id, r.sae.architecture, s, r.model, mu, g, gain)
                for (r, mu, g, gain), s in zip(rows, slots)]

    def rank_analysis(self) -> None:
        st = self.cfg.stats
        seed = self.cfg.seeds["stats"]
        ups = [self._record("steering", r.run_id)["hash"] for r in self.cfg.runs]
        sel = [self.store.get("selection", r.run_id)["hash"] if self.store.has("selection", r.run_id)
               else None for r in self.cfg.runs]
        h = _hash(ups, sel, st, seed)
        if self._fresh("rank", ANALYSIS_ID, h):
            return
        recs = self.score_records()
        out = {"records": [r.__dict__ for r in recs]}
        for name, yf in (("steering", "g"), ("gain", "gain")):
            use = [r for r in recs if getattr(r, yf) is not None]
            out[name] = _analysis(use, yf, st, seed)
        self._save("rank", ANALYSIS_ID, h, **out)

    def report(self) -> None:
        from .report import write_report
        rank = self._record("rank", ANALYSIS_ID)
        write_report(self.out / "report", self.cfg, self.store, rank)

    # ------------------------------------------------------------ dispatch
    def run_stage(self, stage: str) -> None:
        fn: dict[str, Callable[[], None]] = {
            "gen-data": self.gen_data, "train-sae": self.train_sae, "eval-interp": self.eval_interp,
            "eval-steering": self.eval_steering, "select-features": self.select_features,
            "rank-analysis": self.rank_analysis, "report": self.report}
        if stage == "all":
            for s in STAGES:
                fn[s]()
            return
        if stage not in fn:
            raise ConfigError(f"unknown stage {stage!r}")
        fn[stage]()


def _sparser(sae) -> float:
    """Sparsity level where larger means sparser."""
    if sae.lam is not None:
        return sae.lam
    return -float(sae.k if sae.k is not None else sae.target_l0)


def _analysis(records: list[ScoreRecord], y_field: str, st, seed: int) -> dict:
    """Pooled tau-b plus per-axis summaries; undefined pieces are reported as null."""
    res: dict = {"y": y_field, "n": len(records), "overall": None, "axes": {}, "Psi": None}
    if len(records) < 2:
        return res
    try:
        res["overall"] = overall_tau(records, "mu", y_field, st.n_perm, st.n_boot, seed, st.level).as_dict()
    except DegenerateInputError as exc:
        log.warning("overall tau-b (%s) undefined: %s", y_field, exc)
    summaries = []
    for axis in AXES:
        try:
            s = granulated_psi(records, axis, "mu", y_field, st.n_perm, st.n_boot, seed, st.level)
        except DegenerateInputError as exc:
            log.warning("axis %s (%s): %s", axis, y_field, exc)
            res["axes"][axis] = None
            continue
        summaries.append(s)
        res["axes"][axis] = {"psi": s.psi, "se": s.se, "boot_ci": list(s.boot_ci) if s.boot_ci else None,
                             "skipped": s.skipped,
                             "groups": [[label, t.as_dict()] for label, t in s.groups]}
    if summaries:
        res["Psi"] = aggregate_psi(summaries)
    return res
