"""Experiment configuration: TOML parsing, defaults, validation and run ids."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .sae import ARCHITECTURES, SaeConfig, canonical_arch
from .toylm import ToyLmConfig
from .train import TrainConfig

SEED_NAMES = ("data", "train", "interp", "steer", "select", "stats")
INTERP_JUDGES = ("heuristic", "oracle", "external")
STEER_JUDGES = ("synthetic", "external")

DESK_CONFIG = """\
# Desk-scale experiment: 5 architectures x 2 sparsity levels on one toy model.
output = "runs/desk"

[lm]
seeds = [1]
n_tokens = 100000

[train]
total_steps = 2000
batch = 256
lr = 3e-3
lr_warmup_steps = 100
sparsity_warmup_steps = 500
dead_window = 500
threshold_start = 500

[matrix]
F = 512
ReLU = [1.0, 3.0]
Gated = [1.0, 3.0]
TopK = [32, 8]
BatchTopK = [32, 8]
JumpReLU = [32, 8]

[interp]
n_latents = 200
concept_size = 25
judge = "heuristic"

[steer]
grid = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0]
n_instructions = 10
max_tokens = 16
temperature = 0.8
judge = "synthetic"

[select]
alpha = 10.0
k = 1
prefix = "From my experience,"
mode = "additive"

[stats]
n_perm = 10000
n_boot = 10000
level = 0.95

[seeds]
data = 0
train = 0
interp = 0
steer = 0
select = 0
stats = 0
"""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LmSection:
    seeds: tuple[int, ...] = (1,)
    n_tokens: int = 100_000
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    context: int = 128
    layer: int | None = None
    activations: str | None = None  # external activation dump instead of the toy LM

    def lm_config(self, seed: int) -> ToyLmConfig:
        return ToyLmConfig(self.vocab_size, self.d_model, self.n_layers, self.n_heads,
                           self.context, seed, self.layer)


@dataclass(frozen=True)
class InterpSection:
    n_latents: int = 200
    concept_size: int = 25
    judge: str = "heuristic"
    oracle_rho: float = 0.0


@dataclass(frozen=True)
class JudgeEndpoint:
    endpoint: str = ""
    model: str = ""
    token_env: str = "JUDGE_API_KEY"
    max_in_flight: int = 4
    retries: int = 3


@dataclass(frozen=True)
class SteerSection:
    grid: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0)
    n_instructions: int = 10
    pool_size: int = 200
    max_tokens: int = 16
    temperature: float = 0.8
    judge: str = "synthetic"
    mode: str = "decoder_atom"


@dataclass(frozen=True)
class SelectSection:
    alpha: float = 10.0
    k: int = 1
    prefix: str = "From my experience,"
    mode: str = "additive"


@dataclass(frozen=True)
class StatsSection:
    n_perm: int = 10_000
    n_boot: int = 10_000
    level: float = 0.95


@dataclass(frozen=True)
class SaeRun:
    run_id: str
    model_seed: int
    sae: SaeConfig

    @property
    def model(self) -> str:
        return f"toy{self.model_seed}"


@dataclass(frozen=True)
class ExperimentConfig:
    lm: LmSection
    train: TrainConfig
    runs: tuple[SaeRun, ...]
    interp: InterpSection
    steer: SteerSection
    select: SelectSection
    stats: StatsSection
    judge: JudgeEndpoint
    seeds: dict = field(default_factory=dict)
    output: Path = Path("runs/desk")
    F: int = 512

    def run(self, run_id: str) -> SaeRun:
        for r in self.runs:
            if r.run_id == run_id:
                return r
        raise KeyError(run_id)

    def section_hash(self, *names: str) -> str:
        """Digest of the named sections; stages use it to detect stale outputs."""
        blob = {n: _jsonable(getattr(self, n)) for n in names}
        return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]

    def digest(self) -> str:
        return self.section_hash("lm", "train", "runs", "interp", "steer", "select", "stats",
                                 "seeds", "F")

    def as_dict(self) -> dict:
        return {f.name: _jsonable(getattr(self, f.name)) for f in fields(self) if f.name != "output"}


def _jsonable(v):
    if hasattr(v, "__dataclass_fields__"):
        return {k: _jsonable(x) for k, x in asdict(v).items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, Path):
        return str(v)
    return v


def _section(cls, raw: dict, name: str):
    raw = dict(raw or {})
    known = {f.name for f in fields(cls)}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"[{name}] unknown keys: {sorted(extra)}")
    for k, v in raw.items():
        if isinstance(v, list):
            raw[k] = tuple(v)
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


def run_id_for(model_seed: int, sae: SaeConfig) -> str:
    knob = {"lam": sae.lam, "k": sae.k, "target_l0": sae.target_l0}
    name, val = next((n, v) for n, v in knob.items() if v is not None)
    val = f"{val:g}" if isinstance(val, float) else str(val)
    return f"toy{model_seed}-{sae.architecture}-{name}{val}-s{sae.seed}"


def _matrix(raw: dict, lm: LmSection) -> tuple[tuple[SaeRun, ...], int]:
    raw = dict(raw or {})
    F = int(raw.pop("F", 512))
    seeds = raw.pop("seeds", [0])
    runs, seen = [], set()
    for arch_name, levels in raw.items():
        try:
            arch = canonical_arch(arch_name)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        knob = {"ReLU": "lam", "Gated": "lam", "TopK": "k", "BatchTopK": "k",
                "JumpReLU": "target_l0"}[arch]
        for model_seed in lm.seeds:
            for s in seeds:
                for level in levels:
                    val = int(level) if knob == "k" else float(level)
                    if knob == "k" and val != level:
                        raise ConfigError(f"{arch}: k must be an integer, got {level}")
                    try:
                        sae = SaeConfig(arch, lm.d_model, F, seed=int(s), **{knob: val})
                    except ValueError as exc:
                        raise ConfigError(f"{arch}: {exc}") from None
                    rid = run_id_for(model_seed, sae)
                    if rid in seen:
                        raise ConfigError(f"duplicate run {rid}")
                    seen.add(rid)
                    runs.append(SaeRun(rid, model_seed, sae))
    if not runs:
        raise ConfigError("[matrix] defines no SAEs")
    return tuple(runs), F


def config_from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    raw = dict(raw)
    allowed = {"output", "lm", "train", "matrix", "interp", "steer", "select", "stats", "seeds", "judge"}
    extra = set(raw) - allowed
    if extra:
        raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
    lm = _section(LmSection, raw.get("lm"), "lm")
    train_raw = dict(raw.get("train") or {})
    train_raw.setdefault("total_steps", 2000)
    train_raw.setdefault("batch", 256)
    if "seed" in train_raw:
        raise ConfigError("[train] seed is set in [seeds]")
    train = _section(TrainConfig, train_raw, "train")
    runs, F = _matrix(raw.get("matrix"), lm)
    interp = _section(InterpSection, raw.get("interp"), "interp")
    steer = _section(SteerSection, raw.get("steer"), "steer")
    select = _section(SelectSection, raw.get("select"), "select")
    stats = _section(StatsSection, raw.get("stats"), "stats")
    judge = _section(JudgeEndpoint, raw.get("judge"), "judge")
    seeds = {name: 0 for name in SEED_NAMES}
    given = dict(raw.get("seeds") or {})
    unknown = set(given) - set(SEED_NAMES)
    if unknown:
        raise ConfigError(f"[seeds] unknown names: {sorted(unknown)}")
    seeds.update({k: int(v) for k, v in given.items()})
    train = replace(train, seed=seeds["train"])
    if interp.judge not in INTERP_JUDGES:
        raise ConfigError(f"[interp] judge must be one of {INTERP_JUDGES}")
    if steer.judge not in STEER_JUDGES:
        raise ConfigError(f"[steer] judge must be one of {STEER_JUDGES}")
    if not steer.grid:
        raise ConfigError("[steer] grid is empty")
    if steer.n_instructions < 2 or steer.n_instructions > steer.pool_size:
        raise ConfigError("[steer] n_instructions must be in [2, pool_size]")
    if interp.concept_size > interp.n_latents:
        raise ConfigError("[interp] concept_size exceeds n_latents")
    if select.mode not in ("additive", "amplify"):
        raise ConfigError("[select] mode must be additive or amplify")
    out = Path(raw.get("output", "runs/desk"))
    if base_dir is not None and not out.is_absolute():
        out = base_dir / out
    return ExperimentConfig(lm, train, runs, interp, steer, select, stats, judge, seeds, out, F)


def validate_config(path=None, seed_override: int | None = None) -> ExperimentConfig:
    """Parse a TOML config (or the built-in desk config when ``path`` is None).

    A relative ``output`` is taken relative to the working directory.
    """
    try:
        if path is None:
            raw = tomllib.loads(DESK_CONFIG)
        else:
            raw = tomllib.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config does not parse: {exc}") from exc
    if seed_override is not None:
        raw["seeds"] = {name: int(seed_override) for name in SEED_NAMES}
    return config_from_dict(raw)


__all__ = ["ARCHITECTURES", "ConfigError", "DESK_CONFIG", "ExperimentConfig", "SaeRun",
           "config_from_dict", "run_id_for", "validate_config"]
