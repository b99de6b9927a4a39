"""Single-feature steering: the residual intervention, factor sweeps and per-SAE scores."""

from __future__ import annotations

import logging
import zlib
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .corpus import BOS, Vocab, default_vocab
from .judge import JudgeError, Rating, harmonic_mean, judge_steering
from .sae import SaeParams, encode, feature_direction
from .toylm import HookPoint, ToyLM, generate

log = logging.getLogger(__name__)

DEFAULT_GRID = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0)
MODES = ("decoder_atom", "code_amplify")


class UndefinedGainError(ZeroDivisionError):
    pass


@dataclass(frozen=True)
class SteeringSpec:
    feature: int
    factor: float
    scale: float
    layer: int
    mode: str = "decoder_atom"

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("scale must be non-negative")
        if self.feature < 0:
            raise IndexError("feature index must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"unknown steering mode {self.mode!r}")


@dataclass(frozen=True)
class ConceptTask:
    concept_id: tuple[int, int]  # (layer, feature)
    description: str
    instructions: tuple[str, ...]
    dev_split: tuple[int, ...]
    heldout_split: tuple[int, ...]

    def __post_init__(self):
        dev, held = set(self.dev_split), set(self.heldout_split)
        if dev & held:
            raise ValueError("dev and held-out splits overlap")
        if dev | held != set(range(len(self.instructions))):
            raise ValueError("splits must cover every instruction exactly once")

    @property
    def feature(self) -> int:
        return self.concept_id[1]


def make_task(layer: int, feature: int, description: str, instructions: Sequence[str],
              seed: int) -> ConceptTask:
    """Split instructions in half at random (seeded per feature)."""
    n = len(instructions)
    perm = np.random.default_rng([seed, feature]).permutation(n)
    half = n // 2
    return ConceptTask((layer, feature), description, tuple(instructions),
                       tuple(sorted(int(i) for i in perm[:half])),
                       tuple(sorted(int(i) for i in perm[half:])))


@dataclass
class GenerationRecord:
    split: str
    instruction: int
    factor: float
    text: str
    rating: Rating | None
    score: float
    flagged: bool = False


@dataclass
class SteeringOutcome:
    concept_id: tuple[int, int]
    dev_means: dict[float, float]
    best_factor: float
    heldout_mean: float | None = None
    records: list[GenerationRecord] = field(default_factory=list)

    @property
    def flagged(self) -> bool:
        return any(r.flagged for r in self.records)

    @property
    def best_dev(self) -> float:
        return self.dev_means[self.best_factor]


def apply_steering(x: np.ndarray, spec: SteeringSpec, params: SaeParams) -> np.ndarray:
    """Add ``factor * scale`` times the decoder atom (``decoder_atom``), or push the
    feature's own code ``factor - 1`` more times along it (``code_amplify``)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.d:
        raise ValueError(f"residual width {x.shape[-1]} != SAE width {params.d}")
    v = feature_direction(params, spec.feature)
    if spec.mode == "decoder_atom":
        return x + (spec.factor * spec.scale) * v
    flat = x.reshape(-1, params.d)
    h = encode(params, flat)[:, spec.feature].reshape(x.shape[:-1])
    return x + (spec.factor - 1.0) * h[..., None] * v


def steering_hook(spec: SteeringSpec, params: SaeParams) -> HookPoint:
    """Hook applying the intervention at every position of the residual."""
    return HookPoint(spec.layer, lambda x: apply_steering(x, spec, params))


@dataclass(frozen=True)
class GenerationSettings:
    max_tokens: int = 24
    temperature: float = 1.0
    seed: int = 0


def _decode_seed(settings: GenerationSettings, concept_id, instruction: int) -> int:
    # Same seed across factors, so factors are compared on common noise.
    key = f"{concept_id[0]}:{concept_id[1]}:{instruction}".encode()
    return (settings.seed * 1_000_003 + zlib.crc32(key)) % (2**32)


def steered_continuation(lm: ToyLM, instruction: str, hook: HookPoint | None,
                         settings: GenerationSettings, decode_seed: int,
                         vocab: Vocab | None = None) -> str:
    vocab = vocab or default_vocab()
    prompt = np.array([BOS] + vocab.encode(instruction), dtype=np.int64)
    out = generate(lm, prompt, settings.max_tokens, hook, decode_seed, settings.temperature)
    return vocab.decode(out[len(prompt):])


def _rate(judge, text: str, task: ConceptTask, i: int) -> tuple[Rating | None, float, bool]:
    try:
        r = judge_steering(judge, text, task.description, task.instructions[i])
    except JudgeError as exc:
        log.warning("concept %s instruction %d: judge failed (%s)", task.concept_id, i, exc)
        return None, 0.0, True
    return r, harmonic_mean(r), False


def _run(task, split, idx, spec, params, lm, judge, settings, vocab) -> list[GenerationRecord]:
    hook = steering_hook(spec, params)
    recs = []
    for i in idx:
        text = steered_continuation(lm, task.instructions[i], hook, settings,
                                    _decode_seed(settings, task.concept_id, i), vocab)
        rating, score, bad = _rate(judge, text, task, i)
        recs.append(GenerationRecord(split, i, spec.factor, text, rating, score, bad))
    return recs


def sweep_factors(task: ConceptTask, grid: Sequence[float], template: SteeringSpec,
                  params: SaeParams, lm: ToyLM, judge,
                  settings: GenerationSettings = GenerationSettings(),
                  vocab: Vocab | None = None) -> SteeringOutcome:
    """Score every factor on the dev split and keep the best (ties: smaller factor).

    ``template`` supplies scale, layer and mode; its feature and factor are replaced.
    """
    if len(grid) == 0:
        raise ValueError("factor grid is empty")
    records: list[GenerationRecord] = []
    means: dict[float, float] = {}
    for a in sorted(float(g) for g in grid):
        spec = SteeringSpec(task.feature, a, template.scale, template.layer, template.mode)
        recs = _run(task, "dev", task.dev_split, spec, params, lm, judge, settings, vocab)
        records += recs
        means[a] = float(np.mean([r.score for r in recs]))
    best = max(means, key=lambda a: (means[a], -a))
    return SteeringOutcome(task.concept_id, means, best, None, records)


def heldout_score(task: ConceptTask, outcome: SteeringOutcome, template: SteeringSpec,
                  params: SaeParams, lm: ToyLM, judge,
                  settings: GenerationSettings = GenerationSettings(),
                  vocab: Vocab | None = None) -> float:
    """Mean harmonic-mean score on the held-out split at the chosen factor."""
    if outcome.best_factor is None:
        raise ValueError("outcome has no best factor")
    spec = SteeringSpec(task.feature, outcome.best_factor, template.scale, template.layer, template.mode)
    recs = _run(task, "heldout", task.heldout_split, spec, params, lm, judge, settings, vocab)
    outcome.records += recs
    outcome.heldout_mean = float(np.mean([r.score for r in recs]))
    return outcome.heldout_mean


def sae_steering_score(scores: Sequence[float] | Sequence[SteeringOutcome]) -> float:
    """Mean of per-concept held-out scores."""
    vals = [s.heldout_mean if isinstance(s, SteeringOutcome) else s for s in scores]
    if not vals:
        raise ValueError("no concept scores")
    if any(v is None for v in vals):
        raise ValueError("outcome without a held-out score")
    return float(np.mean(vals))


def steering_gain(base: float, selected: float) -> float:
    """Percentage lift of ``selected`` over ``base``."""
    if base == 0:
        raise UndefinedGainError("gain is undefined for a zero base score")
    if base < 0:
        raise ValueError("base score must be positive")
    return 100.0 * (selected - base) / base


def evaluate_concept(task: ConceptTask, params: SaeParams, scale: float, layer: int, lm: ToyLM,
                     judge, grid: Sequence[float] = DEFAULT_GRID,
                     settings: GenerationSettings = GenerationSettings(),
                     mode: str = "decoder_atom", vocab: Vocab | None = None) -> SteeringOutcome:
    """Dev sweep followed by the held-out evaluation."""
    template = SteeringSpec(task.feature, 1.0, scale, layer, mode)
    out = sweep_factors(task, grid, template, params, lm, judge, settings, vocab)
    heldout_score(task, out, template, params, lm, judge, settings, vocab)
    return out
