"""Judging: prompt templates, rating parsing, harmonic mean, judge backends.

Two families of backends live here.  Steering judges rate a generated
fragment on concept, instruction and fluency.  Interpretability judges
describe a latent from highlighted windows and predict which unlabeled
windows activate.  Each family has an HTTP-backed implementation and
deterministic local ones for desk-scale runs.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
import urllib.error
import urllib.request
from collections import Counter
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import FUNCTION_WORDS, topic_of_word

log = logging.getLogger(__name__)


class JudgeError(Exception):
    """Base class for judge failures."""


class TemplateError(JudgeError, ValueError):
    pass


class RatingParseError(JudgeError, ValueError):
    pass


class JudgeTransportError(JudgeError):
    pass


class JudgeCredentialsError(JudgeError):
    pass


def _clamp(v: float) -> float:
    return float(min(2.0, max(0.0, v)))


@dataclass(frozen=True)
class Rating:
    concept: float
    instruction: float
    fluency: float

    def __post_init__(self):
        for name in ("concept", "instruction", "fluency"):
            object.__setattr__(self, name, _clamp(getattr(self, name)))


def harmonic_mean(r: Rating) -> float:
    c, i, f = r.concept, r.instruction, r.fluency
    if c <= 0 or i <= 0 or f <= 0:
        return 0.0
    return 3.0 / (1.0 / c + 1.0 / i + 1.0 / f)


# ---------------------------------------------------------------- templates

_RATING_LINE = 'Provide your rating using this exact format: "Rating: [[score]]".'

TEMPLATES = {
    "concept": (
        "[System]\n"
        "Please act as an impartial judge and evaluate whether the specified concept is presented in the "
        "sentence fragment provided below. Focus solely on whether the concept is clearly incorporated, "
        "without regard for grammar or logical coherence.\n"
        "Begin your evaluation by providing a short explanation of whether the concept is clearly "
        "incorporated. Point out references to the concept in the fragment, noting any minimal or awkward "
        "incorporations. After providing your explanation, rate the concept's relevance on a scale from 0 "
        "to 2, where 0 indicates the concept is not present at all, 1 indicates the concept is somewhat "
        "present but minimally or awkwardly incorporated, and 2 indicates the concept is more fully and "
        "effectively incorporated, with stronger and more natural integration. " + _RATING_LINE + "\n\n"
        "[Concept Start] {concept} [Concept End]\n"
        "[Sentence Fragment Start] {sentence} [Sentence Fragment End]"
    ),
    "instruction": (
        "[System]\n"
        "Please act as an impartial judge and evaluate whether the sentence fragment provided below is "
        "related to the instruction. Focus solely on the degree of relatedness in terms of topic, "
        "regardless of grammar, coherence, or informativeness.\n"
        "Begin your evaluation by providing a brief explanation of whether the sentence is related to the "
        "instruction, and point out references related to the instruction. After providing your "
        "explanation, rate the instruction relevance on a scale from 0 to 2, where 0 indicates the sentence "
        "is unrelated to the instruction, 1 indicates it is somewhat related but only minimally or "
        "indirectly relevant in terms of topic, and 2 indicates it is more clearly and directly related to "
        "the instruction. " + _RATING_LINE + "\n\n"
        "[Instruction Start] {instruction} [Instruction End]\n"
        "[Sentence Fragment Start] {sentence} [Sentence Fragment End]"
    ),
    "fluency": (
        "[System]\n"
        "Please act as an impartial judge and evaluate the fluency of the sentence fragment provided below. "
        "Focus solely on fluency, disregarding its completeness, relevance, coherence with any broader "
        "context, or informativeness.\n"
        "Begin your evaluation by briefly describing the fluency of the sentence, noting any unnatural "
        "phrasing, awkward transitions, grammatical errors, or repetitive structures that may hinder "
        "readability. After providing your explanation, rate the sentence's fluency on a scale from 0 to 2, "
        "where 0 indicates the sentence is not fluent and highly unnatural (e.g., incomprehensible or "
        "repetitive), 1 indicates it is somewhat fluent but contains noticeable errors or awkward phrasing, "
        "and 2 indicates the sentence is fluent and almost perfect. " + _RATING_LINE + "\n\n"
        "[Sentence Fragment Start] {sentence} [Sentence Fragment End]"
    ),
    "autointerp_describe": (
        "We are studying a neuron in a language model. Below are text windows where the neuron was "
        "recorded. Tokens on which it fires are wrapped in << and >>.\n\n"
        "{examples}\n\n"
        "In one short sentence, describe when this neuron fires. Reply with the description only."
    ),
    "autointerp_predict": (
        "We are studying a neuron in a language model. It is described as follows:\n"
        "{description}\n\n"
        "Below are numbered text windows. Decide which windows contain at least one token on which the "
        "neuron fires.\n\n"
        "{examples}\n\n"
        "Answer with the window numbers as a comma-separated list, or None if no window matches."
    ),
}

_SLOT_RE = re.compile(r"\{(\w+)\}")


def template_slots(kind: str) -> set[str]:
    if kind not in TEMPLATES:
        raise TemplateError(f"unknown template kind {kind!r}")
    return set(_SLOT_RE.findall(TEMPLATES[kind]))


def render_template(kind: str, **slots: str) -> str:
    """Fill the named template; every slot must be supplied."""
    need = template_slots(kind)
    missing = need - set(slots)
    if missing:
        raise TemplateError(f"template {kind!r} missing slot(s): {sorted(missing)}")
    # single-pass substitution so slot values containing braces are left alone
    return _SLOT_RE.sub(lambda m: str(slots[m.group(1)]), TEMPLATES[kind])


_RATING_RE = re.compile(r"Rating:\s*\[\[\s*([-+]?(?:\d+(?:\.\d*)?|\.\d+))\s*\]\]")


def parse_rating(response: str) -> float:
    """Last ``Rating: [[x]]`` in the response, clamped to [0, 2]."""
    found = _RATING_RE.findall(response or "")
    if not found:
        raise RatingParseError("no 'Rating: [[score]]' pattern in response")
    return _clamp(float(found[-1]))


def format_rating(value: float) -> str:
    return f"Rating: [[{value:g}]]"


# ---------------------------------------------------------- synthetic judge

# Rule thresholds for the synthetic steering judge (version 1).
SYNTH_RULES_VERSION = 1
CONCEPT_THRESHOLDS = (1, 2)
INSTRUCTION_THRESHOLDS = (0.1, 0.3)
REPETITION_NGRAM = 2
REPETITION_THRESHOLDS = (0.25, 0.5)

_DESCRIPTION_WORDS = {
    "words", "word", "tokens", "token", "related", "concepts", "concept", "such", "as", "fires", "on",
    "mentions", "mention", "like", "the", "of", "and", "or", "to", "text", "about", "terms", "including",
}
_STOP = set(FUNCTION_WORDS) | _DESCRIPTION_WORDS


def concept_terms(concept: str) -> set[str]:
    """Quoted words of a concept description, else its non-stopword words."""
    quoted = re.findall(r'"([^"]+)"', concept)
    words = " ".join(quoted).split() if quoted else re.findall(r"[a-z]+", concept.lower())
    return {w.lower() for w in words if w.lower() not in _STOP}


def _content(text: str) -> list[str]:
    return [w for w in text.lower().split() if w not in _STOP]


def _related(a: str, b: str) -> bool:
    if a == b:
        return True
    ta = topic_of_word(a)
    return ta is not None and ta == topic_of_word(b)


def repetition_score(sentence: str, n: int = REPETITION_NGRAM) -> float:
    """Fraction of n-grams that repeat an earlier n-gram (0 for short text)."""
    toks = sentence.split()
    if len(toks) < n:
        return 0.0
    grams = [tuple(toks[i:i + n]) for i in range(len(toks) - n + 1)]
    return 1.0 - len(set(grams)) / len(grams)


def synthetic_judge_rules(sentence: str, concept: str, instruction: str, seed: int = 0) -> Rating:
    """Deterministic rule-based rating.

    C: words that are a concept term or share its topic family
       (0 -> 0, 1 -> 1, >=2 -> 2).
    I: fraction of instruction content words matched by the sentence,
       where a match is the same word or a word of the same topic family
       (<0.1 -> 0, <0.3 -> 1, else 2).
    F: n-gram repetition (>=0.5 -> 0, >=0.25 -> 1, else 2); empty -> 0.
    ``seed`` is accepted for interface symmetry; the rules use no randomness.
    """
    del seed
    words = sentence.lower().split()
    terms = concept_terms(concept)
    hits = sum(any(_related(w, t) for t in terms) for w in words if w not in _STOP)
    lo_c, hi_c = CONCEPT_THRESHOLDS
    c = 0.0 if hits < lo_c else (1.0 if hits < hi_c else 2.0)
    inst = _content(instruction)
    sent = set(_content(sentence))
    if inst:
        frac = sum(any(_related(w, s) for s in sent) for w in inst) / len(inst)
    else:
        frac = 0.0
    lo, hi = INSTRUCTION_THRESHOLDS
    i = 0.0 if frac < lo else (1.0 if frac < hi else 2.0)
    if not words:
        f = 0.0
    else:
        rep = repetition_score(sentence)
        rlo, rhi = REPETITION_THRESHOLDS
        f = 0.0 if rep >= rhi else (1.0 if rep >= rlo else 2.0)
    return Rating(c, i, f)


class SyntheticJudge:
    """Steering judge backed by :func:`synthetic_judge_rules`."""

    kind = "synthetic"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def rate(self, sentence: str, concept: str, instruction: str) -> Rating:
        return synthetic_judge_rules(sentence, concept, instruction, self.seed)


# ------------------------------------------------------------ HTTP backend

Transport = Callable[[str, dict, bytes, float], bytes]


def urllib_transport(url: str, headers: dict, body: bytes, timeout: float) -> bytes:
    req = urllib.request.Request(url, data=body, headers=headers, method="POST")
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return resp.read()


class HttpJudgeClient:
    """Chat-completions style client with retries, backoff and bounded concurrency.

    The bearer token is read from the environment variable ``token_env``.
    Request and response bodies are appended to ``audit_path`` (JSON lines);
    headers are never logged.
    """

    def __init__(self, endpoint: str, model: str, token_env: str = "JUDGE_API_KEY",
                 timeout: float = 60.0, retries: int = 3, backoff: float = 1.0,
                 max_in_flight: int = 4, temperature: float = 0.0,
                 audit_path: str | Path | None = None, transport: Transport | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        if not endpoint:
            raise JudgeCredentialsError("external judge needs an endpoint")
        token = os.environ.get(token_env)
        if not token:
            raise JudgeCredentialsError(f"environment variable {token_env} is not set")
        self.endpoint = endpoint
        self.model = model
        self._token = token
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.temperature = temperature
        self.audit_path = Path(audit_path) if audit_path else None
        self.transport = transport or urllib_transport
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._audit_lock = threading.Lock()

    def _audit(self, entry: dict) -> None:
        if self.audit_path is None:
            return
        with self._audit_lock:
            self.audit_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.audit_path, "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def complete(self, prompt: str) -> str:
        body = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": prompt}],
        }
        raw = json.dumps(body).encode()
        headers = {"Content-Type": "application/json", "Authorization": f"Bearer {self._token}"}
        last = None
        for attempt in range(self.retries + 1):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with self._slots:
                    out = self.transport(self.endpoint, headers, raw, self.timeout)
                text = json.loads(out)["choices"][0]["message"]["content"]
            except (urllib.error.URLError, TimeoutError, OSError, ValueError, KeyError, IndexError) as exc:
                last = exc
                self._audit({"request": body, "error": repr(exc), "attempt": attempt})
                continue
            self._audit({"request": body, "response": text, "attempt": attempt})
            return text
        raise JudgeTransportError(f"judge request failed after {self.retries + 1} attempts: {last!r}")


class ExternalJudge:
    """LLM judge reached over HTTP; rates with three separate template calls."""

    kind = "external"

    def __init__(self, client: HttpJudgeClient, parse_retries: int = 2):
        self.client = client
        self.parse_retries = parse_retries

    def _score(self, prompt: str) -> float:
        last = None
        for _ in range(self.parse_retries + 1):
            try:
                return parse_rating(self.client.complete(prompt))
            except RatingParseError as exc:
                last = exc
        raise last

    def rate(self, sentence: str, concept: str, instruction: str) -> Rating:
        c = self._score(render_template("concept", concept=concept, sentence=sentence))
        i = self._score(render_template("instruction", instruction=instruction, sentence=sentence))
        f = self._score(render_template("fluency", sentence=sentence))
        return Rating(c, i, f)

    # interpretability side
    def describe(self, windows: Sequence, tau_act: float, decode: Callable) -> str:
        text = "\n".join(f"{j + 1}. {render_window(w, decode, tau_act)}" for j, w in enumerate(windows))
        return self.client.complete(render_template("autointerp_describe", examples=text)).strip()

    def predict(self, description: str, windows: Sequence, tau_act: float, decode: Callable) -> set[int]:
        text = "\n".join(f"{j + 1}. {render_window(w, decode)}" for j, w in enumerate(windows))
        reply = self.client.complete(
            render_template("autointerp_predict", description=description, examples=text))
        return parse_indices(reply, len(windows))


def judge_steering(backend, sentence: str, concept: str, instruction: str) -> Rating:
    return backend.rate(sentence, concept, instruction)


# ------------------------------------------------------ interp judges

def render_window(window, decode: Callable, tau_act: float | None = None) -> str:
    """Window text; with ``tau_act`` tokens above it are wrapped in << >>."""
    out = []
    for tok, act in zip(window.tokens, window.activations):
        w = decode([tok])
        if not w:
            continue
        out.append(f"<<{w}>>" if tau_act is not None and act > tau_act else w)
    return " ".join(out)


def parse_indices(reply: str, n: int) -> set[int]:
    """Parse a 1-based comma-separated index list (or None) into 0-based indices."""
    reply = (reply or "").strip()
    if not reply or reply.lower().startswith("none"):
        return set()
    out = set()
    for tok in re.findall(r"\d+", reply):
        j = int(tok) - 1
        if 0 <= j < n:
            out.add(j)
    return out


class OracleInterpJudge:
    """Predicts the true window labels, each flipped independently with probability ``rho``.

    With ``invert`` the prediction is the complement of the true labels.
    """

    kind = "oracle"

    def __init__(self, rho: float = 0.0, seed: int = 0, invert: bool = False):
        if not 0 <= rho <= 1:
            raise ValueError("rho must be in [0, 1]")
        self.rho = rho
        self.seed = seed
        self.invert = invert

    def describe(self, windows, tau_act, decode) -> str:
        return f"latent {windows[0].latent}" if windows else "latent"

    def predict(self, description, windows, tau_act, decode) -> set[int]:
        out = set()
        for j, w in enumerate(windows):
            y = bool(np.max(w.activations) > tau_act)
            rng = np.random.default_rng([self.seed, w.latent, w.sequence, w.position])
            if rng.random() < self.rho:
                y = not y
            if self.invert:
                y = not y
            if y:
                out.add(j)
        return out


class HeuristicInterpJudge:
    """Local stand-in for an LLM judge.

    Describes a latent by its most frequent highlighted words and predicts
    the windows that contain any of them.
    """

    kind = "heuristic"

    def __init__(self, n_terms: int = 3):
        self.n_terms = n_terms

    def describe(self, windows, tau_act, decode) -> str:
        counts = Counter()
        for w in windows:
            for tok, act in zip(w.tokens, w.activations):
                word = decode([tok])
                if act > tau_act and word:
                    counts[word] += 1
        top = [w for w, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[: self.n_terms]]
        if not top:
            return "no clear pattern"
        return "words like " + ", ".join(f'"{w}"' for w in top)

    def predict(self, description, windows, tau_act, decode) -> set[int]:
        terms = set(re.findall(r'"([^"]+)"', description))
        out = set()
        for j, w in enumerate(windows):
            if any(decode([t]) in terms for t in w.tokens):
                out.add(j)
        return out
