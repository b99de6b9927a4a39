"""Word-level vocabulary and a seeded topic grammar for the toy corpus.

Documents pick one topic and emit 4-7 templated sentences whose content
words come from that topic's family (with a small chance of an off-topic
word).  The grammar can report the exact next-token distribution at every
position, which the toy LM uses to fit its readout.
"""

from __future__ import annotations

import re

import numpy as np

PAD, BOS, EOS = 0, 1, 2
SPECIALS = ["<pad>", "<bos>", "<eos>"]

FUNCTION_WORDS = [
    "the", "a", "is", "was", "and", "with", "of", "in", "very", "i", "you", "my",
    "from", "experience", ",", ".", "?", "tell", "me", "about", "write", "story",
    "describe", "what", "how", "explain", "it", "to", "this", "are", "like", "some",
]

TOPICS = {
    "food": (["cake", "bread", "soup", "cheese", "apple", "butter"],
             ["sweet", "fresh", "warm", "tasty"], ["bakes", "tastes", "cooks", "eats"]),
    "ocean": (["wave", "ship", "fish", "shore", "tide", "coral"],
              ["deep", "blue", "calm", "rough"], ["sails", "swims", "floats", "drifts"]),
    "space": (["star", "planet", "rocket", "moon", "comet", "galaxy"],
              ["distant", "bright", "vast", "orbital"], ["orbits", "launches", "glows", "spins"]),
    "music": (["song", "guitar", "drum", "melody", "piano", "choir"],
              ["loud", "soft", "rhythmic", "catchy"], ["plays", "sings", "hums", "strums"]),
    "forest": (["tree", "moss", "leaf", "owl", "fern", "branch"],
               ["green", "shady", "wooden", "tall"], ["grows", "rustles", "blooms", "sways"]),
    "city": (["street", "tower", "bus", "bridge", "market", "subway"],
             ["busy", "urban", "crowded", "noisy"], ["commutes", "honks", "builds", "crosses"]),
    "weather": (["rain", "storm", "cloud", "snow", "wind", "thunder"],
                ["cold", "stormy", "humid", "windy"], ["pours", "blows", "freezes", "rumbles"]),
    "sports": (["ball", "team", "goal", "coach", "match", "stadium"],
               ["fast", "athletic", "winning", "fierce"], ["kicks", "scores", "runs", "throws"]),
    "medicine": (["doctor", "nurse", "pill", "clinic", "fever", "vaccine"],
                 ["sick", "healthy", "medical", "clinical"], ["heals", "treats", "prescribes", "cures"]),
    "school": (["teacher", "book", "lesson", "pupil", "exam", "pencil"],
               ["smart", "curious", "studious", "academic"], ["learns", "reads", "teaches", "writes"]),
    "fire": (["flame", "ember", "smoke", "torch", "ash", "spark"],
             ["hot", "burning", "smoky", "fiery"], ["burns", "flickers", "ignites", "crackles"]),
    "animals": (["dog", "cat", "horse", "rabbit", "lion", "bird"],
                ["furry", "wild", "tame", "playful"], ["barks", "purrs", "gallops", "hops"]),
}
TOPIC_NAMES = list(TOPICS)
CATEGORIES = ("N", "A", "V")

TEMPLATES = [
    "the A N V the N .",
    "a N is very A .",
    "i V the N with a A N .",
    "the N of the N was A .",
    "from my experience , the N V .",
    "you like the A N and the N .",
    "this N is A and A .",
]

INSTRUCTION_TEMPLATES = [
    "tell me about the N .",
    "write a story about a A N .",
    "describe the N and the N .",
    "what is a A N ?",
    "explain how the N V .",
    "tell me some story about the A N .",
]

NOISE = 0.1
_WORD_RE = re.compile(r"<[^>\s]+>|[^\s,.?]+|[,.?]")
MIN_SENTENCES, MAX_SENTENCES = 4, 7


class Vocab:
    def __init__(self, size: int = 256):
        words = list(SPECIALS) + list(FUNCTION_WORDS)
        for nouns, adjs, verbs in TOPICS.values():
            words += nouns + adjs + verbs
        if len(set(words)) != len(words):
            raise RuntimeError("vocabulary words must be unique")
        self.n_real = len(words)
        if size >= self.n_real:
            words += [f"<unused_{i}>" for i in range(size - self.n_real)]
        else:
            words = words[:size]
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str) -> list[int]:
        """Lower-case, split off punctuation and map words to ids."""
        try:
            return [self.index[w] for w in _WORD_RE.findall(text.lower())]
        except KeyError as exc:
            raise ValueError(f"out-of-vocabulary word {exc.args[0]!r}") from None

    def decode(self, ids, skip_special: bool = True) -> str:
        out = []
        for i in ids:
            w = self.words[int(i)]
            if skip_special and w.startswith("<"):
                continue
            out.append(w)
        return " ".join(out)


_VOCAB = Vocab(256)


def default_vocab() -> Vocab:
    return _VOCAB


def topic_of_word(word: str) -> str | None:
    for name, fams in TOPICS.items():
        if any(word in fam for fam in fams):
            return name
    return None


def topic_words(topic: str) -> list[str]:
    nouns, adjs, verbs = TOPICS[topic]
    return nouns + adjs + verbs


class Grammar:
    """Seeded document generator with exact next-token distributions."""

    def __init__(self, vocab: Vocab | None = None, noise: float = NOISE):
        self.vocab = vocab or default_vocab()
        if self.vocab.n_real > len(self.vocab):
            raise ValueError("vocabulary too small for the grammar")
        self.noise = noise
        self.V = len(self.vocab)
        self.templates = [t.split() for t in TEMPLATES]
        # slot distributions: (topic, category) -> prob vector over V
        self._slot = {}
        for ti, topic in enumerate(TOPIC_NAMES):
            for ci, cat in enumerate(CATEGORIES):
                p = np.zeros(self.V)
                own = [self.vocab.index[w] for w in TOPICS[topic][ci]]
                other = [self.vocab.index[w] for t2 in TOPIC_NAMES if t2 != topic for w in TOPICS[t2][ci]]
                p[own] += (1 - noise) / len(own)
                p[other] += noise / len(other)
                self._slot[ti, ci] = p

    def _slot_dist(self, slot: str, topic: int) -> np.ndarray:
        if slot in CATEGORIES:
            return self._slot[topic, CATEGORIES.index(slot)]
        p = np.zeros(self.V)
        p[self.vocab.index[slot]] = 1.0
        return p

    def _sentence_start(self, topic: int) -> np.ndarray:
        return sum(self._slot_dist(t[0], topic) for t in self.templates) / len(self.templates)

    def sample_document(self, rng: np.random.Generator, with_dist: bool = False):
        """Return (tokens, topic[, next-token distributions])."""
        topic = int(rng.integers(len(TOPIC_NAMES)))
        n_sent = int(rng.integers(MIN_SENTENCES, MAX_SENTENCES + 1))
        toks = [BOS]
        dists = [self._sentence_start(topic)] if with_dist else None
        for s in range(n_sent):
            tpl = self.templates[int(rng.integers(len(self.templates)))]
            for j, slot in enumerate(tpl):
                p = self._slot_dist(slot, topic)
                toks.append(int(rng.choice(self.V, p=p)) if slot in CATEGORIES else int(np.argmax(p)))
                if with_dist:
                    if j + 1 < len(tpl):
                        dists.append(self._slot_dist(tpl[j + 1], topic))
                    elif s + 1 < n_sent:
                        dists.append(self._sentence_start(topic))
                    else:
                        dists.append(np.eye(self.V)[EOS])
        toks.append(EOS)
        if with_dist:
            dists.append(np.eye(self.V)[BOS])
            return np.array(toks), topic, np.array(dists)
        return np.array(toks), topic


def pack_documents(docs: list[np.ndarray], context: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Greedily pack whole documents into chunks of ``context`` tokens.

    Returns (tokens, doc_index) pairs per chunk; PAD positions carry -1.
    """
    chunks = []
    cur, cur_doc = [], []
    for di, d in enumerate(docs):
        if len(d) > context:
            raise ValueError("document longer than context")
        if len(cur) + len(d) > context:
            chunks.append((cur, cur_doc))
            cur, cur_doc = [], []
        cur = cur + list(d)
        cur_doc = cur_doc + [di] * len(d)
    if cur:
        chunks.append((cur, cur_doc))
    out = []
    for toks, dids in chunks:
        pad = context - len(toks)
        out.append((np.array(toks + [PAD] * pad), np.array(dids + [-1] * pad)))
    return out


def make_instructions(n: int, rng: np.random.Generator, topic: str | None = None) -> list[str]:
    """Short imperative instructions over in-vocabulary words, each on one topic.

    With ``topic`` every instruction is drawn from that topic; otherwise the
    topic is drawn per instruction.
    """
    if topic is not None and topic not in TOPICS:
        raise ValueError(f"unknown topic {topic!r}")
    fixed = topic
    out = []
    for _ in range(n):
        tpl = INSTRUCTION_TEMPLATES[int(rng.integers(len(INSTRUCTION_TEMPLATES)))]
        topic = fixed or TOPIC_NAMES[int(rng.integers(len(TOPIC_NAMES)))]
        words = []
        for slot in tpl.split():
            if slot in CATEGORIES:
                fam = TOPICS[topic][CATEGORIES.index(slot)]
                words.append(fam[int(rng.integers(len(fam)))])
            else:
                words.append(slot)
        out.append(" ".join(words))
    return out
