"""Synthetic multiple-choice task families.

Four families of increasing difficulty stand in for real benchmarks:

``marker_detect``      lexical: the stem hides one marker word; answer its category.
``copy_cue``           structural: answer the word that follows ``key`` in the stem.
``keyword_sentiment``  semantic: net polarity of the sentiment words in the stem.
``parity_reason``      reasoning: whether ``tik`` occurs an even or odd number of times.

Every family emits single-word options, and the correct slot is balanced
across a collection (each slot is the answer for n/4 examples, +-1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..aqua import Demonstration, QAExample
from ..errors import TaskError
from ..tokenizer import LETTERS

FAMILIES = ("marker_detect", "copy_cue", "keyword_sentiment", "parity_reason")

FILLERS = (
    "the", "a", "some", "this", "that", "one", "old", "new", "small", "big", "quiet", "loud",
    "went", "saw", "made", "kept", "found", "near", "under", "over", "with", "from", "into",
    "today", "later", "again", "very", "quite", "slowly", "then",
)

CATEGORIES = {
    "animal": ("cat", "dog", "horse", "tiger", "rabbit", "eagle", "whale", "fox"),
    "place": ("paris", "london", "tokyo", "cairo", "lima", "oslo", "delhi", "rome"),
    "food": ("bread", "cheese", "rice", "apple", "soup", "honey", "noodle", "bean"),
    "tool": ("hammer", "saw_blade", "wrench", "drill", "shovel", "chisel", "ladder", "pliers"),
    "color": ("crimson", "azure", "amber", "violet", "ivory", "teal", "olive", "maroon"),
    "person": ("alice", "bob", "carol", "dmitri", "erin", "farid", "grace", "heidi"),
}

NOUNS = (
    "stone", "river", "cloud", "lamp", "door", "chair", "book", "ship", "tree", "coin",
    "glass", "rope", "wheel", "bell", "shell", "brick", "feather", "mirror", "candle", "kettle",
)

POSITIVE = ("great", "lovely", "superb", "joyful", "brilliant", "pleasant")
NEGATIVE = ("awful", "dreadful", "boring", "terrible", "bleak", "painful")
NEUTRAL = ("okay", "plain", "ordinary", "average")
SENTIMENT_OPTIONS = ("positive", "negative", "neutral", "unsure")

PARITY_OPTIONS = ("even", "odd", "none", "every")

ROLES = {
    "marker_detect": "You are a careful reader.",
    "copy_cue": "You are a precise copier.",
    "keyword_sentiment": "You are a mood judge.",
    "parity_reason": "You are a patient counter.",
}
RULES = {
    "marker_detect": "Pick the category of the one named thing in the text.",
    "copy_cue": "Pick the word right after key in the text.",
    "keyword_sentiment": "Pick the overall mood of the text.",
    "parity_reason": "Pick whether tik shows up an even or odd number of times.",
}


@dataclass(frozen=True)
class TaskSpec:
    family: str
    n_train: int = 400
    n_eval: int = 100
    seed: int = 0
    vocab: tuple[str, ...] = FILLERS  # filler words
    demonstration: bool = True
    # keyword_sentiment: number of polar words per stem (1 makes it lexical)
    n_keywords: int = 3
    stem_length: tuple[int, int] = (3, 6)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise TaskError(f"unknown task family {self.family!r}")
        if self.n_train < 0 or self.n_eval < 0:
            raise TaskError("example counts must be non-negative")
        object.__setattr__(self, "vocab", tuple(self.vocab))
        reserved = set(LETTERS) | {w for ws in CATEGORIES.values() for w in ws} | set(CATEGORIES)
        reserved |= set(NOUNS) | set(POSITIVE) | set(NEGATIVE) | set(NEUTRAL) | {"key", "tik", "tok"}
        clash = reserved & set(self.vocab)
        if clash:
            raise TaskError(f"filler vocabulary overlaps task words: {sorted(clash)[:5]}")

    @property
    def task_id(self) -> str:
        return self.family


@dataclass
class _Instance:
    stem: str
    correct: str
    distractors: tuple[str, str, str]


def _fillers(rng, spec: TaskSpec, n: int) -> list[str]:
    return [spec.vocab[i] for i in rng.integers(0, len(spec.vocab), n)]


def _insert(rng, words: list[str], item: str) -> list[str]:
    i = int(rng.integers(0, len(words) + 1))
    return words[:i] + [item] + words[i:]


def _marker_detect(rng, spec: TaskSpec) -> _Instance:
    cats = list(CATEGORIES)
    cat = cats[int(rng.integers(len(cats)))]
    marker = CATEGORIES[cat][int(rng.integers(len(CATEGORIES[cat])))]
    lo, hi = spec.stem_length
    words = _insert(rng, _fillers(rng, spec, int(rng.integers(lo, hi + 1))), marker)
    others = [c for c in cats if c != cat]
    picks = rng.choice(len(others), 3, replace=False)
    return _Instance(" ".join(words) + " .", cat, tuple(others[i] for i in picks))


def _copy_cue(rng, spec: TaskSpec) -> _Instance:
    picks = rng.choice(len(NOUNS), 4, replace=False)
    nouns = [NOUNS[i] for i in picks]
    answer, rest = nouns[0], nouns[1:]
    # the three distractors also appear in the stem, so position matters
    order = [int(i) for i in rng.permutation(3)]
    words = [rest[i] for i in order]
    words = _insert(rng, words, f"key {answer}")
    lo, _ = spec.stem_length
    for _ in range(max(0, lo - 3)):
        words = _insert(rng, words, spec.vocab[int(rng.integers(len(spec.vocab)))])
    return _Instance(" ".join(words) + " .", answer, tuple(rest))


def _keyword_sentiment(rng, spec: TaskSpec) -> _Instance:
    k = spec.n_keywords
    if k == 1:
        pools = (POSITIVE, NEGATIVE, NEUTRAL)
        which = int(rng.integers(3))
        keys = [pools[which][int(rng.integers(len(pools[which])))]]
        label = SENTIMENT_OPTIONS[which]
    else:
        # an even k can cancel out, and then the answer is neutral
        signs = rng.choice([1, -1], size=k)
        keys = [POSITIVE[int(rng.integers(6))] if s > 0 else NEGATIVE[int(rng.integers(6))] for s in signs]
        total = int(signs.sum())
        label = "positive" if total > 0 else "negative" if total < 0 else "neutral"
    lo, hi = spec.stem_length
    words = _fillers(rng, spec, int(rng.integers(lo, hi + 1)))
    for w in keys:
        words = _insert(rng, words, w)
    distractors = tuple(o for o in SENTIMENT_OPTIONS if o != label)
    return _Instance(" ".join(words) + " .", label, distractors)


def _parity_reason(rng, spec: TaskSpec) -> _Instance:
    n = int(rng.integers(2, 13))  # about 8k distinct sequences
    n_tik = int(rng.integers(1, n + 1))
    seq = ["tik" if i < n_tik else "tok" for i in range(n)]
    seq = [seq[i] for i in rng.permutation(n)]
    label = "even" if n_tik % 2 == 0 else "odd"
    distractors = tuple(o for o in PARITY_OPTIONS if o != label)
    return _Instance(" ".join(seq) + " .", label, distractors)


_BUILDERS: dict[str, Callable] = {
    "marker_detect": _marker_detect,
    "copy_cue": _copy_cue,
    "keyword_sentiment": _keyword_sentiment,
    "parity_reason": _parity_reason,
}


def _place(rng, inst: _Instance, slot: int) -> tuple[tuple[str, ...], int]:
    d = [inst.distractors[i] for i in rng.permutation(3)]
    options = d[:slot] + [inst.correct] + d[slot:]
    return tuple(options), slot


def _demonstration(rng, spec: TaskSpec) -> Demonstration:
    inst = _BUILDERS[spec.family](rng, spec)
    options, slot = _place(rng, inst, int(rng.integers(4)))
    return Demonstration(inst.stem, options, LETTERS[slot])


def _balanced_slots(rng, n: int) -> list[int]:
    slots = [i % 4 for i in range(n)]
    return [slots[i] for i in rng.permutation(n)]


def generate_task(spec: TaskSpec, max_attempts_factor: int = 50) -> tuple[list[QAExample], list[QAExample]]:
    """Deterministic (train, eval) collections for ``spec``.

    Stems are unique across both splits, so eval questions never leak into
    training. Raises ``TaskError`` when the vocabulary cannot supply enough
    distinct stems.
    """
    if spec.family in ("marker_detect", "keyword_sentiment") and len(spec.vocab) < 4:
        raise TaskError("vocabulary too small: need at least 4 filler words")
    rng = np.random.default_rng([spec.seed, FAMILIES.index(spec.family)])
    total = spec.n_train + spec.n_eval
    seen: set[str] = set()
    instances: list[_Instance] = []
    attempts = 0
    while len(instances) < total:
        attempts += 1
        if attempts > max_attempts_factor * max(total, 1):
            raise TaskError(
                f"vocabulary too small for requested counts: {len(instances)} distinct "
                f"{spec.family} stems after {attempts - 1} draws, {total} requested"
            )
        inst = _BUILDERS[spec.family](rng, spec)
        if inst.stem in seen:
            continue
        seen.add(inst.stem)
        instances.append(inst)

    def build(split: str, chunk: list[_Instance]) -> list[QAExample]:
        out = []
        for i, (inst, slot) in enumerate(zip(chunk, _balanced_slots(rng, len(chunk)))):
            options, correct = _place(rng, inst, slot)
            demo = _demonstration(rng, spec) if spec.demonstration else None
            out.append(
                QAExample(
                    id=f"{spec.family}-{split}-{i:04d}",
                    role=ROLES[spec.family],
                    rule=RULES[spec.family],
                    stem=inst.stem,
                    options=options,
                    correct_index=correct,
                    demonstration=demo,
                )
            )
        return out

    return build("train", instances[: spec.n_train]), build("eval", instances[spec.n_train :])


def cue_map(spec: TaskSpec) -> dict[str, str]:
    """Word -> correct option text for families decided by a single stem word.

    Only these families can be served by a planted circuit.
    """
    if spec.family == "marker_detect":
        return {w: cat for cat, ws in CATEGORIES.items() for w in ws}
    if spec.family == "keyword_sentiment" and spec.n_keywords == 1:
        m = {w: "positive" for w in POSITIVE}
        m.update({w: "negative" for w in NEGATIVE})
        m.update({w: "neutral" for w in NEUTRAL})
        return m
    raise TaskError(f"{spec.family} (n_keywords={spec.n_keywords}) has no single-word cue")


def option_words(spec: TaskSpec) -> tuple[str, ...]:
    return {
        "marker_detect": tuple(CATEGORIES),
        "copy_cue": NOUNS,
        "keyword_sentiment": SENTIMENT_OPTIONS,
        "parity_reason": PARITY_OPTIONS,
    }[spec.family]


def corpus_texts(examples: Sequence[QAExample], template_text: str = "") -> list[str]:
    texts = [template_text]
    for ex in examples:
        texts += [ex.role, ex.rule, ex.stem, *ex.options]
        if ex.demonstration is not None:
            texts += [ex.demonstration.stem, *ex.demonstration.options]
    return texts
