"""Question augmentation: templated prompts and option-shuffled proxy questions."""

from __future__ import annotations

import hashlib
import itertools
import json
import re
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import AquaError
from .tokenizer import LETTERS, Tokenizer, split_words

SCHEMA_VERSION = 1
PERMUTATIONS: tuple[tuple[int, ...], ...] = tuple(itertools.permutations(range(4)))
N_PROXIES = 3


@dataclass(frozen=True)
class Demonstration:
    stem: str
    options: tuple[str, ...]
    answer: str  # letter A-D

    def __post_init__(self):
        object.__setattr__(self, "options", tuple(self.options))
        if len(self.options) != 4 or len(set(self.options)) != 4:
            raise AquaError("demonstration needs 4 distinct options")
        if self.answer not in LETTERS:
            raise AquaError(f"demonstration answer {self.answer!r} is not a letter A-D")


@dataclass(frozen=True)
class QAExample:
    id: str
    role: str
    rule: str
    stem: str
    options: tuple[str, ...]
    correct_index: int
    demonstration: Demonstration | None = None

    def __post_init__(self):
        object.__setattr__(self, "options", tuple(self.options))
        if len(self.options) != 4:
            raise AquaError(f"{self.id}: exactly 4 options required, got {len(self.options)}")
        if len(set(self.options)) != 4:
            raise AquaError(f"{self.id}: option texts must be distinct")
        if not (0 <= self.correct_index < 4):
            raise AquaError(f"{self.id}: correct_index {self.correct_index} out of range")

    @property
    def correct_text(self) -> str:
        return self.options[self.correct_index]

    @property
    def correct_letter(self) -> str:
        return LETTERS[self.correct_index]

    def to_json(self) -> dict:
        d = {
            "version": SCHEMA_VERSION,
            "id": self.id,
            "role": self.role,
            "rule": self.rule,
            "stem": self.stem,
            "options": list(self.options),
            "correct_index": self.correct_index,
            "demonstration": None,
        }
        if self.demonstration is not None:
            demo = self.demonstration
            d["demonstration"] = {"stem": demo.stem, "options": list(demo.options), "answer": demo.answer}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "QAExample":
        if d.get("version") != SCHEMA_VERSION:
            raise AquaError(f"unsupported question schema version {d.get('version')!r}")
        demo = d.get("demonstration")
        return cls(
            id=d["id"],
            role=d["role"],
            rule=d["rule"],
            stem=d["stem"],
            options=tuple(d["options"]),
            correct_index=int(d["correct_index"]),
            demonstration=Demonstration(demo["stem"], tuple(demo["options"]), demo["answer"]) if demo else None,
        )


@dataclass(frozen=True)
class ProxySet:
    parent_id: str
    proxies: tuple[QAExample, ...]
    permutations: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if len(self.proxies) != N_PROXIES or len(self.permutations) != N_PROXIES:
            raise AquaError("a proxy set holds exactly 3 proxies")
        if len(set(self.permutations)) != N_PROXIES:
            raise AquaError("proxy permutations must be pairwise distinct")

    def to_json(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "parent_id": self.parent_id,
            "permutations": [list(p) for p in self.permutations],
            "proxies": [p.to_json() for p in self.proxies],
        }

    @classmethod
    def from_json(cls, d: dict) -> "ProxySet":
        if d.get("version") != SCHEMA_VERSION:
            raise AquaError(f"unsupported proxy schema version {d.get('version')!r}")
        return cls(
            d["parent_id"],
            tuple(QAExample.from_json(p) for p in d["proxies"]),
            tuple(tuple(p) for p in d["permutations"]),
        )


def apply_permutation(example: QAExample, perm: Sequence[int], proxy_id: str) -> QAExample:
    """Proxy whose option ``j`` is the parent's option ``perm[j]``."""
    perm = tuple(perm)
    if sorted(perm) != [0, 1, 2, 3]:
        raise AquaError(f"{perm} is not a permutation of 0..3")
    return replace(
        example,
        id=proxy_id,
        options=tuple(example.options[p] for p in perm),
        correct_index=perm.index(example.correct_index),
    )


def generate_proxies(example: QAExample, seed: int) -> ProxySet:
    """Three option-shuffled copies of ``example`` under distinct permutations.

    Permutations are drawn uniformly without replacement from all 24 orderings
    (the identity included), so the correct content survives in every proxy.
    """
    rng = np.random.default_rng(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
    picks = rng.choice(len(PERMUTATIONS), size=N_PROXIES, replace=False)
    perms = tuple(PERMUTATIONS[i] for i in picks)
    proxies = tuple(apply_permutation(example, p, f"{example.id}#p{t}") for t, p in enumerate(perms))
    return ProxySet(example.id, proxies, perms)


# --- templates -------------------------------------------------------------

_SLOT = re.compile(r"\{(\w+\??)\}")
_SECTIONS = ("option", "demonstration", "prompt")


@dataclass(frozen=True)
class PromptTemplate:
    option: str
    demonstration: str
    prompt: str
    source: str = "<inline>"

    @property
    def requires_demonstration(self) -> bool:
        return "{demonstration}" in self.prompt

    @classmethod
    def parse(cls, text: str, source: str = "<inline>") -> "PromptTemplate":
        sections: dict[str, list[str]] = {}
        current = None
        for line in text.splitlines():
            if line.startswith("#"):
                continue
            m = re.fullmatch(r"\[(\w+)\]\s*", line)
            if m:
                current = m.group(1)
                if current not in _SECTIONS:
                    raise AquaError(f"{source}: unknown template section [{current}]")
                sections[current] = []
            elif current is not None:
                sections[current].append(line)
        missing = [s for s in _SECTIONS if s not in sections]
        if missing:
            raise AquaError(f"{source}: template lacks sections {missing}")
        body = {k: "\n".join(v).strip("\n") for k, v in sections.items()}
        for name in ("stem", "options"):
            if "{" + name + "}" not in body["prompt"]:
                raise AquaError(f"{source}: prompt section lacks {{{name}}}")
        return cls(body["option"], body["demonstration"], body["prompt"], source)

    @classmethod
    def load(cls, path: str | Path) -> "PromptTemplate":
        return cls.parse(Path(path).read_text(), str(path))

    @classmethod
    def default(cls) -> "PromptTemplate":
        text = resources.files("taskneurons.templates").joinpath("default.tmpl").read_text()
        return cls.parse(text, "default.tmpl")


def _fill(text: str, values: dict[str, str], drop_empty_lines: bool) -> str:
    out = []
    for line in text.split("\n"):
        slots = _SLOT.findall(line)
        rendered = _SLOT.sub(lambda m: values[m.group(1)], line)
        if drop_empty_lines and slots and not _SLOT.sub("", line).strip() and not rendered.strip():
            continue
        out.append(rendered)
    return "\n".join(out)


def _check_option_text(text: str, where: str) -> None:
    words = split_words(text)
    if not words:
        raise AquaError(f"{where}: empty option text")
    clash = [w for w in words if w in LETTERS]
    if clash:
        raise AquaError(f"{where}: option text {text!r} contains letter label {clash[0]!r}")


def _options_block(template: PromptTemplate, options: Sequence[str], where: str) -> str:
    lines = []
    for letter, text in zip(LETTERS, options):
        _check_option_text(text, where)
        lines.append(_fill(template.option, {"letter": letter, "text": text}, False))
    return "\n".join(lines)


def compose_prompt_text(example: QAExample, template: PromptTemplate | None = None) -> str:
    template = template or PromptTemplate.default()
    demo_text = ""
    if example.demonstration is not None:
        demo = example.demonstration
        demo_text = _fill(
            template.demonstration,
            {"stem": demo.stem, "options": _options_block(template, demo.options, example.id), "answer": demo.answer},
            False,
        )
    elif template.requires_demonstration:
        raise AquaError(f"{example.id}: template requires a demonstration but the question has none")
    values = {
        "role": example.role,
        "rule": example.rule,
        "stem": example.stem,
        "options": _options_block(template, example.options, example.id),
        "demonstration": demo_text,
        "demonstration?": demo_text,
    }
    unknown = set(_SLOT.findall(template.prompt)) - set(values)
    if unknown:
        raise AquaError(f"{template.source}: unknown prompt slots {sorted(unknown)}")
    return _fill(template.prompt, values, True)


def compose_prompt(
    example: QAExample, tokenizer: Tokenizer, template: PromptTemplate | None = None
) -> list[int]:
    """Token ids of the templated prompt, prefixed with ``<bos>``.

    The sequence ends at the position whose next token must be the answer letter.
    """
    text = compose_prompt_text(example, template)
    ids = tokenizer.encode(text, bos=True)
    letters = set(tokenizer.letter_ids)
    # every option line contributes exactly one label token
    expected = 4 + (4 if example.demonstration is not None else 0)
    if sum(1 for i in ids if i in letters) < expected:
        raise AquaError(f"{example.id}: letter labels were lost in tokenization")
    return ids


# --- interchange files -----------------------------------------------------


def write_examples(path: str | Path, examples: Iterable[QAExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json(), sort_keys=True, ensure_ascii=False) + "\n")


def read_examples(path: str | Path) -> list[QAExample]:
    with open(path, encoding="utf-8") as fh:
        return [QAExample.from_json(json.loads(line)) for line in fh if line.strip()]


def write_proxy_sets(path: str | Path, sets: Iterable[ProxySet]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ps in sets:
            fh.write(json.dumps(ps.to_json(), sort_keys=True, ensure_ascii=False) + "\n")


def read_proxy_sets(path: str | Path) -> list[ProxySet]:
    with open(path, encoding="utf-8") as fh:
        return [ProxySet.from_json(json.loads(line)) for line in fh if line.strip()]


def proxy_seed(run_seed: int, example_id: str) -> int:
    """Stable 64-bit per-example seed derived from the run seed."""
    h = hashlib.sha256(f"{int(run_seed)}:{example_id}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def expand(examples: Iterable[QAExample], run_seed: int) -> list[ProxySet]:
    return [generate_proxies(ex, proxy_seed(run_seed, ex.id)) for ex in examples]
