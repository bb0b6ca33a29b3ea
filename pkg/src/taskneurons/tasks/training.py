"""Train a small model on synthetic multiple-choice tasks.

Optimisation is stock AdamW with linear warmup and cosine decay. Each step
draws a batch of training questions, shuffles each one's options with a fresh
random permutation (so the model cannot learn a slot prior) and applies
next-token cross-entropy on the answer letter, or on every prompt token with
``loss='all'``.

Runs are reproducible for a fixed seed when torch is limited to one thread,
which ``train`` does unless ``parallel=True``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..aqua import PERMUTATIONS, PromptTemplate, ProxySet, QAExample, apply_permutation, compose_prompt
from ..engine import ModelConfig, Transformer, build_model
from ..errors import TrainingDivergence
from ..evaluation import evaluate
from ..tokenizer import Tokenizer

GATE_COM = 0.6


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 0.01
    warmup: int = 100
    grad_clip: float = 1.0
    loss: str = "all"  # or "answer"
    seed: int = 0
    eval_every: int = 250
    parallel: bool = False

    def __post_init__(self):
        if self.loss not in ("answer", "all"):
            raise ValueError("loss must be 'answer' or 'all'")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


@dataclass
class TrainResult:
    model: Transformer
    curve: list[dict] = field(default_factory=list)

    def write_curve(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "lr", "loss", "eval_acc"], delimiter="\t",
                               lineterminator="\n")
            w.writeheader()
            for row in self.curve:
                w.writerow({k: row.get(k, "") for k in w.fieldnames})


class _PromptCache:
    """Token ids for (example, permutation) pairs, composed on first use."""

    def __init__(self, examples, tokenizer, template):
        self.examples, self.tokenizer, self.template = examples, tokenizer, template
        self._cache: dict[tuple[int, int], tuple[list[int], int]] = {}

    def get(self, i: int, p: int) -> tuple[list[int], int]:
        key = (i, p)
        if key not in self._cache:
            ex = apply_permutation(self.examples[i], PERMUTATIONS[p], self.examples[i].id)
            ids = compose_prompt(ex, self.tokenizer, self.template)
            self._cache[key] = (ids, self.tokenizer.letter_ids[ex.correct_index])
        return self._cache[key]


def _lr_at(step: int, s: TrainSettings) -> float:
    if step < s.warmup:
        return s.lr * (step + 1) / s.warmup
    span = max(1, s.steps - s.warmup)
    return s.lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, (step - s.warmup) / span)))


def _batch(cache: _PromptCache, picks, perms, pad_id: int):
    seqs = [cache.get(int(i), int(p)) for i, p in zip(picks, perms)]
    T = max(len(ids) + 1 for ids, _ in seqs)
    x = torch.full((len(seqs), T), pad_id, dtype=torch.long)
    last = torch.empty(len(seqs), dtype=torch.long)
    for r, (ids, ans) in enumerate(seqs):
        x[r, : len(ids)] = torch.as_tensor(ids)
        x[r, len(ids)] = ans
        last[r] = len(ids) - 1
    return x, last


def sequence_loss(model: Transformer, x: torch.Tensor, last: torch.Tensor, kind: str, pad_id: int) -> torch.Tensor:
    """Cross-entropy of the answer letter, optionally plus every earlier next token."""
    logits = model(x[:, :-1] if x.shape[1] > 1 else x)
    rows = torch.arange(x.shape[0])
    answer = F.cross_entropy(logits[rows, last].float(), x[rows, last + 1])
    if kind == "answer":
        return answer
    tgt = x[:, 1:].clone()
    tgt[tgt == pad_id] = -100
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]).float(), tgt.reshape(-1), ignore_index=-100)


def train(
    cfg: ModelConfig,
    tokenizer: Tokenizer,
    train_examples: Sequence[QAExample],
    settings: TrainSettings = TrainSettings(),
    eval_sets: Sequence[ProxySet] | None = None,
    template: PromptTemplate | None = None,
    init: Transformer | None = None,
) -> TrainResult:
    if not train_examples:
        raise ValueError("no training data")
    if not settings.parallel:
        torch.set_num_threads(1)
    torch.manual_seed(settings.seed)
    rng = np.random.default_rng(settings.seed)
    model = init if init is not None else build_model(cfg, seed=settings.seed)
    template = template or PromptTemplate.default()
    cache = _PromptCache(list(train_examples), tokenizer, template)
    opt = torch.optim.AdamW(model.parameters(), lr=settings.lr, weight_decay=settings.weight_decay)
    curve = []
    model.train()
    for step in range(settings.steps):
        lr = _lr_at(step, settings)
        for g in opt.param_groups:
            g["lr"] = lr
        picks = rng.integers(0, len(train_examples), settings.batch_size)
        perms = rng.integers(0, len(PERMUTATIONS), settings.batch_size)
        x, last = _batch(cache, picks, perms, tokenizer.pad_id)
        loss = sequence_loss(model, x, last, settings.loss, tokenizer.pad_id)
        if not torch.isfinite(loss):
            raise TrainingDivergence(step, loss.item())
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if settings.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), settings.grad_clip)
        opt.step()
        row = {"step": step, "lr": f"{lr:.6g}", "loss": f"{loss.item():.6f}"}
        last_step = step == settings.steps - 1
        if eval_sets and settings.eval_every and ((step + 1) % settings.eval_every == 0 or last_step):
            model.eval()
            row["eval_acc"] = f"{evaluate(model, tokenizer, eval_sets, template=template).acc:.4f}"
            model.train()
        curve.append(row)
    model.eval()
    return TrainResult(model, curve)


@torch.no_grad()
def mean_loss(model: Transformer, tokenizer: Tokenizer, examples: Sequence[QAExample],
              template: PromptTemplate | None = None, kind: str = "answer") -> float:
    """Average loss over every example in its original option order."""
    cache = _PromptCache(list(examples), tokenizer, template or PromptTemplate.default())
    total, n = 0.0, 0
    for s in range(0, len(examples), 64):
        idx = list(range(s, min(len(examples), s + 64)))
        x, last = _batch(cache, idx, [0] * len(idx), tokenizer.pad_id)
        total += float(sequence_loss(model, x, last, kind, tokenizer.pad_id)) * len(idx)
        n += len(idx)
    return total / n


def passes_gate(com: float) -> bool:
    return com >= GATE_COM


def select_eval_split(
    model: Transformer,
    tokenizer: Tokenizer,
    proxy_sets: Sequence[ProxySet],
    n_comprehended: int = 50,
    n_missed: int = 50,
    template: PromptTemplate | None = None,
) -> tuple[list[ProxySet], dict]:
    """First ``n_comprehended`` examples the model comprehends plus the first
    ``n_missed`` it does not, in their original order.

    Returns the selection and counts; a side with too few candidates is
    filled as far as possible and the gap reported.
    """
    ev = evaluate(model, tokenizer, proxy_sets, template=template)
    verdict = {pid: sum(v) >= 2 for pid, v in ev.by_parent().items()}
    yes = [ps for ps in proxy_sets if verdict[ps.parent_id]][:n_comprehended]
    no = [ps for ps in proxy_sets if not verdict[ps.parent_id]][:n_missed]
    chosen = {ps.parent_id for ps in yes + no}
    picked = [ps for ps in proxy_sets if ps.parent_id in chosen]
    info = {"comprehended": len(yes), "missed": len(no),
            "short_comprehended": n_comprehended - len(yes), "short_missed": n_missed - len(no)}
    return picked, info
