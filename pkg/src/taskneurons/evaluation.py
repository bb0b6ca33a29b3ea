"""Accuracy/comprehension before and after interventions, and the analyses built on them."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .aqua import PromptTemplate, ProxySet, compose_prompt
from .engine import OverrideMap, Transformer, forward_batch
from .intervention import InterventionPlan, ratio_sweep
from .neurons import NeuronId, NeuronSets
from .tokenizer import LETTERS, Tokenizer

STATUSES = ("success", "fail", "no_change", "undefined")


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(frozen=True)
class Answer:
    slot: int
    probs: tuple[float, float, float, float]  # 4-way softmax over the letters
    vocab_probs: tuple[float, float, float, float]  # letter probabilities under the full softmax


def answers(
    model: Transformer,
    prompts: Sequence[Sequence[int]],
    letter_ids: Sequence[int],
    overrides: OverrideMap | None = None,
) -> list[Answer]:
    """Constrained choice among the four letters; ties go to the lowest slot."""
    logits = forward_batch(model, prompts, overrides).astype(np.float64)
    letters = logits[:, list(letter_ids)]
    four = _softmax(letters)
    full = _softmax(logits)[:, list(letter_ids)]
    return [
        Answer(int(np.argmax(row)), tuple(map(float, p)), tuple(map(float, v)))
        for row, p, v in zip(letters, four, full)
    ]


def answer(model, prompt, letter_ids, overrides=None) -> Answer:
    return answers(model, [prompt], letter_ids, overrides)[0]


@dataclass(frozen=True)
class QuestionRecord:
    id: str
    parent_id: str
    chosen: str
    correct: str
    probs: tuple[float, ...]
    vocab_probs: tuple[float, ...]

    @property
    def right(self) -> bool:
        return self.chosen == self.correct


def accuracy(correct: Sequence[bool]) -> float:
    if not len(correct):
        raise ValueError("accuracy of an empty set")
    return float(np.mean(np.asarray(correct, dtype=bool)))


def comprehends(proxy_correct: Sequence[bool]) -> bool:
    """At least two of the three proxies answered correctly."""
    return sum(bool(c) for c in proxy_correct) >= 2


def comprehension(per_example: Sequence[Sequence[bool]]) -> float:
    if not len(per_example):
        raise ValueError("comprehension of an empty set")
    return float(np.mean([comprehends(c) for c in per_example]))


@dataclass
class Evaluation:
    records: list[QuestionRecord]

    def by_parent(self) -> dict[str, list[bool]]:
        out: dict[str, list[bool]] = {}
        for r in self.records:
            out.setdefault(r.parent_id, []).append(r.right)
        return out

    @property
    def acc(self) -> float:
        return accuracy([r.right for r in self.records])

    @property
    def com(self) -> float:
        return comprehension(list(self.by_parent().values()))


def evaluate(
    model: Transformer,
    tokenizer: Tokenizer,
    proxy_sets: Sequence[ProxySet],
    overrides: OverrideMap | None = None,
    template: PromptTemplate | None = None,
    prompts: Sequence[Sequence[int]] | None = None,
) -> Evaluation:
    """Answer every proxy of every example. ``prompts`` may be passed to skip composition."""
    proxies = [(ps.parent_id, p) for ps in proxy_sets for p in ps.proxies]
    if not proxies:
        raise ValueError("nothing to evaluate")
    if prompts is None:
        prompts = [compose_prompt(p, tokenizer, template) for _, p in proxies]
    got = answers(model, prompts, tokenizer.letter_ids, overrides)
    return Evaluation([
        QuestionRecord(p.id, parent, LETTERS[a.slot], p.correct_letter, a.probs, a.vocab_probs)
        for (parent, p), a in zip(proxies, got)
    ])


# --- relative change metrics ----------------------------------------------


def metric_change(original: float, intervened: float, direction: str) -> dict:
    """Relative change of one metric with its success/fail status.

    ``relative`` is |delta| / original * 100 and ``signed`` keeps the sign;
    both are None when ``original`` is 0, and the status is ``undefined``.
    ``fail`` is true whenever the metric moved against ``direction``.
    """
    delta = intervened - original
    want = 1 if direction == "enhance" else -1
    fail = bool(delta * want < 0)
    if original == 0:
        rel = signed = None
        status = "undefined"
    else:
        rel = abs(delta) / original * 100.0
        signed = delta / original * 100.0
        status = "no_change" if delta == 0 else ("fail" if fail else "success")
    return {"original": original, "intervened": intervened, "relative": rel, "signed": signed,
            "status": status, "fail": fail}


def rac_rcc(before: tuple[float, float], after: tuple[float, float], direction: str) -> dict:
    """``before``/``after`` are (acc, com) pairs."""
    acc = metric_change(before[0], after[0], direction)
    com = metric_change(before[1], after[1], direction)
    return {"rac": acc["relative"], "rcc": com["relative"], "acc": acc, "com": com}


@dataclass
class EvalReport:
    task: str
    plan: dict
    acc_original: float
    acc_intervened: float
    com_original: float
    com_intervened: float
    rac: float | None
    rcc: float | None
    signed_acc_delta: float | None
    signed_com_delta: float | None
    status: dict
    fail: dict
    records_original: list[QuestionRecord] = field(repr=False, default_factory=list)
    records_intervened: list[QuestionRecord] = field(repr=False, default_factory=list)

    def to_json(self, with_records: bool = True) -> dict:
        d = asdict(self)
        if not with_records:
            d.pop("records_original")
            d.pop("records_intervened")
        return d


def compare(task: str, plan: InterventionPlan, before: Evaluation, after: Evaluation) -> EvalReport:
    m = rac_rcc((before.acc, before.com), (after.acc, after.com), plan.direction)
    return EvalReport(
        task,
        plan.summary(),
        before.acc,
        after.acc,
        before.com,
        after.com,
        m["rac"],
        m["rcc"],
        m["acc"]["signed"],
        m["com"]["signed"],
        {"acc": m["acc"]["status"], "com": m["com"]["status"]},
        {"acc": m["acc"]["fail"], "com": m["com"]["fail"]},
        before.records,
        after.records,
    )


def evaluate_plan(model, tokenizer, proxy_sets, plan, task="", template=None, baseline=None, prompts=None):
    if prompts is None:
        prompts = [compose_prompt(p, tokenizer, template) for ps in proxy_sets for p in ps.proxies]
    before = baseline or evaluate(model, tokenizer, proxy_sets, None, template, prompts)
    after = evaluate(model, tokenizer, proxy_sets, plan.override_map, template, prompts)
    return compare(task, plan, before, after)


# --- sweeps -----------------------------------------------------------------


def _ok(status: str) -> bool:
    return status in ("success", "no_change")


def _best(rows: list[EvalReport], key, eligible) -> int | None:
    best = None
    for i, r in enumerate(rows):
        if not eligible(r) or key(r) is None:
            continue
        if best is None or key(r) > key(rows[best]):
            best = i
    return best


def summarize_sweep(reports: Sequence[EvalReport]) -> dict:
    """Best rows under three conventions, as indices into ``reports``.

    ``by_rac``: largest RAC whose accuracy did not fail. ``by_rcc``: same for
    RCC and comprehension. ``joint``: largest RAC among rows where neither
    metric failed, ties broken by RCC. Earlier rows win exact ties.
    """
    reports = list(reports)
    by_rac = _best(reports, lambda r: r.rac, lambda r: _ok(r.status["acc"]))
    by_rcc = _best(reports, lambda r: r.rcc, lambda r: _ok(r.status["com"]))
    joint = _best(
        reports,
        lambda r: None if r.rac is None else (r.rac, r.rcc if r.rcc is not None else -1.0),
        lambda r: _ok(r.status["acc"]) and _ok(r.status["com"]),
    )
    return {"by_rac": by_rac, "by_rcc": by_rcc, "joint": joint}


@dataclass
class SweepReport:
    task: str
    direction: str
    reports: list[EvalReport]
    best: dict

    def row(self, key: str) -> EvalReport | None:
        i = self.best.get(key)
        return None if i is None else self.reports[i]

    def table(self) -> list[dict]:
        return [
            {
                "ratio": r.plan["ratio"],
                "n_good": r.plan["n_good"],
                "n_bad": r.plan["n_bad"],
                "acc_original": r.acc_original,
                "acc_intervened": r.acc_intervened,
                "com_original": r.com_original,
                "com_intervened": r.com_intervened,
                "rac": r.rac,
                "rcc": r.rcc,
                "acc_status": r.status["acc"],
                "com_status": r.status["com"],
            }
            for r in self.reports
        ]

    def to_json(self, with_records: bool = False) -> dict:
        return {
            "task": self.task,
            "direction": self.direction,
            "best": self.best,
            "table": self.table(),
            "reports": [r.to_json(with_records) for r in self.reports] if with_records else [],
        }


def sweep_report(model, tokenizer, proxy_sets, plans: Sequence[InterventionPlan], task="", template=None) -> SweepReport:
    if not plans:
        raise ValueError("empty sweep")
    directions = {p.direction for p in plans}
    if len(directions) != 1:
        raise ValueError("a sweep holds plans of one direction")
    prompts = [compose_prompt(p, tokenizer, template) for ps in proxy_sets for p in ps.proxies]
    before = evaluate(model, tokenizer, proxy_sets, None, template, prompts)
    reports = [evaluate_plan(model, tokenizer, proxy_sets, p, task, template, before, prompts) for p in plans]
    return SweepReport(task, directions.pop(), reports, summarize_sweep(reports))


# --- neuron-set analyses ------------------------------------------------------


def common_neurons(sets_by_task: Mapping[str, NeuronSets]) -> tuple[set[NeuronId], set[NeuronId]]:
    """Neurons in the good (bad) lists of at least two tasks."""
    def shared(lists):
        seen: dict[NeuronId, int] = {}
        for ids in lists:
            for n in set(ids):
                seen[n] = seen.get(n, 0) + 1
        return {n for n, c in seen.items() if c >= 2}

    return (shared(s.good_ids for s in sets_by_task.values()),
            shared(s.bad_ids for s in sets_by_task.values()))


def task_specific(sets: NeuronSets, common_good: set, common_bad: set) -> NeuronSets:
    return NeuronSets(
        [(n, s) for n, s in sets.good if n not in common_good],
        [(n, s) for n, s in sets.bad if n not in common_bad],
        sets.ambiguous, sets.z, sets.K, dict(sets.shortfall),
    )


@dataclass
class CrossTaskMatrix:
    tasks: list[str]
    cells: dict  # (eval_task, source_task) -> {"rac": .., "rcc": ..}

    def to_json(self) -> dict:
        return {
            "tasks": self.tasks,
            "rows_are": "evaluation task",
            "cols_are": "neuron source task",
            "rac": [[self.cells[(e, s)]["rac"] for s in self.tasks] for e in self.tasks],
            "rcc": [[self.cells[(e, s)]["rcc"] for s in self.tasks] for e in self.tasks],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["eval_task\\source_task"] + self.tasks)
        for e in self.tasks:
            w.writerow([e] + [_pair(self.cells[(e, s)]) for s in self.tasks])
        return buf.getvalue()


def _fmt(x) -> str:
    return "undefined" if x is None else f"{x:.2f}"


def _pair(cell) -> str:
    return f"{_fmt(cell['rac'])}/{_fmt(cell['rcc'])}"


def cross_task(
    model: Transformer,
    tokenizer: Tokenizer,
    sets_by_task: Mapping[str, NeuronSets],
    proxies_by_task: Mapping[str, Sequence[ProxySet]],
    direction: str = "degrade",
    budget: int = 100,
    step: float = 0.1,
    template: PromptTemplate | None = None,
) -> CrossTaskMatrix:
    """Steer task ``e`` with task ``s``'s own neurons (shared neurons removed).

    Each cell is the best (joint convention) over a ratio sweep.
    """
    tasks = list(sets_by_task)
    if set(tasks) != set(proxies_by_task):
        raise ValueError("neuron sets and evaluation data must cover the same tasks")
    cg, cb = common_neurons(sets_by_task)
    own = {t: task_specific(s, cg, cb) for t, s in sets_by_task.items()}
    cells = {}
    for s in tasks:
        if not own[s].good and not own[s].bad:
            for e in tasks:
                cells[(e, s)] = {"rac": None, "rcc": None}
            continue
        plans = ratio_sweep(own[s], direction, budget, step)
        for e in tasks:
            sw = sweep_report(model, tokenizer, proxies_by_task[e], plans, e, template)
            best = sw.row("joint")
            cells[(e, s)] = {"rac": best.rac if best else None, "rcc": best.rcc if best else None}
    return CrossTaskMatrix(tasks, cells)


def layer_histogram(sets: NeuronSets, n_layers: int) -> dict[str, list[int]]:
    good = [0] * n_layers
    bad = [0] * n_layers
    for n in sets.good_ids:
        good[n.layer] += 1
    for n in sets.bad_ids:
        bad[n.layer] += 1
    return {"good": good, "bad": bad}


# --- collateral effects ---------------------------------------------------------


@dataclass
class CollateralReport:
    x: int
    y: int
    z: int
    n_questions: int
    mean_correct_change: float
    mean_wrong_change: float
    per_question: list[dict]

    def to_json(self) -> dict:
        return asdict(self)


def collateral_counts(before: np.ndarray, after: np.ndarray, correct: Sequence[int], direction: str) -> CollateralReport:
    """Count questions whose wrong options moved along with the correct one.

    ``before``/``after`` are ``(n, 4)`` option probabilities. z = questions
    whose correct option moved in the intended direction; y = those among z
    where at least one wrong option moved the same way; x = those among z
    where all three did. Relative changes are (after - before) / before.
    """
    before = np.asarray(before, dtype=np.float64)
    after = np.asarray(after, dtype=np.float64)
    sign = 1.0 if direction == "enhance" else -1.0
    rel = (after - before) / before
    x = y = z = 0
    per_q, corr_changes, wrong_changes = [], [], []
    for i, c in enumerate(correct):
        wrong = [s for s in range(4) if s != c]
        moved = rel[i, c] * sign > 0
        same = [rel[i, s] * sign > 0 for s in wrong]
        if moved:
            z += 1
            y += any(same)
            x += all(same)
        corr_changes.append(rel[i, c])
        wrong_changes.append(rel[i, wrong].mean())
        per_q.append({"correct_change": float(rel[i, c]), "wrong_changes": [float(rel[i, s]) for s in wrong]})
    return CollateralReport(
        x, y, z, len(per_q), float(np.mean(corr_changes)), float(np.mean(wrong_changes)), per_q
    )


def collateral_report(model, tokenizer, plan: InterventionPlan, proxy_sets, template=None) -> CollateralReport:
    """Collateral counts from full-vocabulary letter probabilities.

    Under a 4-way softmax the four probabilities always sum to one, so the
    correct option rising forces some wrong option down; full-vocabulary
    probabilities let all four move together.
    """
    before = evaluate(model, tokenizer, proxy_sets, None, template)
    after = evaluate(model, tokenizer, proxy_sets, plan.override_map, template)
    correct = [LETTERS.index(r.correct) for r in before.records]
    return collateral_counts(
        np.array([r.vocab_probs for r in before.records]),
        np.array([r.vocab_probs for r in after.records]),
        correct,
        plan.direction,
    )


# --- exports ------------------------------------------------------------------


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def sweep_csv(sweeps: Sequence[SweepReport]) -> str:
    """One line per (task, direction): RAC/RCC under each best-of-sweep convention."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "direction", "convention", "ratio", "rac", "rcc", "acc_status", "com_status"])
    for sw in sweeps:
        for conv in ("by_rac", "by_rcc", "joint"):
            r = sw.row(conv)
            if r is None:
                w.writerow([sw.task, sw.direction, conv, "", "undefined", "undefined", "", ""])
            else:
                w.writerow([sw.task, sw.direction, conv, r.plan["ratio"], _fmt(r.rac), _fmt(r.rcc),
                            r.status["acc"], r.status["com"]])
    return buf.getvalue()


def histogram_csv(hist: Mapping[str, Sequence[int]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "good", "bad"])
    for l, (g, b) in enumerate(zip(hist["good"], hist["bad"])):
        w.writerow([l, g, b])
    return buf.getvalue()
