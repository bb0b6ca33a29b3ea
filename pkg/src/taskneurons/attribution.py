"""Per-neuron attribution: integrated gradients, proxy-summed scores, task aggregation.

Pipeline for one task::

    proxies of example j --ig_scores--> 3 maps --sum--> es_j
    es_1 .. es_tr --ace_aggregate--> good / bad neuron lists

Baseline scorers (count aggregation, activation magnitude, random) plug into
the same pipeline through ``score_task``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .aqua import PromptTemplate, ProxySet, QAExample, compose_prompt
from .engine import Transformer, capture_batch, capture_activations, tap_gradients, validate_tokens
from .errors import EngineInputError, IntegrityError, NumericError
from .neurons import NeuronId, NeuronScoreMap, NeuronSets, bottom_order, top_order
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)

TARGET_KINDS = ("contrastive_ce", "correct_log_prob", "tn_margin", "activation_only", "random")
SCORERS = ("ace", "tn", "qrnca", "kn", "act", "random")
MODES = ("enabled", "legacy")
SET_FILE_VERSION = 1


@dataclass(frozen=True)
class TargetFn:
    """Scalar function of the final-position logits that attribution explains.

    ``contrastive_ce``    4-way softmax probability of the correct letter.
    ``correct_log_prob``  full-vocabulary log-probability of the correct letter.
    ``tn_margin``         P(correct) minus the mean P(wrong), full vocabulary.

    ``activation_only`` and ``random`` name baseline scorers that need no
    gradient; calling them is an error.
    """

    kind: str
    option_token_ids: tuple[int, int, int, int]
    correct_slot: int

    def __post_init__(self):
        object.__setattr__(self, "option_token_ids", tuple(int(i) for i in self.option_token_ids))
        if self.kind not in TARGET_KINDS:
            raise ValueError(f"unknown target kind {self.kind!r}")
        if len(self.option_token_ids) != 4 or len(set(self.option_token_ids)) != 4:
            raise ValueError("need 4 distinct option token ids")
        if not 0 <= self.correct_slot < 4:
            raise ValueError(f"correct slot {self.correct_slot} out of range")

    @property
    def differentiable(self) -> bool:
        return self.kind in ("contrastive_ce", "correct_log_prob", "tn_margin")

    def __call__(self, logits: torch.Tensor) -> torch.Tensor:
        """``logits`` is ``(B, vocab)``; returns ``(B,)``."""
        ids = list(self.option_token_ids)
        c = self.correct_slot
        if self.kind == "contrastive_ce":
            opt = logits[:, ids]
            opt = opt - opt.max(dim=-1, keepdim=True).values
            e = opt.exp()
            return e[:, c] / e.sum(dim=-1)
        if self.kind == "correct_log_prob":
            return torch.log_softmax(logits, dim=-1)[:, ids[c]]
        if self.kind == "tn_margin":
            p = torch.softmax(logits, dim=-1)[:, ids]
            wrong = [s for s in range(4) if s != c]
            return p[:, c] - p[:, wrong].mean(dim=-1)
        raise ValueError(f"target kind {self.kind!r} has no gradient")

    def with_slot(self, slot: int) -> "TargetFn":
        return TargetFn(self.kind, self.option_token_ids, slot)


def target_value(logits, target: TargetFn) -> float:
    t = torch.as_tensor(np.asarray(logits), dtype=torch.float64)
    if t.ndim != 1:
        raise ValueError("expected a single logits vector")
    if not torch.isfinite(t).all():
        raise NumericError("non-finite logits")
    return float(target(t[None])[0])


def contrastive_cross_entropy(option_logits, correct_slot: int) -> float:
    """Cross-entropy of the correct slot under a 4-way softmax; exp(-CE) is the target."""
    z = np.asarray(option_logits, dtype=np.float64)
    zmax = z.max()
    return float(zmax + math.log(np.exp(z - zmax).sum()) - z[correct_slot])


def summed_log_prob(model: Transformer, prompt: Sequence[int], answer: Sequence[int]) -> float:
    """Sum of teacher-forced log-probabilities of a multi-token answer.

    Reference form of the general-answer target; attribution itself uses the
    single-letter specialisation ``correct_log_prob``.
    """
    seq = list(prompt) + list(answer)
    validate_tokens(model.cfg, seq)
    with torch.no_grad():
        logits = model(torch.as_tensor([seq]))[0].to(torch.float64)
    lp = torch.log_softmax(logits, dim=-1)
    start = len(prompt) - 1
    return float(sum(lp[start + i, tok] for i, tok in enumerate(answer)))


# --- integrated gradients -------------------------------------------------


def _path_rows(clean: torch.Tensor, m: int):
    """Patch batch for joint per-layer scaling: row (l, k) scales layer l by k/m."""
    L, f = clean.shape
    alphas = torch.arange(1, m + 1, dtype=clean.dtype) / m
    values = clean[None, None].repeat(L, m, 1, 1)  # (L, m, L, f)
    mask = torch.zeros(L, m, L, dtype=torch.bool)
    for l in range(L):
        values[l, :, l] = alphas[:, None] * clean[l]
        mask[l, :, l] = True
    return values.reshape(L * m, L, f), mask.reshape(L * m, L)


def ig_scores(
    model: Transformer, prompt: Sequence[int], target: TargetFn, m: int = 16, batch_size: int = 64
) -> NeuronScoreMap:
    """Integrated gradients of ``target`` for every FFN neuron at the answer position.

    Each layer is scaled jointly by k/m (k = 1..m) while the other layers run
    untouched; the mean gradient is multiplied by the clean activation.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    cfg = model.cfg
    snap = capture_activations(model, prompt)
    clean = torch.as_tensor(snap.values, dtype=cfg.dtype)
    values, mask = _path_rows(clean, m)
    grads, _ = tap_gradients(model, prompt, target, values, mask, snap.position, batch_size)
    grads = grads.reshape(cfg.n_layers, m, cfg.n_layers, cfg.d_ffn)
    own = np.stack([grads[l, :, l].astype(np.float64).mean(axis=0) for l in range(cfg.n_layers)])
    return NeuronScoreMap(own * snap.values.astype(np.float64), {"m": m, "target": target.kind})


def ig_scores_per_neuron(model: Transformer, prompt: Sequence[int], target: TargetFn, m: int = 16) -> NeuronScoreMap:
    """Cross-check mode: every neuron gets its own path, all others stay clean.

    Costs m passes per neuron, so it is refused above 64 neurons.
    """
    cfg = model.cfg
    if cfg.total_neurons > 64:
        raise EngineInputError("per-neuron IG is limited to models with at most 64 neurons")
    snap = capture_activations(model, prompt)
    clean = torch.as_tensor(snap.values, dtype=cfg.dtype)
    N = cfg.total_neurons
    alphas = torch.arange(1, m + 1, dtype=cfg.dtype) / m
    values = clean[None, None].repeat(N, m, 1, 1)
    mask = torch.zeros(N, m, cfg.n_layers, dtype=torch.bool)
    for n in range(N):
        l, i = divmod(n, cfg.d_ffn)
        values[n, :, l, i] = alphas * clean[l, i]
        mask[n, :, l] = True
    grads, _ = tap_gradients(model, prompt, target, values.reshape(N * m, cfg.n_layers, cfg.d_ffn),
                             mask.reshape(N * m, cfg.n_layers), snap.position)
    grads = grads.reshape(N, m, cfg.n_layers, cfg.d_ffn)
    out = np.zeros((cfg.n_layers, cfg.d_ffn))
    for n in range(N):
        l, i = divmod(n, cfg.d_ffn)
        out[l, i] = grads[n, :, l, i].astype(np.float64).mean() * float(snap.values[l, i])
    return NeuronScoreMap(out, {"m": m, "target": target.kind, "path": "per_neuron"})


def layer_endpoints(model: Transformer, prompt: Sequence[int], target: TargetFn) -> np.ndarray:
    """F with each layer's answer-position vector at full scale and at zero, ``(L, 2)``."""
    cfg = model.cfg
    snap = capture_activations(model, prompt)
    clean = torch.as_tensor(snap.values, dtype=cfg.dtype)
    L = cfg.n_layers
    values = clean[None].repeat(2 * L, 1, 1)
    mask = torch.zeros(2 * L, L, dtype=torch.bool)
    for l in range(L):
        values[2 * l + 1, l] = 0
        mask[2 * l : 2 * l + 2, l] = True
    _, f = tap_gradients(model, prompt, target, values, mask, snap.position)
    return f.astype(np.float64).reshape(L, 2)


# --- proxy-level and task-level scores ------------------------------------


def option_ids(tokenizer: Tokenizer) -> tuple[int, int, int, int]:
    return tuple(tokenizer.letter_ids)


def es_from_prompts(
    model: Transformer, prompts: Sequence[Sequence[int]], targets: Sequence[TargetFn], m: int = 16
) -> NeuronScoreMap:
    """Elementwise sum of IG maps over already-composed prompts.

    ``es_score`` feeds it the three proxies of one example; tests may hand it
    anything, including the same prompt three times.
    """
    total = None
    for prompt, target in zip(prompts, targets, strict=True):
        ig = ig_scores(model, prompt, target, m)
        total = ig if total is None else total + ig
    total.meta.update({"m": m, "target": targets[0].kind, "n_prompts": len(prompts)})
    return total


def es_score(
    model: Transformer,
    proxy_set: ProxySet,
    kind: str,
    tokenizer: Tokenizer,
    m: int = 16,
    template: PromptTemplate | None = None,
) -> NeuronScoreMap:
    ids = option_ids(tokenizer)
    prompts = [compose_prompt(p, tokenizer, template) for p in proxy_set.proxies]
    targets = [TargetFn(kind, ids, p.correct_index) for p in proxy_set.proxies]
    es = es_from_prompts(model, prompts, targets, m)
    es.meta["sources"] = [p.id for p in proxy_set.proxies]
    return es


def _stack(es_maps: Sequence[NeuronScoreMap]) -> np.ndarray:
    if not es_maps:
        raise ValueError("need at least one score map")
    shape = es_maps[0].scores.shape
    if any(e.scores.shape != shape for e in es_maps):
        raise ValueError("score maps have different shapes")
    return np.stack([e.flat() for e in es_maps])


def _check_zk(z: int, K: int, total: int) -> None:
    if not 1 <= z <= total:
        raise ValueError(f"z={z} must lie in [1, {total}]")
    if not 1 <= K <= z:
        raise ValueError(f"K={K} must lie in [1, z={z}]")


def _membership(S: np.ndarray, z: int) -> tuple[np.ndarray, np.ndarray]:
    tr, N = S.shape
    in_top = np.zeros((tr, N), dtype=bool)
    in_bottom = np.zeros((tr, N), dtype=bool)
    for j in range(tr):
        in_top[j, top_order(S[j])[:z]] = True
        in_bottom[j, bottom_order(S[j])[:z]] = True
    return in_top, in_bottom


def _pick(order: np.ndarray, score: np.ndarray, keep: np.ndarray, K: int, d_ffn: int):
    chosen = [int(i) for i in order if keep[i]][:K]
    return [(NeuronId.from_flat(i, d_ffn), float(score[i])) for i in chosen]


def ace_aggregate(es_maps: Sequence[NeuronScoreMap], z: int, K: int) -> NeuronSets:
    """Task-level good/bad lists from per-example scores.

    A neuron scores the sum of its per-example scores over the examples where
    it ranks in the top or bottom ``z``. Neurons that land in some example's
    top ``z`` and some (other) example's bottom ``z`` are ambiguous and score 0.
    Good takes up to ``K`` positive scores, bad up to ``K`` negative ones.
    """
    S = _stack(es_maps)
    d_ffn = es_maps[0].d_ffn
    _check_zk(z, K, S.shape[1])
    in_top, in_bottom = _membership(S, z)
    ambiguous = in_top.any(axis=0) & in_bottom.any(axis=0)
    ace = np.where(in_top | in_bottom, S, 0.0).sum(axis=0)
    ace[ambiguous] = 0.0
    good = _pick(top_order(ace), ace, ace > 0, K, d_ffn)
    bad = _pick(bottom_order(ace), ace, ace < 0, K, d_ffn)
    sets = NeuronSets(
        good,
        bad,
        frozenset(NeuronId.from_flat(i, d_ffn) for i in np.flatnonzero(ambiguous)),
        z,
        K,
        {"good": K - len(good), "bad": K - len(bad)},
    )
    _warn_short(sets)
    return sets


def kn_count_aggregate(es_maps: Sequence[NeuronScoreMap], z: int, K: int) -> NeuronSets:
    """Good-only selection by how many examples rank a neuron in their top ``z``.

    Ties on the count go to the higher summed score, then to the lower (layer, index).
    """
    S = _stack(es_maps)
    d_ffn = es_maps[0].d_ffn
    _check_zk(z, K, S.shape[1])
    in_top, _ = _membership(S, z)
    count = in_top.sum(axis=0)
    summed = S.sum(axis=0)
    order = np.lexsort((np.arange(S.shape[1]), -summed, -count))
    chosen = [int(i) for i in order if count[i] > 0][:K]
    good = [(NeuronId.from_flat(i, d_ffn), float(count[i])) for i in chosen]
    sets = NeuronSets(good, [], frozenset(), z, K, {"good": K - len(good), "bad": 0})
    _warn_short(sets, check_bad=False)
    return sets


def _warn_short(sets: NeuronSets, check_bad: bool = True) -> None:
    for name in ("good", "bad") if check_bad else ("good",):
        if sets.shortfall.get(name):
            log.warning("%s set short by %d of K=%d: too few neurons with the required sign",
                        name, sets.shortfall[name], sets.K)


def act_scores(model: Transformer, prompts: Sequence[Sequence[int]]) -> NeuronScoreMap:
    """Mean absolute activation at the answer position over ``prompts``."""
    if not prompts:
        raise ValueError("need at least one prompt")
    acts = capture_batch(model, prompts).astype(np.float64)
    return NeuronScoreMap(np.abs(acts).mean(axis=0), {"target": "activation_only", "n_prompts": len(prompts)})


def top_k_sets(scores: NeuronScoreMap, K: int) -> NeuronSets:
    flat = scores.flat()
    good = _pick(top_order(flat), flat, np.ones(flat.size, dtype=bool), K, scores.d_ffn)
    return NeuronSets(good, [], frozenset(), 0, K, {"good": 0, "bad": 0})


def random_select(seed: int, K: int, n_layers: int, d_ffn: int) -> NeuronSets:
    """Uniformly drawn good and bad lists of ``K`` neurons each, disjoint, seeded."""
    total = n_layers * d_ffn
    k = min(K, total // 2)
    picks = np.random.default_rng(seed).choice(total, size=2 * k, replace=False)
    good = [(NeuronId.from_flat(int(i), d_ffn), 0.0) for i in picks[:k]]
    bad = [(NeuronId.from_flat(int(i), d_ffn), 0.0) for i in picks[k:]]
    return NeuronSets(good, bad, frozenset(), 0, K, {"good": K - k, "bad": K - k})


# --- scorer pipelines -----------------------------------------------------

_SCORER_TARGET = {"ace": "contrastive_ce", "tn": "tn_margin", "qrnca": "correct_log_prob", "kn": "correct_log_prob"}


def clamp_z(z: int, total: int) -> int:
    """Largest usable z: beyond half the neurons top and bottom sets must overlap."""
    return max(1, min(int(z), total // 2))


def score_task(
    model: Transformer,
    tokenizer: Tokenizer,
    proxy_sets: Sequence[ProxySet],
    parents: Sequence[QAExample] | None = None,
    *,
    scorer: str = "ace",
    mode: str = "enabled",
    m: int = 16,
    z: int = 5000,
    K: int = 100,
    tr: int = 5,
    seed: int = 0,
    template: PromptTemplate | None = None,
) -> NeuronSets:
    """Good/bad neuron sets for one task from its first ``tr`` examples.

    ``mode='enabled'`` runs every gradient scorer over the three proxies per
    example and aggregates with ``ace_aggregate`` (``kn`` keeps its count
    rule). ``mode='legacy'`` scores only the original option order, sums over
    examples and keeps the good list only. ``parents`` holds the original
    questions and is needed in legacy mode.
    """
    if scorer not in SCORERS:
        raise ValueError(f"unknown scorer {scorer!r}")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    cfg = model.cfg
    total = cfg.total_neurons
    z_eff = clamp_z(z, total)
    K = min(K, z_eff)
    proxy_sets = list(proxy_sets)[:tr]
    if not proxy_sets:
        raise ValueError("no examples to attribute")

    if scorer == "random":
        return random_select(seed, K, cfg.n_layers, cfg.d_ffn)
    if scorer == "act":
        prompts = [compose_prompt(p, tokenizer, template) for ps in proxy_sets for p in ps.proxies]
        if mode == "legacy":
            prompts = [compose_prompt(p, tokenizer, template) for p in _parents(parents, proxy_sets)]
        return top_k_sets(act_scores(model, prompts), K)

    kind = _SCORER_TARGET[scorer]
    if mode == "legacy":
        ids = option_ids(tokenizer)
        maps = [
            ig_scores(model, compose_prompt(ex, tokenizer, template), TargetFn(kind, ids, ex.correct_index), m)
            for ex in _parents(parents, proxy_sets)
        ]
        if scorer == "kn":
            return kn_count_aggregate(maps, z_eff, K)
        summed = NeuronScoreMap(_stack(maps).sum(axis=0).reshape(cfg.n_layers, cfg.d_ffn))
        flat = summed.flat()
        good = _pick(top_order(flat), flat, flat > 0, K, cfg.d_ffn)
        return NeuronSets(good, [], frozenset(), z_eff, K, {"good": K - len(good), "bad": 0})

    maps = [es_score(model, ps, kind, tokenizer, m, template) for ps in proxy_sets]
    if scorer == "kn":
        return kn_count_aggregate(maps, z_eff, K)
    return ace_aggregate(maps, z_eff, K)


def _parents(parents, proxy_sets) -> list[QAExample]:
    if parents is None:
        raise ValueError("legacy mode needs the original questions")
    by_id = {p.id: p for p in parents}
    try:
        return [by_id[ps.parent_id] for ps in proxy_sets]
    except KeyError as e:
        raise ValueError(f"original question {e.args[0]} not supplied") from None


# --- neuron-set file ------------------------------------------------------


def sets_to_json(sets: NeuronSets, meta: Mapping) -> dict:
    def rows(items):
        return [{"layer": n.layer, "index": n.index, "score": s} for n, s in items]

    return {
        "version": SET_FILE_VERSION,
        **dict(meta),
        "z": sets.z,
        "K": sets.K,
        "n_ambiguous": len(sets.ambiguous),
        "shortfall": dict(sets.shortfall),
        "good": rows(sets.good),
        "bad": rows(sets.bad),
    }


def write_neuron_sets(path: str | Path, sets: NeuronSets, meta: Mapping) -> None:
    """``meta`` should carry task, model_hash, m, tr, scorer and provenance hashes."""
    Path(path).write_text(json.dumps(sets_to_json(sets, meta), sort_keys=True, indent=1) + "\n")


def read_neuron_sets(path: str | Path) -> tuple[NeuronSets, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != SET_FILE_VERSION:
        raise IntegrityError(f"{path}: unsupported neuron-set version {doc.get('version')!r}")

    def items(rows):
        return [(NeuronId(r["layer"], r["index"]), float(r["score"])) for r in rows]

    sets = NeuronSets(items(doc["good"]), items(doc["bad"]), frozenset(), doc["z"], doc["K"], doc["shortfall"])
    meta = {k: v for k, v in doc.items() if k not in ("good", "bad", "z", "K", "shortfall", "version")}
    return sets, meta
