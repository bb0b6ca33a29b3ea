"""Hand-wired transformer with known good and bad FFN neurons.

Circuit (no normalisation anywhere, so every number below is exact up to
softmax leakage):

layer 0, head 0  at each option word, attend to a stem word whose cue code
                 matches the option (or to ``<bos>`` when none does) and
                 write the attended cue flag into MATCH.
layer 0, head 1  copy the nearest preceding letter (A-D) into SLOT, so each
                 option word knows its label.
layers 1-2 FFN   planted neurons read the constant BIAS feature and write
                 +gain (good) or -gain (bad) into SEEK.
layer 3, head 0  at the answer position, attend over option words with
                 score ``base + SEEK * MATCH`` and copy their SLOT into OUT.
unembedding      letter logit = LETTER_GAIN * OUT[letter] + LETTER_BIAS.

SEEK therefore sets how sharply the model picks the matching option: good
neurons sharpen the choice, bad ones blunt it, and a strongly negative SEEK
pushes attention onto the wrong options.

Decoys that are not planted:

* junk neurons with large activations whose output only reaches a couple of
  non-letter logits (bait for activation-magnitude baselines),
* letter-biased neurons in layer 3 that add a small constant to one letter
  logit (they help whichever proxy happens to put the answer under that
  letter, and hurt the rest).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from ..engine import ModelConfig, Transformer, forward_batch, _pad
from ..errors import PlantedConstructionError
from ..neurons import NeuronId
from ..tokenizer import Tokenizer

# residual stream layout
BIAS, POS, IS_LETTER = 0, 1, 2
LETTER = slice(3, 7)
IS_OPTION = 7
OPT_CODE = 8  # 10 dims
CUE_CODE = 18  # 10 dims
N_CODES = 10
IS_CUE = 28
IS_BOS = 29
MATCH = 30
SLOT = slice(31, 35)
SEEK = 35
OUT = slice(36, 40)
JUNK = slice(40, 48)
MIN_D_MODEL = 48

# attention scores (pre-softmax units)
SINK_SCORE = 10.0
MATCH_SCORE = 20.0
RECENCY = 600.0  # score per unit of t / max_seq
LETTER_KEY = 30.0
OPTION_SCORE = 16.0

LETTER_GAIN = 20.0
LETTER_BIAS = 4.0


@dataclass
class PlantedModel:
    model: Transformer
    tokenizer: Tokenizer
    planted_good: list[NeuronId]
    planted_bad: list[NeuronId]
    delta: float
    junk: list[NeuronId] = field(default_factory=list)
    letter_biased: list[NeuronId] = field(default_factory=list)
    # per-neuron minimum effects measured during verification
    effects: dict[NeuronId, tuple[float, float]] = field(default_factory=dict)

    @property
    def planted(self) -> set[NeuronId]:
        return set(self.planted_good) | set(self.planted_bad)


def _gelu(x: float) -> float:
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def _option_codes(cue_maps: Sequence[Mapping[str, str]]) -> dict[str, int]:
    options = sorted({o for cm in cue_maps for o in cm.values()})
    if len(options) > N_CODES:
        raise PlantedConstructionError(f"{len(options)} distinct options exceed {N_CODES} codes")
    return {o: i for i, o in enumerate(options)}


def _place(rng, layers: Sequence[int], d_ffn: int, n: int, taken: set) -> list[NeuronId]:
    out = []
    while len(out) < n:
        nid = NeuronId(int(layers[int(rng.integers(len(layers)))]), int(rng.integers(d_ffn)))
        if nid not in taken:
            taken.add(nid)
            out.append(nid)
    return out


def wire_planted(
    tokenizer: Tokenizer,
    cue_maps: Sequence[Mapping[str, str]],
    option_words: Sequence[str],
    n_good: int = 8,
    n_bad: int = 8,
    *,
    n_layers: int = 4,
    d_model: int = 64,
    n_heads: int = 2,
    d_ffn: int = 1024,
    max_seq: int = 128,
    n_junk: int = 120,
    n_letter_biased: int = 8,
    good_score: float = 0.225,
    bad_score: float = 0.225,
    seek_base: float = 1.75,
    cue_strength: tuple[float, float] = (0.5, 1.5),
    option_prior: float = 0.3,
    seed: int = 0,
) -> PlantedModel:
    """Write the weights; no checking. ``build_planted`` wraps this with verification.

    ``good_score``/``bad_score`` are each planted neuron's share of the
    selection score, ``seek_base`` the score with no planted input. Each cue
    word gets a strength drawn from ``cue_strength`` and each option word a
    score prior in +-``option_prior``, so questions differ in how easily
    they flip.
    """
    if n_layers < 4:
        raise PlantedConstructionError("the planted circuit needs 4 layers")
    if d_model < MIN_D_MODEL or d_model % n_heads or d_model // n_heads < 12:
        raise PlantedConstructionError(f"d_model must be >= {MIN_D_MODEL} with heads of at least 12 dims")
    spare = 2 * d_ffn  # layers 1 and 2 host the planted neurons
    if n_good + n_bad > spare:
        raise PlantedConstructionError(f"{n_good + n_bad} planted neurons do not fit in {spare} slots")

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(n_layers, d_model, n_heads, d_ffn, len(tokenizer), max_seq, layer_norm=False)
    model = Transformer(cfg)
    for p in model.parameters():
        p.data.zero_()
    dh = d_model // n_heads
    root = math.sqrt(dh)
    codes = _option_codes(cue_maps)

    with torch.no_grad():
        E = model.tok_embed.weight
        E[:, BIAS] = 1.0
        E[:, SEEK] = seek_base
        E[tokenizer.bos_id, IS_BOS] = 1.0
        for j, tid in enumerate(tokenizer.letter_ids):
            E[tid, IS_LETTER] = 1.0
            E[tid, LETTER.start + j] = 1.0
        for word in option_words:
            if word in tokenizer.index:
                prior = float(rng.uniform(-option_prior, option_prior))
                E[tokenizer.index[word], IS_OPTION] = 1.0 + prior / OPTION_SCORE
                if word in codes:
                    E[tokenizer.index[word], OPT_CODE + codes[word]] = 1.0
        for cm in cue_maps:
            for word, option in cm.items():
                if word in tokenizer.index:
                    E[tokenizer.index[word], IS_CUE] = float(rng.uniform(*cue_strength))
                    E[tokenizer.index[word], CUE_CODE + codes[option]] = 1.0
        model.pos_embed.weight[:, POS] = torch.arange(max_seq, dtype=cfg.dtype) / max_seq

        def head(blk, h):
            W = blk.attn.qkv.weight
            q, k, v = (W[i * d_model + h * dh : i * d_model + (h + 1) * dh] for i in range(3))
            return q, k, v, blk.attn.out.weight[:, h * dh : (h + 1) * dh]

        # layer 0, head 0: cue matching with a <bos> sink
        q, k, v, o = head(model.blocks[0], 0)
        q[0, BIAS] = SINK_SCORE * root
        k[0, IS_BOS] = 1.0
        for c in range(N_CODES):
            q[1 + c, OPT_CODE + c] = MATCH_SCORE * root
            k[1 + c, CUE_CODE + c] = 1.0
        v[0, IS_CUE] = 1.0
        o[MATCH, 0] = 1.0

        # layer 0, head 1: nearest preceding letter
        q, k, v, o = head(model.blocks[0], 1)
        q[0, BIAS] = RECENCY * root
        k[0, POS] = 1.0
        q[1, BIAS] = LETTER_KEY * root
        k[1, IS_LETTER] = 1.0
        for j in range(4):
            v[j, LETTER.start + j] = 1.0
            o[SLOT.start + j, j] = 1.0

        # layer 3, head 0: pick an option by SEEK-weighted match
        q, k, v, o = head(model.blocks[3], 0)
        q[0, BIAS] = OPTION_SCORE * root
        k[0, IS_OPTION] = 1.0
        q[1, SEEK] = root
        k[1, MATCH] = 1.0
        for j in range(4):
            v[j, SLOT.start + j] = 1.0
            o[OUT.start + j, j] = 1.0

        U = model.unembed
        for j, tid in enumerate(tokenizer.letter_ids):
            U.weight[tid, OUT.start + j] = LETTER_GAIN
            U.bias[tid] = LETTER_BIAS

        taken: set[NeuronId] = set()
        good = _place(rng, (1, 2), d_ffn, n_good, taken)
        bad = _place(rng, (1, 2), d_ffn, n_bad, taken)
        for nid, sign, score in [(n, 1.0, good_score) for n in good] + [(n, -1.0, bad_score) for n in bad]:
            drive = float(rng.uniform(1.0, 1.6))
            share = score * float(rng.uniform(0.85, 1.15))
            blk = model.blocks[nid.layer]
            blk.ffn_in.weight[nid.index, BIAS] = drive
            blk.ffn_out.weight[SEEK, nid.index] = sign * share / _gelu(drive)

        junk = _place(rng, range(n_layers), d_ffn, n_junk, taken)
        non_letters = [i for i in range(len(tokenizer)) if i not in tokenizer.letter_ids and i > 2]
        for n, nid in enumerate(junk):
            blk = model.blocks[nid.layer]
            blk.ffn_in.weight[nid.index, BIAS] = float(rng.uniform(2.5, 3.5))
            d = JUNK.start + n % (JUNK.stop - JUNK.start)
            blk.ffn_out.weight[d, nid.index] = float(rng.uniform(-1, 1))
        for d in range(JUNK.start, JUNK.stop):
            U.weight[non_letters[(d - JUNK.start) % len(non_letters)], d] = 0.05

        biased = _place(rng, (n_layers - 1,), d_ffn, n_letter_biased, taken)
        for n, nid in enumerate(biased):
            blk = model.blocks[nid.layer]
            blk.ffn_in.weight[nid.index, BIAS] = 1.0
            blk.ffn_out.weight[OUT.start + n % 4, nid.index] = 0.05 / LETTER_GAIN / _gelu(1.0)

    model.eval()
    return PlantedModel(model, tokenizer, good, bad, 0.0, junk, biased)


def _inert(model: Transformer, layer: int, index: int) -> bool:
    # zero input row, zero bias, zero output column: activation is gelu(0) = 0
    blk = model.blocks[layer]
    return bool(
        not blk.ffn_in.weight[index].any()
        and blk.ffn_in.bias[index] == 0
        and not blk.ffn_out.weight[:, index].any()
    )


@torch.no_grad()
def ablation_effects(
    model: Transformer,
    prompts: Sequence[Sequence[int]],
    correct_ids: Sequence[int],
    neurons: Sequence[NeuronId],
    batch_size: int = 128,
) -> dict[NeuronId, tuple[np.ndarray, np.ndarray]]:
    """Per neuron: change of the correct-letter logit under doubling and under
    zeroing (both as ``intervened - clean``), one value per prompt."""
    cfg = model.cfg
    tokens, last = _pad(cfg, prompts)
    Q = len(prompts)
    rows_q = torch.arange(Q)
    cid = torch.as_tensor(list(correct_ids))
    clean = model.run(tokens)[0][rows_q, last, cid].to(torch.float64)
    jobs = [(n, f) for n in neurons for f in (2.0, 0.0)]
    per_batch = max(1, batch_size // Q)
    deltas = []
    for s in range(0, len(jobs), per_batch):
        chunk = jobs[s : s + per_batch]
        mult = torch.ones(len(chunk), Q, cfg.n_layers, cfg.d_ffn, dtype=cfg.dtype)
        for r, (n, f) in enumerate(chunk):
            mult[r, :, n.layer, n.index] = f
        logits, _ = model.run(tokens.repeat(len(chunk), 1), mult=mult.reshape(-1, cfg.n_layers, cfg.d_ffn))
        rows = torch.arange(len(chunk) * Q)
        val = logits[rows, last.repeat(len(chunk)), cid.repeat(len(chunk))].to(torch.float64)
        deltas.append((val.reshape(len(chunk), Q) - clean).numpy())
    d = np.concatenate(deltas)
    return {n: (d[2 * i], d[2 * i + 1]) for i, n in enumerate(neurons)}


def verify_planted(
    planted: PlantedModel,
    prompts: Sequence[Sequence[int]],
    correct_ids: Sequence[int],
    delta: float,
    exhaustive: bool = False,
) -> dict[NeuronId, tuple[float, float]]:
    """Check every neuron's single-neuron ablation against the margin ``delta``.

    Good neurons: doubling raises and zeroing lowers the correct-letter logit
    by at least ``delta`` on every prompt. Bad neurons: the mirror image.
    Every other neuron must move it by less than ``delta`` on every prompt.

    Neurons with all-zero weights are exact no-ops under any multiplier, so
    unless ``exhaustive`` is set they are certified by weight inspection
    instead of a forward pass. Returns the minimum (raise, drop) margin per
    ablated neuron; raises ``PlantedConstructionError`` with diagnostics.
    """
    model = planted.model
    cfg = model.cfg
    every = [NeuronId(l, i) for l in range(cfg.n_layers) for i in range(cfg.d_ffn)]
    active = every if exhaustive else [n for n in every if not _inert(model, *n)]
    effects = ablation_effects(model, prompts, correct_ids, active)
    good, bad = set(planted.planted_good), set(planted.planted_bad)
    problems, summary = [], {}
    for n, (dbl, zero) in effects.items():
        if n in good:
            up, down = float(dbl.min()), float(-zero.max())
        elif n in bad:
            up, down = float(-dbl.max()), float(zero.min())
        else:
            worst = float(max(np.abs(dbl).max(), np.abs(zero).max()))
            if worst >= delta:
                problems.append(f"unplanted neuron {tuple(n)} moves the correct logit by {worst:.4f}")
            continue
        summary[n] = (up, down)
        if min(up, down) < delta:
            kind = "good" if n in good else "bad"
            problems.append(f"{kind} neuron {tuple(n)} margin {min(up, down):.4f} < delta {delta}")
    missing = (good | bad) - set(effects)
    problems += [f"planted neuron {tuple(n)} has no effect (inert weights)" for n in sorted(missing)]
    if problems:
        raise PlantedConstructionError("planted verification failed:\n  " + "\n  ".join(problems[:20]))
    return summary


def build_planted(
    tokenizer: Tokenizer,
    cue_maps: Sequence[Mapping[str, str]],
    option_words: Sequence[str],
    prompts: Sequence[Sequence[int]],
    correct_slots: Sequence[int],
    n_good: int = 8,
    n_bad: int = 8,
    delta: float = 0.2,
    exhaustive: bool = False,
    **kwargs,
) -> PlantedModel:
    """Wire the planted model, check it answers every prompt and verify its neurons.

    ``prompts`` are composed solvable questions with their correct slots.
    """
    planted = wire_planted(tokenizer, cue_maps, option_words, n_good, n_bad, **kwargs)
    letters = tokenizer.letter_ids
    logits = forward_batch(planted.model, prompts)[:, letters]
    wrong = [i for i, (row, c) in enumerate(zip(logits, correct_slots)) if int(np.argmax(row)) != c]
    if wrong:
        raise PlantedConstructionError(f"planted model misanswers {len(wrong)} of {len(prompts)} prompts")
    planted.effects = verify_planted(planted, prompts, [letters[c] for c in correct_slots], delta, exhaustive)
    planted.delta = delta
    return planted


PLANTED_FAMILIES = ("marker_detect", "keyword_sentiment")


@dataclass
class PlantedSuite:
    planted: PlantedModel
    data: dict  # family -> (train, eval) example lists


def planted_suite(
    seed: int = 0, n_train: int = 40, n_eval: int = 40, n_verify: int = 8, exhaustive: bool = False, **kwargs
) -> PlantedSuite:
    """Planted model serving both single-cue task families plus their data.

    Both families route through the same planted neurons, so their good and
    bad sets should coincide.
    """
    from ..aqua import PromptTemplate, compose_prompt, expand
    from .generators import TaskSpec, corpus_texts, cue_map, generate_task, option_words

    specs = [TaskSpec(f, n_train, n_eval, seed, demonstration=False, n_keywords=1) for f in PLANTED_FAMILIES]
    data = {s.family: generate_task(s) for s in specs}
    template = PromptTemplate.default()
    texts = []
    for tr, ev in data.values():
        texts += corpus_texts(tr + ev, template.prompt + template.option)
    tok = Tokenizer.from_corpus(texts)
    prompts, slots = [], []
    for tr, ev in data.values():
        for ps in expand(ev[:n_verify], seed):
            for p in ps.proxies:
                prompts.append(compose_prompt(p, tok, template))
                slots.append(p.correct_index)
    words = [w for s in specs for w in option_words(s)]
    planted = build_planted(
        tok, [cue_map(s) for s in specs], words, prompts, slots, exhaustive=exhaustive, seed=seed, **kwargs
    )
    return PlantedSuite(planted, data)
