"""Decoder-only transformer with tappable FFN neurons.

A "neuron" is one element of an FFN block's intermediate vector after the
GELU and before the down-projection. Three things can be done to it:

* read it (``capture_activations``),
* multiply it at every position by a fixed factor (an ``OverrideMap``),
* replace its value at a single position with a constant and differentiate
  the output with respect to that value (``grad_at_taps``).

Weights are never mutated by any of these; all state lives in the call.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import EngineInputError, NumericError
from .neurons import NeuronId, NeuronScoreMap, check_neuron

DTYPES = {"f32": torch.float32, "f64": torch.float64}


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ffn: int
    vocab_size: int
    max_seq: int
    activation: str = "gelu"
    precision: str = "f32"
    # Planted models are built without normalisation so their circuits can be
    # written down by hand; trained models keep pre-LN for stability.
    layer_norm: bool = True

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ffn", "vocab_size", "max_seq"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.activation != "gelu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")
        if self.vocab_size < 4:
            raise ValueError("vocabulary must hold at least the four option letters")

    @property
    def total_neurons(self) -> int:
        return self.n_layers * self.d_ffn

    @property
    def dtype(self) -> torch.dtype:
        return DTYPES[self.precision]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))


@dataclass(frozen=True)
class Override:
    """How a single neuron is rewritten: ``zero``, ``double`` or ``scale``."""

    kind: str
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in ("zero", "double", "scale"):
            raise ValueError(f"unknown override kind {self.kind!r}")
        if self.kind == "scale" and not (math.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError("Scale(alpha) requires a finite alpha >= 0")

    @property
    def factor(self) -> float:
        return {"zero": 0.0, "double": 2.0}.get(self.kind, self.alpha)

    def label(self) -> str:
        return self.kind if self.kind != "scale" else f"scale:{self.alpha!r}"

    @classmethod
    def parse(cls, label: str) -> "Override":
        if label.startswith("scale:"):
            return cls("scale", float(label[6:]))
        return cls(label)


ZERO = Override("zero")
DOUBLE = Override("double")


def Scale(alpha: float) -> Override:
    return Override("scale", float(alpha))


class OverrideMap:
    """NeuronId -> Override, plus optional per-layer joint path scales.

    ``layer_scales`` do not act through ``forward``; they are consumed by
    ``grad_at_taps`` where layer ``l``'s tapped vector at the answer position
    is replaced by ``alpha_l`` times its clean value.
    """

    def __init__(self, entries=None, layer_scales: Mapping[int, float] | None = None):
        self._entries: dict[NeuronId, Override] = {}
        pairs = entries.items() if isinstance(entries, Mapping) else (entries or ())
        for nid, mode in pairs:
            nid = NeuronId(int(nid[0]), int(nid[1]))
            if nid in self._entries:
                raise ValueError(f"neuron {tuple(nid)} appears twice in override map")
            self._entries[nid] = mode
        self.layer_scales = dict(layer_scales or {})
        for layer, a in self.layer_scales.items():
            if not (math.isfinite(a) and 0.0 <= a <= 1.0):
                raise ValueError(f"layer scale for layer {layer} must lie in [0, 1]")

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def __contains__(self, nid):
        return NeuronId(*nid) in self._entries

    def __getitem__(self, nid) -> Override:
        return self._entries[NeuronId(*nid)]

    def items(self):
        return self._entries.items()

    def multipliers(self, cfg: ModelConfig) -> torch.Tensor | None:
        if not self._entries:
            return None
        mult = torch.ones(cfg.n_layers, cfg.d_ffn, dtype=cfg.dtype)
        for nid, mode in self._entries.items():
            check_neuron(nid, cfg.n_layers, cfg.d_ffn)
            mult[nid.layer, nid.index] = mode.factor
        return mult

    def to_records(self) -> list[dict]:
        return [
            {"layer": n.layer, "index": n.index, "mode": m.label()}
            for n, m in sorted(self._entries.items())
        ]

    @classmethod
    def from_records(cls, records: Iterable[Mapping]) -> "OverrideMap":
        return cls([((r["layer"], r["index"]), Override.parse(r["mode"])) for r in records])


@dataclass
class ActivationSnapshot:
    position: int
    values: np.ndarray  # (n_layers, d_ffn)

    def layer(self, layer: int) -> np.ndarray:
        return self.values[layer]


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.d_head = cfg.d_model // cfg.n_heads
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.out = nn.Linear(cfg.d_model, cfg.d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        q, k, v = self.qkv(x).split(D, dim=-1)
        q = q.view(B, T, self.n_heads, self.d_head).transpose(1, 2)
        k = k.view(B, T, self.n_heads, self.d_head).transpose(1, 2)
        v = v.view(B, T, self.n_heads, self.d_head).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.d_head)
        mask = torch.ones(T, T, dtype=torch.bool).tril()
        att = att.masked_fill(~mask, float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, D)
        return self.out(y)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        norm = (lambda: nn.LayerNorm(cfg.d_model)) if cfg.layer_norm else nn.Identity
        self.ln1 = norm()
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = norm()
        self.ffn_in = nn.Linear(cfg.d_model, cfg.d_ffn)
        self.ffn_out = nn.Linear(cfg.d_ffn, cfg.d_model)


class Transformer(nn.Module):
    """Pre-norm GPT-style decoder with learned positional embeddings."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_embed = nn.Embedding(cfg.max_seq, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model) if cfg.layer_norm else nn.Identity()
        self.unembed = nn.Linear(cfg.d_model, cfg.vocab_size)
        self.to(cfg.dtype)

    def init_weights(self, generator: torch.Generator | None = None, std: float = 0.02) -> None:
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.dim() >= 2:
                    p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * std)
                elif name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """Logits at every position, shape ``(B, T, vocab)``. Used for training."""
        return self.run(tokens)[0]

    def run(
        self,
        tokens: torch.Tensor,
        mult: torch.Tensor | None = None,
        positions: torch.Tensor | None = None,
        patch: torch.Tensor | None = None,
        patch_mask: torch.Tensor | None = None,
        taps: torch.Tensor | None = None,
        capture: bool = False,
        check_finite: bool = False,
    ):
        """Full forward with optional neuron manipulation.

        ``mult`` (n_layers, d_ffn) multiplies activations at every position;
        a ``(B, n_layers, d_ffn)`` tensor gives each row its own multipliers.
        At row ``b``'s ``positions[b]``, layer ``l``'s activation is replaced by
        ``patch[b, l]`` where ``patch_mask[b, l]``, and ``taps[b, l]`` is added
        (a zero leaf whose gradient is dF/d activation). With ``capture`` the
        activations at ``positions`` are returned as ``(B, n_layers, d_ffn)``.
        """
        B, T = tokens.shape
        rows = torch.arange(B)
        x = self.tok_embed(tokens) + self.pos_embed(torch.arange(T))[None]
        captured = []
        for l, blk in enumerate(self.blocks):
            x = x + blk.attn(blk.ln1(x))
            a = F.gelu(blk.ffn_in(blk.ln2(x)))
            if mult is not None:
                a = a * (mult[l] if mult.dim() == 2 else mult[:, l, None])
            if positions is not None and (patch is not None or taps is not None):
                at = a[rows, positions]
                if patch is not None:
                    at = torch.where(patch_mask[:, l, None], patch[:, l], at)
                if taps is not None:
                    at = at + taps[:, l]
                a = a.clone()
                a[rows, positions] = at
            if check_finite and not torch.isfinite(a).all():
                raise NumericError(f"non-finite FFN activation in layer {l}")
            if capture:
                captured.append(a[rows, positions])
            x = x + blk.ffn_out(a)
        logits = self.unembed(self.ln_f(x))
        return logits, (torch.stack(captured, dim=1) if capture else None)


def validate_tokens(cfg: ModelConfig, tokens: Sequence[int]) -> None:
    if len(tokens) < 1:
        raise EngineInputError("empty token sequence")
    if len(tokens) > cfg.max_seq:
        raise EngineInputError(f"sequence length {len(tokens)} exceeds max_seq {cfg.max_seq}")
    bad = [t for t in tokens if not (0 <= int(t) < cfg.vocab_size)]
    if bad:
        raise EngineInputError(f"token id {bad[0]} outside vocabulary of {cfg.vocab_size}")


def _pad(cfg: ModelConfig, sequences: Sequence[Sequence[int]]):
    for s in sequences:
        validate_tokens(cfg, s)
    T = max(len(s) for s in sequences)
    batch = torch.zeros(len(sequences), T, dtype=torch.long)
    for i, s in enumerate(sequences):
        batch[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    last = torch.as_tensor([len(s) - 1 for s in sequences], dtype=torch.long)
    return batch, last


def _finite_logits(logits: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite logits; weights may be corrupted")
    return logits


@torch.no_grad()
def forward_batch(
    model: Transformer,
    sequences: Sequence[Sequence[int]],
    overrides: OverrideMap | None = None,
    batch_size: int = 64,
) -> np.ndarray:
    """Final-position logits for each sequence, shape ``(n, vocab)``.

    Sequences are right-padded; causal masking keeps the padding invisible.
    Overrides apply at every position.
    """
    cfg = model.cfg
    mult = overrides.multipliers(cfg) if overrides is not None else None
    out = []
    for i in range(0, len(sequences), batch_size):
        tokens, last = _pad(cfg, sequences[i : i + batch_size])
        logits, _ = model.run(tokens, mult=mult, positions=last, check_finite=True)
        out.append(_finite_logits(logits[torch.arange(len(last)), last]))
    return torch.cat(out).numpy()


def forward(model: Transformer, tokens: Sequence[int], overrides: OverrideMap | None = None) -> np.ndarray:
    """Next-token logits at the final position of ``tokens``."""
    return forward_batch(model, [tokens], overrides)[0]


def _position(tokens: Sequence[int], position: int | None) -> int:
    if position is None:
        return len(tokens) - 1
    if not (0 <= position < len(tokens)):
        raise EngineInputError(f"position {position} outside sequence of length {len(tokens)}")
    return position


@torch.no_grad()
def capture_batch(model: Transformer, sequences: Sequence[Sequence[int]], batch_size: int = 64) -> np.ndarray:
    """Clean activations at each sequence's final position, ``(n, n_layers, d_ffn)``."""
    cfg = model.cfg
    out = []
    for i in range(0, len(sequences), batch_size):
        tokens, last = _pad(cfg, sequences[i : i + batch_size])
        _, acts = model.run(tokens, positions=last, capture=True, check_finite=True)
        out.append(acts)
    return torch.cat(out).numpy()


@torch.no_grad()
def capture_activations(model: Transformer, tokens: Sequence[int], position: int | None = None) -> ActivationSnapshot:
    cfg = model.cfg
    validate_tokens(cfg, tokens)
    pos = _position(tokens, position)
    t = torch.as_tensor([list(tokens)], dtype=torch.long)
    _, acts = model.run(t, positions=torch.tensor([pos]), capture=True, check_finite=True)
    return ActivationSnapshot(pos, acts[0].numpy())


TargetCallable = Callable[[torch.Tensor], torch.Tensor]


def tap_gradients(
    model: Transformer,
    tokens: Sequence[int],
    target: TargetCallable,
    patch_values: torch.Tensor,
    patch_mask: torch.Tensor,
    position: int | None = None,
    batch_size: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched dF/d(tap) for one prompt under many patch configurations.

    Row ``b`` replaces layer ``l``'s activation at ``position`` with
    ``patch_values[b, l]`` wherever ``patch_mask[b, l]``; unmasked layers run
    naturally. Returns gradients ``(B, n_layers, d_ffn)`` and target values
    ``(B,)``. Rows are independent, so the gradient of the summed target is
    the per-row gradient.
    """
    cfg = model.cfg
    validate_tokens(cfg, tokens)
    pos = _position(tokens, position)
    base = torch.as_tensor(list(tokens), dtype=torch.long)
    grads, values = [], []
    for i in range(0, patch_values.shape[0], batch_size):
        pv = patch_values[i : i + batch_size].to(cfg.dtype)
        pm = patch_mask[i : i + batch_size]
        n = pv.shape[0]
        taps = torch.zeros(n, cfg.n_layers, cfg.d_ffn, dtype=cfg.dtype, requires_grad=True)
        logits, _ = model.run(
            base.expand(n, -1),
            positions=torch.full((n,), pos, dtype=torch.long),
            patch=pv,
            patch_mask=pm,
            taps=taps,
            check_finite=True,
        )
        f = target(_finite_logits(logits[:, pos]))
        (g,) = torch.autograd.grad(f.sum(), taps)
        if not torch.isfinite(g).all():
            raise NumericError("non-finite gradient at tapped activations")
        grads.append(g.detach())
        values.append(f.detach())
    return torch.cat(grads).numpy(), torch.cat(values).numpy()


def grad_at_taps(
    model: Transformer,
    tokens: Sequence[int],
    target: TargetCallable,
    layer_scales: Mapping[int, float] | Sequence[float] | None = None,
    position: int | None = None,
) -> NeuronScoreMap:
    """Exact dF/dw for every tapped neuron at ``position``.

    Layers named in ``layer_scales`` have their tapped vector replaced by
    ``alpha * w_clean``; other layers run unmodified.
    """
    cfg = model.cfg
    if layer_scales is None:
        layer_scales = {}
    elif not isinstance(layer_scales, Mapping):
        layer_scales = dict(enumerate(layer_scales))
    for l, a in layer_scales.items():
        if not (0 <= l < cfg.n_layers):
            raise EngineInputError(f"layer {l} out of range")
        if not (math.isfinite(a) and 0.0 <= a <= 1.0):
            raise EngineInputError(f"layer scale {a} outside [0, 1]")
    snap = capture_activations(model, tokens, position)
    clean = torch.as_tensor(snap.values, dtype=cfg.dtype)
    alpha = torch.ones(cfg.n_layers, 1, dtype=cfg.dtype)
    mask = torch.zeros(1, cfg.n_layers, dtype=torch.bool)
    for l, a in layer_scales.items():
        alpha[l] = a
        mask[0, l] = True
    g, v = tap_gradients(model, tokens, target, (alpha * clean)[None], mask, snap.position)
    return NeuronScoreMap(g[0], {"position": snap.position, "target_value": float(v[0]),
                                 "layer_scales": {int(k): float(a) for k, a in layer_scales.items()}})


def build_model(cfg: ModelConfig, seed: int | None = None, std: float = 0.02) -> Transformer:
    model = Transformer(cfg)
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    model.init_weights(gen, std)
    model.eval()
    return model
