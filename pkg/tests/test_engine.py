import numpy as np
import pytest
import torch

from taskneurons.engine import (
    DOUBLE,
    ZERO,
    ModelConfig,
    OverrideMap,
    Scale,
    build_model,
    capture_activations,
    forward,
    forward_batch,
    grad_at_taps,
)
from taskneurons.errors import EngineInputError, NumericError
from taskneurons.neurons import NeuronId

TOKENS = [2, 5, 7, 3, 9, 4]


def _kill(model, layer, index):
    """Make neuron (layer, index) read nothing: its activation is gelu(0) = 0."""
    with torch.no_grad():
        model.blocks[layer].ffn_in.weight[index] = 0
        model.blocks[layer].ffn_in.bias[index] = 0


def test_forward_is_bit_identical(tiny_model):
    a = forward(tiny_model, TOKENS)
    b = forward(tiny_model, TOKENS)
    assert a.tobytes() == b.tobytes()


def test_batch_padding_does_not_leak(tiny_model):
    alone = forward(tiny_model, TOKENS[:3])
    batched = forward_batch(tiny_model, [TOKENS, TOKENS[:3]])
    np.testing.assert_allclose(batched[1], alone, atol=1e-12)


def test_zero_on_dead_neuron_is_a_noop(tiny_model):
    _kill(tiny_model, 1, 4)
    assert capture_activations(tiny_model, TOKENS).values[1, 4] == 0.0
    plain = forward(tiny_model, TOKENS)
    zeroed = forward(tiny_model, TOKENS, OverrideMap({(1, 4): ZERO}))
    assert plain.tobytes() == zeroed.tobytes()


def test_scale_one_everywhere_matches_plain(tiny_model):
    cfg = tiny_model.cfg
    everything = OverrideMap({(l, i): Scale(1.0) for l in range(cfg.n_layers) for i in range(cfg.d_ffn)})
    assert forward(tiny_model, TOKENS).tobytes() == forward(tiny_model, TOKENS, everything).tobytes()


def test_zero_weight_model_activations_are_gelu_of_zero():
    cfg = ModelConfig(2, 8, 2, 16, 10, 8)
    model = build_model(cfg, seed=0)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    snap = capture_activations(model, [1, 2, 3])
    assert np.all(snap.values == 0.0)


def test_override_is_local(tiny_model):
    cfg = tiny_model.cfg
    t = torch.tensor([TOKENS])
    pos = torch.tensor([len(TOKENS) - 1])
    mult = OverrideMap({(1, 3): DOUBLE}).multipliers(cfg)
    _, clean = tiny_model.run(t, positions=pos, capture=True)
    _, hit = tiny_model.run(t, mult=mult, positions=pos, capture=True)
    diff = (hit - clean)[0].detach().numpy()
    # upstream layer untouched; in the same layer only the addressed neuron moves
    assert np.all(diff[0] == 0)
    assert np.flatnonzero(diff[1]).tolist() == [3]
    np.testing.assert_allclose(hit[0, 1, 3].item(), 2 * clean[0, 1, 3].item())


def test_double_planted_good_raises_correct_logit(kit):
    ps = kit.eval_proxies()[:4]
    prompts, slots = kit.prompts(ps), kit.slots(ps)
    letters = kit.tokenizer.letter_ids
    n = kit.good[0]
    before = forward_batch(kit.model, prompts)
    after = forward_batch(kit.model, prompts, OverrideMap({n: DOUBLE}))
    for b, a, c in zip(before, after, slots):
        assert a[letters[c]] > b[letters[c]]


def test_override_map_validation_and_records():
    m = OverrideMap({(0, 1): ZERO, (1, 2): Scale(0.5), (0, 0): DOUBLE})
    recs = m.to_records()
    assert [(r["layer"], r["index"]) for r in recs] == [(0, 0), (0, 1), (1, 2)]
    back = OverrideMap.from_records(recs)
    assert dict(back.items()) == dict(m.items())
    with pytest.raises(ValueError):
        OverrideMap([((0, 1), ZERO), ((0, 1), DOUBLE)])
    with pytest.raises(ValueError):
        Scale(-1.0)
    with pytest.raises(ValueError):
        OverrideMap(layer_scales={0: 1.5})


def test_out_of_range_neuron_rejected(tiny_model):
    with pytest.raises(Exception):
        forward(tiny_model, TOKENS, OverrideMap({(5, 0): ZERO}))


def test_bad_inputs(tiny_model):
    with pytest.raises(EngineInputError):
        forward(tiny_model, [])
    with pytest.raises(EngineInputError):
        forward(tiny_model, [1] * 17)
    with pytest.raises(EngineInputError):
        forward(tiny_model, [99])
    with pytest.raises(EngineInputError):
        capture_activations(tiny_model, TOKENS, position=10)


def test_nan_weights_raise_numeric_error(tiny_model):
    with torch.no_grad():
        tiny_model.blocks[0].ffn_in.weight[0, 0] = float("nan")
    with pytest.raises(NumericError):
        forward(tiny_model, TOKENS)


def _last_logit(tok):
    return lambda logits: logits[:, tok]


def test_dead_path_gives_zero_gradients(tiny_model):
    with torch.no_grad():
        tiny_model.blocks[1].ffn_out.weight.zero_()
    g = grad_at_taps(tiny_model, TOKENS, _last_logit(4))
    assert np.all(g.scores[1] == 0.0)
    assert np.any(g.scores[0] != 0.0)


def test_layer_scale_zero_equals_zeroing_that_layer(tiny_model):
    cfg = tiny_model.cfg
    target = _last_logit(4)
    scaled = grad_at_taps(tiny_model, TOKENS, target, {1: 0.0}).meta["target_value"]
    # layer 1 is the last layer, so its earlier positions cannot reach the final logit
    zeroed = forward(tiny_model, TOKENS, OverrideMap({(1, i): ZERO for i in range(cfg.d_ffn)}))
    assert scaled == pytest.approx(zeroed[4], abs=1e-12)
    with pytest.raises(EngineInputError):
        grad_at_taps(tiny_model, TOKENS, target, {0: 2.0})


def test_neuron_id_flat_roundtrip():
    for flat in (0, 5, 31, 32, 63):
        assert NeuronId.from_flat(flat, 32).flat(32) == flat
