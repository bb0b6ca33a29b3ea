import math

import numpy as np
import pytest

from taskneurons.engine import capture_batch, forward_batch
from taskneurons.errors import PlantedConstructionError
from taskneurons.intervention import ratio_sweep
from taskneurons.neurons import NeuronSets
from taskneurons.tasks.generators import TaskSpec, cue_map, option_words
from taskneurons.tasks.planted import (
    BIAS,
    LETTER_BIAS,
    LETTER_GAIN,
    PLANTED_FAMILIES,
    SEEK,
    verify_planted,
    wire_planted,
)


def gelu(x):
    return 0.5 * x * (1 + math.erf(x / math.sqrt(2)))


def test_hand_trace(kit):
    model = kit.model
    ps = kit.eval_proxies()[:5]
    prompts = kit.prompts(ps)
    acts = capture_batch(model, prompts)
    seek = 0.0
    for n in kit.good + kit.bad:
        blk = model.blocks[n.layer]
        drive = blk.ffn_in.weight[n.index, BIAS].item()
        # the BIAS feature is exactly 1 everywhere and nothing else feeds these rows
        np.testing.assert_allclose(acts[:, n.layer, n.index], gelu(drive), rtol=1e-6)
        seek += gelu(drive) * blk.ffn_out.weight[SEEK, n.index].item()
    # goods and bads write nearly equal and opposite shares
    assert abs(seek) < 0.2 * 0.225 * 16
    letters = forward_batch(model, prompts)[:, kit.tokenizer.letter_ids]
    # 8 letter-biased neurons add 0.05 to each letter twice over
    attention_mass = ((letters - LETTER_BIAS - 0.1) / LETTER_GAIN).sum(axis=1)
    np.testing.assert_allclose(attention_mass, 1.0, atol=1e-3)
    assert (np.argmax(letters, axis=1) == kit.slots(ps)).all()


def test_verification_margins(kit):
    effects = kit.suite.planted.effects
    assert set(effects) == set(kit.good) | set(kit.bad)
    assert all(min(v) >= 0.2 for v in effects.values())


def test_too_large_margin_fails_construction(kit):
    ps = kit.eval_proxies()[:2]
    ids = [kit.tokenizer.letter_ids[s] for s in kit.slots(ps)]
    with pytest.raises(PlantedConstructionError, match="margin"):
        verify_planted(kit.suite.planted, kit.prompts(ps), ids, delta=50.0)


def _wire(kit, **kw):
    specs = [TaskSpec(f, n_keywords=1) for f in PLANTED_FAMILIES]
    return wire_planted(kit.tokenizer, [cue_map(s) for s in specs],
                        [w for s in specs for w in option_words(s)], **kw)


def test_wiring_is_deterministic(kit):
    a = _wire(kit, seed=0)
    assert a.planted_good == kit.good and a.planted_bad == kit.bad
    b = _wire(kit, seed=1)
    assert b.planted_good != kit.good


def test_no_bad_neurons_gives_noop_degrade_control(kit):
    p = _wire(kit, n_bad=0)
    sets = NeuronSets([(n, 1.0) for n in p.planted_good], [])
    plans = ratio_sweep(sets, "degrade", 100)
    assert plans[0].selected_good == () and plans[0].selected_bad == ()
    assert plans[0].shortfall["bad"] == 100
    assert len(plans[0].override_map) == 0


@pytest.mark.parametrize("kw", [{"n_layers": 3}, {"d_model": 32}, {"n_good": 2000, "d_ffn": 512}])
def test_bad_shapes(kit, kw):
    with pytest.raises(PlantedConstructionError):
        _wire(kit, **kw)
