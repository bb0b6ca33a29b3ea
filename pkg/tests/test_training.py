import math

import pytest
import torch

from taskneurons.aqua import PromptTemplate, expand
from taskneurons.engine import ModelConfig
from taskneurons.errors import TrainingDivergence
from taskneurons.tasks.generators import TaskSpec, corpus_texts, generate_task
from taskneurons.tasks.training import TrainSettings, mean_loss, select_eval_split, train
from taskneurons.tokenizer import Tokenizer


@pytest.fixture(scope="module")
def small():
    train_ex, eval_ex = generate_task(TaskSpec("marker_detect", 64, 16, demonstration=False))
    t = PromptTemplate.default()
    tok = Tokenizer.from_corpus(corpus_texts(train_ex + eval_ex, t.prompt + "\n" + t.option))
    cfg = ModelConfig(2, 32, 2, 64, len(tok), 64)
    return cfg, tok, train_ex, eval_ex


def _weights(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


def test_zero_learning_rate_keeps_weights(small):
    cfg, tok, train_ex, _ = small
    from taskneurons.engine import build_model

    init = build_model(cfg, seed=0)
    before = _weights(init)
    res = train(cfg, tok, train_ex, TrainSettings(steps=5, lr=0.0, weight_decay=0.0, batch_size=4), init=init)
    for k, v in res.model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_loss_goes_down(small):
    cfg, tok, train_ex, _ = small
    from taskneurons.engine import build_model

    init = build_model(cfg, seed=0)
    start = mean_loss(init, tok, train_ex, kind="all")
    res = train(cfg, tok, train_ex, TrainSettings(steps=60, batch_size=16, warmup=5, lr=3e-3), init=init)
    assert mean_loss(res.model, tok, train_ex, kind="all") < start


def test_runs_repeat_exactly(small):
    cfg, tok, train_ex, eval_ex = small
    s = TrainSettings(steps=10, batch_size=8, eval_every=5)
    a = train(cfg, tok, train_ex, s, expand(eval_ex, 0))
    b = train(cfg, tok, train_ex, s, expand(eval_ex, 0))
    for (k, v), w in zip(a.model.state_dict().items(), b.model.state_dict().values()):
        assert torch.equal(v, w), k
    assert a.curve == b.curve
    assert "eval_acc" in a.curve[4] and "eval_acc" not in a.curve[3]


def test_divergence_is_reported(small):
    cfg, tok, train_ex, _ = small
    from taskneurons.engine import build_model

    init = build_model(cfg, seed=0)
    with torch.no_grad():
        init.unembed.weight.fill_(math.inf)
    with pytest.raises(TrainingDivergence):
        train(cfg, tok, train_ex, TrainSettings(steps=3, batch_size=4), init=init)


def test_curve_file(small, tmp_path):
    cfg, tok, train_ex, _ = small
    res = train(cfg, tok, train_ex, TrainSettings(steps=3, batch_size=4))
    res.write_curve(tmp_path / "c.tsv")
    lines = (tmp_path / "c.tsv").read_text().splitlines()
    assert lines[0] == "step\tlr\tloss\teval_acc" and len(lines) == 4


def test_eval_split_counts(kit):
    ps = kit.eval_proxies()
    picked, info = select_eval_split(kit.model, kit.tokenizer, ps, 10, 5)
    assert len(picked) == 10
    assert info == {"comprehended": 10, "missed": 0, "short_comprehended": 0, "short_missed": 5}
    assert [p.parent_id for p in picked] == [p.parent_id for p in ps[:10]]


def test_settings_validation():
    with pytest.raises(ValueError):
        TrainSettings(loss="every")
    with pytest.raises(ValueError):
        TrainSettings(batch_size=0)
