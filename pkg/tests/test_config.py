import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taskneurons.config import RunConfig, coerce, load, parse
from taskneurons.errors import ConfigError


def test_emit_parse_roundtrip():
    cfg = RunConfig(seed=7, tasks=("marker_detect", "copy_cue"), lr=0.0025, demonstration=True, template="x.tmpl")
    assert RunConfig(**parse(cfg.emit())) == cfg


@settings(max_examples=60, deadline=None)
@given(
    st.integers(0, 10**6),
    st.sampled_from(["ace", "tn", "qrnca", "kn", "act", "random"]),
    st.floats(1e-6, 1.0, allow_nan=False),
    st.integers(1, 200),
)
def test_roundtrip_property(seed, scorer, lr, budget):
    cfg = RunConfig(seed=seed, scorer=scorer, lr=lr, budget=budget)
    assert RunConfig(**parse(cfg.emit())) == cfg


def test_comments_and_whitespace():
    values = parse("# run\n\n  seed =  4   # inline\nscorer=tn\n")
    assert values == {"seed": 4, "scorer": "tn"}


@pytest.mark.parametrize("text", ["sed = 1", "seed = x", "seed 1", "seed = 1\nseed = 2", "exhaustive_check = yes"])
def test_bad_files(text):
    with pytest.raises(ConfigError):
        parse(text)


@pytest.mark.parametrize("kw", [
    {"source": "borrowed"}, {"tasks": ()}, {"tasks": ("chess",)}, {"scorer": "mine"}, {"mode": "fast"},
    {"K": 10, "z": 5}, {"m": 0}, {"step": 0.0}, {"loss": "some"},
    {"source": "planted", "tasks": ("parity_reason",)},
])
def test_invalid_values(kw):
    with pytest.raises(ConfigError):
        RunConfig(**kw)


def test_overrides_win_over_file(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("seed = 3\nK = 50\n")
    cfg = load(f, {"K": 20})
    assert (cfg.seed, cfg.K) == (3, 20)
    with pytest.raises(ConfigError):
        load(tmp_path / "missing.cfg")


def test_hash_ignores_output_directory():
    assert RunConfig(out="a").hash() == RunConfig(out="b").hash()
    assert RunConfig(seed=1).hash() != RunConfig(seed=2).hash()


def test_coerce_types():
    assert coerce("tasks", "marker_detect, copy_cue") == ("marker_detect", "copy_cue")
    assert coerce("exhaustive_check", "TRUE") is True
    assert coerce("delta", "0.5") == 0.5
