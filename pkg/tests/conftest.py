import numpy as np
import pytest
import torch

from taskneurons.aqua import PromptTemplate, compose_prompt, expand
from taskneurons.engine import ModelConfig, build_model
from taskneurons.tasks.planted import planted_suite

# criterion number -> (passed, detail); filled by test_acceptance, printed at the end
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(autouse=True)
def _one_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def planted():
    """Planted model plus data for both cue families (built once per session)."""
    torch.set_num_threads(1)
    return planted_suite(seed=0, n_train=40, n_eval=40, n_verify=8)


class PlantedKit:
    def __init__(self, suite):
        self.suite = suite
        self.model = suite.planted.model
        self.tokenizer = suite.planted.tokenizer
        self.template = PromptTemplate.default()
        self.good = list(suite.planted.planted_good)
        self.bad = list(suite.planted.planted_bad)

    def train_proxies(self, family="marker_detect"):
        return expand(self.suite.data[family][0], 0)

    def eval_proxies(self, family="marker_detect"):
        return expand(self.suite.data[family][1], 0)

    def prompts(self, proxy_sets):
        return [compose_prompt(p, self.tokenizer, self.template) for ps in proxy_sets for p in ps.proxies]

    def slots(self, proxy_sets):
        return [p.correct_index for ps in proxy_sets for p in ps.proxies]


@pytest.fixture(scope="session")
def kit(planted):
    return PlantedKit(planted)


@pytest.fixture
def tiny_model():
    cfg = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ffn=32, vocab_size=12, max_seq=16, precision="f64")
    return build_model(cfg, seed=3, std=0.3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
