import numpy as np
import pytest

from catmesh.body.template import TemplateConfig, make_toy_template


@pytest.fixture(scope="session")
def template():
    return make_toy_template()


@pytest.fixture(scope="session")
def small_template():
    return make_toy_template(TemplateConfig.minimal())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_CONFIG = """
preset = desk
encoder.H = 16
encoder.W = 16
encoder.M = 8
encoder.C = 16
encoder.B = 3
encoder.depth = 1
encoder.heads = 2
encoder.head_hidden = 16
decoder.scales = 1, 2
decoder.crop_h = 2
decoder.crop_w = 2
decoder.K_hand = 3
decoder.K_face = 3
decoder.n_blocks = 1
decoder.n_points = 2
decoder.heads = 2
decoder.head_hidden = 16
optim.steps = 6
optim.batch_size = 2
data.n_train = 4
data.n_eval = 3
run.ckpt_every = 3
run.log_every = 1
"""


@pytest.fixture
def tiny_text():
    return TINY_CONFIG


@pytest.fixture
def tiny_cfg():
    from catmesh.harness.config import parse_config
    return parse_config(TINY_CONFIG, env={})


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
