import numpy as np
import pytest

from guidesum import tensor as T
from guidesum.model import GuidedTransformer, ModelConfig, make_batch


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        vocab_size=50,
        d_model=16,
        n_heads=2,
        n_enc_layers=2,
        n_dec_layers=2,
        d_ffn=16,
        max_src_len=12,
        max_tgt_len=8,
        max_guid_len=8,
        guidance_enabled=True,
        dropout_rate=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def model64(tiny_cfg):
    return GuidedTransformer(tiny_cfg, seed=0, dtype=np.float64)


@pytest.fixture
def batch():
    src = [[1, 10, 11, 12, 13, 2], [1, 14, 15, 2]]
    tgt = [[1, 20, 21, 22, 2], [1, 23, 2]]
    guide = [[1, 30, 31, 2], [1, 32, 33, 34, 2]]
    return make_batch(src, tgt, guide)


@pytest.fixture(autouse=True)
def _restore_precision():
    prev = T.get_default_dtype()
    yield
    T.set_default_dtype(64 if prev == np.float64 else 32)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
