import numpy as np
import pytest

from fedgen.data import PartitionConfig, partition, synth_corpus
from fedgen.linalg import make_rng
from fedgen.lora import LoraConfig, LoraPair, LoraAdapter, init_adapter
from fedgen.model import ModelConfig, attention_targets, init_backbone

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_corpus():
    return synth_corpus(n_topics=3, docs_per_topic=8, doc_len=9, rng=make_rng(0, 1))


@pytest.fixture(scope="session")
def tiny_model_config(tiny_corpus):
    return ModelConfig(vocab_size=tiny_corpus.vocab.size, dim=8, n_layers=2, n_heads=2, context_len=8, mlp_ratio=2)


@pytest.fixture(scope="session")
def tiny_backbone(tiny_model_config):
    return init_backbone(tiny_model_config, make_rng(0, 4))


@pytest.fixture(scope="session")
def tiny_lora(tiny_model_config):
    return LoraConfig(rank=2, scaling=4.0, target_layers=attention_targets(tiny_model_config))


@pytest.fixture(scope="session")
def tiny_clients(tiny_corpus):
    return partition(tiny_corpus, PartitionConfig(n_clients=4, concentration=0.5, seed=0))


def dense_adapter(config: LoraConfig, shapes, rng, scale=0.3) -> LoraAdapter:
    """Adapter with both factors non-zero (a trained-looking adapter)."""
    base = init_adapter(config, shapes, rng)
    return LoraAdapter(config, {
        k: LoraPair(p.down, scale * rng.standard_normal(p.up.shape)) for k, p in base.pairs.items()
    })


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
