import pytest
import torch
from hypothesis import HealthCheck, settings

from dstlab.corpus import Corpus, SynthConfig, default_schema, generate_synthetic
from dstlab.dst_model import DstModel
from dstlab.encoder import EncoderConfig, build_vocab, schema_texts

torch.set_num_threads(1)

settings.register_profile(
    "suite", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("suite")

# small-but-real encoder settings shared by the model-level tests
TINY_ENCODER = dict(hidden_dim=16, num_layers=1, num_heads=2, max_seq_len=96,
                    dropout=0.0)


def make_model(corpus: Corpus, torch_seed: int = 0, extra_texts=(), **overrides):
    torch.manual_seed(torch_seed)
    vocab = build_vocab(
        list(corpus.all_utterances()) + list(extra_texts), schema_texts(corpus.schema)
    )
    cfg = EncoderConfig(**{**TINY_ENCODER, **overrides, "vocab_size": len(vocab)})
    model = DstModel(corpus.schema, cfg, vocab)
    model.eval()
    return model


@pytest.fixture(scope="session")
def schema4():
    return default_schema()


@pytest.fixture(scope="session")
def corpus10():
    return generate_synthetic(SynthConfig(num_dialogues=10), seed=11, split="train")


@pytest.fixture(scope="session")
def tiny_model(corpus10):
    return make_model(corpus10)
