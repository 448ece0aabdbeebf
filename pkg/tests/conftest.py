import pytest
import torch
from hypothesis import settings

from facadegram import generator, tokenizer
from facadegram.model import ModelConfig, SeqModel

settings.register_profile("suite", deadline=None, max_examples=25)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def vocab():
    return tokenizer.build_vocabulary(100)


@pytest.fixture(scope="session")
def records_200():
    return [generator.make_record(42, i) for i in range(200)]


@pytest.fixture(scope="session")
def small_model(vocab):
    torch.manual_seed(7)
    cfg = ModelConfig(vocab_size=len(vocab), embed_dim=64, enc_layers=2,
                      dec_layers=2, heads=4, dropout=0.0)
    model = SeqModel(cfg)
    model.eval()
    return model


@pytest.fixture(scope="session")
def tiny_model(vocab):
    torch.manual_seed(3)
    cfg = ModelConfig(vocab_size=len(vocab), embed_dim=32, enc_layers=1,
                      dec_layers=1, heads=2, dropout=0.0)
    model = SeqModel(cfg)
    model.eval()
    return model
