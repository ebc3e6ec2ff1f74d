import pytest
import torch

from rastp.data_pipeline import (
    SidVocab,
    make_examples,
    split_leave_one_out,
    synth_corpus,
    train_popularity,
)
from rastp.seq_model import ModelConfig, SeqRecModel, seed_everything
from rastp.sid_tokenizer import build_index, fit_codebooks


@pytest.fixture(scope="session", autouse=True)
def single_thread():
    torch.set_num_threads(1)


class TinyWorld:
    """Small clustered corpus with codebooks, index and phase examples."""

    def __init__(self):
        self.log, self.embeddings = synth_corpus(
            60, 40, 4, 8, seed=3, min_len=8, max_len=12
        )
        self.splits = split_leave_one_out(self.log, min_interactions=5)
        self.codebooks = fit_codebooks(self.embeddings, 3, 8, iters=10, seed=0)
        self.popularity = train_popularity(self.splits)
        self.index = build_index(self.codebooks, self.embeddings, self.popularity)
        self.vocab = SidVocab.for_index(self.index)
        self.max_seq = 30
        self.examples = {
            phase: make_examples(self.splits, self.index, self.max_seq, phase)
            for phase in ("train", "valid", "test")
        }

    def model(self, seed=0, **overrides) -> SeqRecModel:
        params = dict(
            vocab_size=self.vocab.vocab_size,
            d_model=16,
            n_heads=2,
            d_mlp=32,
            n_enc_layers=2,
            n_dec_layers=2,
            dropout=0.0,
            max_seq=self.max_seq,
        )
        params.update(overrides)
        seed_everything(seed)
        return SeqRecModel(ModelConfig(**params))


@pytest.fixture(scope="session")
def world() -> TinyWorld:
    return TinyWorld()
