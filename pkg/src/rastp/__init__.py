"""Desk-scale SID-based generative recommendation with mid-encoder token
pruning: tokenizer, sequence model, pruning strategies, data pipeline,
trainer/evaluator and a benchmark CLI."""

from .sid_tokenizer import (
    ItemEmbedding,
    SidCodebooks,
    SidIndex,
    build_index,
    encode_item,
    fit_codebooks,
)
from .data_pipeline import (
    InteractionLog,
    SequenceExample,
    SidVocab,
    UserSplit,
    load_interactions,
    make_examples,
    split_leave_one_out,
    synth_corpus,
)
from .seq_model import ModelConfig, SeqRecModel, TokenBatch, seed_everything
from .rastp_pruner import (
    ImportanceScores,
    PruneResult,
    PruneStrategy,
    apply_strategy,
    baseline_l2_select,
    baseline_pool,
    score_tokens,
    select_and_gather,
)
from .trainer_eval import MetricsReport, TrainConfig, evaluate, train

__version__ = "0.1.0"
