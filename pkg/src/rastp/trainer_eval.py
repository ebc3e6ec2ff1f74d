"""Training loop with optional mid-encoder pruning, beam-search evaluation of
Recall@K / NDCG@K, and early stopping on validation Recall@5."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .data_pipeline import SequenceExample, SidVocab
from .rastp_pruner import PruneStrategy, apply_strategy
from .seq_model import SeqRecModel, TokenBatch, seed_everything
from .sid_tokenizer import SidIndex


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    strategy: PruneStrategy = field(default_factory=lambda: PruneStrategy(kind="none"))
    prune_layer: int = 2
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    max_steps: int = 500
    valid_interval: int = 100
    patience: int = 10
    seed: int = 42
    beam: int = 20
    eval_prune: bool = True  # apply the strategy in evaluation forward passes too
    valid_subsample: int = 1000

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.valid_interval < 1 or self.max_steps < 1 or self.batch_size < 1:
            raise ValueError("valid_interval, max_steps and batch_size must be >= 1")


@dataclass
class MetricsReport:
    recall: dict[int, float]
    ndcg: dict[int, float]
    wall_step_ms_mean: float = 0.0
    wall_step_ms_std: float = 0.0
    steps_run: int = 0

    def to_dict(self) -> dict:
        return {
            "recall": {str(k): v for k, v in sorted(self.recall.items())},
            "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
            "wall_step_ms_mean": self.wall_step_ms_mean,
            "wall_step_ms_std": self.wall_step_ms_std,
            "steps_run": self.steps_run,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            recall={int(k): v for k, v in d["recall"].items()},
            ndcg={int(k): v for k, v in d["ndcg"].items()},
            wall_step_ms_mean=d.get("wall_step_ms_mean", 0.0),
            wall_step_ms_std=d.get("wall_step_ms_std", 0.0),
            steps_run=d.get("steps_run", 0),
        )


@dataclass
class TrainResult:
    model: SeqRecModel
    report: MetricsReport
    losses: list[float]
    step_times_ms: list[float]
    history: list[dict]
    best_step: int
    stopped_early: bool


def collate(
    examples: list[SequenceExample], vocab: SidVocab
) -> tuple[TokenBatch, torch.Tensor]:
    """Right-pad histories to the batch max and stack target token ids."""
    max_len = max(len(e.input_tokens) for e in examples)
    ids = torch.full((len(examples), max_len), vocab.pad_id, dtype=torch.long)
    mask = torch.zeros((len(examples), max_len), dtype=torch.bool)
    targets = torch.empty((len(examples), vocab.num_levels), dtype=torch.long)
    for i, ex in enumerate(examples):
        n = len(ex.input_tokens)
        ids[i, :n] = torch.tensor(ex.input_tokens, dtype=torch.long)
        mask[i, :n] = True
        targets[i] = torch.tensor(vocab.tokens_for_sequence(ex.target_codes))
    return TokenBatch(token_ids=ids, mask=mask), targets


def encoder_forward(
    model: SeqRecModel,
    batch: TokenBatch,
    strategy: PruneStrategy | None,
    prune_layer: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Encoder pass with the strategy applied after `prune_layer`; a missing
    or 'none' strategy runs the monolithic encoder."""
    if strategy is None or strategy.is_identity:
        return model.encode(batch), batch.mask
    hidden, attn, _ = model.encode_until(
        batch, prune_layer, need_weights=strategy.needs_attention
    )
    pruned = apply_strategy(strategy, hidden, attn, batch.mask)
    enc_out = model.encode_resume(pruned.hidden, pruned.mask, prune_layer + 1)
    return enc_out, pruned.mask


def train(
    config: TrainConfig,
    model: SeqRecModel,
    train_examples: list[SequenceExample],
    valid_examples: list[SequenceExample],
    sid_index: SidIndex,
    run_log_path=None,
    validate_fn=None,
) -> TrainResult:
    """Run up to max_steps optimizer steps with periodic Recall@5 validation.

    Stops once `patience` consecutive validations fail to improve Recall@5;
    the parameters of the best validation are restored before returning.
    Per-step wall time excludes validation and batch assembly.
    """
    if not train_examples:
        raise ValueError("no training examples")
    if not config.strategy.is_identity and not (
        1 <= config.prune_layer <= model.config.n_enc_layers
    ):
        raise ValueError(
            f"prune_layer {config.prune_layer} out of range "
            f"[1, {model.config.n_enc_layers}]"
        )
    seed_everything(config.seed)
    vocab = SidVocab.for_index(sid_index)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=config.lr,
        weight_decay=config.weight_decay,
        eps=1e-8,
    )

    valid_subset = list(valid_examples)
    if len(valid_subset) > config.valid_subsample:
        picker = np.random.default_rng(config.seed)
        chosen = picker.choice(len(valid_subset), config.valid_subsample, replace=False)
        valid_subset = [valid_subset[i] for i in sorted(chosen)]

    if validate_fn is None and valid_subset:

        def validate_fn(m):
            report = evaluate(
                m,
                valid_subset,
                sid_index,
                Ks=(5,),
                beam=config.beam,
                strategy=config.strategy if config.eval_prune else None,
                prune_layer=config.prune_layer,
            )
            return report.recall[5]

    rng = np.random.default_rng(config.seed)
    losses: list[float] = []
    step_times: list[float] = []
    history: list[dict] = []
    best_recall = -math.inf
    best_state = None
    best_step = 0
    bad_validations = 0
    stopped_early = False
    step = 0
    log_file = open(run_log_path, "w", encoding="utf-8") if run_log_path else None

    try:
        model.train()
        while step < config.max_steps and not stopped_early:
            perm = rng.permutation(len(train_examples))
            for start in range(0, len(perm), config.batch_size):
                batch_examples = [train_examples[i] for i in perm[start : start + config.batch_size]]
                batch, targets = collate(batch_examples, vocab)

                t0 = time.perf_counter()
                enc_out, enc_mask = encoder_forward(
                    model, batch, config.strategy, config.prune_layer
                )
                loss = model.decode_loss(enc_out, enc_mask, targets)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at step {step + 1}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                step_times.append((time.perf_counter() - t0) * 1000.0)

                losses.append(loss.detach().item())
                step += 1

                if validate_fn is not None and step % config.valid_interval == 0:
                    recall5 = float(validate_fn(model))
                    record = {
                        "step": step,
                        "recall5": recall5,
                        "wall_step_ms_mean": float(np.mean(step_times)),
                    }
                    history.append(record)
                    if log_file:
                        log_file.write(json.dumps(record) + "\n")
                        log_file.flush()
                    if recall5 > best_recall:
                        best_recall = recall5
                        best_state = {
                            k: v.detach().clone() for k, v in model.state_dict().items()
                        }
                        best_step = step
                        bad_validations = 0
                    else:
                        bad_validations += 1
                        if bad_validations >= config.patience:
                            stopped_early = True
                            break
                    model.train()
                if step >= config.max_steps:
                    break
    finally:
        if log_file:
            log_file.close()

    if best_state is not None:
        model.load_state_dict(best_state)
    report = MetricsReport(
        recall={5: best_recall} if history else {},
        ndcg={},
        wall_step_ms_mean=float(np.mean(step_times)) if step_times else 0.0,
        wall_step_ms_std=float(np.std(step_times)) if step_times else 0.0,
        steps_run=step,
    )
    return TrainResult(
        model=model,
        report=report,
        losses=losses,
        step_times_ms=step_times,
        history=history,
        best_step=best_step,
        stopped_early=stopped_early,
    )


def expand_ranked_items(
    sequences: list, sid_index: SidIndex, limit: int
) -> list[str]:
    """Flatten ranked SID sequences into a ranked item list via popularity-
    ordered collision buckets; buckets partition the corpus so no dedup is
    needed."""
    items: list[str] = []
    for seq in sequences:
        items.extend(sid_index.bucket(seq))
        if len(items) >= limit:
            break
    return items[:limit]


def metrics_from_ranks(
    ranks: list[int | None], Ks=(5, 10)
) -> tuple[dict[int, float], dict[int, float]]:
    """Recall@K / NDCG@K from per-user 1-based hit ranks (None = miss)."""
    n = max(1, len(ranks))
    recall = {}
    ndcg = {}
    for k in Ks:
        hits = [r for r in ranks if r is not None and r <= k]
        recall[k] = len(hits) / n
        ndcg[k] = sum(1.0 / math.log2(r + 1) for r in hits) / n
    return recall, ndcg


def evaluate(
    model: SeqRecModel,
    examples: list[SequenceExample],
    sid_index: SidIndex,
    Ks=(5, 10),
    beam: int = 20,
    strategy: PruneStrategy | None = None,
    prune_layer: int = 2,
    batch_size: int = 64,
) -> MetricsReport:
    """Generate ranked items per example and average Recall@K / NDCG@K."""
    if beam < max(Ks):
        raise ValueError(f"beam {beam} must be >= max(Ks) {max(Ks)}")
    if not examples:
        return MetricsReport(recall={k: 0.0 for k in Ks}, ndcg={k: 0.0 for k in Ks})
    vocab = SidVocab.for_index(sid_index)
    limit = max(Ks)
    ranks: list[int | None] = []
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for start in range(0, len(examples), batch_size):
                chunk = examples[start : start + batch_size]
                batch, _ = collate(chunk, vocab)
                enc_out, enc_mask = encoder_forward(model, batch, strategy, prune_layer)
                sequences = model.generate(enc_out, enc_mask, sid_index, vocab, beam)
                for ex, seqs in zip(chunk, sequences):
                    ranked = expand_ranked_items(seqs, sid_index, limit)
                    rank = None
                    if ex.target_item in ranked:
                        rank = ranked.index(ex.target_item) + 1
                    ranks.append(rank)
    finally:
        model.train(was_training)
    recall, ndcg = metrics_from_ranks(ranks, Ks)
    return MetricsReport(recall=recall, ndcg=ndcg)


def popularity_baseline(
    popularity: dict[str, int],
    sid_index: SidIndex,
    examples: list[SequenceExample],
    Ks=(5, 10),
) -> MetricsReport:
    """Rank the corpus by train-interaction count (ties by item id) and score
    the same fixed top-K list for every user."""
    ranked = sorted(sid_index.forward, key=lambda item: (-popularity.get(item, 0), item))
    top = ranked[: max(Ks)]
    position = {item: i + 1 for i, item in enumerate(top)}
    ranks = [position.get(ex.target_item) for ex in examples]
    recall, ndcg = metrics_from_ranks(ranks, Ks)
    return MetricsReport(recall=recall, ndcg=ndcg)


def summarize_step_times(
    times_ms: list[float], warmup: int = 50, window: int = 50
) -> float:
    """Steady-state step time: drop `warmup` steps, average non-overlapping
    windows, take the median window mean. Short runs fall back to a plain
    mean of whatever remains."""
    if not times_ms:
        return float("nan")
    tail = times_ms[warmup:] if len(times_ms) > warmup else list(times_ms)
    full = [tail[i : i + window] for i in range(0, len(tail) - window + 1, window)]
    if not full:
        return float(np.mean(tail))
    return float(np.median([np.mean(w) for w in full]))
