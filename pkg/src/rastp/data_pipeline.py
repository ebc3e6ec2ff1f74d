"""Interaction-log ingestion, leave-one-out splits, token sequence assembly,
and synthetic clustered corpora for desk-scale experiments."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sid_tokenizer import ItemEmbedding, SidIndex, SidSequence


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class InteractionLog:
    """(user_id, item_id, timestamp) records; order is not significant."""

    records: list[tuple[str, str, int]]

    def by_user(self) -> dict[str, list[tuple[str, str, int]]]:
        """Per-user records sorted by (timestamp, item_id)."""
        users: dict[str, list[tuple[str, str, int]]] = {}
        for rec in self.records:
            users.setdefault(rec[0], []).append(rec)
        for recs in users.values():
            recs.sort(key=lambda r: (r[2], r[1]))
        return users


@dataclass(frozen=True)
class UserSplit:
    user_id: str
    train: list[str]  # all but the last two interactions, oldest first
    valid: str  # second-to-last item
    test: str  # last item


@dataclass(frozen=True)
class SidVocab:
    """Token-id layout: [pad, bos, level-0 codes, level-1 codes, ...]."""

    num_levels: int
    codebook_size: int

    pad_id = 0
    bos_id = 1
    n_specials = 2

    @classmethod
    def for_index(cls, index: SidIndex) -> "SidVocab":
        return cls(num_levels=index.num_levels, codebook_size=index.codebook_size)

    @property
    def vocab_size(self) -> int:
        return self.n_specials + self.num_levels * self.codebook_size

    def token_for(self, level: int, code: int) -> int:
        if not 0 <= level < self.num_levels:
            raise DataError(f"level {level} out of range [0, {self.num_levels})")
        if not 0 <= code < self.codebook_size:
            raise DataError(f"code {code} out of range [0, {self.codebook_size})")
        return self.n_specials + level * self.codebook_size + code

    def code_for(self, token: int) -> tuple[int, int]:
        if not self.n_specials <= token < self.vocab_size:
            raise DataError(f"token {token} is not a code token")
        level, code = divmod(token - self.n_specials, self.codebook_size)
        return level, code

    def tokens_for_sequence(self, seq: SidSequence) -> list[int]:
        return [self.token_for(level, code) for level, code in enumerate(seq)]


@dataclass(frozen=True)
class SequenceExample:
    """History token sequence plus the next item's SID codes."""

    user_id: str
    input_tokens: list[int]
    target_codes: SidSequence
    target_item: str


def load_interactions(path) -> InteractionLog:
    """Parse `user_id<TAB>item_id<TAB>timestamp` lines; exact duplicate
    triples are dropped."""
    records: list[tuple[str, str, int]] = []
    seen: set[tuple[str, str, int]] = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise DataError(
                    f"{path}:{lineno}: expected user_id<TAB>item_id<TAB>timestamp, "
                    f"got {len(parts)} fields"
                )
            user_id, item_id, ts_raw = parts
            if not user_id or not item_id:
                raise DataError(f"{path}:{lineno}: empty user or item id")
            try:
                ts = int(ts_raw)
            except ValueError:
                raise DataError(
                    f"{path}:{lineno}: timestamp {ts_raw!r} is not an integer"
                ) from None
            rec = (user_id, item_id, ts)
            if rec not in seen:
                seen.add(rec)
                records.append(rec)
    return InteractionLog(records=records)


def save_interactions(path, log: InteractionLog) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for user_id, item_id, ts in log.records:
            f.write(f"{user_id}\t{item_id}\t{ts}\n")


def core_filter(log: InteractionLog, min_interactions: int) -> InteractionLog:
    """Iteratively drop users AND items with fewer than `min_interactions`
    records until nothing changes (the k-core of the interaction graph)."""
    records = list(log.records)
    if min_interactions <= 0:
        return InteractionLog(records=records)
    while True:
        user_counts = Counter(r[0] for r in records)
        item_counts = Counter(r[1] for r in records)
        kept = [
            r
            for r in records
            if user_counts[r[0]] >= min_interactions
            and item_counts[r[1]] >= min_interactions
        ]
        if len(kept) == len(records):
            return InteractionLog(records=kept)
        records = kept


def split_leave_one_out(
    log: InteractionLog, min_interactions: int = 5
) -> list[UserSplit]:
    """Core-filter, then reserve each user's last item for test and the
    second-to-last for validation. Users left with < 3 records are skipped."""
    filtered = core_filter(log, min_interactions)
    per_user = filtered.by_user()
    splits = []
    for user_id in sorted(per_user):
        recs = per_user[user_id]
        if len(recs) < 3:
            continue
        items = [r[1] for r in recs]
        splits.append(
            UserSplit(
                user_id=user_id, train=items[:-2], valid=items[-2], test=items[-1]
            )
        )
    return splits


def train_popularity(splits: list[UserSplit]) -> dict[str, int]:
    """Interaction counts over train-phase items only (no target leakage)."""
    counts: Counter[str] = Counter()
    for split in splits:
        counts.update(split.train)
    return dict(counts)


def _history_tokens(
    items: list[str], sid_index: SidIndex, vocab: SidVocab, max_items: int
) -> list[int]:
    tokens: list[int] = []
    for item in items[-max_items:]:
        seq = sid_index.forward.get(item)
        if seq is None:
            raise DataError(f"unknown item {item!r}: not present in the SID index")
        tokens.extend(vocab.tokens_for_sequence(seq))
    return tokens


def make_examples(
    splits: list[UserSplit],
    sid_index: SidIndex,
    max_seq: int,
    phase: str,
    all_prefixes: bool = True,
) -> list[SequenceExample]:
    """Build model examples for one phase.

    train: one example per history prefix (or only the final prefix when
    `all_prefixes` is off). valid: full train history -> valid item.
    test: train history plus the valid item -> test item. Histories are
    truncated to whole items from the oldest end so the token count stays
    <= max_seq and divisible by the number of SID levels.
    """
    if phase not in ("train", "valid", "test"):
        raise DataError(f"unknown phase {phase!r}")
    vocab = SidVocab.for_index(sid_index)
    max_items = max_seq // sid_index.num_levels
    if max_items < 1:
        raise DataError(f"max_seq {max_seq} cannot hold one {sid_index.num_levels}-level item")

    def example(split, history, target):
        seq = sid_index.forward.get(target)
        if seq is None:
            raise DataError(f"unknown item {target!r}: not present in the SID index")
        return SequenceExample(
            user_id=split.user_id,
            input_tokens=_history_tokens(history, sid_index, vocab, max_items),
            target_codes=seq,
            target_item=target,
        )

    examples = []
    for split in splits:
        if phase == "train":
            if len(split.train) < 2:
                continue
            positions = range(1, len(split.train)) if all_prefixes else [len(split.train) - 1]
            for t in positions:
                examples.append(example(split, split.train[:t], split.train[t]))
        elif phase == "valid":
            examples.append(example(split, split.train, split.valid))
        else:
            examples.append(example(split, split.train + [split.valid], split.test))
    return examples


def synth_corpus(
    n_users: int,
    n_items: int,
    n_clusters: int,
    d_feat: int,
    seed: int,
    *,
    sigma: float = 0.05,
    min_len: int = 20,
    max_len: int = 60,
    within_cluster: float = 0.8,
    chain_strength: float = 0.0,
) -> tuple[InteractionLog, list[ItemEmbedding]]:
    """Clustered synthetic corpus: item embeddings from `n_clusters` Gaussian
    blobs on the unit sphere; each user prefers one cluster and draws
    `within_cluster` of their interactions from it, timestamps increasing.

    `chain_strength` optionally makes in-cluster picks follow a fixed cyclic
    successor order instead of a uniform draw, giving histories a learnable
    sequential signal.
    """
    if n_items < n_clusters:
        raise DataError(f"n_items {n_items} < n_clusters {n_clusters}")
    if min_len < 1 or max_len < min_len:
        raise DataError("need 1 <= min_len <= max_len")
    rng = np.random.default_rng(seed)

    centers = rng.normal(size=(n_clusters, d_feat))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    cluster_of = np.arange(n_items) % n_clusters
    item_ids = [f"item_{i:05d}" for i in range(n_items)]
    embeddings = [
        ItemEmbedding(
            item_id=item_ids[i],
            vector=centers[cluster_of[i]] + sigma * rng.normal(size=d_feat),
        )
        for i in range(n_items)
    ]

    cluster_items: list[list[int]] = [
        [i for i in range(n_items) if cluster_of[i] == c] for c in range(n_clusters)
    ]
    successor: dict[int, int] = {}
    for members in cluster_items:
        order = [members[j] for j in rng.permutation(len(members))]
        for a, b in zip(order, order[1:] + order[:1]):
            successor[a] = b

    records: list[tuple[str, str, int]] = []
    for u in range(n_users):
        user_id = f"user_{u:05d}"
        pref = int(rng.integers(n_clusters))
        n_inter = int(rng.integers(min_len, max_len + 1))
        prev: int | None = None
        for k in range(n_inter):
            if rng.random() < within_cluster:
                if prev is not None and rng.random() < chain_strength:
                    item = successor[prev]
                else:
                    members = cluster_items[pref]
                    item = members[int(rng.integers(len(members)))]
                prev = item
            else:
                item = int(rng.integers(n_items))
            ts = 1_000_000_000 + k * 3600 + (u % 60)
            records.append((user_id, item_ids[item], ts))
    return InteractionLog(records=records), embeddings


def write_split_manifest(path, splits: list[UserSplit]) -> None:
    """JSON audit of the split: per user, train items and the two targets."""
    payload = {
        "n_users": len(splits),
        "users": [
            {
                "user_id": s.user_id,
                "n_train": len(s.train),
                "train": s.train,
                "valid": s.valid,
                "test": s.test,
            }
            for s in splits
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")
