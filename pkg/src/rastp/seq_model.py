"""Minimal encoder-decoder transformer over the SID token vocabulary.

The encoder can be split at any layer boundary (encode_until / encode_resume)
so a pruning step may shorten the sequence mid-stack; the attention weights of
the split layer are exposed for importance scoring. Decoding is teacher-forced
cross-entropy for training and trie-constrained beam search for generation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data_pipeline import SidVocab
from .serialization import read_container, write_container
from .sid_tokenizer import SidIndex, SidSequence

CHECKPOINT_FILE_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    d_mlp: int = 256
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    dropout: float = 0.0
    max_seq: int = 120

    def __post_init__(self):
        counts = {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_mlp": self.d_mlp,
            "n_enc_layers": self.n_enc_layers,
            "n_dec_layers": self.n_dec_layers,
            "max_seq": self.max_seq,
        }
        for name, value in counts.items():
            if value < 1:
                raise ModelError(f"{name} must be >= 1, got {value}")
        if self.d_model % self.n_heads != 0:
            raise ModelError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass(frozen=True)
class TokenBatch:
    """Padded token ids [B, S] with a boolean mask (True = real token)."""

    token_ids: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self):
        if self.token_ids.shape != self.mask.shape or self.token_ids.dim() != 2:
            raise ModelError("token_ids and mask must share shape [B, S]")
        if self.mask.dtype != torch.bool:
            raise ModelError("mask must be boolean")
        if not bool(self.mask.any(dim=1).all()):
            raise ModelError("every row needs at least one unmasked token")
        # pads must be right-aligned: mask nonincreasing along the row
        m = self.mask.to(torch.int8)
        if bool((m[:, 1:] > m[:, :-1]).any()):
            raise ModelError("pads must be right-aligned")
        if bool((self.token_ids < 0).any()):
            raise ModelError("negative token ids")


def seed_everything(seed: int, threads: int | None = None) -> None:
    """Seed torch's global RNG; optionally pin the CPU thread count (single
    thread gives bit-identical runs)."""
    torch.manual_seed(seed)
    if threads is not None and threads > 0:
        torch.set_num_threads(threads)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.weight_dropout = nn.Dropout(dropout)

    def forward(self, query, keys, key_mask=None, causal=False, need_weights=False):
        B, Tq, d = query.shape
        Tk = keys.shape[1]
        q = self.q_proj(query).view(B, Tq, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k_proj(keys).view(B, Tk, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v_proj(keys).view(B, Tk, self.n_heads, self.d_head).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.d_head)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        if causal:
            future = torch.ones(Tq, Tk, dtype=torch.bool, device=query.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        weights = scores.softmax(dim=-1)
        out = self.weight_dropout(weights) @ v
        out = out.transpose(1, 2).reshape(B, Tq, d)
        return self.out_proj(out), (weights if need_weights else None)


class EncoderLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.attn = MultiHeadAttention(config.d_model, config.n_heads, config.dropout)
        self.ln1 = nn.LayerNorm(config.d_model)
        self.ln2 = nn.LayerNorm(config.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(config.d_model, config.d_mlp),
            nn.GELU(),
            nn.Linear(config.d_mlp, config.d_model),
        )
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x, mask, need_weights=False):
        h = self.ln1(x)
        a, w = self.attn(h, h, key_mask=mask, need_weights=need_weights)
        x = x + self.dropout(a)
        x = x + self.dropout(self.mlp(self.ln2(x)))
        return x, w


class DecoderLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(config.d_model, config.n_heads, config.dropout)
        self.cross_attn = MultiHeadAttention(config.d_model, config.n_heads, config.dropout)
        self.ln1 = nn.LayerNorm(config.d_model)
        self.ln2 = nn.LayerNorm(config.d_model)
        self.ln3 = nn.LayerNorm(config.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(config.d_model, config.d_mlp),
            nn.GELU(),
            nn.Linear(config.d_mlp, config.d_model),
        )
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, y, memory, memory_mask):
        h = self.ln1(y)
        a, _ = self.self_attn(h, h, causal=True)
        y = y + self.dropout(a)
        a, _ = self.cross_attn(self.ln2(y), memory, key_mask=memory_mask)
        y = y + self.dropout(a)
        y = y + self.dropout(self.mlp(self.ln3(y)))
        return y


class SeqRecModel(nn.Module):
    """Pre-LN encoder-decoder; encoder output is normalized at the decoder
    boundary so splitting the encoder at any layer is exact."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.token_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.enc_pos = nn.Embedding(config.max_seq, config.d_model)
        self.dec_pos = nn.Embedding(config.max_seq, config.d_model)
        self.emb_dropout = nn.Dropout(config.dropout)
        self.enc_layers = nn.ModuleList(
            EncoderLayer(config) for _ in range(config.n_enc_layers)
        )
        self.dec_layers = nn.ModuleList(
            DecoderLayer(config) for _ in range(config.n_dec_layers)
        )
        self.enc_norm = nn.LayerNorm(config.d_model)
        self.dec_norm = nn.LayerNorm(config.d_model)
        self.lm_head = nn.Linear(config.d_model, config.vocab_size, bias=False)
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module):
        if isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, std=0.02)

    def _check_batch(self, batch: TokenBatch):
        if bool((batch.token_ids >= self.config.vocab_size).any()):
            raise ModelError("token id >= vocab_size")
        if batch.token_ids.shape[1] > self.config.max_seq:
            raise ModelError(
                f"sequence length {batch.token_ids.shape[1]} exceeds max_seq "
                f"{self.config.max_seq}"
            )

    # ------------------------------------------------------------------ encoder

    def encode_until(self, batch: TokenBatch, stop_layer: int, need_weights: bool = True):
        """Run embedding + encoder layers 1..stop_layer.

        Returns (hidden [B, S, d], attention weights of layer `stop_layer`
        [B, H, S, S] or None, the unchanged batch).
        """
        if not 1 <= stop_layer <= self.config.n_enc_layers:
            raise ModelError(
                f"stop_layer {stop_layer} out of range [1, {self.config.n_enc_layers}]"
            )
        self._check_batch(batch)
        ids = batch.token_ids
        pos = torch.arange(ids.shape[1], device=ids.device)
        x = self.emb_dropout(self.token_emb(ids) + self.enc_pos(pos)[None, :, :])
        attn = None
        for i, layer in enumerate(self.enc_layers[:stop_layer], start=1):
            x, w = layer(x, batch.mask, need_weights=need_weights and i == stop_layer)
            if i == stop_layer:
                attn = w
        return x, attn, batch

    def encode_resume(self, hidden: torch.Tensor, mask: torch.Tensor, start_layer: int):
        """Run encoder layers start_layer..n on (possibly shortened) states.
        start_layer == n_enc_layers + 1 is the no-op boundary."""
        if not 1 <= start_layer <= self.config.n_enc_layers + 1:
            raise ModelError(
                f"start_layer {start_layer} out of range "
                f"[1, {self.config.n_enc_layers + 1}]"
            )
        if hidden.dim() != 3 or hidden.shape[-1] != self.config.d_model:
            raise ModelError("hidden must have shape [B, S, d_model]")
        if mask.shape != hidden.shape[:2]:
            raise ModelError("mask shape does not match hidden states")
        x = hidden
        for layer in self.enc_layers[start_layer - 1 :]:
            x, _ = layer(x, mask)
        return x

    def encode(self, batch: TokenBatch) -> torch.Tensor:
        """Full encoder stack without materializing attention weights."""
        hidden, _, _ = self.encode_until(batch, self.config.n_enc_layers, need_weights=False)
        return hidden

    # ------------------------------------------------------------------ decoder

    def _decode_logits(self, dec_tokens, enc_out, enc_mask):
        memory = self.enc_norm(enc_out)
        pos = torch.arange(dec_tokens.shape[1], device=dec_tokens.device)
        y = self.emb_dropout(self.token_emb(dec_tokens) + self.dec_pos(pos)[None, :, :])
        for layer in self.dec_layers:
            y = layer(y, memory, enc_mask)
        return self.lm_head(self.dec_norm(y))

    def decode_loss(self, enc_out, enc_mask, targets: torch.Tensor) -> torch.Tensor:
        """Teacher-forced cross-entropy: mean over rows of the summed
        per-level negative log-likelihood. `targets` holds token ids [B, L]."""
        if targets.dim() != 2 or targets.shape[0] != enc_out.shape[0]:
            raise ModelError("targets must have shape [B, L]")
        if bool((targets >= self.config.vocab_size).any()) or bool((targets < 0).any()):
            raise ModelError("target code >= vocab_size")
        if not torch.isfinite(enc_out).all():
            raise ModelError("non-finite encoder output")
        bos = torch.full(
            (targets.shape[0], 1), SidVocab.bos_id, dtype=targets.dtype, device=targets.device
        )
        dec_in = torch.cat([bos, targets[:, :-1]], dim=1)
        logits = self._decode_logits(dec_in, enc_out, enc_mask)
        nll = F.cross_entropy(
            logits.reshape(-1, self.config.vocab_size), targets.reshape(-1), reduction="none"
        )
        return nll.view(targets.shape).sum(dim=1).mean()

    def generate(
        self,
        enc_out: torch.Tensor,
        enc_mask: torch.Tensor,
        index: SidIndex,
        vocab: SidVocab,
        beam: int,
    ) -> list[list[SidSequence]]:
        """Trie-constrained beam search, one ranked code-tuple list per row.

        Runs exactly index.num_levels steps; each step expands only codes the
        prefix trie allows. Sequences are scored by summed full-vocabulary
        log-probability and ranked descending, ties broken lexicographically.
        """
        if beam < 1:
            raise ModelError("beam must be >= 1")
        if index.n_sequences == 0:
            raise ModelError("empty trie: no valid sequences to decode")
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                return self._beam_search(enc_out, enc_mask, index, vocab, beam)
        finally:
            self.train(was_training)

    def _beam_search(self, enc_out, enc_mask, index, vocab, beam):
        B = enc_out.shape[0]
        beams: list[list[tuple[float, SidSequence]]] = [[(0.0, ())] for _ in range(B)]
        for level in range(index.num_levels):
            rows: list[int] = []
            dec_tokens: list[list[int]] = []
            for i in range(B):
                for _, codes in beams[i]:
                    rows.append(i)
                    dec_tokens.append(
                        [vocab.bos_id] + vocab.tokens_for_sequence(codes)
                    )
            row_idx = torch.tensor(rows, dtype=torch.long, device=enc_out.device)
            tokens = torch.tensor(dec_tokens, dtype=torch.long, device=enc_out.device)
            logits = self._decode_logits(
                tokens, enc_out[row_idx], enc_mask[row_idx]
            )[:, -1]
            logp = F.log_softmax(logits, dim=-1).cpu().numpy()

            flat = 0
            new_beams: list[list[tuple[float, SidSequence]]] = []
            for i in range(B):
                candidates: list[tuple[float, SidSequence]] = []
                for score, codes in beams[i]:
                    for code in index.children(codes):
                        tok = vocab.token_for(level, code)
                        candidates.append((score + float(logp[flat, tok]), codes + (code,)))
                    flat += 1
                candidates.sort(key=lambda c: (-c[0], c[1]))
                new_beams.append(candidates[:beam])
            beams = new_beams
        return [[codes for _, codes in row] for row in beams]


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest (config, step, seed, parameter layout) plus a
# little-endian float32 payload holding every parameter in state_dict order.


def save_checkpoint(path, model: SeqRecModel, step: int = 0, seed: int = 0) -> None:
    entries = list(model.state_dict().items())
    manifest = {
        "config": asdict(model.config),
        "step": step,
        "seed": seed,
        "dtype": "<f4",
        "params": [{"name": n, "shape": list(t.shape)} for n, t in entries],
    }
    payload = b"".join(
        np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes()
        for _, t in entries
    )
    write_container(path, CHECKPOINT_FILE_VERSION, manifest, payload)


def load_checkpoint(path) -> tuple[SeqRecModel, int, int]:
    manifest, payload = read_container(path, CHECKPOINT_FILE_VERSION)
    model = SeqRecModel(ModelConfig(**manifest["config"]))
    state = {}
    offset = 0
    for meta in manifest["params"]:
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        arr = np.frombuffer(payload, dtype=manifest["dtype"], count=count, offset=offset)
        state[meta["name"]] = torch.from_numpy(arr.copy().reshape(meta["shape"]))
        offset += count * 4
    model.load_state_dict(state)
    return model, manifest["step"], manifest["seed"]
