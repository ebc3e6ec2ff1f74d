"""Token importance scoring and mid-encoder sequence pruning.

The main strategy keeps the top-rho fraction of tokens ranked by
(attention centrality x semantic saliency); baselines are l2-norm selection
and non-overlapping max/average pooling. All functions are pure and operate
on [B, S, ...] tensors with right-aligned padding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

STRATEGY_KINDS = ("rastp", "l2norm", "maxpool", "avgpool", "none")


class PrunerError(ValueError):
    pass


@dataclass(frozen=True)
class PruneStrategy:
    kind: str = "rastp"
    rho: float = 0.7
    pool_window: int = 2

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise PrunerError(
                f"unknown strategy {self.kind!r}; expected one of {STRATEGY_KINDS}"
            )
        if not 0.0 < self.rho <= 1.0:
            raise PrunerError(f"rho must be in (0, 1], got {self.rho}")
        if self.kind in ("maxpool", "avgpool") and self.pool_window < 2:
            raise PrunerError(f"pool_window must be >= 2, got {self.pool_window}")

    @property
    def needs_attention(self) -> bool:
        return self.kind == "rastp"

    @property
    def is_identity(self) -> bool:
        return self.kind == "none"


@dataclass(frozen=True)
class ImportanceScores:
    """Per-token scores [B, S]; masked positions carry -inf so they sort
    below any real token. scores = centrality * saliency elementwise."""

    scores: torch.Tensor
    saliency: torch.Tensor
    centrality: torch.Tensor


@dataclass(frozen=True)
class PruneResult:
    """Shortened hidden states [B, K, d] and mask [B, K]. kept_indices holds
    the per-row ascending source positions, or None for pooled outputs whose
    vectors are aggregates rather than copies."""

    kept_indices: torch.Tensor | None
    hidden: torch.Tensor
    mask: torch.Tensor
    keep_count: int


def score_tokens(
    hidden: torch.Tensor, attn: torch.Tensor, mask: torch.Tensor
) -> ImportanceScores:
    """Importance = (attention mass received over heads and unmasked queries)
    x (l1 norm of the token's hidden state); -inf at masked positions."""
    if hidden.dim() != 3:
        raise PrunerError("hidden must have shape [B, S, d]")
    B, S, _ = hidden.shape
    if attn.dim() != 4 or attn.shape[0] != B or attn.shape[2:] != (S, S):
        raise PrunerError("attention must have shape [B, H, S, S]")
    if mask.shape != (B, S):
        raise PrunerError("mask must have shape [B, S]")
    if not torch.isfinite(hidden).all():
        raise PrunerError("non-finite hidden states")
    with torch.no_grad():
        saliency = hidden.abs().sum(dim=-1)
        # padded queries are batching artifacts; exclude them from the mass
        centrality = (attn * mask[:, None, :, None]).sum(dim=(1, 2))
        scores = (centrality * saliency).masked_fill(~mask, float("-inf"))
    return ImportanceScores(scores=scores, saliency=saliency, centrality=centrality)


def _keep_count(rho: float, seq_len: int) -> int:
    if not 0.0 < rho <= 1.0:
        raise PrunerError(f"rho must be in (0, 1], got {rho}")
    # epsilon guards float artifacts like 0.29 * 100 = 28.999...
    return min(seq_len, max(1, math.floor(rho * seq_len + 1e-9)))


def _gather_topk(
    hidden: torch.Tensor, mask: torch.Tensor, scores: torch.Tensor, keep: int
) -> PruneResult:
    order = torch.argsort(-scores, dim=1, stable=True)  # ties: lower index first
    kept = order[:, :keep].sort(dim=1).values
    gathered = hidden.gather(1, kept[:, :, None].expand(-1, -1, hidden.shape[-1]))
    return PruneResult(
        kept_indices=kept,
        hidden=gathered,
        mask=mask.gather(1, kept),
        keep_count=keep,
    )


def select_and_gather(
    hidden: torch.Tensor,
    mask: torch.Tensor,
    scores: ImportanceScores,
    rho: float,
) -> PruneResult:
    """Keep the floor(rho * S) highest-scoring positions per row (at least 1,
    uniform across the batch), re-sorted ascending to preserve order."""
    keep = _keep_count(rho, hidden.shape[1])
    return _gather_topk(hidden, mask, scores.scores, keep)


def baseline_l2_select(
    hidden: torch.Tensor, mask: torch.Tensor, rho: float
) -> PruneResult:
    """Selection by the l2 norm of each token's hidden state; no attention."""
    if not torch.isfinite(hidden).all():
        raise PrunerError("non-finite hidden states")
    with torch.no_grad():
        scores = hidden.pow(2).sum(dim=-1).sqrt().masked_fill(~mask, float("-inf"))
    keep = _keep_count(rho, hidden.shape[1])
    return _gather_topk(hidden, mask, scores, keep)


def baseline_pool(
    hidden: torch.Tensor, mask: torch.Tensor, kind: str, window: int
) -> PruneResult:
    """Collapse non-overlapping windows of `window` positions into one vector
    (elementwise max or mean over the window's unmasked members). A trailing
    partial window pools its remainder; all-pad windows stay masked out."""
    if kind not in ("maxpool", "avgpool"):
        raise PrunerError(f"pooling kind must be maxpool or avgpool, got {kind!r}")
    if window < 1:
        raise PrunerError(f"window must be >= 1, got {window}")
    B, S, d = hidden.shape
    n_win = math.ceil(S / window)
    pad = n_win * window - S
    if pad:
        hidden = torch.nn.functional.pad(hidden, (0, 0, 0, pad))
        mask = torch.nn.functional.pad(mask, (0, pad))
    hw = hidden.view(B, n_win, window, d)
    mw = mask.view(B, n_win, window)
    out_mask = mw.any(dim=-1)
    if kind == "avgpool":
        sums = (hw * mw[:, :, :, None]).sum(dim=2)
        counts = mw.sum(dim=2).clamp(min=1)
        pooled = sums / counts[:, :, None]
    else:
        pooled = hw.masked_fill(~mw[:, :, :, None], float("-inf")).amax(dim=2)
        pooled = torch.where(out_mask[:, :, None], pooled, torch.zeros_like(pooled))
    return PruneResult(kept_indices=None, hidden=pooled, mask=out_mask, keep_count=n_win)


def apply_strategy(
    strategy: PruneStrategy,
    hidden: torch.Tensor,
    attn: torch.Tensor | None,
    mask: torch.Tensor,
) -> PruneResult:
    """Dispatch one pruning step; `attn` is only required for kind 'rastp'."""
    if strategy.kind == "none":
        kept = torch.arange(hidden.shape[1], device=hidden.device)
        kept = kept[None, :].expand(hidden.shape[0], -1)
        return PruneResult(
            kept_indices=kept, hidden=hidden, mask=mask, keep_count=hidden.shape[1]
        )
    if strategy.kind == "rastp":
        if attn is None:
            raise PrunerError("rastp scoring needs the split layer's attention")
        scores = score_tokens(hidden, attn, mask)
        return select_and_gather(hidden, mask, scores, strategy.rho)
    if strategy.kind == "l2norm":
        return baseline_l2_select(hidden, mask, strategy.rho)
    return baseline_pool(hidden, mask, strategy.kind, strategy.pool_window)
