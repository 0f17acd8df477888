"""Cross-entropy objectives over dense label maps, with hard-example mining.

Both losses ignore pixels labeled ``ignore_index`` and average over the
pixels that remain. The mined variant keeps only pixels the model finds hard
(true-class probability under a threshold), with a floor of ``min_kept``
pixels so the gradient never collapses to a handful of outliers; selection
happens outside the autograd graph, so only the kept pixels' log-probs
receive gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, DataError


@dataclass
class OhemConfig:
    """Hard-example mining knobs: keep p_true < prob_threshold, at least min_kept."""

    prob_threshold: float = 0.7
    min_kept: int = 256

    def validate(self) -> None:
        if not 0.0 < self.prob_threshold < 1.0:
            raise ConfigurationError(
                f"prob_threshold must lie in (0, 1), got {self.prob_threshold}"
            )
        if self.min_kept < 1:
            raise ConfigurationError(f"min_kept must be positive, got {self.min_kept}")


def _flatten_valid(logits: torch.Tensor, labels: torch.Tensor, ignore_index: int):
    """Validate shapes/labels; return ([N, K] logits, [N] labels) for valid pixels."""
    if logits.ndim != 4:
        raise ConfigurationError(f"expected [B,K,H,W] logits, got {tuple(logits.shape)}")
    if labels.ndim != 3:
        raise ConfigurationError(f"expected [B,H,W] labels, got {tuple(labels.shape)}")
    if logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise ConfigurationError(
            f"logits {tuple(logits.shape)} do not align with labels {tuple(labels.shape)}"
        )
    num_classes = logits.shape[1]
    flat_logits = logits.permute(0, 2, 3, 1).reshape(-1, num_classes)
    flat_labels = labels.reshape(-1)

    valid = flat_labels != ignore_index
    bad = flat_labels[valid]
    if bad.numel() and (bad.min() < 0 or bad.max() >= num_classes):
        raise DataError(
            f"labels must be in [0, {num_classes}) or {ignore_index}, "
            f"found range [{int(bad.min())}, {int(bad.max())}]"
        )
    if not bool(valid.any()):
        raise DataError("no valid pixels: every label equals the ignore index")
    return flat_logits[valid], flat_labels[valid]


def cross_entropy_loss(logits: torch.Tensor, labels: torch.Tensor,
                       ignore_index: int = 255) -> torch.Tensor:
    """Mean negative log-likelihood over non-ignored pixels."""
    flat_logits, flat_labels = _flatten_valid(logits, labels, ignore_index)
    log_probs = F.log_softmax(flat_logits, dim=1)
    picked = log_probs.gather(1, flat_labels.unsqueeze(1).to(torch.int64)).squeeze(1)
    return -picked.mean()


def ohem_select(p_true: torch.Tensor, prob_threshold: float, min_kept: int) -> torch.Tensor:
    """Boolean keep-mask over a 1-D vector of true-class probabilities.

    Keeps everything under the threshold; if that keeps fewer than
    ``min_kept`` pixels, tops up with the lowest-probability remainder
    (stable order, so ties resolve by position). Keeps all pixels when fewer
    than ``min_kept`` exist.
    """
    if p_true.ndim != 1:
        raise ConfigurationError(f"p_true must be 1-D, got shape {tuple(p_true.shape)}")
    n = p_true.numel()
    keep = p_true < prob_threshold
    needed = min(min_kept, n)
    kept = int(keep.sum())
    if kept < needed:
        order = torch.argsort(p_true, stable=True)
        keep = keep.clone()
        keep[order[:needed]] = True
    return keep


def ohem_cross_entropy(logits: torch.Tensor, labels: torch.Tensor,
                       ignore_index: int = 255,
                       config: OhemConfig | None = None) -> torch.Tensor:
    """Cross-entropy averaged over mined hard pixels only.

    Selection runs under no_grad on detached probabilities: which pixels are
    kept is data, not a differentiable decision.
    """
    cfg = config if config is not None else OhemConfig()
    cfg.validate()
    flat_logits, flat_labels = _flatten_valid(logits, labels, ignore_index)
    with torch.no_grad():
        probs = F.softmax(flat_logits, dim=1)
        p_true = probs.gather(1, flat_labels.unsqueeze(1).to(torch.int64)).squeeze(1)
        keep = ohem_select(p_true, cfg.prob_threshold, cfg.min_kept)
    log_probs = F.log_softmax(flat_logits[keep], dim=1)
    picked = log_probs.gather(1, flat_labels[keep].unsqueeze(1).to(torch.int64)).squeeze(1)
    return -picked.mean()
