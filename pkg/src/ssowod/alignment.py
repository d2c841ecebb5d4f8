"""Cross-correlation feature alignment between current and detached query embeddings."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ParameterError, ShapeError

log = logging.getLogger(__name__)


@dataclass
class CrossCorrelationMatrix:
    C: torch.Tensor  # (D, D)
    n: int
    degenerate_dims: tuple[int, ...] = ()


def _standardize(x: torch.Tensor, eps: float):
    mean = x.mean(0, keepdim=True)
    std = (x - mean).pow(2).mean(0, keepdim=True).sqrt()
    degenerate = (std < eps).squeeze(0)
    return (x - mean) / std.clamp_min(eps), degenerate


def cross_correlation(A: torch.Tensor, B: torch.Tensor, eps: float = 1e-8) -> CrossCorrelationMatrix:
    """``C = A_hat^T B_hat / n`` with each column standardized over the ``n`` samples."""
    if A.shape != B.shape or A.ndim != 2:
        raise ShapeError(f"need equal (n, D) inputs, got {tuple(A.shape)} and {tuple(B.shape)}")
    n = A.shape[0]
    if n < 2:
        raise ParameterError("feature alignment needs at least 2 samples per batch")
    a, da = _standardize(A, eps)
    b, db = _standardize(B, eps)
    degenerate = tuple(int(i) for i in (da | db).nonzero().flatten())
    if degenerate:
        log.debug("zero-variance embedding dims %s", degenerate)
    return CrossCorrelationMatrix(a.T @ b / n, n, degenerate)


def feature_alignment_loss(A: torch.Tensor, B: torch.Tensor, lambda_offdiag: float = 5e-3) -> torch.Tensor:
    """Redundancy-reduction loss: ``sum_d (1 - C_dd)^2 + lambda * sum_{d != d'} C_dd'^2``."""
    C = cross_correlation(A, B).C
    diag = torch.diagonal(C)
    on = (1 - diag).pow(2).sum()
    off = C.pow(2).sum() - diag.pow(2).sum()
    return on + lambda_offdiag * off


class MappingNetwork(nn.Module):
    """Two-layer projector ``D -> 2D -> D`` with a LayerNorm and ReLU in between."""

    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 2 * dim
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.LayerNorm(hidden), nn.ReLU(), nn.Linear(hidden, dim))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


@dataclass
class AlignmentBatch:
    """Query embeddings of one batch, each ``(B, M, D)``.

    ``z``: current model on the originals, ``z_a``: current model on the
    augmented images, ``z_bar_a``: detached model on the augmented images.
    """

    z: torch.Tensor
    z_a: torch.Tensor
    z_bar_a: torch.Tensor

    def __post_init__(self):
        if not (self.z.shape == self.z_a.shape == self.z_bar_a.shape):
            raise ShapeError("z, z_a and z_bar_a must share a shape")
        if self.z_bar_a.requires_grad:
            raise ParameterError("z_bar_a must come from the detached model (no gradient)")


def ssl_loss(batch: AlignmentBatch, mapper: MappingNetwork, lambda_offdiag: float = 5e-3) -> torch.Tensor:
    """``L_F(z_a, z) + L_F(G(z_a), z_bar_a)`` with samples = every query of every image."""
    D = batch.z.shape[-1]
    z = batch.z.reshape(-1, D)
    z_a = batch.z_a.reshape(-1, D)
    z_bar_a = batch.z_bar_a.reshape(-1, D).detach()
    return feature_alignment_loss(z_a, z, lambda_offdiag) + feature_alignment_loss(mapper(z_a), z_bar_a, lambda_offdiag)
