"""Torch-side VLAD aggregation head and PCA fitting.

The head mirrors the retrieval engine's operator order exactly: softmax
soft-assignment over W x + b, residual aggregation against cluster centers,
per-cluster (intra) L2 normalization, row-major flatten, whole-vector L2,
then PCA as basis multiply, whitening scales, and a final L2 normalization.
The exported model file must reproduce engine descriptors, so any change
here is a format break.
"""

from __future__ import annotations

import numpy as np
import torch

PCA_WHITEN_EPS = 1e-8
ZERO_ROW_EPS = 1e-12


class VladHead(torch.nn.Module):
    """Cluster assignment and residual aggregation with optional PCA."""

    def __init__(self, num_clusters: int, feature_dim: int, alpha: float = 1.0,
                 seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        centers = torch.randn(num_clusters, feature_dim)
        self.centers = torch.nn.Parameter(centers)
        # proximity-driven init: softmax(2a c.x - a|c|^2) ~ exp(-a|x - c|^2)
        self.assign_weights = torch.nn.Parameter(2.0 * alpha * centers.clone())
        self.assign_bias = torch.nn.Parameter(
            -alpha * (centers**2).sum(dim=1))
        self.register_buffer("pca_mean", torch.zeros(0))
        self.register_buffer("pca_basis", torch.zeros(0, 0))
        self.register_buffer("pca_whiten", torch.zeros(0))
        self.eval()

    @property
    def num_clusters(self) -> int:
        return self.centers.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.centers.shape[1]

    @property
    def has_pca(self) -> bool:
        return self.pca_basis.numel() > 0

    @torch.no_grad()
    def raw_vlad(self, fmap: torch.Tensor) -> torch.Tensor:
        """(H, W, D) feature map -> unprojected (K, D) aggregate."""
        feats = fmap.reshape(-1, self.feature_dim).double()
        logits = feats @ self.assign_weights.t().double() \
            + self.assign_bias.double()
        assigns = torch.softmax(logits, dim=1)  # (N, K)
        raw = assigns.t() @ feats
        raw -= assigns.sum(dim=0)[:, None] * self.centers.double()
        return raw

    @torch.no_grad()
    def normalized_flat(self, raw: torch.Tensor) -> torch.Tensor:
        """Intra-normalize rows, flatten row-major, L2-normalize."""
        norms = raw.norm(dim=1, keepdim=True)
        intra = torch.where(norms < ZERO_ROW_EPS, raw, raw / norms)
        flat = intra.reshape(-1)
        return flat / flat.norm()

    @torch.no_grad()
    def descriptor(self, fmap: torch.Tensor) -> torch.Tensor:
        """(H, W, D) feature map -> unit-norm projected global descriptor."""
        if not self.has_pca:
            raise RuntimeError("PCA parameters not fitted or loaded")
        flat = self.normalized_flat(self.raw_vlad(fmap))
        proj = self.pca_basis.double() @ (flat - self.pca_mean.double())
        proj = proj * self.pca_whiten.double()
        return proj / proj.norm()

    @torch.no_grad()
    def fit_pca(self, flats: torch.Tensor, proj_dim: int) -> None:
        """Fit whitened PCA on normalized flat VLAD vectors: (n, K*D)."""
        n = flats.shape[0]
        if n < proj_dim:
            raise ValueError(
                f"PCA corpus has {n} vectors, need at least {proj_dim}")
        x = flats.double()
        mean = x.mean(dim=0)
        centered = x - mean
        _, s, vh = torch.linalg.svd(centered, full_matrices=False)
        eigvals = (s**2) / (n - 1)
        self.pca_mean = mean
        self.pca_basis = vh[:proj_dim]
        self.pca_whiten = 1.0 / torch.sqrt(eigvals[:proj_dim] + PCA_WHITEN_EPS)

    @torch.no_grad()
    def export_tensors(self) -> dict[str, np.ndarray]:
        if not self.has_pca:
            raise RuntimeError("PCA parameters not fitted or loaded")
        return {
            "centers": self.centers.numpy().astype(np.float32),
            "assign_weights": self.assign_weights.numpy().astype(np.float32),
            "assign_bias": self.assign_bias.numpy().astype(np.float32),
            "pca_mean": self.pca_mean.numpy().astype(np.float32),
            "pca_basis": self.pca_basis.numpy().astype(np.float32),
            "pca_whiten": self.pca_whiten.numpy().astype(np.float32),
        }
