"""Ancestral sampling from the joint tree model and derived task samples.

All samplers are pure functions of (model, generator state); batch variants
vectorize over a leading axis and consume generator draws in a fixed order,
so identical generators reproduce identical bits.
"""

from dataclasses import dataclass

import numpy as np

from .model import JghmModel, ModelError

__all__ = [
    "Sample",
    "ContrastiveBatch",
    "NoisyImage",
    "sample_joint",
    "sample_joint_batch",
    "sample_contrastive_batch",
    "noise_image",
    "sample_text_for_class",
]


@dataclass(frozen=True)
class Sample:
    """One draw of every node value; states are 1-based.

    ``levels_im[l]`` holds level l+1 of the image tree. Batched samples
    carry a leading axis on the root and every level array.
    """

    root: np.ndarray
    levels_im: tuple
    levels_tx: tuple

    @property
    def x_im(self) -> np.ndarray:
        return self.levels_im[-1]

    @property
    def x_tx(self) -> np.ndarray:
        return self.levels_tx[-1]


@dataclass(frozen=True)
class ContrastiveBatch:
    """K image/text rows; row 0 is the paired sample, rows 1..K-1 are
    independent product-of-marginals negatives."""

    images: np.ndarray  # (K, d_im)
    texts: np.ndarray  # (K, d_tx)

    def __post_init__(self):
        if self.images.shape[0] != self.texts.shape[0] or self.images.shape[0] < 2:
            raise ModelError("contrastive batch needs K >= 2 aligned image/text rows")

    @property
    def K(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class NoisyImage:
    """Gaussian observation z = t * x_im + sqrt(t) * g at diffusion time t."""

    t: float
    z: np.ndarray

    def __post_init__(self):
        if self.t < 0:
            raise ModelError(f"diffusion time must be >= 0, got {self.t}")
        if not np.all(np.isfinite(self.z)):
            raise ModelError("noisy image has non-finite entries")


def _categorical_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one index per row of a (B, S) probability matrix; 0-based."""
    u = rng.random(probs.shape[0])
    idx = (u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def _sample_tree(model: JghmModel, modality: str, roots: np.ndarray, rng) -> tuple:
    """Ancestral pass below given root states (B,); returns per-level arrays."""
    levels = []
    parents = roots[:, None]  # (B, 1)
    for level_kernels in model.kernels(modality):
        m = len(level_kernels)
        B, n_prev = parents.shape
        children = np.empty((B, n_prev, m), dtype=np.int64)
        for j, kernel in enumerate(level_kernels):
            rows = kernel[(parents - 1).reshape(-1)]
            children[:, :, j] = _categorical_rows(rows, rng).reshape(B, n_prev) + 1
        parents = children.reshape(B, n_prev * m)
        levels.append(parents)
    return tuple(levels)


def sample_joint_batch(model: JghmModel, size: int, rng: np.random.Generator) -> Sample:
    """Draw `size` independent full trajectories; arrays have shape (size, .)."""
    roots = _categorical_rows(np.broadcast_to(model.root_prior, (size, model.n_states)), rng) + 1
    levels_im = _sample_tree(model, "im", roots, rng)
    levels_tx = _sample_tree(model, "tx", roots, rng)
    return Sample(root=roots, levels_im=levels_im, levels_tx=levels_tx)


def sample_marginal_leaves(model: JghmModel, modality: str, size: int, rng) -> np.ndarray:
    """Draw `size` leaf vectors from one modality's marginal law (a fresh
    root per draw, the other tree never materialized)."""
    roots = _categorical_rows(np.broadcast_to(model.root_prior, (size, model.n_states)), rng) + 1
    return _sample_tree(model, modality, roots, rng)[-1]


def sample_joint(model: JghmModel, rng: np.random.Generator) -> Sample:
    """Draw one trajectory: root from the prior, children level by level."""
    batch = sample_joint_batch(model, 1, rng)
    return Sample(
        root=batch.root[0],
        levels_im=tuple(a[0] for a in batch.levels_im),
        levels_tx=tuple(a[0] for a in batch.levels_tx),
    )


def sample_contrastive_batch(model: JghmModel, K: int, rng: np.random.Generator) -> ContrastiveBatch:
    """Positive pair plus K-1 negatives from the exact product of marginals.

    Each negative discards one side of two fresh joint draws, so negatives
    are independent of the positive pair and of each other.
    """
    if K < 2:
        raise ModelError(f"contrastive batch needs K >= 2, got {K}")
    draws = sample_joint_batch(model, 1 + 2 * (K - 1), rng)
    images = np.concatenate([draws.x_im[:1], draws.x_im[1:K]])
    texts = np.concatenate([draws.x_tx[:1], draws.x_tx[K:]])
    return ContrastiveBatch(images=images, texts=texts)


def noise_image(x_im: np.ndarray, t: float, rng: np.random.Generator, g=None) -> NoisyImage:
    """Observe z = t * x_im + sqrt(t) * g, g standard normal.

    `g` can be injected for tests; otherwise it is drawn from `rng`.
    """
    if t < 0:
        raise ModelError(f"diffusion time must be >= 0, got {t}")
    x = np.asarray(x_im, dtype=float)
    if g is None:
        g = rng.standard_normal(x.shape)
    return NoisyImage(t=float(t), z=t * x + np.sqrt(t) * np.asarray(g, dtype=float))


def sample_text_for_class(model: JghmModel, y: int, rng: np.random.Generator, size=None) -> np.ndarray:
    """Sample text leaves conditioned on the root being class y.

    Returns (d_tx,) for size=None, else (size, d_tx).
    """
    if not 1 <= y <= model.n_states:
        raise ModelError(f"class {y} out of range [1, {model.n_states}]")
    B = 1 if size is None else int(size)
    roots = np.full(B, y, dtype=np.int64)
    leaves = _sample_tree(model, "tx", roots, rng)[-1]
    return leaves[0] if size is None else leaves
