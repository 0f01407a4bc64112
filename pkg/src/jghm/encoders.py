"""Leaf-to-vector encoders and similarity scores built on exact inference.

An encoder maps a batch of leaf tuples to finite real vectors and declares a
quantization precision; downstream sufficiency computations group inputs into
fibers by exact equality of the quantized outputs.

Scores are log-bilinear: score(x_im, x_tx) = log <feat_im(x_im), feat_tx(x_tx)>.
The canonical separator features (root posterior over prior) make this form
exactly the pointwise mutual information; lossy variants coarsen or truncate
the features first.
"""

from dataclasses import dataclass

import numpy as np

from .bp import downsweep, evidence_from_states, root_posterior
from .model import JghmModel

__all__ = [
    "Encoder",
    "BilinearScore",
    "canonical_encoder",
    "coarsened_root_encoder",
    "constant_encoder",
    "prefix_text_encoder",
    "exact_score",
    "coarsened_score",
    "constant_score",
]

DEFAULT_PRECISION = 12


@dataclass(frozen=True)
class Encoder:
    """Deterministic map from leaf tuples to quantized feature vectors."""

    name: str
    fn: callable
    precision: int = DEFAULT_PRECISION

    def __call__(self, leaves: np.ndarray) -> np.ndarray:
        out = np.asarray(self.fn(np.asarray(leaves)), dtype=float)
        if not np.all(np.isfinite(out)):
            raise ValueError(f"encoder {self.name} produced non-finite output")
        return np.round(out, self.precision)


def canonical_encoder(model: JghmModel, modality: str) -> Encoder:
    """Separator features P(s | leaves) / P(s): the exact sufficient encoder.

    The prior-weighted inner product of the two modalities' outputs equals
    exp(optimal score).
    """
    prior = model.root_prior

    def fn(leaves):
        return root_posterior(model, modality, leaves) / prior

    return Encoder(name=f"canonical-{modality}", fn=fn)


def _merge_posterior(p: np.ndarray, merge) -> np.ndarray:
    merged_col = p[..., [m - 1 for m in merge]].sum(axis=-1, keepdims=True)
    keep = [s for s in range(p.shape[-1]) if s + 1 not in merge]
    out = np.concatenate([merged_col, p[..., keep]], axis=-1)
    return out / out.sum(axis=-1, keepdims=True)


def coarsened_root_encoder(model: JghmModel, modality: str, merge=(1, 2),
                           precision: int = 1) -> Encoder:
    """Posterior with the merge states collapsed into one, reported at coarse
    resolution. The merge alone rarely collides distinct posteriors on
    generic models, so the low default precision is what makes this encoder
    genuinely lossy (0 < Suff < MI)."""

    def fn(leaves):
        return _merge_posterior(root_posterior(model, modality, leaves), merge)

    return Encoder(name=f"coarsened-{modality}", fn=fn, precision=precision)


def constant_encoder(model: JghmModel, modality: str) -> Encoder:
    """Carries no information: every input maps to the same vector."""

    def fn(leaves):
        leaves = np.asarray(leaves)
        return np.ones(leaves.shape[:-1] + (1,))

    return Encoder(name=f"constant-{modality}", fn=fn)


def prefix_text_encoder(model: JghmModel, n_observed: int = None) -> Encoder:
    """Root posterior computed from only the first n_observed text tokens."""
    d = model.topology.d_tx
    k = max(1, d // 2) if n_observed is None else int(n_observed)
    if not 1 <= k <= d:
        raise ValueError(f"n_observed must lie in [1, {d}]")

    def fn(leaves):
        leaves = np.asarray(leaves)
        ev = np.zeros(leaves.shape[:-1] + (d, model.n_states))
        ev[..., :k, :] = evidence_from_states(leaves[..., :k], model.n_states)
        h0 = downsweep(model, "tx", ev, prior_mode="split").h[0][..., 0, :]
        p = np.exp(h0)
        return p / p.sum(axis=-1, keepdims=True)

    return Encoder(name=f"prefix-tx-{k}", fn=fn)


@dataclass(frozen=True)
class BilinearScore:
    """score(x_im, x_tx) = log <feat_im(x_im), feat_tx(x_tx)>, optionally
    clamped to [-clamp, clamp]. Feature maps must return nonnegative vectors.

    Scores whose features are functions of the root posterior also carry
    `posterior_model` and per-modality posterior transforms, letting batch
    evaluators share one posterior computation across several scores.
    """

    name: str
    feat_im: callable
    feat_tx: callable
    clamp: float = None
    is_constant: bool = False
    constant_value: float = 0.0
    posterior_model: JghmModel = None
    post_im: callable = None
    post_tx: callable = None

    def features(self, modality: str, leaves: np.ndarray) -> np.ndarray:
        fn = self.feat_im if modality == "im" else self.feat_tx
        return np.asarray(fn(np.asarray(leaves)), dtype=float)

    def posterior_transform(self, modality: str):
        return self.post_im if modality == "im" else self.post_tx

    def features_from_posterior(self, modality: str, posterior: np.ndarray) -> np.ndarray:
        return np.asarray(self.posterior_transform(modality)(posterior), dtype=float)

    def from_features(self, f_im: np.ndarray, f_tx: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore"):
            score = np.log(np.sum(f_im * f_tx, axis=-1))
        if self.clamp is not None:
            score = np.clip(score, -self.clamp, self.clamp)
        return score

    def __call__(self, x_im: np.ndarray, x_tx: np.ndarray) -> np.ndarray:
        return self.from_features(self.features("im", x_im), self.features("tx", x_tx))


def exact_score(model: JghmModel, clamp: float = None) -> BilinearScore:
    """The optimal similarity score, assembled from the canonical encoders."""
    prior = model.root_prior

    def post_im(p):
        return p

    def post_tx(p):
        return p / prior

    return BilinearScore(
        name="exact",
        feat_im=lambda leaves: post_im(root_posterior(model, "im", leaves)),
        feat_tx=lambda leaves: post_tx(root_posterior(model, "tx", leaves)),
        clamp=clamp,
        posterior_model=model,
        post_im=post_im,
        post_tx=post_tx,
    )


def coarsened_score(model: JghmModel, merge=(1, 2), clamp: float = None) -> BilinearScore:
    """Lossy score through the coarsened root: the optimal score of the
    merged-state separator, strictly less informative than the exact one."""
    merged_prior = _merge_posterior(model.root_prior[None, :], merge)[0]

    def post_im(p):
        return _merge_posterior(p, merge)

    def post_tx(p):
        return _merge_posterior(p, merge) / merged_prior

    return BilinearScore(
        name="coarsened",
        feat_im=lambda leaves: post_im(root_posterior(model, "im", leaves)),
        feat_tx=lambda leaves: post_tx(root_posterior(model, "tx", leaves)),
        clamp=clamp,
        posterior_model=model,
        post_im=post_im,
        post_tx=post_tx,
    )


def constant_score(value: float = 0.0) -> BilinearScore:
    """score == value everywhere; useful as an uninformative baseline."""

    def feat_im(leaves):
        leaves = np.asarray(leaves)
        return np.ones(leaves.shape[:-1] + (1,))

    def feat_tx(leaves):
        leaves = np.asarray(leaves)
        return np.full(leaves.shape[:-1] + (1,), np.exp(value))

    return BilinearScore(
        name="constant",
        feat_im=feat_im,
        feat_tx=feat_tx,
        is_constant=True,
        constant_value=value,
    )
