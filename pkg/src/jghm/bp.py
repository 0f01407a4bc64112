"""Exact message passing on the two-tree model.

Everything runs in the log domain with explicit -inf for impossible states,
so permutation-kernel models (p_flip = 0) are handled exactly. A belief is a
length-S vector normalized so its maximum entry is 0; message arrays carry
beliefs for every node of a level and broadcast over arbitrary leading batch
axes.

Level conventions: the root is level 0; leaves are level L. Downsweeps
aggregate leaf evidence toward the root; upsweeps push root-level beliefs
back to the leaves to obtain per-leaf posteriors.
"""

from dataclasses import dataclass

import numpy as np

from .model import JghmModel, ModelError
from .sampler import NoisyImage

__all__ = [
    "Belief",
    "MessageStack",
    "normalize",
    "softmax_belief",
    "step_down",
    "step_up",
    "evidence_from_states",
    "leaf_evidence_from_noise",
    "downsweep",
    "root_log_posterior",
    "root_posterior",
    "optimal_score",
    "readout_bound",
    "leaf_log_posteriors",
    "bayes_denoiser",
    "next_token_posterior_bp",
    "next_token_posteriors_parallel",
    "posterior_floor",
]

Belief = np.ndarray  # (..., S) log-domain, max entry 0 after normalize

NEG_INF = -np.inf


@dataclass(frozen=True)
class MessageStack:
    """Per-level message arrays from one sweep over a tree.

    ``h[l]`` has shape (..., n_l, S) for levels l = 0..L; ``q[l-1]`` holds the
    level-l child-to-parent contributions (l = 1..L). ``b``, present after an
    upsweep, holds parent-to-child messages for levels 1..L plus the final
    leaf beliefs as its last entry.
    """

    h: tuple
    q: tuple
    b: tuple = None


def normalize(b: Belief) -> Belief:
    """Shift each belief so its maximum entry is 0. Idempotent."""
    m = np.max(b, axis=-1, keepdims=True)
    if not np.all(m > NEG_INF):
        raise ModelError("belief has no finite entry (evidence impossible under model)")
    return b - m


def softmax_belief(b: Belief) -> np.ndarray:
    """Probability vector of a log-domain belief."""
    p = np.exp(normalize(b))
    return p / p.sum(axis=-1, keepdims=True)


def _log_matvec(mat: np.ndarray, h: Belief, transpose: bool) -> Belief:
    m = np.max(h, axis=-1, keepdims=True)
    if not np.all(m > NEG_INF):
        raise ModelError("belief has no finite entry (evidence impossible under model)")
    w = np.exp(h - m)
    v = w @ (mat.T if transpose else mat)
    with np.errstate(divide="ignore"):
        return np.log(v) + m


def step_down(kernel: np.ndarray, h: Belief) -> Belief:
    """Child-to-parent map: out_s = log sum_a kernel[s, a] * exp(h_a)."""
    return _log_matvec(kernel, h, transpose=True)


def step_up(kernel: np.ndarray, h: Belief) -> Belief:
    """Parent-to-child map: out_s = log sum_a kernel[a, s] * exp(h_a)."""
    return _log_matvec(kernel, h, transpose=False)


def evidence_from_states(states: np.ndarray, n_states: int) -> Belief:
    """Point evidence: 0 at the observed 1-based state, -inf elsewhere."""
    states = np.asarray(states)
    ev = np.full(states.shape + (n_states,), NEG_INF)
    np.put_along_axis(ev, states[..., None] - 1, 0.0, axis=-1)
    return ev


def leaf_evidence_from_noise(z: np.ndarray, t: float, n_states: int) -> Belief:
    """Gaussian log-likelihood profile -t * (s - z/t)^2 / 2 per coordinate.

    Evaluated in the expanded form s*z - t*s^2/2 (the z^2/(2t) term is a
    normalize-invariant constant), which stays exact for t near 0 where the
    squared form cancels catastrophically. t = 0 carries no information and
    yields the all-zero belief.
    """
    z = np.asarray(z, dtype=float)
    if t < 0:
        raise ModelError(f"diffusion time must be >= 0, got {t}")
    if t == 0:
        return np.zeros(z.shape + (n_states,))
    s = np.arange(1, n_states + 1, dtype=float)
    ev = s * z[..., None] - t * s**2 / 2.0
    return normalize(ev)


def _by_rank_down(level_kernels, h):
    """Apply the per-rank child kernels to a (..., n_l, S) level array."""
    m = len(level_kernels)
    q = np.empty_like(h)
    for j, kernel in enumerate(level_kernels):
        q[..., j::m, :] = step_down(kernel, h[..., j::m, :])
    return q


def downsweep(model: JghmModel, modality: str, evidence: Belief, prior_mode: str = "split") -> MessageStack:
    """Aggregate leaf evidence to the root.

    prior_mode controls where the root prior enters:
      'split' -- multiply P[s]^(1/m1) into every level-1 contribution (the
                 contrastive-task form; softmax of h[0] is then P[s | leaves]);
      'root'  -- add log P[s] once into the root sum (numerically equivalent
                 cross-check variant);
      'none'  -- pure likelihood; used when the prior arrives via another
                 modality's posterior (denoising, next-token prediction).
    """
    topo = model.topology
    if evidence.shape[-2:] != (topo.n_leaves(modality), topo.n_states):
        raise ModelError(
            f"evidence shape {evidence.shape[-2:]} does not match "
            f"({topo.n_leaves(modality)}, {topo.n_states})"
        )
    if prior_mode not in ("split", "root", "none"):
        raise ModelError(f"unknown prior_mode {prior_mode!r}")
    log_prior = np.log(model.root_prior)
    ms = topo.branching(modality)
    hs = [None] * (topo.depth + 1)
    qs = [None] * topo.depth
    hs[topo.depth] = evidence
    for level in range(topo.depth, 0, -1):
        m = ms[level - 1]
        q = _by_rank_down(model.kernels(modality)[level - 1], hs[level])
        if level == 1 and prior_mode == "split":
            q = q + log_prior / ms[0]
        qs[level - 1] = normalize(q)  # per-node shifts cancel in every use
        shape = q.shape[:-2] + (q.shape[-2] // m, m, topo.n_states)
        total = q.reshape(shape).sum(axis=-2)
        if level == 1 and prior_mode == "root":
            total = total + log_prior
        hs[level - 1] = normalize(total)
    return MessageStack(h=tuple(hs), q=tuple(qs))


def root_log_posterior(model: JghmModel, modality: str, leaves: np.ndarray) -> Belief:
    """log P[root = s | leaves], exactly normalized."""
    _check_leaves(model, modality, leaves)
    ev = evidence_from_states(leaves, model.n_states)
    h0 = downsweep(model, modality, ev, prior_mode="split").h[0][..., 0, :]
    w = np.exp(h0)  # h0 is normalized, max entry 0
    return h0 - np.log(w.sum(axis=-1, keepdims=True))


def root_posterior(model: JghmModel, modality: str, leaves: np.ndarray) -> np.ndarray:
    """P[root = s | leaves] as a probability vector."""
    return np.exp(root_log_posterior(model, modality, leaves))


def _check_leaves(model, modality, leaves):
    leaves = np.asarray(leaves)
    d = model.topology.n_leaves(modality)
    if leaves.shape[-1] != d:
        raise ModelError(f"expected {d} {modality} leaves, got shape {leaves.shape}")
    if leaves.min() < 1 or leaves.max() > model.n_states:
        raise ModelError(f"leaf values must lie in [1, {model.n_states}]")


def optimal_score(model: JghmModel, x_im: np.ndarray, x_tx: np.ndarray, clamp: float = None):
    """Pointwise mutual information log[P(x_im, x_tx) / (P(x_im) P(x_tx))].

    Computed as log sum_s P[s|x_im] P[s|x_tx] / P[s]; -inf signals a
    zero-probability pairing. `clamp` optionally projects the value onto
    [-clamp, clamp] (the truncated-readout variant).
    """
    p_im = root_posterior(model, "im", x_im)
    p_tx = root_posterior(model, "tx", x_tx)
    with np.errstate(divide="ignore"):
        score = np.log(np.sum(p_im * p_tx / model.root_prior, axis=-1))
    if clamp is not None:
        score = np.clip(score, -clamp, clamp)
    return score


def readout_bound(model: JghmModel) -> float:
    """Score truncation radius 4 * m1 * log(B_psi); inf for unbounded models."""
    b = model.b_psi()
    return np.inf if not np.isfinite(b) else 4.0 * model.topology.m_first * np.log(b)


def posterior_floor(model: JghmModel) -> float:
    """Lower bound 1 / (B_psi^(2 m1) * S) on every root-posterior entry."""
    b = model.b_psi()
    if not np.isfinite(b):
        return 0.0
    return 1.0 / (b ** (2 * model.topology.m_first) * model.n_states)


def _sibling_cavity(q_level: np.ndarray, m: int) -> np.ndarray:
    """For each child, sum the q-messages of its siblings (explicit sums so
    -inf entries stay exact; no subtraction of infinities)."""
    shape = q_level.shape[:-2] + (q_level.shape[-2] // m, m, q_level.shape[-1])
    q = q_level.reshape(shape)
    cav = np.zeros_like(q)
    for j in range(m):
        for k in range(m):
            if k != j:
                cav[..., j, :] = cav[..., j, :] + q[..., k, :]
    return cav.reshape(q_level.shape)


def upsweep(model: JghmModel, modality: str, stack: MessageStack, root_extra: Belief) -> MessageStack:
    """Push a root-level belief back to the leaves.

    `root_extra` is a log-domain belief over the root carrying everything
    outside this tree (e.g. the other modality's posterior, which includes
    the prior). Requires a stack produced with prior_mode='none'.

    Returns the stack extended with b-messages; the final entry of ``b``
    holds normalized full leaf beliefs whose softmax is the per-leaf
    posterior given all evidence.
    """
    topo = model.topology
    ms = topo.branching(modality)
    extra = np.asarray(root_extra)
    lead = np.broadcast_shapes(stack.h[0].shape[:-2], extra.shape[:-1])
    out = np.broadcast_to(extra[..., None, :], lead + (1, topo.n_states))
    bs = []
    for level in range(1, topo.depth + 1):
        m = ms[level - 1]
        q = stack.q[level - 1]
        cavity = _sibling_cavity(q, m)
        msg = normalize(np.repeat(out, m, axis=-2) + cavity)
        bs.append(msg)
        up = np.empty_like(msg)
        for j, kernel in enumerate(model.kernels(modality)[level - 1]):
            up[..., j::m, :] = step_up(kernel, msg[..., j::m, :])
        out = up
    leaf_full = normalize(out + stack.h[topo.depth])
    bs.append(leaf_full)
    return MessageStack(h=stack.h, q=stack.q, b=tuple(bs))


def leaf_log_posteriors(model: JghmModel, modality: str, evidence: Belief, root_extra: Belief) -> Belief:
    """log P[x_v = s | evidence, root_extra] for every leaf v, normalized to
    sum 1 in probability domain."""
    stack = downsweep(model, modality, evidence, prior_mode="none")
    full = upsweep(model, modality, stack, root_extra).b[-1]
    w = np.exp(full)
    return full - np.log(w.sum(axis=-1, keepdims=True))


def bayes_denoiser(model: JghmModel, noisy: NoisyImage, x_tx: np.ndarray) -> np.ndarray:
    """E[x_im,v | z_t, x_tx] per coordinate: the optimal denoiser.

    Broadcasts over leading axes of `noisy.z`; every output lies in [1, S].
    """
    _check_leaves(model, "tx", x_tx)
    ev = leaf_evidence_from_noise(noisy.z, noisy.t, model.n_states)
    text_post = root_log_posterior(model, "tx", x_tx)
    log_post = leaf_log_posteriors(model, "im", ev, text_post)
    probs = np.exp(log_post)
    states = np.arange(1, model.n_states + 1, dtype=float)
    return probs @ states


def next_token_posterior_bp(model: JghmModel, x_im: np.ndarray, prefix) -> np.ndarray:
    """P[x_tx,i+1 = s | x_im, x_tx,1:i] by a fresh down/up sweep per prefix.

    `prefix` holds the first i observed text tokens (possibly empty);
    unobserved positions contribute the uninformative all-zero belief.
    """
    topo = model.topology
    prefix = np.asarray(prefix, dtype=np.int64).reshape(-1)
    d = topo.d_tx
    i = len(prefix)
    if i > d - 1:
        raise ModelError(f"prefix length {i} exceeds d_tx - 1 = {d - 1}")
    if i and (prefix.min() < 1 or prefix.max() > model.n_states):
        raise ModelError(f"prefix values must lie in [1, {model.n_states}]")
    ev = np.zeros((d, model.n_states))
    if i:
        ev[:i] = evidence_from_states(prefix, model.n_states)
    img_post = root_log_posterior(model, "im", x_im)
    log_post = leaf_log_posteriors(model, "tx", ev, img_post)
    return np.exp(log_post[..., i, :])


def _cavity_subtract(b: Belief, q: Belief) -> Belief:
    # -inf minus -inf stays -inf: a state impossible in both terms remains
    # impossible in the cavity (exact on consistent permutation models).
    both = np.isneginf(b) & np.isneginf(q)
    with np.errstate(invalid="ignore"):
        out = b - q
    out[both] = NEG_INF
    return out


def next_token_posteriors_parallel(model: JghmModel, x_im: np.ndarray, x_tx: np.ndarray) -> np.ndarray:
    """All next-token posteriors from one downsweep plus one upsweep.

    Teacher forcing: given the full text, returns a (d_tx, S) array whose
    row i equals P[x_tx,i+1 = . | x_im, x_tx,1:i]. Messages for fully
    observed subtrees are shared across prefixes by storing each subtree's
    aggregate at its rightmost leaf.
    """
    topo = model.topology
    _check_leaves(model, "im", x_im)
    _check_leaves(model, "tx", x_tx)
    S = topo.n_states
    d = topo.d_tx
    L = topo.depth
    ms = topo.m_tx
    kernels = model.kernels_tx
    strides = [int(np.prod(ms[level:], dtype=np.int64)) for level in range(L + 1)]
    leaf_idx = np.arange(d)

    img_post = root_log_posterior(model, "im", x_im)

    # Downsweep: H[v] is the running message of leaf v's level-l ancestor,
    # restricted to observed leaves <= v inside that ancestor's subtree.
    H = evidence_from_states(x_tx, S)
    Hs = [None] * (L + 1)
    Qs = [None] * (L + 1)
    Hs[L] = H
    for level in range(L, 0, -1):
        m = ms[level - 1]
        anc = leaf_idx // strides[level]
        rank = anc % m
        Q = np.empty_like(H)
        for j, kernel in enumerate(kernels[level - 1]):
            sel = rank == j
            if np.any(sel):
                Q[..., sel, :] = step_down(kernel, H[..., sel, :])
        acc = Q.copy()
        for k in range(1, m):
            sel = rank >= k
            if np.any(sel):
                src = (anc[sel] - k + 1) * strides[level] - 1
                acc[..., sel, :] += Q[..., src, :]
        H = normalize(acc)
        Qs[level] = Q
        Hs[level - 1] = H

    # Upsweep toward leaf v+1 for each v: B[v] is the belief at the level-l
    # ancestor of leaf v+1 given the image and the prefix ending at v.
    B = Hs[0][..., :-1, :] + img_post[..., None, :]
    v = leaf_idx[:-1]
    for level in range(1, L + 1):
        m = ms[level - 1]
        anc_v = v // strides[level]
        anc_next = (v + 1) // strides[level]
        target_rank = anc_next % m
        shared = anc_v == anc_next
        base = np.where(
            shared[..., None],
            _cavity_subtract(B, Qs[level][..., :-1, :]),
            B,
        )
        base = normalize(base)
        nxt = np.empty_like(base)
        for j, kernel in enumerate(kernels[level - 1]):
            sel = target_rank == j
            if np.any(sel):
                nxt[..., sel, :] = step_up(kernel, base[..., sel, :])
        B = np.where(shared[..., None], nxt + Hs[level][..., :-1, :], nxt)

    first = softmax_belief(_first_token_logits(model, img_post))[..., None, :]
    if d == 1:
        return first
    rest = softmax_belief(B)
    lead = np.broadcast_shapes(first.shape[:-2], rest.shape[:-2])
    return np.concatenate(
        [np.broadcast_to(first, lead + (1, S)), np.broadcast_to(rest, lead + (d - 1, S))],
        axis=-2,
    )


def _first_token_logits(model: JghmModel, img_log_post: Belief) -> Belief:
    """log P[x_tx,1 = s | x_im] via the composed kernels along leaf 1's path."""
    composed = None
    for level_kernels in model.kernels_tx:
        k = level_kernels[0]
        composed = k if composed is None else composed @ k
    return step_up(composed, img_log_post)
