"""Brute-force ground truth on tiny instances.

Everything here works in the probability domain over exhaustive leaf-tuple
tables and never calls the message-passing engine: it is the independent
verification authority for the BP routines and the risk evaluators.

Leaf tuples are encoded as mixed-radix integers with leaf 1 most
significant, matching the canonical leaf numbering.
"""

from dataclasses import dataclass

import numpy as np

from .model import JghmModel

__all__ = [
    "DEFAULT_BUDGET",
    "BudgetExceeded",
    "JointTable",
    "enumerate_joint",
    "config_count",
    "kl_divergence",
    "mi_from_joint",
    "exact_conditional_root",
    "exact_mutual_information",
    "encoder_fibers",
    "exact_suff_encoder",
    "exact_mi_encoder",
    "exact_suff_score",
    "exact_denoiser",
    "exact_next_token",
]

DEFAULT_BUDGET = 2_000_000


class BudgetExceeded(ValueError):
    """The instance is too large for exhaustive enumeration."""


def config_count(topology) -> int:
    """Number of full node configurations S^(total nodes), as an exact int."""
    return topology.n_states ** topology.total_nodes()


def _assert_budget(topology, budget):
    count = config_count(topology)
    if count > budget:
        raise BudgetExceeded(
            f"{count} node configurations exceed the enumeration budget {budget}"
        )


def all_leaf_tuples(d: int, n_states: int) -> np.ndarray:
    """All S^d leaf assignments (1-based states), in index order."""
    grids = np.meshgrid(*[np.arange(1, n_states + 1)] * d, indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=-1)


def encode_leaves(leaves: np.ndarray, n_states: int) -> np.ndarray:
    """Mixed-radix index of a 1-based leaf tuple (batch-aware)."""
    leaves = np.asarray(leaves, dtype=np.int64)
    idx = np.zeros(leaves.shape[:-1], dtype=np.int64)
    for v in range(leaves.shape[-1]):
        idx = idx * n_states + (leaves[..., v] - 1)
    return idx


def _tree_conditional(model: JghmModel, modality: str) -> np.ndarray:
    """P(all leaves | root state): (S, S^d), by exhaustive level merging."""
    S = model.n_states
    table = np.eye(S)  # P(subtree of a level-L node | its own state)
    for level_kernels in reversed(model.kernels(modality)):
        merged = None
        for kernel in level_kernels:
            v = kernel @ table  # (S, block): P(child subtree | parent state)
            merged = v if merged is None else (merged[:, :, None] * v[:, None, :]).reshape(S, -1)
        table = merged
    return table


@dataclass(frozen=True)
class JointTable:
    """Dense joint law of the leaf pair plus per-tree conditionals."""

    n_states: int
    prior: np.ndarray
    cond_im: np.ndarray  # (S, N_im): P(image leaves | root)
    cond_tx: np.ndarray  # (S, N_tx): P(text leaves | root)
    joint: np.ndarray  # (N_im, N_tx)
    tuples_im: np.ndarray  # (N_im, d_im), 1-based states
    tuples_tx: np.ndarray

    @property
    def p_im(self) -> np.ndarray:
        return self.joint.sum(axis=1)

    @property
    def p_tx(self) -> np.ndarray:
        return self.joint.sum(axis=0)

    def cond(self, modality: str) -> np.ndarray:
        return self.cond_im if modality == "im" else self.cond_tx

    def tuples(self, modality: str) -> np.ndarray:
        return self.tuples_im if modality == "im" else self.tuples_tx

    def index(self, modality: str, leaves) -> np.ndarray:
        return encode_leaves(leaves, self.n_states)

    def to_json(self) -> str:
        """Dump the table for golden tests; round-trips bit-exactly."""
        import json

        doc = {
            "schema_version": 1,
            "n_states": self.n_states,
            "prior": self.prior.tolist(),
            "cond_im": self.cond_im.tolist(),
            "cond_tx": self.cond_tx.tolist(),
            "joint": self.joint.tolist(),
            "d_im": self.tuples_im.shape[1],
            "d_tx": self.tuples_tx.shape[1],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "JointTable":
        import json

        doc = json.loads(text)
        return cls(
            n_states=doc["n_states"],
            prior=np.array(doc["prior"]),
            cond_im=np.array(doc["cond_im"]),
            cond_tx=np.array(doc["cond_tx"]),
            joint=np.array(doc["joint"]),
            tuples_im=all_leaf_tuples(doc["d_im"], doc["n_states"]),
            tuples_tx=all_leaf_tuples(doc["d_tx"], doc["n_states"]),
        )


def enumerate_joint(model: JghmModel, budget: int = DEFAULT_BUDGET) -> JointTable:
    """Exhaustive joint law of (image leaves, text leaves).

    Sums the product of the root prior and kernel entries over all node
    assignments, accumulating hidden levels early; raises BudgetExceeded
    instead of approximating when the instance is too large.
    """
    _assert_budget(model.topology, budget)
    cond_im = _tree_conditional(model, "im")
    cond_tx = _tree_conditional(model, "tx")
    joint = cond_im.T @ (model.root_prior[:, None] * cond_tx)
    return JointTable(
        n_states=model.n_states,
        prior=model.root_prior,
        cond_im=cond_im,
        cond_tx=cond_tx,
        joint=joint,
        tuples_im=all_leaf_tuples(model.topology.d_im, model.n_states),
        tuples_tx=all_leaf_tuples(model.topology.d_tx, model.n_states),
    )


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) in nats; 0 log 0 = 0, positive mass on a q-null cell = inf."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    support = p > 0
    if np.any(q[support] == 0):
        return np.inf
    ps, qs = p[support], q[support]
    # KL is nonnegative; tiny negative totals are floating-point noise
    return max(float(np.sum(ps * np.log(ps / qs))), 0.0)


def mi_from_joint(joint: np.ndarray) -> float:
    """Mutual information of a dense joint probability matrix, in nats."""
    pi = joint.sum(axis=1, keepdims=True)
    pj = joint.sum(axis=0, keepdims=True)
    support = joint > 0
    ratio = joint[support] / (pi @ pj)[support]
    return max(float(np.sum(joint[support] * np.log(ratio))), 0.0)


def exact_conditional_root(table: JointTable, modality: str, leaves) -> np.ndarray:
    """P(root | leaves) by Bayes rule over the enumerated tree conditional."""
    idx = table.index(modality, leaves)
    w = table.prior * table.cond(modality)[:, idx]
    total = w.sum()
    if total == 0:
        raise ValueError("leaves have zero probability under the model")
    return w / total


def exact_mutual_information(table: JointTable) -> float:
    return mi_from_joint(table.joint)


def encoder_fibers(encoder, tuples: np.ndarray):
    """Group leaf tuples by quantized encoder output.

    Returns (fiber_id per tuple, number of fibers). Two inputs share a fiber
    iff their encoder outputs agree exactly after quantization.
    """
    outputs = np.asarray(encoder(tuples))
    outputs = outputs.reshape(len(tuples), -1)
    _, ids = np.unique(outputs, axis=0, return_inverse=True)
    return ids, int(ids.max()) + 1


def _fiber_joint(table: JointTable, modality: str, encoder):
    """Aggregate the joint over encoder fibers of one modality.

    Returns (fiber ids, fiber-level joint with the other modality).
    """
    ids, n_fibers = encoder_fibers(encoder, table.tuples(modality))
    joint = table.joint if modality == "im" else table.joint.T
    agg = np.zeros((n_fibers, joint.shape[1]))
    np.add.at(agg, ids, joint)
    return ids, agg


def exact_suff_encoder(model: JghmModel, encoder, modality: str, table: JointTable = None,
                       budget: int = DEFAULT_BUDGET) -> float:
    """Expected KL information loss of conditioning on the encoder output
    instead of the raw leaves."""
    if table is None:
        table = enumerate_joint(model, budget)
    ids, agg = _fiber_joint(table, modality, encoder)
    joint = table.joint if modality == "im" else table.joint.T
    p_x = joint.sum(axis=1)
    fiber_mass = agg.sum(axis=1)
    total = 0.0
    for i in range(len(p_x)):
        if p_x[i] == 0:
            continue
        cond_x = joint[i] / p_x[i]
        cond_f = agg[ids[i]] / fiber_mass[ids[i]]
        term = kl_divergence(cond_x, cond_f)
        if np.isinf(term):
            return np.inf
        total += p_x[i] * term
    return total


def exact_mi_encoder(model: JghmModel, encoder, modality: str, table: JointTable = None,
                     budget: int = DEFAULT_BUDGET) -> float:
    """MI between the encoder output and the other modality's leaves."""
    if table is None:
        table = enumerate_joint(model, budget)
    _, agg = _fiber_joint(table, modality, encoder)
    return mi_from_joint(agg)


def exact_suff_score(model: JghmModel, score, table: JointTable = None,
                     budget: int = DEFAULT_BUDGET) -> float:
    """Sufficiency of a similarity score via its induced joint law.

    The score induces P_hat(x_im, x_tx) proportional to
    exp(score) * P(x_im) * P(x_tx); both conditional KL terms are summed.
    """
    if table is None:
        table = enumerate_joint(model, budget)
    scores = score_matrix(score, table)
    p_im, p_tx = table.p_im, table.p_tx
    with np.errstate(over="raise"):
        induced = np.exp(scores) * np.outer(p_im, p_tx)
    induced = induced / induced.sum()

    total = 0.0
    for joint, marg in ((table.joint, p_im), (table.joint.T, p_tx)):
        ind = induced if joint is table.joint else induced.T
        ind_marg = ind.sum(axis=1)
        for i in range(len(marg)):
            if marg[i] == 0:
                continue
            term = kl_divergence(joint[i] / marg[i], ind[i] / ind_marg[i])
            if np.isinf(term):
                return np.inf
            total += marg[i] * term
    return total


def score_matrix(score, table: JointTable) -> np.ndarray:
    """Evaluate a pair score on every (image tuple, text tuple) combination."""
    n_im, n_tx = len(table.tuples_im), len(table.tuples_tx)
    im = np.repeat(table.tuples_im, n_tx, axis=0)
    tx = np.tile(table.tuples_tx, (n_im, 1))
    return np.asarray(score(im, tx)).reshape(n_im, n_tx)


def exact_denoiser(model: JghmModel, z: np.ndarray, t: float, x_tx, table: JointTable = None,
                   budget: int = DEFAULT_BUDGET) -> np.ndarray:
    """E[x_im | z_t, x_tx] by enumeration with Gaussian leaf densities."""
    if table is None:
        table = enumerate_joint(model, budget)
    j = table.index("tx", x_tx)
    p_cond = table.joint[:, j]
    if p_cond.sum() == 0:
        raise ValueError("text leaves have zero probability under the model")
    x = table.tuples_im.astype(float)
    with np.errstate(divide="ignore"):
        logw = np.log(p_cond)
    if t > 0:
        # expanded Gaussian exponent <z, x> - t ||x||^2 / 2 (constant dropped)
        z = np.asarray(z, dtype=float)
        logw = logw + x @ z - t * np.sum(x**2, axis=1) / 2.0
    logw = logw - logw.max()
    w = np.exp(logw)
    w /= w.sum()
    return w @ x


def next_token_from_weights(table: JointTable, weights: np.ndarray, prefix) -> np.ndarray:
    """Next-token law from unnormalized weights over all text tuples.

    `weights[j]` must be proportional to P(x_tx = tuple_j | context); the
    result is P(x_tx,i+1 | context, prefix) for the given observed prefix.
    """
    prefix = np.asarray(prefix, dtype=np.int64).reshape(-1)
    i = len(prefix)
    tuples = table.tuples_tx
    mask = np.ones(len(tuples), dtype=bool)
    for v in range(i):
        mask &= tuples[:, v] == prefix[v]
    out = np.zeros(table.n_states)
    for s in range(1, table.n_states + 1):
        out[s - 1] = weights[mask & (tuples[:, i] == s)].sum()
    total = out.sum()
    if total == 0:
        raise ValueError("prefix has zero probability in the conditioned law")
    return out / total


def exact_next_token(model: JghmModel, x_im, prefix, table: JointTable = None,
                     budget: int = DEFAULT_BUDGET) -> np.ndarray:
    """P(x_tx,i+1 | x_im, prefix) by enumeration."""
    if table is None:
        table = enumerate_joint(model, budget)
    i_img = table.index("im", x_im)
    return next_token_from_weights(table, table.joint[i_img], prefix)
