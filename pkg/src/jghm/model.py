"""Two-tree hierarchical model definition, validation and generation.

A model couples two rooted trees (an "image" tree and a "text" tree) that
share their root variable. Every node carries a state in {1..S}; each child
is drawn from a row-stochastic S x S kernel indexed by (modality, level,
child rank). The root is drawn from an explicit prior.

States are 1-based in every public structure and file format; kernel rows
and columns are 0-based internally (state s <-> index s-1).
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .rng import stream

__all__ = [
    "TreeTopology",
    "JghmModel",
    "ModelGenSpec",
    "ModelError",
    "leaf_index",
    "validate_kernel",
    "validate_model",
    "make_pflip_model",
    "model_to_json",
    "model_from_json",
    "effective_b_psi",
]

ROW_SUM_TOL = 1e-12
MASS_TOL = 1e-12

MODALITIES = ("im", "tx")


class ModelError(ValueError):
    """Raised when a model or topology violates its structural invariants."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class TreeTopology:
    """Shape of the two trees: depth, per-level branching, state count."""

    depth: int
    m_im: tuple
    m_tx: tuple
    n_states: int

    def __post_init__(self):
        object.__setattr__(self, "m_im", tuple(int(m) for m in self.m_im))
        object.__setattr__(self, "m_tx", tuple(int(m) for m in self.m_tx))
        problems = []
        if self.depth < 1:
            problems.append(f"depth must be >= 1, got {self.depth}")
        if self.n_states < 2:
            problems.append(f"n_states must be >= 2, got {self.n_states}")
        for name, ms in (("m_im", self.m_im), ("m_tx", self.m_tx)):
            if len(ms) != self.depth:
                problems.append(f"{name} must list one branching factor per level")
            if any(m < 1 for m in ms):
                problems.append(f"{name} factors must be >= 1, got {ms}")
        if problems:
            raise ModelError(problems)

    def branching(self, modality: str) -> tuple:
        return self.m_im if modality == "im" else self.m_tx

    def level_sizes(self, modality: str) -> tuple:
        """Node counts per level 1..L (the root, level 0, always has 1)."""
        sizes, n = [], 1
        for m in self.branching(modality):
            n *= m
            sizes.append(n)
        return tuple(sizes)

    def n_leaves(self, modality: str) -> int:
        return self.level_sizes(modality)[-1]

    @property
    def d_im(self) -> int:
        return self.n_leaves("im")

    @property
    def d_tx(self) -> int:
        return self.n_leaves("tx")

    @property
    def m_first(self) -> int:
        """max of the two level-1 branching factors; drives the score bound."""
        return max(self.m_im[0], self.m_tx[0])

    def total_nodes(self) -> int:
        return 1 + sum(self.level_sizes("im")) + sum(self.level_sizes("tx"))


def leaf_index(topology: TreeTopology, modality: str, path) -> int:
    """Map a rank path (iota_1, ..., iota_L) to the canonical leaf number.

    Ranks are 1-based; the returned index lies in {1..d}. The numbering is
    mixed-radix with the level-1 rank most significant, so sibling subtrees
    occupy contiguous index blocks.
    """
    ms = topology.branching(modality)
    path = tuple(int(i) for i in path)
    if len(path) != topology.depth:
        raise ModelError(f"rank path must have {topology.depth} entries, got {len(path)}")
    for level, (rank, m) in enumerate(zip(path, ms), start=1):
        if not 1 <= rank <= m:
            raise ModelError(f"rank {rank} out of range [1, {m}] at level {level}")
    index = 0
    for rank, m in zip(path, ms):
        index = index * m + (rank - 1)
    return index + 1


def validate_kernel(kernel: np.ndarray, n_states: int):
    """Return the list of invariant violations for one transition kernel."""
    problems = []
    if kernel.shape != (n_states, n_states):
        return [f"kernel shape {kernel.shape} != ({n_states}, {n_states})"]
    if not np.all(np.isfinite(kernel)):
        problems.append("kernel has non-finite entries")
        return problems
    if np.any(kernel < 0):
        problems.append("kernel has negative entries")
    row_sums = kernel.sum(axis=1)
    bad = np.abs(row_sums - 1.0) > ROW_SUM_TOL
    if np.any(bad):
        s = row_sums[bad][0]
        problems.append(f"kernel row sums to {s!r}, expected 1 within {ROW_SUM_TOL}")
    return problems


@dataclass(frozen=True)
class JghmModel:
    """A full parameterization: topology, root prior, per-level kernels.

    ``kernels_im[l][i]`` is the kernel for children of rank i+1 at level l+1
    of the image tree (likewise ``kernels_tx``). Instances are immutable;
    all arrays are frozen at construction.
    """

    topology: TreeTopology
    root_prior: np.ndarray
    kernels_im: tuple
    kernels_tx: tuple
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        prior = np.asarray(self.root_prior, dtype=float).copy()
        prior.flags.writeable = False
        object.__setattr__(self, "root_prior", prior)
        for attr in ("kernels_im", "kernels_tx"):
            levels = []
            for level in getattr(self, attr):
                ks = []
                for k in level:
                    k = np.asarray(k, dtype=float).copy()
                    k.flags.writeable = False
                    ks.append(k)
                levels.append(tuple(ks))
            object.__setattr__(self, attr, tuple(levels))

    def kernels(self, modality: str) -> tuple:
        return self.kernels_im if modality == "im" else self.kernels_tx

    @property
    def n_states(self) -> int:
        return self.topology.n_states

    def b_psi(self) -> float:
        return effective_b_psi(self)


def effective_b_psi(model: JghmModel) -> float:
    """Smallest B with 1/B <= entry <= B over the prior and all kernels.

    Models containing exact zeros (e.g. p_flip = 0) have no finite bound;
    returns inf for those.
    """
    lo, hi = np.inf, 0.0
    arrays = [model.root_prior]
    for modality in MODALITIES:
        for level in model.kernels(modality):
            arrays.extend(level)
    for a in arrays:
        lo = min(lo, float(a.min()))
        hi = max(hi, float(a.max()))
    if lo <= 0.0:
        return np.inf
    return max(hi, 1.0 / lo)


def validate_model(model: JghmModel) -> float:
    """Check every structural invariant; return the effective bound B_psi.

    Raises ModelError listing all violations. Kernels with exact-zero
    entries are legal (permutation models) but trigger a warning because
    the boundedness budget becomes infinite.
    """
    topo = model.topology
    S = topo.n_states
    problems = []

    prior = model.root_prior
    if prior.shape != (S,):
        problems.append(f"root_prior shape {prior.shape} != ({S},)")
    else:
        if np.any(prior <= 0):
            problems.append("root_prior must be entrywise > 0")
        if abs(float(prior.sum()) - 1.0) > MASS_TOL:
            problems.append(f"root_prior sums to {prior.sum()!r}, expected 1")

    for modality in MODALITIES:
        ms = topo.branching(modality)
        levels = model.kernels(modality)
        if len(levels) != topo.depth:
            problems.append(f"kernels_{modality} must have {topo.depth} levels")
            continue
        for level_idx, (level, m) in enumerate(zip(levels, ms), start=1):
            if len(level) != m:
                problems.append(
                    f"kernels_{modality} level {level_idx} must have {m} kernels, got {len(level)}"
                )
                continue
            for rank, kernel in enumerate(level, start=1):
                for p in validate_kernel(kernel, S):
                    problems.append(f"kernels_{modality}[{level_idx}][{rank}]: {p}")

    if problems:
        raise ModelError(problems)

    b_psi = effective_b_psi(model)
    if not np.isfinite(b_psi):
        warnings.warn("model has zero entries: B_psi = inf", stacklevel=2)
    return b_psi


@dataclass(frozen=True)
class ModelGenSpec:
    """Recipe for the permutation/softmax kernel family.

    Each kernel is (1 - p_flip) * P + p_flip * softmax_rows(G) where P is a
    uniformly random permutation matrix and G has iid N(0, gaussian_scale^2)
    entries. P and G depend only on (seed, modality, level, rank), so a
    p_flip sweep with a fixed seed varies only the mixing weight.

    The mixing weight may differ per tree (p_flip_im / p_flip_tx override
    p_flip), e.g. to make one modality near-deterministic.
    """

    topology: TreeTopology
    p_flip: float
    seed: int
    gaussian_scale: float = 1.0
    p_flip_im: float = None
    p_flip_tx: float = None

    def __post_init__(self):
        for name, p in (("p_flip", self.p_flip), ("p_flip_im", self.p_flip_im),
                        ("p_flip_tx", self.p_flip_tx)):
            if p is not None and not 0.0 <= p <= 1.0:
                raise ModelError(f"{name} must lie in [0, 1], got {p}")

    def mixing(self, modality: str) -> float:
        override = self.p_flip_im if modality == "im" else self.p_flip_tx
        return self.p_flip if override is None else override


def _softmax_rows(g: np.ndarray) -> np.ndarray:
    z = np.exp(g - g.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def _pflip_kernel(spec: ModelGenSpec, modality: str, level: int, rank: int) -> np.ndarray:
    S = spec.topology.n_states
    p = spec.mixing(modality)
    rng = stream(spec.seed, "pflip-kernel", modality, level, rank)
    perm = rng.permutation(S)
    g = rng.standard_normal((S, S)) * spec.gaussian_scale
    pi = np.zeros((S, S))
    pi[np.arange(S), perm] = 1.0
    return (1.0 - p) * pi + p * _softmax_rows(g)


def make_pflip_model(spec: ModelGenSpec) -> JghmModel:
    """Generate the deterministic kernel-family model for a spec.

    Pure function of the spec: equal specs produce bit-identical models.
    The root prior is uniform.
    """
    topo = spec.topology
    S = topo.n_states
    kernels = {}
    for modality in MODALITIES:
        levels = []
        for level, m in enumerate(topo.branching(modality), start=1):
            levels.append(
                tuple(_pflip_kernel(spec, modality, level, rank) for rank in range(1, m + 1))
            )
        kernels[modality] = tuple(levels)
    metadata = {
        "family": "pflip",
        "p_flip": float(spec.p_flip),
        "seed": int(spec.seed),
        "gaussian_scale": float(spec.gaussian_scale),
    }
    if spec.p_flip_im is not None:
        metadata["p_flip_im"] = float(spec.p_flip_im)
    if spec.p_flip_tx is not None:
        metadata["p_flip_tx"] = float(spec.p_flip_tx)
    return JghmModel(
        topology=topo,
        root_prior=np.full(S, 1.0 / S),
        kernels_im=kernels["im"],
        kernels_tx=kernels["tx"],
        metadata=metadata,
    )


def model_to_json(model: JghmModel) -> str:
    """Serialize to a canonical JSON document (bit-exact round trip)."""
    topo = model.topology
    doc = {
        "schema_version": 1,
        "topology": {
            "depth": topo.depth,
            "m_im": list(topo.m_im),
            "m_tx": list(topo.m_tx),
            "n_states": topo.n_states,
        },
        "root_prior": model.root_prior.tolist(),
        "kernels_im": [[k.tolist() for k in level] for level in model.kernels_im],
        "kernels_tx": [[k.tolist() for k in level] for level in model.kernels_tx],
        "metadata": model.metadata,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def model_from_json(text: str) -> JghmModel:
    doc = json.loads(text)
    if doc.get("schema_version") != 1:
        raise ModelError(f"unsupported model schema_version {doc.get('schema_version')!r}")
    t = doc["topology"]
    topo = TreeTopology(
        depth=t["depth"], m_im=tuple(t["m_im"]), m_tx=tuple(t["m_tx"]), n_states=t["n_states"]
    )
    return JghmModel(
        topology=topo,
        root_prior=np.array(doc["root_prior"], dtype=float),
        kernels_im=tuple(
            tuple(np.array(k, dtype=float) for k in level) for level in doc["kernels_im"]
        ),
        kernels_tx=tuple(
            tuple(np.array(k, dtype=float) for k in level) for level in doc["kernels_tx"]
        ),
        metadata=doc.get("metadata", {}),
    )
