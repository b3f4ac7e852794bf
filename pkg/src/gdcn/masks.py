"""Samplers for the unified connection-dropping framework.

All four regularizers (DropOut, DropEdge, node sampling, GDC) plus the
random-walk variant are expressed as masks: feature masks multiply the layer
input, edge masks multiply the pre-normalized adjacency values. Edge masks
are aligned to the ``EdgeSet`` storage order and may be binary or
concrete-relaxed (recorded on a tape so gradients reach the keep
probability).

Samplers are pure functions of an explicit ``numpy.random.Generator``;
callers own stream splitting.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ContractViolation
from .graph import EdgeSet
from .tape import Tensor, _maybe_record, constant


class MaskKind(enum.Enum):
    NONE = "none"
    DROPOUT = "dropout"
    DROPEDGE = "dropedge"
    NODE_SAMPLING = "node"
    GDC = "gdc"
    RANDOM_WALK = "randomwalk"


@dataclass
class MaskSpec:
    """Per-layer regularizer description."""

    kind: MaskKind = MaskKind.NONE
    learned: bool = False          # keep prob from the Kumaraswamy posterior
    keep_prob: float = 1.0         # used when not learned
    n_blocks: int = 1
    symmetric: bool = False
    relaxed: bool = False
    temperature: float = 0.67
    protect_self_loops: bool = False
    dropout_keep: float | None = None  # extra feature DropOut (DO-DE baseline)

    def __post_init__(self):
        if not 0.0 <= self.keep_prob <= 1.0:
            raise ContractViolation("keep_prob must lie in [0, 1]")
        if self.n_blocks < 1:
            raise ContractViolation("n_blocks must be >= 1")
        if self.relaxed and self.temperature <= 0:
            raise ContractViolation("relaxed masks require temperature > 0")
        if self.dropout_keep is not None and not 0.0 <= self.dropout_keep <= 1.0:
            raise ContractViolation("dropout_keep must lie in [0, 1]")
        if self.learned and self.kind not in (MaskKind.DROPEDGE, MaskKind.GDC):
            raise ContractViolation(
                "learned keep probabilities apply to edge masks (dropedge/gdc) only"
            )


@dataclass
class EdgeMask:
    """Per-block keep values on the EdgeSet pattern, each block (nnz, 1)."""

    blocks: list = field(default_factory=list)
    relaxed: bool = False

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def values(self) -> np.ndarray:
        """Stacked (n_blocks, nnz) value array."""
        return np.stack([b.data.ravel() for b in self.blocks])


def _check_prob(p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise ContractViolation(f"keep probability {p} outside [0, 1]")


def sample_dropout_mask(n: int, f: int, keep_prob: float,
                        rng: np.random.Generator) -> np.ndarray:
    """I.i.d. Bernoulli(keep_prob) feature mask, applied as H * Z."""
    _check_prob(keep_prob)
    return (rng.random((n, f)) < keep_prob).astype(np.float64)


def sample_node_mask(n: int, keep_prob: float,
                     rng: np.random.Generator) -> np.ndarray:
    """I.i.d. Bernoulli(keep_prob) node mask, applied as diag(z) H."""
    _check_prob(keep_prob)
    return (rng.random(n) < keep_prob).astype(np.float64)


def _binary_edge_values(edges: EdgeSet, keep_prob: float, symmetric: bool,
                        rng: np.random.Generator,
                        protect_self_loops: bool) -> np.ndarray:
    if symmetric:
        canonical = edges.canonical()
        vals = np.empty(edges.n_entries)
        vals[canonical] = (rng.random(int(canonical.sum())) < keep_prob).astype(np.float64)
        idx = np.flatnonzero(~canonical)
        vals[idx] = vals[edges.mirror[idx]]
    else:
        vals = (rng.random(edges.n_entries) < keep_prob).astype(np.float64)
    if protect_self_loops:
        vals[edges.is_diag] = 1.0
    return vals


def sample_dropedge_mask(edges: EdgeSet, keep_prob: float, symmetric: bool,
                         rng: np.random.Generator,
                         protect_self_loops: bool = False) -> EdgeMask:
    """One Bernoulli draw per undirected edge (symmetric) or per entry.

    Self-loop entries are drawn like any other edge unless protected.
    """
    _check_prob(keep_prob)
    vals = _binary_edge_values(edges, keep_prob, symmetric, rng, protect_self_loops)
    return EdgeMask(blocks=[constant(vals)], relaxed=False)


def sample_gdc_masks(edges: EdgeSet, n_blocks: int, keep_prob: float,
                     symmetric: bool, rng: np.random.Generator,
                     protect_self_loops: bool = False) -> EdgeMask:
    """n_blocks independent DropEdge-style masks, one per feature block.

    With n_blocks=1 this consumes the RNG stream exactly like
    ``sample_dropedge_mask``, so the two are draw-for-draw identical.
    """
    if n_blocks < 1:
        raise ContractViolation("n_blocks must be >= 1")
    _check_prob(keep_prob)
    blocks = [
        _binary_edge_values(edges, keep_prob, symmetric, rng, protect_self_loops)
        for _ in range(n_blocks)
    ]
    return EdgeMask(blocks=[constant(v) for v in blocks], relaxed=False)


def sample_randomwalk_mask(edges: EdgeSet, keep_prob: float, prev: EdgeMask,
                           rng: np.random.Generator) -> EdgeMask:
    """Bernoulli draw gated by connectivity surviving the previous layer.

    Entry (v, u) can only be kept if node v retained at least one incoming
    connection in ``prev`` (all-ones for the first layer); this keeps every
    node's receptive field a connected subgraph.
    """
    _check_prob(keep_prob)
    if prev.n_blocks != 1:
        raise ContractViolation("random-walk masks are single-block")
    prev_vals = prev.blocks[0].data.ravel()
    if len(prev_vals) != edges.n_entries:
        raise ContractViolation("previous mask not aligned to this edge set")
    row_alive = np.bincount(edges.rows, weights=prev_vals, minlength=edges.n) > 0
    vals = (rng.random(edges.n_entries) < keep_prob).astype(np.float64)
    vals *= row_alive[edges.rows]
    return EdgeMask(blocks=[constant(vals)], relaxed=False)


def record_concrete_mask(tape, pi: Tensor, u: np.ndarray, temperature: float,
                         standard: bool = False,
                         force_one: np.ndarray | None = None) -> Tensor:
    """Concrete-relaxed edge mask from a scalar keep probability.

    Computes ``sigmoid(logit(pi)/t + logit(u))`` per entry; the printed form
    tempers only the probability logit. ``standard=True`` divides the whole
    argument by t instead. Gradients flow to ``pi``.
    """
    if temperature <= 0:
        raise ContractViolation("temperature must be positive")
    p = pi.item()
    if p <= 0.0 or p >= 1.0:
        raise ContractViolation("concrete relaxation requires pi in (0, 1)")
    u = np.clip(np.asarray(u, dtype=np.float64).ravel(), 1e-10, 1.0 - 1e-10)
    logit_pi = np.log(p / (1.0 - p))
    noise = np.log(u / (1.0 - u))
    if standard:
        arg = (logit_pi + noise) / temperature
        dpi_scale = 1.0 / (temperature * p * (1.0 - p))
    else:
        arg = logit_pi / temperature + noise
        dpi_scale = 1.0 / (temperature * p * (1.0 - p))
    out = expit(arg)
    if force_one is not None:
        out = np.where(force_one, 1.0, out)
    out = out.reshape(-1, 1)

    def bwd(grad, acc):
        if pi.requires_grad:
            dz = out * (1.0 - out)
            if force_one is not None:
                dz = np.where(force_one.reshape(-1, 1), 0.0, dz)
            acc(pi, np.array([[np.sum(grad * dz) * dpi_scale]]))

    return _maybe_record(tape, out, (pi,), bwd)


def sample_concrete_mask(edges: EdgeSet, n_blocks: int, pi, temperature: float,
                         rng: np.random.Generator, tape,
                         symmetric: bool = False, standard: bool = False,
                         protect_self_loops: bool = False) -> EdgeMask:
    """Relaxed GDC mask: n_blocks concrete draws sharing one keep probability.

    ``pi`` may be a plain float or a tape tensor (e.g. a recorded
    Kumaraswamy draw); in the latter case gradients reach the drop
    parameters through the recorded sigmoid.
    """
    if n_blocks < 1:
        raise ContractViolation("n_blocks must be >= 1")
    pi_t = pi if isinstance(pi, Tensor) else constant(pi)
    force = edges.is_diag if protect_self_loops else None
    blocks = []
    for _ in range(n_blocks):
        u = rng.random(edges.n_entries)
        if symmetric:
            idx = np.flatnonzero(~edges.canonical())
            u[idx] = u[edges.mirror[idx]]
        blocks.append(record_concrete_mask(tape, pi_t, u, temperature,
                                           standard=standard, force_one=force))
    return EdgeMask(blocks=blocks, relaxed=True)


def all_ones_mask(edges: EdgeSet, n_blocks: int = 1) -> EdgeMask:
    return EdgeMask(
        blocks=[constant(np.ones(edges.n_entries)) for _ in range(n_blocks)],
        relaxed=False,
    )


def expected_keep_mask(edges: EdgeSet, keep_prob: float,
                       n_blocks: int = 1,
                       protect_self_loops: bool = False) -> EdgeMask:
    """Deterministic-evaluation mask: every entry at its expected keep value."""
    _check_prob(keep_prob)
    vals = np.full(edges.n_entries, keep_prob)
    if protect_self_loops:
        vals[edges.is_diag] = 1.0
    return EdgeMask(blocks=[constant(vals.copy()) for _ in range(n_blocks)],
                    relaxed=False)
