"""GCN layer stack with pluggable connection-sampling regularizers.

A layer computes

    H_out = act( sum_b  (N(A) ⊙ Z_b) (H[:, block_b] W[block_b, :]) )

where Z_b is the edge mask of feature block b. Masks default to multiplying
the pre-normalized adjacency; ``renorm_after_mask`` renormalizes the masked
raw adjacency per draw instead (binary symmetric masks only). Hidden
activations use ReLU, the head is a row-wise log-softmax.

The edge-space and parameter-space views are equivalent: masking the
adjacency entry for (v, u) and then applying W equals aggregating with the
per-edge weight diag(z_vu) W. The test suite checks this identity against a
dense per-edge oracle.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .graph import EdgeSet, SparseMatrix, build_adjacency, normalize
from .masks import (EdgeMask, MaskKind, MaskSpec, all_ones_mask,
                    expected_keep_mask, sample_concrete_mask,
                    sample_dropedge_mask, sample_dropout_mask,
                    sample_gdc_masks, sample_node_mask,
                    sample_randomwalk_mask)
from .tape import (Tensor, constant, parameter, record_add, record_add_rowvec,
                   record_frobenius_sq, record_log_softmax_rows,
                   record_masked_nll, record_masked_spmm, record_matmul,
                   record_mul, record_relu, record_scale, record_slice_cols,
                   record_slice_rows)
from .variational import (KumaraswamyParams, kuma_mean, kuma_sample,
                          record_kl_kuma_beta, record_kuma_sample)

CHECKPOINT_MAGIC = b"GDCN"


@dataclass
class GCNConfig:
    """Architecture plus regularizer/estimator selection."""

    layer_dims: list
    masks: list
    estimator: str = "none"  # none | concrete | arm
    beta_prior_c: float = 2.0
    kuma_init_b: float = 3.0
    use_bias: bool = False
    renorm_trick: bool = False
    renorm_after_mask: bool = False
    concrete_standard: bool = False
    kl_weight_scaling: bool = False
    kl_full_series: bool = False

    def __post_init__(self):
        if len(self.layer_dims) < 2:
            raise ContractViolation("need at least input and output dims")
        if len(self.masks) != self.n_layers:
            raise ContractViolation(
                f"{self.n_layers} layers need {self.n_layers} mask specs, "
                f"got {len(self.masks)}"
            )
        if self.estimator not in ("none", "concrete", "arm"):
            raise ContractViolation(f"unknown estimator '{self.estimator}'")
        for l, spec in enumerate(self.masks):
            if spec.n_blocks > self.layer_dims[l]:
                raise ContractViolation(
                    f"layer {l}: n_blocks {spec.n_blocks} exceeds input width "
                    f"{self.layer_dims[l]}"
                )
        if self.renorm_after_mask:
            if self.estimator == "concrete":
                raise ContractViolation(
                    "renorm_after_mask needs binary masks; it cannot be "
                    "combined with the concrete estimator"
                )
            for spec in self.masks:
                if spec.kind in (MaskKind.DROPEDGE, MaskKind.GDC,
                                 MaskKind.RANDOM_WALK) and not spec.symmetric:
                    raise ContractViolation(
                        "renorm_after_mask requires symmetric edge masks"
                    )
        if self.estimator != "none" and not any(s.learned for s in self.masks):
            raise ContractViolation(
                "an estimator is selected but no layer has learned drop rates"
            )

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1


@dataclass
class LayerParams:
    m: Tensor
    bias: Tensor | None = None
    kuma: KumaraswamyParams | None = None
    fixed_keep: float = 1.0

    def tensors(self):
        out = [self.m]
        if self.bias is not None:
            out.append(self.bias)
        if self.kuma is not None:
            out.extend(self.kuma.tensors())
        return out


@dataclass
class PreparedGraph:
    """Raw adjacency, its normalization, and the aligned edge set."""

    a_raw: SparseMatrix
    a_norm: SparseMatrix
    edges: EdgeSet

    @classmethod
    def from_edges(cls, edge_list, n: int, renorm_trick: bool = False) -> "PreparedGraph":
        a_raw = build_adjacency(edge_list, n, symmetrize=True)
        a_norm = normalize(a_raw, renorm_trick=renorm_trick)
        return cls(a_raw=a_raw, a_norm=a_norm, edges=EdgeSet.from_sparse(a_norm))


@dataclass
class LayerMasks:
    """Masks drawn for one layer of one forward pass."""

    feature: np.ndarray | None = None    # binary (n, f_in) or (n, 1) matrix
    feature_scale: float | None = None   # deterministic-eval scaling of H
    edge: EdgeMask | None = None         # None reads as all-ones, 1 block


def glorot_bound(f_in: int, f_out: int) -> float:
    return float(np.sqrt(6.0 / (f_in + f_out)))


def init_params(config: GCNConfig, rng: np.random.Generator) -> list:
    """Glorot-uniform weights plus per-layer drop parameterization."""
    params = []
    for l in range(config.n_layers):
        f_in, f_out = config.layer_dims[l], config.layer_dims[l + 1]
        bound = glorot_bound(f_in, f_out)
        m = parameter(rng.uniform(-bound, bound, size=(f_in, f_out)))
        bias = parameter(np.zeros((1, f_out))) if config.use_bias else None
        spec = config.masks[l]
        kuma = KumaraswamyParams(1.0, config.kuma_init_b) if spec.learned else None
        params.append(LayerParams(m=m, bias=bias, kuma=kuma,
                                  fixed_keep=spec.keep_prob))
    return params


def block_bounds(f_in: int, n_blocks: int):
    """Contiguous near-equal feature blocks, original feature order kept."""
    edges = np.linspace(0, f_in, n_blocks + 1).astype(int)
    return [(int(edges[i]), int(edges[i + 1])) for i in range(n_blocks)]


def _layer_matrix_for_block(graph: PreparedGraph, mask_block: Tensor,
                            renorm_after_mask: bool):
    """Resolve the aggregation matrix and the mask tensor for one block."""
    if not renorm_after_mask:
        return graph.a_norm, mask_block
    # Rebuild N(A ⊙ Z): mask the raw off-diagonal entries, renormalize.
    offdiag = ~graph.edges.is_diag
    vals = mask_block.data.ravel()[offdiag]
    rows = graph.edges.rows[offdiag]
    cols = graph.edges.cols[offdiag]
    kept = vals != 0.0
    masked = build_adjacency(np.stack([rows[kept], cols[kept]], axis=1),
                             graph.edges.n, symmetrize=False)
    renormed = normalize(masked)
    return renormed, constant(np.ones(renormed.nnz))


def forward(params: list, x: Tensor, graph: PreparedGraph, masks: list,
            tape=None, capture_hidden: bool = False,
            renorm_after_mask: bool = False):
    """Stack forward pass; returns log-probabilities (and hidden outputs).

    ``masks`` is one ``LayerMasks`` per layer. Hidden outputs are captured
    post-activation for the over-smoothing diagnostics.
    """
    n_layers = len(params)
    if len(masks) != n_layers:
        raise ContractViolation("one LayerMasks per layer is required")
    h = x
    hidden = []
    for l, (p, lm) in enumerate(zip(params, masks)):
        f_in = p.m.data.shape[0]
        if h.data.shape[1] != f_in:
            raise ContractViolation(
                f"layer {l}: input width {h.data.shape[1]} != weight rows {f_in}"
            )
        if lm.feature is not None:
            h = record_mul(tape, h, constant(lm.feature))
        if lm.feature_scale is not None:
            h = record_scale(tape, h, lm.feature_scale)
        edge = lm.edge if lm.edge is not None else all_ones_mask(graph.edges)
        if edge.n_blocks > f_in:
            raise ContractViolation(
                f"layer {l}: {edge.n_blocks} mask blocks exceed width {f_in}"
            )
        out = None
        for b, (c0, c1) in enumerate(block_bounds(f_in, edge.n_blocks)):
            if edge.n_blocks == 1:
                h_b, w_b = h, p.m
            else:
                h_b = record_slice_cols(tape, h, c0, c1)
                w_b = record_slice_rows(tape, p.m, c0, c1)
            s_b = record_matmul(tape, h_b, w_b)
            matrix, mask_t = _layer_matrix_for_block(graph, edge.blocks[b],
                                                     renorm_after_mask)
            agg = record_masked_spmm(tape, matrix, mask_t, s_b,
                                     differentiate_mask=edge.relaxed)
            out = agg if out is None else record_add(tape, out, agg)
        if p.bias is not None:
            out = record_add_rowvec(tape, out, p.bias)
        if l < n_layers - 1:
            h = record_relu(tape, out)
            if capture_hidden:
                hidden.append(h.data.copy())
        else:
            h = record_log_softmax_rows(tape, out)
    return (h, hidden) if capture_hidden else h


@dataclass
class StepDraws:
    """Everything sampled for one training step's mask realization."""

    layer_masks: list = field(default_factory=list)
    pi_values: list = field(default_factory=list)   # float per layer (or None)
    pi_tensors: list = field(default_factory=list)  # recorded draw (or None)
    u_pi: list = field(default_factory=list)        # uniform behind each draw


def _keep_prob_for(spec: MaskSpec, p: LayerParams, mode: str, rng) -> tuple:
    """Resolve (pi_value, u_pi) for one layer in a non-concrete mode."""
    if not spec.learned:
        return spec.keep_prob, None
    if mode == "det":
        return kuma_mean(p.kuma.a, p.kuma.b), None
    u = float(rng.random())
    return kuma_sample(p.kuma.a, p.kuma.b, u), u


def sample_step_masks(config: GCNConfig, params: list, graph: PreparedGraph,
                      rng: np.random.Generator, tape=None,
                      mode: str = "train") -> StepDraws:
    """Draw one full set of per-layer masks.

    Modes: ``train`` (stochastic; relaxed masks for learned layers when the
    estimator is ``concrete``), ``mc`` (stochastic, binary everywhere), and
    ``det`` (deterministic expected-keep evaluation).
    """
    if mode not in ("train", "mc", "det"):
        raise ContractViolation(f"unknown mask mode '{mode}'")
    n = graph.edges.n
    draws = StepDraws()
    prev_edge = all_ones_mask(graph.edges)  # random-walk layer coupling
    for l, spec in enumerate(config.masks):
        p = params[l]
        f_in = config.layer_dims[l]
        lm = LayerMasks()
        pi_val, pi_tensor, u_pi = None, None, None
        relaxed = (mode == "train" and config.estimator == "concrete"
                   and spec.learned)
        if spec.kind == MaskKind.NONE:
            pass
        elif spec.kind == MaskKind.DROPOUT:
            if mode == "det":
                lm.feature_scale = spec.keep_prob
            else:
                lm.feature = sample_dropout_mask(n, f_in, spec.keep_prob, rng)
            pi_val = spec.keep_prob
        elif spec.kind == MaskKind.NODE_SAMPLING:
            if mode == "det":
                lm.feature_scale = spec.keep_prob
            else:
                lm.feature = sample_node_mask(n, spec.keep_prob, rng).reshape(-1, 1)
            pi_val = spec.keep_prob
        elif spec.kind in (MaskKind.DROPEDGE, MaskKind.GDC):
            nb = spec.n_blocks if spec.kind == MaskKind.GDC else 1
            if (mode == "train" and config.estimator == "arm" and spec.learned):
                # ARM owns the edge variables; only the keep prob is drawn
                # here. The trainer installs masks built from the step's
                # shared uniform vector before the forward pass.
                pi_val, u_pi = _keep_prob_for(spec, p, mode, rng)
            elif relaxed:
                u_pi = float(rng.random())
                pi_tensor = record_kuma_sample(tape, p.kuma.log_a,
                                               p.kuma.log_b, u_pi)
                pi_val = pi_tensor.item()
                lm.edge = sample_concrete_mask(
                    graph.edges, nb, pi_tensor, spec.temperature, rng, tape,
                    symmetric=spec.symmetric,
                    standard=config.concrete_standard,
                    protect_self_loops=spec.protect_self_loops)
            else:
                pi_val, u_pi = _keep_prob_for(spec, p, mode, rng)
                if mode == "det":
                    lm.edge = expected_keep_mask(
                        graph.edges, pi_val, nb,
                        protect_self_loops=spec.protect_self_loops)
                elif spec.kind == MaskKind.DROPEDGE:
                    lm.edge = sample_dropedge_mask(
                        graph.edges, pi_val, spec.symmetric, rng,
                        protect_self_loops=spec.protect_self_loops)
                else:
                    lm.edge = sample_gdc_masks(
                        graph.edges, nb, pi_val, spec.symmetric, rng,
                        protect_self_loops=spec.protect_self_loops)
        elif spec.kind == MaskKind.RANDOM_WALK:
            pi_val = spec.keep_prob
            if mode == "det":
                lm.edge = expected_keep_mask(graph.edges, pi_val, 1)
            else:
                lm.edge = sample_randomwalk_mask(graph.edges, pi_val,
                                                 prev_edge, rng)
                prev_edge = lm.edge
        if spec.dropout_keep is not None:
            if mode == "det":
                lm.feature_scale = (spec.dropout_keep if lm.feature_scale is None
                                    else lm.feature_scale * spec.dropout_keep)
            else:
                extra = sample_dropout_mask(n, f_in, spec.dropout_keep, rng)
                lm.feature = extra if lm.feature is None else lm.feature * extra
        draws.layer_masks.append(lm)
        draws.pi_values.append(pi_val)
        draws.pi_tensors.append(pi_tensor)
        draws.u_pi.append(u_pi)
    return draws


def training_loss(tape, logprobs: Tensor, labels: np.ndarray,
                  observed: np.ndarray, params: list, kl_terms: list,
                  l2_factor: float, warmup: float,
                  weight_coefs: list | None = None) -> Tensor:
    """Masked NLL + weight penalty + warm-up-scaled KL, on one tape.

    By default the weight penalty is flat ``l2_factor * sum_l ||M_l||^2``;
    ``weight_coefs`` (scalar tensors, one per layer) replaces the flat
    factor with per-layer coefficients, e.g. ``|E| * pi_l / 2``.
    """
    loss = record_masked_nll(tape, logprobs, labels, observed)
    for l, p in enumerate(params):
        fro = record_frobenius_sq(tape, p.m)
        if weight_coefs is not None:
            term = record_mul(tape, weight_coefs[l], fro)
        else:
            term = record_scale(tape, fro, l2_factor)
        loss = record_add(tape, loss, term)
    for kl in kl_terms:
        loss = record_add(tape, loss, record_scale(tape, kl, warmup))
    return loss


def record_kl_terms(tape, config: GCNConfig, params: list) -> list:
    """KL(q(pi_l) || prior) for every learned layer, recorded on the tape."""
    n_layers = config.n_layers
    terms = []
    for p in params:
        if p.kuma is not None:
            terms.append(record_kl_kuma_beta(
                tape, p.kuma.log_a, p.kuma.log_b, config.beta_prior_c,
                n_layers, full_series=config.kl_full_series))
    return terms


def forward_deterministic(params, x, graph, config, capture_hidden=False):
    """Expected-keep evaluation pass (no sampling, no tape)."""
    draws = sample_step_masks(config, params, graph,
                              np.random.default_rng(0), tape=None, mode="det")
    return forward(params, x, graph, draws.layer_masks, tape=None,
                   capture_hidden=capture_hidden,
                   renorm_after_mask=config.renorm_after_mask)


def predict_mc(params, x, graph, config, s: int, rng: np.random.Generator):
    """Monte-Carlo predictive distribution from ``s`` stochastic passes.

    Returns (mean class probabilities, per-sample probabilities); keep
    probabilities of learned layers are drawn fresh per pass.
    """
    if s < 1:
        raise ContractViolation("need at least one Monte Carlo sample")
    per_sample = np.empty((s, x.data.shape[0], params[-1].m.data.shape[1]))
    for i in range(s):
        draws = sample_step_masks(config, params, graph, rng, tape=None,
                                  mode="mc")
        logprobs = forward(params, x, graph, draws.layer_masks, tape=None,
                           renorm_after_mask=config.renorm_after_mask)
        per_sample[i] = np.exp(logprobs.data)
    return per_sample.mean(axis=0), per_sample


# ---------------------------------------------------------------------------
# checkpoints: magic "GDCN", u32 version, u32 layer count, u32 dims,
# row-major float64 weight matrices, then per-layer drop parameters.
# Version 2 appends a bias vector after each weight matrix.


def save_checkpoint(path, params: list) -> None:
    version = 2 if any(p.bias is not None for p in params) else 1
    dims = [p.m.data.shape[0] for p in params] + [params[-1].m.data.shape[1]]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", version, len(params)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        for p in params:
            fh.write(p.m.data.astype("<f8").tobytes())
            if version == 2:
                bias = p.bias.data if p.bias is not None else np.zeros(
                    (1, p.m.data.shape[1]))
                fh.write(bias.astype("<f8").tobytes())
        for p in params:
            if p.kuma is not None:
                fh.write(struct.pack("<Bdd", 1, p.kuma.log_a.item(),
                                     p.kuma.log_b.item()))
            else:
                fh.write(struct.pack("<Bd", 0, p.fixed_keep))


def load_checkpoint(path) -> list:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ContractViolation(f"bad checkpoint magic {magic!r}")
        version, n_layers = struct.unpack("<II", fh.read(8))
        if version not in (1, 2):
            raise ContractViolation(f"unsupported checkpoint version {version}")
        dims = struct.unpack(f"<{n_layers + 1}I", fh.read(4 * (n_layers + 1)))
        params = []
        for l in range(n_layers):
            f_in, f_out = dims[l], dims[l + 1]
            m = np.frombuffer(fh.read(8 * f_in * f_out),
                              dtype="<f8").reshape(f_in, f_out)
            bias = None
            if version == 2:
                bias = np.frombuffer(fh.read(8 * f_out), dtype="<f8").reshape(1, f_out)
            params.append(LayerParams(
                m=parameter(m.copy()),
                bias=parameter(bias.copy()) if bias is not None else None))
        for p in params:
            (kind,) = struct.unpack("<B", fh.read(1))
            if kind == 1:
                log_a, log_b = struct.unpack("<dd", fh.read(16))
                p.kuma = KumaraswamyParams(float(np.exp(log_a)),
                                           float(np.exp(log_b)))
            else:
                (p.fixed_keep,) = struct.unpack("<d", fh.read(8))
    return params
