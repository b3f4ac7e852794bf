"""Full-batch training loop: Adam, early stopping, seed management.

Each epoch rebuilds a fresh tape, samples masks (and keep probabilities
where learned), and takes one Adam step. Model selection uses a
deterministic expected-keep evaluation pass so that early stopping does not
chase mask noise. With the ARM estimator the recorded pass uses the keep
masks implied by the step's shared uniform vector, and two additional
unrecorded passes estimate the drop-rate gradients.
"""

from __future__ import annotations

import copy
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from .data import Dataset
from .errors import ContractViolation, DivergenceError
from .estimators import ArmDraw, arm_gradient, chain_to_kuma
from .graph import EdgeSet
from .masks import EdgeMask, MaskKind
from .model import (GCNConfig, LayerMasks, PreparedGraph, forward,
                    init_params, record_kl_terms, sample_step_masks,
                    training_loss)
from .tape import Tape, backward, constant, record_masked_nll, record_scale
from .variational import WarmupSchedule, kuma_mean, warmup_factor

_DIVERGENCE_LIMIT = 5


@dataclass
class TrainConfig:
    epochs: int = 2000
    lr: float = 0.005
    l2_factor: float = 5e-3
    warmup: WarmupSchedule | None = None
    patience: int = 200
    seeds: tuple = (0, 1, 2, 3, 4)

    def __post_init__(self):
        # lr == 0 is tolerated (a frozen run) so no-op training is testable
        if self.lr < 0:
            raise ContractViolation("lr must be non-negative")
        if self.patience < 1:
            raise ContractViolation("patience must be >= 1")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    nll: float
    kl: float
    val_acc: float
    test_acc: float
    keep_probs: list
    wall_time: float


EPOCH_CSV_HEADER = "epoch,train_loss,nll,kl,val_acc,test_acc,keep_probs,wall_time"


def epoch_log_rows(logs: list) -> list:
    rows = [EPOCH_CSV_HEADER]
    for e in logs:
        keeps = ";".join(repr(k) for k in e.keep_probs)
        rows.append(f"{e.epoch},{e.train_loss!r},{e.nll!r},{e.kl!r},"
                    f"{e.val_acc!r},{e.test_acc!r},{keeps},{e.wall_time!r}")
    return rows


class AdamState:
    """First/second moments per parameter tensor plus the step counter."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0
        self.rejected = 0


def adam_step(tensors: list, grads: dict, state: AdamState, lr: float) -> bool:
    """One Adam update over ``tensors``; returns False on non-finite grads."""
    for t in tensors:
        if not np.all(np.isfinite(grads[t])):
            state.rejected += 1
            return False
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for t in tensors:
        g = grads[t]
        m = state.m.get(t)
        if m is None:
            m = np.zeros_like(t.data)
            state.m[t] = m
            state.v[t] = np.zeros_like(t.data)
        v = state.v[t]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return True


@dataclass
class TrainResult:
    params: list
    logs: list
    best_epoch: int
    best_val_acc: float
    best_test_acc: float


def _det_eval(params, x, graph, config, labels, split, capture_hidden=False):
    out = sample_step_masks(config, params, graph, np.random.default_rng(0),
                            tape=None, mode="det")
    res = forward(params, x, graph, out.layer_masks, tape=None,
                  capture_hidden=capture_hidden,
                  renorm_after_mask=config.renorm_after_mask)
    logprobs, hidden = res if capture_hidden else (res, None)
    pred = logprobs.data.argmax(axis=1)
    val_acc = float(np.mean(pred[split.val] == labels[split.val]))
    test_acc = float(np.mean(pred[split.test] == labels[split.test]))
    return val_acc, test_acc, hidden


def _expected_keeps(config, params) -> list:
    keeps = []
    for spec, p in zip(config.masks, params):
        if p.kuma is not None:
            keeps.append(kuma_mean(p.kuma.a, p.kuma.b))
        elif spec.kind == MaskKind.NONE:
            keeps.append(1.0)
        else:
            keeps.append(spec.keep_prob)
    return keeps


def _arm_free_entries(spec, edges: EdgeSet) -> np.ndarray:
    """Positions holding an independent ARM variable for this layer."""
    free = np.ones(edges.n_entries, dtype=bool)
    if spec.symmetric:
        free &= edges.canonical()
    if spec.protect_self_loops:
        free &= ~edges.is_diag
    return np.flatnonzero(free)


def _arm_edge_mask(edges: EdgeSet, spec, z_drop: np.ndarray,
                   free_idx: np.ndarray) -> EdgeMask:
    """Keep mask (1 - drop indicators) scattered onto the full pattern."""
    nb = spec.n_blocks if spec.kind == MaskKind.GDC else 1
    z_drop = z_drop.reshape(nb, len(free_idx))
    blocks = []
    for b in range(nb):
        vals = np.ones(edges.n_entries)
        vals[free_idx] = 1.0 - z_drop[b]
        if spec.symmetric:
            idx = np.flatnonzero(~edges.canonical())
            vals[idx] = vals[edges.mirror[idx]]
        blocks.append(constant(vals))
    return EdgeMask(blocks=blocks, relaxed=False)


def train(dataset: Dataset, gcn_config: GCNConfig, train_config: TrainConfig,
          seed: int, graph: PreparedGraph | None = None,
          hidden_hook=None) -> TrainResult:
    """Train one model; returns the parameters of the best validation epoch.

    ``hidden_hook(epoch, hidden)`` receives the deterministic pass's hidden
    activations each epoch (used by the over-smoothing diagnostics).
    """
    if dataset.split is None:
        raise ContractViolation("dataset has no split")
    if graph is None:
        graph = PreparedGraph.from_edges(dataset.edges, dataset.n_nodes,
                                         renorm_trick=gcn_config.renorm_trick)
    rng = np.random.default_rng(seed)
    params = init_params(gcn_config, rng)
    tensors = [t for p in params for t in p.tensors()]
    state = AdamState()
    x = constant(dataset.features)
    labels = dataset.labels
    split = dataset.split
    arm = gcn_config.estimator == "arm"
    n_layers = gcn_config.n_layers

    logs = []
    best = {"val": -1.0, "test": 0.0, "epoch": -1,
            "snapshot": [t.data.copy() for t in tensors]}
    nonfinite_run = 0
    capture = hidden_hook is not None

    for epoch in range(train_config.epochs):
        t0 = time.perf_counter()
        tape = Tape()
        draws = sample_step_masks(gcn_config, params, graph, rng, tape=tape,
                                  mode="train")

        arm_layers = []  # (layer, spec, free_idx, u_flat)
        if arm:
            for l, spec in enumerate(gcn_config.masks):
                if not spec.learned:
                    continue
                free_idx = _arm_free_entries(spec, graph.edges)
                nb = spec.n_blocks if spec.kind == MaskKind.GDC else 1
                u = rng.random(nb * len(free_idx))
                arm_layers.append((l, spec, free_idx, u))
            # The recorded pass runs on the keep masks implied by this
            # step's u (the second ARM setting), keeping all noise shared.
            for l, spec, free_idx, u in arm_layers:
                alpha = logit(1.0 - draws.pi_values[l])
                z2 = (u < expit(alpha)).astype(np.float64)
                draws.layer_masks[l].edge = _arm_edge_mask(
                    graph.edges, spec, z2, free_idx)

        logprobs = forward(params, x, graph, draws.layer_masks, tape=tape,
                           renorm_after_mask=gcn_config.renorm_after_mask)
        kl_terms = record_kl_terms(tape, gcn_config, params)
        wf = warmup_factor(epoch, train_config.warmup)
        weight_coefs = None
        if gcn_config.kl_weight_scaling:
            weight_coefs = []
            for l, p in enumerate(params):
                pi_t = draws.pi_tensors[l]
                if pi_t is None:
                    pi_t = constant(draws.pi_values[l]
                                    if draws.pi_values[l] is not None else 1.0)
                weight_coefs.append(
                    record_scale(tape, pi_t, graph.edges.n_entries / 2.0))
        loss = training_loss(tape, logprobs, labels, split.train, params,
                             kl_terms, train_config.l2_factor, wf,
                             weight_coefs=weight_coefs)
        loss_val = loss.item()
        nll_val = -float(np.mean(
            logprobs.data[split.train, labels[split.train]]))
        kl_val = float(sum(k.item() for k in kl_terms))

        if not np.isfinite(loss_val):
            nonfinite_run += 1
            if nonfinite_run >= _DIVERGENCE_LIMIT:
                raise DivergenceError(
                    f"non-finite loss for {nonfinite_run} consecutive epochs "
                    f"(epoch {epoch})"
                )
        else:
            nonfinite_run = 0
            grads = backward(tape, loss)
            grad_map = {t: grads.get(t) for t in tensors}

            if arm and arm_layers:
                base_masks = draws.layer_masks

                def loss_eval(z_list):
                    lm = list(base_masks)
                    for (l, spec, free_idx, _), z in zip(arm_layers, z_list):
                        lm[l] = LayerMasks(
                            feature=base_masks[l].feature,
                            edge=_arm_edge_mask(graph.edges, spec, z, free_idx))
                    lp = forward(params, x, graph, lm, tape=None,
                                 renorm_after_mask=gcn_config.renorm_after_mask)
                    return record_masked_nll(None, lp, labels,
                                             split.train).item()

                draw = ArmDraw(
                    u=[u for *_, u in arm_layers],
                    alpha=np.array([logit(1.0 - draws.pi_values[l])
                                    for l, *_ in arm_layers]))
                est = arm_gradient(loss_eval, draw)
                for (l, *_), g_alpha in zip(arm_layers, est.grad_alpha):
                    p = params[l]
                    g_a, g_b = chain_to_kuma(g_alpha, draws.pi_values[l],
                                             p.kuma.a, p.kuma.b,
                                             draws.u_pi[l])
                    grad_map[p.kuma.log_a] = (grad_map[p.kuma.log_a]
                                              + g_a * p.kuma.a)
                    grad_map[p.kuma.log_b] = (grad_map[p.kuma.log_b]
                                              + g_b * p.kuma.b)

            adam_step(tensors, grad_map, state, train_config.lr)

        val_acc, test_acc, hidden = _det_eval(params, x, graph, gcn_config,
                                              labels, split,
                                              capture_hidden=capture)
        if capture:
            hidden_hook(epoch, hidden)
        logs.append(EpochLog(
            epoch=epoch, train_loss=loss_val, nll=nll_val, kl=kl_val,
            val_acc=val_acc, test_acc=test_acc,
            keep_probs=_expected_keeps(gcn_config, params),
            wall_time=time.perf_counter() - t0))
        if val_acc > best["val"]:
            best.update(val=val_acc, test=test_acc, epoch=epoch,
                        snapshot=[t.data.copy() for t in tensors])
        elif epoch - best["epoch"] >= train_config.patience:
            break

    for t, snap in zip(tensors, best["snapshot"]):
        t.data = snap
    return TrainResult(params=params, logs=logs,
                       best_epoch=max(best["epoch"], 0),
                       best_val_acc=max(best["val"], 0.0),
                       best_test_acc=best["test"])


@dataclass
class SeedResult:
    seed: int
    best_val_acc: float
    test_acc: float
    epochs_run: int
    result: TrainResult = field(repr=False)


@dataclass
class RunSummary:
    results: list
    mean_acc: float
    std_acc: float


def run_seeds(dataset: Dataset, gcn_config: GCNConfig,
              train_config: TrainConfig, graph: PreparedGraph | None = None,
              workers: int | None = None) -> RunSummary:
    """Train once per seed; summary is mean +/- sample std of test accuracy."""
    seeds = list(train_config.seeds)
    if not seeds:
        raise ContractViolation("at least one seed is required")
    if graph is None:
        graph = PreparedGraph.from_edges(dataset.edges, dataset.n_nodes,
                                         renorm_trick=gcn_config.renorm_trick)
    if workers is None:
        workers = int(os.environ.get("GDC_THREADS", "1"))
    workers = max(1, min(workers, len(seeds)))

    def one(seed):
        cfg = copy.deepcopy(gcn_config)
        res = train(dataset, cfg, train_config, seed, graph=graph)
        return SeedResult(seed=seed, best_val_acc=res.best_val_acc,
                          test_acc=res.best_test_acc,
                          epochs_run=len(res.logs), result=res)

    if workers == 1:
        results = [one(s) for s in seeds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, seeds))
    accs = np.array([r.test_acc for r in results])
    std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
    return RunSummary(results=results, mean_acc=float(accs.mean()), std_acc=std)
