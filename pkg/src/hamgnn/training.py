"""Losses, Adam, splits, negative sampling, metrics, and the train loop.

Training is full batch: one tape per epoch, gradients through the unrolled
solver, an Adam step, then an eval-mode pass for the validation and test
metrics.  Early stopping keeps the best-validation checkpoint.  Every
random choice derives from the config seed, so a (config, seed) pair
replays to an identical metric log.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalError, Tensor
from .energy import EnergyKind
from .graph import SparseGraph, build_graph
from .integrators import SolverConfig
from .model import (
    FlowKind,
    ModelParams,
    classify,
    embed,
    init_params,
    link_logits,
    link_probabilities,
)


class TrainingError(RuntimeError):
    """Raised when a training run must abort (for example non-finite loss)."""


@dataclass(frozen=True)
class SplitMasks:
    """Disjoint node index sets for train/val/test."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        a, b, c = (set(self.train.tolist()), set(self.val.tolist()), set(self.test.tolist()))
        if a & b or a & c or b & c:
            raise ValueError("split masks must be disjoint")


def make_citation_split(
    labels: np.ndarray,
    rng: np.random.Generator,
    per_class: int = 20,
    num_val: int = 500,
    num_test: int = 1000,
) -> SplitMasks:
    """Citation-style split: fixed count per class, then val/test pools."""
    labels = np.asarray(labels, dtype=np.int64)
    train: list[int] = []
    for c in np.unique(labels):
        members = np.where(labels == c)[0]
        if members.size < per_class:
            raise ValueError(f"class {c} has only {members.size} members, need {per_class}")
        train.extend(rng.permutation(members)[:per_class].tolist())
    train_arr = np.array(sorted(train), dtype=np.int64)
    rest = np.setdiff1d(np.arange(labels.size), train_arr)
    rest = rng.permutation(rest)
    if rest.size < num_val + num_test:
        raise ValueError(f"not enough nodes left for val={num_val} test={num_test}")
    return SplitMasks(
        train=train_arr,
        val=np.sort(rest[:num_val]),
        test=np.sort(rest[num_val : num_val + num_test]),
    )


def make_fraction_split(
    labels: np.ndarray,
    rng: np.random.Generator,
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
) -> SplitMasks:
    """Stratified random split by class, proportional to ``fractions``."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    labels = np.asarray(labels, dtype=np.int64)
    train: list[int] = []
    val: list[int] = []
    test: list[int] = []
    for c in np.unique(labels):
        members = rng.permutation(np.where(labels == c)[0])
        n = members.size
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        n_train = min(n_train, n)
        n_val = min(n_val, n - n_train)
        train.extend(members[:n_train].tolist())
        val.extend(members[n_train : n_train + n_val].tolist())
        test.extend(members[n_train + n_val :].tolist())
    return SplitMasks(
        train=np.array(sorted(train), dtype=np.int64),
        val=np.array(sorted(val), dtype=np.int64),
        test=np.array(sorted(test), dtype=np.int64),
    )


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run."""

    task: str = "nc"  # "nc" | "lp"
    lr: float = 0.01
    weight_decay: float = 0.0
    dropout: float = 0.0
    time: float = 1.0
    step_size: float = 1.0
    method: str = "euler"
    rtol: float = 1e-6
    atol: float = 1e-8
    max_steps: int = 10_000
    hidden_dim: int = 16
    epochs: int = 1000
    patience: int = 100
    seed: int = 0
    flow: FlowKind = FlowKind.HAMILTONIAN
    energy_kind: EnergyKind = EnergyKind.LEARNED_GCN
    fermi_r: float = 2.0
    fermi_t: float = 1.0
    lp_fractions: tuple[float, float, float] = (0.85, 0.05, 0.10)

    def __post_init__(self):
        if self.task not in ("nc", "lp"):
            raise ValueError(f"task must be 'nc' or 'lp', got {self.task!r}")
        if self.lr < 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")

    def solver(self) -> SolverConfig:
        return SolverConfig(
            method=self.method,
            time=self.time,
            step_size=self.step_size if self.method in ("euler", "rk4") else None,
            rtol=self.rtol,
            atol=self.atol,
            max_steps=self.max_steps,
        )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metric: float
    test_metric: float
    wall_ms: float = field(compare=False, default=0.0)

    def to_json_dict(self, include_timing: bool = False) -> dict:
        d = {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_metric": self.val_metric,
            "test_metric": self.test_metric,
        }
        if include_timing:
            d["wall_ms"] = self.wall_ms
        return d


@dataclass
class TrainResult:
    params: ModelParams
    log: list[EpochRecord]
    best_epoch: int
    val_metric: float
    test_metric: float


# ---------------------------------------------------------------------------
# Losses and optimizer
# ---------------------------------------------------------------------------


def cross_entropy_loss(probs: Tensor, labels, mask) -> Tensor:
    """Mean -log p[true class] over the masked nodes (taped)."""
    return ad.masked_nll(probs, labels, mask)


def l2_penalty(tensors) -> Tensor:
    """Sum of squared entries over a list of tensors (taped)."""
    total = None
    for t in tensors:
        sq = ad.sum_squares(t)
        total = sq if total is None else ad.add(total, sq)
    if total is None:
        raise ValueError("l2_penalty: no tensors given")
    return total


@dataclass
class AdamState:
    moments: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: list[Tensor],
    grads,
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    Weight decay is not applied here; it enters through the loss.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    for i, p in enumerate(params):
        g = grads.of(p)
        m, v = state.moments.get(i, (np.zeros(p.shape), np.zeros(p.shape)))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.moments[i] = (m, v)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.value[...] = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


# ---------------------------------------------------------------------------
# Negative sampling and metrics
# ---------------------------------------------------------------------------


def negative_sample(graph: SparseGraph, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly sample ``count`` distinct non-edges (u < v), no self pairs."""
    n = graph.num_nodes
    max_pairs = n * (n - 1) // 2
    existing = {(int(u), int(v)) for u, v in graph.edges}
    available = max_pairs - len(existing)
    if count > available:
        raise ValueError(f"requested {count} non-edges but only {available} exist")
    chosen: set[tuple[int, int]] = set()
    out = np.empty((count, 2), dtype=np.int64)
    filled = 0
    while filled < count:
        batch = rng.integers(0, n, size=(max(64, 2 * (count - filled)), 2))
        for u, v in batch:
            if u == v:
                continue
            pair = (int(min(u, v)), int(max(u, v)))
            if pair in existing or pair in chosen:
                continue
            chosen.add(pair)
            out[filled] = pair
            filled += 1
            if filled == count:
                break
    return out


def evaluate_nc(probs_values: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    """Accuracy of argmax predictions; ties resolve to the lowest class id."""
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise ValueError("evaluate_nc: empty mask")
    preds = np.argmax(probs_values[mask], axis=1)
    return float(np.mean(preds == np.asarray(labels)[mask]))


def roc_auc(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """ROC-AUC by the Mann-Whitney rank statistic with tie-averaged ranks."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("roc_auc: empty score set")
    scores = np.concatenate([pos, neg])
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i + 1
        while j < scores.size and sorted_scores[j] == sorted_scores[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + 1 + j)
        i = j
    n_pos, n_neg = pos.size, neg.size
    return float((ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def evaluate_lp(
    z_values: np.ndarray,
    pos: np.ndarray,
    neg: np.ndarray,
    fermi_r: float,
    fermi_t: float,
) -> float:
    pos_scores = link_probabilities(z_values, pos, fermi_r, fermi_t)
    neg_scores = link_probabilities(z_values, neg, fermi_r, fermi_t)
    return roc_auc(pos_scores, neg_scores)


# ---------------------------------------------------------------------------
# Link-prediction edge splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinkSplit:
    """Positive-edge split plus fixed negatives; propagation uses train edges."""

    graph_train: SparseGraph
    train_pos: np.ndarray
    val_pos: np.ndarray
    val_neg: np.ndarray
    test_pos: np.ndarray
    test_neg: np.ndarray


def make_link_split(
    graph: SparseGraph,
    rng: np.random.Generator,
    fractions: tuple[float, float, float] = (0.85, 0.05, 0.10),
) -> LinkSplit:
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    m = graph.num_edges
    perm = rng.permutation(m)
    n_val = int(round(fractions[1] * m))
    n_test = int(round(fractions[2] * m))
    n_train = m - n_val - n_test
    if n_train < 1 or n_val < 1 or n_test < 1:
        raise ValueError(f"edge split {fractions} leaves an empty part on {m} edges")
    edges = graph.edges[perm]
    train_pos = edges[:n_train]
    val_pos = edges[n_train : n_train + n_val]
    test_pos = edges[n_train + n_val :]
    negs = negative_sample(graph, n_val + n_test, rng)
    return LinkSplit(
        graph_train=build_graph(graph.num_nodes, train_pos),
        train_pos=train_pos,
        val_pos=val_pos,
        val_neg=negs[:n_val],
        test_pos=test_pos,
        test_neg=negs[n_val:],
    )


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


def _finite_or_abort(loss: Tensor, epoch: int) -> float:
    val = loss.item()
    if not np.isfinite(val):
        raise TrainingError(f"non-finite loss at epoch {epoch}")
    return val


def _init_from_config(bundle, cfg: TrainConfig, rng: np.random.Generator) -> ModelParams:
    return init_params(
        raw_dim=bundle.features.shape[1],
        feature_dim=cfg.hidden_dim,
        num_classes=bundle.num_classes,
        rng=rng,
        with_vanilla=cfg.flow is FlowKind.VANILLA_ODE,
        fermi_r=cfg.fermi_r,
        fermi_t=cfg.fermi_t,
        dropout_rate=cfg.dropout,
    )


def train(bundle, cfg: TrainConfig, params: ModelParams | None = None, link_split: LinkSplit | None = None) -> TrainResult:
    """Train on a DatasetBundle per ``cfg.task`` and return the best model."""
    if cfg.task == "nc":
        return train_nc(bundle, cfg, params)
    return train_lp(bundle, cfg, params, link_split)


def train_nc(bundle, cfg: TrainConfig, params: ModelParams | None = None) -> TrainResult:
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = _init_from_config(bundle, cfg, rng)
    if bundle.splits is None:
        raise ValueError("dataset bundle has no node splits")
    solver = cfg.solver()
    raw = ad.constant(bundle.features)
    labels = bundle.labels
    splits = bundle.splits
    weights = [t for _, t in params.trainable()]
    adam = AdamState()

    log: list[EpochRecord] = []
    best_val = -np.inf
    best_epoch = -1
    best_test = 0.0
    best_snap = params.snapshot()
    since_best = 0

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        try:
            with ad.Tape() as tape:
                z = embed(
                    raw,
                    bundle.graph,
                    params,
                    solver,
                    flow=cfg.flow,
                    energy_kind=cfg.energy_kind,
                    rng_seed=(cfg.seed, epoch),
                    training=True,
                )
                probs = classify(z, params)
                loss = cross_entropy_loss(probs, labels, splits.train)
                if cfg.weight_decay > 0:
                    loss = ad.add(loss, ad.scale(l2_penalty(weights), cfg.weight_decay))
                loss_val = _finite_or_abort(loss, epoch)
                grads = tape.backward(loss)
        except NumericalError as exc:
            raise TrainingError(f"non-finite loss at epoch {epoch}") from exc
        adam_step(weights, grads, adam, cfg.lr)

        z_eval = embed(raw, bundle.graph, params, solver, flow=cfg.flow, energy_kind=cfg.energy_kind)
        probs_eval = classify(z_eval, params).value
        val_acc = evaluate_nc(probs_eval, labels, splits.val)
        test_acc = evaluate_nc(probs_eval, labels, splits.test)
        log.append(
            EpochRecord(epoch, loss_val, val_acc, test_acc, (time.perf_counter() - t0) * 1e3)
        )

        if val_acc > best_val:
            best_val, best_epoch, best_test = val_acc, epoch, test_acc
            best_snap = params.snapshot()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    params.restore(best_snap)
    return TrainResult(params, log, best_epoch, best_val, best_test)


def train_lp(
    bundle,
    cfg: TrainConfig,
    params: ModelParams | None = None,
    link_split: LinkSplit | None = None,
) -> TrainResult:
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = _init_from_config(bundle, cfg, rng)
    if link_split is None:
        link_split = make_link_split(bundle.graph, rng, cfg.lp_fractions)
    solver = cfg.solver()
    graph = link_split.graph_train
    raw = ad.constant(bundle.features)
    weights = [t for _, t in params.trainable()]
    adam = AdamState()
    n_train = link_split.train_pos.shape[0]

    log: list[EpochRecord] = []
    best_val = -np.inf
    best_epoch = -1
    best_test = 0.0
    best_snap = params.snapshot()
    since_best = 0

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        neg = negative_sample(bundle.graph, n_train, rng)
        pairs = np.concatenate([link_split.train_pos, neg], axis=0)
        targets = np.concatenate([np.ones((n_train, 1)), np.zeros((n_train, 1))], axis=0)
        try:
            with ad.Tape() as tape:
                z = embed(
                    raw,
                    graph,
                    params,
                    solver,
                    flow=cfg.flow,
                    energy_kind=cfg.energy_kind,
                    rng_seed=(cfg.seed, epoch),
                    training=True,
                )
                logits = link_logits(z, pairs, params.fermi_r, params.fermi_t)
                loss = ad.bce_with_logits(logits, targets)
                if cfg.weight_decay > 0:
                    loss = ad.add(loss, ad.scale(l2_penalty(weights), cfg.weight_decay))
                loss_val = _finite_or_abort(loss, epoch)
                grads = tape.backward(loss)
        except NumericalError as exc:
            raise TrainingError(f"non-finite loss at epoch {epoch}") from exc
        adam_step(weights, grads, adam, cfg.lr)

        z_eval = embed(raw, graph, params, solver, flow=cfg.flow, energy_kind=cfg.energy_kind).value
        val_auc = evaluate_lp(z_eval, link_split.val_pos, link_split.val_neg, params.fermi_r, params.fermi_t)
        test_auc = evaluate_lp(z_eval, link_split.test_pos, link_split.test_neg, params.fermi_r, params.fermi_t)
        log.append(
            EpochRecord(epoch, loss_val, val_auc, test_auc, (time.perf_counter() - t0) * 1e3)
        )

        if val_auc > best_val:
            best_val, best_epoch, best_test = val_auc, epoch, test_auc
            best_snap = params.snapshot()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    params.restore(best_snap)
    return TrainResult(params, log, best_epoch, best_val, best_test)
