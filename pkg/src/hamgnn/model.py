"""The end-to-end embedding pipeline and its task heads.

Pipeline: compress raw features with one FC layer (dropout in training
mode), derive initial momenta, integrate the chosen flow, then project the
final phase state onto its feature half to get embeddings Z.  Heads: a
linear softmax classifier over Z and a Fermi-Dirac distance decoder for
edge probabilities.  Two ablation flows ride along: a plain two-layer
neural ODE on q alone and a parameter-free linear diffusion dq = (A2 - I)q.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Tensor
from .energy import (
    EnergyKind,
    EnergyParams,
    MomentumParams,
    PhaseState,
    energy_function,
    field_function,
    momentum_init,
)
from .graph import SparseGraph
from .integrators import SolverConfig, Trajectory, integrate


class FlowKind(enum.Enum):
    HAMILTONIAN = "hamiltonian"
    VANILLA_ODE = "vanilla-ode"
    LINEAR_DIFFUSION = "linear-diffusion"


@dataclass(frozen=True)
class VanillaFieldParams:
    """Two FC layers with tanh in between: dq = W2 tanh(q W1 + b1) + b2."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class ModelParams:
    """All trainable weights plus the fixed decoder scalars.

    fermi_r / fermi_t parameterize the edge decoder and are treated as
    hyperparameters, not trained.  ``vanilla`` is populated only when the
    plain neural-ODE ablation flow is in use.
    """

    input_weight: Tensor
    input_bias: Tensor
    momentum: MomentumParams
    energy: EnergyParams
    decoder_weight: Tensor
    decoder_bias: Tensor
    vanilla: VanillaFieldParams | None = None
    fermi_r: float = 2.0
    fermi_t: float = 1.0
    dropout_rate: float = 0.0

    def __post_init__(self):
        if not self.fermi_t > 0:
            raise ValueError(f"fermi_t must be positive, got {self.fermi_t}")
        if not self.fermi_r > 0:
            raise ValueError(f"fermi_r must be positive, got {self.fermi_r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        r = self.input_weight.shape[1]
        if self.momentum.weight.shape[0] != r:
            raise ValueError("momentum width does not match compressed feature width")
        if self.energy.feature_dim != r:
            raise ValueError("energy input width does not match compressed feature width")
        if self.decoder_weight.shape[0] != r:
            raise ValueError("decoder width does not match compressed feature width")

    @property
    def feature_dim(self) -> int:
        return self.input_weight.shape[1]

    @property
    def num_classes(self) -> int:
        return self.decoder_weight.shape[1]

    def trainable(self) -> list[tuple[str, Tensor]]:
        named = [
            ("input_weight", self.input_weight),
            ("input_bias", self.input_bias),
            ("momentum_weight", self.momentum.weight),
            ("momentum_bias", self.momentum.bias),
            ("energy_w1", self.energy.w1),
            ("energy_w2", self.energy.w2),
            ("decoder_weight", self.decoder_weight),
            ("decoder_bias", self.decoder_bias),
        ]
        if self.vanilla is not None:
            named += [
                ("vanilla_w1", self.vanilla.w1),
                ("vanilla_b1", self.vanilla.b1),
                ("vanilla_w2", self.vanilla.w2),
                ("vanilla_b2", self.vanilla.b2),
            ]
        return named

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.value.copy() for name, t in self.trainable()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, t in self.trainable():
            t.value[...] = snap[name]


def glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def init_params(
    raw_dim: int,
    feature_dim: int,
    num_classes: int,
    rng: np.random.Generator,
    hidden_dim: int | None = None,
    readout_dim: int | None = None,
    with_vanilla: bool = False,
    fermi_r: float = 2.0,
    fermi_t: float = 1.0,
    dropout_rate: float = 0.0,
    energy_eps: float = 1e-12,
) -> ModelParams:
    """Glorot-uniform weights, zero biases, all seeded through ``rng``."""
    r = feature_dim
    h = hidden_dim if hidden_dim is not None else r
    h_out = readout_dim if readout_dim is not None else r
    vanilla = None
    if with_vanilla:
        vanilla = VanillaFieldParams(
            w1=ad.parameter(glorot(rng, r, r)),
            b1=ad.parameter(np.zeros((1, r))),
            w2=ad.parameter(glorot(rng, r, r)),
            b2=ad.parameter(np.zeros((1, r))),
        )
    return ModelParams(
        input_weight=ad.parameter(glorot(rng, raw_dim, r)),
        input_bias=ad.parameter(np.zeros((1, r))),
        momentum=MomentumParams(
            weight=ad.parameter(glorot(rng, r, r)),
            bias=ad.parameter(np.zeros((1, r))),
        ),
        energy=EnergyParams(
            w1=ad.parameter(glorot(rng, 2 * r, h)),
            w2=ad.parameter(glorot(rng, h, h_out)),
            eps=energy_eps,
        ),
        decoder_weight=ad.parameter(glorot(rng, r, num_classes)),
        decoder_bias=ad.parameter(np.zeros((1, num_classes))),
        vanilla=vanilla,
        fermi_r=fermi_r,
        fermi_t=fermi_t,
        dropout_rate=dropout_rate,
    )


def flow_field(
    flow: FlowKind,
    graph: SparseGraph,
    params: ModelParams,
    energy_kind: EnergyKind = EnergyKind.LEARNED_GCN,
):
    """Field function for the chosen flow; q-only flows keep dp = 0."""
    if flow is FlowKind.HAMILTONIAN:
        return field_function(graph, energy_kind, params.energy)
    if flow is FlowKind.VANILLA_ODE:
        if params.vanilla is None:
            raise ValueError("vanilla flow requested but params.vanilla is missing")
        vp = params.vanilla

        def vanilla(state: PhaseState):
            hidden = ad.tanh(ad.add(ad.matmul(state.q, vp.w1), vp.b1))
            dq = ad.add(ad.matmul(hidden, vp.w2), vp.b2)
            return dq, ad.constant(np.zeros(state.p.shape))

        return vanilla

    def diffusion(state: PhaseState):
        dq = ad.add(ad.spmm(graph, state.q), ad.scale(state.q, -1.0))
        return dq, ad.constant(np.zeros(state.p.shape))

    return diffusion


def _initial_state(
    raw_features: Tensor,
    params: ModelParams,
    flow: FlowKind,
    rng_seed,
    training: bool,
) -> PhaseState:
    q0 = ad.add(ad.matmul(raw_features, params.input_weight), params.input_bias)
    if training and params.dropout_rate > 0.0:
        rng = np.random.default_rng(rng_seed)
        keep = 1.0 - params.dropout_rate
        mask = (rng.random(q0.shape) < keep).astype(np.float64) / keep
        q0 = ad.elementwise_mul(q0, ad.constant(mask))
    if flow is FlowKind.HAMILTONIAN:
        p0 = momentum_init(q0, params.momentum)
    else:
        p0 = ad.constant(np.zeros(q0.shape))
    return PhaseState(q0, p0)


def embed(
    raw_features,
    graph: SparseGraph,
    params: ModelParams,
    cfg: SolverConfig,
    flow: FlowKind = FlowKind.HAMILTONIAN,
    energy_kind: EnergyKind = EnergyKind.LEARNED_GCN,
    rng_seed=0,
    training: bool = False,
) -> Tensor:
    """Embeddings Z = q(T): propagate and project away the momenta."""
    raw = raw_features if isinstance(raw_features, Tensor) else ad.constant(raw_features)
    if raw.shape[0] != graph.num_nodes:
        raise ValueError(f"features have {raw.shape[0]} rows, graph has {graph.num_nodes} nodes")
    state0 = _initial_state(raw, params, flow, rng_seed, training)
    fieldfn = flow_field(flow, graph, params, energy_kind)
    end, _ = integrate(state0, fieldfn, cfg)
    return end.q


def embed_with_trace(
    raw_features,
    graph: SparseGraph,
    params: ModelParams,
    cfg: SolverConfig,
    flow: FlowKind = FlowKind.HAMILTONIAN,
    energy_kind: EnergyKind = EnergyKind.LEARNED_GCN,
    rng_seed=0,
) -> tuple[Tensor, Trajectory]:
    """Eval-mode embedding that also records the energy along the way."""
    raw = raw_features if isinstance(raw_features, Tensor) else ad.constant(raw_features)
    state0 = _initial_state(raw, params, flow, rng_seed, training=False)
    fieldfn = flow_field(flow, graph, params, energy_kind)
    efn = None
    if flow is FlowKind.HAMILTONIAN:
        value = energy_function(graph, energy_kind, params.energy)
        efn = value
    end, trace = integrate(state0, fieldfn, cfg, record_trace=True, energy_fn=efn)
    return end.q, trace


def classify(z: Tensor, params: ModelParams) -> Tensor:
    """Row-wise class probabilities: softmax(Z W + b)."""
    return ad.softmax_rows(ad.add(ad.matmul(z, params.decoder_weight), params.decoder_bias))


def link_probability(z, u: int, v: int, fermi_r: float = 2.0, fermi_t: float = 1.0) -> float:
    """Edge probability 1 / (exp((d^2 - r)/t) + 1) from embedding rows."""
    zv = z.value if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    d2 = float(np.sum((zv[u] - zv[v]) ** 2))
    return float(expit((fermi_r - d2) / fermi_t))


def link_probabilities(z_values: np.ndarray, pairs: np.ndarray, fermi_r: float, fermi_t: float) -> np.ndarray:
    """Vectorized decoder over an (m, 2) pair array; returns shape (m,)."""
    pairs = np.asarray(pairs, dtype=np.int64)
    diff = z_values[pairs[:, 0]] - z_values[pairs[:, 1]]
    d2 = np.sum(diff * diff, axis=1)
    return expit((fermi_r - d2) / fermi_t)


def link_logits(z: Tensor, pairs: np.ndarray, fermi_r: float, fermi_t: float) -> Tensor:
    """Taped decoder logits (r - d^2)/t for training; sigmoid gives the prob."""
    pairs = np.asarray(pairs, dtype=np.int64)
    zu = ad.take_rows(z, pairs[:, 0])
    zv = ad.take_rows(z, pairs[:, 1])
    diff = ad.add(zu, ad.scale(zv, -1.0))
    sq = ad.elementwise_mul(diff, diff)
    d2 = ad.matmul(sq, ad.constant(np.ones((z.shape[1], 1))))
    shifted = ad.add(d2, ad.constant(np.full((1, 1), -fermi_r)))
    return ad.scale(shifted, -1.0 / fermi_t)


def dirichlet_energy(graph: SparseGraph, z_values: np.ndarray) -> float:
    """0.5 * sum over edges of squared embedding differences."""
    if graph.num_edges == 0:
        return 0.0
    diff = z_values[graph.edges[:, 0]] - z_values[graph.edges[:, 1]]
    return 0.5 * float(np.sum(diff * diff))


def export_embeddings_csv(z_values: np.ndarray, path) -> None:
    """One row per node: node index followed by its embedding entries."""
    z = np.asarray(z_values, dtype=np.float64)
    cols = ["node"] + [f"z{j}" for j in range(z.shape[1])]
    lines = [",".join(cols)]
    for i in range(z.shape[0]):
        lines.append(",".join([str(i)] + [repr(float(v)) for v in z[i]]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
