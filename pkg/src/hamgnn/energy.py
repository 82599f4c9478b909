"""Learnable graph energy, momentum network, and the Hamiltonian field.

The learned energy is a two-layer graph convolution with tanh activation
and a smoothed Frobenius-norm readout over the concatenated (q ‖ p) phase
state.  Its gradient field is written out in closed form using the same
taped primitives, so the field itself stays differentiable with respect to
the weights and training never needs second-order tape support.  A
parameter-free quadratic kinetic energy is kept alongside as an
analytically solvable test mode: its flow is the straight-line exponential
map q(t) = q0 + t p0.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import SparseGraph


class EnergyKind(enum.Enum):
    LEARNED_GCN = "learned-gcn"
    QUADRATIC_KINETIC = "quadratic-kinetic"


@dataclass(frozen=True)
class EnergyParams:
    """Weights of the two convolution layers; no biases by design.

    w1 maps the 2r-wide (q ‖ p) concatenation to the hidden width, w2 maps
    hidden to readout width.  ``eps`` smooths the Frobenius readout at 0.
    """

    w1: Tensor
    w2: Tensor
    eps: float = 1e-12

    def __post_init__(self):
        if self.w1.shape[0] % 2 != 0:
            raise ValueError(f"w1 input width must be even (2r), got {self.w1.shape[0]}")
        if self.w1.shape[1] != self.w2.shape[0]:
            raise ValueError(f"layer widths disagree: w1 {self.w1.shape}, w2 {self.w2.shape}")
        if self.eps < 0:
            raise ValueError(f"eps must be non-negative, got {self.eps}")

    @property
    def feature_dim(self) -> int:
        return self.w1.shape[0] // 2


@dataclass(frozen=True)
class MomentumParams:
    """One fully connected layer, shared across nodes: p = q W + b."""

    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        r = self.weight.shape[0]
        if self.weight.shape != (r, r):
            raise ValueError(f"momentum weight must be square, got {self.weight.shape}")
        if self.bias.shape != (1, r):
            raise ValueError(f"momentum bias must be (1, {r}), got {self.bias.shape}")


@dataclass(frozen=True)
class PhaseState:
    """A point (q, p) on the phase space: matched feature/momentum matrices."""

    q: Tensor
    p: Tensor

    def __post_init__(self):
        if self.q.shape != self.p.shape:
            raise ValueError(f"q and p shapes differ: {self.q.shape} vs {self.p.shape}")

    def detached(self) -> "PhaseState":
        return PhaseState(Tensor(self.q.value), Tensor(self.p.value))


def momentum_init(q: Tensor, params: MomentumParams) -> Tensor:
    """Initial momenta from features, row-wise: p = q W + 1 b."""
    if q.shape[1] != params.weight.shape[0]:
        raise ValueError(
            f"feature width {q.shape[1]} does not match momentum weight {params.weight.shape}"
        )
    return ad.add(ad.matmul(q, params.weight), params.bias)


def _check_state(state: PhaseState, graph: SparseGraph, params: EnergyParams | None, kind: EnergyKind):
    if state.q.shape[0] != graph.num_nodes:
        raise ValueError(
            f"state has {state.q.shape[0]} rows but graph has {graph.num_nodes} nodes"
        )
    if kind is EnergyKind.LEARNED_GCN:
        if params is None:
            raise ValueError("learned energy requires parameters")
        if 2 * state.q.shape[1] != params.w1.shape[0]:
            raise ValueError(
                f"state width {state.q.shape[1]} does not match energy input width "
                f"{params.w1.shape[0]} (= 2r)"
            )


def energy(
    state: PhaseState,
    graph: SparseGraph,
    kind: EnergyKind = EnergyKind.LEARNED_GCN,
    params: EnergyParams | None = None,
) -> Tensor:
    """Scalar energy of a phase state.

    LEARNED_GCN: ||A2 tanh(A2 [q ‖ p] W1) W2||_F smoothed by eps, with A2
    the normalized propagation matrix.  QUADRATIC_KINETIC: 0.5 sum(p^2).
    """
    _check_state(state, graph, params, kind)
    if kind is EnergyKind.QUADRATIC_KINETIC:
        return ad.scale(ad.sum_squares(state.p), 0.5)
    x = ad.concat_cols(state.q, state.p)
    h1 = ad.tanh(ad.spmm(graph, ad.matmul(x, params.w1)))
    y = ad.spmm(graph, ad.matmul(h1, params.w2))
    return ad.frobenius_smooth(y, params.eps)


def hamiltonian_field(
    state: PhaseState,
    graph: SparseGraph,
    kind: EnergyKind = EnergyKind.LEARNED_GCN,
    params: EnergyParams | None = None,
) -> tuple[Tensor, Tensor]:
    """The flow (dq/dt, dp/dt) = (dE/dp, -dE/dq) at ``state``.

    For the learned energy the gradient is the explicit chain rule through
    readout, second layer, tanh, and first layer, expressed in taped
    primitives; for the quadratic energy it is simply (p, 0).
    """
    _check_state(state, graph, params, kind)
    if kind is EnergyKind.QUADRATIC_KINETIC:
        return state.p, ad.constant(np.zeros(state.q.shape))

    r = state.q.shape[1]
    x = ad.concat_cols(state.q, state.p)
    h1 = ad.tanh(ad.spmm(graph, ad.matmul(x, params.w1)))
    y = ad.spmm(graph, ad.matmul(h1, params.w2))
    e = ad.frobenius_smooth(y, params.eps)

    g_y = ad.div_scalar(y, e)
    g_h1 = ad.matmul(ad.spmm(graph, g_y), params.w2, transpose_b=True)
    damp = ad.add(ad.constant(np.ones(h1.shape)), ad.scale(ad.elementwise_mul(h1, h1), -1.0))
    g_h0 = ad.elementwise_mul(g_h1, damp)
    g_x = ad.matmul(ad.spmm(graph, g_h0), params.w1, transpose_b=True)
    de_dq, de_dp = ad.split_cols(g_x, r)
    return de_dp, ad.scale(de_dq, -1.0)


FieldFn = Callable[[PhaseState], tuple[Tensor, Tensor]]


def field_function(
    graph: SparseGraph,
    kind: EnergyKind = EnergyKind.LEARNED_GCN,
    params: EnergyParams | None = None,
) -> FieldFn:
    """Close over graph/params; the result maps PhaseState -> (dq, dp)."""

    def field(state: PhaseState) -> tuple[Tensor, Tensor]:
        return hamiltonian_field(state, graph, kind, params)

    return field


def energy_function(
    graph: SparseGraph,
    kind: EnergyKind = EnergyKind.LEARNED_GCN,
    params: EnergyParams | None = None,
) -> Callable[[PhaseState], float]:
    """Plain-float energy evaluator, recording suspended (for traces)."""

    def value(state: PhaseState) -> float:
        with ad.paused():
            return energy(state, graph, kind, params).item()

    return value
