"""ODE solvers for phase-space flows: Euler, RK4, Dormand-Prince 5(4).

All solver arithmetic goes through the autodiff primitives, so integrating
under an active tape makes the whole unrolled solve differentiable with
respect to anything the field depends on (discretize-then-optimize).  The
adaptive controller's error estimate is computed on raw values only; the
accepted-step sequence is treated as data-independent control flow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .energy import FieldFn, PhaseState


class IntegrationError(RuntimeError):
    """Adaptive solve ran out of steps or the state went non-finite."""


_METHODS = ("euler", "rk4", "dopri5")


@dataclass(frozen=True)
class SolverConfig:
    """Integration settings.

    ``time`` is the total horizon T (0 is allowed and returns the initial
    state unchanged).  Fixed-step methods need ``step_size`` dividing T into
    a whole number of steps; the adaptive method uses rtol/atol/max_steps.
    """

    method: str = "dopri5"
    time: float = 1.0
    step_size: float | None = None
    rtol: float = 1e-6
    atol: float = 1e-8
    max_steps: int = 10_000

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {_METHODS}")
        if self.time < 0:
            raise ValueError(f"time must be non-negative, got {self.time}")
        if self.method in ("euler", "rk4") and self.time > 0:
            if self.step_size is None or self.step_size <= 0:
                raise ValueError("fixed-step methods need a positive step_size")
            n = round(self.time / self.step_size)
            if n < 1 or abs(n * self.step_size - self.time) > 1e-9 * max(1.0, self.time):
                raise ValueError(
                    f"time {self.time} is not a whole number of steps of size {self.step_size}"
                )
        if self.method == "dopri5":
            if self.rtol <= 0 or self.atol <= 0:
                raise ValueError("dopri5 needs positive rtol and atol")
            if self.max_steps < 1:
                raise ValueError("max_steps must be at least 1")

    @property
    def num_steps(self) -> int:
        if self.method not in ("euler", "rk4"):
            raise ValueError("num_steps is defined for fixed-step methods only")
        return round(self.time / self.step_size) if self.time > 0 else 0


@dataclass
class Trajectory:
    """States at accepted step boundaries, with optional energies.

    ``accepted_error_norms`` is populated by the adaptive solver only; it
    holds the mixed-tolerance error estimate of each accepted step.
    """

    times: list[float] = field(default_factory=list)
    states: list[PhaseState] = field(default_factory=list)
    energies: list[float] | None = None
    accepted_error_norms: list[float] | None = None

    def append(self, t: float, state: PhaseState, energy_fn=None) -> None:
        self.times.append(t)
        self.states.append(state.detached())
        if energy_fn is not None:
            if self.energies is None:
                self.energies = []
            self.energies.append(float(energy_fn(state)))


def _axpy(state: PhaseState, k: tuple, h: float) -> PhaseState:
    """state + h * k, in taped arithmetic."""
    return PhaseState(
        ad.add(state.q, ad.scale(k[0], h)),
        ad.add(state.p, ad.scale(k[1], h)),
    )


def _combine(state: PhaseState, ks: list, coefs: list[float], h: float) -> PhaseState:
    q, p = state.q, state.p
    for k, c in zip(ks, coefs):
        if c == 0.0:
            continue
        q = ad.add(q, ad.scale(k[0], h * c))
        p = ad.add(p, ad.scale(k[1], h * c))
    return PhaseState(q, p)


def _check_finite(state: PhaseState, t: float) -> None:
    if not (np.all(np.isfinite(state.q.value)) and np.all(np.isfinite(state.p.value))):
        raise IntegrationError(f"non-finite state at t={t:.6g}")


def integrate(
    state0: PhaseState,
    fieldfn: FieldFn,
    cfg: SolverConfig,
    record_trace: bool = False,
    energy_fn=None,
) -> tuple[PhaseState, Trajectory | None]:
    """Integrate ``fieldfn`` from ``state0`` over [0, cfg.time].

    Returns the final state and, when ``record_trace`` is set, a Trajectory
    sampled at every accepted step boundary (energies filled in when
    ``energy_fn`` is given).
    """
    _check_finite(state0, 0.0)
    trace = Trajectory() if record_trace else None
    if trace is not None:
        trace.append(0.0, state0, energy_fn)
    if cfg.time == 0:
        return state0, trace
    if cfg.method == "euler":
        state = _run_euler(state0, fieldfn, cfg, trace, energy_fn)
    elif cfg.method == "rk4":
        state = _run_rk4(state0, fieldfn, cfg, trace, energy_fn)
    else:
        state = _run_dopri5(state0, fieldfn, cfg, trace, energy_fn)
    return state, trace


def _run_euler(state, fieldfn, cfg, trace, energy_fn):
    h = cfg.step_size
    for i in range(cfg.num_steps):
        state = _axpy(state, fieldfn(state), h)
        _check_finite(state, (i + 1) * h)
        if trace is not None:
            trace.append((i + 1) * h, state, energy_fn)
    return state


def _run_rk4(state, fieldfn, cfg, trace, energy_fn):
    h = cfg.step_size
    for i in range(cfg.num_steps):
        k1 = fieldfn(state)
        k2 = fieldfn(_axpy(state, k1, h / 2.0))
        k3 = fieldfn(_axpy(state, k2, h / 2.0))
        k4 = fieldfn(_axpy(state, k3, h))
        state = _combine(state, [k1, k2, k3, k4], [1 / 6, 2 / 6, 2 / 6, 1 / 6], h)
        _check_finite(state, (i + 1) * h)
        if trace is not None:
            trace.append((i + 1) * h, state, energy_fn)
    return state


# Dormand-Prince 5(4) tableau.  The last stage row equals the fifth-order
# weights (FSAL), so the final stage of an accepted step seeds the next one.
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_DP_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_DP_ERR = tuple(b5 - b4 for b5, b4 in zip(_DP_B5, _DP_B4))


def _error_norm(err_q, err_p, s0: PhaseState, s1: PhaseState, rtol, atol) -> float:
    sc_q = atol + rtol * np.maximum(np.abs(s0.q.value), np.abs(s1.q.value))
    sc_p = atol + rtol * np.maximum(np.abs(s0.p.value), np.abs(s1.p.value))
    total = np.sum((err_q / sc_q) ** 2) + np.sum((err_p / sc_p) ** 2)
    return math.sqrt(total / (err_q.size + err_p.size))


def _run_dopri5(state, fieldfn, cfg, trace, energy_fn):
    t = 0.0
    T = cfg.time
    h = min(T, 0.1)
    k1 = fieldfn(state)
    attempts = 0
    while T - t > 1e-13 * max(1.0, T):
        if attempts >= cfg.max_steps:
            raise IntegrationError(
                f"dopri5: exceeded max_steps={cfg.max_steps} at t={t:.6g} of {T:.6g}"
            )
        attempts += 1
        last = h >= T - t
        h = min(h, T - t)

        ks = [k1]
        for row in _DP_A[1:]:
            stage = _combine(state, ks, list(row), h)
            ks.append(fieldfn(stage))
        candidate = _combine(state, ks, list(_DP_B5[:6]), h)
        k_last = fieldfn(candidate)
        ks.append(k_last)

        # Error estimate on raw values only; not recorded on any tape.
        err_q = h * sum(c * k[0].value for c, k in zip(_DP_ERR, ks) if c != 0.0)
        err_p = h * sum(c * k[1].value for c, k in zip(_DP_ERR, ks) if c != 0.0)
        err_norm = _error_norm(err_q, err_p, state, candidate, cfg.rtol, cfg.atol)

        if err_norm <= 1.0:
            t = T if last else t + h
            state = candidate
            k1 = k_last
            _check_finite(state, t)
            if trace is not None:
                trace.append(t, state, energy_fn)
                if trace.accepted_error_norms is None:
                    trace.accepted_error_norms = []
                trace.accepted_error_norms.append(err_norm)
        factor = 5.0 if err_norm == 0.0 else 0.9 * err_norm ** -0.2
        h = h * min(5.0, max(0.2, factor))
    return state


def unroll_equivalence_check(
    state0: PhaseState, fieldfn: FieldFn, num_steps: int, step_size: float = 1.0
) -> bool:
    """True iff Euler integration bit-exactly equals manual layer stacking.

    The manual side applies s <- s + step_size * f(s) ``num_steps`` times
    with the same operation order the solver uses.
    """
    if num_steps < 1:
        raise ValueError(f"num_steps must be positive, got {num_steps}")
    cfg = SolverConfig(method="euler", time=num_steps * step_size, step_size=step_size)
    end, _ = integrate(state0, fieldfn, cfg)

    state = state0
    for _ in range(num_steps):
        dq, dp = fieldfn(state)
        state = PhaseState(
            ad.Tensor(state.q.value + dq.value * step_size),
            ad.Tensor(state.p.value + dp.value * step_size),
        )
    return bool(
        np.array_equal(end.q.value, state.q.value)
        and np.array_equal(end.p.value, state.p.value)
    )


def trajectory_to_csv(trace: Trajectory, path, include_states: bool = False) -> None:
    """Write (t, energy) rows; optionally append flattened q per row."""
    lines = []
    header = ["t", "energy"]
    if include_states and trace.states:
        n, r = trace.states[0].q.shape
        header += [f"q{i}_{j}" for i in range(n) for j in range(r)]
    lines.append(",".join(header))
    for i, t in enumerate(trace.times):
        e = trace.energies[i] if trace.energies is not None else float("nan")
        row = [repr(float(t)), repr(float(e))]
        if include_states:
            row += [repr(float(v)) for v in trace.states[i].q.value.ravel()]
        lines.append(",".join(row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
