"""
Synchronization models that predict the soloist's next onset and beat period.

Each variant is a pure update `(state, observation) -> (o_hat_next, b_next)`:

    R      reactive: the last observed beat period
    MA     moving average of beat periods
    L      linear error correction on the asynchrony
    LTE    linear correction around the tempo of reference performances
    JADAM  joint adaptation and anticipation
    KT     Kalman filter with the beat period as latent variable

`step` applies an update and returns the next state; `TempoModel` holds a state for the pipeline.
"""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

from .models import ReferencePerformance, TempoCurve, clamp_beat_period

logger = logging.getLogger(__name__)


class TempoVariant(str, Enum):
    R = "r"
    MA = "ma"
    L = "l"
    LTE = "lte"
    JADAM = "jadam"
    KT = "kt"

    @classmethod
    def parse(cls, value: str) -> "TempoVariant":
        try:
            return cls(value.lower())
        except ValueError:
            valid = ", ".join(v.value for v in cls)
            raise ValueError(f"unknown tempo variant {value!r}, valid variants: {valid}")


DEFAULT_PARAMS: Dict[TempoVariant, Dict[str, float]] = {
    TempoVariant.R: {},
    TempoVariant.MA: {"eta": 0.5},
    TempoVariant.L: {"eta_o": 0.5, "eta_b": 0.2},
    TempoVariant.LTE: {"eta_o": 0.5, "eta_b": 0.2},
    TempoVariant.JADAM: {"eta_o": 0.5, "eta_b": 0.5, "eta_a": 0.5},
    TempoVariant.KT: {"alpha": 1.0, "gamma": 1.0, "beta": 1e-4, "lam": 1e-2},
}


def resolve_params(variant: TempoVariant, params: Optional[Mapping[str, float]] = None) -> Dict[str, float]:
    """Defaults of `variant` overridden by `params`; unknown names and out-of-range values raise ValueError."""
    resolved = dict(DEFAULT_PARAMS[variant])
    for name, value in (params or {}).items():
        if name not in resolved:
            raise ValueError(f"{variant.value} has no parameter {name!r}, expected one of {sorted(resolved)}")
        resolved[name] = float(value)
    for name, value in resolved.items():
        if name.startswith("eta") and not 0.0 <= value <= 1.0:
            raise ValueError(f"{variant.value}.{name} must be within [0, 1], got {value}")
    if variant == TempoVariant.KT:
        if resolved["lam"] <= 0 or resolved["beta"] < 0 or resolved["alpha"] <= 0 or resolved["gamma"] <= 0:
            raise ValueError(f"invalid kalman parameters {resolved}")
    return resolved


@dataclass(frozen=True)
class TempoObservation:
    """
    One aligned soloist onset. `delta_perf_n` spans the previous aligned onset to this one and
    `delta_score_prev` is the score IOI over that same span; `delta_score_n` looks ahead to the next onset.
    """

    o_n: float
    delta_score_n: float
    delta_perf_n: Optional[float] = None
    delta_score_prev: Optional[float] = None
    score_onset_next: Optional[float] = None

    def __post_init__(self):
        if self.delta_score_n <= 0:
            raise ValueError(f"delta_score_n must be positive, got {self.delta_score_n}")
        if self.delta_score_prev is not None and self.delta_score_prev <= 0:
            raise ValueError(f"delta_score_prev must be positive, got {self.delta_score_prev}")

    @property
    def span_score(self) -> float:
        return self.delta_score_prev if self.delta_score_prev is not None else self.delta_score_n

    @property
    def tau_n(self) -> Optional[float]:
        if self.delta_perf_n is None:
            return None
        return self.delta_perf_n / self.span_score


@dataclass(frozen=True)
class TempoModelState:
    variant: TempoVariant
    b: float
    tau_0: float
    params: Mapping[str, float] = field(default_factory=dict)
    o_hat: Optional[float] = None
    prev_tau: Optional[float] = None
    v_hat: float = 1.0
    phi: Optional[Callable[[float], float]] = None

    def asynchrony(self, obs: TempoObservation) -> float:
        """A_n; the first observation is taken as ground truth."""
        if self.o_hat is None:
            return 0.0
        return self.o_hat - obs.o_n

    def predicted(self, obs: TempoObservation) -> float:
        return obs.o_n if self.o_hat is None else self.o_hat


def init_tempo_state(
    variant: TempoVariant,
    tau_0: float,
    params: Optional[Mapping[str, float]] = None,
    phi: Optional[Callable[[float], float]] = None,
    first_score_onset: Optional[float] = None,
    v_hat: float = 1.0,
) -> TempoModelState:
    b = tau_0
    if variant == TempoVariant.LTE and phi is not None and first_score_onset is not None:
        b = phi(first_score_onset)
    return TempoModelState(
        variant=variant,
        b=clamp_beat_period(b),
        tau_0=tau_0,
        params=resolve_params(variant, params),
        v_hat=v_hat,
        phi=phi,
    )


def update_reactive(state: TempoModelState, obs: TempoObservation) -> Tuple[float, float]:
    o_hat_next = obs.o_n + state.b * obs.delta_score_n
    tau = obs.tau_n
    return o_hat_next, state.b if tau is None else tau


def update_moving_average(state: TempoModelState, obs: TempoObservation) -> Tuple[float, float]:
    o_hat_next = obs.o_n + state.b * obs.delta_score_n
    tau = obs.tau_n
    if tau is None:
        return o_hat_next, state.b
    eta = state.params["eta"]
    return o_hat_next, eta * state.b + (1.0 - eta) * tau


def update_linear(state: TempoModelState, obs: TempoObservation) -> Tuple[float, float]:
    asynchrony = state.asynchrony(obs)
    o_hat_next = state.predicted(obs) + state.b * obs.delta_score_n - state.params["eta_o"] * asynchrony
    eta_b = state.params["eta_b"]
    if asynchrony < 0:
        b_next = state.b - eta_b * asynchrony
    else:
        b_next = state.b - 2.0 * eta_b * asynchrony
    return o_hat_next, b_next


def update_lte(state: TempoModelState, obs: TempoObservation) -> Tuple[float, float]:
    if state.phi is None:
        return update_linear(state, obs)
    if obs.score_onset_next is None:
        raise ValueError("tempo expectation needs the next score onset")
    asynchrony = state.asynchrony(obs)
    o_hat_next = state.predicted(obs) + state.b * obs.delta_score_n - state.params["eta_o"] * asynchrony
    return o_hat_next, state.phi(obs.score_onset_next) - state.params["eta_b"] * asynchrony


def update_jadam(state: TempoModelState, obs: TempoObservation) -> Tuple[float, float]:
    eta_o, eta_b, eta_a = state.params["eta_o"], state.params["eta_b"], state.params["eta_a"]
    asynchrony = state.asynchrony(obs)

    # adaptation
    o_hat_ad = state.predicted(obs) + state.b * obs.delta_score_n - eta_o * asynchrony
    tau = obs.tau_n
    b_next = state.b if tau is None else state.b - eta_b * asynchrony

    # anticipation
    if tau is None:
        tau = state.b
    tau_prev = state.prev_tau if state.prev_tau is not None else tau
    tau_hat = eta_b * (2.0 * tau - tau_prev) + (1.0 - eta_b) * tau
    o_hat_an = obs.o_n + tau_hat * obs.delta_score_n

    # joint
    joint_asynchrony = o_hat_ad - o_hat_an
    return o_hat_an - eta_a * joint_asynchrony, b_next


def _kalman_update(state: TempoModelState, obs: TempoObservation) -> Tuple[float, float, float]:
    """Returns (o_hat_next, b_next, v_hat_next)."""
    if obs.delta_perf_n is None:
        return state.predicted(obs) + state.b * obs.delta_score_n, state.b, state.v_hat
    p = state.params
    span = obs.span_score
    b_pred = p["alpha"] * state.b
    variance = p["gamma"] ** 2 * state.v_hat + p["beta"]
    innovation = obs.delta_perf_n - b_pred * span
    gain = variance * span / (variance * span ** 2 + p["lam"])
    b_next = b_pred + gain * innovation
    v_hat_next = (1.0 - gain * span) * variance
    return state.predicted(obs) + b_next * obs.delta_score_n, b_next, v_hat_next


def update_kalman(state: TempoModelState, obs: TempoObservation) -> Tuple[float, float]:
    o_hat_next, b_next, _ = _kalman_update(state, obs)
    return o_hat_next, b_next


UPDATES = {
    TempoVariant.R: update_reactive,
    TempoVariant.MA: update_moving_average,
    TempoVariant.L: update_linear,
    TempoVariant.LTE: update_lte,
    TempoVariant.JADAM: update_jadam,
    TempoVariant.KT: update_kalman,
}


def step(state: TempoModelState, obs: TempoObservation) -> TempoModelState:
    """Apply the variant's update; the beat period saturates at the clamp range."""
    v_hat = state.v_hat
    if state.variant == TempoVariant.KT:
        o_hat_next, b_next, v_hat = _kalman_update(state, obs)
    else:
        o_hat_next, b_next = UPDATES[state.variant](state, obs)

    clamped = clamp_beat_period(b_next)
    if clamped != b_next:
        logger.warning(f"{state.variant.value}: beat period {b_next:.4f} clamped to {clamped:.4f}")
    tau = obs.tau_n
    return replace(
        state,
        b=clamped,
        o_hat=o_hat_next,
        prev_tau=tau if tau is not None else state.prev_tau,
        v_hat=v_hat,
    )


class TempoModel:
    """Mutable holder around a TempoModelState, owned by one pipeline stage."""

    def __init__(self, state: TempoModelState):
        self.state = state

    @classmethod
    def create(cls, variant, tau_0: float, params=None, phi=None, first_score_onset=None) -> "TempoModel":
        if not isinstance(variant, TempoVariant):
            variant = TempoVariant.parse(variant)
        return cls(init_tempo_state(variant, tau_0, params, phi, first_score_onset))

    @property
    def beat_period(self) -> float:
        return self.state.b

    @property
    def predicted_onset(self) -> Optional[float]:
        return self.state.o_hat

    def observe(self, obs: TempoObservation) -> Tuple[float, float]:
        self.state = step(self.state, obs)
        logger.debug(f"{self.state.variant.value}: o={obs.o_n:.4f} next={self.state.o_hat:.4f} b={self.state.b:.4f}")
        return self.state.o_hat, self.state.b


def reference_tempo(references: Sequence[ReferencePerformance], interpolation: str = "step", blend: str = "mean") -> Optional[Callable[[float], float]]:
    """φ: expected beat period at a score position, from reference performances (None without any)."""
    if not references:
        return None
    usable = [ref for ref in references if len(ref.alignment) >= 2]
    if len(usable) < len(references):
        logger.warning(f"{len(references) - len(usable)} of {len(references)} references have fewer than two aligned onsets and no tempo curve")
    if not usable:
        logger.warning("no reference tempo curve; the tempo expectation falls back to linear correction")
        return None
    curves = [ref.tempo_curve(interpolation) for ref in usable]
    if blend == "first":
        return curves[0]
    return TempoCurve.mean_of(curves)
