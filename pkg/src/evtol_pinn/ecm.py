"""Second-order RC equivalent-circuit model.

Positive current is discharge. Each RC branch is advanced with the exact
zero-order-hold exponential update, so splitting a constant-current step into
substeps gives the same polarization voltage up to roundoff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.optimize import least_squares

from .errors import ConfigError, FitError, InvalidInputError

# Resistance floor applied to fitted branches that collapse to zero.
R_FLOOR = 1e-9


@dataclass(frozen=True)
class OcvCurve:
    """Piecewise-linear open-circuit voltage table over SOC in [0, 1]."""

    soc: tuple[float, ...]
    ocv: tuple[float, ...]

    def __post_init__(self):
        soc = np.asarray(self.soc, dtype=float)
        ocv = np.asarray(self.ocv, dtype=float)
        if soc.ndim != 1 or soc.shape != ocv.shape:
            raise ConfigError("ocv_knots: soc and ocv columns must be 1-D and equally long")
        if soc.size < 2:
            raise ConfigError("ocv_knots: at least 2 knots required")
        if not (np.all(np.isfinite(soc)) and np.all(np.isfinite(ocv))):
            raise ConfigError("ocv_knots: non-finite knot")
        if soc[0] != 0.0 or soc[-1] != 1.0:
            raise ConfigError("ocv_knots: soc knots must start at 0 and end at 1")
        if np.any(np.diff(soc) <= 0):
            raise ConfigError("ocv_knots: soc knots must be strictly increasing")
        if np.any(np.diff(ocv) <= 0):
            raise ConfigError("ocv_knots: ocv must be strictly increasing with soc")

    @classmethod
    def from_knots(cls, knots: Sequence[Sequence[float]]) -> "OcvCurve":
        try:
            pairs = [(float(s), float(v)) for s, v in knots]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"ocv_knots: expected [[soc, v], ...], got {knots!r}") from exc
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    @property
    def knots(self) -> list[list[float]]:
        return [[s, v] for s, v in zip(self.soc, self.ocv)]


@dataclass(frozen=True)
class RcBranch:
    r: float
    tau: float


@dataclass(frozen=True)
class EcmParams:
    """2RC parameters: series resistance, two RC branches, capacity, OCV table."""

    r0: float
    branches: tuple[RcBranch, RcBranch]
    capacity_ah: float
    ocv: OcvCurve

    def __post_init__(self):
        if len(self.branches) != 2:
            raise ConfigError(f"ecm.branches: exactly 2 RC branches required, got {len(self.branches)}")
        values = {"ecm.r0": self.r0, "ecm.capacity_ah": self.capacity_ah}
        for j, b in enumerate(self.branches, start=1):
            values[f"ecm.branches[{j}].r"] = b.r
            values[f"ecm.branches[{j}].tau"] = b.tau
        for name, v in values.items():
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be finite and > 0, got {v!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "EcmParams":
        allowed = {"r0", "branches", "capacity_ah", "ocv_knots"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"ecm: unknown keys {sorted(unknown)}")
        missing = allowed - set(d)
        if missing:
            raise ConfigError(f"ecm: missing keys {sorted(missing)}")
        branches = []
        for b in d["branches"]:
            if not isinstance(b, dict) or set(b) != {"r", "tau"}:
                raise ConfigError(f"ecm.branches entries must be {{r, tau}} tables, got {b!r}")
            branches.append(RcBranch(float(b["r"]), float(b["tau"])))
        return cls(
            r0=float(d["r0"]),
            branches=tuple(branches),
            capacity_ah=float(d["capacity_ah"]),
            ocv=OcvCurve.from_knots(d["ocv_knots"]),
        )

    def to_dict(self) -> dict:
        return {
            "r0": self.r0,
            "branches": [{"r": b.r, "tau": b.tau} for b in self.branches],
            "capacity_ah": self.capacity_ah,
            "ocv_knots": self.ocv.knots,
        }


@dataclass(frozen=True)
class EcmState:
    v_rc: tuple[float, float] = (0.0, 0.0)
    soc: float = 1.0


def _require_finite(**values: float) -> None:
    for name, v in values.items():
        if not math.isfinite(v):
            raise InvalidInputError(f"{name} must be finite, got {v!r}")


def step_rc(prev: float, current_a: float, dt_s: float, r_j: float, tau_j: float) -> float:
    """Advance one RC branch polarization voltage by ``dt_s`` at constant current."""
    _require_finite(prev=prev, current_a=current_a, dt_s=dt_s, r_j=r_j, tau_j=tau_j)
    if dt_s <= 0:
        raise InvalidInputError(f"dt_s must be > 0, got {dt_s}")
    if tau_j <= 0:
        raise InvalidInputError(f"tau_j must be > 0, got {tau_j}")
    x = dt_s / tau_j
    # expm1 keeps 1 - e^-x accurate when dt << tau
    return math.exp(-x) * prev - r_j * math.expm1(-x) * current_a


def terminal_voltage(ocv_v: float, current_a: float, r0: float, v_rc1: float, v_rc2: float) -> float:
    _require_finite(ocv_v=ocv_v, current_a=current_a, r0=r0, v_rc1=v_rc1, v_rc2=v_rc2)
    return ocv_v - current_a * r0 - v_rc1 - v_rc2


def _coulomb_step(soc: float, current_a: float, dt_s: float, capacity_ah: float) -> tuple[float, bool]:
    raw = soc - current_a * dt_s / (3600.0 * capacity_ah)
    clamped = min(max(raw, 0.0), 1.0)
    return clamped, clamped != raw


def update_soc(soc: float, current_a: float, dt_s: float, capacity_ah: float) -> float:
    """Coulomb-count SOC over one step, clamped to [0, 1]."""
    _require_finite(soc=soc, current_a=current_a, dt_s=dt_s, capacity_ah=capacity_ah)
    if capacity_ah <= 0:
        raise InvalidInputError(f"capacity_ah must be > 0, got {capacity_ah}")
    if dt_s < 0:
        raise InvalidInputError(f"dt_s must be >= 0, got {dt_s}")
    return _coulomb_step(soc, current_a, dt_s, capacity_ah)[0]


def ocv_lookup(curve: OcvCurve, soc):
    """Linear interpolation in the OCV table; SOC outside [0, 1] takes the end value."""
    out = np.interp(soc, curve.soc, curve.ocv)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class Trajectory:
    """Per-step output of :func:`simulate`.

    ``v_rc[i]``, ``soc[i]``, ``ocv[i]`` and ``v_phy[i]`` are the values at the
    end of step ``i``.
    """

    v_rc: np.ndarray
    soc: np.ndarray
    ocv: np.ndarray
    v_phy: np.ndarray
    clamp_events: int = 0

    def __len__(self) -> int:
        return len(self.v_phy)

    def __iter__(self) -> Iterator[tuple[EcmState, float]]:
        for i in range(len(self)):
            yield self.state(i), float(self.v_phy[i])

    def state(self, i: int) -> EcmState:
        return EcmState((float(self.v_rc[i, 0]), float(self.v_rc[i, 1])), float(self.soc[i]))


def simulate(
    params: EcmParams,
    init: EcmState,
    profile: Sequence[tuple[float, float]],
    soc: Sequence[float] | None = None,
) -> Trajectory:
    """Run the 2RC model over a ``(dt_s, current_a)`` profile.

    If ``soc`` is given it is used as the per-step SOC instead of coulomb
    counting (dataset pass-through).
    """
    n = len(profile)
    if n == 0:
        raise InvalidInputError("profile must be non-empty")
    if soc is not None and len(soc) != n:
        raise InvalidInputError(f"soc override has {len(soc)} entries, profile has {n}")
    (b1, b2) = params.branches
    r0, cap = params.r0, params.capacity_ah
    v_rc = np.empty((n, 2))
    socs = np.empty(n)
    v1, v2 = init.v_rc
    s = init.soc
    clamps = 0
    for i, (dt, cur) in enumerate(profile):
        dt = float(dt)
        cur = float(cur)
        try:
            v1 = step_rc(v1, cur, dt, b1.r, b1.tau)
            v2 = step_rc(v2, cur, dt, b2.r, b2.tau)
        except InvalidInputError as exc:
            raise InvalidInputError(f"step {i}: {exc}") from exc
        if soc is None:
            s, clamped = _coulomb_step(s, cur, dt, cap)
            clamps += clamped
        else:
            s = float(soc[i])
            if not math.isfinite(s):
                raise InvalidInputError(f"step {i}: soc must be finite, got {s!r}")
        v_rc[i] = (v1, v2)
        socs[i] = s
    ocv = np.interp(socs, params.ocv.soc, params.ocv.ocv)
    currents = np.fromiter((float(c) for _, c in profile), dtype=float, count=n)
    v_phy = ocv - currents * r0 - v_rc[:, 0] - v_rc[:, 1]
    return Trajectory(v_rc=v_rc, soc=socs, ocv=ocv, v_phy=v_phy, clamp_events=clamps)


# --------------------------------------------------------------------------
# Parameter identification


@dataclass
class PulseTrace:
    """Current step used to read the ohmic resistance from the instantaneous drop."""

    current_a: np.ndarray
    voltage_v: np.ndarray


@dataclass
class RelaxationTrace:
    """Voltage recovery after a constant-current pulse is cut.

    ``t_s`` is measured from the moment current drops to zero. If
    ``pulse_duration_s`` is None the branches are assumed to have reached
    steady state (V_RCj = R_j * I) before the cut.
    """

    t_s: np.ndarray
    voltage_v: np.ndarray
    current_a: float
    pulse_duration_s: float | None = None


@dataclass
class EcmFit:
    params: EcmParams
    residual_norm: float
    r0_estimates: list[float] = field(default_factory=list)
    n_starts: int = 0


def _onset_r0(trace: PulseTrace, idx: int) -> float:
    cur = np.asarray(trace.current_a, dtype=float)
    volt = np.asarray(trace.voltage_v, dtype=float)
    if cur.shape != volt.shape or cur.size < 2:
        raise FitError(f"pulse segment {idx}: need >= 2 aligned current/voltage points")
    di = np.diff(cur)
    k = int(np.argmax(np.abs(di)))
    if abs(di[k]) < 1e-9:
        raise FitError(f"pulse segment {idx}: no current step found")
    dv = volt[k + 1] - volt[k]
    r0 = -dv / di[k]
    if not r0 > 0:
        raise FitError(f"pulse segment {idx}: voltage moved the wrong way at onset (dV={dv:.6g}, dI={di[k]:.6g})")
    return float(r0)


def _relaxation_arrays(seg: RelaxationTrace, idx: int):
    t = np.asarray(seg.t_s, dtype=float)
    v = np.asarray(seg.voltage_v, dtype=float)
    if t.shape != v.shape or t.size < 6:
        raise FitError(f"relaxation segment {idx}: need >= 6 aligned points, got {t.size}")
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
        raise FitError(f"relaxation segment {idx}: non-finite samples")
    if np.ptp(v) == 0:
        raise FitError(f"relaxation segment {idx}: voltage is constant, nothing to fit")
    if seg.current_a == 0:
        raise FitError(f"relaxation segment {idx}: pre-cut current is zero")
    return t, v


def fit_params(
    rest_segments: Sequence[RelaxationTrace],
    pulse_segments: Sequence[PulseTrace],
    capacity_ah: float,
    ocv: OcvCurve,
) -> EcmFit:
    """Identify R0 from pulse onsets and (R_j, tau_j) from relaxation curves.

    All relaxation segments are fitted jointly (shared R_j, tau_j, one
    asymptotic voltage per segment) by bounded least squares, restarted from
    a log-spaced grid of time-constant guesses.
    """
    if not pulse_segments:
        raise FitError("at least one pulse segment is required for R0")
    if not rest_segments:
        raise FitError("at least one relaxation segment is required for the RC branches")

    r0_est = [_onset_r0(p, i) for i, p in enumerate(pulse_segments)]
    segs = [_relaxation_arrays(s, i) for i, s in enumerate(rest_segments)]
    currents = [float(s.current_a) for s in rest_segments]
    durations = [s.pulse_duration_s for s in rest_segments]
    k = len(segs)

    def amplitude(r, tau, j):
        factor = 1.0 if durations[j] is None else -math.expm1(-durations[j] / tau)
        return r * currents[j] * factor

    def residuals(p):
        tau1, tau2 = math.exp(p[0]), math.exp(p[1])
        r1, r2 = p[2], p[3]
        out = []
        for j, (t, v) in enumerate(segs):
            model = (
                p[4 + j]
                - amplitude(r1, tau1, j) * np.exp(-t / tau1)
                - amplitude(r2, tau2, j) * np.exp(-t / tau2)
            )
            out.append(model - v)
        return np.concatenate(out)

    t_all = np.concatenate([t for t, _ in segs])
    positive = t_all[t_all > 0]
    t_min = float(positive.min()) if positive.size else 1.0
    t_max = float(t_all.max())
    guesses = np.geomspace(max(t_min, 1e-3), max(t_max, 2 * t_min), 6)

    v_inf0 = [float(v[-1]) for _, v in segs]
    swing = max(abs(v[-1] - v[0]) for _, v in segs)
    i_ref = max(abs(c) for c in currents)
    r_guess = max(swing / i_ref / 2.0, 1e-6)

    log_lo, log_hi = math.log(t_min * 1e-3), math.log(max(t_max, t_min) * 1e3)
    lower = [log_lo, log_lo, 0.0, 0.0] + [-np.inf] * k
    upper = [log_hi, log_hi, np.inf, np.inf] + [np.inf] * k
    best = None
    n_starts = 0
    for a in range(len(guesses)):
        for b in range(a + 1, len(guesses)):
            x0 = [math.log(guesses[a]), math.log(guesses[b]), r_guess, r_guess] + v_inf0
            n_starts += 1
            try:
                res = least_squares(
                    residuals, x0, bounds=(lower, upper), method="trf",
                    x_scale="jac", ftol=1e-15, xtol=1e-15, gtol=1e-15, max_nfev=5000,
                )
            except (ValueError, FloatingPointError):
                continue
            if not np.all(np.isfinite(res.x)):
                continue
            if best is None or res.cost < best.cost:
                best = res
    if best is None:
        raise FitError("relaxation fit failed from every starting point")

    tau1, tau2 = math.exp(best.x[0]), math.exp(best.x[1])
    branches = sorted(
        [RcBranch(max(float(best.x[2]), R_FLOOR), tau1), RcBranch(max(float(best.x[3]), R_FLOOR), tau2)],
        key=lambda b: b.tau,
    )
    params = EcmParams(
        r0=float(np.mean(r0_est)),
        branches=(branches[0], branches[1]),
        capacity_ah=capacity_ah,
        ocv=ocv,
    )
    return EcmFit(
        params=params,
        residual_norm=float(np.linalg.norm(best.fun)),
        r0_estimates=r0_est,
        n_starts=n_starts,
    )
