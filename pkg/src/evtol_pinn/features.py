"""Input vectors for the data-driven (FNN) and residual (PINN) surrogates."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .ecm import EcmParams, EcmState, simulate
from .errors import FitError, InvalidInputError

FNN_FEATURES = ("dt_s", "current_a", "soc", "temp_c", "cycle")
PINN_FEATURES = FNN_FEATURES + ("ocv_v", "v_rc1", "v_rc2", "v_phy")


class Mode(str, Enum):
    FNN = "FNN"
    PINN = "PINN"

    @property
    def feature_names(self) -> tuple[str, ...]:
        return FNN_FEATURES if self is Mode.FNN else PINN_FEATURES

    @property
    def input_dim(self) -> int:
        return len(self.feature_names)


@dataclass(frozen=True)
class Sample:
    """One measured time step. ``soc`` is None when the source has no SOC column."""

    t_s: float
    dt_s: float
    current_a: float
    voltage_v: float
    temp_c: float
    soc: float | None
    cycle: int
    cell: str = ""

    def __post_init__(self):
        for name in ("t_s", "dt_s", "current_a", "voltage_v", "temp_c"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise InvalidInputError(f"Sample.{name} must be finite, got {v!r}")
        if self.soc is not None and not math.isfinite(self.soc):
            raise InvalidInputError(f"Sample.soc must be finite, got {self.soc!r}")
        if self.dt_s <= 0:
            raise InvalidInputError(f"Sample.dt_s must be > 0, got {self.dt_s}")
        if self.cycle < 1:
            raise InvalidInputError(f"Sample.cycle must be >= 1, got {self.cycle}")


@dataclass(frozen=True)
class FeatureRow:
    mode: Mode
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.values) != self.mode.input_dim:
            raise InvalidInputError(
                f"{self.mode.value} row needs {self.mode.input_dim} values, got {len(self.values)}"
            )


def build_fnn_row(s: Sample) -> FeatureRow:
    if s.soc is None:
        raise InvalidInputError("sample has no SOC; run coulomb counting first")
    return FeatureRow(Mode.FNN, (s.dt_s, s.current_a, s.soc, s.temp_c, float(s.cycle)))


def build_pinn_row(s: Sample, ocv_v: float, state: EcmState, v_phy: float) -> FeatureRow:
    head = build_fnn_row(s).values
    return FeatureRow(Mode.PINN, head + (ocv_v, state.v_rc[0], state.v_rc[1], v_phy))


@dataclass
class FeatureSet:
    """Feature matrix for a run of samples plus everything needed to score it."""

    mode: Mode
    x: np.ndarray
    voltage: np.ndarray
    t_s: np.ndarray
    v_phy: np.ndarray
    soc_clamp_events: int = 0

    def __len__(self) -> int:
        return len(self.voltage)

    @property
    def target(self) -> np.ndarray:
        """Training target: voltage for FNN, residual V - V_phy (volts) for PINN."""
        return self.voltage if self.mode is Mode.FNN else self.voltage - self.v_phy

    def rows(self) -> list[FeatureRow]:
        return [FeatureRow(self.mode, tuple(float(v) for v in r)) for r in self.x]


def _groups(samples: Sequence[Sample]) -> list[tuple[int, int]]:
    """Consecutive runs sharing (cell, cycle)."""
    out = []
    start = 0
    for i in range(1, len(samples) + 1):
        if i == len(samples) or (samples[i].cell, samples[i].cycle) != (samples[start].cell, samples[start].cycle):
            out.append((start, i))
            start = i
    return out


def build_features(
    samples: Sequence[Sample],
    mode: Mode | str,
    params: EcmParams,
    initial_soc: float = 1.0,
) -> FeatureSet:
    """Run the ECM over each (cell, cycle) run and stack the feature rows.

    The ECM restarts from zero polarization at the start of every run. When a
    run carries SOC for every sample it is passed through; otherwise SOC is
    coulomb-counted from ``initial_soc``.
    """
    mode = Mode(mode)
    if not samples:
        raise InvalidInputError("no samples")
    n = len(samples)
    x = np.empty((n, mode.input_dim))
    v_phy = np.empty(n)
    clamps = 0
    for a, b in _groups(samples):
        run = samples[a:b]
        profile = [(s.dt_s, s.current_a) for s in run]
        given = [s.soc for s in run]
        soc = given if all(v is not None for v in given) else None
        traj = simulate(params, EcmState((0.0, 0.0), initial_soc), profile, soc=soc)
        clamps += traj.clamp_events
        x[a:b, 0] = [s.dt_s for s in run]
        x[a:b, 1] = [s.current_a for s in run]
        x[a:b, 2] = traj.soc
        x[a:b, 3] = [s.temp_c for s in run]
        x[a:b, 4] = [float(s.cycle) for s in run]
        if mode is Mode.PINN:
            x[a:b, 5] = traj.ocv
            x[a:b, 6:8] = traj.v_rc
            x[a:b, 8] = traj.v_phy
        v_phy[a:b] = traj.v_phy
    return FeatureSet(
        mode=mode,
        x=x,
        voltage=np.array([s.voltage_v for s in samples], dtype=float),
        t_s=np.array([s.t_s for s in samples], dtype=float),
        v_phy=v_phy,
        soc_clamp_events=clamps,
    )


@dataclass
class Normalizer:
    """Per-column affine scaling fitted on training data.

    For ``scheme="zscore"`` center/scale are mean and population std; for
    ``"minmax"`` they are the column minimum and range.
    """

    center: np.ndarray
    scale: np.ndarray
    target_center: float
    target_scale: float
    scheme: str = "zscore"

    @property
    def mean(self) -> np.ndarray:
        return self.center

    @property
    def std(self) -> np.ndarray:
        return self.scale

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "center": [float(v) for v in self.center],
            "scale": [float(v) for v in self.scale],
            "target_center": float(self.target_center),
            "target_scale": float(self.target_scale),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(
            center=np.asarray(d["center"], dtype=float),
            scale=np.asarray(d["scale"], dtype=float),
            target_center=float(d["target_center"]),
            target_scale=float(d["target_scale"]),
            scheme=d.get("scheme", "zscore"),
        )


def _center_scale(col: np.ndarray, scheme: str) -> tuple[np.ndarray, np.ndarray]:
    if scheme == "zscore":
        return col.mean(axis=0), col.std(axis=0)
    if scheme == "minmax":
        lo = col.min(axis=0)
        return lo, col.max(axis=0) - lo
    raise InvalidInputError(f"unknown normalization scheme {scheme!r}")


def fit_normalizer(
    rows,
    targets,
    scheme: str = "zscore",
    names: Sequence[str] | None = None,
) -> Normalizer:
    """Fit column statistics on training rows and training voltages only.

    Raises:
        FitError: fewer than 2 rows, or a constant column (named in the message).
    """
    if isinstance(rows, (list, tuple)) and rows and isinstance(rows[0], FeatureRow):
        names = names or rows[0].mode.feature_names
        x = np.array([r.values for r in rows], dtype=float)
    else:
        x = np.asarray(rows, dtype=float)
    y = np.asarray(targets, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise FitError(f"need a 2-D array with >= 2 rows, got shape {x.shape}")
    if y.shape != (x.shape[0],):
        raise FitError(f"targets shape {y.shape} does not match {x.shape[0]} rows")
    if names is None:
        names = {5: FNN_FEATURES, 9: PINN_FEATURES}.get(x.shape[1], [f"col{i}" for i in range(x.shape[1])])
    center, scale = _center_scale(x, scheme)
    for i, s in enumerate(scale):
        if not s > 0:
            raise FitError(f"feature column {names[i]!r} is constant on the training data")
    t_center, t_scale = _center_scale(y, scheme)
    if not t_scale > 0:
        raise FitError("target is constant on the training data")
    return Normalizer(center, scale, float(t_center), float(t_scale), scheme)


def normalize_row(norm: Normalizer, x):
    """Map raw features (one row or a matrix) to normalized units."""
    return (np.asarray(x, dtype=float) - norm.center) / norm.scale


def denormalize_row(norm: Normalizer, z):
    return np.asarray(z, dtype=float) * norm.scale + norm.center


def normalize_target(norm: Normalizer, v):
    return (np.asarray(v, dtype=float) - norm.target_center) / norm.target_scale


def denormalize_target(norm: Normalizer, z):
    """Map network output back to volts."""
    return np.asarray(z, dtype=float) * norm.target_scale + norm.target_center
