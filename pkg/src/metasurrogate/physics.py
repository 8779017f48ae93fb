"""Transmission-line reflection oracle for metal-backed metasurface stacks.

Each dielectric layer is a section of lossy line; each patterned sheet is
a series-RLC shunt impedance sitting on that layer's front face. The stack
is terminated by a perfect conductor at the back.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import geometry
from .errors import DataError, NumericError

ETA0 = 376.730313  # ohms
C0 = 299_792_458.0  # m/s

F_START_GHZ = 2.0
F_STOP_GHZ = 18.0
N_FREQ = 201
FREQ_STEP_GHZ = (F_STOP_GHZ - F_START_GHZ) / (N_FREQ - 1)

DB_FLOOR = -40.0
DB_CEIL = 0.0

METALLIC_RS = 0.1  # ohm/sq
RESISTIVE_RS_RANGE = (10.0, 377.0)
THICKNESS_RANGE_MM = (0.1, 5.0)
PERIOD_RANGE_MM = (3.0, 15.0)

# Equivalent-circuit constants of the sheet model.
SHEET_BASE_INDUCTANCE = 5e-9  # henry
SHEET_FR_MIN_HZ = 2e9
SHEET_FR_SPAN_HZ = 16e9


def frequency_grid() -> np.ndarray:
    """The fixed 201-point grid in GHz, 2 to 18 inclusive."""
    return F_START_GHZ + FREQ_STEP_GHZ * np.arange(N_FREQ)


def frequency_grid_hz() -> np.ndarray:
    return frequency_grid() * 1e9


class PatternKind(enum.Enum):
    METALLIC = "metallic"
    RESISTIVE = "resistive"


@dataclass(frozen=True)
class MaterialSpec:
    eps_r: float
    tan_de: float = 0.0
    mu_r: float = 1.0
    tan_dm: float = 0.0
    name: str = ""

    def __post_init__(self):
        checks = (
            ("eps_r", self.eps_r, 1.0, 12.0),
            ("tan_de", self.tan_de, 0.0, 0.1),
            ("mu_r", self.mu_r, 1.0, 4.0),
            ("tan_dm", self.tan_dm, 0.0, 0.1),
        )
        for label, value, lo, hi in checks:
            if not lo <= value <= hi:
                raise DataError(f"{label}={value} outside [{lo}, {hi}]")

    @property
    def eps_c(self) -> complex:
        return self.eps_r * (1.0 - 1j * self.tan_de)

    @property
    def mu_c(self) -> complex:
        return self.mu_r * (1.0 - 1j * self.tan_dm)


@dataclass(frozen=True)
class Layer:
    material: MaterialSpec
    thickness_mm: float


@dataclass(frozen=True)
class StackConfig:
    """Metal-backed stack; ``layers[0]`` sits on the backing conductor."""

    layers: tuple[Layer, ...]
    pattern_kind: PatternKind = PatternKind.METALLIC
    sheet_resistance: float = METALLIC_RS
    period_mm: float = 10.0
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "pattern_kind", PatternKind(self.pattern_kind))
        if self.validate:
            self.check()

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def check(self) -> None:
        if self.n_layers not in (1, 2):
            raise DataError(f"stack must have 1 or 2 layers, got {self.n_layers}")
        lo, hi = THICKNESS_RANGE_MM
        for layer in self.layers:
            if not lo <= layer.thickness_mm <= hi:
                raise DataError(f"thickness {layer.thickness_mm} mm outside [{lo}, {hi}]")
        if self.pattern_kind is PatternKind.METALLIC:
            if self.sheet_resistance != METALLIC_RS:
                raise DataError(f"metallic sheets use Rs = {METALLIC_RS} ohm/sq")
        else:
            rlo, rhi = RESISTIVE_RS_RANGE
            if not rlo <= self.sheet_resistance <= rhi:
                raise DataError(f"Rs={self.sheet_resistance} outside [{rlo}, {rhi}]")
        plo, phi = PERIOD_RANGE_MM
        if not plo <= self.period_mm <= phi:
            raise DataError(f"period {self.period_mm} mm outside [{plo}, {phi}]")

    def to_dict(self) -> dict:
        return {
            "layers": [
                {
                    "eps_r": l.material.eps_r,
                    "tan_de": l.material.tan_de,
                    "mu_r": l.material.mu_r,
                    "tan_dm": l.material.tan_dm,
                    "name": l.material.name,
                    "thickness_mm": l.thickness_mm,
                }
                for l in self.layers
            ],
            "pattern_kind": self.pattern_kind.value,
            "sheet_resistance": self.sheet_resistance,
            "period_mm": self.period_mm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StackConfig":
        try:
            layers = tuple(
                Layer(
                    MaterialSpec(
                        float(l["eps_r"]),
                        float(l.get("tan_de", 0.0)),
                        float(l.get("mu_r", 1.0)),
                        float(l.get("tan_dm", 0.0)),
                        str(l.get("name", "")),
                    ),
                    float(l["thickness_mm"]),
                )
                for l in d["layers"]
            )
            kind = PatternKind(d.get("pattern_kind", "metallic"))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed stack description: {exc}") from exc
        default_rs = METALLIC_RS if kind is PatternKind.METALLIC else None
        rs = d.get("sheet_resistance", default_rs)
        if rs is None:
            raise DataError("resistive stacks need sheet_resistance")
        return cls(layers, kind, float(rs), float(d.get("period_mm", 10.0)))


def sheet_impedance(features, kind, rs, f_hz):
    """Series-RLC sheet impedance of a patterned layer (ohm/sq).

    The resonance sits at ``2 GHz + 16 GHz * sqrt(perimeter) * (1 - fill)``
    and the inductance shrinks as the cell fills up, so the reactance is
    capacitive below resonance and inductive above it. ``kind`` only
    matters through ``rs``; it is accepted to keep call sites explicit.
    """
    fill, _ = features
    PatternKind(kind)
    omega_r = 2.0 * math.pi * resonance_frequency(features)
    inductance = SHEET_BASE_INDUCTANCE * (1.0 - fill + 0.05)
    omega = 2.0 * math.pi * np.asarray(f_hz, dtype=np.float64)
    # wL - 1/(wC) with C = 1/(wr^2 L), factored so it vanishes exactly at wr
    reactance = inductance * (omega * omega - omega_r * omega_r) / omega
    return rs + 1j * reactance


def resonance_frequency(features) -> float:
    fill, perimeter = features
    return SHEET_FR_MIN_HZ + SHEET_FR_SPAN_HZ * math.sqrt(perimeter) * (1.0 - fill)


def input_impedance(stack: StackConfig, sheets: Sequence, f_hz) -> np.ndarray:
    """Input impedance seen at the front face of the stack.

    ``sheets`` holds one shunt impedance per layer (scalar or array over
    ``f_hz``); ``None`` means the layer carries no sheet.
    """
    f = np.asarray(f_hz, dtype=np.float64)
    if len(sheets) != stack.n_layers:
        raise DataError("need exactly one sheet entry per layer")
    k0 = 2.0 * np.pi * f / C0
    z = np.zeros(np.broadcast(f).shape, dtype=np.complex128)
    with np.errstate(all="ignore"):
        for layer, z_sheet in zip(stack.layers, sheets):
            eps, mu = layer.material.eps_c, layer.material.mu_c
            eta = ETA0 * np.sqrt(mu / eps)
            gamma = 1j * k0 * np.sqrt(mu * eps)
            t = np.tanh(gamma * layer.thickness_mm * 1e-3)
            z = eta * (z + eta * t) / (eta + z * t)
            if z_sheet is not None:
                z = z * z_sheet / (z + z_sheet)
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite input impedance")
    return z


def reflection_coefficient(z_in) -> np.ndarray:
    z_in = np.asarray(z_in)
    return (z_in - ETA0) / (z_in + ETA0)


def gamma_to_db(gamma) -> np.ndarray:
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(np.abs(gamma))
    return np.clip(db, DB_FLOOR, DB_CEIL)


def stack_sheets(stack: StackConfig, grid: np.ndarray, f_hz) -> list:
    """Sheet impedance of the rendered pattern, repeated on every layer."""
    features = geometry.pattern_features(grid)
    z = sheet_impedance(features, stack.pattern_kind, stack.sheet_resistance, f_hz)
    return [z] * stack.n_layers


def reflection_gamma(stack: StackConfig, grid=None, sheets=None) -> np.ndarray:
    """Complex reflection coefficient on the grid, before clipping.

    Pass either a raster ``grid`` (normal path) or explicit per-layer
    ``sheets``; the latter lets callers model bare slabs or ideal
    resistive screens.
    """
    f = frequency_grid_hz()
    if sheets is None:
        if grid is None:
            raise DataError("need a pattern grid or explicit sheets")
        sheets = stack_sheets(stack, grid, f)
    gamma = reflection_coefficient(input_impedance(stack, sheets, f))
    if np.any(np.abs(gamma) > 1.0 + 1e-9):
        raise NumericError("reflection exceeds unity; stack is not passive")
    return gamma


def reflection_spectrum(stack: StackConfig, grid=None, sheets=None) -> np.ndarray:
    """S11 in dB on the 201-point grid, clipped to [-40, 0]."""
    return gamma_to_db(reflection_gamma(stack, grid, sheets))


def absorption(s11_db) -> np.ndarray:
    """Absorbed power fraction for a metal-backed structure (no transmission)."""
    return 1.0 - 10.0 ** (np.asarray(s11_db, dtype=np.float64) / 10.0)


def band_below_threshold(s11_db, threshold_db: float = -10.0, freqs_ghz=None):
    """Maximal runs of grid points strictly below ``threshold_db``.

    Returns a list of ``(f_start, f_end)`` pairs in GHz; both ends are
    grid frequencies belonging to the run.
    """
    if not DB_FLOOR <= threshold_db <= DB_CEIL:
        raise DataError(f"threshold {threshold_db} dB outside [{DB_FLOOR}, {DB_CEIL}]")
    s = np.asarray(s11_db)
    freqs = frequency_grid() if freqs_ghz is None else np.asarray(freqs_ghz)
    below = np.concatenate(([False], s < threshold_db, [False]))
    edges = np.flatnonzero(np.diff(below.astype(np.int8)))
    starts, stops = edges[::2], edges[1::2] - 1
    return [(float(freqs[a]), float(freqs[b])) for a, b in zip(starts, stops)]


def bands_match(bands_a, bands_b, tol_ghz: float = 3 * FREQ_STEP_GHZ) -> bool:
    """Same number of intervals and every edge within ``tol_ghz``.

    Two empty band lists match.
    """
    if len(bands_a) != len(bands_b):
        return False
    slack = tol_ghz + 1e-9
    return all(
        abs(a0 - b0) <= slack and abs(a1 - b1) <= slack
        for (a0, a1), (b0, b1) in zip(bands_a, bands_b)
    )
