"""Parametric meta-atom catalog and anti-aliased unit-cell rasterizer.

Every pattern lives in a unit cell spanning ``[-0.5, 0.5]`` in both
directions. Shape parameters are normalized to ``[0, 1]``; the first
parameter of every class is its overall size, so a size of zero always
renders an empty cell.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError

SUPERSAMPLE = 4
MIN_RESOLUTION = 16
DEFAULT_RESOLUTION = 64
MIN_FILL = 0.02
MAX_FILL = 0.98
MAX_SAMPLE_ATTEMPTS = 100


class PatternClass(enum.Enum):
    SQUARE_PATCH = "square_patch"
    CIRCULAR_PATCH = "circular_patch"
    SQUARE_LOOP = "square_loop"
    CIRCULAR_LOOP = "circular_loop"
    DOUBLE_SQUARE_LOOP = "double_square_loop"
    DOUBLE_CIRCULAR_LOOP = "double_circular_loop"
    CROSS_DIPOLE = "cross_dipole"
    JERUSALEM_CROSS = "jerusalem_cross"
    SPLIT_SQUARE_RING = "split_square_ring"
    SPLIT_CIRCULAR_RING = "split_circular_ring"
    HEXAGONAL_PATCH = "hexagonal_patch"
    HEXAGONAL_LOOP = "hexagonal_loop"
    GAMMADION_CROSS = "gammadion_cross"
    TRIPOLE = "tripole"
    GRIDDED_SQUARE_PATCH = "gridded_square_patch"
    FOUR_LEGGED_LOADED_LOOP = "four_legged_loaded_loop"

    @property
    def arity(self) -> int:
        return len(_PARAM_NAMES[self])

    @property
    def param_names(self) -> tuple[str, ...]:
        return _PARAM_NAMES[self]


CLASSES: tuple[PatternClass, ...] = tuple(PatternClass)

# Meaning of each normalized parameter, in order. "size" scales the whole
# element relative to the cell; the rest are fractions of a derived length.
_PARAM_NAMES: dict[PatternClass, tuple[str, ...]] = {
    PatternClass.SQUARE_PATCH: ("side", "corner_round"),
    PatternClass.CIRCULAR_PATCH: ("diameter", "center_hole"),
    PatternClass.SQUARE_LOOP: ("outer_side", "strip_width"),
    PatternClass.CIRCULAR_LOOP: ("outer_diameter", "strip_width"),
    PatternClass.DOUBLE_SQUARE_LOOP: ("outer_side", "strip_width", "ring_gap"),
    PatternClass.DOUBLE_CIRCULAR_LOOP: ("outer_diameter", "strip_width", "ring_gap"),
    PatternClass.CROSS_DIPOLE: ("length", "arm_width"),
    PatternClass.JERUSALEM_CROSS: ("length", "arm_width", "cap_length", "cap_width"),
    PatternClass.SPLIT_SQUARE_RING: ("outer_side", "strip_width", "split_gap"),
    PatternClass.SPLIT_CIRCULAR_RING: ("outer_diameter", "strip_width", "split_gap"),
    PatternClass.HEXAGONAL_PATCH: ("diameter", "rotation"),
    PatternClass.HEXAGONAL_LOOP: ("diameter", "strip_width"),
    PatternClass.GAMMADION_CROSS: ("length", "arm_width", "hook_length"),
    PatternClass.TRIPOLE: ("length", "arm_width"),
    PatternClass.GRIDDED_SQUARE_PATCH: ("side", "slot_width", "divisions"),
    PatternClass.FOUR_LEGGED_LOADED_LOOP: ("length", "leg_width", "strip_width"),
}

# Sampling ranges per parameter; chosen so the rendered fill stays well
# inside [MIN_FILL, MAX_FILL] for almost every draw.
_SAMPLE_RANGES: dict[PatternClass, tuple[tuple[float, float], ...]] = {
    PatternClass.SQUARE_PATCH: ((0.3, 0.95), (0.0, 0.6)),
    PatternClass.CIRCULAR_PATCH: ((0.3, 0.98), (0.0, 0.6)),
    PatternClass.SQUARE_LOOP: ((0.5, 0.98), (0.1, 0.5)),
    PatternClass.CIRCULAR_LOOP: ((0.5, 0.98), (0.1, 0.5)),
    PatternClass.DOUBLE_SQUARE_LOOP: ((0.6, 0.98), (0.2, 0.9), (0.1, 0.9)),
    PatternClass.DOUBLE_CIRCULAR_LOOP: ((0.6, 0.98), (0.2, 0.9), (0.1, 0.9)),
    PatternClass.CROSS_DIPOLE: ((0.5, 0.98), (0.1, 0.5)),
    PatternClass.JERUSALEM_CROSS: ((0.6, 0.95), (0.1, 0.4), (0.2, 0.9), (0.1, 0.5)),
    PatternClass.SPLIT_SQUARE_RING: ((0.5, 0.98), (0.1, 0.5), (0.1, 0.8)),
    PatternClass.SPLIT_CIRCULAR_RING: ((0.5, 0.98), (0.1, 0.5), (0.1, 0.8)),
    PatternClass.HEXAGONAL_PATCH: ((0.3, 0.98), (0.0, 1.0)),
    PatternClass.HEXAGONAL_LOOP: ((0.5, 0.98), (0.1, 0.5)),
    PatternClass.GAMMADION_CROSS: ((0.6, 0.95), (0.1, 0.4), (0.2, 0.9)),
    PatternClass.TRIPOLE: ((0.5, 0.98), (0.1, 0.5)),
    PatternClass.GRIDDED_SQUARE_PATCH: ((0.5, 0.95), (0.05, 0.5), (0.0, 1.0)),
    PatternClass.FOUR_LEGGED_LOADED_LOOP: ((0.6, 0.98), (0.3, 0.8), (0.1, 0.5)),
}


@dataclass(frozen=True)
class PatternSpec:
    pattern_class: PatternClass
    params: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if len(self.params) != self.pattern_class.arity:
            raise DataError(
                f"{self.pattern_class.value} takes {self.pattern_class.arity} "
                f"params, got {len(self.params)}"
            )
        for p in self.params:
            if not 0.0 <= p <= 1.0:
                raise DataError(f"pattern parameter {p} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"class": self.pattern_class.value, "params": list(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "PatternSpec":
        return cls(PatternClass(d["class"]), tuple(d["params"]))


def parse_class(name: str | PatternClass) -> PatternClass:
    if isinstance(name, PatternClass):
        return name
    try:
        return PatternClass(name.strip().lower().replace("-", "_").replace(" ", "_"))
    except ValueError:
        choices = ", ".join(c.value for c in CLASSES)
        raise DataError(f"unknown pattern class {name!r}; choose from {choices}") from None


# --- indicator primitives -------------------------------------------------
# All take coordinate arrays and return boolean masks.


def _box(x, y, hx, hy):
    return (np.abs(x) <= hx) & (np.abs(y) <= hy)


def _rounded_square(x, y, half, radius):
    ax, ay = np.abs(x), np.abs(y)
    inside = (ax <= half) & (ay <= half)
    if radius <= 0.0:
        return inside
    dx = ax - (half - radius)
    dy = ay - (half - radius)
    corner = (dx > 0) & (dy > 0)
    return inside & ~(corner & (dx * dx + dy * dy > radius * radius))


def _disc(r2, radius):
    return r2 <= radius * radius


def _hexagon(x, y, circumradius, angle=0.0):
    if angle:
        c, s = math.cos(angle), math.sin(angle)
        x, y = c * x + s * y, -s * x + c * y
    ax, ay = np.abs(x), np.abs(y)
    apothem = circumradius * math.sqrt(3.0) / 2.0
    return (ay <= apothem) & (math.sqrt(3.0) * ax + ay <= math.sqrt(3.0) * circumradius)


def _cross(x, y, half_len, half_width):
    return _box(x, y, half_len, half_width) | _box(x, y, half_width, half_len)


def _rotations(x, y):
    """The four 90-degree rotations of a coordinate frame."""
    return ((x, y), (-y, x), (-x, -y), (y, -x))


def _arm(u, v, length, half_width):
    """Strip from the origin along +u."""
    return (u >= 0) & (u <= length) & (np.abs(v) <= half_width)


# --- per-class shape functions ---------------------------------------------


def _square_patch(x, y, r2, p):
    half = 0.5 * p[0]
    return _rounded_square(x, y, half, p[1] * half)


def _circular_patch(x, y, r2, p):
    radius = 0.5 * p[0]
    hole = 0.4 * p[1] * radius
    return _disc(r2, radius) & ~_disc(r2, hole)


def _square_loop(x, y, r2, p):
    half = 0.5 * p[0]
    inner = half * (1.0 - p[1])
    return _box(x, y, half, half) & ~_box(x, y, inner, inner)


def _circular_loop(x, y, r2, p):
    radius = 0.5 * p[0]
    inner = radius * (1.0 - p[1])
    return _disc(r2, radius) & ~_disc(r2, inner)


def _double_rings(p):
    """Radii (outer, outer - w, inner_outer, inner_inner) for double loops."""
    a = 0.5 * p[0]
    w = 0.25 * p[1] * a
    g = 0.5 * p[2] * (a - 2.0 * w)
    return a, a - w, a - w - g, a - 2.0 * w - g


def _double_square_loop(x, y, r2, p):
    a0, a1, a2, a3 = _double_rings(p)
    return (_box(x, y, a0, a0) & ~_box(x, y, a1, a1)) | (
        _box(x, y, a2, a2) & ~_box(x, y, a3, a3)
    )


def _double_circular_loop(x, y, r2, p):
    a0, a1, a2, a3 = _double_rings(p)
    return (_disc(r2, a0) & ~_disc(r2, a1)) | (_disc(r2, a2) & ~_disc(r2, a3))


def _cross_dipole(x, y, r2, p):
    half_len = 0.5 * p[0]
    return _cross(x, y, half_len, 0.5 * p[1] * half_len)


def _jerusalem_cross(x, y, r2, p):
    half_len = 0.5 * p[0]
    arm = 0.5 * p[1] * half_len
    cap_half = p[2] * half_len
    cap_thick = p[3] * 0.5 * half_len
    mask = _cross(x, y, half_len, arm)
    for u, v in _rotations(x, y):
        mask |= (u <= half_len) & (u >= half_len - cap_thick) & (np.abs(v) <= cap_half)
    return mask


def _split(x, y, p):
    """Gap cut through the +x side of a ring."""
    half_gap = 0.5 * p[2] * 0.5 * p[0]
    return (x > 0) & (np.abs(y) <= half_gap)


def _split_square_ring(x, y, r2, p):
    return _square_loop(x, y, r2, p[:2]) & ~_split(x, y, p)


def _split_circular_ring(x, y, r2, p):
    return _circular_loop(x, y, r2, p[:2]) & ~_split(x, y, p)


def _hexagonal_patch(x, y, r2, p):
    return _hexagon(x, y, 0.5 * p[0], p[1] * math.pi / 6.0)


def _hexagonal_loop(x, y, r2, p):
    outer = 0.5 * p[0]
    return _hexagon(x, y, outer) & ~_hexagon(x, y, outer * (1.0 - p[1]))


def _gammadion_cross(x, y, r2, p):
    half_len = 0.5 * p[0]
    arm = 0.5 * p[1] * half_len
    hook = p[2] * half_len
    mask = np.zeros(np.broadcast(x, y).shape, dtype=bool)
    if half_len <= 0.0:
        return mask
    for u, v in _rotations(x, y):
        mask |= _arm(u, v, half_len, arm)
        mask |= (np.abs(u - (half_len - arm)) <= arm) & (v >= -arm) & (v <= hook)
    return mask


def _tripole(x, y, r2, p):
    length = 0.5 * p[0]
    half_width = 0.5 * p[1] * 0.5 * length
    mask = np.zeros(np.broadcast(x, y).shape, dtype=bool)
    if length <= 0.0:
        return mask
    for k in range(3):
        theta = math.pi / 2.0 + k * 2.0 * math.pi / 3.0
        c, s = math.cos(theta), math.sin(theta)
        mask |= _arm(c * x + s * y, -s * x + c * y, length, half_width)
    return mask


def _gridded_square_patch(x, y, r2, p):
    half = 0.5 * p[0]
    divisions = 2 + int(round(2.0 * p[2]))
    pitch = 2.0 * half / divisions
    slot_half = 0.5 * p[1] * 0.5 * pitch
    mask = _box(x, y, half, half)
    for k in range(1, divisions):
        cut = -half + k * pitch
        mask &= ~(np.abs(x - cut) <= slot_half)
        mask &= ~(np.abs(y - cut) <= slot_half)
    return mask


def _four_legged_loaded_loop(x, y, r2, p):
    half_len = 0.5 * p[0]
    leg = 0.5 * p[1] * half_len
    strip = p[2] * leg
    outer = _cross(x, y, half_len, leg)
    inner = _cross(x, y, half_len - strip, leg - strip)
    return outer & ~inner


_SHAPES = {
    PatternClass.SQUARE_PATCH: _square_patch,
    PatternClass.CIRCULAR_PATCH: _circular_patch,
    PatternClass.SQUARE_LOOP: _square_loop,
    PatternClass.CIRCULAR_LOOP: _circular_loop,
    PatternClass.DOUBLE_SQUARE_LOOP: _double_square_loop,
    PatternClass.DOUBLE_CIRCULAR_LOOP: _double_circular_loop,
    PatternClass.CROSS_DIPOLE: _cross_dipole,
    PatternClass.JERUSALEM_CROSS: _jerusalem_cross,
    PatternClass.SPLIT_SQUARE_RING: _split_square_ring,
    PatternClass.SPLIT_CIRCULAR_RING: _split_circular_ring,
    PatternClass.HEXAGONAL_PATCH: _hexagonal_patch,
    PatternClass.HEXAGONAL_LOOP: _hexagonal_loop,
    PatternClass.GAMMADION_CROSS: _gammadion_cross,
    PatternClass.TRIPOLE: _tripole,
    PatternClass.GRIDDED_SQUARE_PATCH: _gridded_square_patch,
    PatternClass.FOUR_LEGGED_LOADED_LOOP: _four_legged_loaded_loop,
}


def _subpixel_coords(resolution: int):
    n = resolution * SUPERSAMPLE
    # Odd integers are symmetric about zero, so x and -x come out bit-exact
    # negatives of each other and 90-degree rotations map the grid onto itself.
    odd = np.arange(-(n - 1), n, 2, dtype=np.float64)
    axis = odd / (2.0 * n)
    # Row index runs top to bottom, so y decreases with row.
    return np.meshgrid(axis, -axis, indexing="xy")


def render(spec: PatternSpec, resolution: int = DEFAULT_RESOLUTION) -> np.ndarray:
    """Rasterize a pattern into a ``resolution x resolution`` grayscale grid.

    Each pixel is the covered fraction of a 4x4 block of sub-pixel samples,
    so fully covered pixels are exactly 1 and uncovered pixels exactly 0.

    Returns
    -------
    np.ndarray
        float64 array of shape ``(resolution, resolution)`` with values in
        ``[0, 1]``; 1 means pattern material.
    """
    resolution = int(resolution)
    if resolution < MIN_RESOLUTION:
        raise DataError(f"resolution must be >= {MIN_RESOLUTION}, got {resolution}")
    if len(spec.params) != spec.pattern_class.arity:
        raise DataError("parameter arity does not match pattern class")
    x, y = _subpixel_coords(resolution)
    mask = _SHAPES[spec.pattern_class](x, y, x * x + y * y, spec.params)
    counts = mask.reshape(resolution, SUPERSAMPLE, resolution, SUPERSAMPLE).sum(axis=(1, 3))
    return counts / float(SUPERSAMPLE * SUPERSAMPLE)


def fill_factor(grid: np.ndarray) -> float:
    return float(np.mean(grid))


def pattern_features(grid: np.ndarray) -> tuple[float, float]:
    """Fill factor and perimeter density of a rendered unit cell.

    Perimeter density is the fraction of "on" pixels (> 0.5) that touch an
    "off" 4-neighbour. Neighbours wrap around the cell edges because the
    cell tiles periodically, clamped to ``[0.01, 1]``.
    """
    grid = np.asarray(grid)
    on = grid > 0.5
    n_on = int(on.sum())
    off_neighbour = np.zeros_like(on)
    for axis in (0, 1):
        for shift in (1, -1):
            off_neighbour |= ~np.roll(on, shift, axis=axis)
    boundary = int((on & off_neighbour).sum())
    density = boundary / max(1, n_on)
    return float(np.mean(grid)), float(min(1.0, max(0.01, density)))


def sample_pattern(
    pattern_class: PatternClass | str,
    rng: np.random.Generator,
    resolution: int = DEFAULT_RESOLUTION,
) -> PatternSpec:
    """Draw a random, visibly non-degenerate pattern of the given class.

    Parameters are uniform within per-class ranges; draws whose rendered
    fill factor falls outside ``[0.02, 0.98]`` at ``resolution`` are
    redrawn, up to 100 attempts.
    """
    pattern_class = parse_class(pattern_class)
    ranges = _SAMPLE_RANGES[pattern_class]
    lo = np.array([r[0] for r in ranges])
    hi = np.array([r[1] for r in ranges])
    for _ in range(MAX_SAMPLE_ATTEMPTS):
        params = lo + (hi - lo) * rng.random(len(ranges))
        spec = PatternSpec(pattern_class, tuple(params))
        phi = fill_factor(render(spec, resolution))
        if MIN_FILL <= phi <= MAX_FILL:
            return spec
    raise DataError(
        f"could not sample a non-degenerate {pattern_class.value} pattern "
        f"in {MAX_SAMPLE_ATTEMPTS} attempts"
    )


def to_pgm(grid: np.ndarray) -> bytes:
    """Binary PGM (P5, maxval 255, row-major)."""
    grid = np.asarray(grid)
    h, w = grid.shape
    body = np.round(np.clip(grid, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + body.tobytes()
