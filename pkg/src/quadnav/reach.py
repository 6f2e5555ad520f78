"""Level-set reachability for the linearised waypoint dynamics.

The state is a 3D position with kinematics ``x' = u + d`` where the control
``u`` and disturbance ``d`` live in per-axis boxes. The value function is the
signed distance to a spherical target, evolved in time-to-go with a
Lax-Friedrichs scheme and frozen with a running minimum so that its sub-zero
set is the tube of states that can reach the target within the horizon.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .errors import DomainError, InstabilityError
from .fmt import atomic_write_bytes, csv_text, fmt_float
from .noise import ErrorStats, psd_sqrt

ACTION_BOUND = 0.05
TIE_TOLERANCE = 1e-12
FIELD_MAGIC = b"quadnav-value-field 1\n"
AXES = ("x", "y", "z")


@dataclass(frozen=True)
class Grid3:
    lower: tuple = (-1.5, -2.0, -1.0)
    upper: tuple = (2.5, 2.0, 3.0)
    resolution: tuple = (81, 81, 81)

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        res = tuple(int(n) for n in self.resolution)
        if len(lo) != 3 or len(hi) != 3 or len(res) != 3:
            raise DomainError("grid bounds and resolution need three entries")
        if any(h <= l for l, h in zip(lo, hi)):
            raise DomainError(f"upper {hi} must exceed lower {lo} on every axis")
        if any(n < 8 for n in res):
            raise DomainError(f"resolution {res} must be at least 8 nodes per axis")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "resolution", res)

    @property
    def spacing(self) -> np.ndarray:
        return (np.array(self.upper) - np.array(self.lower)) / (np.array(self.resolution) - 1)

    @property
    def shape(self) -> tuple:
        return self.resolution

    @property
    def size(self) -> int:
        return int(np.prod(self.resolution))

    def axis(self, i: int) -> np.ndarray:
        return np.linspace(self.lower[i], self.upper[i], self.resolution[i])

    def mesh(self):
        return np.meshgrid(self.axis(0), self.axis(1), self.axis(2), indexing="ij")

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= np.array(self.lower)) and np.all(p <= np.array(self.upper)))

    def to_json(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper), "resolution": list(self.resolution)}


@dataclass(frozen=True)
class ValueField:
    """Values on a :class:`Grid3`, stored flat in row-major (x, y, z) order."""

    grid: Grid3
    values: np.ndarray
    time_label: float = 0.0

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=float).reshape(-1))
        if v.size != self.grid.size:
            raise DomainError(f"value array has {v.size} entries, grid needs {self.grid.size}")
        if not np.all(np.isfinite(v)):
            raise DomainError("value field contains non-finite entries")
        object.__setattr__(self, "values", v)

    def cube(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)

    def to_bytes(self) -> bytes:
        header = dict(self.grid.to_json(), time=float(self.time_label), dtype="<f8", order="C")
        return FIELD_MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ValueField":
        if not data.startswith(FIELD_MAGIC):
            raise DomainError("not a value-field file")
        rest = data[len(FIELD_MAGIC):]
        line, _, payload = rest.partition(b"\n")
        header = json.loads(line)
        grid = Grid3(header["lower"], header["upper"], header["resolution"])
        values = np.frombuffer(payload, dtype="<f8")
        return cls(grid, values.copy(), header["time"])

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "ValueField":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass(frozen=True)
class DynamicsBounds:
    u_max: float
    d_max: np.ndarray
    reference: tuple = (0.0, 0.0, 1.0)

    def __post_init__(self):
        d = np.asarray(self.d_max, dtype=float).reshape(3)
        if not self.u_max > 0:
            raise DomainError(f"u_max must be positive, got {self.u_max}")
        if np.any(d < 0) or not np.all(np.isfinite(d)):
            raise DomainError(f"d_max must be finite and non-negative, got {d}")
        object.__setattr__(self, "u_max", float(self.u_max))
        object.__setattr__(self, "d_max", d)
        object.__setattr__(self, "reference", tuple(float(x) for x in self.reference))

    def to_json(self) -> dict:
        return {"u_max": self.u_max, "d_max": self.d_max.tolist(), "reference": list(self.reference)}


@dataclass(frozen=True)
class BrtResult:
    tube: ValueField
    tau: float
    target_radius: float
    bounds: DynamicsBounds
    steps: int = 0
    snapshots: List[ValueField] = field(default_factory=list)

    def metadata(self) -> dict:
        return {
            "tau": self.tau,
            "target_radius": self.target_radius,
            "bounds": self.bounds.to_json(),
            "grid": self.tube.grid.to_json(),
            "steps": self.steps,
        }


def signed_distance_sphere(grid: Grid3, center, radius: float) -> ValueField:
    if not radius > 0:
        raise DomainError(f"radius must be positive, got {radius}")
    c = np.asarray(center, dtype=float).reshape(3)
    x, y, z = grid.mesh()
    dist = np.sqrt((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2)
    return ValueField(grid, dist - radius, 0.0)


class GradientPair(NamedTuple):
    """Backward and forward one-sided differences, each shaped (nx, ny, nz, 3)."""

    left: np.ndarray
    right: np.ndarray

    @property
    def central(self) -> np.ndarray:
        return 0.5 * (self.left + self.right)


def _one_sided(cube: np.ndarray, spacing) -> GradientPair:
    left = np.empty(cube.shape + (3,))
    right = np.empty(cube.shape + (3,))
    for i in range(3):
        v = np.moveaxis(cube, i, 0)
        # ghost nodes by linear extrapolation make the edge stencils one-sided
        fwd = np.diff(v, axis=0) / spacing[i]
        lo = np.concatenate([fwd[:1], fwd], axis=0)
        hi = np.concatenate([fwd, fwd[-1:]], axis=0)
        left[..., i] = np.moveaxis(lo, 0, i)
        right[..., i] = np.moveaxis(hi, 0, i)
    return GradientPair(left, right)


def spatial_gradient(field_: ValueField) -> GradientPair:
    if any(n < 3 for n in field_.grid.resolution):
        raise DomainError("gradient needs at least 3 nodes per axis")
    return _one_sided(field_.cube(), field_.grid.spacing)


def hamiltonian(grad, bounds: DynamicsBounds):
    """min over the control box, max over the disturbance box, of grad . (u + d).

    Works on a single 3-vector or on any array whose last axis has length 3.
    """
    g = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(g)):
        raise DomainError("gradient must be finite")
    out = np.sum((bounds.d_max - bounds.u_max) * np.abs(g), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def dissipation_coefficients(bounds: DynamicsBounds, kind: str = "hamiltonian") -> np.ndarray:
    if kind == "hamiltonian":
        return np.abs(bounds.u_max - bounds.d_max)
    if kind == "dynamics":
        return bounds.u_max + bounds.d_max
    raise DomainError(f"dissipation must be 'hamiltonian' or 'dynamics', got {kind!r}")


def _time_steps(tau: float, dt: float, record_times: Sequence[float]):
    """Step lengths that land exactly on every recording time and on ``tau``."""
    stops = sorted({float(t) for t in record_times if 0 < t < tau} | {float(tau)})
    steps, t = [], 0.0
    for stop in stops:
        n = int(np.ceil((stop - t) / dt - 1e-9))
        if n > 0:
            h = (stop - t) / n
            steps.extend((h, stop if k == n - 1 else None) for k in range(n))
        t = stop
    return steps


def integrate_brt(
    initial: ValueField,
    bounds: DynamicsBounds,
    tau: float,
    cfl: float = 0.9,
    target_radius: Optional[float] = None,
    record_times: Sequence[float] = (),
    dissipation: str = "hamiltonian",
) -> BrtResult:
    """Evolve the value function in time-to-go up to ``tau``.

    Each step applies the Lax-Friedrichs numerical Hamiltonian and then keeps
    the running minimum with the previous field. ``record_times`` asks for
    copies of the tube at intermediate times.

    ``dissipation`` picks the per-axis artificial viscosity. "hamiltonian"
    uses the tight bound ``|u_max - d_max,i|`` on the Hamiltonian's slope,
    which is the smallest value that keeps the scheme monotone. "dynamics"
    uses the looser speed bound ``u_max + d_max,i``; it is stable too but
    smears small targets so much on coarse grids that the front barely moves.
    """
    if not 0 < cfl <= 1:
        raise DomainError(f"cfl must lie in (0, 1], got {cfl}")
    if not tau >= 0:
        raise DomainError(f"tau must be non-negative, got {tau}")
    grid = initial.grid
    spacing = grid.spacing
    alpha = dissipation_coefficients(bounds, dissipation)
    coeff = bounds.d_max - bounds.u_max

    v = initial.cube().copy()
    snapshots = []
    schedule = []
    if tau > 0 and alpha.sum() > 0:
        dt = cfl * float(spacing.min()) / float(alpha.sum())
        schedule = _time_steps(tau, dt, record_times)
    elif tau > 0:
        # zero Hamiltonian everywhere: the field never changes
        snapshots = [ValueField(grid, v, t) for t in sorted(set(record_times)) if 0 < t < tau]
    for step, (h, stop) in enumerate(schedule, start=1):
        left, right = _one_sided(v, spacing)
        mean = 0.5 * (left + right)
        ham = np.sum(coeff * np.abs(mean), axis=-1)
        viscosity = np.sum(alpha * 0.5 * (right - left), axis=-1)
        new = v + h * (ham + viscosity)
        if not np.all(np.isfinite(new)):
            raise InstabilityError(step, cfl)
        v = np.minimum(new, v)
        if stop is not None and stop < tau:
            snapshots.append(ValueField(grid, v, stop))
    radius = float(-initial.values.min()) if target_radius is None else float(target_radius)
    return BrtResult(
        tube=ValueField(grid, v, float(tau)),
        tau=float(tau),
        target_radius=radius,
        bounds=bounds,
        steps=len(schedule),
        snapshots=snapshots,
    )


def distance_gradient(p, reference) -> Optional[np.ndarray]:
    """Gradient of the Euclidean distance to ``reference``; None at the reference itself."""
    diff = np.asarray(p, dtype=float).reshape(3) - np.asarray(reference, dtype=float)
    if not np.all(np.isfinite(diff)):
        raise DomainError("position must be finite")
    norm = float(np.linalg.norm(diff))
    if norm == 0.0:
        return None
    return diff / norm


def _gradient_sign(p, bounds: DynamicsBounds) -> np.ndarray:
    g = distance_gradient(p, bounds.reference)
    if g is None:
        return np.zeros(3)
    s = np.sign(g)
    s[np.abs(g) < TIE_TOLERANCE] = 0.0
    return s


def bang_bang_policy(p, bounds: DynamicsBounds) -> np.ndarray:
    """Full control against the sign of the distance gradient on each axis."""
    return -bounds.u_max * _gradient_sign(p, bounds)


def worst_disturbance(p, bounds: DynamicsBounds) -> np.ndarray:
    return bounds.d_max * _gradient_sign(p, bounds)


def bounds_from_stats(
    stats: ErrorStats,
    step_duration: float = 0.1,
    kappa: float = 0.25,
    reference=(0.0, 0.0, 1.0),
) -> DynamicsBounds:
    """Turn per-step error statistics into velocity bounds.

    The disturbance bound on each axis is ``kappa * (|mean| + std)`` spread
    over one step, and the control bound is the per-axis action limit over
    the same step.
    """
    if not step_duration > 0:
        raise DomainError(f"step_duration must be positive, got {step_duration}")
    if not kappa > 0:
        raise DomainError(f"kappa must be positive, got {kappa}")
    psd_sqrt(stats.covariance)
    d = kappa * (np.abs(stats.mean) + stats.std()) / step_duration
    return DynamicsBounds(u_max=ACTION_BOUND / step_duration, d_max=d, reference=reference)


@dataclass(frozen=True)
class SliceResult:
    axis: str
    coordinate: float
    u_axis: np.ndarray
    v_axis: np.ndarray
    values: np.ndarray
    contours: List[np.ndarray]

    @property
    def area(self) -> float:
        """Area enclosed by the zero contour (holes subtract)."""
        total = 0.0
        for c in self.contours:
            x, y = c[:, 0], c[:, 1]
            total += 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
        return abs(total)

    @property
    def cell_area(self) -> float:
        """Coarse cross-check: node count below zero times the cell area."""
        du = self.u_axis[1] - self.u_axis[0]
        dv = self.v_axis[1] - self.v_axis[0]
        return float(np.count_nonzero(self.values < 0) * du * dv)

    def values_csv(self) -> str:
        names = [a for a in AXES if a != self.axis]
        rows = (
            (fmt_float(u), fmt_float(v), fmt_float(self.values[i, j]))
            for i, u in enumerate(self.u_axis)
            for j, v in enumerate(self.v_axis)
        )
        return csv_text([names[0], names[1], "value"], rows)

    def contour_csv(self) -> str:
        names = [a for a in AXES if a != self.axis]
        rows = (
            (str(k), fmt_float(pt[0]), fmt_float(pt[1]))
            for k, c in enumerate(self.contours)
            for pt in c
        )
        return csv_text(["contour", names[0], names[1]], rows)


def extract_slice(source, axis: str, coordinate: float) -> SliceResult:
    """Interpolate a field onto an axis-aligned plane and trace its zero contour."""
    from skimage.measure import find_contours

    field_ = source.tube if isinstance(source, BrtResult) else source
    if axis not in AXES:
        raise DomainError(f"axis must be one of {AXES}, got {axis!r}")
    k = AXES.index(axis)
    grid = field_.grid
    lo, hi = grid.lower[k], grid.upper[k]
    if not lo <= coordinate <= hi:
        raise DomainError(f"{axis}={coordinate} lies outside the grid range [{lo}, {hi}]")
    cube = np.moveaxis(field_.cube(), k, 0)
    pos = (coordinate - lo) / grid.spacing[k]
    i0 = min(int(np.floor(pos)), grid.resolution[k] - 2)
    frac = pos - i0
    plane = (1.0 - frac) * cube[i0] + frac * cube[i0 + 1]
    others = [i for i in range(3) if i != k]
    u_axis, v_axis = grid.axis(others[0]), grid.axis(others[1])

    # a positive border closes contours that would otherwise run off the grid
    padded = np.pad(plane, 1, mode="constant", constant_values=float(np.abs(plane).max()) + 1.0)
    contours = []
    for c in find_contours(padded, 0.0):
        idx = c - 1.0
        world = np.column_stack([
            u_axis[0] + idx[:, 0] * grid.spacing[others[0]],
            v_axis[0] + idx[:, 1] * grid.spacing[others[1]],
        ])
        contours.append(world)
    return SliceResult(axis, float(coordinate), u_axis, v_axis, plane, contours)
