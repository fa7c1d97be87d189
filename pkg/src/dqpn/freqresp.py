"""Frequency-response containers and pointwise 2x2 complex matrix algebra.

Every other module builds on the three containers defined here: a frequency
grid (angular frequencies with a fundamental), a 2x2 matrix response tagged
with its domain and role, and a scalar response. Grids are compared by
exact point equality; the core algebra never interpolates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi

GRID_KINDS = ("linear", "logarithmic", "explicit")
DOMAIN_TAGS = ("dq", "pn")
ROLE_TAGS = ("impedance", "admittance", "minorloop")

# Scale-invariant singularity guard: |det| below this fraction of the
# squared largest entry flags the matrix as numerically rank-deficient.
SINGULARITY_RTOL = 1e-12

CSV_HEADER_2X2 = ("f_hz", "re_11", "im_11", "re_12", "im_12",
                  "re_21", "im_21", "re_22", "im_22")
CSV_HEADER_1X1 = ("f_hz", "re", "im")


class GridMismatchError(ValueError):
    """Two responses do not share the exact same frequency grid."""


class DomainMismatchError(ValueError):
    """Two responses carry different domain tags."""


class SingularMatrixError(ValueError):
    """A pointwise matrix operation hit a numerically singular point."""


def _fmt(x):
    # repr of a Python float is the shortest digit string that round-trips,
    # which keeps CSV output byte-stable across runs.
    return repr(float(x))


@dataclass(frozen=True, eq=False)
class FrequencyGrid:
    """Ordered analysis frequencies in rad/s plus the fundamental.

    points must be strictly increasing and finite; `fundamental` is the
    angular grid frequency (rad/s) used for domain frequency mapping.
    """

    points: np.ndarray
    kind: str
    fundamental: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).copy()
        if pts.ndim != 1 or pts.size < 1:
            raise ValueError("grid needs a 1-d, non-empty point array")
        if not np.all(np.isfinite(pts)):
            raise ValueError("grid points must be finite")
        if pts.size > 1 and not np.all(np.diff(pts) > 0):
            raise ValueError("grid points must be strictly increasing")
        if self.kind not in GRID_KINDS:
            raise ValueError(f"unknown grid kind {self.kind!r}")
        if not (self.fundamental > 0):
            raise ValueError("fundamental must be positive")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def f_hz(self):
        return self.points / TWO_PI

    @property
    def fundamental_hz(self):
        return self.fundamental / TWO_PI

    def __len__(self):
        return self.points.size

    def __eq__(self, other):
        if not isinstance(other, FrequencyGrid):
            return NotImplemented
        return (self.kind == other.kind
                and self.fundamental == other.fundamental
                and np.array_equal(self.points, other.points))

    def __repr__(self):
        return (f"FrequencyGrid(n={len(self)}, kind={self.kind!r}, "
                f"f={self.f_hz[0]:g}..{self.f_hz[-1]:g} Hz, "
                f"f1={self.fundamental_hz:g} Hz)")


def make_grid(f_min, f_max, n, kind="logarithmic", f_fundamental=50.0):
    """Build an n-point grid spanning [f_min, f_max] Hz (output in rad/s)."""
    if not (0 < f_min < f_max):
        raise ValueError(f"need 0 < f_min < f_max, got {f_min}, {f_max}")
    if n < 2:
        raise ValueError("need at least two grid points")
    if kind == "linear":
        f = np.linspace(f_min, f_max, n)
    elif kind == "logarithmic":
        f = np.logspace(np.log10(f_min), np.log10(f_max), n)
    else:
        raise ValueError(f"unknown grid kind {kind!r}")
    return FrequencyGrid(TWO_PI * f, kind, TWO_PI * f_fundamental)


def explicit_grid(f_hz, f_fundamental=50.0):
    """Grid from an explicit list of frequencies in Hz."""
    f = np.asarray(f_hz, dtype=float)
    return FrequencyGrid(TWO_PI * f, "explicit", TWO_PI * f_fundamental)


@dataclass(frozen=True, eq=False)
class Tf2x2:
    """A 2x2 complex frequency response on a grid.

    domain is "dq" or "pn"; role is "impedance", "admittance" or
    "minorloop". Tags and values are immutable after construction.
    """

    grid: FrequencyGrid
    values: np.ndarray
    domain: str
    role: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex).copy()
        if v.shape != (len(self.grid), 2, 2):
            raise ValueError(f"values must have shape (n, 2, 2); "
                             f"got {v.shape} for n={len(self.grid)}")
        if not np.all(np.isfinite(v)):
            raise ValueError("matrix entries must be finite")
        if self.domain not in DOMAIN_TAGS:
            raise ValueError(f"unknown domain tag {self.domain!r}")
        if self.role not in ROLE_TAGS:
            raise ValueError(f"unknown role tag {self.role!r}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def entry(self, i, j):
        """One matrix element as a length-n complex array."""
        return self.values[:, i, j]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER_2X2)
            for f, m in zip(self.grid.f_hz, self.values):
                row = [_fmt(f)]
                for i in (0, 1):
                    for j in (0, 1):
                        row += [_fmt(m[i, j].real), _fmt(m[i, j].imag)]
                w.writerow(row)

    @classmethod
    def from_csv(cls, path, domain, role, f_fundamental=50.0):
        f_hz, cols = _read_csv(path, CSV_HEADER_2X2)
        n = len(f_hz)
        v = np.empty((n, 2, 2), complex)
        v[:, 0, 0] = cols[0] + 1j * cols[1]
        v[:, 0, 1] = cols[2] + 1j * cols[3]
        v[:, 1, 0] = cols[4] + 1j * cols[5]
        v[:, 1, 1] = cols[6] + 1j * cols[7]
        grid = explicit_grid(f_hz, f_fundamental)
        return cls(grid, v, domain, role)


@dataclass(frozen=True, eq=False)
class Tf1x1:
    """A scalar complex frequency response on a grid."""

    grid: FrequencyGrid
    values: np.ndarray
    label: str = field(default="")

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex).copy()
        if v.shape != (len(self.grid),):
            raise ValueError(f"values must have shape (n,); got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER_1X1)
            for f, z in zip(self.grid.f_hz, self.values):
                w.writerow([_fmt(f), _fmt(z.real), _fmt(z.imag)])

    @classmethod
    def from_csv(cls, path, label="", f_fundamental=50.0):
        f_hz, cols = _read_csv(path, CSV_HEADER_1X1)
        grid = explicit_grid(f_hz, f_fundamental)
        return cls(grid, cols[0] + 1j * cols[1], label)


def _read_csv(path, header):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != tuple(header):
        raise ValueError(f"{path}: expected header {','.join(header)}")
    data = np.array([[float(x) for x in row] for row in rows[1:]])
    if data.size == 0:
        raise ValueError(f"{path}: no data rows")
    return data[:, 0], [data[:, k] for k in range(1, data.shape[1])]


def _require_same_grid(a, b):
    if a.grid != b.grid:
        raise GridMismatchError(
            "operands live on different frequency grids; resample explicitly "
            "before combining them")


def _require_same_domain(a, b):
    if a.domain != b.domain:
        raise DomainMismatchError(
            f"domain tags differ: {a.domain!r} vs {b.domain!r}")


def invert(m):
    """Pointwise 2x2 inverse; flips impedance <-> admittance.

    Raises SingularMatrixError naming the first offending frequency when
    |det| < 1e-12 * (max entry)^2 at any point.
    """
    v = m.values
    det = v[:, 0, 0] * v[:, 1, 1] - v[:, 0, 1] * v[:, 1, 0]
    scale = np.max(np.abs(v), axis=(1, 2))
    bad = np.abs(det) < SINGULARITY_RTOL * scale**2
    if np.any(bad):
        f_bad = m.grid.f_hz[bad][0]
        raise SingularMatrixError(
            f"matrix numerically singular at f = {f_bad:g} Hz")
    out = np.empty_like(v)
    out[:, 0, 0] = v[:, 1, 1]
    out[:, 0, 1] = -v[:, 0, 1]
    out[:, 1, 0] = -v[:, 1, 0]
    out[:, 1, 1] = v[:, 0, 0]
    out /= det[:, None, None]
    role = {"impedance": "admittance",
            "admittance": "impedance"}.get(m.role, m.role)
    return Tf2x2(m.grid, out, m.domain, role)


def matmul(a, b):
    """Pointwise matrix product of two responses on the same grid/domain.

    An impedance times an admittance is tagged "minorloop"; otherwise the
    left operand's role is kept.
    """
    _require_same_grid(a, b)
    _require_same_domain(a, b)
    if a.role == "impedance" and b.role == "admittance":
        role = "minorloop"
    else:
        role = a.role
    return Tf2x2(a.grid, a.values @ b.values, a.domain, role)
