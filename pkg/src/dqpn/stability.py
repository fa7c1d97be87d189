"""Minor-loop gains, eigenvalue loci, coupling norm and Nyquist verdicts.

The minor loop L = Z_S * Y_L couples a source impedance with a load
admittance on a shared frequency grid. Stability is judged from the loci
of its two eigenvalues: counting encirclements of -1 (generalized Nyquist
argument, open-loop-stable plant assumed) or, for the approximate
single-channel models, from the diagonal entries alone. The norm eps
measures what the semi-decoupled approximation throws away: it is the
distance between each exact eigenvalue and the diagonal entry it shadows.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .freqresp import (
    DOMAIN_TAGS,
    DomainMismatchError,
    FrequencyGrid,
    GridMismatchError,
    Tf1x1,
    Tf2x2,
    _fmt,
    matmul,
)

DEFAULT_EPS_THRESHOLD = 0.1
# Loci sampled this close to -1 give no trustworthy winding count.
DEFAULT_MARGINAL_TOL = 0.02
OPEN_LOOP_NOTE = "assumes open-loop stable"

LOCI_CSV_HEADER = ("f_hz", "re_l1", "im_l1", "re_l2", "im_l2")
EPS_CSV_HEADER = ("f_hz", "re_eps", "im_eps", "abs_eps", "violated")


def minor_loop(zs: Tf2x2, yl: Tf2x2) -> Tf2x2:
    """Exact minor loop Z_S * Y_L on the shared grid."""
    if zs.role != "impedance":
        raise ValueError(f"source must be an impedance, got role {zs.role!r}")
    if yl.role != "admittance":
        raise ValueError(f"load must be an admittance, got role {yl.role!r}")
    return matmul(zs, yl)


def minor_loop_decoupled(zs_diag, yl_diag, domain: str) -> Tf2x2:
    """Diagonal minor loop from per-channel scalar models.

    ``zs_diag`` and ``yl_diag`` are pairs of Tf1x1 in channel order
    (d, q) or (p, n). Off-diagonals of the result are exactly zero.
    """
    if domain not in DOMAIN_TAGS:
        raise ValueError(f"unknown domain tag {domain!r}")
    z1, z2 = zs_diag
    y1, y2 = yl_diag
    grid = z1.grid
    for other in (z2, y1, y2):
        if other.grid != grid:
            raise GridMismatchError("decoupled channels on different grids")
    vals = np.zeros((len(grid), 2, 2), dtype=complex)
    vals[:, 0, 0] = z1.values * y1.values
    vals[:, 1, 1] = z2.values * y2.values
    return Tf2x2(grid, vals, domain, "minorloop")


def semidecouple(l: Tf2x2) -> Tf2x2:
    """Drop the off-diagonal entries, keeping the diagonal bit-exact."""
    vals = np.zeros_like(l.values)
    vals[:, 0, 0] = l.values[:, 0, 0]
    vals[:, 1, 1] = l.values[:, 1, 1]
    return Tf2x2(l.grid, vals, l.domain, l.role)


@dataclass(frozen=True)
class MinorLoopSet:
    """Exact, semi-decoupled and (optionally) decoupled loops, one domain.

    ``dec`` stays None when no per-channel models exist; the decoupled
    loop needs separately identified scalar channels and cannot be read
    off the exact matrices in general.
    """

    exact: Tf2x2
    semidec: Tf2x2
    dec: Tf2x2 | None
    domain: str

    def __post_init__(self):
        if self.exact.role != "minorloop" or self.semidec.role != "minorloop":
            raise ValueError("minor-loop set requires minorloop roles")
        if self.exact.domain != self.domain or self.semidec.domain != self.domain:
            raise DomainMismatchError("loop domains disagree with the set tag")
        if self.exact.grid != self.semidec.grid:
            raise GridMismatchError("exact and semidec on different grids")
        same_diag = (
            np.array_equal(self.semidec.values[:, 0, 0], self.exact.values[:, 0, 0])
            and np.array_equal(self.semidec.values[:, 1, 1], self.exact.values[:, 1, 1])
        )
        if not same_diag:
            raise ValueError("semidec diagonal must equal the exact diagonal")
        for diag in (self.semidec, self.dec):
            if diag is None:
                continue
            if np.any(diag.values[:, 0, 1] != 0.0) or np.any(diag.values[:, 1, 0] != 0.0):
                raise ValueError("diagonal loop variant has nonzero off-diagonals")

    @classmethod
    def from_matrices(cls, zs: Tf2x2, yl: Tf2x2,
                      zs_diag=None, yl_diag=None) -> "MinorLoopSet":
        """Build all variants available from the given models."""
        exact = minor_loop(zs, yl)
        dec = None
        if zs_diag is not None and yl_diag is not None:
            dec = minor_loop_decoupled(zs_diag, yl_diag, zs.domain)
            if dec.grid != exact.grid:
                raise GridMismatchError("decoupled channels on a different grid")
        return cls(exact, semidecouple(exact), dec, zs.domain)


@dataclass(frozen=True)
class EigenLoci:
    """Continuity-paired eigenvalue branches of a 2x2 loop per frequency."""

    grid: FrequencyGrid
    l1: np.ndarray
    l2: np.ndarray
    swapped: np.ndarray
    domain: str

    def __post_init__(self):
        n = len(self.grid)
        if self.l1.shape != (n,) or self.l2.shape != (n,) or self.swapped.shape != (n,):
            raise ValueError("loci arrays must match the grid length")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOCI_CSV_HEADER)
            for f, a, b in zip(self.grid.f_hz, self.l1, self.l2):
                w.writerow([_fmt(f), _fmt(a.real), _fmt(a.imag),
                            _fmt(b.real), _fmt(b.imag)])


def _pair_by_continuity(raw1, raw2):
    """Permute branch samples so each branch is as continuous as possible."""
    n = raw1.shape[0]
    l1 = raw1.copy()
    l2 = raw2.copy()
    swapped = np.zeros(n, dtype=bool)
    for k in range(1, n):
        keep = abs(raw1[k] - l1[k - 1]) + abs(raw2[k] - l2[k - 1])
        swap = abs(raw2[k] - l1[k - 1]) + abs(raw1[k] - l2[k - 1])
        if swap < keep:
            l1[k] = raw2[k]
            l2[k] = raw1[k]
            swapped[k] = True
    return l1, l2, swapped


def _closed_form_branches(vals):
    l11 = vals[:, 0, 0]
    l12 = vals[:, 0, 1]
    l21 = vals[:, 1, 0]
    l22 = vals[:, 1, 1]
    half_sum = 0.5 * (l11 + l22)
    root = 0.5 * np.sqrt((l11 - l22) ** 2 + 4.0 * l12 * l21)
    raw1 = half_sum + root
    raw2 = half_sum - root
    # A vanishing off-diagonal product must reproduce the diagonal entries
    # exactly, not through sqrt round-off.
    decoupled = (l12 * l21) == 0.0
    raw1 = np.where(decoupled, l11, raw1)
    raw2 = np.where(decoupled, l22, raw2)
    return raw1, raw2


def eig_loci_closed_form(l: Tf2x2) -> EigenLoci:
    """Quadratic-formula eigenvalues, paired for branch continuity.

    The discriminant carries +4*L12*L21, the sign consistent with the
    characteristic polynomial of a 2x2 matrix.
    """
    raw1, raw2 = _closed_form_branches(l.values)
    l1, l2, swapped = _pair_by_continuity(raw1, raw2)
    return EigenLoci(l.grid, l1, l2, swapped, l.domain)


def eig_loci_numeric(l: Tf2x2) -> EigenLoci:
    """Eigenvalues from a numeric solver; oracle for the closed form."""
    pairs = np.linalg.eigvals(l.values)
    order = np.lexsort((pairs[0].imag, pairs[0].real))
    raw1 = np.where(order[0] == 0, pairs[:, 0], pairs[:, 1])
    raw2 = np.where(order[0] == 0, pairs[:, 1], pairs[:, 0])
    l1, l2, swapped = _pair_by_continuity(raw1, raw2)
    return EigenLoci(l.grid, l1, l2, swapped, l.domain)


@dataclass(frozen=True)
class EpsilonNorm:
    """Per-frequency distance between exact and semi-decoupled loci."""

    grid: FrequencyGrid
    eps: np.ndarray
    domain: str
    threshold: float
    violated: np.ndarray

    @property
    def threshold_violations(self) -> np.ndarray:
        """Frequencies (Hz) where |eps| exceeds the threshold."""
        return self.grid.f_hz[self.violated]

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.eps)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(EPS_CSV_HEADER)
            for f, e, v in zip(self.grid.f_hz, self.eps, self.violated):
                w.writerow([_fmt(f), _fmt(e.real), _fmt(e.imag),
                            _fmt(abs(e)), int(v)])


def epsilon_norm(l: Tf2x2, threshold: float = DEFAULT_EPS_THRESHOLD) -> EpsilonNorm:
    """Pairing residual between eigenvalues and diagonal entries.

    The exact eigenvalue pair is matched to (L11, L22) so the summed
    distance is minimal, then eps = L11 - lambda_paired_with_11. The
    trace identity makes the second residual the exact negative, so one
    complex number per frequency captures both. The branch choice keeps
    eps continuous and sends it to zero in the decoupled limit.
    """
    raw1, raw2 = _closed_form_branches(l.values)
    l11 = l.values[:, 0, 0]
    l22 = l.values[:, 1, 1]
    keep = np.abs(raw1 - l11) + np.abs(raw2 - l22)
    swap = np.abs(raw2 - l11) + np.abs(raw1 - l22)
    paired = np.where(keep <= swap, raw1, raw2)
    eps = l11 - paired
    violated = np.abs(eps) > threshold
    return EpsilonNorm(l.grid, eps, l.domain, float(threshold), violated)


def diagonal_dominance(p, grid: FrequencyGrid) -> np.ndarray:
    """Truth of x^2 < r^2 + (f/f_n * x)^2 per grid frequency.

    ``p`` carries the RL grid branch (z_th, f_n). The branch reactance at
    the fundamental sits on the off-diagonal of its dq matrix; the
    diagonal grows with frequency and wins everywhere once it wins at
    the fundamental.
    """
    r_pu = p.z_th.real
    x_pu = p.z_th.imag
    scaled = (grid.f_hz / p.f_n) * x_pu
    return x_pu ** 2 < r_pu ** 2 + scaled ** 2


@dataclass(frozen=True)
class NyquistVerdict:
    """Winding counts of the loci around -1 and the resulting call.

    ``stable`` is None when any sample passes within ``marginal_tol`` of
    -1: the sampled curve cannot resolve which side it runs on.
    """

    encirclements: tuple
    total: int
    stable: bool | None
    marginal: bool
    min_distance: float
    marginal_tol: float
    assumption: str = field(default=OPEN_LOOP_NOTE)


def _closed_curve(samples, about: complex):
    """Winding number of the conjugate-closed sampled curve about a point.

    The sweep covers positive frequencies only; the negative half of the
    contour is the conjugate path traversed backwards, and the closure
    segments between the two halves are included in the angle sum.
    """
    full = np.concatenate([samples, np.conj(samples[::-1])])
    rel = full - about
    ratios = np.roll(rel, -1) / rel
    return float(np.sum(np.angle(ratios))) / (2.0 * np.pi)


def nyquist_verdict(loci: EigenLoci,
                    marginal_tol: float = DEFAULT_MARGINAL_TOL) -> NyquistVerdict:
    """Count encirclements of -1 and call stability.

    Per-branch counts come from the continuity-paired loci. The total
    uses the product (1 + l1)(1 + l2) about the origin, which does not
    depend on how samples were assigned to branches, so an undetected
    branch swap cannot corrupt the verdict. Open-loop-stable source and
    load are assumed; with that, zero total encirclements means stable.
    """
    dist = np.minimum(np.abs(loci.l1 + 1.0), np.abs(loci.l2 + 1.0))
    min_distance = float(np.min(dist))
    n1 = _closed_curve(loci.l1, -1.0 + 0.0j)
    n2 = _closed_curve(loci.l2, -1.0 + 0.0j)
    total = _closed_curve((1.0 + loci.l1) * (1.0 + loci.l2), 0.0j)
    marginal = min_distance < marginal_tol
    stable = None if marginal else bool(round(total) == 0)
    return NyquistVerdict(
        encirclements=(int(round(n1)), int(round(n2))),
        total=int(round(total)),
        stable=stable,
        marginal=marginal,
        min_distance=min_distance,
        marginal_tol=float(marginal_tol),
    )
