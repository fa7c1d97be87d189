"""dq <-> modified sequence domain transforms and coupling classification.

The modified sequence representation is a unitary similarity of the dq
matrix, so eigenvalues (and hence Nyquist loci) are identical in the two
domains. The positive/negative sequence channels of a dq frequency w are
evaluated at w + w1 and w - w1; the negative one may land below zero, in
which case measured phasors are identified with the conjugate response at
the mirrored positive frequency.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .freqresp import FrequencyGrid, Tf2x2, _fmt

# Row convention is fixed: a transposed variant also diagonalizes
# mirror-decoupled matrices but swaps the p/n channels; tests pin this one.
A_Z = np.array([[1.0, 1.0j],
                [1.0, -1.0j]]) / np.sqrt(2.0)
A_Z_INV = A_Z.conj().T

DEFAULT_MFD_THRESHOLD = 0.05

MFD_CSV_HEADER = ("f_hz", "ratio", "verdict",
                  "sym_residual_diag", "sym_residual_offdiag")


def dq_to_pn(z):
    """Similarity transform of a dq response into the sequence domain."""
    if z.domain != "dq":
        raise ValueError(f"expected a dq-domain response, got {z.domain!r}")
    vals = np.einsum("ab,nbc,cd->nad", A_Z, z.values, A_Z_INV)
    return Tf2x2(z.grid, vals, "pn", z.role)


def pn_to_dq(z):
    """Inverse similarity transform; round-trips with dq_to_pn."""
    if z.domain != "pn":
        raise ValueError(f"expected a pn-domain response, got {z.domain!r}")
    vals = np.einsum("ab,nbc,cd->nad", A_Z_INV, z.values, A_Z)
    return Tf2x2(z.grid, vals, "dq", z.role)


@dataclass(frozen=True)
class SequenceFrequencyPair:
    """Sequence-domain frequencies belonging to one dq frequency (rad/s)."""

    w_dq: float
    w_p: float
    w_n: float


def map_frequencies(grid: FrequencyGrid):
    """Per-point sequence frequencies: w_p = w + w1, w_n = w - w1.

    w_n may be negative; it is then interpreted as the conjugate phasor at
    the mirrored positive frequency.
    """
    w1 = grid.fundamental
    return [SequenceFrequencyPair(w, w + w1, w - w1) for w in grid.points]


@dataclass(frozen=True, eq=False)
class MfdReport:
    """Per-frequency off-diagonal-to-diagonal ratio and verdict.

    For dq-domain input the two symmetry residuals |Z11 - Z22| and
    |Z12 + Z21| (normalized by the largest diagonal magnitude) are also
    reported; they vanish for mirror-decoupled systems. For pn input they
    are NaN.
    """

    grid: FrequencyGrid
    ratio: np.ndarray
    verdict: np.ndarray
    domain: str
    threshold: float
    sym_residual_diag: np.ndarray
    sym_residual_offdiag: np.ndarray

    @property
    def all_mfd(self):
        return bool(np.all(self.verdict))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(MFD_CSV_HEADER)
            for k in range(len(self.grid)):
                w.writerow([_fmt(self.grid.f_hz[k]), _fmt(self.ratio[k]),
                            int(self.verdict[k]),
                            _fmt(self.sym_residual_diag[k]),
                            _fmt(self.sym_residual_offdiag[k])])


def mfd_classify(z, threshold=DEFAULT_MFD_THRESHOLD):
    """Classify a 2x2 response as mirror-frequency decoupled per point.

    ratio(w) = max(|Z12|, |Z21|) / max(|Z11|, |Z22|); the verdict is
    ratio <= threshold.
    """
    if not (threshold > 0):
        raise ValueError("threshold must be positive")
    v = z.values
    off = np.maximum(np.abs(v[:, 0, 1]), np.abs(v[:, 1, 0]))
    diag = np.maximum(np.abs(v[:, 0, 0]), np.abs(v[:, 1, 1]))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(diag > 0, off / diag,
                         np.where(off > 0, np.inf, 0.0))
    verdict = ratio <= threshold
    n = len(z.grid)
    if z.domain == "dq":
        norm = np.where(diag > 0, diag, 1.0)
        res_d = np.abs(v[:, 0, 0] - v[:, 1, 1]) / norm
        res_o = np.abs(v[:, 0, 1] + v[:, 1, 0]) / norm
    else:
        res_d = np.full(n, np.nan)
        res_o = np.full(n, np.nan)
    return MfdReport(z.grid, ratio, verdict, z.domain, float(threshold),
                     res_d, res_o)
