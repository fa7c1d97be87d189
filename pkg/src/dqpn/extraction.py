"""Impedance identification from simulated injection experiments.

A shunt current source at the PCC perturbs the system one frequency at a
time. Single-bin discrete Fourier projections over integer-period
windows turn the settled waveforms into phasors; one injection per
channel yields decoupled scalar models, two independent injections per
frequency yield the full 2x2 source and load matrices.

Sign conventions: the PCC voltage is shared, the load current is
positive into the converter, and the source impedance is defined with
current positive into the grid (the negative of the recorded
source-branch flow). These make the minor loop Z_S * Y_L come out
without stray signs and are pinned by the passive-grid oracle tests.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import timesim
from .freqresp import (
    CSV_HEADER_2X2,
    FrequencyGrid,
    SingularMatrixError,
    Tf1x1,
    Tf2x2,
    _fmt,
    explicit_grid,
    invert,
)
from .models_analytic import SystemParams
from .stability import MinorLoopSet, eig_loci_closed_form, epsilon_norm, nyquist_verdict
from .timesim import DEFAULT_I_INJ, DEFAULT_SETTLE_TIME, SimTrace

DEFAULT_WINDOW = 0.4
# The slow PLL transient must decay below the injection response before
# the measurement window opens; 0.1 s leaves percent-level leakage.
DEFAULT_PIPE_SETTLE = 0.5
# Multiples of this make f_inj, f_n and their mirrors share one window.
FREQ_QUANTUM = 2.5
COND_FLAG = 1e3
CYCLE_TOL = 1e-6

CSV_HEADER_EXTRACTION = CSV_HEADER_2X2 + ("cond",)

_ALPHA = np.exp(2j * np.pi / 3.0)

_KIND_CHANNEL = {"dq1": 0, "dq2": 1, "pn1": 0, "pn2": 1}
_DOMAIN_KINDS = {"dq": ("dq1", "dq2"), "pn": ("pn1", "pn2")}
_CHANNEL_NAMES = {"dq": ("d", "q"), "pn": ("p", "n")}


def _check_cycles(n: int, dt: float, f: float, what: str) -> None:
    cycles = n * dt * f
    if abs(cycles - round(cycles)) > CYCLE_TOL:
        raise ValueError(
            f"window of {n} samples is not an integer number of periods "
            f"of {what} = {f} Hz")


def dft_bin(x, dt: float, f: float, f_fundamental: float = 50.0) -> complex:
    """Single-bin projection of a real signal onto frequency f.

    Normalized so a pure A*sin(2*pi*f*t) segment starting at t=0 gives
    magnitude A (phase -90 degrees, cosine reference). The window must
    hold an integer number of periods of both f and the fundamental.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    _check_cycles(n, dt, f, "the bin frequency")
    _check_cycles(n, dt, f_fundamental, "the fundamental")
    t = np.arange(n) * dt
    return complex(2.0 * np.mean(x * np.exp(-2j * np.pi * f * t)))


def _cbin(c, t, f: float) -> complex:
    """Mean of c(t) * exp(-j*2*pi*f*t): complex-signal bin at signed f."""
    return complex(np.mean(c * np.exp(-2j * np.pi * f * t)))


@dataclass(frozen=True)
class PhasorSet:
    """Voltage and branch-current phasors of one experiment pair.

    Channel order is (d, q) or (p, n). ``frequency`` is the dq-frame
    perturbation frequency the set belongs to.
    """

    frequency: float
    domain: str
    v: np.ndarray
    i_source: np.ndarray
    i_load: np.ndarray


def _space_vector(trace: SimTrace, which: str, start: int, n: int):
    """Complex dq signal of one recorded three-phase quantity."""
    abc = getattr(trace, which)[start:start + n]
    t = trace.t[start:start + n]
    sv = (2.0 / 3.0) * (abc[:, 0] + _ALPHA * abc[:, 1] + _ALPHA ** 2 * abc[:, 2])
    return sv * np.exp(-2j * np.pi * trace.f_n * t), t


def _window_bounds(trace: SimTrace, t_start: float, t_window: float):
    start = int(round(t_start / trace.dt))
    n = int(round(t_window / trace.dt))
    if start + n > len(trace):
        raise ValueError("trace shorter than settle time plus window")
    _check_cycles(n, trace.dt, trace.f_n, "the fundamental")
    return start, n


def _phasors_from_bins(bp, bm, domain: str):
    if domain == "dq":
        return np.array([bp + np.conj(bm), (bp - np.conj(bm)) / 1j])
    return np.array([bp, np.conj(bm)])


def _trace_phasors(trace: SimTrace, f: float, domain: str,
                   t_start: float, t_window: float,
                   baseline: SimTrace | None = None) -> PhasorSet:
    start, n = _window_bounds(trace, t_start, t_window)
    _check_cycles(n, trace.dt, f, "the perturbation frequency")
    out = []
    for which in ("v_abc", "il_abc", "is_abc"):
        c, t = _space_vector(trace, which, start, n)
        if baseline is not None:
            cb, _ = _space_vector(baseline, which, start, n)
            c = c - cb
        out.append((_cbin(c, t, f), _cbin(c, t, -f)))
    (vp, vm), (lp, lm), (sp, sm) = out
    return PhasorSet(
        frequency=f,
        domain=domain,
        v=_phasors_from_bins(vp, vm, domain),
        i_load=_phasors_from_bins(lp, lm, domain),
        i_source=-_phasors_from_bins(sp, sm, domain),
    )


def abc_to_pn_phasors(trace: SimTrace, f_p: float, f_n: float,
                      t_start: float = DEFAULT_SETTLE_TIME,
                      t_window: float = DEFAULT_WINDOW) -> PhasorSet:
    """Symmetric-component phasors at the sequence frequency pair.

    f_p and f_n are the positive- and negative-sequence frequencies, the
    mirrors of one dq-frame frequency (f_p - fund = f_n + fund). A
    negative f_n is understood as the conjugate response at |f_n|.
    """
    f_dq = 0.5 * (f_p + f_n)
    if abs((f_p - f_dq) - trace.f_n) > 1e-9:
        raise ValueError("f_p and f_n are not mirrors of one dq frequency")
    start, n = _window_bounds(trace, t_start, t_window)
    _check_cycles(n, trace.dt, f_p, "the positive-sequence frequency")
    _check_cycles(n, trace.dt, f_n, "the negative-sequence frequency")
    t = trace.t[start:start + n]

    def seq_bins(abc):
        # Per-phase complex bins; a real signal's bin at -f is the
        # conjugate of the bin at +f.
        def phase_bin(col, f):
            return 2.0 * _cbin(abc[:, col], t, f)
        def pos(f):
            return (phase_bin(0, f) + _ALPHA * phase_bin(1, f)
                    + _ALPHA ** 2 * phase_bin(2, f)) / 3.0
        def neg(f):
            return (phase_bin(0, f) + _ALPHA ** 2 * phase_bin(1, f)
                    + _ALPHA * phase_bin(2, f)) / 3.0
        return pos(f_p), neg(f_n)

    v = seq_bins(trace.v_abc[start:start + n])
    il = seq_bins(trace.il_abc[start:start + n])
    isrc = seq_bins(trace.is_abc[start:start + n])
    return PhasorSet(
        frequency=f_dq,
        domain="pn",
        v=np.array(v),
        i_load=np.array(il),
        i_source=-np.array(isrc),
    )


@dataclass(frozen=True)
class ExtractionResult:
    """Identified source and load models on one domain's grid."""

    z_source: Tf2x2
    z_load: Tf2x2
    decoupled: dict
    cond: np.ndarray
    linearity_delta: float | None
    domain: str

    @property
    def flagged(self) -> np.ndarray:
        """Frequencies whose two-injection solve was ill-conditioned."""
        return self.cond > COND_FLAG

    def to_csv(self, path, which: str = "load") -> None:
        tf = {"load": self.z_load, "source": self.z_source}[which]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER_EXTRACTION)
            for k, f in enumerate(tf.grid.f_hz):
                m = tf.values[k]
                row = [f]
                for i in (0, 1):
                    for j in (0, 1):
                        row += [m[i, j].real, m[i, j].imag]
                row.append(self.cond[k])
                w.writerow([_fmt(x) for x in row])


def _group_traces(traces):
    by_freq = {}
    for tr in traces:
        if tr.injection is None:
            raise ValueError("trace without injection cannot be extracted")
        if tr.diverged:
            raise ValueError(
                f"diverged trace at f={tr.injection.f_inj} Hz "
                f"({tr.injection.kind}) cannot be extracted")
        by_freq.setdefault(tr.injection.f_inj, {})[tr.injection.kind] = tr
    return dict(sorted(by_freq.items()))


def extract_decoupled(traces, domain: str,
                      t_start: float = DEFAULT_SETTLE_TIME,
                      t_window: float = DEFAULT_WINDOW,
                      baseline: SimTrace | None = None) -> dict:
    """Scalar channel models from one injection per frequency.

    Returns Tf1x1 entries keyed "<channel>_<side>", e.g. "p_load": the
    first injection kind of the domain identifies the first channel
    (V/I ratio on that channel), the second kind the second channel.
    """
    kinds = _DOMAIN_KINDS[domain]
    names = _CHANNEL_NAMES[domain]
    grouped = _group_traces(traces)
    freqs = np.array(list(grouped))
    chans = {}
    for ci, kind in enumerate(kinds):
        zl = np.empty(len(freqs), dtype=complex)
        zs = np.empty(len(freqs), dtype=complex)
        for k, f in enumerate(freqs):
            tr = grouped[f].get(kind)
            if tr is None:
                raise ValueError(f"no {kind} trace at f={f} Hz")
            ph = _trace_phasors(tr, f, domain, t_start, t_window, baseline)
            if abs(ph.i_load[ci]) == 0.0 or abs(ph.i_source[ci]) == 0.0:
                raise ValueError(
                    f"no measurable channel current at f={f} Hz ({kind})")
            zl[k] = ph.v[ci] / ph.i_load[ci]
            zs[k] = ph.v[ci] / ph.i_source[ci]
        grid = explicit_grid(freqs, f_fundamental=traces[0].f_n)
        chans[f"{names[ci]}_load"] = Tf1x1(grid, zl, f"{names[ci]}_load")
        chans[f"{names[ci]}_source"] = Tf1x1(grid, zs, f"{names[ci]}_source")
    return chans


def _solve_pair(ph1: PhasorSet, ph2: PhasorSet):
    """2x2 source/load impedances from two independent experiments."""
    v = np.column_stack([ph1.v, ph2.v])
    il = np.column_stack([ph1.i_load, ph2.i_load])
    isrc = np.column_stack([ph1.i_source, ph2.i_source])
    cond = max(np.linalg.cond(il), np.linalg.cond(isrc))
    zl = v @ np.linalg.inv(il)
    zs = v @ np.linalg.inv(isrc)
    return zs, zl, float(cond)


def extract_matrix(traces, domain: str,
                   t_start: float = DEFAULT_SETTLE_TIME,
                   t_window: float = DEFAULT_WINDOW,
                   baseline: SimTrace | None = None) -> ExtractionResult:
    """Full 2x2 source and load models from two injections per frequency."""
    kinds = _DOMAIN_KINDS[domain]
    grouped = _group_traces(traces)
    freqs = np.array(list(grouped))
    n = len(freqs)
    zs_vals = np.empty((n, 2, 2), dtype=complex)
    zl_vals = np.empty((n, 2, 2), dtype=complex)
    cond = np.empty(n)
    for k, f in enumerate(freqs):
        have = grouped[f]
        missing = [kind for kind in kinds if kind not in have]
        if missing:
            raise ValueError(
                f"matrix extraction at f={f} Hz needs two independent "
                f"injections {kinds}; missing {missing}")
        ph = [
            _trace_phasors(have[kind], f, domain, t_start, t_window, baseline)
            for kind in kinds
        ]
        zs_vals[k], zl_vals[k], cond[k] = _solve_pair(*ph)
    grid = explicit_grid(freqs, f_fundamental=traces[0].f_n)
    return ExtractionResult(
        z_source=Tf2x2(grid, zs_vals, domain, "impedance"),
        z_load=Tf2x2(grid, zl_vals, domain, "impedance"),
        decoupled={},
        cond=cond,
        linearity_delta=None,
        domain=domain,
    )


def _invert_scalar(tf: Tf1x1) -> Tf1x1:
    bad = np.abs(tf.values) == 0.0
    if bad.any():
        f = tf.grid.f_hz[bad][0]
        raise SingularMatrixError(f"scalar model is zero at f = {f} Hz")
    return Tf1x1(tf.grid, 1.0 / tf.values, tf.label)


@dataclass
class PipelineResult:
    """Everything the end-to-end identification produces."""

    case: str
    grid: FrequencyGrid
    results: dict
    loops: dict
    loci: dict
    eps: dict
    verdicts: dict


def _pn_subgrid(grid: FrequencyGrid, f_n: float):
    """Drop frequencies whose mirror collides with 0 or the fundamental."""
    keep = ~(np.isclose(grid.f_hz, f_n) | np.isclose(grid.f_hz, 2.0 * f_n))
    return grid.f_hz[keep]


def _integrate_chunk(args):
    """RK4 one batch chunk, accumulating window bins at each sim's f."""
    p, case, kinds, fs, amps, dt, n_settle, n_win, keep_signals = args
    n = len(kinds)
    x0, vhat0 = timesim._steady_state(p, case)
    X = np.tile(x0, (n, 1))
    ctx = timesim._context(p, case, kinds, 2.0 * np.pi * fs, amps, vhat0=vhat0)
    acc_p = np.zeros((3, n), dtype=complex)
    acc_m = np.zeros((3, n), dtype=complex)
    signals = np.zeros((3, n_win), dtype=complex) if keep_signals else None
    for k in range(n_settle + n_win):
        t = k * dt
        if k >= n_settle:
            v, il, isrc, _ = timesim._signals(t, X, ctx)
            ep = np.exp(-2j * np.pi * fs * t)
            for idx, sig in enumerate((v, il, isrc)):
                acc_p[idx] += sig * ep
                acc_m[idx] += sig / ep
            if keep_signals:
                signals[0, k - n_settle] = v[0]
                signals[1, k - n_settle] = il[0]
                signals[2, k - n_settle] = isrc[0]
        X = timesim._rk4_step(t, X, dt, ctx)
        if not np.all(np.isfinite(X)):
            raise ArithmeticError(
                "simulation diverged during extraction; the configuration "
                "is not small-signal stable")
    return acc_p / n_win, acc_m / n_win, signals


def pipeline(params: SystemParams, case: str, grid: FrequencyGrid,
             domains=("dq", "pn"), models=("matrix", "dec"),
             i_inj: float = DEFAULT_I_INJ, dt: float = timesim.DEFAULT_DT,
             t_settle: float = DEFAULT_PIPE_SETTLE,
             t_window: float = DEFAULT_WINDOW,
             linearity_check: bool = False, threads: int = 1) -> PipelineResult:
    """Simulate, transform, solve and judge across the whole grid.

    Runs every needed injection experiment in one vectorized batch,
    subtracts a no-injection baseline run bin-wise, then assembles per
    domain: matrix and decoupled models, exact/semidec/dec minor loops,
    eigenvalue loci, the coupling norm, and Nyquist verdicts.
    """
    if (case == "mfc") != params.pll_enabled:
        raise ValueError("case and pll_enabled contradict each other")
    off_quantum = np.abs(grid.f_hz / FREQ_QUANTUM
                         - np.round(grid.f_hz / FREQ_QUANTUM)) > 1e-9
    if off_quantum.any():
        raise ValueError(
            f"pipeline frequencies must be multiples of {FREQ_QUANTUM} Hz "
            f"for leakage-free windows; offending f = "
            f"{grid.f_hz[off_quantum][0]} Hz")
    for d in domains:
        if d not in _DOMAIN_KINDS:
            raise ValueError(f"unknown domain {d!r}")

    f_by_domain = {}
    for d in domains:
        f_by_domain[d] = _pn_subgrid(grid, params.f_n) if d == "pn" else grid.f_hz
        if len(f_by_domain[d]) == 0:
            raise ValueError(f"no usable frequencies remain for domain {d!r}")

    # One experiment per (kind, frequency); first slot is the baseline.
    kinds = ["none"]
    fs = [0.0]
    amps = [0.0]
    slots = {}
    for d in domains:
        for kind in _DOMAIN_KINDS[d]:
            for f in f_by_domain[d]:
                key = (kind, float(f))
                if key not in slots:
                    slots[key] = len(kinds)
                    kinds.append(kind)
                    fs.append(float(f))
                    amps.append(i_inj)
    lin_slots = {}
    if linearity_check:
        d0 = domains[0]
        f_lin = f_by_domain[d0]
        for f in (f_lin[0], f_lin[len(f_lin) // 2], f_lin[-1]):
            key = (_DOMAIN_KINDS[d0][0], float(f))
            lin_slots[key] = len(kinds)
            kinds.append(key[0])
            fs.append(float(f))
            amps.append(2.0 * i_inj)

    kinds = np.array(kinds)
    fs = np.array(fs)
    amps = np.array(amps)
    n_settle = int(round(t_settle / dt))
    n_win = int(round(t_window / dt))
    _check_cycles(n_win, dt, params.f_n, "the fundamental")

    n_sims = len(kinds)
    threads = max(1, int(threads))
    bounds = np.linspace(0, n_sims, min(threads, n_sims) + 1).astype(int)
    chunks = [
        (params, case, kinds[a:b], fs[a:b], amps[a:b], dt, n_settle, n_win,
         bool(a == 0))
        for a, b in zip(bounds[:-1], bounds[1:]) if b > a
    ]
    if len(chunks) == 1:
        parts = [_integrate_chunk(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as ex:
            parts = list(ex.map(_integrate_chunk, chunks))
    bins_p = np.concatenate([pt[0] for pt in parts], axis=1)
    bins_m = np.concatenate([pt[1] for pt in parts], axis=1)
    base_signals = parts[0][2]

    # Baseline bins at every frequency in use, subtracted slot-wise.
    t_win_axis = (n_settle + np.arange(n_win)) * dt
    uniq_f = np.unique(fs[1:])
    base_p = {}
    base_m = {}
    for f in uniq_f:
        ep = np.exp(-2j * np.pi * f * t_win_axis)
        base_p[f] = (base_signals * ep[None, :]).mean(axis=1)
        base_m[f] = (base_signals / ep[None, :]).mean(axis=1)
    for key, s in list(slots.items()) + list(lin_slots.items()):
        f = key[1]
        bins_p[:, s] -= base_p[f]
        bins_m[:, s] -= base_m[f]

    def phasor_set(kind, f, domain, scale=1.0):
        s = lin_slots[(kind, f)] if scale != 1.0 else slots[(kind, f)]
        v = _phasors_from_bins(bins_p[0, s], bins_m[0, s], domain) / scale
        il = _phasors_from_bins(bins_p[1, s], bins_m[1, s], domain) / scale
        isrc = _phasors_from_bins(bins_p[2, s], bins_m[2, s], domain) / scale
        return PhasorSet(f, domain, v, -isrc, il)

    results = {}
    loops = {}
    loci = {}
    eps = {}
    verdicts = {}
    for d in domains:
        freqs = f_by_domain[d]
        dgrid = explicit_grid(freqs, f_fundamental=params.f_n)
        kind1, kind2 = _DOMAIN_KINDS[d]
        names = _CHANNEL_NAMES[d]

        n = len(freqs)
        zs_vals = np.empty((n, 2, 2), dtype=complex)
        zl_vals = np.empty((n, 2, 2), dtype=complex)
        cond = np.empty(n)
        dec = {}
        if "matrix" in models:
            for k, f in enumerate(freqs):
                ph1 = phasor_set(kind1, float(f), d)
                ph2 = phasor_set(kind2, float(f), d)
                zs_vals[k], zl_vals[k], cond[k] = _solve_pair(ph1, ph2)
        if "dec" in models:
            for ci, kind in enumerate((kind1, kind2)):
                zl_c = np.empty(n, dtype=complex)
                zs_c = np.empty(n, dtype=complex)
                for k, f in enumerate(freqs):
                    ph = phasor_set(kind, float(f), d)
                    zl_c[k] = ph.v[ci] / ph.i_load[ci]
                    zs_c[k] = ph.v[ci] / ph.i_source[ci]
                dec[f"{names[ci]}_load"] = Tf1x1(dgrid, zl_c, f"{names[ci]}_load")
                dec[f"{names[ci]}_source"] = Tf1x1(dgrid, zs_c, f"{names[ci]}_source")

        lin_delta = None
        if linearity_check and d == domains[0]:
            deltas = []
            for (kind, f), s in lin_slots.items():
                ph2x = phasor_set(kind, f, d, scale=2.0)
                ph1x = phasor_set(kind, f, d)
                num = np.abs(ph2x.v - ph1x.v).max()
                den = np.abs(ph1x.v).max()
                deltas.append(num / den)
            lin_delta = float(max(deltas))

        if "matrix" not in models:
            if not dec:
                raise ValueError("nothing to extract: no model kinds given")
            results[d] = ExtractionResult(
                z_source=None, z_load=None, decoupled=dec,
                cond=np.full(n, np.nan), linearity_delta=lin_delta, domain=d)
            continue

        res = ExtractionResult(
            z_source=Tf2x2(dgrid, zs_vals, d, "impedance"),
            z_load=Tf2x2(dgrid, zl_vals, d, "impedance"),
            decoupled=dec,
            cond=cond,
            linearity_delta=lin_delta,
            domain=d,
        )
        results[d] = res

        yl = invert(res.z_load)
        zs_diag = yl_diag = None
        if dec:
            zs_diag = (dec[f"{names[0]}_source"], dec[f"{names[1]}_source"])
            yl_diag = (_invert_scalar(dec[f"{names[0]}_load"]),
                       _invert_scalar(dec[f"{names[1]}_load"]))
        loops[d] = MinorLoopSet.from_matrices(res.z_source, yl, zs_diag, yl_diag)
        loci[d] = {"exact": eig_loci_closed_form(loops[d].exact),
                   "semidec": eig_loci_closed_form(loops[d].semidec)}
        if loops[d].dec is not None:
            loci[d]["dec"] = eig_loci_closed_form(loops[d].dec)
        eps[d] = epsilon_norm(loops[d].exact)
        verdicts[d] = {v: nyquist_verdict(l) for v, l in loci[d].items()}

    return PipelineResult(
        case=case,
        grid=grid,
        results=results,
        loops=loops,
        loci=loci,
        eps=eps,
        verdicts=verdicts,
    )
