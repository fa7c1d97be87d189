"""Fixed-step simulation of the averaged converter-grid case study.

One RL branch connects the Thevenin source to the PCC node, a second RL
branch (the converter filter) connects the PCC to the averaged converter
voltage, and a shunt current source at the node injects perturbations.
The converter runs a dq PI current controller behind a first-order
actuation lag, synchronized either to a fixed ramp (case "mfd") or to a
PI phase-locked loop on the normalized q-axis PCC voltage (case "mfc").

Everything is computed per unit in a global dq frame rotating at the
fundamental; three-phase waveforms are projections of the complex dq
signals and are exact, not resampled. Sign conventions: load-branch
current flows into the converter, source-branch current is the grid
branch flow toward the node, the injection adds into the node.

State vector per run (8 reals):
  0,1  load-branch current d,q
  2,3  PI integrator d,q
  4,5  delayed modulation voltage d,q (controller frame)
  6    PLL integrator
  7    PLL angle minus the fundamental ramp
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from ._config import resolve_case
from .freqresp import _fmt
from .models_analytic import SystemParams, params_from_config, solve_operating_point

INJECTION_KINDS = ("dq1", "dq2", "pn1", "pn2")
CASES = ("mfd", "mfc")

DEFAULT_DT = 1e-5
DEFAULT_I_INJ = 0.02
DEFAULT_SETTLE_TIME = 0.1
SETTLE_ENVELOPE_TOL = 1e-6
# States past this magnitude (pu) cannot return in the small-signal
# regime; the trace is cut there and flagged.
DIVERGENCE_BOUND = 10.0

TRACE_CSV_HEADER = ("t_s", "va", "vb", "vc", "isa", "isb", "isc",
                    "ila", "ilb", "ilc", "theta_pll")

_A120 = 2.0 * np.pi / 3.0


class SettlingError(RuntimeError):
    """No periodic steady state was reached within the simulated span."""


@dataclass(frozen=True)
class InjectionSpec:
    """Shunt current perturbation: kind, dq-frame frequency, amplitude."""

    kind: str
    f_inj: float
    i_inj: float = DEFAULT_I_INJ

    def __post_init__(self):
        if self.kind not in INJECTION_KINDS:
            raise ValueError(f"unknown injection kind {self.kind!r}")
        if not self.f_inj > 0.0:
            raise ValueError("injection frequency must be positive")
        if not self.i_inj > 0.0:
            raise ValueError("injection amplitude must be positive")


@dataclass(frozen=True)
class SimConfig:
    """One simulation run: plant parameters, case, step, span, injection."""

    params: SystemParams
    case: str = "mfc"
    dt: float = DEFAULT_DT
    t_end: float = 0.5
    injection: InjectionSpec | None = None

    def __post_init__(self):
        if self.case not in CASES:
            raise ValueError(f"unknown case {self.case!r}")
        if (self.case == "mfc") != self.params.pll_enabled:
            raise ValueError("case and pll_enabled contradict each other")
        if not self.dt > 0.0:
            raise ValueError("dt must be positive")
        if self.t_end < DEFAULT_SETTLE_TIME:
            raise ValueError(f"t_end must cover settling ({DEFAULT_SETTLE_TIME} s)")
        if self.dt > self.params.t_d / 10.0 * (1.0 + 1e-12):
            raise ValueError("dt too coarse for the actuation lag (need t_d/10)")
        if self.dt > self.params.t_pll / 20.0 * (1.0 + 1e-12):
            raise ValueError("dt too coarse for the phase loop (need t_pll/20)")
        inj = self.injection
        if inj is not None and inj.kind in ("pn1", "pn2"):
            if math.isclose(inj.f_inj, self.params.f_n, rel_tol=1e-9):
                raise ValueError(
                    "sequence injection at the fundamental is ambiguous "
                    "with its mirror; pick a different frequency")

    @classmethod
    def from_config(cls, cfg: dict, params: SystemParams | None = None) -> "SimConfig":
        """Build from the flat config mapping (keys case, dt_s, ...)."""
        p = params if params is not None else params_from_config(cfg)
        injection = None
        if "inj_kind" in cfg:
            injection = InjectionSpec(
                kind=cfg["inj_kind"],
                f_inj=float(cfg["f_inj_hz"]),
                i_inj=float(cfg.get("i_inj_pu", DEFAULT_I_INJ)),
            )
        elif "f_inj_hz" in cfg or "i_inj_pu" in cfg:
            raise ValueError("injection frequency/amplitude given without inj_kind")
        return cls(
            params=p,
            case=resolve_case(cfg),
            dt=float(cfg.get("dt_s", DEFAULT_DT)),
            t_end=float(cfg.get("t_end_s", 0.5)),
            injection=injection,
        )


@dataclass
class SimTrace:
    """Uniformly sampled run output, one row per integration step."""

    t: np.ndarray
    v_abc: np.ndarray
    is_abc: np.ndarray
    il_abc: np.ndarray
    theta_pll: np.ndarray
    states: np.ndarray
    dt: float
    f_n: float
    case: str
    injection: InjectionSpec | None
    diverged: bool

    def __len__(self):
        return self.t.shape[0]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_CSV_HEADER)
            for k in range(len(self)):
                row = [self.t[k], *self.v_abc[k], *self.is_abc[k],
                       *self.il_abc[k], self.theta_pll[k]]
                w.writerow([_fmt(x) for x in row])


def injection_signal(spec: InjectionSpec, t, f_n_hz: float = 50.0):
    """Three-phase injection currents at time(s) t.

    dq kinds modulate a single rotating axis with sin(w_inj t); sequence
    kinds are balanced sets at w_inj + w1 (positive, pn1) and w_inj - w1
    (negative, pn2).
    """
    t = np.asarray(t, dtype=float)
    amp = spec.i_inj
    w = 2.0 * np.pi * spec.f_inj
    w1 = 2.0 * np.pi * f_n_hz
    th = w1 * t
    if spec.kind == "dq1":
        s = amp * np.sin(w * t)
        return s * np.cos(th), s * np.cos(th - _A120), s * np.cos(th + _A120)
    if spec.kind == "dq2":
        s = amp * np.sin(w * t)
        return -s * np.sin(th), -s * np.sin(th - _A120), -s * np.sin(th + _A120)
    if spec.kind == "pn1":
        u = (w + w1) * t
        return (amp * np.sin(u), amp * np.sin(u - _A120), amp * np.sin(u + _A120))
    u = (w - w1) * t
    return (amp * np.sin(u), amp * np.sin(u + _A120), amp * np.sin(u - _A120))


def _inj_dq(kinds, ws, amps, t):
    """Injected dq current and its dq-frame derivative, batched.

    These are the exact frame transforms of injection_signal; dq kinds
    sit on one axis, sequence kinds are single complex exponentials.
    """
    n = kinds.shape[0]
    cur = np.zeros(n, dtype=complex)
    der = np.zeros(n, dtype=complex)
    for kind in INJECTION_KINDS:
        m = kinds == kind
        if not m.any():
            continue
        w = ws[m]
        a = amps[m]
        if kind == "dq1":
            cur[m] = a * np.sin(w * t)
            der[m] = a * w * np.cos(w * t)
        elif kind == "dq2":
            cur[m] = 1j * a * np.sin(w * t)
            der[m] = 1j * a * w * np.cos(w * t)
        elif kind == "pn1":
            cur[m] = -1j * a * np.exp(1j * w * t)
            der[m] = a * w * np.exp(1j * w * t)
        else:
            cur[m] = 1j * a * np.exp(-1j * w * t)
            der[m] = a * w * np.exp(-1j * w * t)
    return cur, der


def _context(p: SystemParams, case: str, kinds, ws, amps, *,
             freeze_controller=False, zero_sources=False, vhat0=1.0):
    w1 = p.w1
    return {
        "w1": w1,
        "r_th": p.z_th.real, "l_th": p.z_th.imag / w1,
        "r_s": p.z_s.real, "l_s": p.z_s.imag / w1,
        "kp": p.k_p, "ti": p.t_i, "td": p.t_d,
        "kpll": p.k_pll, "tpll": p.t_pll,
        "pll": case == "mfc",
        "vth": 0.0 if zero_sources else 1.0,
        "iref": p.i_ref,
        "vhat0": vhat0,
        "kinds": kinds, "ws": ws, "amps": amps,
        "freeze": freeze_controller,
    }


def _signals(t, X, ctx):
    """PCC voltage, load current and source-branch current at time t."""
    il = X[:, 0] + 1j * X[:, 1]
    vm = X[:, 4] + 1j * X[:, 5]
    ej = np.exp(1j * X[:, 7])
    iinj, dinj = _inj_dq(ctx["kinds"], ctx["ws"], ctx["amps"], t)
    zs_rot = ctx["r_s"] + 1j * ctx["w1"] * ctx["l_s"]
    zth_rot = ctx["r_th"] + 1j * ctx["w1"] * ctx["l_th"]
    vconv = vm * ej
    dil = (ctx["vth"] - vconv - zs_rot * il - zth_rot * (il - iinj)
           + ctx["l_th"] * dinj) / (ctx["l_th"] + ctx["l_s"])
    vpcc = vconv + zs_rot * il + ctx["l_s"] * dil
    return vpcc, il, il - iinj, dil


def _rhs(t, X, ctx):
    vpcc, il, _, dil = _signals(t, X, ctx)
    xi = X[:, 2] + 1j * X[:, 3]
    vm = X[:, 4] + 1j * X[:, 5]
    ej = np.exp(1j * X[:, 7])

    out = np.empty_like(X)
    out[:, 0], out[:, 1] = dil.real, dil.imag
    if ctx["freeze"]:
        out[:, 2:] = 0.0
        return out

    err = il / ej - ctx["iref"]
    vref = ctx["kp"] * err + (ctx["kp"] / ctx["ti"]) * xi
    dvm = (vref - vm) / ctx["td"]
    out[:, 2], out[:, 3] = err.real, err.imag
    out[:, 4], out[:, 5] = dvm.real, dvm.imag
    if ctx["pll"]:
        vqn = (vpcc / ej).imag / ctx["vhat0"]
        out[:, 6] = vqn
        out[:, 7] = ctx["kpll"] * (vqn + X[:, 6] / ctx["tpll"])
    else:
        out[:, 6] = 0.0
        out[:, 7] = 0.0
    return out


def _rk4_step(t, X, dt, ctx):
    k1 = _rhs(t, X, ctx)
    k2 = _rhs(t + dt / 2.0, X + (dt / 2.0) * k1, ctx)
    k3 = _rhs(t + dt / 2.0, X + (dt / 2.0) * k2, ctx)
    k4 = _rhs(t + dt, X + dt * k3, ctx)
    return X + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _steady_state(p: SystemParams, case: str):
    """Exact fixed point of the no-injection model, plus |V_pcc|."""
    op = solve_operating_point(p, pll_enabled=(case == "mfc"))
    x0 = np.zeros(8)
    x0[0], x0[1] = op.i_l.real, op.i_l.imag
    xi0 = op.v_mod * p.t_i / p.k_p
    x0[2], x0[3] = xi0.real, xi0.imag
    x0[4], x0[5] = op.v_mod.real, op.v_mod.imag
    x0[7] = op.delta
    return x0, op.v_hat


def _abc(x, theta):
    """Project a complex dq signal onto the three phase axes."""
    return np.stack([
        (x * np.exp(1j * theta)).real,
        (x * np.exp(1j * (theta - _A120))).real,
        (x * np.exp(1j * (theta + _A120))).real,
    ], axis=-1)


def simulate(cfg: SimConfig, *, initial_state=None,
             freeze_controller=False, zero_sources=False) -> SimTrace:
    """Integrate one run and record every step.

    ``initial_state``, ``freeze_controller`` and ``zero_sources`` are
    diagnostic hooks: they override the steady-state start, hold the
    controller states, and null the Thevenin source, so the passive
    network can be exercised on its own.
    """
    p = cfg.params
    if cfg.injection is not None:
        kinds = np.array([cfg.injection.kind])
        ws = np.array([2.0 * np.pi * cfg.injection.f_inj])
        amps = np.array([cfg.injection.i_inj])
    else:
        kinds = np.array(["none"])
        ws = np.zeros(1)
        amps = np.zeros(1)

    if zero_sources:
        steady, vhat0 = None, 1.0
    else:
        steady, vhat0 = _steady_state(p, cfg.case)
    if initial_state is not None:
        x0 = np.asarray(initial_state, dtype=float)
        if x0.shape != (8,):
            raise ValueError("initial_state must have 8 entries")
    elif steady is None:
        raise ValueError("zero_sources requires an explicit initial_state")
    else:
        x0 = steady

    ctx = _context(p, cfg.case, kinds, ws, amps,
                   freeze_controller=freeze_controller,
                   zero_sources=zero_sources, vhat0=vhat0)

    n_steps = int(round(cfg.t_end / cfg.dt))
    n = n_steps + 1
    t = np.arange(n) * cfg.dt
    states = np.empty((n, 8))
    v_sig = np.empty(n, dtype=complex)
    il_sig = np.empty(n, dtype=complex)
    is_sig = np.empty(n, dtype=complex)

    X = x0[None, :].copy()
    diverged = False
    last = n
    for k in range(n):
        tk = t[k]
        states[k] = X[0]
        v, il, isrc, _ = _signals(tk, X, ctx)
        v_sig[k], il_sig[k], is_sig[k] = v[0], il[0], isrc[0]
        bad = not np.all(np.isfinite(X)) or np.max(np.abs(X[0, :7])) > DIVERGENCE_BOUND
        if bad or not np.isfinite(v[0]):
            diverged = True
            last = k
            break
        if k < n_steps:
            X = _rk4_step(tk, X, cfg.dt, ctx)

    t = t[:last]
    states = states[:last]
    v_sig, il_sig, is_sig = v_sig[:last], il_sig[:last], is_sig[:last]
    theta_g = ctx["w1"] * t
    return SimTrace(
        t=t,
        v_abc=_abc(v_sig, theta_g),
        is_abc=_abc(is_sig, theta_g),
        il_abc=_abc(il_sig, theta_g),
        theta_pll=theta_g + states[:, 7],
        states=states,
        dt=cfg.dt,
        f_n=p.f_n,
        case=cfg.case,
        injection=cfg.injection,
        diverged=diverged,
    )


def _envelope_period(cfg: SimConfig) -> float:
    """Shortest period the steady dq-frame states can have."""
    if cfg.injection is None:
        return 1.0 / cfg.params.f_n
    return 1.0 / cfg.injection.f_inj


def run_to_steady_state(cfg: SimConfig):
    """Simulate and locate the periodic steady state.

    Returns (trace, settle_index): the index of the first sample from
    which per-state envelopes repeat, window to window, within 1e-6 pu.
    Raises SettlingError when the run diverges or never repeats.
    """
    trace = simulate(cfg)
    if trace.diverged:
        raise SettlingError("run diverged; no steady state exists")
    n_p = int(round(_envelope_period(cfg) / cfg.dt))
    n_win = len(trace) // n_p
    if n_win < 2:
        raise SettlingError("t_end shorter than two envelope periods")
    prev_hi = prev_lo = None
    for w in range(n_win):
        seg = trace.states[w * n_p:(w + 1) * n_p]
        hi = seg.max(axis=0)
        lo = seg.min(axis=0)
        if prev_hi is not None:
            drift = max(np.max(np.abs(hi - prev_hi)), np.max(np.abs(lo - prev_lo)))
            if drift < SETTLE_ENVELOPE_TOL:
                return trace, w * n_p
        prev_hi, prev_lo = hi, lo
    raise SettlingError("envelopes kept drifting; no settling within t_end")
