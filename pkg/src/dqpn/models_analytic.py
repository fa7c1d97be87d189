"""Closed-form dq-domain impedance models of the case-study system.

Source side: an RL Thevenin grid. Load side: a voltage source converter
with an L filter, PI current control in the converter reference frame, a
first-order modulation delay, and an optional synchronous-reference-frame
PLL. The converter current is taken positive flowing into the converter.

All internal math is in per-unit on the system base; SI output is a plain
scaling by the impedance base.

The linearized converter model is derived around the solved operating
point. Writing complex small-signal quantities x = x_d + j x_q and letting
W(s) = G_d(s) H_c(s) (delay times PI), the converter terminal relation in
the frame aligned with the steady PCC voltage is

    dv = Z_c(s) di + kappa(s) dtheta,   Z_c = Z_f + W,
    kappa(s) = j (V_m0 - W(s) I0),      Z_f(s) = R_s + L_s (s + j w1),

with dtheta = T(s) dv_q the PLL angle response. Embedding a complex
transfer function G = a + jb as the real 2x2 block [[A, -B], [B, A]] with
A = (G(jw) + conj(G(-jw)))/2 and B = (G(jw) - conj(G(-jw)))/(2j), the
PLL closes an algebraic loop on the q-axis voltage only:

    Z_pcc = (I - vec(kappa T) e2^T)^-1 M(Z_c),

followed by a rotation into the measurement frame (aligned with the grid
source) by the operating-point angle delta. Without the PLL, the
controller frame is the measurement frame and Z = M(Z_c) directly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ._config import ConfigError, load_config
from .freqresp import TWO_PI, FrequencyGrid, Tf2x2


class OperatingPointError(ValueError):
    """Set-points have no steady-state solution (power-transfer limit)."""


@dataclass(frozen=True)
class SystemParams:
    """Grid, filter, controller, PLL and base quantities.

    Impedances are per-unit complex at the fundamental; set-points are
    per-unit current into the converter. Per-unit conversion uses
    Z_base = V_th^2 / S_base and I_base = S_base / (sqrt(3) V_th).
    """

    v_th: float = 690.0
    s_base: float = 1.0e6
    f_n: float = 50.0
    v_dc: float = 1400.0
    z_th: complex = 0.02 + 0.4j
    z_s: complex = 0.002 + 0.1j
    k_p: float = 0.255
    t_i: float = 0.0025
    k_pll: float = 60.0
    t_pll: float = 0.033
    t_d: float = 2.0e-4
    id_ref: float = 1.0
    iq_ref: float = 0.0
    pll_enabled: bool = True

    def __post_init__(self):
        for name in ("v_th", "s_base", "f_n", "v_dc", "k_p",
                     "t_i", "t_pll", "t_d"):
            if not (getattr(self, name) > 0):
                raise ValueError(f"{name} must be positive")
        for name in ("z_th", "z_s"):
            z = complex(getattr(self, name))
            if z.real < 0 or z.imag < 0:
                raise ValueError(f"{name} needs non-negative R and X")
            object.__setattr__(self, name, z)

    @property
    def w1(self):
        return TWO_PI * self.f_n

    @property
    def z_base(self):
        return self.v_th**2 / self.s_base

    @property
    def i_base(self):
        return self.s_base / (np.sqrt(3.0) * self.v_th)

    @property
    def i_ref(self):
        """Complex current set-point (pu, into the converter)."""
        return self.id_ref + 1j * self.iq_ref


def default_params(**overrides):
    """Case-study parameter set with optional field overrides."""
    return SystemParams(**overrides)


def params_from_config(cfg):
    """SystemParams from a validated config dict (see _config)."""
    kw = {}
    pairs = {"v_th": "v_th_volt", "s_base": "s_base_va", "f_n": "f_n_hz",
             "v_dc": "v_dc_volt", "k_p": "kp_pu", "t_i": "ti_s",
             "k_pll": "k_pll", "t_pll": "t_pll_s", "t_d": "t_d_s",
             "id_ref": "id_ref_pu", "iq_ref": "iq_ref_pu",
             "pll_enabled": "pll_enabled"}
    for field_name, key in pairs.items():
        if key in cfg:
            kw[field_name] = cfg[key]
    if "z_th_pu_re" in cfg or "z_th_pu_im" in cfg:
        kw["z_th"] = complex(cfg.get("z_th_pu_re", 0.02),
                             cfg.get("z_th_pu_im", 0.4))
    if "z_s_pu_re" in cfg or "z_s_pu_im" in cfg:
        kw["z_s"] = complex(cfg.get("z_s_pu_re", 0.002),
                            cfg.get("z_s_pu_im", 0.1))
    try:
        return SystemParams(**kw)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def load_params(path):
    """SystemParams straight from a config file."""
    return params_from_config(load_config(path))


@dataclass(frozen=True)
class OperatingPoint:
    """Steady-state phasors in the measurement (grid source) frame, pu.

    delta is the angle of the PCC voltage relative to the grid source;
    v_mod is the converter modulation voltage in the controller frame.
    residual is the worst re-substitution error of the circuit equations.
    """

    v_pcc: complex
    i_l: complex
    v_mod: complex
    delta: float
    residual: float

    @property
    def v_hat(self):
        return abs(self.v_pcc)


def solve_operating_point(p: SystemParams, pll_enabled=None):
    """Steady state of the averaged circuit with current at set-points.

    With the PLL the converter regulates its current in the frame aligned
    with the PCC voltage, so with Z I* = a + jb the PCC magnitude solves
    (V + a)^2 + b^2 = V_th^2, giving V = -a + sqrt(V_th^2 - b^2); no
    solution exists when |b| >= V_th (the power-transfer limit). Without
    the PLL the controller frame is the grid frame and the phasor solution
    is direct.
    """
    if pll_enabled is None:
        pll_enabled = p.pll_enabled
    iref = p.i_ref
    v_th = 1.0
    if pll_enabled:
        zi = p.z_th * iref
        if abs(zi.imag) >= v_th:
            raise OperatingPointError(
                "set-points exceed the grid power-transfer capability "
                f"(|Im(Z_th I*)| = {abs(zi.imag):.3f} >= 1 pu)")
        v_hat = -zi.real + np.sqrt(v_th**2 - zi.imag**2)
        if v_hat <= 0:
            raise OperatingPointError("PCC voltage collapses for these "
                                      "set-points")
        delta = -np.angle(v_hat + zi)
    else:
        delta = 0.0
    i_l = iref * np.exp(1j * delta)
    v_pcc = v_th - p.z_th * i_l
    v_mod = v_pcc * np.exp(-1j * delta) - p.z_s * iref
    residual = abs(v_pcc - (v_th - p.z_th * i_l))
    if pll_enabled:
        # PLL lock: q component of the PCC voltage in the controller frame
        residual = max(residual, abs((v_pcc * np.exp(-1j * delta)).imag))
    if residual > 1e-9:
        raise OperatingPointError(f"steady-state residual {residual:.2e}")
    return OperatingPoint(v_pcc, i_l, v_mod, float(delta), float(residual))


# ---------------------------------------------------------------------
# complex transfer function -> real 2x2 embedding

def _ab_parts(fun, w):
    """Real-coefficient parts of a complex transfer function at s = jw."""
    s = 1j * np.asarray(w, dtype=float)
    gp = fun(s)
    gm = np.conj(fun(-s))
    return (gp + gm) / 2.0, (gp - gm) / 2.0j


def _embed(fun, w):
    """(n, 2, 2) real-structure matrix [[A, -B], [B, A]] of a complex TF."""
    a, b = _ab_parts(fun, w)
    out = np.empty((len(a), 2, 2), complex)
    out[:, 0, 0] = a
    out[:, 0, 1] = -b
    out[:, 1, 0] = b
    out[:, 1, 1] = a
    return out


def _vec(fun, w):
    """(n, 2) action of a complex TF on the q-axis unit perturbation."""
    a, b = _ab_parts(fun, w)
    return np.stack([a, b], axis=-1)


def _require_fundamental(p, grid):
    if not np.isclose(grid.fundamental, p.w1, rtol=1e-12, atol=0.0):
        raise ValueError(
            f"grid fundamental {grid.fundamental_hz:g} Hz does not match "
            f"the system fundamental {p.f_n:g} Hz")


def grid_impedance_dq(p: SystemParams, grid: FrequencyGrid, per_unit=True):
    """Source (Thevenin RL) impedance matrix [[R+sL, -w1 L], [w1 L, R+sL]].

    The off-diagonal magnitude equals the fundamental-frequency reactance
    at every frequency. Output in pu by default, SI ohms otherwise.
    """
    _require_fundamental(p, grid)
    r, x = p.z_th.real, p.z_th.imag
    l = x / p.w1
    vals = _embed(lambda s: r + l * (s + 1j * p.w1), grid.points)
    if not per_unit:
        vals = vals * p.z_base
    return Tf2x2(grid, vals, "dq", "impedance")


def vsc_impedance_dq(p: SystemParams, op: OperatingPoint,
                     grid: FrequencyGrid, pll_enabled=None, per_unit=True):
    """Converter input impedance matrix on the grid, dq domain.

    Without the PLL the matrix has the real-structure form (Z11 = Z22,
    Z12 = -Z21). With the PLL the q-axis voltage feedback adds a rank-one
    perturbation and the result is rotated into the measurement frame by
    the operating-point angle.
    """
    _require_fundamental(p, grid)
    if op is None:
        raise ValueError("operating point must be solved first")
    if pll_enabled is None:
        pll_enabled = p.pll_enabled
    w1 = p.w1
    rs, xs = p.z_s.real, p.z_s.imag
    ls = xs / w1

    def w_tf(s):
        h_c = p.k_p * (1.0 + 1.0 / (p.t_i * s))
        g_d = 1.0 / (1.0 + p.t_d * s)
        return g_d * h_c

    def z_c(s):
        return rs + ls * (s + 1j * w1) + w_tf(s)

    vals = _embed(z_c, grid.points)
    if pll_enabled:
        v_hat = op.v_hat
        iref = p.i_ref
        v_m0 = v_hat - p.z_s * iref

        def kappa_t(s):
            f_pi = p.k_pll * (1.0 + 1.0 / (p.t_pll * s))
            t_pll = f_pi / (v_hat * (s + f_pi))
            return 1j * (v_m0 - w_tf(s) * iref) * t_pll

        u = _vec(kappa_t, grid.points)
        # (I - u e2^T)^-1 = I + u e2^T / (1 - u_q): rank-one update built
        # from the unperturbed q row
        gain = 1.0 / (1.0 - u[:, 1])
        row_q = vals[:, 1, :].copy()
        vals[:, 0, :] += (u[:, 0] * gain)[:, None] * row_q
        vals[:, 1, :] += (u[:, 1] * gain)[:, None] * row_q
        c, s_ = np.cos(op.delta), np.sin(op.delta)
        rot = np.array([[c, -s_], [s_, c]])
        vals = np.einsum("ab,nbc,cd->nad", rot, vals, rot.T)
    if not per_unit:
        vals = vals * p.z_base
    return Tf2x2(grid, vals, "dq", "impedance")
