"""Closed-form source/converter models and the operating-point solve.

The numeric reference values in this file were frozen from an
independent prototype implementation of the same circuit equations and
are used as regression anchors.
"""

import numpy as np
import pytest

from dqpn._config import ConfigError
from dqpn.domains import dq_to_pn, mfd_classify
from dqpn.freqresp import explicit_grid, invert, make_grid
from dqpn.models_analytic import (
    OperatingPointError,
    default_params,
    grid_impedance_dq,
    load_params,
    params_from_config,
    solve_operating_point,
    vsc_impedance_dq,
)

# operating points for the case parameter set (PLL on), by d-axis set-point
OP_TABLE = {
    0.25: (0.98998743710662, -0.1001674211615598),
    0.4: (0.9791170143402453, -0.16069065295191065),
    1.0: (0.896515138991168, -0.41151684606748806),
}

# converter input impedance, PLL on, id_ref = 1.0, pu
ZL1_TABLE = {
    10.0: [[0.27510363940778987 - 1.0404746390055588j,
            0.18739332537302036 + 1.2238203067088254j],
           [0.01465136998790917 + 1.2164097314998725j,
            0.4864788950564566 + 1.0848770227343998j]],
    112.5: [[0.23379337548054258 + 0.04191629397606989j,
             -0.09742029448703246 - 0.0057066791437268j],
            [0.1037316040365781 - 0.00990365016886586j,
             0.2369377230190318 + 0.03929228447209503j]],
    1000.0: [[0.09632661694947921 + 1.8692975532433875j,
              -0.09242265537952701 + 7.2605712850770665e-04j],
             [0.10571961383628808 - 2.4778596302899025e-05j,
              0.10575404281993674 + 1.8712633206881968j]],
}

# diagonal of the PLL-off impedance at the same frequencies
ZL0_DIAG = {
    10.0: 0.2365629593021526 - 1.6063280246163243j,
    112.5: 0.23200316842618873 + 0.04818358637299411j,
    1000.0: 0.09296066897900494 + 1.8694616480326047j,
}


class TestOperatingPoint:
    @pytest.mark.parametrize("id_ref", sorted(OP_TABLE))
    def test_frozen_values(self, id_ref):
        p = default_params(id_ref=id_ref)
        op = solve_operating_point(p)
        v_hat, delta = OP_TABLE[id_ref]
        assert op.v_hat == pytest.approx(v_hat, rel=1e-12)
        assert op.delta == pytest.approx(delta, rel=1e-12)

    def test_kirchhoff_consistency(self):
        # V_th = V_pcc + Z_th * I with I flowing into the converter and
        # the PCC voltage purely d-axis in the locked frame
        p = default_params(id_ref=0.7, iq_ref=-0.2)
        op = solve_operating_point(p)
        v_pcc = op.v_hat * np.exp(1j * op.delta)
        i = p.i_ref * np.exp(1j * op.delta)
        assert abs(v_pcc + p.z_th * i - 1.0) < 1e-12

    def test_infeasible_setpoint(self):
        with pytest.raises(OperatingPointError):
            solve_operating_point(default_params(id_ref=3.0))

    def test_no_load_op(self):
        op = solve_operating_point(default_params(id_ref=0.0))
        assert op.v_hat == pytest.approx(1.0)
        assert op.delta == pytest.approx(0.0)


class TestGridImpedance:
    def test_rl_law(self, p_mfc):
        g = make_grid(10.0, 1000.0, 20)
        zs = grid_impedance_dq(p_mfc, g)
        r, x = p_mfc.z_th.real, p_mfc.z_th.imag
        f = g.f_hz
        assert np.allclose(zs.entry(0, 0), r + 1j * x * f / 50.0, rtol=1e-14)
        assert np.allclose(zs.entry(1, 1), zs.entry(0, 0))
        # cross coupling is the fundamental-frequency reactance at every f
        assert np.allclose(zs.entry(0, 1), -x)
        assert np.allclose(zs.entry(1, 0), x)

    def test_si_units_scale_by_z_base(self, p_mfc):
        g = explicit_grid([50.0])
        pu = grid_impedance_dq(p_mfc, g).values
        si = grid_impedance_dq(p_mfc, g, per_unit=False).values
        assert np.allclose(si, pu * p_mfc.z_base)

    def test_fundamental_must_match(self, p_mfc):
        g = make_grid(10.0, 100.0, 4, f_fundamental=60.0)
        with pytest.raises(ValueError):
            grid_impedance_dq(p_mfc, g)


class TestConverterImpedance:
    @pytest.fixture
    def z_pair(self):
        g = explicit_grid(sorted(ZL1_TABLE))
        p1 = default_params()
        z1 = vsc_impedance_dq(p1, solve_operating_point(p1), g)
        p0 = default_params(pll_enabled=False)
        z0 = vsc_impedance_dq(p0, solve_operating_point(p0), g)
        return g, z0, z1

    def test_frozen_pll_on(self, z_pair):
        _, _, z1 = z_pair
        for k, f in enumerate(sorted(ZL1_TABLE)):
            assert np.allclose(z1.values[k], np.array(ZL1_TABLE[f]),
                               rtol=1e-9, atol=1e-12)

    def test_frozen_pll_off(self, z_pair):
        _, z0, _ = z_pair
        xs = default_params().z_s.imag
        for k, f in enumerate(sorted(ZL0_DIAG)):
            assert z0.values[k, 0, 0] == pytest.approx(ZL0_DIAG[f], rel=1e-9)
        assert np.allclose(z0.entry(0, 0), z0.entry(1, 1))
        assert np.allclose(z0.entry(0, 1), -xs)
        assert np.allclose(z0.entry(1, 0), xs)

    def test_pll_off_is_mirror_decoupled(self, p_mfd):
        g = make_grid(10.0, 1000.0, 25)
        z = vsc_impedance_dq(p_mfd, solve_operating_point(p_mfd), g)
        zp = dq_to_pn(z)
        off = np.maximum(np.abs(zp.entry(0, 1)), np.abs(zp.entry(1, 0)))
        diag = np.abs(zp.entry(0, 0))
        assert np.max(off / diag) < 1e-14
        assert mfd_classify(zp).all_mfd

    def test_pll_couples_mirror_frequencies(self, p_mfc):
        g = make_grid(10.0, 1000.0, 25)
        z = vsc_impedance_dq(p_mfc, solve_operating_point(p_mfc), g)
        rep = mfd_classify(dq_to_pn(z))
        assert not rep.all_mfd

    def test_pll_admittance_first_column_invariant(self):
        # the phase loop feeds only on the q-axis voltage, so the
        # admittance column driven by v_d cannot change when it engages
        g = make_grid(5.0, 500.0, 15)
        p1 = default_params()
        op = solve_operating_point(p1)
        y0 = invert(vsc_impedance_dq(p1, op, g, pll_enabled=False))
        z1_meas = vsc_impedance_dq(p1, op, g, pll_enabled=True)
        # undo the measurement-frame rotation to compare in the PLL frame
        c, s = np.cos(op.delta), np.sin(op.delta)
        rot = np.array([[c, -s], [s, c]])
        y1 = np.einsum("ab,nbc,cd->nad", rot.T, invert(z1_meas).values, rot)
        col0 = y0.values[:, :, 0] - y1[:, :, 0]
        assert np.max(np.abs(col0)) < 1e-14

    def test_pll_raises_low_frequency_coupling(self):
        g = explicit_grid([5.0, 10.0, 20.0])
        p = default_params()
        op = solve_operating_point(p)
        z0 = vsc_impedance_dq(p, op, g, pll_enabled=False)
        z1 = vsc_impedance_dq(p, op, g, pll_enabled=True)
        assert np.all(np.abs(z1.entry(0, 1)) > np.abs(z0.entry(0, 1)))

    def test_requires_operating_point(self, p_mfc):
        g = explicit_grid([10.0])
        with pytest.raises(ValueError):
            vsc_impedance_dq(p_mfc, None, g)


class TestConfig:
    def test_param_mapping(self):
        p = params_from_config({"z_th_pu_re": 0.05, "z_th_pu_im": 0.5,
                                "id_ref_pu": 0.3, "pll_enabled": False})
        assert p.z_th == 0.05 + 0.5j
        assert p.id_ref == 0.3
        assert not p.pll_enabled
        assert p.z_s == 0.002 + 0.1j

    def test_bad_value_becomes_config_error(self):
        with pytest.raises(ConfigError):
            params_from_config({"ti_s": -1.0})

    def test_load_params_file(self, tmp_path):
        cfg = tmp_path / "c.yml"
        cfg.write_text("id_ref_pu: 0.25\nkp_pu: 0.3\n")
        p = load_params(cfg)
        assert p.id_ref == 0.25
        assert p.k_p == 0.3

    def test_unknown_key_named(self, tmp_path):
        cfg = tmp_path / "c.yml"
        cfg.write_text("frobnicate: 1\n")
        with pytest.raises(ConfigError, match="frobnicate"):
            load_params(cfg)

    def test_default_params_overrides(self):
        p = default_params(id_ref=0.4, z_th=complex(0.06, 1.2))
        assert p.id_ref == 0.4
        assert p.z_th == 0.06 + 1.2j
