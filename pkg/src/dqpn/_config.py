"""Config file loading shared by the model, simulation and CLI layers.

The config is a flat YAML mapping. System keys (all optional, defaults are
the built-in case-study values):

    v_th_volt, s_base_va, f_n_hz, v_dc_volt,
    z_th_pu_re, z_th_pu_im, z_s_pu_re, z_s_pu_im,
    kp_pu, ti_s, k_pll, t_pll_s, t_d_s,
    id_ref_pu, iq_ref_pu, pll_enabled

Simulation keys (optional): case, dt_s, t_end_s, inj_kind, f_inj_hz,
i_inj_pu. Unknown keys are rejected by name.
"""

from __future__ import annotations

import yaml


class ConfigError(ValueError):
    """Bad config file: parse failure, unknown key or invalid value."""


PARAM_KEYS = (
    "v_th_volt", "s_base_va", "f_n_hz", "v_dc_volt",
    "z_th_pu_re", "z_th_pu_im", "z_s_pu_re", "z_s_pu_im",
    "kp_pu", "ti_s", "k_pll", "t_pll_s", "t_d_s",
    "id_ref_pu", "iq_ref_pu", "pll_enabled",
)

SIM_KEYS = ("case", "dt_s", "t_end_s", "inj_kind", "f_inj_hz", "i_inj_pu")

ALL_KEYS = PARAM_KEYS + SIM_KEYS

_BOOL_KEYS = ("pll_enabled",)
_STR_KEYS = ("case", "inj_kind")


def load_config(path):
    """Parse and validate a config file into a plain dict."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as e:
        # the yaml error already carries line/column diagnostics
        raise ConfigError(f"{path}: {e}") from e
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a key/value mapping")
    cfg = {}
    for key, val in raw.items():
        if key not in ALL_KEYS:
            raise ConfigError(f"{path}: unknown config key: {key!r}")
        if key in _BOOL_KEYS:
            if not isinstance(val, bool):
                raise ConfigError(f"{path}: key {key!r} must be a boolean")
            cfg[key] = val
        elif key in _STR_KEYS:
            if not isinstance(val, str):
                raise ConfigError(f"{path}: key {key!r} must be a string")
            cfg[key] = val
        else:
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{path}: key {key!r} must be a number")
            cfg[key] = float(val)
    return cfg


def resolve_case(cfg):
    """Simulation case from the config, consistent with pll_enabled.

    Absent 'case' defaults to "mfc" when the PLL is enabled (the default)
    and "mfd" otherwise. An explicitly contradictory pair is an error.
    """
    pll = cfg.get("pll_enabled", True)
    case = cfg.get("case")
    if case is None:
        return "mfc" if pll else "mfd"
    case = case.lower()
    if case not in ("mfd", "mfc"):
        raise ConfigError(f"case must be 'mfd' or 'mfc', got {case!r}")
    if "pll_enabled" in cfg and (case == "mfc") != pll:
        raise ConfigError(
            f"case={case!r} contradicts pll_enabled={pll}")
    return case
