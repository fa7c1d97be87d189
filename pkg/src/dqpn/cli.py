"""Command-line reports: analytic sweeps, measured sweeps, stability.

CSV files are the record; every SVG plot is a derived view written next
to a CSV holding exactly the plotted series. Each run leaves one
manifest.json in the output directory. Re-running a command with the
same config reproduces the CSVs byte for byte (the manifest carries a
timestamp and is exempt). Exit codes: 0 success, 1 usage or config
error, 2 numerical failure, 3 verdict withheld on marginal stability.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from ._config import ConfigError, load_config, resolve_case
from .domains import dq_to_pn
from .extraction import CSV_HEADER_EXTRACTION, FREQ_QUANTUM, pipeline
from .freqresp import (
    CSV_HEADER_2X2,
    DomainMismatchError,
    GridMismatchError,
    SingularMatrixError,
    Tf1x1,
    Tf2x2,
    _fmt,
    explicit_grid,
    invert,
    make_grid,
)
from .models_analytic import (
    OperatingPointError,
    grid_impedance_dq,
    params_from_config,
    solve_operating_point,
    vsc_impedance_dq,
)
from .stability import (
    DEFAULT_EPS_THRESHOLD,
    EPS_CSV_HEADER,
    LOCI_CSV_HEADER,
    MinorLoopSet,
    eig_loci_closed_form,
    epsilon_norm,
    nyquist_verdict,
)
from .timesim import DEFAULT_DT, DEFAULT_I_INJ, SettlingError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_MARGINAL = 3

DEFAULT_GRID = "1:2000:240:log"
# Measurement sweeps are simulation-heavy; default to the band the
# analysis actually uses, snapped to the leakage-free quantum.
DEFAULT_EXTRACT_GRID = "10:1000:20:log"
PLOT_BAND = (1.0, 2000.0)
SVG_HASHSALT = "dqpn"

ELEMENT_LABELS = {"dq": ("dd", "dq", "qd", "qq"),
                  "pn": ("pp", "pn", "np", "nn")}
CHANNELS = {"dq": ("d", "q"), "pn": ("p", "n")}
VARIANT_ORDER = ("exact", "semidec", "dec")
VERDICT_HEADER = ("domain", "variant", "n_branch1", "n_branch2", "total",
                  "stable", "marginal", "min_distance", "note")


def _domains(choice: str):
    return ("dq", "pn") if choice == "both" else (choice,)


def _parse_grid(text: str, f_fundamental: float):
    parts = text.split(":")
    kinds = {"log": "logarithmic", "lin": "linear"}
    if len(parts) != 4 or parts[3] not in kinds:
        raise ConfigError(
            f"grid must look like fmin:fmax:n:log|lin, got {text!r}")
    try:
        f_min, f_max, n = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError as e:
        raise ConfigError(f"bad grid {text!r}: {e}") from e
    try:
        return make_grid(f_min, f_max, n, kinds[parts[3]], f_fundamental)
    except ValueError as e:
        raise ConfigError(f"bad grid {text!r}: {e}") from e


def _snap_grid(grid, quantum: float = FREQ_QUANTUM):
    """Round sweep frequencies onto the quantum; merge collisions."""
    f = np.round(grid.f_hz / quantum) * quantum
    f = np.unique(f[f >= quantum])
    if f.size == 0:
        raise ConfigError(
            f"grid has no usable frequencies above {quantum} Hz")
    return explicit_grid(f, grid.fundamental_hz)


def _case_params(cfg):
    """Case tag plus parameters, with the PLL following the case."""
    case = resolve_case(cfg)
    p = params_from_config(cfg)
    if "pll_enabled" not in cfg:
        p = dataclasses.replace(p, pll_enabled=(case == "mfc"))
    return case, p


def _out_dir(args) -> Path:
    if not args.out:
        raise ConfigError("--out is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, args, cfg, grid, outputs):
    doc = {
        "command": command,
        "argv": list(getattr(args, "_argv", sys.argv[1:])),
        "config": cfg,
        "config_path": args.config,
        "grid": None if grid is None else {
            "f_hz": [float(f) for f in grid.f_hz],
            "kind": grid.kind,
            "f_fundamental_hz": float(grid.fundamental_hz),
        },
        "outputs": sorted(outputs),
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    # fixed hash salt keeps SVG clip-path ids stable across runs
    matplotlib.rcParams["svg.hashsalt"] = SVG_HASHSALT
    import matplotlib.pyplot as plt

    return plt


def _save_svg(plt, fig, path: Path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _write_csv(path: Path, header, columns):
    cols = [np.asarray(c) for c in columns]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(len(cols[0])):
            w.writerow([_fmt(c[k]) for c in cols])


def _freq_axes(ax, f):
    ax.set_xscale("log")
    ax.set_xlim(min(PLOT_BAND[0], f[0]), max(PLOT_BAND[1], f[-1]))
    ax.grid(True, which="both", alpha=0.3)


def _bode_report(plt, out: Path, stem: str, series, labels, outputs):
    """Magnitude/angle panels per matrix element, plus the data CSV.

    series is a list of (name, Tf2x2, linestyle); all entries share one
    grid. Log magnitude axes floor exact zeros at 1e-18 (the CSV keeps
    the true values).
    """
    f = series[0][1].grid.f_hz
    header = ["f_hz"]
    columns = [f]
    fig, axes = plt.subplots(2, 4, figsize=(13.0, 5.5), sharex=True,
                             constrained_layout=True)
    for col, (idx, lab) in enumerate(zip(
            ((0, 0), (0, 1), (1, 0), (1, 1)), labels)):
        ax_m, ax_a = axes[0, col], axes[1, col]
        for name, tf, style in series:
            z = tf.values[:, idx[0], idx[1]]
            suffix = f"_{name}" if name else ""
            header += [f"mag_{lab}{suffix}", f"ang_{lab}{suffix}_deg"]
            columns += [np.abs(z), np.degrees(np.angle(z))]
            ax_m.plot(f, np.clip(np.abs(z), 1e-18, None), style,
                      label=name or lab, markersize=3)
            ax_a.plot(f, np.degrees(np.angle(z)), style, markersize=3)
        ax_m.set_yscale("log")
        ax_m.set_title(lab)
        _freq_axes(ax_m, f)
        _freq_axes(ax_a, f)
        ax_a.set_xlabel("f (Hz)")
    axes[0, 0].set_ylabel("|Z| (pu)")
    axes[1, 0].set_ylabel("angle (deg)")
    if len(series) > 1:
        axes[0, 0].legend(fontsize=8)
    fig.suptitle(stem)
    _save_svg(plt, fig, out / f"{stem}.svg")
    _write_csv(out / f"{stem}.csv", header, columns)
    outputs += [f"{stem}.svg", f"{stem}.csv"]


def _loci_report(plt, out: Path, domain: str, loci, outputs):
    """One |lambda| vs frequency figure covering every loop variant."""
    first = next(iter(loci.values()))
    f = first.grid.f_hz
    header = ["f_hz"]
    columns = [f]
    fig, ax = plt.subplots(figsize=(7.0, 4.5), constrained_layout=True)
    styles = {"exact": "-", "semidec": "--", "dec": ":"}
    for variant in VARIANT_ORDER:
        if variant not in loci:
            continue
        lo = loci[variant]
        for bi, branch in enumerate((lo.l1, lo.l2), start=1):
            header.append(f"abs_l{bi}_{variant}")
            columns.append(np.abs(branch))
            ax.plot(f, np.clip(np.abs(branch), 1e-18, None),
                    styles[variant], label=f"|λ{bi}| {variant}")
    ax.axhline(1.0, color="gray", lw=0.8, ls=":")
    ax.set_yscale("log")
    _freq_axes(ax, f)
    ax.set_xlabel("f (Hz)")
    ax.set_ylabel("|λ|")
    ax.set_title(f"eigenvalue loci, {domain}")
    ax.legend(fontsize=8)
    stem = f"loci_{domain}"
    _save_svg(plt, fig, out / f"{stem}.svg")
    _write_csv(out / f"{stem}.csv", header, columns)
    outputs += [f"{stem}.svg", f"{stem}.csv"]


def _eps_report(plt, out: Path, domain: str, eps, outputs):
    f = eps.grid.f_hz
    fig, ax = plt.subplots(figsize=(7.0, 4.5), constrained_layout=True)
    ax.plot(f, np.clip(np.abs(eps.eps), 1e-18, None), "-", label="|ε|")
    ax.axhline(eps.threshold, color="red", lw=0.8, ls="--",
               label=f"threshold {eps.threshold:g}")
    ax.set_yscale("log")
    _freq_axes(ax, f)
    ax.set_xlabel("f (Hz)")
    ax.set_ylabel("|ε|")
    ax.set_title(f"decoupling residual, {domain}")
    ax.legend(fontsize=8)
    stem = f"eps_profile_{domain}"
    _save_svg(plt, fig, out / f"{stem}.svg")
    _write_csv(out / f"{stem}.csv", ("f_hz", "abs_eps"),
               (f, np.abs(eps.eps)))
    outputs += [f"{stem}.svg", f"{stem}.csv"]


def _nyquist_report(plt, out: Path, domain: str, exact_loci, outputs):
    f = exact_loci.grid.f_hz
    fig, ax = plt.subplots(figsize=(5.5, 5.5), constrained_layout=True)
    for bi, branch in enumerate((exact_loci.l1, exact_loci.l2), start=1):
        line, = ax.plot(branch.real, branch.imag, "-", label=f"λ{bi}")
        # conjugate half completes the closed evaluation contour
        ax.plot(branch.real, -branch.imag, ":", color=line.get_color())
    ax.plot([-1.0], [0.0], "rx", markersize=8)
    ax.axhline(0.0, color="gray", lw=0.5)
    ax.axvline(0.0, color="gray", lw=0.5)
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("Re λ")
    ax.set_ylabel("Im λ")
    ax.set_title(f"characteristic loci, {domain}")
    ax.legend(fontsize=8)
    stem = f"nyquist_{domain}"
    _save_svg(plt, fig, out / f"{stem}.svg")
    _write_csv(out / f"{stem}.csv",
               ("f_hz", "re_l1", "im_l1", "re_l2", "im_l2"),
               (f, exact_loci.l1.real, exact_loci.l1.imag,
                exact_loci.l2.real, exact_loci.l2.imag))
    outputs += [f"{stem}.svg", f"{stem}.csv"]


def _write_stability_outputs(plt, out: Path, domain: str, loci, eps,
                             verdicts, outputs):
    for variant in VARIANT_ORDER:
        if variant in loci:
            name = f"loci_{domain}_{variant}.csv"
            loci[variant].to_csv(out / name)
            outputs.append(name)
    name = f"eps_{domain}.csv"
    eps.to_csv(out / name)
    outputs.append(name)
    _loci_report(plt, out, domain, loci, outputs)
    _eps_report(plt, out, domain, eps, outputs)
    _nyquist_report(plt, out, domain, loci["exact"], outputs)


def _verdict_rows(domain: str, verdicts):
    rows = []
    for variant in VARIANT_ORDER:
        if variant not in verdicts:
            continue
        v = verdicts[variant]
        stable = "" if v.stable is None else str(v.stable).lower()
        rows.append([domain, variant, str(v.encirclements[0]),
                     str(v.encirclements[1]), str(v.total), stable,
                     str(v.marginal).lower(), _fmt(v.min_distance),
                     v.assumption])
    return rows


def _write_verdicts(out: Path, rows, outputs):
    with open(out / "verdicts.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(VERDICT_HEADER)
        w.writerows(rows)
    outputs.append("verdicts.csv")


def _marginal_exit(verdicts_by_domain):
    withheld = any(v["exact"].marginal for v in verdicts_by_domain.values()
                   if "exact" in v)
    return EXIT_MARGINAL if withheld else EXIT_OK


def _analytic_pair(p, grid, domain):
    """Source and converter impedance matrices in the asked domain."""
    op = solve_operating_point(p)
    zs = grid_impedance_dq(p, grid)
    zl = vsc_impedance_dq(p, op, grid)
    if domain == "pn":
        zs, zl = dq_to_pn(zs), dq_to_pn(zl)
    return zs, zl


def _diag_channels(tf: Tf2x2, names, side: str):
    return (Tf1x1(tf.grid, tf.values[:, 0, 0], f"{names[0]}_{side}"),
            Tf1x1(tf.grid, tf.values[:, 1, 1], f"{names[1]}_{side}"))


def _diag_admittances(tf: Tf2x2, names):
    out = []
    for ci in (0, 1):
        z = tf.values[:, ci, ci]
        if np.any(np.abs(z) == 0.0):
            raise SingularMatrixError(
                f"decoupled channel {names[ci]} impedance hits zero")
        out.append(Tf1x1(tf.grid, 1.0 / z, f"{names[ci]}_load_adm"))
    return tuple(out)


def cmd_analytic(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    case, p = _case_params(cfg)
    grid = _parse_grid(args.grid or DEFAULT_GRID, p.f_n)
    plt = _plt()
    out = _out_dir(args)
    outputs = []
    for d in _domains(args.domain):
        zs, zl = _analytic_pair(p, grid, d)
        labels = ELEMENT_LABELS[d]
        for name, tf in ((f"zs_{d}", zs), (f"zl_{d}", zl)):
            tf.to_csv(out / f"{name}.csv")
            outputs.append(f"{name}.csv")
            _bode_report(plt, out, f"bode_{name}", [("", tf, "-")],
                         labels, outputs)
    _write_manifest(out, "analytic", args, cfg, grid, outputs)
    print(f"analytic case={case} n={len(grid)} -> {out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    case, p = _case_params(cfg)
    if args.model == "matrix" and "inj_kind" in cfg:
        raise ConfigError(
            f"config pins inj_kind={cfg['inj_kind']!r} but the matrix "
            "model needs two independent injections per domain (dq1 and "
            "dq2, or pn1 and pn2); drop inj_kind or use --model dec")
    asked = _parse_grid(args.grid or DEFAULT_EXTRACT_GRID, p.f_n)
    grid = _snap_grid(asked)
    if len(grid) != len(asked) or not np.allclose(grid.f_hz, asked.f_hz):
        print(f"note: grid snapped to {FREQ_QUANTUM} Hz multiples "
              f"({len(asked)} -> {len(grid)} points)")
    domains = _domains(args.domain)
    models = ("matrix", "dec") if args.model == "matrix" else ("dec",)
    res = pipeline(p, case, grid, domains=domains, models=models,
                   i_inj=cfg.get("i_inj_pu", DEFAULT_I_INJ),
                   dt=cfg.get("dt_s", DEFAULT_DT),
                   threads=args.threads)
    plt = _plt()
    out = _out_dir(args)
    outputs = []
    verdicts_by_domain = {}
    all_rows = []
    for d in domains:
        r = res.results[d]
        labels = ELEMENT_LABELS[d]
        for key in sorted(r.decoupled):
            name = f"dec_{d}_{key}.csv"
            r.decoupled[key].to_csv(out / name)
            outputs.append(name)
        if r.z_source is None:
            continue
        r.to_csv(out / f"extracted_zs_{d}.csv", which="source")
        r.to_csv(out / f"extracted_zl_{d}.csv", which="load")
        outputs += [f"extracted_zs_{d}.csv", f"extracted_zl_{d}.csv"]
        zs_ref, zl_ref = _analytic_pair(p, r.z_source.grid, d)
        _bode_report(plt, out, f"overlay_zs_{d}",
                     [("extracted", r.z_source, "."),
                      ("analytic", zs_ref, "-")], labels, outputs)
        _bode_report(plt, out, f"overlay_zl_{d}",
                     [("extracted", r.z_load, "."),
                      ("analytic", zl_ref, "-")], labels, outputs)
        if d in res.loci:
            _write_stability_outputs(plt, out, d, res.loci[d], res.eps[d],
                                     res.verdicts[d], outputs)
            verdicts_by_domain[d] = res.verdicts[d]
            all_rows += _verdict_rows(d, res.verdicts[d])
    if all_rows:
        _write_verdicts(out, all_rows, outputs)
    _write_manifest(out, "extract", args, cfg, grid, outputs)
    print(f"extract case={case} model={args.model} n={len(grid)} -> {out}")
    return _marginal_exit(verdicts_by_domain)


def _read_matrix_csv(path: Path, domain: str):
    """Impedance matrix CSV, with or without the trailing cond column."""
    if not path.is_file():
        raise ConfigError(f"missing extracted model file: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = tuple(rows[0])
    if header == CSV_HEADER_2X2:
        return Tf2x2.from_csv(path, domain, "impedance")
    if header != CSV_HEADER_EXTRACTION:
        raise ConfigError(f"{path}: unrecognized impedance CSV header")
    body = np.array([[float(x) for x in row] for row in rows[1:]])
    vals = np.empty((len(body), 2, 2), dtype=complex)
    vals[:, 0, 0] = body[:, 1] + 1j * body[:, 2]
    vals[:, 0, 1] = body[:, 3] + 1j * body[:, 4]
    vals[:, 1, 0] = body[:, 5] + 1j * body[:, 6]
    vals[:, 1, 1] = body[:, 7] + 1j * body[:, 8]
    return Tf2x2(explicit_grid(body[:, 0]), vals, domain, "impedance")


def _extracted_loop_set(src: Path, domain: str):
    zs = _read_matrix_csv(src / f"extracted_zs_{domain}.csv", domain)
    zl = _read_matrix_csv(src / f"extracted_zl_{domain}.csv", domain)
    zs_diag = yl_diag = None
    names = CHANNELS[domain]
    paths = {(c, side): src / f"dec_{domain}_{c}_{side}.csv"
             for c in names for side in ("source", "load")}
    if all(p.is_file() for p in paths.values()):
        scalars = {k: Tf1x1.from_csv(p, label=f"{k[0]}_{k[1]}")
                   for k, p in paths.items()}
        zs_diag = tuple(scalars[(c, "source")] for c in names)
        yl_diag = []
        for c in names:
            z = scalars[(c, "load")]
            yl_diag.append(Tf1x1(z.grid, 1.0 / z.values, f"{c}_load_adm"))
        yl_diag = tuple(yl_diag)
    return MinorLoopSet.from_matrices(zs, invert(zl), zs_diag, yl_diag), zs.grid


def cmd_stability(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    case, p = _case_params(cfg)
    domains = _domains(args.domain)
    plt = _plt()
    out = _out_dir(args)
    outputs = []
    verdicts_by_domain = {}
    all_rows = []
    manifest_grid = None
    for d in domains:
        if args.source == "extracted":
            if not args.extracted_dir:
                raise ConfigError(
                    "--source extracted needs --extracted-dir")
            loop_set, grid = _extracted_loop_set(Path(args.extracted_dir), d)
        else:
            grid = _parse_grid(args.grid or DEFAULT_GRID, p.f_n)
            zs, zl = _analytic_pair(p, grid, d)
            names = CHANNELS[d]
            loop_set = MinorLoopSet.from_matrices(
                zs, invert(zl),
                _diag_channels(zs, names, "source"),
                _diag_admittances(zl, names))
        if manifest_grid is None:
            manifest_grid = grid
        loci = {"exact": eig_loci_closed_form(loop_set.exact),
                "semidec": eig_loci_closed_form(loop_set.semidec)}
        if loop_set.dec is not None:
            loci["dec"] = eig_loci_closed_form(loop_set.dec)
        eps = epsilon_norm(loop_set.exact, DEFAULT_EPS_THRESHOLD)
        verdicts = {v: nyquist_verdict(l) for v, l in loci.items()}
        _write_stability_outputs(plt, out, d, loci, eps, verdicts, outputs)
        verdicts_by_domain[d] = verdicts
        all_rows += _verdict_rows(d, verdicts)
    _write_verdicts(out, all_rows, outputs)
    _write_manifest(out, "stability", args, cfg, manifest_grid, outputs)
    code = _marginal_exit(verdicts_by_domain)
    summary = "verdict withheld (marginal)" if code else "done"
    print(f"stability case={case} source={args.source} {summary} -> {out}")
    return code


def _load_manifest(path: Path):
    mf = path / "manifest.json"
    if not mf.is_file():
        raise ConfigError(f"{path} has no manifest.json")
    with open(mf) as fh:
        return json.load(fh)


def _read_table(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return tuple(rows[0]), rows[1:]


def _rel_diff(a: np.ndarray, b: np.ndarray):
    scale = np.maximum(np.abs(a), np.abs(b))
    out = np.zeros(len(a))
    nz = scale > 0
    out[nz] = np.abs(a - b)[nz] / scale[nz]
    return out


def cmd_compare(args) -> int:
    dir_a, dir_b = Path(args.dir_a), Path(args.dir_b)
    man_a, man_b = _load_manifest(dir_a), _load_manifest(dir_b)
    ga, gb = man_a.get("grid"), man_b.get("grid")
    if ga is None or gb is None or ga["f_hz"] != gb["f_hz"]:
        print("compare: manifests carry different grids", file=sys.stderr)
        return EXIT_USAGE

    common = sorted(
        name for name in (q.name for q in dir_a.glob("*.csv"))
        if (name.startswith("loci_") or name.startswith("eps_"))
        and (dir_b / name).is_file())
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    summary = []
    outputs = []
    for name in common:
        head_a, rows_a = _read_table(dir_a / name)
        head_b, rows_b = _read_table(dir_b / name)
        if head_a != head_b or len(rows_a) != len(rows_b):
            continue
        # the residual table ends in a 0/1 flag column; diff the values
        ncols = 4 if head_a == EPS_CSV_HEADER else len(head_a)
        a = np.array([[float(x) for x in r[:ncols]] for r in rows_a])
        b = np.array([[float(x) for x in r[:ncols]] for r in rows_b])
        f_a, f_b = a[:, 0], b[:, 0]
        if not np.array_equal(f_a, f_b):
            print(f"compare: frequency mismatch in {name}", file=sys.stderr)
            return EXIT_USAGE
        if head_a == LOCI_CSV_HEADER:
            da = _rel_diff(a[:, 1] + 1j * a[:, 2], b[:, 1] + 1j * b[:, 2])
            db = _rel_diff(a[:, 3] + 1j * a[:, 4], b[:, 3] + 1j * b[:, 4])
            diffs = {"rel_l1": da, "rel_l2": db}
        elif head_a == EPS_CSV_HEADER:
            diffs = {"rel_eps": _rel_diff(a[:, 1] + 1j * a[:, 2],
                                          b[:, 1] + 1j * b[:, 2])}
        else:
            # plot-series files: columnwise real comparison
            diffs = {f"rel_{h}": _rel_diff(a[:, k], b[:, k])
                     for k, h in enumerate(head_a) if k > 0}
        worst = max(float(d.max()) for d in diffs.values())
        mean = float(np.mean([d.mean() for d in diffs.values()]))
        summary.append((name, worst, mean))
        if out:
            diff_name = f"diff_{name}"
            _write_csv(out / diff_name,
                       ["f_hz"] + list(diffs),
                       [f_a] + list(diffs.values()))
            outputs.append(diff_name)
    if not summary:
        print("compare: no common loci/eps tables found", file=sys.stderr)
        return EXIT_USAGE
    width = max(len(s[0]) for s in summary)
    print(f"{'file':<{width}}  {'max_rel':>12}  {'mean_rel':>12}")
    for name, worst, mean in summary:
        print(f"{name:<{width}}  {worst:>12.4e}  {mean:>12.4e}")
    if out:
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("file", "max_rel", "mean_rel"))
            for name, worst, mean in summary:
                w.writerow([name, _fmt(worst), _fmt(mean)])
        outputs.append("summary.csv")
        _write_manifest(out, "compare", args, None, None, outputs)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    # usage errors exit with 1 rather than argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="YAML config file (defaults apply when absent)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--domain", choices=("dq", "pn", "both"),
                        default="both")
    common.add_argument("--grid", metavar="FMIN:FMAX:N:log|lin",
                        help=f"sweep grid in Hz (default {DEFAULT_GRID}; "
                             f"extract: {DEFAULT_EXTRACT_GRID}, snapped to "
                             f"{FREQ_QUANTUM} Hz multiples)")
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads for simulation sweeps")

    p = _Parser(prog="dqpn",
                description="Impedance models, measurement sweeps and "
                            "stability verdicts for a grid-connected "
                            "converter bench.")
    p.add_argument("--version", action="version",
                   version=f"dqpn {__version__}")
    sub = p.add_subparsers(dest="command", required=True,
                           parser_class=_Parser)

    pa = sub.add_parser("analytic", parents=[common],
                        help="closed-form impedance sweep with Bode plots")
    pa.set_defaults(func=cmd_analytic)

    pe = sub.add_parser("extract", parents=[common],
                        help="simulate injections and fit impedance models")
    pe.add_argument("--model", choices=("matrix", "dec"), default="matrix",
                    help="full 2x2 solve or per-channel ratios")
    pe.set_defaults(func=cmd_extract)

    ps = sub.add_parser("stability", parents=[common],
                        help="minor-loop loci, residuals and verdicts")
    ps.add_argument("--source", choices=("analytic", "extracted"),
                    default="analytic")
    ps.add_argument("--extracted-dir", metavar="DIR",
                    help="directory written by `dqpn extract`")
    ps.set_defaults(func=cmd_stability)

    pc = sub.add_parser("compare", parents=[common],
                        help="per-frequency diff of two result directories")
    pc.add_argument("dir_a")
    pc.add_argument("dir_b")
    pc.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args._argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"dqpn: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SingularMatrixError, OperatingPointError, SettlingError,
            ArithmeticError, np.linalg.LinAlgError) as e:
        print(f"dqpn: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (GridMismatchError, DomainMismatchError, ValueError) as e:
        print(f"dqpn: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
