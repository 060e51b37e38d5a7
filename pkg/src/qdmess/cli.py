"""Batch front end.

Subcommands ``decompose``, ``propagate``, ``compare``, ``scan-modes`` and
``verify-mpo`` read one YAML configuration and write CSV tables, JSON
sidecars and PNG figures into ``--out``.

Exit codes: 0 success, 1 numerical failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .bath import BathSpec, QuadratureError, correlation_quadrature
from .config import ConfigError, RunConfig, _num, load_config
from .fpheom import Truncation, dense_generator
from .fpheom import propagate as fp_propagate
from .integrate import IntegrationError, TrajectoryRecord
from .modefit import (FitError, FrequencyWindow, Mode, ModeSet, decompose, log_regression, mode_count_scan,
                      reconstruct_C, sample_grid)
from .mpo import BudgetError, build_mpo, check_site_commutation, load_chain, save_chain, verify_mpo
from .representations import (RepresentationError, alt_lindblad_model, conventional_heom_propagate,
                              conventional_redfield_propagate, lindblad_model, propagate_boson_model,
                              redfield_plus_propagate)
from .stochastic import (EnsembleConfig, HOPSNoise, NoiseRealization, SLNNoise, _grid, hops_ensemble,
                         sln_ensemble, trajectory_rng)

EXIT_OK, EXIT_NUMERIC, EXIT_CONFIG = 0, 1, 2
MPO_TOLERANCE = 1e-10


class NumericalFailure(RuntimeError):
    """Raised by a subcommand when a check fails after a complete run."""


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path: str, header: List[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_json(path: str, obj: dict) -> None:
    def conv(o):
        if isinstance(o, dict):
            return {str(k): conv(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [conv(v) for v in o]
        if isinstance(o, (np.floating, float)):
            f = float(o)
            return f if math.isfinite(f) else str(f)
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.bool_):
            return bool(o)
        return o

    with open(path, "w") as fh:
        json.dump(conv(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------------
# shared pieces


def _modes_from_config(cfg: RunConfig, method: Optional[dict] = None) -> ModeSet:
    """Inline modes, a modes file, or a fresh fit, in that order."""
    method = method if method is not None else cfg.section("method", required=False)
    inline = method.get("modes")
    if inline is not None:
        if inline in ("empty", "none", []):
            return ModeSet(())
        try:
            return ModeSet(tuple(Mode(complex(float(m[0]), float(m[1])), float(m[2]), float(m[3])) for m in inline))
        except (TypeError, ValueError, IndexError):
            raise ConfigError("method.modes: rows must be [re_d, im_d, gamma, omega] with gamma > 0") from None
    path = method.get("modes_file") and cfg.path(method["modes_file"]) or cfg.modes_file()
    if path:
        try:
            ms = ModeSet.load(path)
        except OSError as exc:
            raise ConfigError(f"method.modes_file: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"method.modes_file: malformed mode file ({exc})") from None
    else:
        eps, omega_D, delta, ppd, K_max = cfg.fit_params()
        source = cfg.bath()
        ms = decompose(source, FrequencyWindow(eps[0], omega_D, ppd), delta, K_max, c0=_anchor(cfg, source))
    scale = _num(method, "coupling_scale", "method")
    return ms.scaled(scale) if scale is not None else ms


def _anchor(cfg: RunConfig, source) -> Optional[float]:
    """``C(0)`` for the optional sum-rule constraint (``fit.anchor: true``)."""
    flag = cfg.section("fit", required=False).get("anchor", False)
    if not isinstance(flag, bool):
        raise ConfigError(f"fit.anchor: expected true or false, got {flag!r}")
    if not flag:
        return None
    c = source.correlation(np.array([0.0]))[0] if not isinstance(source, BathSpec) else correlation_quadrature(source, 0.0)
    return float(np.real(c))


def _ensemble_config(m: dict, args, t_final: float) -> EnsembleConfig:
    seed = m.get("seed", args.seed if args.seed is not None else 0)
    threads = m.get("threads", args.threads if args.threads is not None else 1)
    try:
        return EnsembleConfig(n_traj=int(m.get("n_traj", 1000)), seed=int(seed), t_final=t_final,
                              n_samples=int(m.get("n_samples", 101)), dt=_num(m, "dt", "method"),
                              chunk=int(m.get("chunk", 500)), threads=int(threads))
    except (TypeError, ValueError):
        raise ConfigError("method: n_traj, seed, n_samples, chunk and threads must be integers") from None


def run_method(cfg: RunConfig, m: dict, args, system=None, modes=None) -> TrajectoryRecord:
    """Run one propagator described by a method mapping."""
    name = cfg.method_name(m)
    system = system or cfg.system()
    modes = modes if modes is not None else _modes_from_config(cfg, m)
    t_final = cfg.t_final(m)
    integ = cfg.integrator(m)
    meta = {"method": name, "K": modes.K}
    if name == "fp-heom":
        trunc = cfg.truncation(m)
        rec, _ = fp_propagate(system, system, modes, t_final, integ, trunc)
        meta.update(L=trunc.L)
        if m.get("certify"):
            # re-run one tier deeper and report how much the observables move
            deeper, _ = fp_propagate(system, system, modes, t_final, integ, Truncation(trunc.L + 1, trunc.caps))
            meta["truncation_delta"] = max((float(np.max(np.abs(rec.observables[k] - deeper.observables[k])))
                                            for k in rec.observables), default=0.0)
    elif name in ("lindblad", "alt-lindblad"):
        caps = m.get("caps", 4)
        caps = tuple(int(c) for c in caps) if isinstance(caps, list) else int(caps)
        build = lindblad_model if name == "lindblad" else alt_lindblad_model
        rec = propagate_boson_model(build(system, modes, caps), system, t_final, integ, integ.dt)
        meta.update(caps=caps)
        if m.get("certify"):
            bigger = tuple(c + 1 for c in caps) if isinstance(caps, tuple) else caps + 1
            r2 = propagate_boson_model(build(system, modes, bigger), system, t_final, integ, integ.dt)
            meta["truncation_delta"] = max((float(np.max(np.abs(rec.observables[k] - r2.observables[k])))
                                            for k in rec.observables), default=0.0)
    elif name == "conventional-heom":
        trunc = cfg.truncation(m)
        rec = conventional_heom_propagate(system, modes, trunc, t_final, integ)
        meta.update(L=trunc.L)
    elif name == "redfield-plus":
        variant = m.get("variant", "tier1")
        if variant not in ("tier1", "history-integral"):
            raise ConfigError(f"method.variant: expected tier1 or history-integral, got {variant!r}")
        rec = redfield_plus_propagate(system, modes, t_final, variant, integ)
        meta.update(variant=variant)
    elif name == "redfield":
        rec = conventional_redfield_propagate(system, modes, t_final, integ)
    else:
        ens = _ensemble_config(m, args, t_final)
        meta.update(n_traj=ens.n_traj, seed=ens.seed)
        if name == "sln":
            rec = sln_ensemble(system, modes, ens)
        else:
            conv = m.get("convention", "conjugate")
            if conv not in ("conjugate", "direct"):
                raise ConfigError(f"method.convention: expected conjugate or direct, got {conv!r}")
            rec = hops_ensemble(system, modes, cfg.truncation(m), ens, conv)
            meta.update(convention=conv)
    rec.meta = {**rec.meta, **meta}
    return rec


def _dump_noise(cfg: RunConfig, m: dict, args, system, modes, out: str) -> Optional[str]:
    """Noise path seen by trajectory 0 of an ensemble, on its half-step grid."""
    name = m.get("name")
    ens = _ensemble_config(m, args, cfg.t_final(m))
    _, _, n_steps, h = _grid(ens, system, modes)
    rng = [trajectory_rng(ens.seed, 0)]
    t = np.arange(2 * n_steps + 1) * (h / 2)
    if name == "sln":
        xi, nu = SLNNoise(modes, h / 2, t.size).sample(rng)
        real = NoiseRealization(t, xi[0], nu[0], (ens.seed, 0))
    else:
        z = HOPSNoise(modes, h / 2, t.size, m.get("convention", "conjugate")).sample(rng)
        real = NoiseRealization(t, z[0], None, (ens.seed, 0))
    path = os.path.join(out, "noise.csv")
    real.to_csv(path)
    return path


# --------------------------------------------------------------------------
# subcommands


def cmd_decompose(cfg: RunConfig, args) -> int:
    from .plotting import plot_fit

    source = cfg.bath()
    eps, omega_D, delta, ppd, K_max = cfg.fit_params()
    window = FrequencyWindow(eps[0], omega_D, ppd)
    out = args.out
    report = {"delta": delta, "omega_eps": eps[0], "omega_D": omega_D, "points_per_decade": ppd, "K_max": K_max}
    try:
        c0 = _anchor(cfg, source)
        report["anchor_C0"] = c0
        ms = decompose(source, window, delta, K_max, c0=c0)
    except FitError as exc:
        report.update(status="FAIL", message=str(exc), best_residual=exc.best_residual)
        write_json(os.path.join(out, "decompose_report.json"), report)
        raise
    modes_path = cfg.output().get("modes_file") or "modes.txt"
    modes_path = os.path.join(out, modes_path) if not os.path.isabs(modes_path) else modes_path
    ms.save(modes_path)

    grid = sample_grid(window)
    values = np.asarray(source.noise_power(grid), float)
    fitted = ms.noise_power(grid) + ms.constant
    write_csv(os.path.join(out, "fit.csv"), ["omega", "S", "S_modes", "abs_error"],
              zip(grid, values, fitted, np.abs(fitted - values)))

    n_fid = int(cfg.output().get("fidelity_points", 41))
    t = np.linspace(0.0, 1.0 / eps[0], n_fid)
    C_modes = reconstruct_C(ms, t)
    C_ref = source.correlation(t) if not isinstance(source, BathSpec) else correlation_quadrature(source, t)
    dev = np.abs(C_modes - C_ref)
    bound = 100 * delta * abs(C_ref[0])
    write_csv(os.path.join(out, "fidelity.csv"),
              ["t", "C_modes_re", "C_modes_im", "C_ref_re", "C_ref_im", "abs_dev"],
              zip(t, C_modes.real, C_modes.imag, C_ref.real, C_ref.imag, dev))
    ok = ms.achieved_error <= delta
    report.update(status="PASS" if ok else "FAIL", K=ms.K, achieved_error=ms.achieved_error,
                  constant=ms.constant, grid_size=ms.grid_size, modes_file=os.path.basename(modes_path),
                  fidelity_max_dev=float(dev.max()), fidelity_bound=bound,
                  fidelity_within_bound=bool(dev.max() <= bound))
    write_json(os.path.join(out, "decompose_report.json"), report)
    if not args.no_plots:
        plot_fit(grid, values, fitted, os.path.join(out, "fit.png"), title=f"K = {ms.K}")
    print(f"K = {ms.K}  achieved_error = {ms.achieved_error:.3e}  (delta = {delta:.1e})")
    if not ok:
        raise NumericalFailure(f"achieved error {ms.achieved_error:.3e} exceeds delta {delta:.1e}")
    return EXIT_OK


def cmd_propagate(cfg: RunConfig, args) -> int:
    from .plotting import plot_trajectory

    m = cfg.section("method")
    system = cfg.system()
    modes = _modes_from_config(cfg, m)
    rec = run_method(cfg, m, args, system, modes)
    name = cfg.output().get("trajectory_file", "trajectory.csv")
    path = os.path.join(args.out, name)
    rec.to_csv(path)
    if cfg.output().get("dump_noise") and m.get("name") in ("sln", "hops"):
        _dump_noise(cfg, m, args, system, modes, args.out)
    if not args.no_plots:
        plot_trajectory(rec, os.path.splitext(path)[0] + ".png")
    s = rec.summary()
    print(f"{rec.meta.get('method')}: {len(rec.t)} samples written to {path}"
          + (f", trace deviation {s['trace_max_abs_dev']:.2e}" if "trace_max_abs_dev" in s else ""))
    return EXIT_OK


def compare_records(records: Dict[str, TrajectoryRecord], bound: Optional[float]):
    """Deviations of every record from the first one.

    Returns
    -------
    summary_rows : list
        ``(reference, other, observable, max_abs_dev, max_z, frac_within_3se, bound, exceeds_bound)``
    series : dict
        ``"other:observable" -> |difference|`` over time.
    """
    labels = list(records)
    ref_lab = labels[0]
    ref = records[ref_lab]
    rows, series = [], {}
    for lab in labels[1:]:
        rec = records[lab]
        if rec.t.shape != ref.t.shape or not np.allclose(rec.t, ref.t, rtol=1e-12, atol=1e-12):
            raise ConfigError(f"compare: time grid of {lab!r} does not match {ref_lab!r}")
        shared = [k for k in ref.observables if k in rec.observables]
        if not shared:
            raise ConfigError(f"compare: {lab!r} and {ref_lab!r} share no observables")
        for k in shared:
            diff = np.abs(rec.observables[k] - ref.observables[k])
            se = np.zeros_like(diff)
            for r in (rec, ref):
                if k in r.stderr:
                    se = np.sqrt(se**2 + r.stderr[k] ** 2)
            max_z, frac = None, None
            if np.any(se > 0):
                dre = np.abs(rec.observables[k].real - ref.observables[k].real)
                # zero standard error (t = 0) demands exact agreement
                within = np.where(se > 0, dre <= 3 * se, dre <= 1e-12)
                frac = float(np.mean(within))
                max_z = float(np.max(np.where(se > 0, dre / np.where(se > 0, se, 1), 0)))
            dmax = float(diff.max()) if diff.size else 0.0
            rows.append((ref_lab, lab, k, dmax, max_z, frac, bound,
                         None if bound is None else bool(dmax > bound)))
            series[f"{lab}:{k}"] = diff
    return rows, series


def cmd_compare(cfg: Optional[RunConfig], args) -> int:
    from .plotting import plot_comparison

    records: Dict[str, TrajectoryRecord] = {}
    bound = args.tolerance
    if args.files:
        for f in args.files:
            lab = os.path.splitext(os.path.basename(f))[0]
            if lab in records:
                lab = f
            try:
                records[lab] = TrajectoryRecord.from_csv(f)
            except (OSError, ValueError, KeyError, StopIteration) as exc:
                raise ConfigError(f"compare: cannot read trajectory {f}: {exc}") from None
    else:
        if cfg is None:
            raise ConfigError("compare: give trajectory files or --config with compare.methods")
        cmp_sec = cfg.section("compare", required=False)
        if bound is None and cmp_sec.get("bound") is not None:
            bound = _num(cmp_sec, "bound", "compare")
        methods = cfg.methods()
        system = cfg.system()
        for i, m in enumerate(methods):
            lab = str(m.get("label") or m.get("name") or f"run{i}")
            if lab in records:
                lab = f"{lab}_{i}"
            rec = run_method(cfg, m, args, system)
            rec.to_csv(os.path.join(args.out, f"trajectory_{lab}.csv"))
            records[lab] = rec
    if len(records) < 2:
        raise ConfigError("compare: need at least two trajectories")
    rows, series = compare_records(records, bound)
    write_csv(os.path.join(args.out, "deviations.csv"),
              ["reference", "other", "observable", "max_abs_dev", "max_z", "frac_within_3se", "bound",
               "exceeds_bound"], rows)
    t = next(iter(records.values())).t
    names = list(series)
    write_csv(os.path.join(args.out, "deviations_t.csv"), ["t"] + names,
              (([ti] + [series[n][i] for n in names]) for i, ti in enumerate(t)))
    if not args.no_plots:
        plot_comparison(t, series, os.path.join(args.out, "deviations.png"), ylabel="|difference|")
    for r in rows:
        flag = "  EXCEEDS BOUND" if r[7] else ""
        print(f"{r[1]} vs {r[0]} [{r[2]}]: max |dev| = {r[3]:.3e}{flag}")
    return EXIT_OK


def cmd_scan_modes(cfg: RunConfig, args) -> int:
    from .plotting import plot_scan

    source = cfg.bath()
    eps, omega_D, delta, ppd, K_max = cfg.fit_params()
    rows = mode_count_scan(source, eps, omega_D, delta, ppd, K_max)
    write_csv(os.path.join(args.out, "scan.csv"), ["omega_eps", "K", "achieved_error", "ok", "message"],
              ((r.omega_eps, r.K, r.achieved_error, r.ok, r.message) for r in rows))
    n_ok = sum(r.ok for r in rows)
    slope = intercept = r2 = None
    if n_ok >= 2:
        slope, intercept, r2 = log_regression(rows)
    Ks = [r.K for r in rows if r.ok]
    monotone = None if n_ok < 2 else all(b > a for a, b in zip(Ks, Ks[1:])) if eps == sorted(eps, reverse=True) \
        else None
    write_csv(os.path.join(args.out, "scan_summary.csv"),
              ["n_rows", "n_ok", "slope", "intercept", "r2", "strictly_increasing"],
              [(len(rows), n_ok, slope, intercept, r2, monotone)])
    if not args.no_plots:
        plot_scan([r.omega_eps for r in rows], [r.K for r in rows], [r.ok for r in rows],
                  os.path.join(args.out, "scan.png"), None if slope is None else (slope, intercept))
    for r in rows:
        print(f"omega_eps = {r.omega_eps:.3e}  K = {r.K:3d}  error = {r.achieved_error:.2e}"
              + ("" if r.ok else "  FAILED " + r.message))
    if r2 is not None:
        print(f"slope = {slope:.4f}  R^2 = {r2:.4f}")
    return EXIT_OK


def cmd_verify_mpo(cfg: RunConfig, args) -> int:
    m = cfg.section("method", required=False)
    system = cfg.system()
    modes = _modes_from_config(cfg, m)
    caps = m.get("caps", 2)
    caps = [int(c) for c in caps] if isinstance(caps, list) else [int(caps)] * modes.K
    if len(caps) != modes.K:
        raise ConfigError(f"method.caps: need {modes.K} entries, got {len(caps)}")
    budget = int(m.get("budget", 10_000))
    tol = args.tolerance if args.tolerance is not None else MPO_TOLERANCE
    fresh = build_mpo(system, modes, caps)
    chain = fresh
    if m.get("chain_file"):
        try:
            chain = load_chain(cfg.path(m["chain_file"]))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"method.chain_file: {exc}") from None
    # estimate the dense size before assembling the reference
    dim = system.N**2 * int(np.prod([(c + 1) ** 2 for c in caps]))
    if dim > budget:
        raise BudgetError(f"dense dimension {dim} exceeds budget {budget}")
    ref = dense_generator(system, modes, caps)
    rep = verify_mpo(chain, ref, tol, budget, reference_chain=fresh)
    rows = [("dense_equivalence", rep["max_deviation"], tol, rep["passed"], rep.get("suspect_site", ""))]
    if modes.K >= 2:
        com = check_site_commutation(chain, budget)
        ok = com["max_deviation"] <= tol
        pair = "" if com["worst_pair"] is None else f"{com['worst_pair'][0]}<->{com['worst_pair'][1]}"
        rows.append(("site_exchange", com["max_deviation"], tol, ok, pair))
        rows.append(("block_commutator", com["block_deviation"], tol, com["block_deviation"] <= tol, ""))
    write_csv(os.path.join(args.out, "mpo_report.csv"), ["check", "max_deviation", "tolerance", "passed", "site"], rows)
    side = {"dimension": rep["dimension"], "K": modes.K, "caps": caps}
    for key in ("tensor_deviation", "site_deviation", "suspect_site"):
        if key in rep:
            side[key] = rep[key]
    write_json(os.path.join(args.out, "mpo_report.json"), side)
    save_chain(chain, os.path.join(args.out, "mpo_chain.txt"))
    for r in rows:
        print(f"{r[0]}: {r[1]:.3e} {'PASS' if r[3] else 'FAIL'}" + (f" (site {r[4]})" if r[4] else ""))
    if not all(r[3] for r in rows):
        raise NumericalFailure("MPO verification failed")
    return EXIT_OK


COMMANDS = {
    "decompose": cmd_decompose,
    "propagate": cmd_propagate,
    "compare": cmd_compare,
    "scan-modes": cmd_scan_modes,
    "verify-mpo": cmd_verify_mpo,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML run configuration")
    common.add_argument("--out", metavar="DIR", default=".", help="output directory (created if missing)")
    common.add_argument("--seed", type=int, help="master seed for stochastic methods")
    common.add_argument("--threads", type=int, help="worker threads for ensembles")
    common.add_argument("--tolerance", type=float, help="comparison / verification bound")
    common.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    p = argparse.ArgumentParser(prog="qdmess", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "compare":
            sp.add_argument("files", nargs="*", help="trajectory CSV files (instead of --config)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = None
        if args.config:
            cfg = load_config(args.config)
        elif args.command != "compare":
            raise ConfigError("--config: required for this command")
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RepresentationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FitError as exc:
        print(f"fit failed: {exc} (best residual {exc.best_residual:.3e})", file=sys.stderr)
        return EXIT_NUMERIC
    except (IntegrationError, QuadratureError, NumericalFailure, MemoryError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
