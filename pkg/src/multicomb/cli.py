"""Batch front end: ``multicomb <verb> --config run.cfg``.

Verbs: steady, noise, entangle, optimize, pulse, qsa. Every verb writes flat
files (CSV, JSON, PNG) into the output directory, which is locked for the
duration of the run. Exit codes: 0 ok, 1 config, 2 non-convergence,
3 instability, 4 grid or memory refusal.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .fluct import UnstableError, linearize, output_amplitudes, output_covariance, stability
from .meanfield import IntegrationError, conserved_quantities, pump_depletion, steady_state
from .metrics import enumerate_bipartitions, intensity_noise_all, scan_bipartitions, twin_beam_map
from .model import SpecError, build_cavity
from .optimizer import evaluate, optimize, quadratic_self_test
from .pulse import (
    GridError, PropagationError, SplitStepper, StepSizeError, build_initial_pulses, photon_ledger,
    propagate, spectrum,
)
from .qsa import (
    binned_intensity_map, correlated_fraction, output_covariance_ultrafast, propagate_with_jacobian,
    symplectic_defect,
)

log = logging.getLogger("multicomb")

EXIT_OK, EXIT_CONFIG, EXIT_UNCONVERGED, EXIT_UNSTABLE, EXIT_GRID = 0, 1, 2, 3, 4
VERBS = ("steady", "noise", "entangle", "optimize", "pulse", "qsa")
# step-size target just under the stepper's per-step nonlinear phase cap
AUTO_PHASE = 0.049
LOCK_NAME = ".multicomb.lock"


class CommandError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


# --- writers --------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_matrix_csv(path: Path, labels, mat) -> None:
    mat = np.ma.filled(np.ma.asarray(mat, dtype=float), np.nan)
    write_csv(path, ["label", *labels], ([lab, *row] for lab, row in zip(labels, mat)))


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    return v


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def heatmap(path: Path, mat, labels, title: str, enabled: bool = True, edges=None) -> None:
    if not enabled:
        return
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = np.ma.masked_invalid(np.ma.filled(np.ma.asarray(mat, dtype=float), np.nan))
    lim = max(1.0, float(np.nanmax(np.abs(data.filled(0.0)))))
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(data, cmap="RdBu_r", vmin=-lim, vmax=lim, interpolation="nearest")
    fig.colorbar(im, ax=ax, label="dB re uncorrelated")
    if edges is None and len(labels) <= 40:
        ax.set_xticks(range(len(labels)), labels, rotation=90, fontsize=6)
        ax.set_yticks(range(len(labels)), labels, fontsize=6)
    elif edges is not None:
        centres = [(a + b - 1) / 2 for a, b in zip(edges[:-1], edges[1:])]
        for e in edges[1:-1]:
            ax.axhline(e - 0.5, color="k", lw=0.5, ls="--")
            ax.axvline(e - 0.5, color="k", lw=0.5, ls="--")
        ax.set_xticks(centres, labels)
        ax.set_yticks(centres, labels)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


@contextmanager
def locked_dir(path: Path):
    path.mkdir(parents=True, exist_ok=True)
    lock = path / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CommandError(f"output directory {path} is locked by another run ({lock})", EXIT_CONFIG)
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        lock.unlink(missing_ok=True)


# --- cavity pipeline ------------------------------------------------------------------


def _spec(cfg: RunConfig):
    try:
        return cfg.system_spec()
    except SpecError as e:
        raise ConfigError(f"{cfg.source}: [system] {e}") from e


def _steady(cfg: RunConfig, seed: int):
    model = build_cavity(_spec(cfg))
    try:
        ss = steady_state(model, seed=seed)
    except IntegrationError as e:
        raise CommandError(f"steady-state search diverged: {e}", EXIT_UNCONVERGED) from e
    return model, ss


def _require_converged(ss):
    if not ss.converged:
        raise CommandError(
            f"steady state not reached: residual {ss.residual:.3g} >= {ss.tolerance:.3g}"
            + (f", dominant frequency {ss.oscillation_frequency:.6g} rad/s" if ss.oscillation_frequency else ""),
            EXIT_UNCONVERGED,
        )


def _steady_summary(model, ss) -> dict:
    table = model.table
    n = np.abs(ss.a) ** 2
    populated = {str(i): bool(np.all(n[table.comb_modes(i)] > 1.0)) for i in sorted(set(table.comb[~table.is_idler]))}
    populated["T"] = bool(np.all(n[table.comb_modes("T")] > 1.0))
    n_sub, q, e = conserved_quantities(model, ss.a)
    try:
        dep = float(pump_depletion(model, ss))
    except ValueError:
        dep = None
    return dict(
        converged=ss.converged, residual=ss.residual, tolerance=ss.tolerance, time_s=ss.time,
        newton_polished=ss.newton_polished, oscillation_frequency_rad_s=ss.oscillation_frequency,
        pump_depletion=dep, n_modes=model.N, populated_combs=populated,
        invariants=dict(N_sub=float(n_sub), Q_ladder=float(q), energy_j=float(e)),
    )


def _write_steady(out: Path, model, ss) -> dict:
    t = model.table
    rows = [
        (n, t.label(n), bool(t.is_idler[n]), "T" if t.is_idler[n] else int(t.comb[n]), int(t.line[n]),
         float(t.omega[n]), ss.a[n].real, ss.a[n].imag, abs(ss.a[n]) ** 2)
        for n in range(model.N)
    ]
    write_csv(out / "steadystate.csv",
              ["mode", "label", "is_idler", "comb", "line", "omega_rad_s", "re", "im", "photons"], rows)
    summary = _steady_summary(model, ss)
    write_json(out / "summary.json", summary)
    return summary


def cmd_steady(cfg: RunConfig, out: Path, args) -> int:
    model, ss = _steady(cfg, args.seed)
    summary = _write_steady(out, model, ss)
    log.info("steady: converged=%s residual=%.3g depletion=%s", ss.converged, ss.residual, summary["pump_depletion"])
    return EXIT_OK if ss.converged else EXIT_UNCONVERGED


def _omega(cfg: RunConfig, args) -> float:
    return 2 * math.pi * args.omega if args.omega is not None else cfg.analysis_omega()


def _noise_pipeline(cfg: RunConfig, out: Path, args):
    model, ss = _steady(cfg, args.seed)
    _write_steady(out, model, ss)
    _require_converged(ss)
    drift = linearize(model, ss)
    ab = stability(drift)
    if ab >= 0:
        raise CommandError(f"steady state is unstable: spectral abscissa {ab:.6g} 1/s >= 0", EXIT_UNSTABLE)
    sigma = output_covariance(drift, _omega(cfg, args), cfg.get("run", "include_intrinsic", True))
    return model, ss, sigma


def cmd_noise(cfg: RunConfig, out: Path, args) -> int:
    model, ss, sigma = _noise_pipeline(cfg, out, args)
    labels = list(model.table.labels)
    quad = [f"{ax}:{lab}" for lab in labels for ax in ("p", "q")]
    write_matrix_csv(out / "covariance.csv", quad, sigma.matrix)
    amps = output_amplitudes(model, ss)
    dark = cfg.get("run", "dark_threshold_photons", 1e-6)
    noise = intensity_noise_all(sigma, amps, dark)
    write_csv(out / "intensity_noise.csv", ["mode", "label", "output_photons_per_s", "intensity_noise_db", "dark"],
              [(n, labels[n], abs(amps[n]) ** 2, float(np.ma.filled(noise, np.nan)[n]), bool(noise.mask[n]))
               for n in range(model.N)])
    tb = twin_beam_map(sigma, amps, dark, labels)
    write_matrix_csv(out / "twinbeam_map.csv", labels, tb.db)
    heatmap(out / "twinbeam_map.png", tb.db, labels, "twin-beam noise (dB)", cfg.get("output", "images", True))
    write_json(out / "noise_summary.json", dict(
        analysis_omega_rad_s=sigma.omega, min_twin_beam_db=tb.min_db(),
        n_dark=int(np.sum(noise.mask)), spectral_abscissa=stability(linearize(model, ss)),
    ))
    log.info("noise: min twin-beam %.2f dB", tb.min_db())
    return EXIT_OK


def cmd_entangle(cfg: RunConfig, out: Path, args) -> int:
    model, ss, sigma = _noise_pipeline(cfg, out, args)
    idler = [int(m) for m in model.table.comb_modes("T")]
    limit = cfg.get("run", "bipartition_limit", 1000)
    subsets = enumerate_bipartitions(model.N, limit, idler)
    res = scan_bipartitions(sigma, subsets)
    target = tuple(sorted(idler))
    comp = tuple(m for m in range(model.N) if m not in target)
    labels = model.table.labels
    rows = []
    for k, r in enumerate(res):
        star = r.subset in (target, comp)
        rows.append((k, " ".join(str(m) for m in r.subset), " ".join(labels[m] for m in r.subset),
                     r.bitmask, r.nu_min, r.entangled, star))
    write_csv(out / "bipartitions.csv", ["index", "subset", "labels", "bitmask", "nu_min", "entangled", "idler_star"],
              rows)
    frac = float(np.mean([r.entangled for r in res])) if res else float("nan")
    write_json(out / "entangle_summary.json", dict(n_modes=model.N, n_bipartitions=len(res), entangled_fraction=frac,
                                                   idler_entangled=any(r[-2] for r in rows if r[-1])))
    log.info("entangle: %d bipartitions, %.1f%% entangled", len(res), 100 * frac)
    return EXIT_OK


def cmd_optimize(cfg: RunConfig, out: Path, args) -> int:
    if cfg.get("optimize", "self_test", False):
        target, found, res = quadratic_self_test(seed=args.seed)
        write_csv(out / "opt_trace.csv", ["index", "start", "x0", "x1", "x2", "value", "best_so_far"],
                  [(e.index, e.start, *e.x, e.value, e.best_so_far) for e in res.trace])
        err = float(np.max(np.abs(found - target)))
        write_json(out / "opt_result.json", dict(self_test=True, analytic=target, found=found, max_error=err,
                                                 n_evaluations=len(res.trace)))
        return EXIT_OK
    prob = cfg.optimization_problem(args.seed, _omega(cfg, args) if args.omega is not None else None)
    res = optimize(prob)
    names = [p.name for p in prob.parameters]
    write_csv(out / "opt_trace.csv", ["index", "start", *names, "value_db", "tag", "best_so_far_db"],
              [(e.index, e.start, *e.x, e.value, e.tag, e.best_so_far) for e in res.trace])
    write_json(out / "opt_result.json", dict(
        objective=prob.objective, targets=list(prob.targets), q_mode=prob.q_mode, seed=prob.seed,
        budget=prob.budget, n_evaluations=res.n_evaluations, budget_exhausted=res.budget_exhausted,
        initial_params=res.initial_params, initial_value_db=res.initial_value,
        best_params=res.best_params, best_value_db=res.best_value, improvement_db=res.improvement_db,
    ))
    from .optimizer import apply_parameters

    labels = list(build_cavity(prob.spec).labels)
    images = cfg.get("output", "images", True)
    for tag, params in (("before", res.initial_params), ("after", res.best_params)):
        ev = evaluate(apply_parameters(prob.spec, params, prob.q_mode), prob.objective, prob.targets, prob.omega)
        if ev.twin_beam_db is None:
            continue
        write_matrix_csv(out / f"twinbeam_{tag}.csv", labels, ev.twin_beam_db)
        heatmap(out / f"twinbeam_{tag}.png", ev.twin_beam_db, labels, f"twin-beam noise {tag} (dB)", images)
    log.info("optimize: %.2f -> %.2f dB", res.initial_value, res.best_value)
    return EXIT_OK


# --- pulse pipeline -------------------------------------------------------------------


def _pulse_setup(cfg: RunConfig, threads):
    physics = cfg.pulse_physics()
    grid = cfg.pulse_grid()
    state = build_initial_pulses(physics, grid, **cfg.pulse_inputs())
    dz_um = cfg.get("pulse", "dz_um")
    L = physics.length
    if dz_um is None:
        rate = SplitStepper(physics, grid, threads).nonlinear_rate(np.ascontiguousarray(state.fields.T))
        phase = cfg.get("pulse", "max_phase_rad", AUTO_PHASE)
        dz = L / max(1, math.ceil(L * rate / phase))
    else:
        dz = dz_um * 1e-6
    return physics, grid, state, dz, cfg.checkpoints(L)


def _write_spectra(path: Path, states) -> None:
    rows = []
    for s in states:
        freq, psd = spectrum(s)
        for e, lab in enumerate(s.labels):
            for f, p in zip(freq[e], psd[e]):
                rows.append((s.z, lab, f, p))
    write_csv(path, ["z_m", "envelope", "freq_hz", "psd_w"], rows)


def _ledger_rows(states):
    out = []
    for s in states:
        n_sub, q = photon_ledger(s, "absolute")
        out.append(dict(z_m=s.z, energies_j=s.energies(), photons_sub=n_sub, q_ladder=q))
    return out


def cmd_pulse(cfg: RunConfig, out: Path, args) -> int:
    physics, grid, state, dz, cps = _pulse_setup(cfg, args.threads)
    t0 = time.perf_counter()
    states = [state] + propagate(physics, state, dz, checkpoints=cps, workers=args.threads)
    _write_spectra(out / "spectra.csv", states)
    write_json(out / "pulse_summary.json", dict(
        dz_m=dz, n_steps=math.ceil(physics.length / dz - 1e-9), M=grid.M, T_w_s=grid.T_w,
        labels=list(physics.labels), checkpoints=_ledger_rows(states), elapsed_s=time.perf_counter() - t0,
    ))
    return EXIT_OK


def _bin_block_edges(axes):
    edges = [0]
    for ax in axes:
        edges.append(edges[-1] + ax["count"])
    return edges


def cmd_qsa(cfg: RunConfig, out: Path, args) -> int:
    physics, grid, state, dz, cps = _pulse_setup(cfg, args.threads)
    t0 = time.perf_counter()
    res = propagate_with_jacobian(physics, state, dz, checkpoints=cps, memory_cap=cfg.memory_cap(),
                                  workers=args.threads)
    _write_spectra(out / "spectra.csv", [state] + [s for s, _ in res])
    thr = cfg.get("qsa", "threshold_db", -3.0)
    dark = cfg.get("qsa", "dark_threshold_photons", 1e-6)
    images = cfg.get("output", "images", True)
    checkpoints, bin_axes = [], {}
    for s, jac in res:
        sigma = output_covariance_ultrafast(jac)
        entry = dict(z_m=s.z, symplectic_defect=symplectic_defect(jac), maps={})
        for spec in cfg.bin_specs():
            bm = binned_intensity_map(s, sigma, spec, physics.self_steepening, dark)
            tag = f"qsa_{spec.domain}_z{s.z * 100:.4g}cm"
            labels = [f"{ax['label']}:{k - ax['count'] // 2:+d}" for ax in bm.axes for k in range(ax["count"])]
            write_matrix_csv(out / f"{tag}.csv", labels, bm.db)
            heatmap(out / f"{tag}.png", bm.db, [ax["label"] for ax in bm.axes],
                    f"{spec.domain} bins, z = {s.z * 100:.3g} cm (dB)", images, _bin_block_edges(bm.axes))
            bin_axes[spec.domain] = list(bm.axes)
            entry["maps"][spec.domain] = dict(
                file=f"{tag}.csv", min_db=bm.noise.min_db(), correlated_fraction=correlated_fraction(bm, thr),
                inter_envelope_fraction=correlated_fraction(bm, thr, inter_envelope=True),
            )
        checkpoints.append(entry)
        log.info("qsa: z=%.4g m defect %.3g", s.z, entry["symplectic_defect"])
    write_json(out / "qsa_bins.json", bin_axes)
    write_json(out / "qsa_summary.json", dict(
        dz_m=dz, M=grid.M, T_w_s=grid.T_w, labels=list(physics.labels), threshold_db=thr,
        max_symplectic_defect=max(c["symplectic_defect"] for c in checkpoints), checkpoints=checkpoints,
        elapsed_s=time.perf_counter() - t0,
    ))
    return EXIT_OK


COMMANDS = dict(steady=cmd_steady, noise=cmd_noise, entangle=cmd_entangle, optimize=cmd_optimize,
                pulse=cmd_pulse, qsa=cmd_qsa)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multicomb", description="Cascaded multi-comb simulations from a config file.")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", required=True, help="INI run configuration")
    p.add_argument("--out", default=None, help="output directory (overrides [output] dir)")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    p.add_argument("--threads", type=int, default=None, help="FFT worker threads")
    p.add_argument("--omega", type=float, default=None, help="analysis frequency in Hz (overrides [run])")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed < 0 or args.seed >= 1 << 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        out = Path(args.out or cfg.get("output", "dir", "out"))
        with locked_dir(out):
            return COMMANDS[args.verb](cfg, out, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CommandError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except UnstableError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_UNSTABLE
    except PropagationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_UNCONVERGED
    except (GridError, StepSizeError) as e:
        print(f"grid error: {e}", file=sys.stderr)
        return EXIT_GRID
    except (SpecError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
