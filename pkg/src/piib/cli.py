"""Staged command-line driver.

Stages and their files under ``output_dir``::

    simulate  trajectories.csv, simulate_summary.csv
    sample    bundles/angle_<a>.csv, bins.csv
    tables    tables.csv
    sweep     tradeoff.csv, optimal.csv, regions.csv [, solutions/]
    gaussian  gaussian_curve.csv, gaussian_report.txt
    report    (prints aggregates from tradeoff.csv)

A stage whose outputs already carry the current config hash is skipped.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import artifacts as art
from .cartpole import DivergedRolloutError, linearized_upright, LinearSystem
from .config import ConfigError, ExperimentConfig
from .ib_discrete import IBNumericalError
from .ib_gaussian import (
    GaussianIBState,
    LQGSetup,
    entropy_inequality_check,
    gaussian_curve,
    joint_covariance,
    recover_control_covariance,
)
from .pathintegral import (
    SAMPLING_STREAM,
    BinningError,
    MppiResult,
    MissingConditionError,
    NoViableRolloutError,
    SamplingStarvedError,
    SwingUpFailure,
    bin_edges,
    control_bounds,
    discretize_controls,
    ground_truth_tables,
    initial_state,
    mppi_solve,
    n_bins,
    sample_variations,
)
from .pipeline import (
    CoverageError,
    EvaluationSupportError,
    NormalizationError,
    beta_sweep,
    default_angles,
    optimal_csv,
    quartile_drops,
    read_tradeoff_csv,
    region_aggregate,
    regions_csv,
    successor_cost_table,
    tradeoff_csv,
)
from .probability import NumericalDomainError

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3, 4


class StageFailure(RuntimeError):
    """A stage ran to completion but some conditions failed."""


def condition_seed(seed: int, index: int) -> int:
    """Independent per-condition seed; distinct base seeds never share streams."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def _out(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir)


def _emit(msg: str, echo) -> None:
    if echo is not None:
        echo(msg)


# -- simulate ------------------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig, force: bool = False, echo=print) -> Path:
    out = _out(cfg)
    h = cfg.stage_hash("simulate")
    traj_path, summary_path = out / "trajectories.csv", out / "simulate_summary.csv"
    if not force and art.is_current(traj_path, "simulate", h) and art.is_current(summary_path, "simulate", h):
        _emit(f"simulate: cache hit ({h})", echo)
        return traj_path

    results, summary, failed = [], [], []
    for i, angle in enumerate(cfg.sweep.angles):
        try:
            r = mppi_solve(angle, cfg.mppi, cfg.physics, seed=condition_seed(cfg.seed, i))
            results.append(r)
            summary.append((float(angle), True, r.final_angle, r.attempts, float(r.trajectory.total_cost)))
        except SwingUpFailure as exc:
            best = exc.best
            results.append(MppiResult(float(angle), best.controls, best, cfg.mppi.max_attempts))
            summary.append((float(angle), False, exc.final_angle, cfg.mppi.max_attempts,
                            float(best.total_cost)))
            failed.append(float(angle))
        _emit(f"simulate: {angle:g} deg phi_T={summary[-1][2]:+.4f} "
              f"{'ok' if summary[-1][1] else 'FAILED'}", echo)

    art.write_text(traj_path, art.trajectories_text(results, h))
    art.write_text(summary_path, art.simulate_summary_text(summary, h))
    if failed:
        raise StageFailure(f"swing-up failed for angles {failed}")
    return traj_path


# -- sample --------------------------------------------------------------------------


def _bundle_path(out: Path, angle: float) -> Path:
    return out / "bundles" / f"angle_{art.angle_tag(angle)}.csv"


def cmd_sample(cfg: ExperimentConfig, force: bool = False, echo=print) -> list[Path]:
    out = _out(cfg)
    h = cfg.stage_hash("sample")
    paths = [_bundle_path(out, a) for a in cfg.sweep.angles]
    if not force and all(art.is_current(p, "sample", h) for p in paths + [out / "bins.csv"]):
        _emit(f"sample: cache hit ({h})", echo)
        return paths

    art.check_input(out / "trajectories.csv", "simulate", cfg.stage_hash("simulate"), force)
    art.check_input(out / "simulate_summary.csv", "simulate", cfg.stage_hash("simulate"), force)
    ok = {float(r["angle"]): r["success"] == "true" for r in art._csv_rows(out / "simulate_summary.csv")}
    bad = [a for a in cfg.sweep.angles if not ok.get(float(a), False)]
    if bad and not force:
        raise art.StageInputError(f"no successful trajectory for angles {bad}")
    base = art.read_trajectories(out / "trajectories.csv")
    s = cfg.sampling

    bundles = []
    for i, angle in enumerate(cfg.sweep.angles):
        if float(angle) not in base:
            raise art.StageInputError(f"trajectories.csv has no angle {angle}")
        rng = np.random.default_rng([condition_seed(cfg.seed, i), SAMPLING_STREAM])
        try:
            b = sample_variations(base[float(angle)], initial_state(angle), s.n_target, s.noise_std,
                                  s.acceptance_ratio, cfg.physics, rng, s.attempt_budget,
                                  initial_angle=float(angle))
        except SamplingStarvedError as exc:
            raise SamplingStarvedError(f"angle {angle}: {exc}") from exc
        bundles.append(b)
        rate = (b.n_samples - 1) / b.attempts if b.attempts else float("nan")
        _emit(f"sample: {angle:g} deg kept {b.n_samples} samples from {b.attempts} candidates "
              f"(kept/tried {rate:.4f})", echo)

    inc = cfg.discretization.increment
    u_min, u_max = control_bounds(bundles)
    M = n_bins(u_min, u_max, inc)
    for b, p in zip(bundles, paths):
        bins = discretize_controls(b.controls, u_min, u_max, inc)
        art.write_text(p, art.bundle_text(b, bins, h, dt=cfg.physics.dt, lam=cfg.sweep.lam, seed=cfg.seed))
    art.write_text(out / "bins.csv", art.bins_text(u_min, u_max, inc, M, h))
    _emit(f"sample: controls in [{u_min:.4f}, {u_max:.4f}], M = {M}", echo)
    return paths


def load_bundles(cfg: ExperimentConfig, force: bool = False):
    out = _out(cfg)
    h = cfg.stage_hash("sample")
    art.check_input(out / "bins.csv", "sample", h, force)
    meta = art.read_bins(out / "bins.csv")
    bundles = []
    for a in cfg.sweep.angles:
        p = _bundle_path(out, a)
        if not p.exists():
            raise MissingConditionError(f"no bundle for angle {a} ({p})")
        art.check_input(p, "sample", h, force)
        bundles.append(art.read_bundle(p))
    return bundles, meta


# -- tables --------------------------------------------------------------------------


def cmd_tables(cfg: ExperimentConfig, force: bool = False, echo=print) -> Path:
    out = _out(cfg)
    h = cfg.stage_hash("tables")
    path = out / "tables.csv"
    if not force and art.is_current(path, "tables", h):
        _emit(f"tables: cache hit ({h})", echo)
        return path
    bundles, meta = load_bundles(cfg, force)
    M = meta["M"]
    edges = bin_edges(meta["u_min"], meta["u_max"], meta["increment"])
    tables = ground_truth_tables([b.bins for b in bundles], [b.suffix_costs for b in bundles],
                                 cfg.sweep.lam, M, edges)
    art.write_text(path, art.tables_text(tables, h))
    T, N, _ = tables.tables.shape
    _emit(f"tables: N = {N}, M = {M}, T = {T}", echo)
    occ = (tables.tables > 0).sum(axis=2)
    for t in range(T):
        _emit(f"tables: t={t:2d} occupied bins per condition mean {occ[t].mean():.2f} "
              f"min {occ[t].min()} max {occ[t].max()}", echo)
    return path


# -- sweep ---------------------------------------------------------------------------


def _region_line(regions) -> str:
    parts = [f"{r.region} {r.mean_optimal_compute:.4f}" for r in regions]
    line = "mean optimal compute cost (nats): " + ", ".join(parts)
    means = {r.region: r.mean_optimal_compute for r in regions}
    if "SwingUpB" in means and "Balancing" in means:
        rel = ">" if means["SwingUpB"] > means["Balancing"] else "<="
        line += f"; SwingUpB {rel} Balancing"
    return line


def _aggregate(cfg: ExperimentConfig, curves):
    full = set(float(a) for a in cfg.sweep.angles) == set(default_angles())
    return region_aggregate(curves, expected_angles=cfg.sweep.angles, partial=not full)


def cmd_sweep(cfg: ExperimentConfig, force: bool = False, echo=print,
              dump_solutions: bool = False) -> Path:
    out = _out(cfg)
    h = cfg.stage_hash("sweep")
    path = out / "tradeoff.csv"
    outputs = [path, out / "optimal.csv", out / "regions.csv"]
    if not force and not dump_solutions and all(art.is_current(p, "sweep", h) for p in outputs):
        _emit(f"sweep: cache hit ({h})", echo)
        return path

    art.check_input(out / "tables.csv", "tables", cfg.stage_hash("tables"), force)
    tables = art.read_tables(out / "tables.csv")
    bundles, _ = load_bundles(cfg, force)
    m = successor_cost_table([b.bins for b in bundles], [b.step_costs for b in bundles], tables.n_bins)

    on_solution = None
    if dump_solutions:
        sol_dir = out / "solutions"

        def on_solution(t, sol):
            name = f"t{t:02d}_beta{sol.beta!r}.csv"
            art.write_text(sol_dir / name, art.solution_dump_text(t, sol, h))

    s = cfg.solver
    curves = beta_sweep(tables, m, cfg.sweep, tol=s.tol, max_iter=s.max_iter, y_card=s.y_cardinality,
                        control_estimator=s.control_estimator, physics=cfg.physics,
                        on_solution=on_solution)
    conds, regions = _aggregate(cfg, curves)
    art.write_text(path, art.with_header("sweep", h, tradeoff_csv(curves)))
    art.write_text(out / "optimal.csv", art.with_header("sweep", h, optimal_csv(conds)))
    art.write_text(out / "regions.csv", art.with_header("sweep", h, regions_csv(regions)))
    n_bad = sum(not p.converged for c in curves for p in c.points)
    _emit(f"sweep: {len(curves)} curves x {len(cfg.sweep.betas())} betas, {n_bad} non-converged points", echo)
    _emit(_region_line(regions), echo)
    return path


# -- gaussian ------------------------------------------------------------------------


def gaussian_setup(cfg: ExperimentConfig) -> LQGSetup:
    g = cfg.gaussian
    if g.A is not None:
        system = LinearSystem(np.array(g.A, dtype=float), np.array(g.B, dtype=float),
                              np.array(g.Q, dtype=float), g.lam)
    else:
        system = linearized_upright(cfg.physics, g.lam)
    return LQGSetup(system, g.sigma_x_scale * np.eye(system.n_x),
                    g.sigma_u_scale * np.eye(system.n_u * g.horizon), g.horizon)


def gaussian_endpoint_errors(setup: LQGSetup) -> tuple[float, float]:
    """Errors of the two endpoint identities of the control-covariance recovery."""
    blocks = joint_covariance(setup)
    n = setup.system.n_x
    zero = recover_control_covariance(GaussianIBState(np.zeros((n, n)), np.eye(n)), blocks)
    ident = recover_control_covariance(GaussianIBState(np.eye(n), 1e-13 * np.eye(n)), blocks)
    e0 = float(np.abs(zero - blocks.sigma_u_marg).max())
    e1 = float(np.abs(ident - blocks.sigma_u_given_x).max())
    return e0, e1


def cmd_gaussian(cfg: ExperimentConfig, force: bool = False, echo=print) -> Path:
    out = _out(cfg)
    h = cfg.stage_hash("gaussian")
    path, report_path = out / "gaussian_curve.csv", out / "gaussian_report.txt"
    if not force and art.is_current(path, "gaussian", h) and art.is_current(report_path, "gaussian", h):
        _emit(f"gaussian: cache hit ({h})", echo)
        return path
    g = cfg.gaussian
    setup = gaussian_setup(cfg)
    betas = np.geomspace(g.beta_min, g.beta_max, g.n_betas)
    rows = gaussian_curve(setup, betas)
    ent = entropy_inequality_check(setup)
    e0, e1 = gaussian_endpoint_errors(setup)
    lines = [
        f"entropy_inequality_holds={'true' if ent.holds else 'false'}",
        f"det_conditional_precision={ent.det_conditional_precision!r}",
        f"det_prior_precision={ent.det_prior_precision!r}",
        f"endpoint_C0_error={e0!r} match={'true' if e0 < 1e-9 else 'false'}",
        f"endpoint_CI_error={e1!r} match={'true' if e1 < 1e-9 else 'false'}",
        f"collapsed_points={sum(r.collapsed for r in rows)}/{len(rows)}",
    ]
    if all(r.collapsed for r in rows):
        log.warning("bottleneck collapsed at every beta")
        lines.append("warning=collapsed at every beta")
    art.write_text(path, art.gaussian_curve_text(rows, h))
    art.write_text(report_path, art.header_line("gaussian", h) + "\n".join(lines) + "\n")
    for ln in lines:
        _emit(f"gaussian: {ln}", echo)
    return path


# -- report --------------------------------------------------------------------------


def trend_report(curves, beta_lo: float | None = None, beta_hi: float | None = None) -> list[str]:
    """Qualitative trend checks on a set of tradeoff curves."""
    lines = []
    by_region: dict[str, list] = {}
    drops_ok = 0
    for c in curves:
        by_region.setdefault(c.region, []).append(c)
        d1, d4 = quartile_drops(c)
        drops_ok += d1 > d4
    lines.append(f"first-quartile drop exceeds last-quartile drop for {drops_ok}/{len(curves)} angles")
    bad = []
    for c in by_region.get("SwingUpB", []):
        betas = c.betas
        lo = c.points[0] if beta_lo is None else c.points[int(np.argmin(abs(betas - beta_lo)))]
        hi = c.points[-1] if beta_hi is None else c.points[int(np.argmin(abs(betas - beta_hi)))]
        if hi.control_cost > lo.control_cost:
            bad.append(c.initial_angle)
    if "SwingUpB" in by_region:
        lines.append(f"SwingUpB control cost at largest beta <= smallest beta: "
                     f"{len(by_region['SwingUpB']) - len(bad)}/{len(by_region['SwingUpB'])}"
                     + (f" (violations at {bad})" if bad else ""))
    return lines


def cmd_report(cfg: ExperimentConfig, force: bool = False, echo=print) -> list[str]:
    out = _out(cfg)
    path = out / "tradeoff.csv"
    art.check_input(path, "sweep", cfg.stage_hash("sweep"), force)
    curves = read_tradeoff_csv(art.strip_header(path.read_text()))
    conds, regions = _aggregate(cfg, curves)
    lines = []
    for r in regions:
        lines.append(f"{r.region}: n={r.n} optimal compute mean {r.mean_optimal_compute:.4f} "
                     f"min {r.min_optimal_compute:.4f} max {r.max_optimal_compute:.4f} "
                     f"mean cost gap {r.mean_cost_gap:.4f}")
    lines.append(_region_line(regions))
    lines += trend_report(curves)
    rep = out / "gaussian_report.txt"
    if art.is_current(rep, "gaussian", cfg.stage_hash("gaussian")):
        lines += ["gaussian: " + ln for ln in art.strip_header(rep.read_text()).splitlines()]
    for ln in lines:
        _emit(ln, echo)
    return lines


# -- argument handling ---------------------------------------------------------------


def parse_angles(text: str) -> tuple[float, ...]:
    """``"5,10,15"`` or an inclusive range ``"start:stop:step"``."""
    text = text.strip()
    try:
        if ":" in text:
            lo, hi, step = (float(v) for v in text.split(":"))
            if not step > 0:
                raise ValueError
            n = int(np.floor(round((hi - lo) / step, 9)))
            return tuple(round(lo + step * k, 9) for k in range(n + 1))
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"cannot parse angle list {text!r}") from exc


def _common_flags(suppress: bool) -> argparse.ArgumentParser:
    d = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", default=d, help="YAML experiment config")
    p.add_argument("--seed", type=int, default=d)
    p.add_argument("--output-dir", metavar="PATH", default=d)
    p.add_argument("--angles", metavar="LIST", default=d, help="e.g. 5,10,15 or 5:180:5")
    p.add_argument("--beta-min", type=float, default=d)
    p.add_argument("--beta-max", type=float, default=d)
    p.add_argument("--beta-step", type=float, default=d)
    p.add_argument("--force", action="store_true", default=d,
                   help="recompute and accept inputs from other config hashes")
    p.add_argument("-v", "--verbose", action="store_true", default=d)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="piib", parents=[_common_flags(False)],
                                     description="Staged information-bottleneck analysis of cart-pole MPPI.")
    sub = parser.add_subparsers(dest="command", required=True)
    shared = _common_flags(True)
    helps = {
        "simulate": "run MPPI for every initial angle",
        "sample": "sample and prune control variations",
        "tables": "build ground-truth control tables",
        "sweep": "sweep beta and write tradeoff curves",
        "gaussian": "Gaussian information curve for a linear system",
        "report": "print aggregates from existing artifacts",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, parents=[shared], help=text)
        if name == "sweep":
            sp.add_argument("--dump-solutions", action="store_true",
                            help="write every (t, beta) solution under solutions/")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    try:
        sweep_kw = {}
        if args.angles is not None:
            sweep_kw["angles"] = parse_angles(args.angles)
        for flag in ("beta_min", "beta_max", "beta_step"):
            if getattr(args, flag) is not None:
                sweep_kw[flag] = getattr(args, flag)
        if sweep_kw:
            cfg = cfg.replace(sweep=dataclasses.replace(cfg.sweep, **sweep_kw))
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        if args.output_dir is not None:
            cfg = cfg.replace(output_dir=args.output_dir)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


COMMANDS = {
    "simulate": cmd_simulate,
    "sample": cmd_sample,
    "tables": cmd_tables,
    "sweep": cmd_sweep,
    "gaussian": cmd_gaussian,
    "report": cmd_report,
}

NUMERICAL_ERRORS = (
    StageFailure, SamplingStarvedError, NumericalDomainError, IBNumericalError, FloatingPointError,
    EvaluationSupportError, NormalizationError, DivergedRolloutError, NoViableRolloutError,
    BinningError, CoverageError,
)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        kw = {"force": bool(args.force)}
        if args.command == "sweep":
            kw["dump_solutions"] = args.dump_solutions
        COMMANDS[args.command](cfg, **kw)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (art.StageInputError, MissingConditionError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
