"""Reading and writing stage artifacts.

Every file starts with one header line::

    # piib stage=<stage> config_hash=<hash> key=value ...

followed by CSV.  Floats are written with ``repr`` so that they round-trip
exactly, and nothing time-dependent is recorded, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pathintegral import GroundTruthTables

HEADER_TAG = "# piib"


class StageInputError(RuntimeError):
    """A stage input is missing or was produced under a different configuration."""


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def header_line(stage: str, config_hash: str, **fields) -> str:
    parts = [HEADER_TAG, f"stage={stage}", f"config_hash={config_hash}"]
    parts += [f"{k}={_fmt(v)}" for k, v in fields.items()]
    return " ".join(parts) + "\n"


def parse_header(line: str) -> dict:
    if not line.startswith(HEADER_TAG):
        raise StageInputError("missing artifact header")
    out = {}
    for tok in line[len(HEADER_TAG):].split():
        k, _, v = tok.partition("=")
        out[k] = v
    return out


def read_header(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise StageInputError(f"missing stage input {path}")
    with path.open() as fh:
        return parse_header(fh.readline())


def check_input(path, stage: str, expected_hash: str, force: bool = False) -> dict:
    """Header of ``path``; raises unless it came from ``stage`` under ``expected_hash``."""
    h = read_header(path)
    if h.get("stage") != stage:
        raise StageInputError(f"{path} is a {h.get('stage')!r} artifact, expected {stage!r}")
    if h.get("config_hash") != expected_hash and not force:
        raise StageInputError(
            f"{path} was produced with config hash {h.get('config_hash')}, current is "
            f"{expected_hash}; rerun the {stage} stage or pass --force"
        )
    return h


def is_current(path, stage: str, expected_hash: str) -> bool:
    try:
        h = read_header(path)
    except StageInputError:
        return False
    return h.get("stage") == stage and h.get("config_hash") == expected_hash


def write_text(path, text: str) -> None:
    """Write via a temporary file so a crash never leaves a truncated artifact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _csv_body(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header is not None:
        w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _csv_rows(path) -> list[dict]:
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def angle_tag(angle: float) -> str:
    return f"{float(angle):g}".replace(".", "p")


# -- trajectories ----------------------------------------------------------------

TRAJECTORY_HEADER = ("angle", "t", "phi", "phi_dot", "q", "q_dot", "u")


def trajectories_text(results, config_hash: str) -> str:
    rows = []
    for r in results:
        T = len(r.controls)
        for t in range(T + 1):
            s = r.trajectory.states[t]
            rows.append((float(r.initial_angle), t, *map(float, s), float(r.controls[t]) if t < T else None))
    return header_line("simulate", config_hash) + _csv_body(TRAJECTORY_HEADER, rows)


def read_trajectories(path) -> dict[float, np.ndarray]:
    """Control sequence per angle."""
    out: dict[float, list] = {}
    for row in _csv_rows(path):
        if row["u"] != "":
            out.setdefault(float(row["angle"]), []).append(float(row["u"]))
    return {a: np.array(u) for a, u in out.items()}


def simulate_summary_text(entries, config_hash: str) -> str:
    """``entries``: (angle, success, final_angle, attempts, total_cost)."""
    return header_line("simulate", config_hash) + _csv_body(
        ("angle", "success", "final_angle", "attempts", "total_cost"), entries
    )


# -- bundles ------------------------------------------------------------------------


@dataclass(frozen=True)
class LoadedBundle:
    angle: float
    controls: np.ndarray  # (S, T)
    suffix_costs: np.ndarray  # (S, T+1)
    bins: np.ndarray  # (S, T)
    meta: dict = field(default_factory=dict)

    @property
    def step_costs(self) -> np.ndarray:
        return self.suffix_costs[:, :-1] - self.suffix_costs[:, 1:]


def bundle_text(bundle, bins, config_hash: str, *, dt: float, lam: float, seed: int) -> str:
    """Header record then one row per sample: controls, suffix costs, bin indices."""
    T = bundle.horizon
    head = header_line(
        "sample", config_hash, angle=float(bundle.initial_angle), T=T, dt=float(dt), **{"lambda": float(lam)},
        seed=seed, acceptance_ratio=float(bundle.acceptance_ratio), base_cost=float(bundle.base_cost),
        attempts=bundle.attempts, n_samples=bundle.n_samples,
    )
    cols = (["sample"] + [f"u_{t}" for t in range(T)] + [f"S_{t}" for t in range(T + 1)]
            + [f"b_{t}" for t in range(T)])
    rows = (
        (k, *map(float, bundle.controls[k]), *map(float, bundle.suffix_costs[k]), *map(int, bins[k]))
        for k in range(bundle.n_samples)
    )
    return head + _csv_body(cols, rows)


def read_bundle(path, audit: bool = True) -> LoadedBundle:
    """Load a bundle; with ``audit`` every sample is checked against the pruning rule."""
    meta = read_header(path)
    T = int(meta["T"])
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    data = np.loadtxt(lines[1:], delimiter=",", ndmin=2)
    controls = data[:, 1:1 + T]
    suffix = data[:, 1 + T:2 + 2 * T]
    bins = data[:, 2 + 2 * T:].astype(np.int64)
    if audit:
        ratio, base = float(meta["acceptance_ratio"]), float(meta["base_cost"])
        worst = float(suffix[:, 0].max())
        if worst > ratio * base * (1 + 1e-12):
            raise StageInputError(f"{path}: sample cost {worst} exceeds {ratio} x base {base}")
    return LoadedBundle(float(meta["angle"]), controls, suffix, bins, meta)


def bins_text(u_min: float, u_max: float, increment: float, M: int, config_hash: str) -> str:
    return header_line("sample", config_hash) + _csv_body(
        ("u_min", "u_max", "increment", "M"), [(float(u_min), float(u_max), float(increment), M)]
    )


def read_bins(path) -> dict:
    row = _csv_rows(path)[0]
    return {"u_min": float(row["u_min"]), "u_max": float(row["u_max"]),
            "increment": float(row["increment"]), "M": int(row["M"])}


# -- tables ----------------------------------------------------------------------------


def tables_text(tables: GroundTruthTables, config_hash: str) -> str:
    T, N, M = tables.tables.shape
    head = header_line("tables", config_hash, N=N, M=M, T=T)
    edges = "# bin_edges=" + ",".join(repr(float(e)) for e in tables.bin_edges) + "\n"
    cols = ["t", "i"] + [f"p_{b}" for b in range(M)]
    rows = ((t, i, *map(float, tables.tables[t, i])) for t in range(T) for i in range(N))
    return head + edges + _csv_body(cols, rows)


def read_tables(path) -> GroundTruthTables:
    meta = read_header(path)
    T, N, M = int(meta["T"]), int(meta["N"]), int(meta["M"])
    with Path(path).open() as fh:
        fh.readline()
        edge_line = fh.readline()
        if not edge_line.startswith("# bin_edges="):
            raise StageInputError(f"{path}: missing bin edges")
        edges = np.array([float(v) for v in edge_line.split("=", 1)[1].split(",")])
        data = np.loadtxt(fh, delimiter=",", skiprows=1, ndmin=2)
    if data.shape != (T * N, M + 2):
        raise StageInputError(f"{path}: expected {T * N} rows of {M + 2} fields")
    try:
        return GroundTruthTables(edges, data[:, 2:].reshape(T, N, M))
    except ValueError as exc:
        raise StageInputError(f"{path}: {exc}") from exc


# -- solution dumps --------------------------------------------------------------------


def solution_dump_text(t: int, sol, config_hash: str) -> str:
    """Three distribution tables of one (t, beta) solve plus a summary row."""
    head = header_line("sweep", config_hash, t=t, beta=float(sol.beta))
    parts = [head]
    parts.append("# summary\n" + _csv_body(
        ("i_xy", "i_yu", "f_ib", "residual", "iterations", "converged"),
        [(sol.i_xy, sol.i_yu, sol.f_ib, sol.residual, sol.iterations_used, sol.converged)],
    ))
    parts.append("# p_y_given_x\n" + _csv_body(None, sol.p_y_given_x.tolist()))
    parts.append("# p_y\n" + _csv_body(None, [sol.p_y.tolist()]))
    parts.append("# p_u_given_y\n" + _csv_body(None, sol.p_u_given_y.tolist()))
    return "".join(parts)


def read_solution_dump(path) -> dict:
    sections: dict[str, list[str]] = {}
    name = None
    with Path(path).open() as fh:
        fh.readline()
        for line in fh:
            if line.startswith("# "):
                name = line[2:].strip()
                sections[name] = []
            elif name is not None:
                sections[name].append(line)
    summary = next(csv.DictReader(sections["summary"]))
    arr = lambda key: np.loadtxt(sections[key], delimiter=",", ndmin=2)  # noqa: E731
    return {
        "i_xy": float(summary["i_xy"]),
        "i_yu": float(summary["i_yu"]),
        "f_ib": float(summary["f_ib"]),
        "residual": float(summary["residual"]),
        "iterations": int(summary["iterations"]),
        "converged": summary["converged"] == "true",
        "p_y_given_x": arr("p_y_given_x"),
        "p_y": arr("p_y")[0],
        "p_u_given_y": arr("p_u_given_y"),
    }


def gaussian_curve_text(rows, config_hash: str) -> str:
    return header_line("gaussian", config_hash) + _csv_body(
        ("beta", "i_xy", "i_yu", "f_ib", "det_sigma_u_given_y", "collapsed", "converged"),
        ((r.beta, r.i_xy, r.i_yu, r.f_ib, r.det_sigma_u_given_y, r.collapsed, r.converged) for r in rows),
    )


def with_header(stage: str, config_hash: str, body: str) -> str:
    return header_line(stage, config_hash) + body


def strip_header(text: str) -> str:
    return "".join(ln for ln in text.splitlines(keepends=True) if not ln.startswith("#"))

