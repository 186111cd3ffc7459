"""Experiment orchestration: configs, runners, manifests, plots.

Configs are flat JSON objects. Every experiment writes CSV/JSON artifacts
whose bodies are bit-identical across reruns of the same config (numbers
are printed with 17 significant digits); wall-clock information lives only
in the run manifest, which also records a SHA-256 digest of every emitted
file. Independent (epsilon, seed) cells may run on a thread pool sized by
the RCMHOMLAB_THREADS environment variable (default 1); results are keyed
and sorted before writing so concurrency never changes the output bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .corrector import estimate_A_hom, exact_a_hom
from .env import (
    Constant,
    Geometry,
    IidParetoLower,
    IidTwoPoint,
    LongRangePolynomial,
    Periodic1D,
    empirical_moment,
    moment_condition_report,
    sample_environment,
    trap_environment,
)
from .errors import ParameterError, RcmHomLabError, SolverError
from .lattice import assemble_operator, embed, restrict
from .paths import inequality_audit, nu_field, nu_l_field
from .solve import (
    HomogenizedProblem,
    eigs_smallest,
    homogenized_eigs,
    homogenized_solve,
    poisson_solve,
)
from .walker import cumulant_spectral

__all__ = [
    "ExperimentConfig",
    "RunManifest",
    "PlotResult",
    "parse_config",
    "load_config",
    "run",
    "emit_plot",
    "EXPERIMENTS",
]

EXPERIMENTS = (
    "poisson-convergence",
    "spectral-convergence",
    "ahom-estimate",
    "moment-audit",
    "inequality-audit",
    "trap-demo",
    "ldp-cumulant",
)


@dataclass
class ExperimentConfig:
    experiment: str
    dimension: int
    law: object
    epsilons: list[float]
    seeds: list[int]
    output_dir: str
    tol_poisson: float = 1e-10
    tol_eigen: float = 1e-8
    extras: dict = field(default_factory=dict)

    def echo(self) -> dict:
        return {
            "experiment": self.experiment,
            "dimension": self.dimension,
            "law": self.law.describe(),
            "epsilons": self.epsilons,
            "seeds": self.seeds,
            "output_dir": self.output_dir,
            "tol_poisson": self.tol_poisson,
            "tol_eigen": self.tol_eigen,
            "extras": self.extras,
        }


@dataclass
class RunManifest:
    config: dict
    version: str
    stage_seconds: dict[str, float]
    outputs: dict[str, str]  # filename -> sha256 of the bytes
    failure: str | None = None
    failure_kind: str | None = None
    started_at: str = ""
    finished_at: str = ""

    def write(self, outdir: Path) -> Path:
        path = outdir / "manifest.json"
        payload = {
            "config": self.config,
            "version": self.version,
            "stage_seconds": self.stage_seconds,
            "outputs": self.outputs,
            "failure": self.failure,
            "failure_kind": self.failure_kind,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
        return path


def _parse_law(cfg: dict):
    name = cfg.get("law")
    if name == "constant":
        return Constant(float(cfg.get("law_value", 1.0)))
    if name == "iid_pareto_lower":
        return IidParetoLower(float(cfg["law_gamma"]))
    if name == "iid_two_point":
        return IidTwoPoint(float(cfg["law_a"]), float(cfg["law_b"]), float(cfg["law_p"]))
    if name == "long_range_polynomial":
        base = _parse_law(
            {
                "law": cfg["law_base"],
                "law_value": cfg.get("law_base_value", 1.0),
                "law_gamma": cfg.get("law_base_gamma"),
                "law_a": cfg.get("law_base_a"),
                "law_b": cfg.get("law_base_b"),
                "law_p": cfg.get("law_base_p"),
            }
        )
        return LongRangePolynomial(base, float(cfg["law_alpha"]))
    if name == "periodic_1d":
        return Periodic1D(tuple(cfg["law_values"]))
    raise ParameterError(f"unknown or missing law {name!r}")


_KNOWN_KEYS = {
    "experiment",
    "dimension",
    "law",
    "law_value",
    "law_gamma",
    "law_a",
    "law_b",
    "law_p",
    "law_alpha",
    "law_base",
    "law_base_value",
    "law_base_gamma",
    "law_base_a",
    "law_base_b",
    "law_base_p",
    "law_values",
    "epsilons",
    "seeds",
    "output_dir",
    "tol_poisson",
    "tol_eigen",
}


def parse_config(cfg: dict) -> ExperimentConfig:
    experiment = cfg.get("experiment")
    if experiment not in EXPERIMENTS:
        raise ParameterError(f"experiment must be one of {EXPERIMENTS}, got {experiment!r}")
    d = int(cfg.get("dimension", 0))
    if d < 1:
        raise ParameterError("dimension must be a positive integer")
    law = _parse_law(cfg)
    law.validate(d)
    epsilons = [float(e) for e in cfg.get("epsilons", [])]
    needs_eps = experiment in ("poisson-convergence", "spectral-convergence", "inequality-audit")
    if needs_eps:
        if not epsilons or any(b >= a for a, b in zip(epsilons, epsilons[1:])):
            raise ParameterError("epsilons must be a strictly decreasing list")
        for e in epsilons:
            j = math.log2(1.0 / e)
            if abs(j - round(j)) > 1e-9:
                raise ParameterError(f"epsilon {e} is not of the form 1/2^j")
    seeds = [int(s) for s in cfg.get("seeds", [])]
    if not seeds:
        raise ParameterError("seeds must be a nonempty list")
    output_dir = cfg.get("output_dir")
    if not output_dir:
        raise ParameterError("output_dir is required")
    extras = {k: v for k, v in cfg.items() if k not in _KNOWN_KEYS}
    return ExperimentConfig(
        experiment=experiment,
        dimension=d,
        law=law,
        epsilons=epsilons,
        seeds=seeds,
        output_dir=str(output_dir),
        tol_poisson=float(cfg.get("tol_poisson", 1e-10)),
        tol_eigen=float(cfg.get("tol_eigen", 1e-8)),
        extras=extras,
    )


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ParameterError(f"cannot read config {path}: {exc}") from exc
    return parse_config(raw)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def _write_csv(path: Path, header: list[str], rows: list[tuple]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _threads() -> int:
    return max(1, int(os.environ.get("RCMHOMLAB_THREADS", "1")))


def _pmap(fn, keys):
    workers = _threads()
    if workers == 1:
        return {k: fn(k) for k in keys}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        vals = list(pool.map(fn, keys))
    return dict(zip(keys, vals))


def _forcing(cfg: ExperimentConfig):
    amp = float(cfg.extras.get("forcing_amplitude", 1.0))

    def f(pts):
        return amp * np.prod(np.cos(0.5 * np.pi * pts), axis=1)

    return f


def _potential(cfg: ExperimentConfig):
    name = cfg.extras.get("potential", "none")
    if name == "none":
        return None
    if name == "cos":
        amp = float(cfg.extras.get("potential_amplitude", 1.0))

        def V(pts):
            return amp * np.prod(np.cos(0.5 * np.pi * pts), axis=1)

        return V
    raise ParameterError(f"unknown potential {name!r}")


def _reference_matrix(cfg: ExperimentConfig):
    source = cfg.extras.get("ahom_source", "exact")
    if source == "exact":
        mat = exact_a_hom(cfg.law, cfg.dimension)
        if mat is None:
            raise ParameterError(
                "law has no closed-form A_hom; set ahom_source='rve' with rve_sides/rve_seeds"
            )
        return mat
    if source == "rve":
        sides = [int(v) for v in cfg.extras.get("rve_sides", [16, 32])]
        seeds = [int(v) for v in cfg.extras.get("rve_seeds", cfg.seeds)]
        mat, _ = estimate_A_hom(cfg.law, cfg.dimension, sides, seeds)
        return mat
    raise ParameterError(f"ahom_source must be 'exact' or 'rve', got {source!r}")


# -- experiment bodies --------------------------------------------------------


def _exp_poisson_convergence(cfg: ExperimentConfig, outdir: Path, stages: dict) -> list[Path]:
    f = _forcing(cfg)
    t0 = time.perf_counter()
    ahom = _reference_matrix(cfg)
    m_ref = int(cfg.extras.get("reference_intervals", 256))
    u_ref = homogenized_solve(HomogenizedProblem(A=ahom.A, f=f, V=None, m_intervals=m_ref))
    stages["reference"] = time.perf_counter() - t0
    h = u_ref.h
    centers_axis = -1.0 + h * (np.arange(m_ref) + 0.5)
    mesh = np.meshgrid(*([centers_axis] * cfg.dimension), indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    ref_vals = u_ref.interp(pts)

    def cell(key):
        eps, seed = key
        n = round(1.0 / eps)
        env = sample_environment(cfg.law, Geometry(cfg.dimension, n), seed)
        op = assemble_operator(env, eps)
        u = poisson_solve(op, restrict(f, eps, cfg.dimension), tol=cfg.tol_poisson)
        diff = embed(u)(pts) - ref_vals
        return float(np.sqrt(h ** cfg.dimension * np.sum(diff ** 2)))

    t0 = time.perf_counter()
    keys = [(eps, seed) for eps in cfg.epsilons for seed in cfg.seeds]
    errors = _pmap(cell, keys)
    stages["solves"] = time.perf_counter() - t0
    rows = [(eps, seed, errors[(eps, seed)]) for eps, seed in keys]
    path = outdir / "poisson_convergence.csv"
    _write_csv(path, ["epsilon", "seed", "l2_error"], rows)
    ahom_path = outdir / "ahom_reference.json"
    ahom_path.write_text(ahom.to_json(), encoding="utf-8")
    return [path, ahom_path]


def _exp_spectral_convergence(cfg: ExperimentConfig, outdir: Path, stages: dict) -> list[Path]:
    V = _potential(cfg)
    k = int(cfg.extras.get("k", 1))
    t0 = time.perf_counter()
    ahom = _reference_matrix(cfg)
    ref_vals, _ = homogenized_eigs(ahom.A, V, k)
    stages["reference"] = time.perf_counter() - t0

    def cell(key):
        eps, seed = key
        n = round(1.0 / eps)
        env = sample_environment(cfg.law, Geometry(cfg.dimension, n), seed)
        op = assemble_operator(env, eps, V=V)
        pairs = eigs_smallest(op, k, tol=cfg.tol_eigen)
        return pairs.values, pairs.residuals

    t0 = time.perf_counter()
    keys = [(eps, seed) for eps in cfg.epsilons for seed in cfg.seeds]
    results = _pmap(cell, keys)
    stages["solves"] = time.perf_counter() - t0
    eig_rows, err_rows = [], []
    for eps, seed in keys:
        vals, resid = results[(eps, seed)]
        for j in range(k):
            eig_rows.append((eps, j + 1, vals[j], resid[j]))
            err_rows.append((eps, j + 1, ref_vals[j], abs(vals[j] - ref_vals[j])))
    p1 = outdir / "eigenvalues.csv"
    _write_csv(p1, ["epsilon", "k", "lambda", "residual"], eig_rows)
    p2 = outdir / "spectral_errors.csv"
    _write_csv(p2, ["epsilon", "k", "lambda_ref", "abs_error"], err_rows)
    return [p1, p2]


def _exp_ahom_estimate(cfg: ExperimentConfig, outdir: Path, stages: dict) -> list[Path]:
    sides = [int(v) for v in cfg.extras.get("rve_sides", [8, 16])]
    t0 = time.perf_counter()
    mat, records = estimate_A_hom(cfg.law, cfg.dimension, sides, cfg.seeds)
    stages["rve"] = time.perf_counter() - t0
    p1 = outdir / "ahom.json"
    report = {
        "law": cfg.law.describe(),
        "dimension": cfg.dimension,
        "sides": sides,
        "seeds": cfg.seeds,
        "matrix": [f"{v:.17g}" for v in mat.A.ravel()],  # row-major
        "lambda_min": mat.lambda_min(),
        "d_eff": [f"{v:.17g}" for v in mat.d_eff.ravel()],
        "deviations": [r["frobenius_deviation"] for r in records],
    }
    p1.write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    rows = [
        (
            r["side"],
            r["seed"],
            r["frobenius_deviation"],
            float(np.min(np.linalg.eigvalsh(r["matrix"]))),
            int(r["spd"]),
        )
        for r in records
    ]
    p2 = outdir / "ahom_table.csv"
    _write_csv(p2, ["side", "seed", "frobenius_deviation", "lambda_min", "spd"], rows)
    return [p1, p2]


def _exp_moment_audit(cfg: ExperimentConfig, outdir: Path, stages: dict) -> list[Path]:
    exponents = [float(v) for v in cfg.extras.get("exponents", [-0.2])]
    sides = [int(v) for v in cfg.extras.get("box_sides", [32, 64])]
    nu_q = float(cfg.extras.get("nu_q", 0.5))
    nu_len = int(cfg.extras.get("nu_l", 9))
    rows = []
    t0 = time.perf_counter()
    for n in sides:
        for seed in cfg.seeds:
            env = sample_environment(cfg.law, Geometry(cfg.dimension, n), seed)
            for q in exponents:
                rows.append((n, seed, q, empirical_moment(env, q)))
    stages["moments"] = time.perf_counter() - t0
    p1 = outdir / "edge_moments.csv"
    _write_csv(p1, ["n", "seed", "exponent", "empirical_mean"], rows)
    nu_rows = []
    t0 = time.perf_counter()
    for n in sides:
        for seed in cfg.seeds:
            env = sample_environment(cfg.law, Geometry(cfg.dimension, n), seed)
            plain = nu_field(env, n).moment(nu_q)
            boosted = nu_l_field(env, n, nu_len).moment(nu_q)
            nu_rows.append((n, seed, nu_q, plain, boosted))
    stages["nu_measures"] = time.perf_counter() - t0
    p2 = outdir / "nu_moments.csv"
    _write_csv(p2, ["n", "seed", "q", "mean_nu_q", "mean_nu_l_q"], nu_rows)
    p3 = outdir / "moment_condition.json"
    p3.write_text(
        json.dumps(moment_condition_report(cfg.law, cfg.dimension), indent=2, sort_keys=True),
        encoding="utf-8",
    )
    return [p1, p2, p3]


def _exp_inequality_audit(cfg: ExperimentConfig, outdir: Path, stages: dict) -> list[Path]:
    kinds = cfg.extras.get("kinds", ["poincare", "sobolev", "moser"])
    q = float(cfg.extras.get("q", max(1.0, cfg.dimension / 2.0)))
    l = int(cfg.extras.get("l", 9))
    trials = int(cfg.extras.get("trials", 1))
    n_env = round(1.0 / cfg.epsilons[-1])
    written = []
    rows = []
    for kind in kinds:
        t0 = time.perf_counter()
        env = sample_environment(cfg.law, Geometry(cfg.dimension, n_env), cfg.seeds[0])
        report = inequality_audit(
            kind, env, cfg.epsilons, q=q, l=l, trials=trials, seed=cfg.seeds[0],
            tol=cfg.tol_poisson,
        )
        stages[f"audit_{kind}"] = time.perf_counter() - t0
        p = outdir / f"audit_{kind}.json"
        p.write_text(report.to_json(), encoding="utf-8")
        written.append(p)
        for eps, ratio, uniform in zip(report.epsilons, report.ratios, report.uniform_ratios):
            rows.append((kind, eps, ratio, uniform))
    p = outdir / "audit_ratios.csv"
    _write_csv(p, ["kind", "epsilon", "ratio", "uniform_ratio"], rows)
    written.append(p)
    return written


def _exp_trap_demo(cfg: ExperimentConfig, outdir: Path, stages: dict) -> list[Path]:
    m = int(cfg.extras.get("trap_m", 2))
    delta = float(cfg.extras.get("trap_delta", 1e-6))
    sides = [int(v) for v in cfg.extras.get("box_sides", [8, 16, 32])]
    seed = cfg.seeds[0]

    def cell(n):
        base = sample_environment(cfg.law, Geometry(cfg.dimension, n), seed)
        trapped = trap_environment(base, m, delta)
        eps = 1.0 / n
        lam_t = eigs_smallest(assemble_operator(trapped, eps), 1, tol=cfg.tol_eigen).values[0]
        lam_u = eigs_smallest(assemble_operator(base, eps), 1, tol=cfg.tol_eigen).values[0]
        return lam_t, lam_u

    t0 = time.perf_counter()
    results = _pmap(cell, sides)
    stages["eigensolves"] = time.perf_counter() - t0
    rows = []
    for n in sides:
        lam_t, lam_u = results[n]
        rows.append((n, lam_t, lam_u, lam_t / n ** 2, lam_u / n ** 2, lam_u / lam_t))
    path = outdir / "trap_demo.csv"
    _write_csv(
        path,
        [
            "n",
            "lambda1_trapped",
            "lambda1_untrapped",
            "lambda1_trapped_unrescaled",
            "lambda1_untrapped_unrescaled",
            "suppression_factor",
        ],
        rows,
    )
    return [path]


def _exp_ldp_cumulant(cfg: ExperimentConfig, outdir: Path, stages: dict) -> list[Path]:
    t_values = [float(v) for v in cfg.extras.get("t_values", [100.0, 1000.0, 10000.0])]
    exponent = float(cfg.extras.get("alpha_exponent", 0.4))
    V = _potential(cfg)
    ahom = _reference_matrix(cfg)
    seed = cfg.seeds[0]
    rows = []
    t0 = time.perf_counter()
    for t in t_values:
        alpha = t ** exponent
        n_box = max(math.ceil(alpha), 2)
        env = sample_environment(cfg.law, Geometry(cfg.dimension, n_box), seed)
        est = cumulant_spectral(env, V, t, alpha, ahom=ahom, tol=cfg.tol_eigen)
        gap = abs(est.value - est.target)
        rows.append((t, alpha, est.value, est.target, gap))
    stages["cumulants"] = time.perf_counter() - t0
    path = outdir / "ldp_cumulant.csv"
    _write_csv(path, ["t", "alpha_t", "Lambda_t", "target", "gap"], rows)
    return [path]


_BODIES = {
    "poisson-convergence": _exp_poisson_convergence,
    "spectral-convergence": _exp_spectral_convergence,
    "ahom-estimate": _exp_ahom_estimate,
    "moment-audit": _exp_moment_audit,
    "inequality-audit": _exp_inequality_audit,
    "trap-demo": _exp_trap_demo,
    "ldp-cumulant": _exp_ldp_cumulant,
}


def run(config: ExperimentConfig) -> RunManifest:
    """Execute the configured experiment; always writes a manifest.

    On a stage failure the manifest records the error and the digests of
    whatever files were completed; it is returned rather than raised so
    partial outputs stay inspectable (the CLI turns it into exit code 3).
    """
    outdir = Path(config.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    stages: dict[str, float] = {}
    started = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    written: list[Path] = []
    failure = failure_kind = None
    try:
        written = _BODIES[config.experiment](config, outdir, stages)
    except RcmHomLabError as exc:
        failure = str(exc)
        failure_kind = "solver" if isinstance(exc, SolverError) else "validation"
        written = [p for p in outdir.iterdir() if p.suffix in (".csv", ".json") and p.name != "manifest.json"]
    manifest = RunManifest(
        config=config.echo(),
        version=__version__,
        stage_seconds={k: round(v, 6) for k, v in stages.items()},
        outputs={p.name: _sha256(p) for p in sorted(written)},
        failure=failure,
        failure_kind=failure_kind,
        started_at=started,
        finished_at=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    )
    manifest.write(outdir)
    return manifest


@dataclass
class PlotResult:
    path: Path
    slope: float | None


def emit_plot(csv_path, spec: str, out_path=None) -> PlotResult:
    """Render a CSV series as a vector-graphics chart.

    ``spec`` is "loglog:<xcol>:<ycol>" or "semilogy:<xcol>:<ycol>". For
    log-log charts the least-squares slope of log y against log x is
    annotated in the title and returned.
    """
    parts = spec.split(":")
    if len(parts) != 3 or parts[0] not in ("loglog", "semilogy"):
        raise ParameterError("plot spec must be 'loglog:<xcol>:<ycol>' or 'semilogy:<xcol>:<ycol>'")
    scale, xcol, ycol = parts
    csv_path = Path(csv_path)
    with open(csv_path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or xcol not in reader.fieldnames or ycol not in reader.fieldnames:
            raise ParameterError(f"csv lacks required columns {xcol!r}, {ycol!r}")
        xs, ys = [], []
        for record in reader:
            xs.append(float(record[xcol]))
            ys.append(float(record[ycol]))
    if not xs:
        raise ParameterError("csv has no data rows; nothing to plot")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    slope = None
    fig, ax = plt.subplots(figsize=(5, 4))
    if scale == "loglog":
        ax.loglog(xs, ys, "o-")
        positive = [(x, y) for x, y in zip(xs, ys) if x > 0 and y > 0]
        if len(positive) >= 2:
            lx = np.log([p[0] for p in positive])
            ly = np.log([p[1] for p in positive])
            slope = float(np.polyfit(lx, ly, 1)[0])
            ax.set_title(f"{ycol} vs {xcol} (slope {slope:.3f})")
        else:
            ax.set_title(f"{ycol} vs {xcol}")
    else:
        ax.semilogy(xs, ys, "o-")
        ax.set_title(f"{ycol} vs {xcol}")
    ax.set_xlabel(xcol)
    ax.set_ylabel(ycol)
    ax.grid(True, which="both", alpha=0.3)
    out = Path(out_path) if out_path else csv_path.with_suffix(".svg")
    fig.savefig(out, format=out.suffix.lstrip(".") or "svg")
    plt.close(fig)
    return PlotResult(path=out, slope=slope)
