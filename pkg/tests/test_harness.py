import csv
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from rcmhomlab import ParameterError
from rcmhomlab.harness import emit_plot, load_config, parse_config, run


def _base_config(tmp_path, **overrides):
    cfg = {
        "experiment": "poisson-convergence",
        "dimension": 1,
        "law": "constant",
        "law_value": 1.0,
        "epsilons": [1 / 4, 1 / 8],
        "seeds": [1],
        "output_dir": str(tmp_path / "out"),
        "forcing_amplitude": np.pi**2 / 8,
        "reference_intervals": 128,
    }
    cfg.update(overrides)
    return cfg


def test_shipped_configs_parse():
    configs_dir = Path(__file__).resolve().parents[1] / "configs"
    names = sorted(p.name for p in configs_dir.glob("*.json"))
    assert len(names) == 7
    for path in configs_dir.glob("*.json"):
        cfg = load_config(path)
        assert cfg.experiment


def test_config_validation_errors(tmp_path):
    good = _base_config(tmp_path)
    for broken in (
        {"experiment": "nope"},
        {"epsilons": [1 / 8, 1 / 4]},
        {"epsilons": [0.3, 0.1]},
        {"seeds": []},
        {"law": "mystery"},
        {"dimension": 0},
        {"output_dir": ""},
    ):
        with pytest.raises(ParameterError):
            parse_config({**good, **broken})


def test_load_config_rejects_bad_files(tmp_path):
    missing = tmp_path / "none.json"
    with pytest.raises(ParameterError):
        load_config(missing)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ParameterError):
        load_config(bad)


def test_poisson_convergence_run_and_manifest(tmp_path):
    cfg = parse_config(_base_config(tmp_path))
    manifest = run(cfg)
    assert manifest.failure is None
    outdir = Path(cfg.output_dir)
    csv_path = outdir / "poisson_convergence.csv"
    assert csv_path.exists()
    with open(csv_path) as fh:
        rows = list(csv.DictReader(fh))
    errors = [float(r["l2_error"]) for r in rows]
    assert errors[1] < errors[0]
    # every emitted file is listed with a matching digest
    for name, digest in manifest.outputs.items():
        assert hashlib.sha256((outdir / name).read_bytes()).hexdigest() == digest
    assert (outdir / "manifest.json").exists()


def test_rerun_is_bit_identical(tmp_path):
    cfg_a = parse_config(_base_config(tmp_path, output_dir=str(tmp_path / "a")))
    cfg_b = parse_config(_base_config(tmp_path, output_dir=str(tmp_path / "b")))
    run(cfg_a)
    run(cfg_b)
    body_a = (tmp_path / "a" / "poisson_convergence.csv").read_bytes()
    body_b = (tmp_path / "b" / "poisson_convergence.csv").read_bytes()
    assert body_a == body_b


def test_thread_pool_does_not_change_the_output_bytes(tmp_path, monkeypatch):
    cfg_serial = parse_config(_base_config(tmp_path, output_dir=str(tmp_path / "s")))
    run(cfg_serial)
    monkeypatch.setenv("RCMHOMLAB_THREADS", "4")
    cfg_pooled = parse_config(_base_config(tmp_path, output_dir=str(tmp_path / "p")))
    run(cfg_pooled)
    assert (tmp_path / "s" / "poisson_convergence.csv").read_bytes() == (
        tmp_path / "p" / "poisson_convergence.csv"
    ).read_bytes()


def test_constant_coefficient_poisson_example(tmp_path):
    # exact reference A = 2I with f = (pi^2/2) cos cos: the limit solution is
    # the product cosine itself
    cfg = parse_config(
        _base_config(
            tmp_path,
            dimension=2,
            epsilons=[1 / 8, 1 / 16, 1 / 32],
            forcing_amplitude=np.pi**2 / 2,
            reference_intervals=256,
        )
    )
    manifest = run(cfg)
    assert manifest.failure is None
    with open(Path(cfg.output_dir) / "poisson_convergence.csv") as fh:
        errors = [float(r["l2_error"]) for r in csv.DictReader(fh)]
    assert all(b < a for a, b in zip(errors, errors[1:]))
    assert errors[-1] <= 2e-2


def test_spectral_convergence_emits_eigenvalue_tables(tmp_path):
    cfg = parse_config(
        _base_config(
            tmp_path,
            experiment="spectral-convergence",
            epsilons=[1 / 8, 1 / 16],
            k=2,
        )
    )
    manifest = run(cfg)
    assert manifest.failure is None
    outdir = Path(cfg.output_dir)
    with open(outdir / "eigenvalues.csv") as fh:
        reader = csv.DictReader(fh)
        assert reader.fieldnames == ["epsilon", "k", "lambda", "residual"]
        rows = list(reader)
    assert len(rows) == 4
    with open(outdir / "spectral_errors.csv") as fh:
        err_rows = list(csv.DictReader(fh))
    # constant-coefficient errors shrink with epsilon for each k
    k1 = [float(r["abs_error"]) for r in err_rows if r["k"] == "1"]
    assert k1[1] < k1[0]


def test_spectral_convergence_reproduces_the_closed_form_in_2d(tmp_path):
    cfg = parse_config(
        _base_config(
            tmp_path,
            experiment="spectral-convergence",
            dimension=2,
            epsilons=[1 / 8, 1 / 16],
        )
    )
    run(cfg)
    with open(Path(cfg.output_dir) / "eigenvalues.csv") as fh:
        for row in csv.DictReader(fh):
            eps = float(row["epsilon"])
            closed_form = 2 * (4 / eps**2) * np.sin(np.pi * eps / 4) ** 2
            assert abs(float(row["lambda"]) - closed_form) <= 1e-9


def test_emit_plot_slope_and_errors(tmp_path):
    cfg = parse_config(
        _base_config(
            tmp_path,
            experiment="spectral-convergence",
            epsilons=[1 / 8, 1 / 16, 1 / 32],
        )
    )
    run(cfg)
    csv_path = Path(cfg.output_dir) / "spectral_errors.csv"
    result = emit_plot(csv_path, "loglog:epsilon:abs_error")
    assert result.path.exists() and result.path.stat().st_size > 0
    assert 0.8 <= result.slope <= 2.2
    with pytest.raises(ParameterError):
        emit_plot(csv_path, "loglog:epsilon:missing_column")
    empty = tmp_path / "empty.csv"
    empty.write_text("x,y\n")
    with pytest.raises(ParameterError):
        emit_plot(empty, "loglog:x:y")
    assert not (tmp_path / "empty.svg").exists()
    with pytest.raises(ParameterError):
        emit_plot(csv_path, "pie:epsilon:abs_error")


def test_ahom_estimate_experiment(tmp_path):
    cfg = parse_config(
        _base_config(
            tmp_path,
            experiment="ahom-estimate",
            dimension=2,
            epsilons=[],
            rve_sides=[4, 8],
        )
    )
    manifest = run(cfg)
    assert manifest.failure is None
    payload = json.loads((Path(cfg.output_dir) / "ahom.json").read_text())
    mat = np.array([float(v) for v in payload["matrix"]]).reshape(2, 2)
    assert np.max(np.abs(mat - 2.0 * np.eye(2))) <= 1e-12
    assert payload["deviations"] == [0.0, 0.0]  # one record per (side, seed)
    with open(Path(cfg.output_dir) / "ahom_table.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert all(float(r["frobenius_deviation"]) <= 1e-12 for r in rows)


def test_moment_audit_experiment(tmp_path):
    cfg = parse_config(
        _base_config(
            tmp_path,
            experiment="moment-audit",
            dimension=2,
            law="iid_pareto_lower",
            law_gamma=0.3,
            epsilons=[],
            exponents=[-0.2],
            box_sides=[16, 32],
            nu_q=0.5,
        )
    )
    manifest = run(cfg)
    assert manifest.failure is None
    outdir = Path(cfg.output_dir)
    condition = json.loads((outdir / "moment_condition.json").read_text())
    assert condition["condition_holds"] is False  # gamma = 0.3 < 1 in d = 2
    with open(outdir / "nu_moments.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert all(float(r["mean_nu_l_q"]) <= float(r["mean_nu_q"]) for r in rows)


def test_inequality_audit_experiment(tmp_path):
    cfg = parse_config(
        _base_config(
            tmp_path,
            experiment="inequality-audit",
            dimension=2,
            epsilons=[1 / 4, 1 / 8],
            kinds=["poincare"],
            q=1.0,
            trials=1,
        )
    )
    manifest = run(cfg)
    assert manifest.failure is None
    payload = json.loads((Path(cfg.output_dir) / "audit_poincare.json").read_text())
    assert len(payload["ratios"]) == 2


def test_trap_demo_experiment(tmp_path):
    cfg = parse_config(
        _base_config(
            tmp_path,
            experiment="trap-demo",
            dimension=2,
            epsilons=[],
            trap_m=2,
            trap_delta=1e-6,
            box_sides=[8, 16],
        )
    )
    manifest = run(cfg)
    assert manifest.failure is None
    with open(Path(cfg.output_dir) / "trap_demo.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert all(float(r["suppression_factor"]) >= 1e3 for r in rows)
    unrescaled = [float(r["lambda1_trapped_unrescaled"]) for r in rows]
    assert unrescaled[1] < unrescaled[0]


def test_ldp_cumulant_experiment(tmp_path):
    cfg = parse_config(
        _base_config(
            tmp_path,
            experiment="ldp-cumulant",
            epsilons=[],
            potential="cos",
            t_values=[1000.0],
        )
    )
    with pytest.warns(UserWarning):
        manifest = run(cfg)
    assert manifest.failure is None
    with open(Path(cfg.output_dir) / "ldp_cumulant.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert abs(float(rows[0]["gap"])) <= 0.05 * abs(float(rows[0]["target"]))


def test_validation_failure_is_recorded_in_the_manifest(tmp_path):
    # pareto law with the exact-A_hom reference source is a config error
    cfg = parse_config(
        _base_config(tmp_path, law="iid_pareto_lower", law_gamma=1.5, dimension=2)
    )
    manifest = run(cfg)
    assert manifest.failure is not None
    assert manifest.failure_kind == "validation"
    assert (Path(cfg.output_dir) / "manifest.json").exists()


def test_solver_failure_is_recorded_in_the_manifest(tmp_path):
    cfg = parse_config(_base_config(tmp_path, tol_poisson=1e-300))
    with pytest.warns(RuntimeWarning):
        manifest = run(cfg)
    assert manifest.failure_kind == "solver"


def _cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "rcmhomlab.cli", *args],
        capture_output=True,
        text=True,
    )


def test_cli_run_plot_and_exit_codes(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(_base_config(tmp_path)))
    proc = _cli("run", str(cfg_path))
    assert proc.returncode == 0, proc.stderr
    csv_path = Path(json.loads(cfg_path.read_text())["output_dir"]) / "poisson_convergence.csv"
    proc = _cli("plot", str(csv_path), "loglog:epsilon:l2_error", "-o", str(tmp_path / "p.svg"))
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "p.svg").exists()

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(_base_config(tmp_path, experiment="nope")))
    assert _cli("run", str(bad)).returncode == 2
    # the audit subcommand refuses non-audit experiments
    assert _cli("audit", str(cfg_path)).returncode == 2

    solver_bad = tmp_path / "solver_bad.json"
    solver_bad.write_text(json.dumps(_base_config(tmp_path, tol_poisson=1e-300)))
    assert _cli("run", str(solver_bad)).returncode == 3
