"""Acceptance suite: one test per criterion, run at the stated tolerances.

Each test prints a single ``PASS``/``FAIL`` line (collected again in the
terminal summary).  Criteria 2 to 8 run the shipped configs under
``configs/`` through the experiment harness with their fixed seeds; 1 and 9
additionally exercise the library directly.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from homoglab import media
from homoglab.harness import load_config, run_experiment
from homoglab.solvers import (BoxDomain, fit_gaussian_bound, fundamental_probe, march,
                              solve_cascade_pde, solve_fine, solve_homogenized, solve_limit_spde)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
LINES: dict[int, str] = {}


def _report(num: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {num}: {title} ({detail})"
    LINES[num] = line
    print(line)


def _run(name: str, tmp_path):
    t0 = time.perf_counter()
    rec = run_experiment(load_config(CONFIGS / name), out_dir=tmp_path / name[:-5])
    return rec, time.perf_counter() - t0


def _failed(rec) -> str:
    bad = [f"{c['quantity']}={c['value']:.4g} tol {c['tolerance']:.3g}" for c in rec.checks
           if not c["pass"]]
    return "; ".join(bad) if bad else "all checks pass"


def _by_name(rec, quantity, method=None):
    for c in rec.checks:
        if c["quantity"] == quantity and (method is None or c["method"] == method):
            return c
    raise KeyError(quantity)


def test_criterion_1_effective_matrix(tmp_path):
    rec, secs = _run("acc1_effective_matrix.json", tmp_path)
    a = rec.results["a_eff"][0][0]
    flux = _by_name(rec, "flux_constancy")["value"]
    ok = (abs(a - np.sqrt(3.0)) < 1e-6 and flux < 1e-8 and rec.config.n_cell == 256
          and secs < 1.0 and rec.passed)
    _report(1, "effective matrix oracle", ok,
            f"a_eff={a:.10f}, |a_eff-sqrt3|={abs(a - np.sqrt(3)):.2e}, flux dev={flux:.2e}, {secs:.2f}s")
    assert ok


def test_criterion_2_cascade_residuals(tmp_path):
    rec, secs = _run("acc2_cascade.json", tmp_path)
    res = [c for c in rec.checks if c["quantity"].startswith("residual_")]
    means = [c for c in rec.checks if c["quantity"].startswith("mean_")]
    worst_r = max(c["value"] for c in res)
    worst_m = max(c["value"] for c in means)
    ok = worst_r < 1e-6 and worst_m < 1e-12 and secs < 10.0 and rec.passed and len(res) >= 2
    _report(2, "corrector cascade residuals", ok,
            f"max residual={worst_r:.2e}, max |mean|={worst_m:.2e}, {secs:.1f}s")
    assert ok


def test_criterion_3_lambda_cross_validation(tmp_path):
    rec, secs = _run("acc3_lambda.json", tmp_path)
    pois = _by_name(rec, "Lambda_identity", "poisson")
    corr = _by_name(rec, "Lambda_identity", "correlation")
    model = _by_name(rec, "Lambda_model")
    ok_p = abs(pois["value"] - 2.0) < 1e-3
    ok_c = abs(corr["value"] - 2.0) <= 0.10 * 2.0
    model_rel = abs(model["value"] - model["target"]) / abs(model["target"])
    ok_m = model_rel < 0.10
    ok = ok_p and ok_c and ok_m and secs < 30.0
    _report(3, "Lambda cross-validation", ok,
            f"poisson={pois['value']:.6f}, correlation={corr['value']:.4f} +- {corr['stderr']:.3f} "
            f"(batch-means SE), model routes {model['value']:.4e} vs {model['target']:.4e} (rel {model_rel:.3f}), {secs:.1f}s")
    assert ok


def test_criterion_4_invariance_probe(tmp_path):
    rec, secs = _run("acc4_invariance.json", tmp_path)
    v = _by_name(rec, "var_zeta_T1")
    lin = _by_name(rec, "var_T2_minus_2var_T1")
    rel = abs(v["value"] - v["target"]) / v["target"]
    zlin = abs(lin["value"]) / lin["stderr"]
    ok = (rel <= 0.10 and zlin <= 2.0 and rec.passed and secs < 120.0
          and rec.config.replicates == 64 and rec.config.eps == [0.2, 0.1, 0.05])
    _report(4, "invariance-principle probe", ok,
            f"Var(zeta(1))={v['value']:.4f} +- {v['stderr']:.4f} vs Lambda={v['target']:.4f} "
            f"(rel {rel:.3f}); |Var(2)-2Var(1)|/SE={zlin:.2f}, {secs:.1f}s")
    assert ok


def test_criterion_5_fluctuation_scaling(tmp_path):
    rec, secs = _run("acc5_convergence.json", tmp_path)
    s = _by_name(rec, "slope_err2")
    ok = (rec.passed and abs(s["value"] - 1.0) <= 0.4 and secs <= 900.0
          and rec.config.replicates == 64 and rec.results["J0"] == 1)
    _report(5, "fluctuation scaling", ok,
            f"slope={s['value']:.3f} +- {s['stderr']:.3f}, target 1 +- 0.4, {secs:.1f}s")
    assert ok


def test_criterion_6_distributional_variance(tmp_path):
    rec, secs = _run("acc6_spde_variance.json", tmp_path)
    r = rec.results
    sk = _by_name(rec, "skewness")
    ku = _by_name(rec, "excess_kurtosis")
    ok = rec.passed and r["rel_err"] < 0.15 and rec.config.replicates == 256 and r["eps"] == 0.05
    _report(6, "distributional variance", ok,
            f"MC var={r['mc_var']:.4e} +- {r['mc_var_stderr']:.1e} vs oracle {r['oracle']:.4e} "
            f"(rel {r['rel_err']:.3f}); skew={sk['value']:.3f} (SE {sk['stderr']:.3f}), "
            f"ex.kurt={ku['value']:.3f} (SE {ku['stderr']:.3f}), {secs:.1f}s")
    assert ok


def test_criterion_7_aronson_uniformity(tmp_path):
    rec, secs = _run("acc7_aronson.json", tmp_path)
    spreads = {c["quantity"]: c["value"] for c in rec.checks if c["quantity"].startswith("spread_")}
    viol = _by_name(rec, "violations")["value"]
    ctrl = _by_name(rec, "control_C")["value"]
    ok = (rec.passed and max(spreads.values()) < 0.2 and viol == 0.0
          and abs(ctrl - 0.25) <= 0.05 * 0.25 and secs < 300.0)
    _report(7, "Aronson uniformity", ok,
            ", ".join(f"{k}={v:.3f}" for k, v in spreads.items())
            + f", violations={viol:g}, control C={ctrl:.4f}, {secs:.1f}s")
    assert ok


def test_criterion_8_malliavin_bound(tmp_path):
    rec, secs = _run("acc8_malliavin.json", tmp_path)
    z = _by_name(rec, "psi_moment_uniform")
    fail = _by_name(rec, "condition_S_failing_reports_failure")
    ok = rec.passed and fail["pass"] and secs < 60.0
    _report(8, "Malliavin uniform bound", ok,
            f"max pairwise z={z['value']:.2f} (tol {z['tolerance']}), failing model flagged="
            f"{fail['pass']}, {secs:.1f}s")
    assert ok


def _gauss(w):
    return lambda x: np.exp(-x**2 / (2 * w * w))


def _heat(x, t, w, a):
    v = w * w + 2 * a * t
    return w / np.sqrt(v) * np.exp(-x**2 / (2 * v))


def _mms_error(m, dt, L=6.0, T=0.5):
    dom = BoxDomain(L, m)
    k = np.pi / L
    x = dom.nodes

    def source(t):
        e = np.exp(-t)
        return -e * np.sin(k * x) - (np.cos(x) * e * k * np.cos(k * x)
                                     - (2 + np.sin(x)) * e * k * k * np.sin(k * x))

    n = int(round(T / dt))
    u = march(dom, np.sin(k * x), dt, n, 2 + np.sin(dom.faces), source_fn=source, n_startup=2,
              save_every=n)
    return np.sqrt(np.sum((u.values[-1] - np.exp(-T) * np.sin(k * x)) ** 2) * dom.dx)


def _sup_err(u, w, a):
    return max(np.abs(u.values[k] - _heat(u.domain.nodes, t, w, a)).max()
               for k, t in enumerate(u.times))


def test_criterion_9_solver_order():
    t0 = time.perf_counter()
    items = {}
    factor = _mms_error(64, 0.02) / _mms_error(128, 0.01)
    items["mms_factor"] = 3.0 <= factor <= 5.0

    dom = BoxDomain(8.0, 1024)
    u = solve_fine(media.make_model("constant", value=1.5), None, 1.0, 1.0, _gauss(1.0), dom,
                   1e-4, 0.5, save_every=100)
    heat_err = _sup_err(u, 1.0, 1.5)
    items["heat_kernel"] = heat_err < 1e-5

    dom4 = BoxDomain(8.0, 4096)
    u1 = solve_homogenized(1.0, _gauss(1.0), dom4, 2.5e-5, 0.5, save_every=400)
    items["unit_gaussian"] = _sup_err(u1, 1.0, 1.0) < 1e-6

    d12 = BoxDomain(12.0, 1024)
    p1, p2 = _gauss(0.5), (lambda x: 0.3 * np.exp(-(x - 1) ** 2))
    ua = solve_homogenized(1.3, p1, d12, 1e-3, 0.5, save_every=50)
    ub = solve_homogenized(1.3, p2, d12, 1e-3, 0.5, save_every=50)
    uab = solve_homogenized(1.3, lambda x: p1(x) + p2(x), d12, 1e-3, 0.5, save_every=50)
    items["linearity"] = np.max(np.abs(uab.values - ua.values - ub.values)) < 1e-12
    mass = uab.values.sum(axis=1) * d12.dx
    items["mass"] = (np.max(np.abs(mass - mass[0])) < 1e-8
                     and np.max(np.abs(uab.values[:, [0, -1]])) < 1e-10)

    d8 = BoxDomain(8.0, 2048)
    u0 = solve_homogenized(1.0, _gauss(0.7), d8, 5e-4, 0.5)
    items["cascade_zero"] = bool(np.all(solve_cascade_pde(1, 1.0, [0.0], [u0]).values == 0.0))
    c1 = solve_cascade_pde(1, 1.0, [0.1], [u0])
    x = d8.nodes
    duh = max(np.abs(c1.values[k] - 0.1 * t * _heat(x, t, 0.7, 1.0)
                     * (x**2 / (0.49 + 2 * t) ** 2 - 1 / (0.49 + 2 * t))).max()
              for k, t in enumerate(c1.times))
    items["duhamel"] = duh < 1e-4
    items["cascade_scaling"] = np.max(np.abs(solve_cascade_pde(1, 1.0, [0.2], [u0]).values
                                             - 2 * c1.values)) < 1e-14
    items["spde_zero_lambda"] = bool(np.all(
        solve_limit_spde(1.0, 0.0, u0, np.ones(u0.values.shape[0] - 1)).values == 0.0))

    one = media.make_model("constant", value=1.0)
    P = fundamental_probe(one, None, 1.0, 1.0, 0.0, 0.0, dom4, 1e-5, 0.25, save_every=500)
    fv = fit_gaussian_bound([P], "value")
    fg = fit_gaussian_bound([P], "gradient")
    items["probe_C"] = abs(fv.C - 0.25) <= 0.05 * 0.25
    items["probe_c"] = abs(fv.c - (4 * np.pi) ** -0.5) <= 0.05 * (4 * np.pi) ** -0.5
    items["probe_C_g"] = abs(fg.C - 0.25) <= 0.10 * 0.25
    items["probe_mass"] = np.max(np.abs(P.values.sum(axis=1) * dom4.dx - 1.0)) < 1e-6
    items["probe_positivity"] = P.values.min() >= -1e-10
    q1 = fundamental_probe(one, None, 1.0, 1.0, -1.0, 0.0, dom, 1e-4, 0.25, save_every=50)
    q2 = fundamental_probe(one, None, 1.0, 1.0, 0.5, 0.0, dom, 1e-4, 0.25, save_every=50)
    i1 = int(np.argmin(np.abs(dom.nodes + 1.0)))
    i2 = int(np.argmin(np.abs(dom.nodes - 0.5)))
    items["probe_symmetry"] = np.max(np.abs(q1.values[:, i2] - q2.values[:, i1])) < 1e-8

    ok = all(bool(v) for v in items.values())
    bad = [k for k, v in items.items() if not v]
    _report(9, "solver order and constant-coefficient exactness", ok,
            f"MMS factor={factor:.3f}, heat L-inf err={heat_err:.2e}, {len(items)} items"
            + (f", failed: {bad}" if bad else "") + f", {time.perf_counter() - t0:.1f}s")
    assert ok


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(pytest.main([__file__, "-q"]))
