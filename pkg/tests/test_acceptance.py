"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The head and needle replicas are driven by the shipped configs so the suite
exercises exactly what ``irnct run`` does. Slow criteria carry the ``slow``
marker but are part of the default run.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from irnct import cli, recon
from irnct.cli import ExperimentConfig, main, read_csv, run_experiment
from irnct.core import (adjoint_mismatch, circular_geometry, identity_map,
                        matrix_map, stack_maps)
from irnct.diffreg import DiffOperator, TVWeights, smoothed_l1_weights
from irnct.krylov import KrylovConfig, cgls
from irnct.phantoms import NoiseModel, PhantomSpec, make_phantom, simulate_scan
from irnct.projector import as_linear_map, project_forward

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
HEAD = CONFIGS / "head_replica.yaml"
NEEDLE = CONFIGS / "needle_replica.yaml"
ORDER_SEEDS = (1, 2, 3)


def verdict(n, title, ok, detail):
    line = f"criterion {n} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def _alg(cfg, name):
    return next(a for a in cfg.algorithms if a.name == name)


def _params(cfg, name):
    p = dict(_alg(cfg, name).params)
    p.setdefault("lam", p["alpha"])
    return recon.RegularizationParams(**p)


def _rows(outcome):
    return {r[1]: r for r in outcome.metrics}


@pytest.fixture(scope="module")
def head_cfg():
    return ExperimentConfig.load(HEAD)


@pytest.fixture(scope="module")
def head_inputs(head_cfg):
    cli._PRIOR_CACHE.clear()
    t = time.perf_counter()
    inputs = cli.prepare(head_cfg)
    return inputs, time.perf_counter() - t


@pytest.fixture(scope="module")
def head_full_runs(head_cfg, tmp_path_factory):
    """Two complete ``irnct run`` invocations with the config's seed."""
    out = []
    for tag in ("a", "b"):
        cli._PRIOR_CACHE.clear()
        dest = tmp_path_factory.mktemp(f"head_{tag}")
        assert main(["run", str(HEAD), "--output", str(dest)]) == 0
        out.append(dest)
    return out


# ---------------------------------------------------------------------------

def test_criterion_01_adjoint_exactness():
    t = time.perf_counter()
    dims, sp = (16, 16, 16), (1.0, 1.0, 1.0)
    m = 16 ** 3
    geom = circular_geometry(8, 60.0, 100.0, (28, 24), (1.5, 1.5))
    rng = np.random.default_rng(0)
    A = as_linear_map(geom, dims, sp)
    D = DiffOperator(dims)
    w1 = TVWeights(1e-2, rng.random(m) + 0.1).weighted_D(dims)
    w2 = TVWeights(1e-2, rng.random(m) + 0.1).weighted_D(dims)
    ops = {
        "projector": A,
        "D": D,
        "tv stack": stack_maps([(1.0, A), (0.7, w1)]),
        "piple stack": stack_maps([(1.0, A), (0.7, w1), (1.3, identity_map(m))]),
        "piccs stack": stack_maps([(1.0, A), (0.7, w1), (1.3, w2)]),
    }
    worst = {k: adjoint_mismatch(op, rng, trials=20) for k, op in ops.items()}
    elapsed = time.perf_counter() - t
    ok = max(worst.values()) < 1e-6 and elapsed < 10.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(1, "adjoint exactness", ok, f"{detail}; {elapsed:.1f} s")


def test_criterion_02_oracle_equivalence():
    rng = np.random.default_rng(1)
    errs = []
    for m, n in [(6, 4), (20, 12)]:
        M = rng.standard_normal((m, n))
        b = rng.standard_normal(m)
        x, _ = cgls(matrix_map(M), b, None, KrylovConfig(n, residual_tol=0.0))
        ref = np.linalg.solve(M.T @ M, M.T @ b)
        errs.append(np.linalg.norm(x - ref) / np.linalg.norm(ref))
    g = circular_geometry(2, 20.0, 35.0, (5, 4), (1.2, 1.2), start=0.2)
    op = as_linear_map(g, (4, 4, 4), (1.0, 1.0, 1.0))
    dense = op.to_dense()
    x = rng.standard_normal(64)
    y = rng.standard_normal(op.range_size)
    mv = max(np.abs(op.apply(x) - dense @ x).max(), np.abs(op.apply_adjoint(y) - dense.T @ y).max())
    ok = max(errs) < 1e-8 and mv < 1e-10
    verdict(2, "oracle equivalence", ok,
            f"cgls rel err {errs[0]:.1e}/{errs[1]:.1e}, matricization {mv:.1e}")


def test_criterion_03_l1_identity():
    rng = np.random.default_rng(2)
    z = rng.standard_normal(10_000)
    z[np.abs(z) < 1e-3] = 1e-3
    w = smoothed_l1_weights(z, 1e-12)
    lhs = float(np.sum((w * z) ** 2))
    rel = abs(lhs - np.sum(np.abs(z))) / np.sum(np.abs(z))
    verdict(3, "l1 as weighted l2", rel < 1e-8, f"relative gap {rel:.1e}")


@pytest.mark.slow
def test_criterion_04_mm_descent(head_cfg, head_inputs):
    inputs, _ = head_inputs
    scan = inputs.scans[20]
    parts, ok = [], True
    for name, fn in [("irn-tv", recon.irn_tv), ("irn-piple", recon.irn_piple),
                     ("irn-piccs", recon.irn_piccs)]:
        params = _params(head_cfg, name)
        args = () if name == "irn-tv" else (inputs.prior,)
        rep = fn(scan, scan.geometry, params, *args, dims=inputs.truth.dims,
                 spacing=inputs.truth.spacing, truth=inputs.truth)
        obj = np.array(rep.objective)
        worst = float(np.max(np.diff(obj) / obj[:-1]))
        ok &= len(obj) == params.outer_iters and worst <= 1e-8
        err = np.array(rep.errors)
        spikes = sum(err[s] > err[s - 1] for s in rep.cycle_starts[1:])
        parts.append(f"{name} max rel step {worst:+.1e}, {spikes} restart spikes")
    verdict(4, "MM descent", ok, "; ".join(parts))


@pytest.mark.slow
def test_criterion_05_quality_ordering(head_cfg, head_inputs, tmp_path):
    _, prior_seconds = head_inputs
    subset = tuple(a for a in head_cfg.algorithms
                   if a.name in ("fdk", "cgls", "irn-piple", "irn-piccs"))
    t = time.perf_counter()
    ok, parts = True, []
    for seed in ORDER_SEEDS:
        cfg = head_cfg.replace(seed=seed, algorithms=subset, output=str(tmp_path / f"s{seed}"))
        rows = _rows(run_experiment(cfg))
        p = {k: float(r[3]) for k, r in rows.items()}
        s = {k: float(r[4]) for k, r in rows.items()}
        good = (p["irn-piple"] > p["irn-piccs"] > p["cgls"]
                and p["irn-piple"] >= p["fdk"] + 5.0
                and s["irn-piple"] == max(s.values()))
        ok &= good
        parts.append(f"seed {seed}: PIPLE {p['irn-piple']:.2f}/{s['irn-piple']:.4f} "
                     f"PICCS {p['irn-piccs']:.2f}/{s['irn-piccs']:.4f} "
                     f"CGLS {p['cgls']:.2f}/{s['cgls']:.4f} FDK {p['fdk']:.2f}/{s['fdk']:.4f}"
                     f" {'ok' if good else 'ORDER BROKEN'}")
    elapsed = time.perf_counter() - t + prior_seconds
    ok &= elapsed < 600
    verdict(5, "quality ordering", ok, "; ".join(parts) + f"; {elapsed:.0f} s incl. prior")


@pytest.mark.slow
def test_criterion_06_speed_ordering(head_full_runs):
    t = {r["algorithm"]: float(r["wall_clock_s"]) for r in read_csv(head_full_runs[0] / "timing.csv")}
    it = {r["algorithm"]: int(r["iterations"]) for r in read_csv(head_full_runs[0] / "metrics.csv")}
    ok = it["irn-tv"] == it["asd-pocs-tv"] == 100 and t["irn-tv"] < t["asd-pocs-tv"]
    verdict(6, "speed ordering", ok,
            f"IRN-TV {t['irn-tv']:.1f} s vs ASD-POCS-TV {t['asd-pocs-tv']:.1f} s "
            f"at {it['irn-tv']}/{it['asd-pocs-tv']} iterations")


def test_criterion_07_prior_limit(head_cfg):
    spec = head_cfg.phantom.without_inserts()
    xp = make_phantom(spec)
    geom = head_cfg.full_geometry()
    geom = geom.with_angles(geom.angles[::geom.n_angles // 20])
    b = project_forward(xp, geom)
    rep = recon.irn_piple(b, geom, recon.RegularizationParams(0.0, 1e6, outer_iters=1,
                                                              inner_iters=25), xp)
    rel = np.linalg.norm(rep.volume.data - xp.data) / np.linalg.norm(xp.data)
    verdict(7, "prior limit", rel < 1e-3, f"||x - x_p||/||x_p|| = {rel:.1e} after one cycle")


def test_criterion_08_reduction_chain(head_cfg):
    dims, sp = (32, 32, 32), (8.0, 8.0, 8.0)
    truth = make_phantom(PhantomSpec("head-like", dims, sp))
    prior = make_phantom(PhantomSpec("shepp3d", dims, sp))
    g = head_cfg.full_geometry()
    g = g.with_angles(g.angles[::g.n_angles // 20])
    scan = simulate_scan(truth, g, NoiseModel("gaussian", 1e-3), seed=5)
    p = _params(head_cfg, "irn-piple")
    p0 = recon.RegularizationParams(p.alpha, 0.0, outer_iters=4, inner_iters=25,
                                    tau_rel=p.tau_rel)
    kw = dict(dims=dims, spacing=sp, truth=truth)
    tv = recon.irn_tv(scan, g, p0, **kw)
    same = True
    for fn in (recon.irn_piple, recon.irn_piccs):
        r = fn(scan, g, p0, prior, **kw)
        same &= (np.array_equal(r.volume.data, tv.volume.data) and r.errors == tv.errors
                 and r.objective == tv.objective
                 and all(a.residual_norms == b.residual_norms for a, b in zip(r.traces, tv.traces)))
    verdict(8, "reduction chain", same,
            "irn_piple(lam=0) and irn_piccs(lam=0) trajectories "
            + ("bit-identical to irn_tv" if same else "DIFFER from irn_tv"))


@pytest.mark.slow
def test_criterion_09_undersampling(tmp_path):
    cfg = ExperimentConfig.load(NEEDLE)
    inputs = cli.prepare(cfg)
    fdk_only = tuple(a for a in cfg.algorithms if a.name == "fdk")
    piccs = tuple(a for a in cfg.algorithms if a.name == "irn-piccs")
    fdk = {int(r[0]): float(r[3]) for r in run_experiment(
        cfg.replace(algorithms=fdk_only, output=str(tmp_path / "f")), inputs).metrics}
    pc = run_experiment(cfg.replace(algorithms=piccs, angle_counts=(20,),
                                    output=str(tmp_path / "p")), inputs).metrics
    p20 = float(pc[0][3])
    ok = fdk[180] > fdk[50] > fdk[20] and p20 >= fdk[20] + 5.0
    verdict(9, "undersampling degradation", ok,
            f"FDK {fdk[180]:.2f} > {fdk[50]:.2f} > {fdk[20]:.2f} dB; "
            f"IRN-PICCS@20 {p20:.2f} dB (margin {p20 - fdk[20]:.2f} dB)")


@pytest.mark.slow
def test_criterion_10_determinism(head_full_runs):
    a, b = (d / "metrics.csv" for d in head_full_runs)
    same = a.read_bytes() == b.read_bytes()
    verdict(10, "determinism", same,
            f"two full runs of {HEAD.name}: metrics.csv "
            + ("byte-identical" if same else "DIFFERS"))
