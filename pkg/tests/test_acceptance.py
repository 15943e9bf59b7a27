"""End-to-end acceptance checks; each prints one PASS/FAIL line."""

import json
import math
import time

import numpy as np
import pytest

from oracles import delong_bruteforce, holm_loop
from seqreg.cli import main
from seqreg.evalstat import (apply_synthetic_misalignment, delong_components, delong_test, dice,
                             draw_shift, holm_bonferroni, holm_thresholds,
                             run_hierarchical_plan, shift_volume)
from seqreg.optimizer import GaussNewtonConfig, LbfgsConfig, gauss_newton, lbfgs
from seqreg.phantom import PhantomSpec, generate_phantom, union_mask
from seqreg.pipeline import RegistrationConfig, register, register_rigid
from seqreg.regularizer import curvature_evaluate, curvature_gradient_check
from seqreg.similarity import NgfConfig, NgfTerm, ngf_evaluate, ngf_gradient_check
from seqreg.transform import (Deformation, DisplacementGrid, RigidParams, warp_mask)
from seqreg.volio import ScoreTable, read_metaimage, write_metaimage
from seqreg.volume import BinaryMask, Geometry, Volume3D, VectorField3D, gaussian_smooth


@pytest.fixture
def report(capsys):
    def _report(number, name, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, f"{name}: {detail}"
    return _report


def smooth_random(geom, seed, sigma=1.5):
    data = np.random.default_rng(seed).normal(size=geom.dims)
    return gaussian_smooth(Volume3D(geom, data), sigma)


def test_1_ngf_correctness(report):
    t0 = time.perf_counter()
    g = Geometry((12, 12, 12), (1.0, 1.0, 1.0))
    f, m = smooth_random(g, 0), smooth_random(g, 1)
    mask = np.zeros(g.dims, bool)
    mask[2:-2, 2:-2, 2:-2] = True
    mask = BinaryMask(g, mask)
    gg = Geometry((4, 4, 4), (3.0, 3.0, 3.0), (1.0, 1.0, 1.0))
    grid = DisplacementGrid(gg, 0.3 * np.random.default_rng(2).normal(size=gg.dims + (3,)))
    d = Deformation(RigidParams((0.02, -0.01, 0.03), (0.3, -0.2, 0.1), (5.5, 5.5, 5.5)), grid)
    err = ngf_gradient_check(f, m, d, mask, NgfConfig(epsilon=0.05))
    self_dist = max(abs(ngf_evaluate(f, f, Deformation(), mask, NgfConfig(e)).value)
                    for e in (None, 0.05))
    elapsed = time.perf_counter() - t0
    ok = err < 1e-4 and self_dist <= 1e-12 and elapsed < 10
    report(1, "NGF correctness", ok,
           f"grad rel err {err:.2e}, D(F,F) {self_dist:.1e}, {elapsed:.2f} s")


def test_2_curvature_correctness(report):
    gg = Geometry((9, 8, 7), (2.0, 2.5, 3.0))
    u = np.random.default_rng(3).normal(size=gg.dims + (3,))
    grid = DisplacementGrid(gg, u)
    err = curvature_gradient_check(grid)
    ev = curvature_evaluate(grid)
    adj = abs(ev.energy - 0.5 * float(np.vdot(u, ev.gradient)))
    ok = err < 1e-6 and adj <= 1e-10 * max(1.0, ev.energy)
    report(2, "curvature correctness", ok, f"grad rel err {err:.2e}, |E - <u,g>/2| {adj:.1e}")


def test_3_rigid_recovery(report):
    successes, worst_time, errors = 0, 0.0, []
    for seed in range(10):
        case = generate_phantom(PhantomSpec(seed=seed))
        shift = draw_shift("severe", seed)
        # moving[i] = adc[i - s]: the aligning map is y(x) = x + s (1 mm voxels)
        moving = shift_volume(case.adc_like, shift)
        t0 = time.perf_counter()
        p, _ = register_rigid(case.t2_like, moving, case.gland_mask, RegistrationConfig())
        worst_time = max(worst_time, time.perf_counter() - t0)
        err = np.abs(np.array(p.translation) - np.array(shift, float)).max()
        errors.append(err)
        successes += err < 0.5
    ok = successes >= 9 and worst_time < 60
    report(3, "rigid recovery", ok, f"{successes}/10 within 0.5 voxel, max err "
           f"{max(errors):.3f}, slowest {worst_time:.1f} s")


def test_4_deformable_recovery(report):
    rows = []
    for seed in range(5):
        case = generate_phantom(PhantomSpec(seed=seed, deformation_amplitude=4.0))
        fixed_l = union_mask(case.lesion_masks_t2)
        moving_l = union_mask(case.lesion_masks_adc)
        before = dice(fixed_l, moving_l)
        res = register(case.t2_like, case.adc_like, case.gland_mask)
        after = dice(fixed_l, warp_mask(moving_l, res.deformation, fixed_l.geometry))
        rows.append((before, after, res.folding_percent_in_mask))
    ok = all(b < 0.5 and a > 0.75 and f == 0.0 for b, a, f in rows)
    detail = ", ".join(f"{b:.2f}->{a:.2f}" for b, a, _ in rows)
    report(4, "deformable recovery", ok,
           f"lesion Dice {detail}; folding {max(r[2] for r in rows)}%")


def test_5_misalignment_monotonicity(report):
    values = {"original": [], "severe": [], "extreme": []}
    for seed in range(10):
        case = generate_phantom(PhantomSpec(seed=seed))
        term = NgfTerm(case.t2_like, case.adc_like, case.gland_mask)
        values["original"].append(term.value_at(Deformation()))
        for severity in ("severe", "extreme"):
            (moved,), _ = apply_synthetic_misalignment([case.adc_like], severity, seed)
            t = NgfTerm(case.t2_like, moved, case.gland_mask, NgfConfig(term.epsilon))
            values[severity].append(t.value_at(Deformation()))
    mean = {k: float(np.mean(v)) for k, v in values.items()}
    ok = mean["original"] < mean["severe"] < mean["extreme"]
    report(5, "misalignment monotonicity", ok,
           "mean NGF " + " < ".join(f"{k} {v:.4f}" for k, v in mean.items()))


@pytest.mark.filterwarnings("ignore::seqreg.evalstat.DegenerateDelongWarning")
def test_6_delong_oracle(report):
    rng = np.random.default_rng(6)
    worst, worst_z = 0.0, 0.0
    for _ in range(200):
        n = int(rng.integers(4, 51))
        labels = np.zeros(n, int)
        labels[rng.choice(n, int(rng.integers(2, n - 1)), replace=False)] = 1
        # coarse rounding forces ties, exercising midranks
        s1 = np.round(rng.uniform(size=n) + 0.3 * labels, int(rng.integers(1, 4)))
        s2 = np.round(rng.uniform(size=n) + 0.2 * labels, int(rng.integers(1, 4)))
        a1, a2, v1, v2, c, z = delong_bruteforce(s1, s2, labels)
        pos, neg = labels == 1, labels == 0
        aucs, v10, v01 = delong_components(np.stack([s1[pos], s2[pos]]),
                                           np.stack([s1[neg], s2[neg]]))
        S = np.cov(v10, ddof=1) / pos.sum() + np.cov(v01, ddof=1) / neg.sum()
        worst = max(worst, abs(S[0, 0] - v1), abs(S[1, 1] - v2), abs(S[0, 1] - c),
                    abs(aucs[0] - a1), abs(aucs[1] - a2))
        res = delong_test(s1, s2, labels)
        denom = res.var_1 + res.var_2 - 2 * res.covar
        if denom > 0:
            formula = (res.auroc_1 - res.auroc_2) / math.sqrt(denom)
            worst_z = max(worst_z, abs(res.z - formula), abs(res.z - z))
    s = rng.uniform(size=30)
    same = delong_test(s, s, np.repeat([0, 1], 15))
    ok = worst <= 1e-12 and worst_z <= 1e-9 and same.p_one_tailed == 0.5
    report(6, "DeLong oracle", ok,
           f"max var/cov diff {worst:.1e}, max z diff {worst_z:.1e}, identical p "
           f"{same.p_one_tailed}")


def test_7_hierarchy_gating(report):
    rng = np.random.default_rng(7)
    violations, stage2_runs = 0, 0
    for i in range(500):
        n = int(rng.integers(6, 41))
        labels = np.zeros(n, int)
        labels[rng.choice(n, int(rng.integers(2, n - 1)), replace=False)] = 1
        base = rng.uniform(size=n)
        gains = rng.uniform(0, 0.8, size=3)
        scores = {v: np.clip(base * (1 - g) + g * labels + 0.1 * rng.normal(size=n), 0, 1)
                  for v, g in zip(("original", "rigid", "deformable"), gains)}
        table = ScoreTable(tuple(f"c{k}" for k in range(n)), labels, scores)
        out = run_hierarchical_plan(table, 0.05)
        fam = out.families
        for s2, s1 in (("2A", "1A"), ("2B", "1B")):
            if fam[s2].tested:
                stage2_runs += 1
                violations += not fam[s1].rejected
    thresholds_ok = (holm_thresholds([0.01, 0.04], 0.05) == [0.025, 0.05]
                     and holm_bonferroni([0.01, 0.04], 0.05) == [True, True]
                     and holm_thresholds([0.03, 0.04], 0.05) == [0.025, 0.05]
                     and holm_bonferroni([0.03, 0.04], 0.05) == [False, False]
                     and holm_loop([0.03, 0.04], 0.05) == [False, False])
    ok = violations == 0 and stage2_runs > 0 and thresholds_ok
    report(7, "hierarchy gating", ok, f"{violations} gating violations in 500 tables "
           f"({stage2_runs} stage-2 runs), worked examples {'match' if thresholds_ok else 'differ'}")


def test_8_determinism_and_io(report, tmp_path):
    g = Geometry((7, 6, 5), (0.5, 0.75, 2.0), (-3.0, 1.0, 2.5),
                 tuple(RigidParams((0.1, 0.2, -0.3)).matrix.T.ravel()))
    rng = np.random.default_rng(8)
    objs = [Volume3D(g, rng.normal(size=g.dims)),
            Volume3D(g, rng.normal(size=g.dims).astype(np.float32).astype(float)),
            BinaryMask(g, rng.uniform(size=g.dims) > 0.5),
            VectorField3D(g, rng.normal(size=g.dims + (3,)))]
    roundtrip = True
    for k, obj in enumerate(objs):
        path = tmp_path / f"o{k}.mha"
        write_metaimage(obj, path)
        back = read_metaimage(path)
        roundtrip &= (type(back) is type(obj) and back.geometry == obj.geometry
                      and np.array_equal(back.data, obj.data))

    ph = tmp_path / "ph"
    main(["phantom", "--out-dir", str(ph), "--seed", "5", "--dims", "32", "32", "32",
          "--deformation-amplitude", "2"])
    outputs = []
    for run in ("r1", "r2"):
        code = main(["register", "--fixed", str(ph / "t2_like.mha"),
                     "--moving", str(ph / "adc_like.mha"), "--mask", str(ph / "gland_mask.mha"),
                     "--out-dir", str(tmp_path / run)])
        files = sorted((tmp_path / run).iterdir())
        outputs.append((code, {p.name: p.read_bytes() for p in files}))
    cli_same = outputs[0][0] == 0 and outputs[0] == outputs[1]

    vol = read_metaimage(ph / "adc_like.mha")
    a, spec_a = apply_synthetic_misalignment([vol], "severe", 99)
    b, spec_b = apply_synthetic_misalignment([vol], "severe", 99)
    misalign_same = spec_a == spec_b and np.array_equal(a[0].data, b[0].data)
    for run in ("m1", "m2"):
        main(["misalign", "--inputs", str(ph / "adc_like.mha"), "--severity", "extreme",
              "--seed", "3", "--out-dir", str(tmp_path / run)])
    misalign_same &= all((tmp_path / "m1" / n).read_bytes() == (tmp_path / "m2" / n).read_bytes()
                         for n in ("adc_like.mha", "misalignment.json"))
    shift = json.loads((tmp_path / "m1" / "misalignment.json").read_text())["applied_shift"]
    ok = roundtrip and cli_same and misalign_same
    report(8, "determinism and I/O", ok,
           f"round-trip {'exact' if roundtrip else 'lossy'}, register rerun "
           f"{'identical' if cli_same else 'differs'} ({len(outputs[0][1])} files), misalignment "
           f"{'reproducible' if misalign_same else 'differs'} (shift {shift})")


def test_9_optimizer_sanity(report):
    def rosen(x):
        f = 100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2
        g = np.array([-400 * x[0] * (x[1] - x[0] ** 2) - 2 * (1 - x[0]),
                      200 * (x[1] - x[0] ** 2)])
        return f, g

    def rosen_residual(x):
        return (np.array([10 * (x[1] - x[0] ** 2), 1 - x[0]]),
                np.array([[-20 * x[0], 10.0], [-1.0, 0.0]]))

    x0 = np.array([-1.2, 1.0])
    xl, rl = lbfgs(rosen, x0, LbfgsConfig(max_iter=200, grad_tol=1e-10))
    xg, rg = gauss_newton(rosen_residual, x0, GaussNewtonConfig(max_iter=100))
    err_l = np.abs(xl - 1).max()
    err_g = np.abs(xg - 1).max()

    def monotone(trace):
        return all(b <= a for a, b in zip(trace, trace[1:]))

    ok = err_l < 1e-6 and err_g < 1e-6 and monotone(rl.trace) and monotone(rg.trace)
    report(9, "optimizer sanity", ok,
           f"L-BFGS err {err_l:.1e} in {rl.iterations} it, GN err {err_g:.1e} in "
           f"{rg.iterations} it, traces monotone {monotone(rl.trace) and monotone(rg.trace)}")
