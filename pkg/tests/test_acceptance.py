"""Acceptance gate: every criterion at its stated tolerance, one
pass/fail line printed per criterion (run with `pytest -s -v`).

Full-scale results from the source experiments are not reproducible at
desk scale; these are the desk-scale analogues plus the property and
oracle suites, with tolerances pinned here and nowhere else.
"""

import dataclasses
import json
from contextlib import contextmanager

import numpy as np
import pytest

from prunability import geometry, nets, pruning, spectral
from prunability.geometry import EllipsoidSpec
from prunability.operators import DenseSymmetric, make_dense_operator
from prunability.pipeline.config import parse_config_text
from prunability.pipeline.stages import Workspace, run_task
from prunability.spectral import SENTINEL, Spectrum, SpectrumSource


@contextmanager
def criterion(tag, description):
    try:
        yield
    except BaseException:
        print(f"[{tag}] FAIL {description}", flush=True)
        raise
    print(f"[{tag}] PASS {description}", flush=True)


def test_a1_width_formula_vs_monte_carlo_oracle():
    with criterion("A1", "closed-form ellipsoid width within 2% of the MC oracle"):
        rng = np.random.default_rng(11)
        d = 200
        eps_values = [0.1, 1.0, 10.0]
        worst = 0.0
        for i in range(20):
            lam = np.exp(rng.uniform(np.log(0.1), np.log(10.0), d))
            eps_hat = eps_values[i % 3]
            spec = Spectrum(np.sort(lam), SpectrumSource.EXACT)
            closed = geometry.gaussian_width(EllipsoidSpec(spec, eps_hat))
            mc = geometry.mc_width_oracle(
                DenseSymmetric.from_matrix(np.diag(lam)), eps_hat, samples=100_000, seed=100 + i
            )
            worst = max(worst, abs(closed - mc.estimate) / mc.estimate)
        assert worst <= 0.02, f"worst relative gap {worst:.4f}"


def test_a2_slq_fidelity_on_known_spectrum():
    with criterion("A2", "projected width from SLQ reconstruction within 5% of exact, D=500"):
        rng = np.random.default_rng(42)
        d = 500
        lam_true = np.sort(np.exp(rng.uniform(np.log(0.1), np.log(10.0), d)))
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        dense = DenseSymmetric.from_matrix((q * lam_true) @ q.T)
        op = make_dense_operator(dense)

        exact = spectral.exact_spectrum(dense)
        density = spectral.slq_density(op, m=128, l=4, sigma2=1e-5, bins=10_000, seed=9)
        lam_min_ritz = float(density.grid[0] + 3.0 * np.sqrt(density.sigma2))
        recon = spectral.reconstruct_spectrum(density, d, 0, lam_min_ritz)

        eps_hat = 1.0
        e_exact = EllipsoidSpec(spectral.convexify(exact), eps_hat)
        e_recon = EllipsoidSpec(spectral.convexify(recon), eps_hat)
        median_radius = float(np.sqrt(2 * eps_hat / np.median(exact.eigenvalues)))
        for scale in (0.1, 1.0, 10.0):
            big_r = scale * median_radius
            w_exact = geometry.projected_width(e_exact, big_r)
            w_recon = geometry.projected_width(e_recon, big_r)
            gap = abs(w_recon - w_exact) / w_exact
            assert gap <= 0.05, f"R={scale} x median radius: relative gap {gap:.4f}"


def test_a3_escape_phase_transition():
    with criterion(
        "A3",
        "escape crossover within 15 points of width^2; miss bound holds one-sided",
    ):
        d = 50
        dense = DenseSymmetric.from_matrix(np.eye(d))
        trials = 500
        for idx, big_r in enumerate((0.5, 2.0)):
            # Ball scaled to the projection distance: radius R/2.
            radius = big_r / 2.0
            eps = radius**2 / 2.0
            spec = Spectrum(np.full(d, 2 * eps / radius**2), SpectrumSource.EXACT)
            ellipsoid = EllipsoidSpec(spec, eps)
            width = geometry.projected_width(ellipsoid, big_r)

            w0 = np.zeros(d)
            wp = np.zeros(d)
            wp[0] = big_r
            ks = np.arange(1, d + 1)
            probs = np.array(
                [
                    geometry.escape_mc(dense, eps, w0, wp, int(k), trials, 500 * idx + k)
                    for k in ks
                ]
            )
            assert probs[0] >= 0.95 and probs[-1] <= 0.05  # full transition visible

            below = np.where(probs < 0.5)[0]
            i = below[0]
            k_lo, k_hi = ks[i - 1], ks[i]
            p_lo, p_hi = probs[i - 1], probs[i]
            crossover = k_lo + (0.5 - p_lo) * (k_hi - k_lo) / (p_hi - p_lo)
            gap = abs(crossover - width**2)
            assert gap <= 0.15 * d, f"R={big_r}: crossover {crossover:.2f} vs w^2 {width**2:.2f}"

            for k, prob in zip(ks, probs):
                bound = geometry.escape_bound(int(k), width)
                if np.isnan(bound):
                    continue
                stderr = np.sqrt(max(prob * (1 - prob), 0.0) / trials)
                assert 1.0 - prob >= bound - 3 * stderr, f"k={k}: miss bound violated"


def test_a4_deformed_ellipsoid_approximation():
    with criterion("A4", "convexified deformed spectrum reproduces the reference width to 1%"):
        rng = np.random.default_rng(5)
        bulk = np.exp(rng.uniform(np.log(1e-2), np.log(1.0), 280))
        small = rng.uniform(0.5, 1.0, 20) * 1e-3 * bulk.max()
        reference = np.sort(np.concatenate([bulk, small]))
        deformed = np.concatenate([bulk, -small])  # oscillation flips the tiny curvatures

        eps_hat = 1.0
        e_ref = EllipsoidSpec(Spectrum(reference, SpectrumSource.EXACT), eps_hat)
        e_cvx = EllipsoidSpec(
            spectral.convexify(Spectrum(np.sort(deformed), SpectrumSource.EXACT)), eps_hat
        )
        max_radius = float(np.sqrt(2 * eps_hat / reference.min()))
        for big_r in [0.01 * max_radius, 0.1 * max_radius, max_radius, 10 * max_radius]:
            w_ref = geometry.projected_width(e_ref, big_r)
            w_cvx = geometry.projected_width(e_cvx, big_r)
            assert abs(w_cvx - w_ref) / w_ref <= 0.01

        # Clamp-to-sentinel alternative agrees in its validity regime.
        clamped = np.concatenate([bulk, np.full(20, SENTINEL)])
        e_clamp = EllipsoidSpec(
            Spectrum(np.sort(clamped), SpectrumSource.EXACT, important_count=20), eps_hat
        )
        for big_r in [0.01 * max_radius, 0.1 * max_radius]:
            w_ref = geometry.projected_width(e_ref, big_r)
            w_clamp = geometry.projected_width(e_clamp, big_r)
            assert abs(w_clamp - w_ref) / w_ref <= 0.01


A5_CONFIG = """
[run]
seed = 1
[dataset]
kind = blobs
n_train = 1024
n_test = 512
classes = 2
separation = 6.0
[net]
widths = 2,32,32,2
[train]
batch_size = 64
epochs = 150
lr = 0.05
momentum = 0.9
lambda_l1 = 0.001
[spectrum]
mode = exact
[sweep]
p_min = 0.02
p_max = 1.0
p_count = 50
"""


@pytest.fixture(scope="module")
def a5_runs(tmp_path_factory):
    base = parse_config_text(A5_CONFIG)
    root = tmp_path_factory.mktemp("a5")
    runs = []
    for seed in range(1, 6):
        cfg = dataclasses.replace(base, seed=seed, out=str(root / f"seed{seed}"))
        report = run_task("full", cfg, Workspace(cfg.out))
        train_meta = json.loads((root / f"seed{seed}" / "train.json").read_text())
        runs.append((cfg, report, train_meta))
    return runs


def test_a5_end_to_end_phase_transition_prediction(a5_runs):
    with criterion(
        "A5",
        "predicted p* within 5 points of the measured maximum, mean over 5 seeds",
    ):
        deltas = []
        for cfg, report, train_meta in a5_runs:
            assert train_meta["dense_test_acc"] >= 0.95, (
                f"seed {cfg.seed}: dense test accuracy {train_meta['dense_test_acc']:.3f}"
            )
            deltas.append(abs(report.delta))
        mean_gap = float(np.mean(deltas))
        print(
            "      per-seed |predicted - empirical|: "
            + ", ".join(f"{d:.3f}" for d in deltas)
            + f"; mean {mean_gap:.3f}"
        )
        assert mean_gap <= 0.05


def test_a6_weight_magnitude_monotonicity(a5_runs):
    with criterion("A6", "p* strictly decreases as weight magnitudes scale by 1..5"):
        cfg, _, train_meta = a5_runs[0]
        ws = Workspace(cfg.out)
        net, _ = nets.load_checkpoint(ws.path("model.ckpt"))
        meta = json.loads(ws.path("spectrum.json").read_text())
        spectrum = spectral.load_spectrum_csv(
            ws.path("spectrum.csv"), SpectrumSource(meta["source"]), meta["important_count"]
        )
        ellipsoid = EllipsoidSpec(spectral.convexify(spectrum), train_meta["eps_hat"])
        distance = pruning.r_of_p(nets.flatten(net), nets.prunable_mask(net))
        stars = geometry.magnitude_scale_experiment(ellipsoid, distance, [1, 2, 3, 4, 5])
        print("      p* per factor: " + ", ".join(f"{p:.4f}" for p in stars))
        assert all(b < a for a, b in zip(stars, stars[1:]))


def test_a7_jensen_ratio_concentration():
    with criterion("A7", "Jensen ratio shrinks with dimension and matches the 1-D closed form"):
        samples = 100_000
        gaps = [
            abs(geometry.jensen_ratio(DenseSymmetric.from_matrix(np.eye(d)), samples, seed=7))
            for d in (10, 100, 1000)
        ]
        assert gaps[0] > gaps[1] > gaps[2]
        assert gaps[2] <= 0.05
        one_d = geometry.jensen_ratio(DenseSymmetric.from_matrix(np.eye(1)), samples, seed=8)
        assert abs(one_d - (np.sqrt(2 / np.pi) - 1.0)) <= 0.005


def test_a8_numerical_plumbing_suite(tmp_path):
    with criterion("A8", "gradients, HVPs, Lanczos, Ritz, masks, and full-run determinism"):
        rng = np.random.default_rng(21)

        # Gradient vs central finite differences, 1e-5 relative.
        net = nets.init_kaiming([4, 5, 3], seed=1)
        x, y = rng.standard_normal((30, 4)), rng.integers(0, 3, 30)
        g = nets.grad(net, (x, y))
        w = nets.flatten(net)
        for i in rng.choice(net.dim, 20, replace=False):
            wp, wm = w.copy(), w.copy()
            wp[i] += 1e-6
            wm[i] -= 1e-6
            fd = (
                nets.loss(nets.unflatten(net.widths, wp), (x, y))
                - nets.loss(nets.unflatten(net.widths, wm), (x, y))
            ) / 2e-6
            assert abs(g[i] - fd) <= 1e-5 * max(abs(fd), 1e-8)

        # HVP symmetry and linearity, 1e-5 relative.
        u, v = rng.standard_normal(net.dim), rng.standard_normal(net.dim)
        hu, hv = nets.hvp(net, (x, y), u), nets.hvp(net, (x, y), v)
        assert abs(hu @ v - u @ hv) <= 1e-5 * max(abs(hu @ v), 1e-12)
        huv = nets.hvp(net, (x, y), u + v)
        assert np.linalg.norm(huv - hu - hv) <= 1e-5 * np.linalg.norm(hu + hv)

        # Lanczos m = D oracle equality, 1e-6 relative.
        dense = DenseSymmetric.from_matrix(rng.standard_normal((40, 40)))
        values = spectral.ritz(spectral.lanczos(make_dense_operator(dense), 40, seed=2)).values
        exact = np.linalg.eigvalsh(dense.entries)
        assert np.max(np.abs(values - exact) / np.abs(exact)) <= 1e-6

        # Ritz weight normalization, 1e-10.
        tri = spectral.lanczos(make_dense_operator(dense), 25, seed=3)
        assert abs(spectral.ritz(tri).weights.sum() - 1.0) <= 1e-10

        # Mask nesting and prefix-sum identity, exact.
        weights = rng.standard_normal(120)
        prunable = rng.random(120) < 0.85
        distance = pruning.r_of_p(weights, prunable)
        sorted_sq = np.sort(np.abs(weights[prunable])) ** 2
        previous = np.zeros(120, dtype=bool)
        n_prunable = int(prunable.sum())
        for p in np.linspace(0, 1, 41):
            state = pruning.magnitude_mask(weights, prunable, float(p))
            assert np.all(previous <= state.mask)
            previous = state.mask
            n_masked = int(np.floor(p * n_prunable + 0.5))
            assert distance(float(p)) ** 2 == pytest.approx(
                float(np.sum(sorted_sq[:n_masked])), rel=1e-12, abs=1e-300
            )

        # Full-run determinism: byte-identical reports.
        small = A5_CONFIG.replace("widths = 2,32,32,2", "widths = 2,8,2").replace(
            "epochs = 150", "epochs = 40"
        )
        cfg_a = dataclasses.replace(parse_config_text(small), out=str(tmp_path / "a"))
        cfg_b = dataclasses.replace(parse_config_text(small), out=str(tmp_path / "b"))
        run_task("full", cfg_a, Workspace(cfg_a.out))
        run_task("full", cfg_b, Workspace(cfg_b.out))
        assert (tmp_path / "a" / "report.json").read_bytes() == (
            tmp_path / "b" / "report.json"
        ).read_bytes()
        manifest_a = json.loads((tmp_path / "a" / "manifest.json").read_text())
        manifest_b = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert manifest_a["files"] == manifest_b["files"]
