from dataclasses import replace

import numpy as np
import pytest

from twohands.correspond import OracleNoise
from twohands.depthio import NoiseConfig
from twohands.energy import EnergyWeights, assemble
from twohands.handmodel import HandParams
from twohands.metrics import mean_vertex_error
from twohands.pipeline import synthetic_frame
from twohands.scenes import motion_sequence, perturb
from twohands.solver import FitError, SolverConfig, fit_frame, normal_equations, pcg_solve, track_sequence


def spd(rng, n, cond=1e4):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return Q @ np.diag(np.geomspace(1, cond, n)) @ Q.T


@pytest.mark.parametrize("n", [1, 5, 40, 124])
def test_pcg_matches_dense_solve(rng, n):
    A = spd(rng, n)
    b = rng.normal(size=n)
    x, it = pcg_solve(A, b, SolverConfig(cg_max_iterations=10 * n, cg_tolerance=1e-12), return_info=True)
    np.testing.assert_allclose(x, np.linalg.solve(A, b), rtol=1e-7, atol=1e-10)
    assert 1 <= it <= 10 * n


def test_pcg_zero_rhs(rng):
    x, it = pcg_solve(spd(rng, 4), np.zeros(4), return_info=True)
    assert it == 0 and not x.any()


def test_pcg_iteration_cap(rng):
    A, b = spd(rng, 60, 1e8), rng.normal(size=60)
    _, it = pcg_solve(A, b, SolverConfig(cg_max_iterations=3), return_info=True)
    assert it == 3


@pytest.fixture(scope="module")
def frame(template, camera):
    gt = motion_sequence(template, "separated_wave", 20)[4]
    noise = OracleNoise(color_sigma=0.01, depth=NoiseConfig(), seed=4)
    data, _, _ = synthetic_frame(template, gt, camera, noise)
    return gt, data


def test_normal_equations_match_dense(template, frame):
    gt, data = frame
    sys = assemble(template, perturb(gt, np.random.default_rng(0)), data, EnergyWeights())
    A, b = normal_equations(sys, 0.1)
    J, f = sys.jacobian, sys.residuals
    JtJ = J.T @ J
    d = np.diag(JtJ).copy()
    d[d == 0] = 1
    np.testing.assert_allclose(A, JtJ + 0.1 * np.diag(d), rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(b, J.T @ f, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(A, A.T, atol=0)


def test_energy_decreases_within_each_round(template, frame):
    gt, data = frame
    rep = fit_frame(template, perturb(gt, np.random.default_rng(1)), data, EnergyWeights())
    cfg = SolverConfig()
    assert len(rep.round_starts) == 1 + len(cfg.rejection_radii)
    assert rep.iterations_run <= cfg.max_iterations
    for tr in rep.round_traces():
        assert np.all(np.diff(tr) <= 0)
    assert rep.energy_trace[-1] == pytest.approx(sum(rep.per_term_energies.values()), rel=1e-9)
    assert mean_vertex_error(template, rep.final_params, gt) < 0.003


def test_single_round_is_globally_monotone(template, frame):
    gt, data = frame
    cfg = SolverConfig(facing_cutoff=None)
    rep = fit_frame(template, perturb(gt, np.random.default_rng(2)), data, EnergyWeights(), cfg)
    assert rep.round_starts == [0]
    assert np.all(np.diff(rep.energy_trace) <= 0)
    assert rep.energy_trace[-1] < rep.energy_trace[0]


def test_fit_from_ground_truth_stays_close(template, camera):
    # noise-free data: the optimum sits within pixel discretisation of the truth
    gt = motion_sequence(template, "separated_wave", 20)[7]
    data, _, _ = synthetic_frame(template, gt, camera, OracleNoise(color_sigma=0.0))
    rep = fit_frame(template, gt, data, EnergyWeights())
    assert mean_vertex_error(template, rep.final_params, gt) < 1.5e-3


def test_fit_is_deterministic(template, frame):
    gt, data = frame
    init = perturb(gt, np.random.default_rng(3))
    a = fit_frame(template, init, data, EnergyWeights())
    b = fit_frame(template, init, data, EnergyWeights())
    np.testing.assert_array_equal(a.final_params.to_vector(), b.final_params.to_vector())
    assert a.energy_trace == b.energy_trace


def test_disabled_collision_has_no_rows(template, frame):
    gt, data = frame
    rep = fit_frame(template, gt, data, EnergyWeights(w_coll=0.0), SolverConfig(max_iterations=2))
    assert "coll" not in rep.row_counts and rep.per_term_energies["coll"] == 0.0


def test_non_finite_initialisation(template, frame):
    gt, data = frame
    bad = gt.copy()
    bad.theta_left[7] = np.inf
    with pytest.raises(FitError):
        fit_frame(template, bad, data, EnergyWeights())


@pytest.mark.parametrize("kw", [dict(max_iterations=0), dict(damping_up=0.5), dict(damping_down=1.5),
                                dict(facing_cutoff=1.0), dict(rejection_radii=(0.01, -1.0))])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SolverConfig(**kw)


@pytest.fixture(scope="module")
def short_sequence(template, camera):
    seq = motion_sequence(template, "separated_wave", 4)
    frames = [synthetic_frame(template, p, camera, OracleNoise(seed=t))[0] for t, p in enumerate(seq)]
    return seq, frames


def test_pipelined_tracking_matches_sequential(template, short_sequence):
    seq, frames = short_sequence
    cfg = SolverConfig(max_iterations=6)
    loaders = [(lambda f=f: f) for f in frames]
    a = track_sequence(template, frames, seq[0], EnergyWeights(), cfg)
    b = track_sequence(template, loaders, seq[0], EnergyWeights(), cfg, pipelined=True)
    for ra, rb in zip(a, b):
        np.testing.assert_array_equal(ra.final_params.to_vector(), rb.final_params.to_vector())


def test_tracking_links_frames(template, short_sequence):
    seq, frames = short_sequence
    cfg = SolverConfig(max_iterations=3)
    reps = track_sequence(template, frames[:2], seq[0], EnergyWeights(), cfg)
    assert reps[0].per_term_energies["temp"] == 0.0
    assert reps[1].per_term_energies["temp"] > 0.0


def test_tracking_reports_failing_frame(template, short_sequence):
    seq, frames = short_sequence

    def broken():
        raise OSError("sensor unplugged")

    with pytest.raises(FitError, match="frame 1"):
        track_sequence(template, [frames[0], broken], seq[0], EnergyWeights(), SolverConfig(max_iterations=2))


def test_parameter_dimension_mismatch(template, frame):
    _, data = frame
    with pytest.raises(FitError):
        track_sequence(template, [data], HandParams.zeros(3, template.n_pose), EnergyWeights(),
                       replace(SolverConfig(), max_iterations=1))
