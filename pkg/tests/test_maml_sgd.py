import numpy as np
import pytest

import meta_risk_lab as mrl
from meta_risk_lab.maml_sgd import (
    ConfigError,
    DivergedRunError,
    derive_rng,
    draw_task_batch,
    geometric_schedule,
    inner_adapt,
    meta_gradient,
    run_maml_sgd,
    run_single_task_sgd,
    sample_dataset,
    sample_task,
)
from meta_risk_lab.risk import excess_risk_closed, risk_curve

from conftest import make_config


class TestSampling:
    def test_zero_task_spectrum_returns_mean(self):
        mean = np.array([1.0, -2.0, 3.0])
        theta = sample_task(mean, mrl.zero_task_spectrum(3), derive_rng(0))
        np.testing.assert_array_equal(theta, mean)

    def test_task_moments(self):
        rng = derive_rng(1)
        task = mrl.TaskSpectrum(np.array([1.0, 1.0, 1.0, 1.0]))
        draws = np.array([sample_task(np.zeros(4), task, rng) for _ in range(10**5)])
        var = draws.var(axis=0)
        assert np.all(var > 0.98) and np.all(var < 1.02)
        assert np.abs(draws.mean(axis=0)).max() < 0.02

    def test_isotropic_trace_identity(self):
        d = 50
        task = mrl.isotropic_task_spectrum(d, 0.8**2 / d)
        rng = derive_rng(2)
        sq = [np.sum(sample_task(np.zeros(d), task, rng) ** 2) for _ in range(20000)]
        assert np.mean(sq) == pytest.approx(0.64, rel=0.05)

    def test_noiseless_projection(self):
        spec = mrl.poly_spectrum(3, 2.0)
        theta = np.array([1.0, 0.0, 0.0])
        x, y = sample_dataset(theta, spec, 100, 0.0, derive_rng(3))
        np.testing.assert_allclose(y, x[:, 0], rtol=1e-12)

    def test_data_second_moments(self):
        spec = mrl.Spectrum(np.array([1.0, 0.4]))
        x, _ = sample_dataset(np.zeros(2), spec, 10**5, 0.0, derive_rng(4))
        emp = (x * x).mean(axis=0)
        se = (x * x).std(axis=0, ddof=1) / np.sqrt(x.shape[0])
        assert np.all(np.abs(emp - spec.values) <= 3 * se)
        assert abs(emp[0] - 1.0) < 0.02

    def test_task_batch_noise_recoverable(self, small_config):
        task = draw_task_batch(small_config, derive_rng(5))
        noise = task.y_in - task.x_in @ task.theta
        # residual reproduces the stored noise: it is iid N(0, sigma^2)
        assert noise.shape == (small_config.n1,)
        assert np.std(noise) < 5 * small_config.noise_sigma


class TestInnerAdapt:
    def test_beta_zero_identity_copy(self):
        omega = np.array([1.0, 2.0])
        out = inner_adapt(omega, 0.0, np.ones((3, 2)), np.ones(3))
        np.testing.assert_array_equal(out, omega)
        assert out is not omega

    def test_scalar_step(self):
        # d=1: X=[[2]], y=[4], omega=0, beta=0.25 -> 0.25 * 2 * 4 = 2
        out = inner_adapt(np.zeros(1), 0.25, np.array([[2.0]]), np.array([4.0]))
        assert out[0] == pytest.approx(2.0, rel=1e-15)

    def test_interpolation_fixed_point(self):
        rng = derive_rng(6)
        x = rng.standard_normal((4, 6))
        omega = rng.standard_normal(6)
        y = x @ omega
        np.testing.assert_allclose(inner_adapt(omega, 0.7, x, y), omega, atol=1e-12)


class TestMetaGradient:
    def test_reduces_to_plain_ls_gradient(self, small_config):
        config = small_config.replace(beta_tr=0.0, n2=1)
        task = draw_task_batch(config, derive_rng(7))
        grad = meta_gradient(np.ones(config.d), 0.0, task)
        x, y = task.x_out[0], task.y_out[0]
        np.testing.assert_allclose(grad, x * (x @ np.ones(config.d) - y), rtol=1e-12)

    def test_finite_difference_oracle(self, small_config):
        rng = derive_rng(8)
        h = 1e-5
        worst = 0.0
        for _ in range(50):
            task = draw_task_batch(small_config, rng)
            omega = rng.standard_normal(small_config.d)
            grad = meta_gradient(omega, small_config.beta_tr, task)

            def loss(w):
                a = inner_adapt(w, small_config.beta_tr, task.x_in, task.y_in)
                r = task.x_out @ a - task.y_out
                return 0.5 * float(r @ r) / task.x_out.shape[0]

            fd = np.zeros(small_config.d)
            for i in range(small_config.d):
                e = np.zeros(small_config.d)
                e[i] = h
                fd[i] = (loss(omega + e) - loss(omega - e)) / (2 * h)
            worst = max(worst, np.max(np.abs(grad - fd)) / max(np.max(np.abs(grad)), 1e-12))
        assert worst < 1e-6

    def test_dense_reformulation_oracle(self):
        config = make_config(d=8, data_spectrum=mrl.poly_spectrum(8, 1.5), beta_tr=0.3)
        rng = derive_rng(9)
        worst = 0.0
        for _ in range(50):
            task = draw_task_batch(config, rng)
            omega = rng.standard_normal(8)
            grad = meta_gradient(omega, config.beta_tr, task)
            n1, n2 = task.x_in.shape[0], task.x_out.shape[0]
            jac = np.eye(8) - (config.beta_tr / n1) * task.x_in.T @ task.x_in
            b_mat = task.x_out @ jac / np.sqrt(n2)
            z_in = task.y_in - task.x_in @ task.theta
            z_out = task.y_out - task.x_out @ task.theta
            gamma = (
                task.x_out @ jac @ task.theta
                + z_out
                - (config.beta_tr / n1) * task.x_out @ task.x_in.T @ z_in
            ) / np.sqrt(n2)
            dense = b_mat.T @ (b_mat @ omega - gamma)
            worst = max(worst, float(np.max(np.abs(grad - dense))))
        assert worst < 1e-12


class TestOuterLoop:
    def test_T1_returns_omega0(self):
        config = make_config(T=1, omega0=np.array([1.0, 2.0, 3.0, 4.0]))
        traj = run_maml_sgd(config, [1])
        np.testing.assert_array_equal(traj.omega_final, config.omega0)

    def test_fixed_point_at_optimum(self):
        config = make_config(
            noise_sigma=0.0,
            task_spectrum=mrl.zero_task_spectrum(4),
            theta_star=np.array([0.3, -0.2, 0.5, 0.0]),
            omega0=np.array([0.3, -0.2, 0.5, 0.0]),
        )
        traj = run_maml_sgd(config, geometric_schedule(config.T))
        # iterates are exactly theta*; the running average picks up only
        # summation rounding (a couple of ulp)
        for _, omega_bar in traj.checkpoints:
            np.testing.assert_allclose(omega_bar, config.theta_star, rtol=0, atol=1e-14)
        assert excess_risk_closed(
            traj.omega_final, config.theta_star, config.data_spectrum, config.m, config.beta_te
        ) < 1e-28

    def test_determinism_and_schedule_independence(self):
        config = make_config(T=30)
        coarse = run_maml_sgd(config, [10, 30], rng=derive_rng(config.seed))
        dense = run_maml_sgd(config, list(range(1, 31)), rng=derive_rng(config.seed))
        dense_map = dict(dense.checkpoints)
        for t, vec in coarse.checkpoints:
            np.testing.assert_array_equal(vec, dense_map[t])

    def test_running_average_replay(self):
        config = make_config(T=12)
        traj = run_maml_sgd(config, list(range(1, 13)), rng=derive_rng(config.seed))
        # replay the loop by hand with the same stream
        rng = derive_rng(config.seed)
        omega = config.omega0.copy()
        iterates = []
        for _ in range(config.T):
            iterates.append(omega.copy())
            task = draw_task_batch(config, rng)
            omega = omega - config.alpha * meta_gradient(omega, config.beta_tr, task)
        for t, omega_bar in traj.checkpoints:
            np.testing.assert_array_equal(omega_bar, np.mean(iterates[:t], axis=0))

    def test_average_update_identity(self):
        config = make_config(T=9)
        traj = run_maml_sgd(config, list(range(1, 10)), rng=derive_rng(config.seed))
        bars = dict(traj.checkpoints)
        for t in range(1, 9):
            iterate = (t + 1) * bars[t + 1] - t * bars[t]
            assert np.all(np.isfinite(iterate))

    def test_divergence_guard(self):
        config = make_config(alpha=1e6, T=50)
        with pytest.raises(DivergedRunError) as err:
            run_maml_sgd(config, [50])
        assert err.value.t >= 1

    def test_validation_names_invariant(self):
        config = make_config(beta_tr=5.0)
        with pytest.raises(ConfigError, match="beta_tr"):
            run_maml_sgd(config, [10])

    def test_noiseless_population_risk_decreasing_on_average(self):
        base = make_config(
            d=20,
            data_spectrum=mrl.poly_spectrum(20, 2.0),
            task_spectrum=mrl.zero_task_spectrum(20),
            noise_sigma=0.0,
            theta_star=np.full(20, 0.2),
            T=60,
            alpha=0.08,
        )
        schedule = list(range(1, 61, 3))
        curves = []
        for rep in range(20):
            traj = run_maml_sgd(base, schedule, rng=derive_rng(base.seed, 1, rep))
            curves.append([r for _, r in risk_curve(traj, base)])
        mean = np.mean(curves, axis=0)
        assert np.all(np.diff(mean) <= 1e-12)


class TestSingleTask:
    def test_bitwise_agreement_with_degenerate_meta(self):
        config = make_config(
            beta_tr=0.0, task_spectrum=mrl.zero_task_spectrum(4), theta_star=np.ones(4) * 0.3
        )
        a = run_maml_sgd(config, [10, 40], rng=derive_rng(5))
        b = run_single_task_sgd(config, [10, 40], rng=derive_rng(5))
        for (ta, va), (tb, vb) in zip(a.checkpoints, b.checkpoints):
            assert ta == tb
            np.testing.assert_array_equal(va, vb)

    def test_single_task_risk_decreasing_in_T(self):
        d = 200
        spec = mrl.log_decay_spectrum(d, 2.0)
        theta = np.sqrt(spec.values)
        theta /= np.linalg.norm(theta)
        config = mrl.ProblemConfig(
            d=d, T=400, n1=40, n2=10, m=40,
            alpha=0.5 / (3 * spec.trace), beta_tr=0.0, beta_te=0.1,
            noise_sigma=0.5, data_spectrum=spec,
            task_spectrum=mrl.zero_task_spectrum(d),
            theta_star=theta, omega0=np.zeros(d), seed=3,
        )
        grid = [50, 100, 200, 400]
        curves = []
        for rep in range(10):
            traj = run_single_task_sgd(config, grid, rng=derive_rng(3, 1, rep))
            curves.append([r for _, r in risk_curve(traj, config)])
        mean = np.mean(curves, axis=0)
        assert np.all(np.diff(mean) < 0)

    def test_zero_noise_from_optimum_zero_risk(self):
        config = make_config(
            noise_sigma=0.0,
            task_spectrum=mrl.zero_task_spectrum(4),
            theta_star=np.array([1.0, 0.5, 0.2, 0.1]),
            omega0=np.array([1.0, 0.5, 0.2, 0.1]),
        )
        traj = run_single_task_sgd(config, [5, 20, 40])
        for _, mean_risk in risk_curve(traj, config):
            assert mean_risk < 1e-28  # averaging rounding only


class TestSchedule:
    def test_geometric_schedule_contents(self):
        sched = geometric_schedule(100)
        assert sched[0] == 1
        assert set(range(1, 11)) <= set(sched)
        assert sched[-1] == 100
        assert sched == sorted(set(sched))

    def test_schedule_capped_at_T(self):
        sched = geometric_schedule(7)
        assert sched == [1, 2, 3, 4, 5, 6, 7]


class TestTrajectorySerialization:
    def test_csv_and_json(self, tmp_path):
        config = make_config(T=6)
        traj = run_maml_sgd(config, [2, 6])
        path = tmp_path / "traj.csv"
        traj.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "t,coordinate,value"
        assert len(lines) == 1 + 2 * config.d
        payload = traj.to_json()
        import json

        decoded = json.loads(payload)
        assert decoded["config_fingerprint"] == config.fingerprint()
        assert [c[0] for c in decoded["checkpoints"]] == [2, 6]
