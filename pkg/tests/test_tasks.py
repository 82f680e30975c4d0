import numpy as np
import pytest

from sdm_policy import sdm_errors as errors
from sdm_policy.diffusion import Demonstration, Normalizer, stack_demonstrations
from sdm_policy.ndnum import Rng
from sdm_policy.tasks import (
    EpisodeResult,
    GmmSpec,
    PointMassEnv,
    dataset_load,
    dataset_save,
    expert_policy,
    gen_gmm_demos,
    gen_pointmass_demos,
    gmm_noised_score,
    gmm_sample,
    make_demos,
    rollout,
    run_expert,
)

from .conftest import numeric_gradient, relative_error


def zero_policy(obs, rng):
    return np.zeros((4, 2))


class TestGmmSpec:
    @staticmethod
    def test_score_vanishes_between_symmetric_modes(gmm_spec):
        np.testing.assert_array_equal(gmm_spec.score([[0.0, 0.0]]), [[0.0, 0.0]])

    @staticmethod
    def test_standard_normal_score():
        spec = GmmSpec(means=[[0.0]], stds=[1.0], weights=[1.0])
        x = np.array([[-1.5], [0.0], [0.7]])
        np.testing.assert_allclose(spec.score(x), -x, atol=1e-15)

    @staticmethod
    def test_score_is_gradient_of_log_density(gmm_spec):
        points = np.array([[-2.1, 0.2], [0.4, -0.3], [1.7, 0.05]])
        for row in points:
            x = row[None, :].copy()
            numeric = numeric_gradient(lambda: float(gmm_spec.log_density(x)[0]), x)
            assert relative_error(gmm_spec.score(x), numeric) < 1e-5

    @staticmethod
    def test_log_density_of_standard_normal():
        spec = GmmSpec(means=[[0.0, 0.0]], stds=[1.0], weights=[1.0])
        assert spec.log_density([[0.0, 0.0]])[0] == pytest.approx(-np.log(2 * np.pi))

    @staticmethod
    def test_noised_at_zero_is_clean(gmm_spec, schedule):
        noised = gmm_spec.noised(schedule, 0)
        np.testing.assert_array_equal(noised.means, gmm_spec.means)
        np.testing.assert_allclose(noised.stds, gmm_spec.stds)

    @staticmethod
    def test_noised_variances(gmm_spec, schedule):
        noised = gmm_spec.noised(schedule, 30)
        alpha, sigma = schedule.alpha[30], schedule.sigma[30]
        np.testing.assert_allclose(noised.means, alpha * gmm_spec.means)
        np.testing.assert_allclose(noised.stds**2, alpha**2 * 0.09 + sigma**2)
        np.testing.assert_allclose(gmm_noised_score(gmm_spec, schedule, [[0.5, 0.5]], 30), noised.score([[0.5, 0.5]]))

    @staticmethod
    def test_noised_out_of_range(gmm_spec, schedule):
        with pytest.raises(errors.ContractError):
            gmm_spec.noised(schedule, 51)

    @staticmethod
    def test_normalized():
        spec = GmmSpec(means=[[2.0, 0.0]], stds=[0.5], weights=[1.0])
        normalized = spec.normalized(Normalizer([0.0, -1.0], [4.0, 1.0]))
        np.testing.assert_array_equal(normalized.means, [[0.0, 0.0]])
        np.testing.assert_array_equal(normalized.stds, [[0.25, 0.5]])

    @staticmethod
    @pytest.mark.parametrize(
        "weights, stds, error",
        [
            ([0.5, 0.4], [0.3, 0.3], errors.ConfigError),
            ([1.5, -0.5], [0.3, 0.3], errors.ConfigError),
            ([0.5, 0.5], [0.3, 0.0], errors.ConfigError),
            ([1.0], [0.3, 0.3], errors.ShapeError),
        ],
    )
    def test_invalid(weights, stds, error):
        with pytest.raises(error):
            GmmSpec(means=[[-2.0, 0.0], [2.0, 0.0]], stds=stds, weights=weights)


class TestGmmSample:
    @staticmethod
    def test_balanced_modes(gmm_spec):
        samples = gmm_sample(gmm_spec, 10_000, Rng(0))
        assert samples.shape == (10_000, 2)
        assert abs(np.mean(samples[:, 0] > 0) - 0.5) < 0.03
        right = samples[samples[:, 0] > 0]
        np.testing.assert_allclose(right.mean(axis=0), [2.0, 0.0], atol=0.03)
        np.testing.assert_allclose(right.std(axis=0), [0.3, 0.3], atol=0.03)

    @staticmethod
    def test_deterministic(gmm_spec):
        np.testing.assert_array_equal(gmm_sample(gmm_spec, 5, Rng(3)), gmm_sample(gmm_spec, 5, Rng(3)))

    @staticmethod
    def test_empty(gmm_spec):
        with pytest.raises(errors.ConfigError):
            gmm_sample(gmm_spec, 0, Rng(0))

    @staticmethod
    def test_demos(gmm_spec):
        demos = gen_gmm_demos(gmm_spec, 12, seed=1)
        obs, actions = stack_demonstrations(demos)
        assert obs.shape == (12, 0)
        assert actions.shape == (12, 1, 2)


class TestPointMassEnv:
    @staticmethod
    def test_episode_result_contract():
        with pytest.raises(errors.ContractError):
            EpisodeResult(True, 3, np.zeros((4, 2)), True)

    @staticmethod
    def test_segment_through_obstacle(env):
        assert env.segment_hits_obstacle(np.array([-0.5, 0.0]), np.array([0.5, 0.0]))
        assert not env.segment_hits_obstacle(np.array([-0.5, 0.5]), np.array([0.5, 0.5]))
        assert env.segment_hits_obstacle(np.array([0.1, 0.1]), np.array([0.1, 0.1]))

    @staticmethod
    def test_step_clips_commands(env):
        env.reset(Rng(0))
        start = env.position.copy()
        success, collided = env.step([10.0, 0.0])
        np.testing.assert_allclose(env.position, start + [0.05, 0.0])
        assert not success and not collided
        assert env.steps == 1

    @staticmethod
    def test_observation(env):
        obs = env.reset(Rng(0))
        assert obs.shape == (4,)
        np.testing.assert_array_equal(obs[2:], [0.8, 0.0])
        assert np.all(np.abs(obs[:2] - [-0.8, 0.0]) <= 0.05)


class TestExpert:
    @staticmethod
    @pytest.mark.parametrize("side", [1, -1])
    def test_detours_on_requested_side(env, side):
        result, observations, actions = run_expert(env, side, Rng(5))
        assert result.success and not result.collided
        assert result.steps < env.max_steps
        assert len(observations) == len(actions) == result.steps
        assert np.max(side * result.trajectory[:, 1]) > 0.3
        assert np.all(np.abs(actions) <= 1.0 + 1e-12)

    @staticmethod
    def test_chunk_policy_succeeds(env):
        policy = expert_policy(env)
        for seed in range(10):
            result = rollout(policy, env, Rng(seed))
            assert result.success and not result.collided

    @staticmethod
    def test_zero_policy_times_out(env):
        result = rollout(zero_policy, env, Rng(0))
        assert not result.success and not result.collided
        assert result.steps == env.max_steps

    @staticmethod
    def test_straight_line_collides(env):
        result = rollout(lambda obs, rng: np.tile([1.0, 0.0], (4, 1)), env, Rng(0))
        assert result.collided and not result.success

    @staticmethod
    def test_non_finite_chunk_fails(env):
        result = rollout(lambda obs, rng: np.full((4, 2), np.nan), env, Rng(0))
        assert not result.success and not result.collided
        assert result.steps == 0

    @staticmethod
    def test_rejects_malformed_chunk(env):
        with pytest.raises(errors.ShapeError):
            rollout(lambda obs, rng: np.zeros(8), env, Rng(0))


class TestPointMassDemos:
    @staticmethod
    def test_covers_both_detours(env):
        demos = gen_pointmass_demos(8, seed=0)
        obs, actions = stack_demonstrations(demos)
        assert obs.shape[1] == 4
        assert actions.shape[1:] == (env.horizon, 2)
        middle = obs[np.abs(obs[:, 0]) < 0.1]
        assert np.sum(middle[:, 1] > 0.3) >= 4
        assert np.sum(middle[:, 1] < -0.3) >= 4

    @staticmethod
    def test_first_chunk_lateral_velocity_is_bimodal():
        demos = gen_pointmass_demos(20, seed=0)
        starts = [PointMassEnv().reset(Rng(0).spawn(episode)) for episode in range(20)]
        first = [d for d in demos if any(np.array_equal(d.obs, start) for start in starts)]
        assert len(first) == 20
        lateral = np.array([d.actions[0, 1] for d in first])
        assert np.sum(lateral > 0) >= 8
        assert np.sum(lateral < 0) >= 8

    @staticmethod
    def test_normalized_chunks_in_unit_box():
        _, actions = stack_demonstrations(gen_pointmass_demos(4, seed=1))
        normalized = Normalizer.fit(actions).normalize(actions)
        assert np.all(np.abs(normalized) <= 1.0 + 1e-12)

    @staticmethod
    def test_deterministic():
        first = gen_pointmass_demos(2, seed=3)
        second = gen_pointmass_demos(2, seed=3)
        assert len(first) == len(second)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.obs, b.obs)
            np.testing.assert_array_equal(a.actions, b.actions)

    @staticmethod
    def test_needs_two_episodes():
        with pytest.raises(errors.ConfigError):
            gen_pointmass_demos(1, seed=0)

    @staticmethod
    def test_make_demos():
        assert len(make_demos("gmm", 7, seed=0)) == 7
        with pytest.raises(errors.ConfigError):
            make_demos("maze", 7, seed=0)


class TestDataset:
    @staticmethod
    def test_save_load_save_is_byte_identical(tmp_path):
        demos = gen_pointmass_demos(2, seed=0)
        first, second = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        dataset_save(first, demos)
        dataset_save(second, dataset_load(first))
        assert first.read_bytes() == second.read_bytes()

    @staticmethod
    def test_empty_file(tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert dataset_load(path) == []

    @staticmethod
    def test_blank_lines_skipped(tmp_path):
        path = tmp_path / "data.jsonl"
        dataset_save(path, [Demonstration([1.0], [[0.5, 0.5]])])
        path.write_text(path.read_text() + "\n\n")
        assert len(dataset_load(path)) == 1

    @staticmethod
    def test_missing_field_names_line(tmp_path):
        path = tmp_path / "data.jsonl"
        path.write_text('{"obs": [0.0], "actions": [[1.0]]}\n{"obs": [0.0]}\n')
        with pytest.raises(errors.DatasetParseError, match="line 2"):
            dataset_load(path)

    @staticmethod
    def test_invalid_json_names_line(tmp_path):
        path = tmp_path / "data.jsonl"
        path.write_text("{not json\n")
        with pytest.raises(errors.DatasetParseError, match="line 1"):
            dataset_load(path)
