"""
Desk-scale tasks: a Gaussian-mixture action distribution with an exact score, and a 2-D
point-mass reaching task whose scripted expert detours around an obstacle on either side.
"""

import dataclasses
import json
import logging
import os
import typing

import numpy as np
from scipy.special import logsumexp

from . import sdm_errors as errors
from .diffusion import Demonstration, NoiseSchedule, Normalizer
from .files import atomic_write_text
from .ndnum import Rng

logger = logging.getLogger(__name__)

TASKS = ("gmm", "pointmass")

Policy = typing.Callable[[np.ndarray, Rng], np.ndarray]


@dataclasses.dataclass
class GmmSpec:
    """Mixture of axis-aligned Gaussians; ``stds`` may be given per component or per dimension"""

    means: np.ndarray
    stds: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        k, dim = self.means.shape
        stds = np.asarray(self.stds, dtype=np.float64)
        if stds.ndim < 2:
            stds = np.broadcast_to(stds.reshape(-1, 1) if stds.ndim == 1 else stds, (k, dim))
        self.stds = np.array(stds, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if self.stds.shape != (k, dim) or self.weights.shape != (k,):
            raise errors.ShapeError(
                f"GMM with means {self.means.shape} got stds {self.stds.shape} and weights {self.weights.shape}"
            )
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise errors.ConfigError(f"GMM weights must be >= 0 and sum to 1, got {self.weights.tolist()}")
        if np.any(self.stds <= 0):
            raise errors.ConfigError(f"GMM stds must be positive, got {self.stds.tolist()}")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def noised(self, s: NoiseSchedule, t: int) -> "GmmSpec":
        """The VP-noised mixture at ``t``: means scaled by alpha, variances ``alpha^2 std^2 + sigma^2``"""
        if not 0 <= t <= s.T:
            raise errors.ContractError(f"Timestep out of range 0..{s.T}: {t}")
        alpha, sigma = s.alpha[t], s.sigma[t]
        return GmmSpec(alpha * self.means, np.sqrt(alpha**2 * self.stds**2 + sigma**2), self.weights)

    def normalized(self, normalizer: Normalizer) -> "GmmSpec":
        return GmmSpec(normalizer.normalize(self.means), self.stds / normalizer.half_range, self.weights)

    def _component_log_densities(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        diff = x[:, None, :] - self.means[None, :, :]
        var = np.square(self.stds)[None, :, :]
        return -0.5 * np.sum(np.square(diff) / var + np.log(2.0 * np.pi * var), axis=2)

    def log_density(self, x) -> np.ndarray:
        return logsumexp(self._component_log_densities(x), axis=1, b=self.weights[None, :])

    def score(self, x) -> np.ndarray:
        """Exact ``grad_x log p(x)``, with responsibilities computed in log space"""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        with np.errstate(divide="ignore"):
            joint = self._component_log_densities(x) + np.log(self.weights)[None, :]
        responsibilities = np.exp(joint - logsumexp(joint, axis=1, keepdims=True))
        pulls = (self.means[None, :, :] - x[:, None, :]) / np.square(self.stds)[None, :, :]
        return np.sum(responsibilities[:, :, None] * pulls, axis=1)


def default_gmm_spec() -> GmmSpec:
    return GmmSpec(means=[[-2.0, 0.0], [2.0, 0.0]], stds=[0.3, 0.3], weights=[0.5, 0.5])


def gmm_sample(spec: GmmSpec, n: int, rng: Rng) -> np.ndarray:
    if n < 1:
        raise errors.ConfigError(f"gmm_sample needs n >= 1, got {n}")
    components = rng.choice(len(spec.weights), n, p=spec.weights)
    return spec.means[components] + spec.stds[components] * rng.gaussian(n, spec.dim)


def gmm_noised_score(spec: GmmSpec, s: NoiseSchedule, x, t: int) -> np.ndarray:
    """Exact score of the VP-noised mixture at timestep ``t``"""
    s.check_timestep(t)
    return spec.noised(s, int(t)).score(x)


def gen_gmm_demos(spec: GmmSpec, n: int, seed: int) -> typing.List[Demonstration]:
    """Observation-free demonstrations, one 1-step chunk of a mixture draw each"""
    samples = gmm_sample(spec, n, Rng(seed))
    return [Demonstration(obs=np.zeros(0), actions=sample[None, :]) for sample in samples]


@dataclasses.dataclass
class EpisodeResult:
    success: bool
    steps: int
    trajectory: np.ndarray
    collided: bool

    def __post_init__(self):
        if self.success and self.collided:
            raise errors.ContractError("An episode can't both succeed and collide")


@dataclasses.dataclass
class PointMassEnv:
    """Reach ``goal`` in the [-1, 1] box without crossing the central disc

    Actions are velocity commands clipped to [-1, 1] per axis; one step moves the point
    by ``step_size * action``. Observations are ``[position, goal]``.
    """

    start: typing.Tuple[float, float] = (-0.8, 0.0)
    goal: typing.Tuple[float, float] = (0.8, 0.0)
    obstacle_center: typing.Tuple[float, float] = (0.0, 0.0)
    obstacle_radius: float = 0.25
    step_size: float = 0.05
    max_steps: int = 100
    success_radius: float = 0.1
    start_jitter: float = 0.05
    horizon: int = 4
    position: np.ndarray = dataclasses.field(default=None, repr=False)
    steps: int = dataclasses.field(default=0, repr=False)

    def __post_init__(self):
        if self.position is None:
            self.position = np.array(self.start, dtype=np.float64)

    @property
    def obs_dim(self) -> int:
        return 4

    def copy(self) -> "PointMassEnv":
        return dataclasses.replace(self, position=np.array(self.position), steps=self.steps)

    def reset(self, rng: Rng) -> np.ndarray:
        jitter = rng.uniform(-self.start_jitter, self.start_jitter, 2) if self.start_jitter else np.zeros(2)
        self.position = np.clip(np.asarray(self.start, dtype=np.float64) + jitter, -1.0, 1.0)
        self.steps = 0
        return self.observation()

    def observation(self) -> np.ndarray:
        return np.concatenate([self.position, np.asarray(self.goal, dtype=np.float64)])

    def reached_goal(self) -> bool:
        return bool(np.linalg.norm(self.position - np.asarray(self.goal)) <= self.success_radius)

    def segment_hits_obstacle(self, start: np.ndarray, end: np.ndarray) -> bool:
        center = np.asarray(self.obstacle_center, dtype=np.float64)
        delta = end - start
        length2 = float(delta @ delta)
        u = 0.0 if length2 == 0.0 else float(np.clip((center - start) @ delta / length2, 0.0, 1.0))
        return bool(np.linalg.norm(start + u * delta - center) < self.obstacle_radius)

    def step(self, action) -> typing.Tuple[bool, bool]:
        """Move once; returns ``(success, collided)``"""
        previous = self.position
        self.position = np.clip(previous + self.step_size * np.clip(action, -1.0, 1.0), -1.0, 1.0)
        self.steps += 1
        collided = self.segment_hits_obstacle(previous, self.position)
        return (not collided and self.reached_goal()), collided


def expert_waypoints(env: PointMassEnv, side: int) -> typing.List[np.ndarray]:
    lateral = side * 0.45
    return [np.array([-0.3, lateral]), np.array([0.3, lateral]), np.asarray(env.goal, dtype=np.float64)]


def expert_action(env: PointMassEnv, position: np.ndarray, side: int) -> np.ndarray:
    """Unit-speed command toward the first waypoint still ahead; shorter when it is within one step"""
    waypoints = expert_waypoints(env, side)
    target = next((w for w in waypoints if w[0] > position[0] + env.step_size / 2), waypoints[-1])
    delta = target - position
    distance = float(np.linalg.norm(delta))
    if distance <= env.step_size:
        return delta / env.step_size
    return delta / distance


def expert_policy(env: PointMassEnv) -> Policy:
    """Scripted expert as an open-loop chunk policy; the detour side follows the start's lateral sign"""

    def policy(obs: np.ndarray, rng: Rng) -> np.ndarray:
        position = np.asarray(obs[:2], dtype=np.float64)
        side = 1 if position[1] >= 0 else -1
        chunk = []
        for _ in range(env.horizon):
            action = expert_action(env, position, side)
            chunk.append(action)
            position = np.clip(position + env.step_size * action, -1.0, 1.0)
        return np.array(chunk)

    return policy


def run_expert(
    env: PointMassEnv, side: int, rng: Rng
) -> typing.Tuple[EpisodeResult, np.ndarray, np.ndarray]:
    """Closed-loop expert episode detouring on ``side`` (+1 above, -1 below the obstacle)

    Returns:
        tuple[EpisodeResult, np.ndarray, np.ndarray]: result, per-step observations and actions
    """
    env = env.copy()
    obs = env.reset(rng)
    trajectory, observations, actions = [env.position.copy()], [], []
    success = collided = False
    while env.steps < env.max_steps and not (success or collided):
        action = expert_action(env, env.position, side)
        observations.append(obs)
        actions.append(action)
        success, collided = env.step(action)
        obs = env.observation()
        trajectory.append(env.position.copy())
    result = EpisodeResult(success, env.steps, np.array(trajectory), collided)
    return result, np.array(observations), np.array(actions)


def gen_pointmass_demos(
    n_episodes: int, seed: int, env: typing.Optional[PointMassEnv] = None
) -> typing.List[Demonstration]:
    """Expert demonstrations alternating between the two detour sides

    Each visited step becomes one ``(obs, next H actions)`` pair; chunks running past the
    episode end repeat its last action.

    Raises:
        ConfigError: when fewer than two episodes are requested
    """
    if n_episodes < 2:
        raise errors.ConfigError(f"gen_pointmass_demos needs n_episodes >= 2, got {n_episodes}")
    env = env or PointMassEnv()
    root = Rng(seed)
    demos = []
    for episode in range(n_episodes):
        side = 1 if episode % 2 == 0 else -1
        result, observations, actions = run_expert(env, side, root.spawn(episode))
        if not result.success:
            raise errors.ContractError(f"Scripted expert failed episode {episode} (side {side})")
        padded = np.concatenate([actions, np.repeat(actions[-1:], env.horizon - 1, axis=0)])
        for k, obs in enumerate(observations):
            demos.append(Demonstration(obs=obs, actions=padded[k : k + env.horizon]))
    logger.info("generated %d demonstrations from %d expert episodes", len(demos), n_episodes)
    return demos


def rollout(policy: Policy, env: PointMassEnv, rng: Rng) -> EpisodeResult:
    """Run ``policy`` in a copy of ``env``, executing each H-step chunk open loop

    An episode stops on success, collision or ``max_steps``. A non-finite chunk ends the
    episode as a failure without a collision.
    """
    env = env.copy()
    obs = env.reset(rng)
    trajectory = [env.position.copy()]
    success = collided = False
    while env.steps < env.max_steps and not (success or collided):
        chunk = np.asarray(policy(obs, rng), dtype=np.float64)
        if chunk.ndim != 2 or chunk.shape[1] != 2:
            raise errors.ShapeError(f"Policy returned a chunk of shape {chunk.shape}, expected H x 2")
        if not np.isfinite(chunk).all():
            logger.warning("policy returned a non-finite action at step %d, failing the episode", env.steps)
            break
        for action in chunk:
            success, collided = env.step(action)
            trajectory.append(env.position.copy())
            if success or collided or env.steps >= env.max_steps:
                break
        obs = env.observation()
    return EpisodeResult(success, env.steps, np.array(trajectory), collided)


def dataset_save(path: typing.Union[str, os.PathLike], demos: typing.Sequence[Demonstration]):
    lines = [json.dumps({"obs": demo.obs.tolist(), "actions": demo.actions.tolist()}) for demo in demos]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def dataset_load(path: typing.Union[str, os.PathLike]) -> typing.List[Demonstration]:
    """Read a JSON Lines dataset

    Raises:
        DatasetParseError: naming the 1-based line number of the first malformed line
    """
    demos = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                demos.append(Demonstration(obs=record["obs"], actions=record["actions"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, errors.ShapeError) as e:
                raise errors.DatasetParseError(f"{path}, line {lineno}: {type(e).__name__}: {e}")
    return demos


def make_demos(task: str, n: int, seed: int) -> typing.List[Demonstration]:
    """Demonstrations for a task by name: ``n`` mixture draws, or ``n`` expert episodes"""
    if task == "gmm":
        return gen_gmm_demos(default_gmm_spec(), n, seed)
    if task == "pointmass":
        return gen_pointmass_demos(n, seed)
    raise errors.ConfigError(f"Unknown task {task!r}, expected one of {TASKS}")
