"""
Evaluation: success rate over seeded rollouts, single-thread inference latency, same-noise
action error, MMD and mode coverage for distribution match, and score-estimation agreement
with the analytic mixture oracle. Results collect in a :class:`MetricsReport`.
"""

import concurrent.futures
import dataclasses
import json
import logging
import os
import re
import time
import typing

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist, pdist

from . import sdm_errors as errors
from .config import EvalConfig
from .diffusion import DenoiserNet, NoiseSchedule, ddpm_sample, score_estimate
from .files import atomic_write_text
from .ndnum import Rng
from .sdm import OneStepGenerator, generator_sample
from .tasks import GmmSpec, PointMassEnv, Policy, default_gmm_spec, gmm_sample, rollout

logger = logging.getLogger(__name__)

METRICS = ("success_rate", "success_rate_top_k", "mmd2", "hz", "action_error", "score_cosine")
MODE_COVERAGE_METRIC = re.compile(r"^mode_coverage_\d+$")
DEFAULT_SEEDS = (42, 43, 44)
MEDIAN_POINTS = 1000
FALLBACK_BANDWIDTH = 1.0
KERNEL_BLOCK = 1024


def _check_metric(name: str):
    if name not in METRICS and not MODE_COVERAGE_METRIC.match(name):
        raise errors.ConfigError(f"Unknown metric {name!r}, expected one of {METRICS} or mode_coverage_<k>")


@dataclasses.dataclass
class MetricEntry:
    metric: str
    value: float
    seed: typing.Optional[int] = None
    context: typing.Dict[str, str] = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        _check_metric(self.metric)
        self.value = float(self.value)
        self.context = {str(k): str(v) for k, v in self.context.items()}

    def context_text(self) -> str:
        return ";".join(f"{k}={v}" for k, v in sorted(self.context.items()))


@dataclasses.dataclass
class MetricsReport:
    entries: typing.List[MetricEntry] = dataclasses.field(default_factory=list)
    timestamp: str = dataclasses.field(default_factory=lambda: pd.Timestamp.now(tz="UTC").isoformat())

    def add(self, metric: str, value: float, seed: typing.Optional[int] = None, **context) -> MetricEntry:
        entry = MetricEntry(metric, value, seed, context)
        self.entries.append(entry)
        return entry

    def extend(self, other: "MetricsReport"):
        self.entries.extend(other.entries)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            {
                "metric": [e.metric for e in self.entries],
                "value": [e.value for e in self.entries],
                "seed": pd.array([e.seed for e in self.entries], dtype="Int64"),
                "context": [e.context_text() for e in self.entries],
            }
        )
        return frame

    def write_csv(self, path: typing.Union[str, os.PathLike]):
        atomic_write_text(path, self.to_frame().to_csv(index=False, float_format="%.17g"))

    def write_json(self, path: typing.Union[str, os.PathLike]):
        document = {
            "timestamp": self.timestamp,
            "entries": [
                {"metric": e.metric, "value": e.value, "seed": e.seed, "context": e.context} for e in self.entries
            ],
        }
        atomic_write_text(path, json.dumps(document, indent=2, sort_keys=True))


@dataclasses.dataclass
class MmdResult:
    value: float
    bandwidth: float
    fallback: bool = False


def median_bandwidth(X: np.ndarray, Y: np.ndarray) -> typing.Tuple[float, bool]:
    """Median pairwise distance over at most ``MEDIAN_POINTS`` evenly strided points of X and Y

    Returns:
        tuple[float, bool]: bandwidth and whether the degenerate-data fallback was used
    """
    pooled = np.concatenate([X, Y])
    stride = max(1, int(np.ceil(len(pooled) / MEDIAN_POINTS)))
    distances = pdist(pooled[::stride])
    median = float(np.median(distances)) if distances.size else 0.0
    if median > 0.0:
        return median, False
    logger.warning("all points coincide, falling back to bandwidth %.1f", FALLBACK_BANDWIDTH)
    return FALLBACK_BANDWIDTH, True


def _kernel_sum(A: np.ndarray, B: np.ndarray, bandwidth: float) -> float:
    total = 0.0
    for start in range(0, len(A), KERNEL_BLOCK):
        block = cdist(A[start : start + KERNEL_BLOCK], B, "sqeuclidean")
        total += float(np.exp(-0.5 * block / bandwidth**2).sum())
    return total


def mmd2(X, Y, bandwidth: typing.Union[str, float] = "median") -> MmdResult:
    """
    Biased (V-statistic) squared MMD with the RBF kernel ``exp(-d^2 / (2 bw^2))``

    Parameters
    ----------

    X: array-like
        n x d samples
    Y: array-like
        m x d samples
    bandwidth: str | float
        ``"median"`` for the median heuristic over both sets, or a fixed positive value

    Returns
    -------

    MmdResult
        Squared MMD clipped at zero, the bandwidth used and whether the degenerate fallback kicked in

    Raises
    ------

    ConfigError
        When a sample set is empty or the bandwidth is invalid
    ShapeError
        When the sample sets have different widths
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if len(X) < 1 or len(Y) < 1:
        raise errors.ConfigError("mmd2 needs nonempty sample sets")
    if X.shape[1] != Y.shape[1]:
        raise errors.ShapeError(f"mmd2 sample sets have dims {X.shape[1]} and {Y.shape[1]}")
    fallback = False
    if bandwidth == "median":
        bandwidth, fallback = median_bandwidth(X, Y)
    elif not isinstance(bandwidth, (int, float)) or not bandwidth > 0:
        raise errors.ConfigError(f"mmd2 bandwidth must be 'median' or a positive number, got {bandwidth!r}")
    n, m = len(X), len(Y)
    value = (
        _kernel_sum(X, X, bandwidth) / n**2
        + _kernel_sum(Y, Y, bandwidth) / m**2
        - 2.0 * _kernel_sum(X, Y, bandwidth) / (n * m)
    )
    return MmdResult(max(value, 0.0), float(bandwidth), fallback)


def add_mmd(report: MetricsReport, result: MmdResult, seed: typing.Optional[int] = None, **context) -> MetricEntry:
    """Record an ``mmd2`` row tagged with its bandwidth and whether the degenerate fallback was used"""
    return report.add(
        "mmd2", result.value, seed, bandwidth=f"{result.bandwidth:.6g}", bandwidth_fallback=result.fallback, **context
    )


def mode_coverage(samples, modes: typing.Sequence[typing.Tuple[typing.Sequence[float], float]]) -> np.ndarray:
    """Fraction of samples within each mode's radius; a sample may count for several modes or none"""
    if not modes:
        raise errors.ConfigError("mode_coverage needs at least one mode")
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    centers = np.array([center for center, _ in modes], dtype=np.float64)
    radii = np.array([radius for _, radius in modes], dtype=np.float64)
    return (cdist(samples, centers) <= radii[None, :]).mean(axis=0)


def generator_policy(G: OneStepGenerator) -> Policy:
    """One-step chunk policy in raw action units"""
    net = G.net

    def policy(obs: np.ndarray, rng: Rng) -> np.ndarray:
        z = rng.gaussian(1, net.chunk_dim)
        actions = generator_sample(G, np.asarray(obs, dtype=np.float64)[None, :], z)
        return net.normalizer.denormalize(actions.reshape(net.horizon, net.action_dim))

    return policy


def teacher_policy(net: DenoiserNet, s: NoiseSchedule, nfe: int = 10) -> Policy:
    """Multi-step ancestral-sampling chunk policy in raw action units"""

    def policy(obs: np.ndarray, rng: Rng) -> np.ndarray:
        actions = ddpm_sample(net, s, np.asarray(obs, dtype=np.float64)[None, :], nfe, rng)
        return net.normalizer.denormalize(actions.reshape(net.horizon, net.action_dim))

    return policy


def _sorted_rows(obs: np.ndarray) -> np.ndarray:
    if obs.shape[1] == 0:
        return obs
    return obs[np.lexsort(obs.T[::-1])]


def action_error(
    G: OneStepGenerator, teacher: DenoiserNet, s: NoiseSchedule, obs_set, rng: Rng, n_ref_nfe: int = 10
) -> float:
    """Mean per-dimension squared error between one-step and teacher chunks started from the same noise

    Observations are sorted lexicographically first, so the value doesn't depend on their order.
    """
    obs = np.asarray(obs_set, dtype=np.float64)
    if obs.ndim != 2 or len(obs) == 0:
        raise errors.ConfigError("action_error needs a nonempty (N, obs_dim) observation set")
    obs = _sorted_rows(obs)
    z = rng.gaussian(len(obs), G.chunk_dim)
    student = generator_sample(G, obs, z)
    reference = ddpm_sample(teacher, s, obs, n_ref_nfe, rng, a_T=z)
    return float(np.mean(np.square(student - reference)))


def bench_latency(
    policy: Policy,
    obs,
    reps: int = 100,
    warmup: int = 10,
    rng: typing.Optional[Rng] = None,
    clock: typing.Callable[[], float] = time.perf_counter,
) -> float:
    """Calls per second of ``policy`` on one observation, single threaded

    Raises:
        ConfigError: when ``reps < 100`` or ``warmup < 10``
        ClockError: when the clock reads backwards or reports no elapsed time

    Returns:
        float: ``reps / elapsed seconds``
    """
    if reps < 100 or warmup < 10:
        raise errors.ConfigError(f"bench_latency needs reps >= 100 and warmup >= 10, got {reps}, {warmup}")
    rng = rng or Rng(0)
    obs = np.asarray(obs, dtype=np.float64)
    for _ in range(warmup):
        policy(obs, rng)
    start = previous = clock()
    for _ in range(reps):
        policy(obs, rng)
        now = clock()
        if now < previous:
            raise errors.ClockError(f"Clock went backwards from {previous} to {now}")
        previous = now
    elapsed = previous - start
    if elapsed <= 0:
        raise errors.ClockError(f"Clock reported {elapsed} s for {reps} calls")
    return reps / elapsed


def episode_outcomes(
    policy: Policy, env: PointMassEnv, seeds: typing.Sequence[int], n_episodes: int, threads: int = 1
) -> pd.DataFrame:
    """One row per rollout; episode ``k`` of seed ``s`` runs on stream ``Rng(s).spawn(k)``"""
    jobs = [(seed, episode) for seed in seeds for episode in range(n_episodes)]

    def run(job):
        seed, episode = job
        result = rollout(policy, env, Rng(seed).spawn(episode))
        return {
            "seed": seed,
            "episode": episode,
            "success": result.success,
            "collided": result.collided,
            "steps": result.steps,
        }

    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        rows = list(executor.map(run, jobs))
    return pd.DataFrame(rows, columns=["seed", "episode", "success", "collided", "steps"])


@dataclasses.dataclass
class SuccessRate:
    mean: float
    std: float
    per_seed: pd.Series
    episodes: pd.DataFrame


def summarize_success(episodes: pd.DataFrame) -> SuccessRate:
    per_seed = episodes.groupby("seed", sort=True)["success"].mean().astype(np.float64)
    return SuccessRate(float(per_seed.mean()), float(per_seed.std(ddof=0)), per_seed, episodes)


def success_rate(
    policy: Policy,
    env: PointMassEnv,
    n_episodes: int = 100,
    seeds: typing.Sequence[int] = DEFAULT_SEEDS,
    threads: int = 1,
) -> SuccessRate:
    """Per-seed success fractions, with their mean and population std

    Raises:
        ConfigError: when ``n_episodes < 20`` or fewer than 3 seeds are given
    """
    if n_episodes < 20 or len(seeds) < 3:
        raise errors.ConfigError(f"success_rate needs >= 20 episodes and >= 3 seeds, got {n_episodes}, {list(seeds)}")
    summary = summarize_success(episode_outcomes(policy, env, seeds, n_episodes, threads))
    logger.info("success rate %.3f +- %.3f over seeds %s", summary.mean, summary.std, list(seeds))
    return summary


def top_k_mean(values: typing.Sequence[float], k: int = 5) -> float:
    """Mean of the ``k`` largest values, or of all of them when there are fewer"""
    if len(values) == 0 or k < 1:
        raise errors.ConfigError("top_k_mean needs at least one value and k >= 1")
    return float(np.mean(np.sort(np.asarray(values, dtype=np.float64))[::-1][:k]))


def _cosines(estimate: np.ndarray, truth: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(estimate, axis=1) * np.linalg.norm(truth, axis=1)
    return np.sum(estimate * truth, axis=1) / np.maximum(norms, 1e-12)


def score_cosines(net: DenoiserNet, s: NoiseSchedule, spec: GmmSpec, points, t: int) -> np.ndarray:
    """Cosine similarity between the network's score and the exact noised-mixture score, per point

    ``spec`` must be expressed in the network's normalized action units.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    obs = np.zeros((len(points), net.obs_dim))
    return _cosines(score_estimate(net, s, points, t, obs), spec.noised(s, t).score(points))


def score_cosine(net: DenoiserNet, s: NoiseSchedule, spec: GmmSpec, t: int, n: int, rng: Rng) -> float:
    """Mean cosine over ``n`` draws from the noised mixture at ``t``"""
    points = gmm_sample(spec.noised(s, t), n, rng)
    return float(np.mean(score_cosines(net, s, spec, points, t)))


def region_points(spec: GmmSpec, n: int, rng: Rng) -> typing.Dict[str, np.ndarray]:
    """Sample points per density region of ``spec``

    ``high`` points lie within one std (Mahalanobis) of a mode; ``low`` points lie in the
    middle of the segments joining consecutive modes.
    """
    components = rng.choice(len(spec.weights), n, p=spec.weights)
    directions = rng.gaussian(n, spec.dim)
    directions /= np.maximum(np.linalg.norm(directions, axis=1, keepdims=True), 1e-12)
    radius = rng.uniform(0.0, 1.0, (n, 1)) ** (1.0 / spec.dim)
    high = spec.means[components] + spec.stds[components] * directions * radius

    if len(spec.means) < 2:
        return {"high": high, "low": np.zeros((0, spec.dim))}
    pairs = rng.integers(0, len(spec.means) - 2, n)
    blend = rng.uniform(0.35, 0.65, (n, 1))
    low = spec.means[pairs] + blend * (spec.means[pairs + 1] - spec.means[pairs])
    return {"high": high, "low": low}


def score_cosine_by_region(
    net: DenoiserNet, s: NoiseSchedule, spec: GmmSpec, t: int, n: int, rng: Rng
) -> typing.Dict[str, float]:
    """Mean score cosine inside the modes and in the inter-mode band of the noised mixture at ``t``"""
    regions = region_points(spec.noised(s, t), n, rng)
    return {
        region: float(np.mean(score_cosines(net, s, spec, points, t)))
        for region, points in regions.items()
        if len(points)
    }


SCORE_T_FRACS = (0.1, 0.3, 0.5)


def timestep_at(s: NoiseSchedule, frac: float) -> int:
    return int(min(max(1, np.floor(frac * s.T + 0.5)), s.T))


def gmm_modes(spec: GmmSpec, radius_stds: float = 3.0) -> typing.List[typing.Tuple[np.ndarray, float]]:
    return [(mean, radius_stds * float(std.max())) for mean, std in zip(spec.means, spec.stds)]


def evaluate_generator(
    G: OneStepGenerator,
    teacher: DenoiserNet,
    s: NoiseSchedule,
    task: str,
    obs_set: np.ndarray,
    cfg: EvalConfig,
    threads: int = 1,
    include_latency: bool = True,
    **context,
) -> MetricsReport:
    """Per-seed metrics of a distilled generator against its teacher

    Every seed in ``cfg.seeds`` gets action error and, with ``include_latency``, Hz for
    both policies. Point-mass runs add success rates; mixture runs add MMD against the
    teacher and the true mixture, mode coverage and the teacher's score agreement.

    Args:
        cfg (EvalConfig): seeds, episode counts, NFE and latency settings
        context: extra tags attached to every entry
    """
    report = MetricsReport()
    obs_set = np.asarray(obs_set, dtype=np.float64)
    bench_obs = obs_set[0]
    policies = {"generator": generator_policy(G), "teacher": teacher_policy(teacher, s, cfg.nfe)}

    if task == "pointmass":
        env = PointMassEnv(horizon=teacher.horizon)
        for name, policy in policies.items():
            summary = success_rate(policy, env, cfg.episodes, cfg.seeds, threads)
            for seed, value in summary.per_seed.items():
                report.add("success_rate", value, int(seed), policy=name, **context)

    for seed in cfg.seeds:
        rng = Rng(seed)
        report.add(
            "action_error",
            action_error(G, teacher, s, obs_set, rng.spawn(0), n_ref_nfe=cfg.nfe),
            seed,
            nfe=cfg.nfe,
            **context,
        )
        if include_latency:
            for name, policy in policies.items():
                hz = bench_latency(policy, bench_obs, cfg.reps, cfg.warmup, rng.spawn(1))
                report.add("hz", hz, seed, policy=name, nfe=1 if name == "generator" else cfg.nfe, **context)
        if task == "gmm":
            _add_gmm_metrics(report, G, teacher, s, cfg, seed, **context)
    return report


def _add_gmm_metrics(
    report: MetricsReport,
    G: OneStepGenerator,
    teacher: DenoiserNet,
    s: NoiseSchedule,
    cfg: EvalConfig,
    seed: int,
    **context,
):
    spec = default_gmm_spec()
    rng = Rng(seed)
    n = cfg.samples
    obs = np.zeros((n, teacher.obs_dim))
    student = teacher.normalizer.denormalize(generator_sample(G, obs, rng.spawn(2).gaussian(n, G.chunk_dim)))
    reference = teacher.normalizer.denormalize(ddpm_sample(teacher, s, obs, cfg.nfe, rng.spawn(3)))
    truth = gmm_sample(spec, n, rng.spawn(4))
    for ref, samples in (("teacher", reference), ("data", truth)):
        add_mmd(report, mmd2(student, samples), seed, ref=ref, **context)
    for k, fraction in enumerate(mode_coverage(student, gmm_modes(spec))):
        report.add(f"mode_coverage_{k}", fraction, seed, **context)

    normalized = spec.normalized(teacher.normalizer)
    for frac in SCORE_T_FRACS:
        t = timestep_at(s, frac)
        cosine = score_cosine(teacher, s, normalized, t, 1000, rng.spawn(5, t))
        report.add("score_cosine", cosine, seed, t_frac=frac, region="all", **context)
        for region, value in score_cosine_by_region(teacher, s, normalized, t, 1000, rng.spawn(6, t)).items():
            report.add("score_cosine", value, seed, t_frac=frac, region=region, **context)
