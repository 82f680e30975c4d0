"""
Variance-preserving discrete diffusion over flattened action chunks.

Teachers predict the injected noise (epsilon). Denoised actions and scores are derived
from that prediction, so every network in the package shares one parameterization.
"""

import dataclasses
import logging
import os
import typing

import numpy as np
import pandas as pd

from . import sdm_errors as errors
from .ndnum import (
    AdamState,
    ForwardCache,
    MlpNet,
    Rng,
    Tensor2,
    adam_step,
    as_tensor2,
    load_checkpoint,
    make_mlp,
    mlp_backward,
    mlp_forward,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

SCHEDULE_KINDS = ("linear",)
TIME_EMBEDDING_DIM = 16
TIME_FEATURES = TIME_EMBEDDING_DIM + 1
X0_CLIP = 1.5
MIN_SCORE_SIGMA = 1e-6


@dataclasses.dataclass
class NoiseSchedule:
    """Per-timestep coefficients, indexed ``0..T`` with index 0 standing for clean data

    ``step_scale``, ``gamma`` and ``sigma_tilde`` are the coefficients of the one-step
    ancestral update ``a[t-1] = step_scale[t] * (a[t] - gamma[t] * eps) + sigma_tilde[t] * noise``.
    """

    kind: str
    T: int
    beta_min: float
    beta_max: float
    beta: np.ndarray
    alpha_bar: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray
    step_scale: np.ndarray
    gamma: np.ndarray
    sigma_tilde: np.ndarray

    def check_timestep(self, t) -> np.ndarray:
        """Return ``t`` as an integer array, rejecting anything outside ``1..T``"""
        steps = np.asarray(t)
        if steps.size and not np.issubdtype(steps.dtype, np.integer):
            if not np.all(np.equal(np.mod(steps, 1), 0)):
                raise errors.ContractError(f"Timesteps must be integers, got {t}")
        steps = steps.astype(np.int64)
        if steps.size and (steps.min() < 1 or steps.max() > self.T):
            raise errors.ContractError(f"Timestep out of range 1..{self.T}: {t}")
        return steps

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T, "beta_min": self.beta_min, "beta_max": self.beta_max}


def make_schedule(kind: str = "linear", T: int = 50, beta_min: float = 1e-4, beta_max: float = 0.2) -> NoiseSchedule:
    """Build a variance-preserving schedule

    Args:
        kind (str): beta spacing, only "linear" is supported
        T (int): number of timesteps
        beta_min (float): variance of the first step
        beta_max (float): variance of the last step

    Raises:
        ConfigError: when the kind is unknown or the range is invalid

    Returns:
        NoiseSchedule: coefficients for t = 0..T
    """
    if kind not in SCHEDULE_KINDS:
        raise errors.ConfigError(f"Unknown schedule kind {kind!r}, expected one of {SCHEDULE_KINDS}")
    if int(T) != T or T < 1:
        raise errors.ConfigError(f"Schedule needs an integer T >= 1, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise errors.ConfigError(f"Schedule needs 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    T = int(T)

    beta = np.concatenate([[0.0], np.linspace(beta_min, beta_max, T)])
    alpha_bar = np.cumprod(1.0 - beta)
    alpha = np.sqrt(alpha_bar)
    sigma = np.sqrt(1.0 - alpha_bar)

    step_scale = np.zeros(T + 1)
    gamma = np.zeros(T + 1)
    sigma_tilde = np.zeros(T + 1)
    step_scale[1:] = 1.0 / np.sqrt(1.0 - beta[1:])
    gamma[1:] = beta[1:] / sigma[1:]
    sigma_tilde[1:] = np.sqrt(beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]))

    return NoiseSchedule(
        kind=kind,
        T=T,
        beta_min=float(beta_min),
        beta_max=float(beta_max),
        beta=beta,
        alpha_bar=alpha_bar,
        alpha=alpha,
        sigma=sigma,
        step_scale=step_scale,
        gamma=gamma,
        sigma_tilde=sigma_tilde,
    )


def schedule_from_dict(params: dict) -> NoiseSchedule:
    return make_schedule(params["kind"], params["T"], params["beta_min"], params["beta_max"])


def timestep_sequence(T: int, nfe: int) -> typing.List[int]:
    """Evenly strided descending timesteps that always include ``T`` and, for nfe > 1, 1

    Raises:
        ConfigError: when ``nfe`` is outside ``1..T``
    """
    if int(nfe) != nfe or not 1 <= nfe <= T:
        raise errors.ConfigError(f"nfe must be in 1..{T}, got {nfe}")
    return [int(t) for t in np.round(np.linspace(T, 1, int(nfe))).astype(np.int64)]


def timestep_features(t, T: int, rows: int) -> Tensor2:
    """``[t/T, sin(t * f_k), cos(t * f_k)]`` per row, with geometric frequencies ``f_k``"""
    steps = np.broadcast_to(np.asarray(t, dtype=np.float64), (rows,))[:, None]
    half = TIME_EMBEDDING_DIM // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = steps * freqs[None, :]
    return np.concatenate([steps / T, np.sin(angles), np.cos(angles)], axis=1)


@dataclasses.dataclass
class Normalizer:
    """Per-action-dimension min/max map onto [-1, 1]"""

    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        self.low = np.asarray(self.low, dtype=np.float64)
        self.high = np.asarray(self.high, dtype=np.float64)

    @classmethod
    def fit(cls, actions: np.ndarray) -> "Normalizer":
        flat = np.asarray(actions, dtype=np.float64).reshape(-1, np.shape(actions)[-1])
        return cls(flat.min(axis=0), flat.max(axis=0))

    @classmethod
    def identity(cls, action_dim: int) -> "Normalizer":
        return cls(-np.ones(action_dim), np.ones(action_dim))

    @property
    def center(self) -> np.ndarray:
        return (self.high + self.low) / 2.0

    @property
    def half_range(self) -> np.ndarray:
        half = (self.high - self.low) / 2.0
        return np.where(half > 0.0, half, 1.0)

    def normalize(self, actions: np.ndarray) -> np.ndarray:
        return (np.asarray(actions, dtype=np.float64) - self.center) / self.half_range

    def denormalize(self, actions: np.ndarray) -> np.ndarray:
        return np.asarray(actions, dtype=np.float64) * self.half_range + self.center

    def to_dict(self) -> dict:
        return {"low": self.low.tolist(), "high": self.high.tolist()}


@dataclasses.dataclass
class Demonstration:
    obs: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float64).reshape(-1)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.actions.ndim != 2:
            raise errors.ShapeError(f"Demonstration actions must be H x A, got shape {self.actions.shape}")


def stack_demonstrations(data: typing.Sequence[Demonstration]) -> typing.Tuple[np.ndarray, np.ndarray]:
    """Stack demonstrations into ``(M, obs_dim)`` observations and ``(M, H, A)`` actions

    Raises:
        ConfigError: when ``data`` is empty
        ShapeError: when demonstrations disagree on dimensions
    """
    if not data:
        raise errors.ConfigError("Dataset is empty")
    obs_shape, action_shape = data[0].obs.shape, data[0].actions.shape
    for k, demo in enumerate(data):
        if demo.obs.shape != obs_shape or demo.actions.shape != action_shape:
            raise errors.ShapeError(
                f"Demonstration {k} has obs {demo.obs.shape} / actions {demo.actions.shape}, "
                f"expected {obs_shape} / {action_shape}"
            )
    return np.stack([d.obs for d in data]), np.stack([d.actions for d in data])


@dataclasses.dataclass
class DenoiserNet:
    """Conditional epsilon-prediction network over ``[a_t (H*A) | time features | obs]``"""

    mlp: MlpNet
    obs_dim: int
    horizon: int
    action_dim: int
    normalizer: typing.Optional[Normalizer] = None

    def __post_init__(self):
        if self.normalizer is None:
            self.normalizer = Normalizer.identity(self.action_dim)
        expected_in = self.chunk_dim + TIME_FEATURES + self.obs_dim
        if self.mlp.input_dim != expected_in or self.mlp.output_dim != self.chunk_dim:
            raise errors.ShapeError(
                f"Denoiser MLP maps {self.mlp.input_dim} -> {self.mlp.output_dim}, expected "
                f"{expected_in} -> {self.chunk_dim}"
            )

    @property
    def chunk_dim(self) -> int:
        return self.horizon * self.action_dim

    def forward(self, a_t, t, obs, T: int) -> typing.Tuple[Tensor2, ForwardCache]:
        a_t = as_tensor2(a_t, "a_t")
        obs = as_tensor2(obs, "obs")
        if a_t.shape[1] != self.chunk_dim:
            raise errors.ShapeError(f"a_t has {a_t.shape[1]} columns, expected H*A = {self.chunk_dim}")
        if obs.shape != (a_t.shape[0], self.obs_dim):
            raise errors.ShapeError(f"obs has shape {obs.shape}, expected ({a_t.shape[0]}, {self.obs_dim})")
        inputs = np.concatenate([a_t, timestep_features(t, T, a_t.shape[0]), obs], axis=1)
        return mlp_forward(self.mlp, inputs)

    def backward(self, cache: ForwardCache, grad_eps: Tensor2) -> typing.List[np.ndarray]:
        grads, _ = mlp_backward(self.mlp, cache, grad_eps)
        return grads

    def copy(self) -> "DenoiserNet":
        return dataclasses.replace(
            self, mlp=self.mlp.copy(), normalizer=Normalizer(self.normalizer.low, self.normalizer.high)
        )

    def fingerprint(self) -> str:
        return self.mlp.fingerprint()

    def meta(self) -> dict:
        return {
            "obs_dim": self.obs_dim,
            "horizon": self.horizon,
            "action_dim": self.action_dim,
            "normalizer": self.normalizer.to_dict(),
        }


def make_denoiser(
    obs_dim: int,
    horizon: int,
    action_dim: int,
    rng: Rng,
    hidden: typing.Sequence[int] = (128, 128, 128),
    activation: str = "silu",
    normalizer: typing.Optional[Normalizer] = None,
) -> DenoiserNet:
    chunk_dim = horizon * action_dim
    sizes = [chunk_dim + TIME_FEATURES + obs_dim, *hidden, chunk_dim]
    return DenoiserNet(make_mlp(sizes, rng, activation), obs_dim, horizon, action_dim, normalizer)


def forward_noise(s: NoiseSchedule, a0, t, eps) -> Tensor2:
    """``alpha[t] * a0 + sigma[t] * eps``, with ``t`` a scalar or one timestep per row"""
    a0 = as_tensor2(a0, "a0")
    eps = as_tensor2(eps, "eps")
    if eps.shape != a0.shape:
        raise errors.ShapeError(f"eps has shape {eps.shape} but a0 has shape {a0.shape}")
    steps = np.broadcast_to(s.check_timestep(t), (a0.shape[0],))
    return s.alpha[steps][:, None] * a0 + s.sigma[steps][:, None] * eps


@dataclasses.dataclass
class Denoised:
    """One denoiser evaluation: predicted noise, raw and clamped x0, and the forward cache"""

    eps_hat: Tensor2
    x0_raw: Tensor2
    x0: Tensor2
    steps: np.ndarray
    cache: ForwardCache


def denoise(net: DenoiserNet, s: NoiseSchedule, a_t, t, obs, clip: bool = True) -> Denoised:
    a_t = as_tensor2(a_t, "a_t")
    steps = np.broadcast_to(s.check_timestep(t), (a_t.shape[0],))
    eps_hat, cache = net.forward(a_t, steps, obs, s.T)
    x0_raw = (a_t - s.sigma[steps][:, None] * eps_hat) / s.alpha[steps][:, None]
    x0 = np.clip(x0_raw, -X0_CLIP, X0_CLIP) if clip else x0_raw
    return Denoised(eps_hat, x0_raw, x0, steps, cache)


def x0_backward(net: DenoiserNet, s: NoiseSchedule, denoised: Denoised, grad_x0: Tensor2) -> typing.List[np.ndarray]:
    """Parameter gradients of a loss given dL/d(x0) for a :func:`denoise` result

    The clamp passes gradient only where the raw prediction was inside the clip range.
    """
    inside = np.abs(denoised.x0_raw) <= X0_CLIP
    scale = -(s.sigma[denoised.steps] / s.alpha[denoised.steps])[:, None]
    return net.backward(denoised.cache, grad_x0 * inside * scale)


def predict_x0(net: DenoiserNet, s: NoiseSchedule, a_t, t, obs, clip: bool = True) -> Tensor2:
    """Denoised action ``(a_t - sigma[t] * eps_hat) / alpha[t]``, clamped to +-1.5 by default"""
    return denoise(net, s, a_t, t, obs, clip=clip).x0


def score_from_x0(s: NoiseSchedule, a_t, t, x0_hat) -> Tensor2:
    steps = np.broadcast_to(s.check_timestep(t), (np.shape(a_t)[0],))
    return (s.alpha[steps][:, None] * x0_hat - a_t) / np.square(s.sigma[steps])[:, None]


def score_estimate(net: DenoiserNet, s: NoiseSchedule, a_t, t, obs) -> Tensor2:
    """Score of the noised action distribution, ``-eps_hat / sigma[t]``

    Equals ``(alpha[t] * x0_hat - a_t) / sigma[t]**2`` with the unclamped x0_hat.

    Raises:
        ContractError: when sigma[t] is too small for the score to be defined
    """
    a_t = as_tensor2(a_t, "a_t")
    steps = np.broadcast_to(s.check_timestep(t), (a_t.shape[0],))
    if np.any(s.sigma[steps] < MIN_SCORE_SIGMA):
        raise errors.ContractError(f"Score is undefined where sigma < {MIN_SCORE_SIGMA} (t = {t})")
    eps_hat, _ = net.forward(a_t, steps, obs, s.T)
    return -eps_hat / s.sigma[steps][:, None]


@dataclasses.dataclass
class NetConfig:
    hidden: typing.List[int] = dataclasses.field(default_factory=lambda: [128, 128, 128])
    activation: str = "silu"

    def validate(self):
        if not self.hidden or any(int(width) != width or width < 1 for width in self.hidden):
            raise errors.ConfigError(f"net.hidden must be a non-empty list of positive widths, got {self.hidden}")
        if self.activation not in ("silu", "relu"):
            raise errors.ConfigError(f"net.activation must be 'silu' or 'relu', got {self.activation!r}")


@dataclasses.dataclass
class TeacherConfig:
    epochs: int = 800
    batch: int = 256
    lr: float = 1e-3
    log_every: int = 50

    def validate(self):
        if self.epochs < 1 or self.batch < 1 or self.log_every < 1:
            raise errors.ConfigError("teacher.epochs, teacher.batch and teacher.log_every must be >= 1")
        if not self.lr > 0:
            raise errors.ConfigError(f"teacher.lr must be positive, got {self.lr}")


def train_teacher(
    data: typing.Sequence[Demonstration],
    s: NoiseSchedule,
    cfg: TeacherConfig,
    rng: Rng,
    net_cfg: typing.Optional[NetConfig] = None,
    normalizer: typing.Optional[Normalizer] = None,
) -> typing.Tuple[DenoiserNet, pd.DataFrame]:
    """
    Fit an epsilon-prediction teacher by denoising score matching

    Actions are normalized with a min/max map fitted on ``data`` unless ``normalizer`` is
    given; the map travels with the returned net. Each minibatch draws one uniform timestep per sample.

    Parameters
    ----------

    data: Sequence[Demonstration]
        Expert dataset in raw action units
    s: NoiseSchedule
        Diffusion schedule
    cfg: TeacherConfig
        Optimization settings
    rng: Rng
        Stream for init, shuffling, timesteps and noise
    net_cfg: NetConfig, optional
        Network shape. Defaults to 3 x 128 SiLU.
    normalizer: Normalizer, optional
        Fixed action map, e.g. ``Normalizer.identity(action_dim)``. If ``None``, one is fitted on ``data``.

    Returns
    -------

    tuple[DenoiserNet, pd.DataFrame]
        Trained net and per-epoch mean losses

    Raises
    ------

    ConfigError
        When the dataset is empty or the config is invalid
    ShapeError
        When ``normalizer`` doesn't match the action dimension
    """
    cfg.validate()
    net_cfg = net_cfg or NetConfig()
    net_cfg.validate()
    obs, actions = stack_demonstrations(data)
    _, horizon, action_dim = actions.shape
    if normalizer is None:
        normalizer = Normalizer.fit(actions)
    elif normalizer.low.shape != (action_dim,) or normalizer.high.shape != (action_dim,):
        raise errors.ShapeError(f"Normalizer covers {normalizer.low.shape} dims, actions have {action_dim}")
    targets = normalizer.normalize(actions).reshape(len(data), -1)

    net = make_denoiser(
        obs.shape[1], horizon, action_dim, rng, net_cfg.hidden, net_cfg.activation, normalizer=normalizer
    )
    opt = AdamState.for_net(net.mlp, lr=cfg.lr)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(order), cfg.batch):
            idx = order[start : start + cfg.batch]
            a0 = targets[idx]
            t = rng.integers(1, s.T, len(idx))
            eps = rng.gaussian(len(idx), net.chunk_dim)
            eps_hat, cache = net.forward(forward_noise(s, a0, t, eps), t, obs[idx], s.T)
            residual = eps_hat - eps
            losses.append(float(np.mean(np.square(residual))))
            adam_step(opt, net.mlp, net.backward(cache, 2.0 * residual / residual.size))
        history.append({"epoch": epoch, "loss": float(np.mean(losses))})
        logger.debug("teacher epoch %d loss %.6f", epoch, history[-1]["loss"])
        if epoch == 1 or epoch % cfg.log_every == 0 or epoch == cfg.epochs:
            logger.info("teacher epoch %d/%d loss %.6f", epoch, cfg.epochs, history[-1]["loss"])
    return net, pd.DataFrame(history, columns=["epoch", "loss"])


def posterior_step(s: NoiseSchedule, a_t: Tensor2, x0_hat: Tensor2, t: int, t_prev: int, noise=None) -> Tensor2:
    """Ancestral step from ``t`` down to ``t_prev < t`` given a denoised estimate

    For ``t_prev == t - 1`` and an unclamped estimate this is the one-step update
    ``step_scale[t] * (a_t - gamma[t] * eps_hat) + sigma_tilde[t] * noise``. Landing on
    ``t_prev == 0`` returns ``x0_hat`` with no noise.
    """
    if t_prev == 0:
        return np.array(x0_hat, dtype=np.float64)
    ab_t, ab_prev = s.alpha_bar[t], s.alpha_bar[t_prev]
    beta_eff = 1.0 - ab_t / ab_prev
    mean = (np.sqrt(ab_prev) * beta_eff / (1.0 - ab_t)) * x0_hat + (
        np.sqrt(1.0 - beta_eff) * (1.0 - ab_prev) / (1.0 - ab_t)
    ) * a_t
    if noise is None:
        return mean
    return mean + np.sqrt(beta_eff * (1.0 - ab_prev) / (1.0 - ab_t)) * noise


def ddpm_sample(
    net: DenoiserNet,
    s: NoiseSchedule,
    obs,
    nfe: int,
    rng: Rng,
    a_T: typing.Optional[Tensor2] = None,
    timesteps: typing.Optional[typing.Sequence[int]] = None,
) -> Tensor2:
    """Multi-step ancestral sampling from ``a_T ~ N(0, I)``

    Args:
        net (DenoiserNet): epsilon-prediction network
        s (NoiseSchedule): schedule the net was trained with
        obs (Tensor2): one observation per sample, ``(N, obs_dim)``
        nfe (int): number of denoiser evaluations, 1..T
        rng (Rng): stream for the start noise and the per-step noise
        a_T (Tensor2, optional): start point; drawn from ``rng`` when ``None``
        timesteps (Sequence[int], optional): explicit descending timesteps, overrides
            the even stride derived from ``nfe``

    Returns:
        Tensor2: ``(N, H*A)`` action chunks in normalized units
    """
    obs = as_tensor2(obs, "obs")
    sequence = list(timesteps) if timesteps is not None else timestep_sequence(s.T, nfe)
    s.check_timestep(sequence)
    if any(later >= earlier for earlier, later in zip(sequence, sequence[1:])):
        raise errors.ConfigError(f"Timesteps must be strictly decreasing, got {sequence}")
    a = rng.gaussian(obs.shape[0], net.chunk_dim) if a_T is None else as_tensor2(a_T, "a_T").copy()
    for k, t in enumerate(sequence):
        t_prev = sequence[k + 1] if k + 1 < len(sequence) else 0
        x0_hat = predict_x0(net, s, a, t, obs)
        noise = rng.gaussian(*a.shape) if t_prev > 0 else None
        a = posterior_step(s, a, x0_hat, t, t_prev, noise)
    return a


def save_denoiser(
    path: typing.Union[str, os.PathLike],
    net: DenoiserNet,
    s: NoiseSchedule,
    role: str = "teacher",
    extra_meta: typing.Optional[dict] = None,
):
    meta = {"role": role, "schedule": s.to_dict(), **net.meta(), **(extra_meta or {})}
    save_checkpoint(path, net.mlp, meta)


def load_denoiser(path: typing.Union[str, os.PathLike]) -> typing.Tuple[DenoiserNet, NoiseSchedule, dict]:
    mlp, meta = load_checkpoint(path)
    try:
        normalizer = Normalizer(meta["normalizer"]["low"], meta["normalizer"]["high"])
        net = DenoiserNet(mlp, int(meta["obs_dim"]), int(meta["horizon"]), int(meta["action_dim"]), normalizer)
        schedule = schedule_from_dict(meta["schedule"])
    except (KeyError, TypeError) as e:
        raise errors.CheckpointFormatError(f"Checkpoint {path} is missing denoiser metadata: {e}")
    return net, schedule, meta
