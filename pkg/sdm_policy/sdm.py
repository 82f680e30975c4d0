"""
Score and distribution matching: distill a multi-step epsilon-prediction teacher into a
generator that maps pure noise to an action chunk with a single network evaluation.

A frozen copy of the teacher (``P``) scores the data distribution, a dynamically trained
copy (``D``) tracks the generator's own distribution. The difference of their denoised
outputs on re-noised generator samples is the per-sample direction of the KL gradient.
"""

import dataclasses
import logging
import os
import typing

import numpy as np
import pandas as pd

from . import sdm_errors as errors
from .diffusion import (
    Demonstration,
    Denoised,
    DenoiserNet,
    NoiseSchedule,
    denoise,
    forward_noise,
    load_denoiser,
    make_denoiser,
    save_denoiser,
    score_estimate,
    stack_demonstrations,
    x0_backward,
)
from .files import atomic_write_text
from .ndnum import AdamState, Rng, Tensor2, adam_step, as_tensor2

logger = logging.getLogger(__name__)

GENERATOR_ROLE = "one_step_generator"
MIN_DIRECTION_SCALE = 1e-3
TRAINING_LOG_COLUMNS = ["iter", "loss_D", "grad_norm", "loss_G", "kl_diag"]


def _round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


@dataclasses.dataclass
class DistillConfig:
    lambda_gen: float = 1.0
    gamma_diff: float = 1.0
    c: int = 5
    t_min_frac: float = 0.02
    t_max_frac: float = 0.98
    normalize_direction: bool = True
    iters: int = 4000
    batch: int = 256
    lr_gen: float = 1e-4
    lr_D: float = 2e-4
    ablate_scratch_init: bool = False
    t_init: typing.Optional[int] = None
    log_every: int = 100
    eval_every: int = 0

    def validate(self):
        """
        Raises:
            ConfigError: naming the first field that breaks its range
        """
        if int(self.c) != self.c or self.c < 1:
            raise errors.ConfigError(f"distill.c must be an integer >= 1, got {self.c}")
        if not 0.0 < self.t_min_frac < self.t_max_frac <= 1.0:
            raise errors.ConfigError(
                f"distill needs 0 < t_min_frac < t_max_frac <= 1, got {self.t_min_frac}, {self.t_max_frac}"
            )
        if not self.lambda_gen > 0:
            raise errors.ConfigError(f"distill.lambda_gen must be positive, got {self.lambda_gen}")
        if not self.gamma_diff > 0:
            raise errors.ConfigError(f"distill.gamma_diff must be positive, got {self.gamma_diff}")
        if self.iters < 1 or self.batch < 1 or self.log_every < 1:
            raise errors.ConfigError("distill.iters, distill.batch and distill.log_every must be >= 1")
        if self.eval_every < 0:
            raise errors.ConfigError(f"distill.eval_every must be >= 0, got {self.eval_every}")
        if not (self.lr_gen > 0 and self.lr_D > 0):
            raise errors.ConfigError(f"distill learning rates must be positive, got {self.lr_gen}, {self.lr_D}")
        if self.t_init is not None and (int(self.t_init) != self.t_init or self.t_init < 1):
            raise errors.ConfigError(f"distill.t_init must be a timestep >= 1, got {self.t_init}")

    def band(self, T: int) -> typing.Tuple[int, int]:
        """Inclusive integer timestep band for corrector and dynamic-teacher steps"""
        low = min(max(1, _round_half_up(self.t_min_frac * T)), T)
        high = min(max(low, _round_half_up(self.t_max_frac * T)), T)
        return low, high


def sample_band(cfg: DistillConfig, s: NoiseSchedule, rng: Rng, n: int) -> np.ndarray:
    low, high = cfg.band(s.T)
    return rng.integers(low, high, n)


@dataclasses.dataclass
class OneStepGenerator:
    """The teacher architecture evaluated once, at ``t_init``, on pure noise"""

    net: DenoiserNet
    schedule: NoiseSchedule
    t_init: typing.Optional[int] = None

    def __post_init__(self):
        if self.t_init is None:
            self.t_init = self.schedule.T
        self.schedule.check_timestep(self.t_init)

    @property
    def chunk_dim(self) -> int:
        return self.net.chunk_dim

    def forward(self, z, obs) -> Denoised:
        z = as_tensor2(z, "z")
        if z.shape[1] != self.chunk_dim:
            raise errors.ShapeError(f"z has {z.shape[1]} columns, expected H*A = {self.chunk_dim}")
        return denoise(self.net, self.schedule, z, self.t_init, obs)

    def backward(self, denoised: Denoised, grad_actions: Tensor2) -> typing.List[np.ndarray]:
        return x0_backward(self.net, self.schedule, denoised, grad_actions)

    def copy(self) -> "OneStepGenerator":
        return dataclasses.replace(self, net=self.net.copy())


@dataclasses.dataclass
class CorrectorPair:
    P: DenoiserNet
    D: DenoiserNet
    frozen_fingerprint: str = ""

    def __post_init__(self):
        if not self.P.mlp.same_architecture(self.D.mlp):
            raise errors.ShapeError("Frozen and dynamic teachers must share one architecture")
        if not self.frozen_fingerprint:
            self.frozen_fingerprint = self.P.fingerprint()

    @classmethod
    def from_teacher(cls, teacher: DenoiserNet) -> "CorrectorPair":
        return cls(P=teacher.copy(), D=teacher.copy())

    def assert_frozen(self):
        if self.P.fingerprint() != self.frozen_fingerprint:
            raise errors.ContractError("Frozen teacher weights changed during distillation")


def generator_sample(G: OneStepGenerator, obs, z) -> Tensor2:
    """One-step action chunks ``predict_x0(G.net, z, t_init, obs)``, one net evaluation"""
    return G.forward(z, obs).x0


def _check_band(cfg: DistillConfig, s: NoiseSchedule, t) -> np.ndarray:
    steps = s.check_timestep(t)
    low, high = cfg.band(s.T)
    if steps.size and (steps.min() < low or steps.max() > high):
        raise errors.ContractError(f"Timestep outside the noising band {low}..{high}: {t}")
    return steps


def _denoised_difference(pair: CorrectorPair, s: NoiseSchedule, a_G0, obs, t, eps) -> Tensor2:
    a_t = forward_noise(s, a_G0, t, eps)
    return denoise(pair.P, s, a_t, t, obs).x0 - denoise(pair.D, s, a_t, t, obs).x0


def normalize_direction(g: Tensor2) -> Tensor2:
    scale = np.maximum(np.mean(np.abs(g), axis=1, keepdims=True), MIN_DIRECTION_SCALE)
    return g / scale


def corrector_direction(
    pair: CorrectorPair, s: NoiseSchedule, a_G0, obs, t, eps, cfg: typing.Optional[DistillConfig] = None
) -> Tensor2:
    """Per-sample KL-gradient direction ``x0_P(a_t) - x0_D(a_t)`` on re-noised generator samples

    Args:
        pair (CorrectorPair): frozen and dynamic teachers
        s (NoiseSchedule): shared schedule
        a_G0 (Tensor2): generator samples, treated as constants
        obs (Tensor2): conditioning observations
        t (int | np.ndarray): one timestep, or one per sample, inside ``cfg.band``
        eps (Tensor2): noise used to re-noise ``a_G0``
        cfg (DistillConfig, optional): band and normalization flag. Defaults to DistillConfig().

    Raises:
        ContractError: when ``t`` lies outside the noising band

    Returns:
        Tensor2: direction ``g`` with the shape of ``a_G0``
    """
    cfg = cfg or DistillConfig()
    _check_band(cfg, s, t)
    g = _denoised_difference(pair, s, a_G0, obs, t, eps)
    return normalize_direction(g) if cfg.normalize_direction else g


def generator_loss(a_G0: Tensor2, g: Tensor2, lambda_gen: float) -> typing.Tuple[float, Tensor2]:
    """Pseudo-loss ``lambda / (N*H*A) * sum(<-g, a_G0>)`` and its gradient with respect to ``a_G0``

    ``g`` is a constant here, so the gradient is ``-lambda * g / (N*H*A)``.
    """
    count = a_G0.size
    return float(-lambda_gen * np.sum(g * a_G0) / count), -lambda_gen * g / count


@dataclasses.dataclass
class GeneratorStep:
    denoised: Denoised
    t: np.ndarray
    eps: Tensor2
    direction: Tensor2
    loss: float
    grad_norm: float
    grads: typing.Optional[typing.List[np.ndarray]] = None

    @property
    def actions(self) -> Tensor2:
        return self.denoised.x0


def generator_gradients(
    G: OneStepGenerator,
    pair: CorrectorPair,
    s: NoiseSchedule,
    obs,
    z,
    t,
    eps,
    cfg: DistillConfig,
    backward: bool = True,
) -> GeneratorStep:
    """Evaluate the generator pseudo-loss on one batch, with parameter gradients when ``backward``

    ``grad_norm`` is the mean per-sample norm of the raw denoised difference, before any
    direction normalization.
    """
    denoised = G.forward(z, obs)
    a_G0 = denoised.x0
    _check_band(cfg, s, t)
    raw = _denoised_difference(pair, s, a_G0, obs, t, eps)
    if not np.isfinite(raw).all():
        raise errors.NumericError("Corrector direction contains NaN or Inf")
    g = normalize_direction(raw) if cfg.normalize_direction else raw
    loss, grad_actions = generator_loss(a_G0, g, cfg.lambda_gen)
    grads = G.backward(denoised, grad_actions) if backward else None
    return GeneratorStep(
        denoised=denoised,
        t=np.asarray(t),
        eps=eps,
        direction=g,
        loss=loss,
        grad_norm=float(np.mean(np.linalg.norm(raw, axis=1))),
        grads=grads,
    )


def apply_generator_step(G: OneStepGenerator, step: GeneratorStep, opt: AdamState, iteration=None):
    if step.grads is None:
        raise errors.ContractError("Generator step was evaluated without gradients")
    try:
        adam_step(opt, G.net.mlp, step.grads)
    except errors.NumericError as e:
        where = "" if iteration is None else f" at iteration {iteration}"
        raise errors.NumericError(f"Generator update failed{where}: {e}")


def generator_update(
    G: OneStepGenerator,
    pair: CorrectorPair,
    s: NoiseSchedule,
    obs,
    z,
    cfg: DistillConfig,
    opt: AdamState,
    rng: Rng,
    iteration: typing.Optional[int] = None,
) -> GeneratorStep:
    """One Adam step on ``G`` only, along the KL gradient estimated on ``(obs, z)``

    Raises:
        NumericError: when the direction or the gradients hold NaN/Inf, with the iteration
    """
    z = as_tensor2(z, "z")
    if z.shape[0] == 0:
        raise errors.ConfigError("Generator update needs a nonempty batch")
    t = sample_band(cfg, s, rng, z.shape[0])
    eps = rng.gaussian(z.shape[0], G.chunk_dim)
    try:
        step = generator_gradients(G, pair, s, obs, z, t, eps, cfg)
    except errors.NumericError as e:
        where = "" if iteration is None else f" at iteration {iteration}"
        raise errors.NumericError(f"Generator update failed{where}: {e}")
    apply_generator_step(G, step, opt, iteration)
    return step


def dynamic_teacher_gradients(
    pair: CorrectorPair, s: NoiseSchedule, a_G0, obs, t, eps, gamma_diff: float
) -> typing.Tuple[float, typing.List[np.ndarray]]:
    """Diffusion loss ``gamma * mean_N ||x0_D(a_t) - a_G0||^2`` of the dynamic teacher and its gradients"""
    a_G0 = as_tensor2(a_G0, "a_G0")
    a_t = forward_noise(s, a_G0, t, eps)
    denoised = denoise(pair.D, s, a_t, t, obs)
    diff = denoised.x0 - a_G0
    n = a_G0.shape[0]
    loss = float(gamma_diff * np.sum(np.square(diff)) / n)
    return loss, x0_backward(pair.D, s, denoised, 2.0 * gamma_diff * diff / n)


def dynamic_teacher_update(
    pair: CorrectorPair,
    s: NoiseSchedule,
    a_G0,
    obs,
    cfg: DistillConfig,
    opt: AdamState,
    rng: Rng,
    iteration: typing.Optional[int] = None,
) -> float:
    """One Adam step on ``D`` toward denoising the (constant) generator samples ``a_G0``

    Returns:
        float: loss before the step
    """
    a_G0 = np.array(as_tensor2(a_G0, "a_G0"))
    if a_G0.shape[0] == 0:
        raise errors.ConfigError("Dynamic teacher update needs a nonempty batch")
    t = sample_band(cfg, s, rng, a_G0.shape[0])
    eps = rng.gaussian(*a_G0.shape)
    loss, grads = dynamic_teacher_gradients(pair, s, a_G0, obs, t, eps, cfg.gamma_diff)
    try:
        adam_step(opt, pair.D.mlp, grads)
    except errors.NumericError as e:
        where = "" if iteration is None else f" at iteration {iteration}"
        raise errors.NumericError(f"Dynamic teacher update failed{where}: {e}")
    return loss


def kl_diagnostic(pair: CorrectorPair, s: NoiseSchedule, a_G0, obs, t, eps) -> float:
    """Mean squared norm of ``score_P - score_D`` on re-noised generator samples

    A monitoring quantity for the distribution gap, not a training loss.
    """
    a_t = forward_noise(s, a_G0, t, eps)
    gap = score_estimate(pair.P, s, a_t, t, obs) - score_estimate(pair.D, s, a_t, t, obs)
    return float(np.mean(np.sum(np.square(gap), axis=1)))


def _fresh_like(net: DenoiserNet, rng: Rng) -> DenoiserNet:
    hidden = [layer.weight.shape[1] for layer in net.mlp.layers[:-1]]
    activation = net.mlp.layers[0].activation if hidden else "silu"
    return make_denoiser(
        net.obs_dim, net.horizon, net.action_dim, rng, hidden, activation, normalizer=net.copy().normalizer
    )


@dataclasses.dataclass
class DistillResult:
    generator: OneStepGenerator
    dynamic: DenoiserNet
    pair: CorrectorPair
    history: pd.DataFrame
    generator_updates: int
    segments: typing.List[dict] = dataclasses.field(default_factory=list)

    def training_log(self) -> pd.DataFrame:
        return self.history[TRAINING_LOG_COLUMNS]


def distill(
    teacher: DenoiserNet,
    data: typing.Sequence[Demonstration],
    cfg: DistillConfig,
    rng: Rng,
    schedule: NoiseSchedule,
    callback: typing.Optional[typing.Callable[[int, OneStepGenerator], typing.Optional[float]]] = None,
) -> DistillResult:
    """
    Train a one-step generator against a frozen and a dynamic copy of ``teacher``

    Every iteration draws an observation minibatch and pure noise, evaluates the
    generator once, and updates the dynamic teacher on the generator's samples. Every
    ``cfg.c``-th iteration (1-indexed) the generator also takes a step along the KL
    gradient. Both losses are computed from the pre-update networks.

    Parameters
    ----------

    teacher: DenoiserNet
        Pretrained epsilon-prediction policy, left untouched
    data: Sequence[Demonstration]
        Source of conditioning observations
    cfg: DistillConfig
        Distillation settings
    rng: Rng
        Stream for initialization, minibatches, noise and timesteps
    schedule: NoiseSchedule
        The schedule ``teacher`` was trained with
    callback: Callable, optional
        ``callback(iteration, generator)`` run every ``cfg.eval_every`` iterations. Non-``None``
        returns are kept as segment results.

    Returns
    -------

    DistillResult
        Generator, dynamic teacher, corrector pair and per-iteration history

    Raises
    ------

    ConfigError
        On an invalid config or an empty dataset, before any training
    NumericError
        When an update hits NaN/Inf, naming the iteration
    """
    cfg.validate()
    if cfg.t_init is not None and cfg.t_init > schedule.T:
        raise errors.ConfigError(f"distill.t_init {cfg.t_init} exceeds the schedule's T = {schedule.T}")
    obs, _ = stack_demonstrations(data)
    if obs.shape[1] != teacher.obs_dim:
        raise errors.ConfigError(f"Dataset observations have {obs.shape[1]} dims, teacher expects {teacher.obs_dim}")

    init_rng = rng.spawn(0)
    pair = CorrectorPair.from_teacher(teacher)
    generator_net = _fresh_like(teacher, init_rng) if cfg.ablate_scratch_init else teacher.copy()
    G = OneStepGenerator(generator_net, schedule, cfg.t_init)
    opt_G = AdamState.for_net(G.net.mlp, lr=cfg.lr_gen)
    opt_D = AdamState.for_net(pair.D.mlp, lr=cfg.lr_D)
    logger.info(
        "distilling %s generator for %d iterations (c=%d, batch=%d, band=%s)",
        "scratch-initialized" if cfg.ablate_scratch_init else "teacher-initialized",
        cfg.iters,
        cfg.c,
        cfg.batch,
        cfg.band(schedule.T),
    )

    rows, segments = [], []
    updates = 0
    for it in range(1, cfg.iters + 1):
        obs_batch = obs[rng.integers(0, len(obs) - 1, cfg.batch)]
        z = rng.gaussian(cfg.batch, G.chunk_dim)
        t = sample_band(cfg, schedule, rng, cfg.batch)
        eps = rng.gaussian(cfg.batch, G.chunk_dim)
        update_G = it % cfg.c == 0

        try:
            step = generator_gradients(G, pair, schedule, obs_batch, z, t, eps, cfg, backward=update_G)
        except errors.NumericError as e:
            raise errors.NumericError(f"Generator step failed at iteration {it}: {e}")
        kl = kl_diagnostic(pair, schedule, step.actions, obs_batch, t, eps)
        loss_D = dynamic_teacher_update(pair, schedule, step.actions, obs_batch, cfg, opt_D, rng, iteration=it)
        if update_G:
            apply_generator_step(G, step, opt_G, iteration=it)
            updates += 1

        rows.append(
            {
                "iter": it,
                "loss_D": loss_D,
                "grad_norm": step.grad_norm,
                "loss_G": step.loss,
                "kl_diag": kl,
                "generator_updated": update_G,
            }
        )
        if it == 1 or it % cfg.log_every == 0 or it == cfg.iters:
            logger.info(
                "iter %d/%d loss_D %.5f grad_norm %.5f loss_G %.5f kl %.5f",
                it,
                cfg.iters,
                loss_D,
                step.grad_norm,
                step.loss,
                kl,
            )
        if callback is not None and cfg.eval_every and it % cfg.eval_every == 0:
            value = callback(it, G)
            if value is not None:
                segments.append({"iter": it, "value": float(value)})

    pair.assert_frozen()
    history = pd.DataFrame(rows, columns=[*TRAINING_LOG_COLUMNS, "generator_updated"])
    return DistillResult(G, pair.D, pair, history, updates, segments)


def write_training_log(path: typing.Union[str, os.PathLike], history: pd.DataFrame):
    atomic_write_text(path, history[TRAINING_LOG_COLUMNS].to_csv(index=False))


def save_generator(
    path: typing.Union[str, os.PathLike], G: OneStepGenerator, extra_meta: typing.Optional[dict] = None
):
    save_denoiser(path, G.net, G.schedule, role=GENERATOR_ROLE, extra_meta={"t_init": G.t_init, **(extra_meta or {})})


def load_generator(path: typing.Union[str, os.PathLike]) -> OneStepGenerator:
    """
    Raises:
        CheckpointFormatError: when the checkpoint isn't a one-step generator
    """
    net, schedule, meta = load_denoiser(path)
    if meta.get("role") != GENERATOR_ROLE:
        raise errors.CheckpointFormatError(f"Checkpoint {path} has role {meta.get('role')!r}, not {GENERATOR_ROLE!r}")
    return OneStepGenerator(net, schedule, int(meta.get("t_init", schedule.T)))
