"""
Deterministic numeric core: float64 tensors, multilayer perceptrons with per-layer
backpropagation, Adam, and a counter-based Gaussian random stream.

Tensors are plain 2-D ``numpy`` arrays (rows are the batch axis). Layers compute
``y = act(x @ W + b)`` with ``W`` shaped ``(fan_in, fan_out)``.
"""

import dataclasses
import hashlib
import json
import os
import typing

import numpy as np
from scipy.special import expit

from . import sdm_errors as errors
from .files import atomic_write_text

Tensor2 = np.ndarray

ACTIVATIONS = ("silu", "relu", "identity")
CHECKPOINT_FORMAT_VERSION = 1
CHECKPOINT_DTYPES = {"f32": np.float32, "f64": np.float64}


def as_tensor2(values, name: str = "tensor") -> Tensor2:
    """Coerce ``values`` into a 2-D float64 array

    Args:
        values (array-like): rows x cols values
        name (str): used in error messages

    Raises:
        ShapeError: when ``values`` isn't two dimensional

    Returns:
        Tensor2: float64 array
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise errors.ShapeError(f"{name} must be 2-D (rows x cols), got shape {arr.shape}")
    return arr


class Rng:
    """Explicit-state Gaussian/uniform stream over a counter-based Philox generator

    Identical seed (and spawn keys) plus identical call sequence gives a bit-identical
    stream. Child streams derived with :meth:`spawn` are independent of the parent's
    position in its own stream.
    """

    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed)
        self.keys = tuple(int(key) for key in keys)
        if self.seed < 0 or any(key < 0 for key in self.keys):
            raise errors.ConfigError(f"Rng seed and keys must be non-negative, got {(self.seed, *self.keys)}")
        seed_seq = np.random.SeedSequence([self.seed, *self.keys] if self.keys else self.seed)
        self._generator = np.random.Generator(np.random.Philox(seed_seq))

    def spawn(self, *keys: int) -> "Rng":
        return type(self)(self.seed, *self.keys, *keys)

    def gaussian(self, rows: int, cols: int) -> Tensor2:
        if rows < 1 or cols < 0:
            raise errors.ShapeError(f"Gaussian draw needs rows >= 1, got {rows} x {cols}")
        return self._generator.standard_normal((rows, cols))

    def uniform(self, low, high, size=None) -> np.ndarray:
        return self._generator.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Integers in the closed range ``[low, high]``"""
        return self._generator.integers(low, high, size=size, endpoint=True)

    def choice(self, n: int, size: int, p=None) -> np.ndarray:
        return self._generator.choice(n, size=size, p=p)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)


def rng_gaussian(rng: Rng, rows: int, cols: int) -> Tensor2:
    """i.i.d. standard normal ``rows x cols`` tensor from ``rng``"""
    if rows < 1 or cols < 1:
        raise errors.ShapeError(f"rng_gaussian needs rows, cols >= 1, got {rows} x {cols}")
    return rng.gaussian(rows, cols)


@dataclasses.dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise errors.ConfigError(f"Unknown activation {self.activation!r}, expected one of {ACTIVATIONS}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise errors.ShapeError(
                f"Layer weight {self.weight.shape} and bias {self.bias.shape} don't describe a dense layer"
            )


class MlpNet:
    """A stack of dense layers whose last activation is the identity

    ``version`` increases every time the parameters are changed in place, which lets
    :func:`mlp_backward` detect caches recorded against older weights.
    """

    def __init__(self, layers: typing.Sequence[Layer]):
        layers = list(layers)
        if not layers:
            raise errors.ConfigError("An MLP needs at least one layer")
        for k, (layer, following) in enumerate(zip(layers, layers[1:])):
            if layer.weight.shape[1] != following.weight.shape[0]:
                raise errors.ShapeError(
                    f"Layer {k} outputs {layer.weight.shape[1]} dims but layer {k + 1} expects "
                    f"{following.weight.shape[0]}"
                )
        if layers[-1].activation != "identity":
            raise errors.ConfigError(f"Final layer activation must be 'identity', got {layers[-1].activation!r}")
        self.layers = layers
        self.version = 0

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def parameters(self) -> typing.List[np.ndarray]:
        """Parameter arrays in ``[W0, b0, W1, b1, ...]`` order; gradients use the same order"""
        params = []
        for layer in self.layers:
            params.extend([layer.weight, layer.bias])
        return params

    def parameter_names(self) -> typing.List[str]:
        names = []
        for k in range(len(self.layers)):
            names.extend([f"layers[{k}].weight", f"layers[{k}].bias"])
        return names

    def copy(self) -> "MlpNet":
        return type(self)([Layer(layer.weight, layer.bias, layer.activation) for layer in self.layers])

    def same_architecture(self, other: "MlpNet") -> bool:
        return len(self.layers) == len(other.layers) and all(
            mine.weight.shape == theirs.weight.shape and mine.activation == theirs.activation
            for mine, theirs in zip(self.layers, other.layers)
        )

    def fingerprint(self) -> str:
        """SHA-256 over activations and raw parameter bytes"""
        digest = hashlib.sha256()
        for layer in self.layers:
            digest.update(layer.activation.encode())
            digest.update(np.ascontiguousarray(layer.weight).tobytes())
            digest.update(np.ascontiguousarray(layer.bias).tobytes())
        return digest.hexdigest()


def make_mlp(sizes: typing.Sequence[int], rng: Rng, activation: str = "silu") -> MlpNet:
    """Build an MLP with Kaiming-uniform weights and zero biases

    Args:
        sizes (Sequence[int]): ``[input_dim, hidden..., output_dim]``
        rng (Rng): weight stream
        activation (str): hidden activation, the output layer is always the identity

    Returns:
        MlpNet: freshly initialized network
    """
    if len(sizes) < 2 or any(size < 0 for size in sizes):
        raise errors.ConfigError(f"Invalid MLP sizes {list(sizes)}")
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        bound = np.sqrt(6.0 / max(fan_in, 1))
        weight = rng.uniform(-bound, bound, (fan_in, fan_out))
        act = "identity" if k == len(sizes) - 2 else activation
        layers.append(Layer(weight, np.zeros(fan_out), act))
    return MlpNet(layers)


@dataclasses.dataclass
class ForwardCache:
    net_id: int
    version: int
    layer_inputs: typing.List[Tensor2]
    pre_activations: typing.List[Tensor2]


def _activate(z: Tensor2, activation: str) -> Tensor2:
    if activation == "silu":
        return z * expit(z)
    if activation == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_derivative(z: Tensor2, activation: str) -> Tensor2:
    if activation == "silu":
        s = expit(z)
        return s * (1.0 + z * (1.0 - s))
    if activation == "relu":
        return (z > 0.0).astype(np.float64)
    return np.ones_like(z)


def mlp_forward(net: MlpNet, inputs) -> typing.Tuple[Tensor2, ForwardCache]:
    """Run ``net`` on a batch and keep what backward needs

    Args:
        net (MlpNet): network
        inputs (Tensor2): rows x input_dim batch

    Raises:
        ShapeError: when the batch width doesn't match ``net.input_dim``
        NumericError: when the output isn't finite

    Returns:
        tuple[Tensor2, ForwardCache]: output batch and activation record
    """
    x = as_tensor2(inputs, "input")
    if x.shape[1] != net.input_dim:
        raise errors.ShapeError(f"Input has {x.shape[1]} columns but the net expects input_dim {net.input_dim}")
    layer_inputs, pre_activations = [], []
    h = x
    for layer in net.layers:
        layer_inputs.append(h)
        z = h @ layer.weight + layer.bias
        pre_activations.append(z)
        h = _activate(z, layer.activation)
    if not np.isfinite(h).all():
        raise errors.NumericError("Network output contains NaN or Inf")
    return h, ForwardCache(id(net), net.version, layer_inputs, pre_activations)


def mlp_backward(
    net: MlpNet, cache: ForwardCache, grad_output
) -> typing.Tuple[typing.List[np.ndarray], Tensor2]:
    """Backpropagate ``grad_output`` through the layers recorded in ``cache``

    Args:
        net (MlpNet): the network the cache was recorded on
        cache (ForwardCache): record from :func:`mlp_forward`
        grad_output (Tensor2): dL/d(output), same shape as the forward output

    Raises:
        CacheError: when the cache belongs to another net or to older weights
        ShapeError: when ``grad_output`` doesn't match the forward output

    Returns:
        tuple[list[np.ndarray], Tensor2]: parameter gradients in
            :meth:`MlpNet.parameters` order, and dL/d(input)
    """
    if cache.net_id != id(net) or cache.version != net.version:
        raise errors.CacheError(
            f"Cache was recorded against version {cache.version} of another or older net "
            f"(current version {net.version})"
        )
    g = as_tensor2(grad_output, "grad_output")
    expected = (cache.layer_inputs[0].shape[0], net.output_dim)
    if g.shape != expected:
        raise errors.ShapeError(f"grad_output has shape {g.shape} but the forward output had shape {expected}")

    grads = [None] * (2 * len(net.layers))
    for k in reversed(range(len(net.layers))):
        layer = net.layers[k]
        if layer.activation != "identity":
            g = g * _activation_derivative(cache.pre_activations[k], layer.activation)
        grads[2 * k] = cache.layer_inputs[k].T @ g
        grads[2 * k + 1] = g.sum(axis=0)
        g = g @ layer.weight.T
    return grads, g


@dataclasses.dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    first_moments: typing.List[np.ndarray] = dataclasses.field(default_factory=list)
    second_moments: typing.List[np.ndarray] = dataclasses.field(default_factory=list)
    step: int = 0

    @classmethod
    def for_net(cls, net: MlpNet, lr: float = 1e-3, **hyperparameters) -> "AdamState":
        params = net.parameters()
        return cls(
            lr=lr,
            first_moments=[np.zeros_like(p) for p in params],
            second_moments=[np.zeros_like(p) for p in params],
            **hyperparameters,
        )


def adam_step(state: AdamState, net: MlpNet, grads: typing.Sequence[np.ndarray]) -> typing.Tuple[MlpNet, AdamState]:
    """Apply one bias-corrected Adam update to ``net`` in place

    Every gradient is checked before any parameter moves, so a rejected step leaves
    both the net and the optimizer state untouched.

    Raises:
        ShapeError: when gradients or moments don't mirror the parameters
        NumericError: when a gradient holds NaN or Inf, naming the tensor
    """
    params = net.parameters()
    names = net.parameter_names()
    if not (len(grads) == len(params) == len(state.first_moments) == len(state.second_moments)):
        raise errors.ShapeError(
            f"Got {len(grads)} gradients and {len(state.first_moments)} moments for {len(params)} parameters"
        )
    for name, param, grad, m in zip(names, params, grads, state.first_moments):
        if np.shape(grad) != param.shape or m.shape != param.shape:
            raise errors.ShapeError(f"Gradient for {name} has shape {np.shape(grad)}, parameter is {param.shape}")
        if not np.isfinite(grad).all():
            raise errors.NumericError(f"Gradient for {name} contains NaN or Inf")

    state.step += 1
    first_correction = 1.0 - state.beta1**state.step
    second_correction = 1.0 - state.beta2**state.step
    for param, grad, m, v in zip(params, grads, state.first_moments, state.second_moments):
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(grad)
        param -= state.lr * (m / first_correction) / (np.sqrt(v / second_correction) + state.eps)
    net.version += 1
    return net, state


def net_to_document(net: MlpNet, meta: typing.Optional[dict] = None, dtype: str = "f32") -> dict:
    if dtype not in CHECKPOINT_DTYPES:
        raise errors.ConfigError(f"Unknown checkpoint dtype {dtype!r}, expected one of {list(CHECKPOINT_DTYPES)}")
    store = CHECKPOINT_DTYPES[dtype]
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "dtype": dtype,
        "layers": [
            {
                "w": layer.weight.astype(store).astype(np.float64).tolist(),
                "b": layer.bias.astype(store).astype(np.float64).tolist(),
                "act": layer.activation,
            }
            for layer in net.layers
        ],
        "meta": meta or {},
    }


def net_from_document(document: dict) -> typing.Tuple[MlpNet, dict]:
    """Rebuild a net from a checkpoint document

    Raises:
        CheckpointFormatError: on unknown format version, dtype or a malformed layout
    """
    if not isinstance(document, dict):
        raise errors.CheckpointFormatError("Checkpoint must be a JSON object")
    version = document.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise errors.CheckpointFormatError(
            f"Unsupported checkpoint format_version {version!r}, expected {CHECKPOINT_FORMAT_VERSION}"
        )
    if document.get("dtype") not in CHECKPOINT_DTYPES:
        raise errors.CheckpointFormatError(f"Unsupported checkpoint dtype {document.get('dtype')!r}")
    try:
        layers = [Layer(spec["w"], spec["b"], spec["act"]) for spec in document["layers"]]
        net = MlpNet(layers)
    except (KeyError, TypeError, ValueError, errors.ShapeError, errors.ConfigError) as e:
        raise errors.CheckpointFormatError(f"Malformed checkpoint layers: {e}")
    return net, dict(document.get("meta") or {})


def save_checkpoint(
    path: typing.Union[str, os.PathLike], net: MlpNet, meta: typing.Optional[dict] = None, dtype: str = "f32"
):
    atomic_write_text(path, json.dumps(net_to_document(net, meta, dtype), sort_keys=True))


def load_checkpoint(path: typing.Union[str, os.PathLike]) -> typing.Tuple[MlpNet, dict]:
    with open(path, encoding="utf-8") as f:
        try:
            document = json.load(f)
        except json.JSONDecodeError as e:
            raise errors.CheckpointFormatError(f"Checkpoint {path} is not valid JSON: {e}")
    return net_from_document(document)
