"""
Dense numeric kernel: perceptrons with explicit backward passes, AdamW,
the cosine learning-rate schedule and named counter-based RNG streams
"""

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from backend.errors import NumericError, RangeError, ShapeError

logger = logging.getLogger(__name__)

Mat = np.ndarray

ACTIVATIONS = ("tanh",)


class RngStream:
    """Named, seeded pseudorandom stream on a Philox counter-based generator.

    Identical (seed, stream) pairs yield identical sequences on every host;
    sub-streams derived with ``spawn`` are independent of the order in which
    they are consumed.
    """

    def __init__(self, seed: int, stream: str = "main", counter: int = 0):
        self.seed = int(seed)
        self.stream = stream
        digest = hashlib.blake2b(
            f"{self.seed}/{stream}".encode("utf-8"), digest_size=16
        ).digest()
        self._bit_generator = np.random.Philox(
            key=int.from_bytes(digest, "little"), counter=int(counter)
        )
        self.generator = np.random.Generator(self._bit_generator)

    def spawn(self, name: str) -> "RngStream":
        return RngStream(self.seed, f"{self.stream}/{name}")

    @property
    def counter(self) -> int:
        words = self._bit_generator.state["state"]["counter"]
        return int(sum(int(w) << (64 * i) for i, w in enumerate(words)))

    def random(self, size=None):
        return self.generator.random(size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size)

    def choice(self, n: int, size=None, p=None, replace: bool = True):
        return self.generator.choice(n, size=size, p=p, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream={self.stream!r}, counter={self.counter})"


def gauss(rng: RngStream, n) -> np.ndarray:
    """Standard normal draws from ``rng``; ``n`` may be a count or a shape."""
    return rng.generator.standard_normal(n)


@dataclass
class MlpParams:
    """Weights (in x out) and biases of a perceptron with tanh hidden layers"""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("weights and biases must be non-empty and paired")
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"unsupported activation: {self.activation}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i > 0 and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(
                    f"layer {i}: input width {w.shape[0]} does not chain "
                    f"with previous output {self.weights[i - 1].shape[1]}"
                )

    @property
    def dims(self) -> Tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def tensors(self) -> List[np.ndarray]:
        out: List[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_tensors(self, tensors: Sequence[np.ndarray]) -> "MlpParams":
        return MlpParams(
            weights=[np.array(t, dtype=np.float64) for t in tensors[0::2]],
            biases=[np.array(t, dtype=np.float64) for t in tensors[1::2]],
            activation=self.activation,
        )

    def copy(self) -> "MlpParams":
        return self.with_tensors(self.tensors())

    def zeros_like(self) -> "MlpParams":
        return self.with_tensors([np.zeros_like(t) for t in self.tensors()])

    def scaled(self, factor: float) -> "MlpParams":
        return self.with_tensors([t * factor for t in self.tensors()])

    def add(self, other: "MlpParams", factor: float = 1.0) -> "MlpParams":
        return self.with_tensors(
            [a + factor * b for a, b in zip(self.tensors(), other.tensors())]
        )

    def norm(self) -> float:
        return math.sqrt(sum(float(np.sum(t * t)) for t in self.tensors()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors())

    def named_tensors(self, prefix: str = "") -> Dict[str, np.ndarray]:
        named = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            named[f"{prefix}layer{i}.weight"] = w
            named[f"{prefix}layer{i}.bias"] = b
        return named

    @classmethod
    def from_named(
        cls, named: Dict[str, np.ndarray], prefix: str = "", activation: str = "tanh"
    ) -> "MlpParams":
        weights, biases = [], []
        i = 0
        while f"{prefix}layer{i}.weight" in named:
            weights.append(np.array(named[f"{prefix}layer{i}.weight"], dtype=np.float64))
            biases.append(np.array(named[f"{prefix}layer{i}.bias"], dtype=np.float64))
            i += 1
        if not weights:
            raise ShapeError(f"no layers found under prefix '{prefix}'")
        return cls(weights=weights, biases=biases, activation=activation)

    def digest(self) -> str:
        h = hashlib.sha256()
        for t in self.tensors():
            h.update(str(t.shape).encode("ascii"))
            h.update(np.ascontiguousarray(t, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class MlpCache:
    """Layer inputs recorded by ``mlp_forward``; inputs[i] feeds layer i"""

    inputs: List[np.ndarray]
    dims: Tuple[int, ...]

    @property
    def penultimate(self) -> np.ndarray:
        return self.inputs[-1]


def init_mlp(
    dims: Sequence[int], rng: RngStream, scale: float = 1.0, activation: str = "tanh"
) -> MlpParams:
    """Gaussian fan-in initialisation, zero biases."""
    if len(dims) < 2 or any(int(d) < 1 for d in dims):
        raise ShapeError(f"invalid layer dimensions: {list(dims)}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(gauss(rng, (fan_in, fan_out)) * (scale / math.sqrt(fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights=weights, biases=biases, activation=activation)


def as_batch(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ShapeError(f"expected a vector or matrix, got shape {x.shape}")
    return x


def mlp_forward(params: MlpParams, x: Mat) -> Tuple[Mat, MlpCache]:
    """Run the perceptron on a batch (rows are samples)."""
    h = as_batch(x)
    if h.shape[1] != params.dims[0]:
        raise ShapeError(f"input width {h.shape[1]} != first layer width {params.dims[0]}")
    inputs = []
    last = params.num_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        h = np.tanh(z) if i < last else z
    return h, MlpCache(inputs=inputs, dims=params.dims)


def mlp_backward(
    params: MlpParams, cache: MlpCache, dy: Mat
) -> Tuple[MlpParams, Mat]:
    """Gradients of a scalar loss w.r.t. params and input, given dLoss/dy."""
    if cache.dims != params.dims:
        raise ShapeError(f"cache for dims {cache.dims} used with params {params.dims}")
    g = as_batch(dy)
    batch = cache.inputs[0].shape[0]
    if g.shape != (batch, params.dims[-1]):
        raise ShapeError(f"dLoss/dy shape {g.shape} != {(batch, params.dims[-1])}")
    grad_w: List[np.ndarray] = [None] * params.num_layers  # type: ignore[list-item]
    grad_b: List[np.ndarray] = [None] * params.num_layers  # type: ignore[list-item]
    dx = None
    for i in reversed(range(params.num_layers)):
        h_in = cache.inputs[i]
        grad_w[i] = h_in.T @ g
        grad_b[i] = g.sum(axis=0)
        upstream = g @ params.weights[i].T
        if i > 0:
            g = upstream * (1.0 - h_in * h_in)
        else:
            dx = upstream
    grads = MlpParams(weights=grad_w, biases=grad_b, activation=params.activation)
    return grads, dx


@dataclass
class AdamWState:
    m: MlpParams
    v: MlpParams
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def named_tensors(self) -> Dict[str, np.ndarray]:
        named = self.m.named_tensors("adam.m.")
        named.update(self.v.named_tensors("adam.v."))
        return named


def adamw_init(
    params: MlpParams,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> AdamWState:
    return AdamWState(
        m=params.zeros_like(),
        v=params.zeros_like(),
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        weight_decay=weight_decay,
    )


def adamw_step(
    state: AdamWState, params: MlpParams, grads: MlpParams, lr: float
) -> Tuple[MlpParams, AdamWState]:
    """One AdamW update with decoupled weight decay; returns new objects."""
    if not lr > 0:
        raise RangeError(f"learning rate must be positive, got {lr}")
    if grads.dims != params.dims or state.m.dims != params.dims:
        raise ShapeError(f"gradient dims {grads.dims} != param dims {params.dims}")
    for i, (gw, gb) in enumerate(zip(grads.weights, grads.biases)):
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericError(f"non-finite gradient in layer {i}", index=i)

    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**step
    correction2 = 1.0 - b2**step
    decay = 1.0 - lr * state.weight_decay

    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(
        params.tensors(), grads.tensors(), state.m.tensors(), state.v.tensors()
    ):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        update = (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        new_p.append(p * decay - lr * update)
        new_m.append(m)
        new_v.append(v)

    new_state = AdamWState(
        m=params.with_tensors(new_m),
        v=params.with_tensors(new_v),
        step=step,
        beta1=b1,
        beta2=b2,
        eps=state.eps,
        weight_decay=state.weight_decay,
    )
    return params.with_tensors(new_p), new_state


def clip_grad_norm(grads: MlpParams, max_norm: Optional[float]) -> Tuple[MlpParams, float]:
    """Scale gradients down to ``max_norm``; returns (grads, norm before clipping)."""
    norm = grads.norm()
    if max_norm is not None and norm > max_norm > 0:
        return grads.scaled(max_norm / norm), norm
    return grads, norm


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    """lr_min + (lr_max - lr_min)(1 + cos(pi * step / total)) / 2, exact at both ends."""
    if step < 0 or step > total_steps:
        raise RangeError(f"step {step} outside [0, {total_steps}]")
    if not (lr_max >= lr_min > 0):
        raise RangeError(f"need lr_max >= lr_min > 0, got {lr_max}, {lr_min}")
    if step == 0:
        return lr_max
    if step == total_steps:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis."""
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0 or x.shape[-1] == 0:
        raise ShapeError("softmax of an empty vector")
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax of non-finite logits")
    return special.softmax(x, axis=-1)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0 or x.shape[-1] == 0:
        raise ShapeError("log_softmax of an empty vector")
    return special.log_softmax(x, axis=-1)


def numeric_grad(
    loss_fn: Callable[[MlpParams], float], params: MlpParams, h: float = 1e-5
) -> MlpParams:
    """Central finite-difference gradient of ``loss_fn`` at ``params``."""
    tensors = [t.copy() for t in params.tensors()]
    grads = []
    for t in tensors:
        g = np.zeros_like(t)
        flat, gflat = t.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            saved = flat[j]
            flat[j] = saved + h
            plus = loss_fn(params.with_tensors(tensors))
            flat[j] = saved - h
            minus = loss_fn(params.with_tensors(tensors))
            flat[j] = saved
            gflat[j] = (plus - minus) / (2.0 * h)
        grads.append(g)
    return params.with_tensors(grads)


def numeric_grad_array(
    loss_fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for j in range(flat.size):
        saved = flat[j]
        flat[j] = saved + h
        plus = loss_fn(x)
        flat[j] = saved - h
        minus = loss_fn(x)
        flat[j] = saved
        gflat[j] = (plus - minus) / (2.0 * h)
    return g


def max_relative_error(a, b, floor: float = 1e-6) -> float:
    """Largest elementwise |a - b| / max(|a|, |b|, floor) across tensors."""
    if isinstance(a, MlpParams):
        a = np.concatenate([t.ravel() for t in a.tensors()])
    if isinstance(b, MlpParams):
        b = np.concatenate([t.ravel() for t in b.tensors()])
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
