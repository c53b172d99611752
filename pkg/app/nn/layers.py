import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from app.autodiff import ops
from app.autodiff.init import ones, trunc_normal, zeros
from app.autodiff.rng import Rng
from app.autodiff.tensor import Tensor
from app.errors import ShapeError
from app.nn.inductive_bias import BiasSet, MHSAParams, conv_generalized, generalized_biases, mhsa_forward

logger = logging.getLogger(__name__)


@dataclass
class LayerTrace:
    """Per-layer features (B×n_ℓ×d, depth order) and final logits of one forward pass."""

    features: List[Tensor]
    logits: Tensor
    attention: List[Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.features)

    def shapes(self) -> List[Tuple[int, ...]]:
        return [f.shape for f in self.features]


class Module:
    """Container that registers trainable tensors and child modules by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None
        for child in self._children.values():
            child.zero_grad()


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: List[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self.add_module(str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]


class Linear(Module):
    """y = x W + b over the last axis; W is d_in×d_out."""

    def __init__(self, d_in: int, d_out: int, rng: Optional[Rng] = None, dtype=np.float32,
                 weight: Optional[Tensor] = None, bias: Optional[Tensor] = None):
        super().__init__()
        self.weight = weight if weight is not None else trunc_normal(rng, (d_in, d_out), dtype=dtype)
        self.bias = bias if bias is not None else zeros((d_out,), dtype=dtype)
        if self.weight.shape != (d_in, d_out) or self.bias.shape != (d_out,):
            raise ShapeError(f"linear {d_in}->{d_out} got weight {self.weight.shape} and bias {self.bias.shape}")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, eps: float = 1e-6):
        super().__init__()
        self.gain = ones((d,), dtype=dtype)
        self.bias = zeros((d,), dtype=dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward(Module):
    """FC(d→hidden) → GELU → FC(hidden→d); on a flattened map this is a pair of 1×1 convs."""

    def __init__(self, d: int, hidden: int, rng: Optional[Rng] = None, dtype=np.float32,
                 tensors: Optional[Dict[str, Tensor]] = None):
        super().__init__()
        tensors = tensors or {}
        self.fc1 = Linear(d, hidden, rng.split("fc1") if rng else None, dtype,
                          tensors.get("fc1.weight"), tensors.get("fc1.bias"))
        self.fc2 = Linear(hidden, d, rng.split("fc2") if rng else None, dtype,
                          tensors.get("fc2.weight"), tensors.get("fc2.bias"))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class Attention(Module):
    """Multi-head self-attention with separate Q/K/V/O projections and biases."""

    def __init__(self, d: int, heads: int, rng: Optional[Rng] = None, dtype=np.float32, qkv_bias: bool = True,
                 tensors: Optional[Dict[str, Tensor]] = None):
        super().__init__()
        tensors = tensors or {}
        self.heads = heads
        for name in ("w_q", "w_k", "w_v", "w_o"):
            t = tensors.get(name)
            setattr(self, name, t if t is not None else trunc_normal(rng.split(name), (d, d), dtype=dtype))
        for name in ("b_q", "b_k", "b_v"):
            if qkv_bias:
                t = tensors.get(name)
                setattr(self, name, t if t is not None else zeros((d,), dtype=dtype))
            else:
                object.__setattr__(self, name, None)
        b_o = tensors.get("b_o")
        self.b_o = b_o if b_o is not None else zeros((d,), dtype=dtype)

    @property
    def params(self) -> MHSAParams:
        return MHSAParams(self.heads, self.w_q, self.w_k, self.w_v, self.w_o,
                          self.b_q, self.b_k, self.b_v, self.b_o)

    def __call__(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        return mhsa_forward(x, self.params)


class GeneralizedConv(Module):
    """Multi-head CONV layer acting on a flattened h×w map (B×n×d).

    With ``shared`` (``w_v``, ``w_o``, ``b_o`` and optionally ``b_v`` of an
    attention layer) the per-head projections are W_h^V W_h^O and the head
    biases b_h^V W_h^O, recomputed on every call so the layer tracks the
    attention weights. Without it the layer owns H private d×d projections
    and an output bias.
    """

    def __init__(self, d: int, heads: int, feature_shape: Tuple[int, int], rng: Optional[Rng] = None,
                 dtype=np.float32, shared: Optional[Dict[str, Tensor]] = None):
        super().__init__()
        self.heads = heads
        self.feature_shape = tuple(feature_shape)
        self.biases: BiasSet = generalized_biases(heads, self.feature_shape)
        self.shared = bool(shared)
        if shared:
            for name in ("w_v", "w_o", "b_o"):
                if name not in shared:
                    raise ShapeError(f"shared CONV layer is missing '{name}'")
                setattr(self, name, shared[name])
            self.b_v = shared.get("b_v")
            if self.w_v.shape != (d, d) or self.w_o.shape != (d, d):
                raise ShapeError(f"shared projections {self.w_v.shape}, {self.w_o.shape} do not match d={d}")
        else:
            self.projections = ModuleList()
            for h in range(heads):
                holder = Module()
                holder.weight = trunc_normal(rng.split(f"head{h}"), (d, d), dtype=dtype)
                self.projections.append(holder)
            self.bias = zeros((d,), dtype=dtype)

    @property
    def params(self) -> MHSAParams:
        return MHSAParams(self.heads, None, None, self.w_v, self.w_o, b_v=self.b_v, b_o=self.b_o)

    def __call__(self, x: Tensor) -> Tensor:
        n = self.feature_shape[0] * self.feature_shape[1]
        if x.shape[-2] != n:
            raise ShapeError(f"CONV layer for a {self.feature_shape} map got {x.shape[-2]} tokens")
        if not self.shared:
            w_vo = [p.weight for p in self.projections]
            return conv_generalized(x, self.biases, w_vo, bias=self.bias)
        att = self.params
        w_vo = [att.value_output(h) for h in range(self.heads)]
        head_bias = None if att.b_v is None else [att.value_output_bias(h) for h in range(self.heads)]
        return conv_generalized(x, self.biases, w_vo, head_bias=head_bias, bias=att.b_o)


class Conv2d(Module):
    """Direct convolution on B×C×H×W maps; kernel stored k×k×C_in×C_out."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, padding: int = 0,
                 rng: Optional[Rng] = None, dtype=np.float32):
        super().__init__()
        self.weight = trunc_normal(rng, (kernel, kernel, c_in, c_out), dtype=dtype)
        self.bias = zeros((c_out,), dtype=dtype)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d_direct(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


def map_to_tokens(x: Tensor) -> Tensor:
    """B×C×H×W → B×(H·W)×C in row-major spatial order."""
    b, c, h, w = x.shape
    return ops.transpose(ops.reshape(x, (b, c, h * w)), (0, 2, 1))


def tokens_to_map(x: Tensor, side: Tuple[int, int]) -> Tensor:
    """B×n×C → B×C×H×W, inverse of :func:`map_to_tokens`."""
    b, n, c = x.shape
    if side[0] * side[1] != n:
        raise ShapeError(f"cannot fold {n} tokens into a {side[0]}x{side[1]} map")
    return ops.reshape(ops.transpose(x, (0, 2, 1)), (b, c, side[0], side[1]))


def fc_equals_1x1_conv(weight: np.ndarray, bias: np.ndarray, x: np.ndarray, tol: float = 1e-10,
                       perturb: float = 0.0) -> bool:
    """Apply W, b as an FC layer on tokens and as a 1×1 conv on the map; compare.

    ``x`` is C×H×W. ``perturb`` is added to the FC path only, to check the
    checker itself.
    """
    c, h, w = x.shape
    tokens = Tensor(x.reshape(c, h * w).T)
    fc = (ops.matmul(tokens, Tensor(weight)) + Tensor(bias)).data + perturb
    kernel = Tensor(weight.reshape(1, 1, *weight.shape))
    conv = ops.conv2d_direct(Tensor(x), kernel, Tensor(bias)).data
    conv_tokens = conv.reshape(weight.shape[1], h * w).T
    return bool(np.max(np.abs(fc - conv_tokens), initial=0.0) <= tol)


def parameter_count(model: Module) -> int:
    return int(sum(p.size for p in model.parameters().values()))
