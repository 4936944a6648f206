"""CALM layer: continuous convolution on learnable query points.

The kernel for a query ``a`` and input point ``alpha`` is a 2-layer MLP of
random Fourier features of the translation ``a - alpha``, with a per-query
FiLM modulation of the hidden layer, multiplied by a softmax weighting of
the squared distances inside the receptive field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as tc
from .geometry import Neighborhood, build_neighborhood, periodic_shift
from .tensor import Tensor

TWO_PI = 2.0 * math.pi
# min-max range below which all neighbours count as equidistant
DEGENERATE_RANGE = 1e-12


class ConfigError(ValueError):
    """Invalid layer or model configuration."""


def linear_init(rng: np.random.Generator, fan_in: int, shape, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape, dtype, a: float = math.sqrt(5)) -> np.ndarray:
    gain = math.sqrt(2.0 / (1.0 + a * a))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class RffEncoder:
    """Fixed random Fourier features ``[sin(2 pi v B), cos(2 pi v B)]``."""

    def __init__(self, n_dims: int, n_features: int, scale: float = 1.0, rng=None, dtype=np.float32):
        rng = np.random.default_rng() if rng is None else rng
        self.matrix = Tensor(rng.normal(0.0, scale, size=(n_dims, n_features)).astype(dtype), name="rff")

    @property
    def out_dim(self) -> int:
        return 2 * self.matrix.shape[1]

    def __call__(self, v: Tensor) -> Tensor:
        if v.ndim == 1:
            v = v.reshape(1, -1)
        phase = tc.scale(tc.matmul(v, self.matrix), TWO_PI)
        return tc.concat([tc.sin(phase), tc.cos(phase)], axis=-1)


class Module:
    """Minimal container: named tensors plus named child modules."""

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, Tensor):
                yield prefix + key, value
            elif isinstance(value, RffEncoder):
                yield prefix + key + ".matrix", value.matrix
            elif isinstance(value, Module):
                yield from value.named_tensors(prefix + key + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield from m.named_tensors(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in self.named_tensors() if t.requires_grad]

    def astype(self, dtype):
        for _, t in self.named_tensors():
            t.data = t.data.astype(dtype)
        return self


@dataclass
class LayerSpec:
    in_channels: int
    out_channels: int
    n_dims: int
    periodic: tuple[bool, ...]
    n_queries: int | None = None  # None -> queries supplied at call time
    percentile: float = 0.1
    temperature: float = 1.0
    kernel_hidden: int = 32
    rff_features: int = 32
    rff_scale: float = 1.0
    learnable_queries: bool = True
    modulation: bool = True
    distance_weighting: bool = True
    distance_only_kernel: bool = False
    activation: str = "gelu"  # "gelu" | "identity"
    post_hidden: int | None = None

    def validate(self) -> list[str]:
        errs = []
        if self.in_channels < 1 or self.out_channels < 1:
            errs.append("channel counts must be positive")
        if not 0 < self.percentile <= 1:
            errs.append(f"percentile {self.percentile} not in (0, 1]")
        if self.temperature <= 0:
            errs.append(f"temperature {self.temperature} must be > 0")
        if self.n_queries is not None and self.n_queries < 1:
            errs.append("n_queries must be >= 1")
        if self.activation not in ("gelu", "identity"):
            errs.append(f"unknown activation {self.activation!r}")
        if len(self.periodic) != self.n_dims:
            errs.append("periodic flags do not match n_dims")
        return errs


class CalmLayer(Module):
    def __init__(self, spec: LayerSpec, rng: np.random.Generator, queries: np.ndarray | None = None,
                 dtype=np.float32):
        errs = spec.validate()
        if errs:
            raise ConfigError("; ".join(errs))
        self._spec = spec
        self._frozen: Neighborhood | None = None
        self._freeze = False
        ni, no, h = spec.in_channels, spec.out_channels, spec.kernel_hidden
        k = spec.n_queries

        if k is not None:
            if queries is None:
                queries = rng.uniform(0.0, 1.0, size=(k, spec.n_dims))
            if queries.shape != (k, spec.n_dims):
                raise ConfigError(f"initial queries shape {queries.shape} != {(k, spec.n_dims)}")
            self.queries = Tensor(np.asarray(queries, dtype=dtype), requires_grad=spec.learnable_queries)

        self.rff = RffEncoder(spec.n_dims, spec.rff_features, spec.rff_scale, rng, dtype)
        f2 = self.rff.out_dim
        if spec.distance_only_kernel:
            self.log_temperature = Tensor(np.full((ni, no), math.log(spec.temperature), dtype=dtype),
                                          requires_grad=True)
        else:
            self.w1 = Tensor(linear_init(rng, f2, (f2, h), dtype), requires_grad=True)
            self.b1 = Tensor(linear_init(rng, f2, (h,), dtype), requires_grad=True)
            self.w2 = Tensor(linear_init(rng, h, (h, ni * no), dtype), requires_grad=True)
            self.b2 = Tensor(kaiming_uniform(rng, ni, (ni * no,), dtype), requires_grad=True)
            if spec.modulation and k is not None:
                self.gamma = Tensor(np.ones((k, h), dtype=dtype), requires_grad=True)
                self.beta = Tensor(np.zeros((k, h), dtype=dtype), requires_grad=True)
        # pointwise maps start as the identity so the input signal is not swamped by random biases
        self.conv_bias = Tensor(np.zeros(no, dtype=dtype), requires_grad=True)
        self.pre_w = Tensor(np.eye(ni, dtype=dtype), requires_grad=True)
        self.pre_b = Tensor(np.zeros(ni, dtype=dtype), requires_grad=True)
        ph = spec.post_hidden or max(no, 16)
        self.post_w1 = Tensor(linear_init(rng, no, (no, ph), dtype), requires_grad=True)
        self.post_b1 = Tensor(linear_init(rng, no, (ph,), dtype), requires_grad=True)
        self.post_w2 = Tensor(np.zeros((ph, no), dtype=dtype), requires_grad=True)
        self.post_b2 = Tensor(np.zeros(no, dtype=dtype), requires_grad=True)

    @property
    def spec(self) -> LayerSpec:
        return self._spec

    @property
    def external(self) -> bool:
        return self._spec.n_queries is None

    @property
    def modulated(self) -> bool:
        return hasattr(self, "gamma")

    # -- neighbourhoods ---------------------------------------------------

    def neighborhood(self, queries: np.ndarray, inputs: np.ndarray) -> Neighborhood:
        frozen = self._frozen
        if self._freeze and frozen is not None and frozen.index.shape[0] == len(queries) \
                and frozen.n_inputs == len(inputs):
            return frozen
        nb = build_neighborhood(queries, inputs, self._spec.percentile, periodic=self._spec.periodic)
        if self._freeze:
            self._frozen = nb
        return nb

    # -- kernel -----------------------------------------------------------

    def translations(self, queries: Tensor, inputs: Tensor, nb: Neighborhood) -> Tensor:
        """``K x M x N_d`` wrapped translations ``a_k - alpha_m`` over each receptive field."""
        gathered = tc.gather_rows(inputs, nb.index)                  # K, M, Nd
        diff = tc.sub(queries.reshape(queries.shape[0], 1, queries.shape[1]), gathered)
        shift = periodic_shift(diff.data, self._spec.periodic)
        if np.any(shift):
            diff = tc.add(diff, shift.astype(diff.dtype))
        return diff

    def distance_logits(self, sqdist: Tensor, mask: np.ndarray) -> Tensor:
        """``-(s - min) / (max - min)`` over each receptive field (0 if degenerate)."""
        lo = tc.amin(sqdist, axis=-1, mask=mask).reshape(-1, 1)
        hi = tc.amax(sqdist, axis=-1, mask=mask).reshape(-1, 1)
        rng = tc.sub(hi, lo)
        degenerate = (rng.data <= DEGENERATE_RANGE).astype(sqdist.dtype)
        rng = tc.add(rng, degenerate)
        return tc.scale(tc.div(tc.sub(sqdist, lo), rng), -1.0)

    def distance_weights(self, t: Tensor, mask: np.ndarray) -> Tensor:
        """Softmax distance factor, ``K x M``; rows sum to 1 over valid slots."""
        sqdist = tc.sum(tc.square(t), axis=-1)
        z = self.distance_logits(sqdist, mask)
        return tc.softmax_lastdim(tc.scale(z, 1.0 / self._spec.temperature), mask=mask)

    def kernel_mlp(self, t: Tensor, modulation: tuple[Tensor, Tensor] | None) -> Tensor:
        """Modulated MLP(RFF(t)); ``K x M x (N_i * N_o)``."""
        hid = tc.add(tc.matmul(self.rff(t), self.w1), self.b1)
        if modulation is not None:
            gamma, beta = modulation
            k, h = gamma.shape
            hid = tc.add(tc.mul(hid, gamma.reshape(k, 1, h)), beta.reshape(k, 1, h))
        return tc.add(tc.matmul(tc.gelu(hid), self.w2), self.b2)

    def kernel_weights(self, t: Tensor, mask: np.ndarray) -> Tensor:
        """Kernel tensor ``K x M x N_i x N_o`` for translations ``t`` (``K x M x N_d``)."""
        s = self._spec
        k, m = mask.shape
        ni, no = s.in_channels, s.out_channels
        if s.distance_only_kernel:
            sqdist = tc.sum(tc.square(t), axis=-1)
            z = self.distance_logits(sqdist, mask).reshape(k, 1, 1, m)
            temp = tc.exp(self.log_temperature).reshape(1, ni, no, 1)
            w = tc.softmax_lastdim(tc.div(z, temp), mask=mask[:, None, None, :])
            return tc.transpose(w, (0, 3, 1, 2))
        modulation = None
        if self.modulated:
            if s.n_queries is None or k != s.n_queries:
                raise ConfigError("modulation needs the layer's own queries")
            modulation = (self.gamma, self.beta)
        mlp = self.kernel_mlp(t, modulation)
        if s.distance_weighting:
            w = self.distance_weights(t, mask)
        else:
            counts = mask.sum(axis=1, keepdims=True)
            w = Tensor((mask / counts).astype(mlp.dtype))
        return tc.mul(mlp, w.reshape(k, m, 1)).reshape(k, m, ni, no)

    # -- forward ----------------------------------------------------------

    def continuous_conv(self, values: Tensor, inputs: Tensor, queries: Tensor) -> Tensor:
        """``B x N x N_i`` values on ``inputs`` -> ``B x K x N_o`` at ``queries``."""
        s = self._spec
        if values.ndim != 3 or values.shape[-1] != s.in_channels:
            raise tc.DimensionError(f"expected B x N x {s.in_channels} values, got {values.shape}")
        if values.shape[1] != inputs.shape[0]:
            raise tc.DimensionError(f"{values.shape[1]} values for {inputs.shape[0]} points")
        if queries.shape[-1] != s.n_dims or inputs.shape[-1] != s.n_dims:
            raise tc.DimensionError(f"points must have {s.n_dims} coordinates")
        nb = self.neighborhood(queries.data, inputs.data)
        t = self.translations(queries, inputs, nb)
        kern = self.kernel_weights(t, nb.mask)
        k, m = nb.mask.shape
        b, ni, no = values.shape[0], s.in_channels, s.out_channels

        x = tc.add(tc.matmul(values, self.pre_w), self.pre_b)
        x = tc.gather_rows(x, nb.index, axis=1)                      # B, K, M, Ni
        x = tc.transpose(x.reshape(b, k, m * ni), (1, 0, 2))         # K, B, M*Ni
        y = tc.matmul(x, kern.reshape(k, m * ni, no))                # K, B, No
        y = tc.add(tc.transpose(y, (1, 0, 2)), self.conv_bias)
        if s.activation == "gelu":
            y = tc.gelu(y)
        hid = tc.gelu(tc.add(tc.matmul(y, self.post_w1), self.post_b1))
        return tc.add(y, tc.add(tc.matmul(hid, self.post_w2), self.post_b2))

    def __call__(self, values: Tensor, inputs: Tensor, queries: Tensor | None = None) -> tuple[Tensor, Tensor]:
        if self.external:
            if queries is None:
                raise ConfigError("this layer is queried externally; pass query points")
        elif queries is not None:
            raise ConfigError("this layer owns learnable queries; external queries not accepted")
        else:
            queries = self.queries
        return self.continuous_conv(values, inputs, queries), queries

