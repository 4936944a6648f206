"""Latent time-stepping with a small Transformer and explicit Euler.

``psi(Z, P)`` predicts the rate of change of the latent tokens; one step is
``Z + dt * psi(Z, P)``. Attention logits combine scaled dot products of
layer-normalised queries/keys with the negative pairwise token distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tc
from .calm import Module, RffEncoder, linear_init
from .codec import LatentState
from .geometry import periodic_shift
from .tensor import Tensor


@dataclass
class ProcessorConfig:
    blocks: int = 2
    rff_features: int = 16
    rff_scale: float = 1.0
    mlp_ratio: int = 2

    def validate(self) -> list[str]:
        errs = []
        if self.blocks < 1:
            errs.append("processor.blocks must be >= 1")
        if self.rff_features < 1:
            errs.append("processor.rff_features must be >= 1")
        if self.mlp_ratio < 1:
            errs.append("processor.mlp_ratio must be >= 1")
        return errs


def token_distances(p: Tensor, periodic) -> Tensor:
    """``l x l`` Euclidean distances between token positions (periodic-aware)."""
    l, nd = p.shape
    diff = tc.sub(p.reshape(l, 1, nd), p.reshape(1, l, nd))
    shift = periodic_shift(diff.data, periodic)
    if np.any(shift):
        diff = tc.add(diff, shift.astype(diff.dtype))
    return tc.norm(diff, axis=-1)


class Block(Module):
    def __init__(self, d: int, ratio: int, rng: np.random.Generator, dtype):
        self.wq = Tensor(linear_init(rng, d, (d, d), dtype), requires_grad=True)
        self.wk = Tensor(linear_init(rng, d, (d, d), dtype), requires_grad=True)
        self.wv = Tensor(linear_init(rng, d, (d, d), dtype), requires_grad=True)
        self.q_gain = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.k_gain = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.mlp_w1 = Tensor(linear_init(rng, d, (d, ratio * d), dtype), requires_grad=True)
        self.mlp_b1 = Tensor(linear_init(rng, d, (ratio * d,), dtype), requires_grad=True)
        self.mlp_w2 = Tensor(linear_init(rng, ratio * d, (ratio * d, d), dtype), requires_grad=True)
        self.mlp_b2 = Tensor(linear_init(rng, ratio * d, (d,), dtype), requires_grad=True)

    def attention_weights(self, h: Tensor, dist: Tensor) -> Tensor:
        d = h.shape[-1]
        q = tc.layer_norm(tc.matmul(h, self.wq), self.q_gain)
        k = tc.layer_norm(tc.matmul(h, self.wk), self.k_gain)
        logits = tc.sub(tc.scale(tc.matmul(q, tc.swap_last(k)), 1.0 / math.sqrt(d)), dist)
        return tc.softmax_lastdim(logits)

    def attend(self, h: Tensor, dist: Tensor) -> Tensor:
        return tc.matmul(self.attention_weights(h, dist), tc.matmul(h, self.wv))

    def mlp(self, h: Tensor) -> Tensor:
        hid = tc.gelu(tc.add(tc.matmul(h, self.mlp_w1), self.mlp_b1))
        return tc.add(tc.matmul(hid, self.mlp_w2), self.mlp_b2)

    def __call__(self, h: Tensor, dist: Tensor) -> Tensor:
        h = tc.add(self.attend(h, dist), h)
        return tc.add(self.mlp(h), h)


def euler(psi: Callable[[Tensor], Tensor], z: Tensor, dt: float) -> Tensor:
    return tc.add(z, tc.scale(psi(z), dt))


class Processor(Module):
    def __init__(self, cfg: ProcessorConfig, latent_dim: int, n_dims: int, periodic, dt: float,
                 rng: np.random.Generator, dtype=np.float32):
        errs = cfg.validate()
        if errs:
            raise ValueError("; ".join(errs))
        d = latent_dim
        self._periodic = tuple(periodic)
        self._dt = float(dt)
        self._integrator = euler
        self.rff = RffEncoder(n_dims, cfg.rff_features, cfg.rff_scale, rng, dtype)
        fin = d + self.rff.out_dim
        self.w_in = Tensor(linear_init(rng, fin, (fin, d), dtype), requires_grad=True)
        self.blocks = [Block(d, cfg.mlp_ratio, rng, dtype) for _ in range(cfg.blocks)]
        self.w_out = Tensor(linear_init(rng, d, (d, d), dtype), requires_grad=True)

    @property
    def dt(self) -> float:
        return self._dt

    @dt.setter
    def dt(self, value: float):
        self._dt = float(value)

    def lift(self, z: Tensor, p: Tensor) -> Tensor:
        """``(Z || RFF(P)) W_in`` for ``Z`` of shape ``B x l x d``."""
        b, l, _ = z.shape
        feats = self.rff(p)
        feats = tc.broadcast_to(feats.reshape(1, l, feats.shape[-1]), (b, l, feats.shape[-1]))
        return tc.matmul(tc.concat([z, feats], axis=-1), self.w_in)

    def psi(self, z: Tensor, p: Tensor, dist: Tensor | None = None) -> Tensor:
        if dist is None:
            dist = token_distances(p, self._periodic)
        h = self.lift(z, p)
        for block in self.blocks:
            h = block(h, dist)
        return tc.matmul(h, self.w_out)

    def combined_attention(self, h: Tensor, p: Tensor, block: int = 0) -> Tensor:
        return self.blocks[block].attend(h, token_distances(p, self._periodic))

    def step(self, state: LatentState, dt: float | None = None) -> LatentState:
        dt = self._dt if dt is None else dt
        dist = token_distances(state.p, self._periodic)
        z = self._integrator(lambda z_: self.psi(z_, state.p, dist), state.z, dt)
        return LatentState(z, state.p)

    def rollout(self, state: LatentState, n_steps: int) -> list[LatentState]:
        if n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        dist = token_distances(state.p, self._periodic)
        states = [state]
        for _ in range(n_steps):
            z = self._integrator(lambda z_: self.psi(z_, state.p, dist), states[-1].z, self._dt)
            states.append(LatentState(z, state.p))
        return states
