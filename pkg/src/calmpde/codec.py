"""Hierarchical CALM encoder and decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .calm import CalmLayer, ConfigError, LayerSpec, Module
from .geometry import PointSet
from .tensor import DimensionError, Tensor


@dataclass
class CodecConfig:
    n_channels: int = 1
    n_dims: int = 1
    periodic: tuple[bool, ...] = (True,)
    encoder_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    encoder_queries: list[int] = field(default_factory=lambda: [256, 64, 8])
    encoder_percentiles: list[float] = field(default_factory=lambda: [0.05, 0.1, 0.5])
    encoder_temperatures: list[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    decoder_channels: list[int] = field(default_factory=lambda: [32, 16, 1])
    decoder_queries: list[int] = field(default_factory=lambda: [64, 256])
    decoder_percentiles: list[float] = field(default_factory=lambda: [1.0, 0.5, 0.1])
    decoder_temperatures: list[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    kernel_hidden: int = 32
    rff_features: int = 32
    rff_scale: float = 1.0
    mesh_prior: bool = False
    learnable_queries: bool = True
    modulation: bool = True
    distance_weighting: bool = True
    distance_only_kernel: bool = False
    final_activation: str = "identity"

    @property
    def latent_tokens(self) -> int:
        return self.encoder_queries[-1]

    @property
    def latent_dim(self) -> int:
        return self.encoder_channels[-1]

    @property
    def latent_size(self) -> int:
        return self.latent_tokens * self.latent_dim

    def validate(self) -> list[str]:
        errs = []
        k = len(self.encoder_channels)
        for name in ("encoder_queries", "encoder_percentiles", "encoder_temperatures"):
            if len(getattr(self, name)) != k:
                errs.append(f"codec.{name} needs {k} entries (one per encoder layer)")
        kd = len(self.decoder_channels)
        for name in ("decoder_percentiles", "decoder_temperatures"):
            if len(getattr(self, name)) != kd:
                errs.append(f"codec.{name} needs {kd} entries (one per decoder layer)")
        if len(self.decoder_queries) != kd - 1:
            errs.append(f"codec.decoder_queries needs {kd - 1} entries (final layer is queried externally)")
        if any(b >= a for a, b in zip(self.encoder_queries, self.encoder_queries[1:])):
            errs.append("codec.encoder_queries must strictly decrease")
        dq = [self.latent_tokens] + list(self.decoder_queries)
        if any(b <= a for a, b in zip(dq, dq[1:])):
            errs.append("codec.decoder_queries must strictly increase from the latent token count")
        if any(b <= a for a, b in zip(self.encoder_channels, self.encoder_channels[1:])):
            errs.append("codec.encoder_channels must strictly increase")
        if any(b >= a for a, b in zip(self.decoder_channels, self.decoder_channels[1:])):
            errs.append("codec.decoder_channels must strictly decrease")
        if self.decoder_channels and self.decoder_channels[-1] != self.n_channels:
            errs.append(f"codec.decoder_channels must end with n_channels={self.n_channels}")
        for name in ("encoder_percentiles", "decoder_percentiles"):
            if any(not 0 < p <= 1 for p in getattr(self, name)):
                errs.append(f"codec.{name} entries must lie in (0, 1]")
        for name in ("encoder_temperatures", "decoder_temperatures"):
            if any(t <= 0 for t in getattr(self, name)):
                errs.append(f"codec.{name} entries must be > 0")
        if len(self.periodic) != self.n_dims:
            errs.append("codec.periodic needs one flag per spatial dimension")
        if self.final_activation not in ("identity", "gelu"):
            errs.append("codec.final_activation must be identity or gelu")
        return errs

    def layer_spec(self, **kw) -> LayerSpec:
        return LayerSpec(
            n_dims=self.n_dims, periodic=tuple(self.periodic), kernel_hidden=self.kernel_hidden,
            rff_features=self.rff_features, rff_scale=self.rff_scale,
            learnable_queries=self.learnable_queries, modulation=self.modulation,
            distance_weighting=self.distance_weighting, distance_only_kernel=self.distance_only_kernel,
            **kw)


@dataclass
class LatentState:
    """Latent tokens ``Z`` (``B x l x d``) and their positions ``P`` (``l x N_d``)."""

    z: Tensor
    p: Tensor


def init_queries(counts: list[int], mesh: PointSet | None, n_dims: int, mesh_prior: bool,
                 rng: np.random.Generator) -> list[np.ndarray]:
    """Initial query positions per layer: uniform in the box, or sampled from the mesh."""
    out = []
    for k in counts:
        if mesh_prior:
            if mesh is None or len(mesh) == 0:
                raise ConfigError("mesh prior needs a non-empty mesh")
            idx = rng.choice(len(mesh), size=k, replace=k > len(mesh))
            out.append(mesh.positions[idx].copy())
        else:
            out.append(rng.uniform(0.0, 1.0, size=(k, n_dims)))
    return out


class Encoder(Module):
    def __init__(self, cfg: CodecConfig, rng: np.random.Generator, mesh: PointSet | None = None, dtype=np.float32):
        queries = init_queries(cfg.encoder_queries, mesh, cfg.n_dims, cfg.mesh_prior, rng)
        chans = [cfg.n_channels] + list(cfg.encoder_channels)
        self.layers = [
            CalmLayer(cfg.layer_spec(in_channels=chans[i], out_channels=chans[i + 1],
                                     n_queries=cfg.encoder_queries[i],
                                     percentile=cfg.encoder_percentiles[i],
                                     temperature=cfg.encoder_temperatures[i]),
                      rng, queries=queries[i], dtype=dtype)
            for i in range(len(cfg.encoder_channels))
        ]

    def __call__(self, values: Tensor, points: Tensor) -> LatentState:
        x, pts = values, points
        for layer in self.layers:
            x, pts = layer(x, pts)
        return LatentState(x, pts)


class Decoder(Module):
    def __init__(self, cfg: CodecConfig, rng: np.random.Generator, mesh: PointSet | None = None, dtype=np.float32):
        queries = init_queries(cfg.decoder_queries, mesh, cfg.n_dims, cfg.mesh_prior, rng)
        chans = [cfg.latent_dim] + list(cfg.decoder_channels)
        n = len(cfg.decoder_channels)
        self.layers = []
        for i in range(n):
            last = i == n - 1
            spec = cfg.layer_spec(
                in_channels=chans[i], out_channels=chans[i + 1],
                n_queries=None if last else cfg.decoder_queries[i],
                percentile=cfg.decoder_percentiles[i], temperature=cfg.decoder_temperatures[i],
                activation=cfg.final_activation if last else "gelu")
            self.layers.append(CalmLayer(spec, rng, queries=None if last else queries[i], dtype=dtype))
        self._n_dims = cfg.n_dims

    def __call__(self, state: LatentState, query_points: Tensor) -> Tensor:
        if query_points.ndim != 2 or query_points.shape[1] != self._n_dims:
            raise DimensionError(f"query mesh must be N' x {self._n_dims}, got {query_points.shape}")
        x, pts = state.z, state.p
        for layer in self.layers[:-1]:
            x, pts = layer(x, pts)
        out, _ = self.layers[-1](x, pts, query_points)
        return out
