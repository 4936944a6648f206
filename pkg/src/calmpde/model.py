"""Encode-process-decode surrogate assembled from the codec and processor."""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import tensor as tc
from .calm import CalmLayer, Module
from .codec import CodecConfig, Decoder, Encoder, LatentState
from .geometry import PointSet, confine
from .processor import Processor, ProcessorConfig
from .tensor import Tensor


def _const(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, PointSet):
        x = x.positions
    return Tensor(np.asarray(x, dtype=dtype))


class CalmPDE(Module):
    def __init__(self, codec: CodecConfig, processor: ProcessorConfig, dt: float, seed: int = 0,
                 mesh: PointSet | None = None, dtype=np.float32):
        errs = codec.validate() + processor.validate()
        if errs:
            raise ValueError("; ".join(errs))
        self._codec = codec
        self._proc_cfg = processor
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(codec, rng, mesh, dtype)
        self.processor = Processor(processor, codec.latent_dim, codec.n_dims, codec.periodic, dt, rng, dtype)
        self.decoder = Decoder(codec, rng, mesh, dtype)

    @property
    def codec_config(self) -> CodecConfig:
        return self._codec

    @property
    def processor_config(self) -> ProcessorConfig:
        return self._proc_cfg

    @property
    def dtype(self):
        return self.processor.w_in.dtype

    @property
    def latent_shape(self) -> tuple[int, int]:
        return self._codec.latent_tokens, self._codec.latent_dim

    def encode(self, values, points) -> LatentState:
        return self.encoder(_const(values, self.dtype), _const(points, self.dtype))

    def decode(self, state: LatentState, query_points) -> Tensor:
        return self.decoder(state, _const(query_points, self.dtype))

    def decode_many(self, states: list[LatentState], query_points) -> Tensor:
        """Decode a sequence of latents in one pass; returns ``B x T x N' x C``."""
        b = states[0].z.shape[0]
        z = tc.concat([s.z for s in states], axis=0) if len(states) > 1 else states[0].z
        out = self.decode(LatentState(z, states[0].p), query_points)
        n, c = out.shape[1], out.shape[2]
        out = out.reshape(len(states), b, n, c)
        return tc.transpose(out, (1, 0, 2, 3))

    def forward(self, ic, points, n_steps: int, query_points=None) -> Tensor:
        """Predict ``B x (1 + n_steps) x N' x C`` from initial values ``B x N x C``.

        Index 0 along time is the reconstruction of the input state.
        """
        query_points = points if query_points is None else query_points
        state = self.encode(ic, points)
        states = self.processor.rollout(state, n_steps)
        return self.decode_many(states, query_points)

    __call__ = forward

    def query_layers(self) -> list[tuple[str, int, CalmLayer]]:
        out = [("encoder", i, layer) for i, layer in enumerate(self.encoder.layers)]
        out += [("decoder", i, layer) for i, layer in enumerate(self.decoder.layers) if not layer.external]
        return out

    def confine_queries(self):
        for _, _, layer in self.query_layers():
            layer.queries.data = confine(layer.queries.data, layer.spec.periodic)

    def query_positions(self) -> dict[str, np.ndarray]:
        return {f"{role}.{i}": layer.queries.data.copy() for role, i, layer in self.query_layers()}

    def zero_output_head(self):
        """Make the final decoder layer output exactly zero."""
        last = self.decoder.layers[-1]
        for name in ("w2", "b2", "conv_bias", "post_w2", "post_b2"):
            if hasattr(last, name):
                getattr(last, name).data[...] = 0

    @contextmanager
    def frozen_neighborhoods(self):
        """Reuse the receptive fields built by the first forward pass inside the block."""
        layers = list(self.encoder.layers) + list(self.decoder.layers)
        for layer in layers:
            layer._freeze, layer._frozen = True, None
        try:
            yield
        finally:
            for layer in layers:
                layer._freeze, layer._frozen = False, None
