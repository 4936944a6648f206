"""Unvectorised reference implementations used as test oracles."""

import math

import numpy as np


def gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def wrap(d, periodic):
    if periodic:
        d = d - math.floor(d + 0.5)
    return d


def layer_forward(layer, values, inputs, queries):
    """Loop over queries, neighbours, input and output channels of one CALM layer."""
    s = layer.spec
    p = {name: t.data.astype(np.float64) for name, t in layer.named_tensors()}
    b_mat = p["rff.matrix"]
    n, k = len(inputs), len(queries)
    ni, no = s.in_channels, s.out_channels
    batch = values.shape[0]

    pre = np.zeros((batch, n, ni))
    for b in range(batch):
        for m in range(n):
            for i in range(ni):
                acc = p["pre_b"][i]
                for c in range(ni):
                    acc += values[b, m, c] * p["pre_w"][c, i]
                pre[b, m, i] = acc

    out = np.zeros((batch, k, no))
    for j in range(k):
        trans, dists = [], []
        for m in range(n):
            t = [wrap(queries[j][d] - inputs[m][d], s.periodic[d]) for d in range(s.n_dims)]
            trans.append(t)
            dists.append(math.sqrt(sum(v * v for v in t)))
        rank = min(n, max(1, math.ceil(s.percentile * n - 1e-9)))
        eps = sorted(dists)[rank - 1]
        members = [m for m in range(n) if dists[m] <= eps]

        sq = [sum(v * v for v in trans[m]) for m in members]
        lo, hi = min(sq), max(sq)
        span = hi - lo if hi - lo > 1e-12 else 1.0
        logits = [-(v - lo) / span / s.temperature for v in sq]
        top = max(logits)
        ex = [math.exp(v - top) for v in logits]
        weights = [e / sum(ex) for e in ex] if s.distance_weighting else [1.0 / len(members)] * len(members)

        kernels = []
        for m in members:
            feats = []
            for f in range(b_mat.shape[1]):
                phase = 2 * math.pi * sum(trans[m][d] * b_mat[d, f] for d in range(s.n_dims))
                feats.append(math.sin(phase))
            for f in range(b_mat.shape[1]):
                phase = 2 * math.pi * sum(trans[m][d] * b_mat[d, f] for d in range(s.n_dims))
                feats.append(math.cos(phase))
            hid = []
            for h in range(p["w1"].shape[1]):
                v = p["b1"][h] + sum(feats[f] * p["w1"][f, h] for f in range(len(feats)))
                if "gamma" in p:
                    v = v * p["gamma"][j, h] + p["beta"][j, h]
                hid.append(gelu(v))
            vec = [p["b2"][r] + sum(hid[h] * p["w2"][h, r] for h in range(len(hid))) for r in range(ni * no)]
            kernels.append(vec)

        for b in range(batch):
            for o in range(no):
                acc = 0.0
                for i in range(ni):
                    for idx, m in enumerate(members):
                        acc += pre[b, m, i] * kernels[idx][i * no + o] * weights[idx]
                y = acc + p["conv_bias"][o]
                out[b, j, o] = gelu(y) if s.activation == "gelu" else y

    final = np.zeros_like(out)
    ph = p["post_w1"].shape[1]
    for b in range(batch):
        for j in range(k):
            hid = [gelu(p["post_b1"][h] + sum(out[b, j, o] * p["post_w1"][o, h] for o in range(no)))
                   for h in range(ph)]
            for o in range(no):
                final[b, j, o] = out[b, j, o] + p["post_b2"][o] + sum(hid[h] * p["post_w2"][h, o] for h in range(ph))
    return final


def relative_l2(pred, truth):
    """Direct transcription of the per-(t, c) averaged relative L2 for ``T x N x C``."""
    t_steps, _, chans = truth.shape
    total = 0.0
    for t in range(t_steps):
        for c in range(chans):
            num = math.sqrt(sum((pred[t, n, c] - truth[t, n, c]) ** 2 for n in range(truth.shape[1])))
            den = math.sqrt(sum(truth[t, n, c] ** 2 for n in range(truth.shape[1])))
            total += num / den
    return total / (t_steps * chans)


def random_layer_instance(seed: int):
    """A float64 CALM layer with perturbed parameters plus random inputs (N <= 32, K <= 8)."""
    from calmpde.calm import CalmLayer, LayerSpec

    r = np.random.default_rng(seed)
    nd = int(r.integers(1, 3))
    periodic = tuple(bool(v) for v in r.integers(0, 2, nd))
    n, k = int(r.integers(1, 33)), int(r.integers(1, 9))
    spec = LayerSpec(in_channels=int(r.integers(1, 5)), out_channels=int(r.integers(1, 5)), n_dims=nd,
                     periodic=periodic, n_queries=k, percentile=float(r.uniform(0.05, 1.0)),
                     temperature=float(r.uniform(0.2, 2.0)), kernel_hidden=6, rff_features=4,
                     modulation=bool(r.integers(0, 2)), distance_weighting=bool(r.integers(0, 2)),
                     activation=str(r.choice(["gelu", "identity"])))
    layer = CalmLayer(spec, r, dtype=np.float64)
    for _, t in layer.parameters():
        t.data = t.data + r.normal(0, 0.1, t.shape)
    layer.queries.data = np.mod(layer.queries.data, 1.0)
    inputs = r.uniform(0, 1, (n, nd))
    values = r.normal(size=(2, n, spec.in_channels))
    return layer, values, inputs


def tiny_model(seed: int = 0, dtype=np.float64, learnable_queries: bool = True, mesh=None):
    """Two-layer encoder (8 -> 4 queries), one processor block, two-layer decoder, 1D periodic."""
    from calmpde.codec import CodecConfig
    from calmpde.model import CalmPDE
    from calmpde.processor import ProcessorConfig

    codec = CodecConfig(n_channels=1, n_dims=1, periodic=(True,),
                        encoder_channels=[3, 4], encoder_queries=[8, 4], encoder_percentiles=[0.4, 0.8],
                        encoder_temperatures=[1.0, 1.0], decoder_channels=[3, 1], decoder_queries=[8],
                        decoder_percentiles=[0.8, 0.4], decoder_temperatures=[1.0, 1.0],
                        kernel_hidden=5, rff_features=3, learnable_queries=learnable_queries,
                        mesh_prior=mesh is not None)
    return CalmPDE(codec, ProcessorConfig(blocks=1, rff_features=3), dt=0.1, seed=seed, mesh=mesh, dtype=dtype)


def window_loss(model, windows, points):
    from calmpde import tensor as tc
    from calmpde.training import relative_l2

    with tc.no_record():
        pred = model.forward(windows[:, 0], points, windows.shape[1] - 1)
        return float(relative_l2(pred, windows).data)


def finite_difference_entries(model, windows, points, picks, h=1e-6):
    """Central differences of the window loss for ``(name, flat_index)`` picks."""
    params = dict(model.parameters())
    out = []
    for name, i in picks:
        flat = params[name].data.reshape(-1)
        old = flat[i]
        flat[i] = old + h
        fp = window_loss(model, windows, points)
        flat[i] = old - h
        fm = window_loss(model, windows, points)
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)
