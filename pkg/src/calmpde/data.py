"""Synthetic PDE trajectories, dataset files and channel normalisation.

Each generator returns a :class:`Dataset` whose samples are ``S x T x N x C``
float32 arrays on a mesh normalised to ``[0, 1)``. Time ``t_k = k * dt``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import container
from .container import PayloadSizeError
from .geometry import PointSet

log = logging.getLogger(__name__)

DATASET_MAGIC = b"CALMDS01"


class CFLError(ValueError):
    """Requested solver step is outside the explicit scheme's stability region."""


@dataclass
class Dataset:
    meta: dict
    mesh: PointSet
    samples: np.ndarray

    def __post_init__(self):
        s = self.samples
        if s.ndim != 4:
            raise ValueError(f"samples must be S x T x N x C, got {s.shape}")
        if s.shape[2] != len(self.mesh):
            raise ValueError(f"{s.shape[2]} sample points for a mesh of {len(self.mesh)}")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_timesteps(self) -> int:
        return self.samples.shape[1]

    @property
    def n_points(self) -> int:
        return self.samples.shape[2]

    @property
    def n_channels(self) -> int:
        return self.samples.shape[3]

    @property
    def dt(self) -> float:
        return float(self.meta["dt"])

    @property
    def periodic(self) -> tuple[bool, ...]:
        return self.mesh.periodic

    @property
    def n_test(self) -> int:
        return int(self.meta.get("n_test", 0))

    def train(self) -> np.ndarray:
        return self.samples[: self.n_samples - self.n_test]

    def test(self) -> np.ndarray:
        return self.samples[self.n_samples - self.n_test:]


def _meta(pde: str, samples: np.ndarray, mesh: PointSet, dt: float, n_test: int, seed: int, **extra) -> dict:
    s, t, n, c = samples.shape
    meta = dict(pde=pde, n_dims=mesh.n_dims, n_channels=c, n_timesteps=t, n_points=n, n_samples=s,
                dt=float(dt), periodic=list(mesh.periodic), n_test=int(min(n_test, s)), seed=int(seed))
    meta.update(extra)
    return meta


def _check_sizes(S: int, N: int, T: int):
    if S < 1:
        raise ValueError("need at least one sample")
    if N < 2 or T < 2:
        raise ValueError("need N >= 2 points and T >= 2 timesteps")


# ---------------------------------------------------------------------------
# 1D advection


def advection_profile(x: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """3-mode Fourier series; ``coeffs`` rows are ``(a_k, b_k)`` for k = 1..3."""
    k = np.arange(1, coeffs.shape[0] + 1)
    ang = 2.0 * np.pi * np.multiply.outer(x, k)
    return np.sin(ang) @ coeffs[:, 0] + np.cos(ang) @ coeffs[:, 1]


def gen_advection_1d(S: int = 576, N: int = 256, T: int = 21, speed: float = 1.0, seed: int = 0,
                     dt: float | None = None, n_test: int = 64) -> Dataset:
    """Exact periodic transport ``u(t, x) = u0((x - c t) mod 1)``."""
    _check_sizes(S, N, T)
    dt = 1.0 / (T - 1) if dt is None else dt
    rng = np.random.default_rng(seed)
    x = np.arange(N) / N
    coeffs = rng.normal(size=(S, 3, 2))
    t = np.arange(T) * dt
    out = np.empty((S, T, N, 1), dtype=np.float32)
    for s in range(S):
        shifted = np.mod(x[None, :] - speed * t[:, None], 1.0)
        out[s, :, :, 0] = advection_profile(shifted, coeffs[s])
    mesh = PointSet(x[:, None], (True,))
    meta = _meta("advection1d", out, mesh, dt, n_test, seed, speed=float(speed),
                 mesh_kind="regular", coefficients=coeffs.tolist())
    return Dataset(meta, mesh, out)


# ---------------------------------------------------------------------------
# 1D Burgers


@dataclass
class BurgersSolver:
    """Pseudo-spectral ``u_t + u u_x = (nu / pi) u_xx`` on ``x in [-1, 1)``, RK4 in time."""

    n: int
    nu: float
    length: float = 2.0
    k: np.ndarray = field(init=False)
    dealias: np.ndarray = field(init=False)

    def __post_init__(self):
        self.k = 2.0 * np.pi * np.fft.rfftfreq(self.n, d=self.length / self.n)
        cutoff = (2.0 / 3.0) * self.k.max()
        self.dealias = (self.k <= cutoff).astype(float)

    @property
    def diffusivity(self) -> float:
        return self.nu / np.pi

    def rhs(self, u_hat: np.ndarray) -> np.ndarray:
        u = np.fft.irfft(u_hat, n=self.n, axis=-1)
        flux_hat = np.fft.rfft(0.5 * u * u, axis=-1) * self.dealias
        return -1j * self.k * flux_hat - self.diffusivity * self.k ** 2 * u_hat

    def max_stable_step(self, umax: float) -> float:
        kmax = self.k.max()
        # RK4 stability reaches ~2.8 on the imaginary and ~2.78 on the negative real axis
        adv = 2.8 / (kmax * max(umax, 1e-12))
        diff = 2.78 / (self.diffusivity * kmax ** 2) if self.diffusivity > 0 else np.inf
        return min(adv, diff)

    def integrate(self, u0: np.ndarray, t_out: np.ndarray, substeps: int) -> np.ndarray:
        """Values at ``t_out`` (uniformly spaced from 0) using ``substeps`` RK4 steps per interval."""
        interval = t_out[1] - t_out[0]
        h = interval / substeps
        umax = float(np.abs(u0).max())
        limit = self.max_stable_step(umax)
        if h > limit:
            raise CFLError(f"RK4 step {h:.3g} exceeds the stability limit {limit:.3g} at N={self.n}; "
                           f"use at least {math.ceil(interval / limit)} substeps or a larger viscosity")
        u_hat = np.fft.rfft(u0, axis=-1)
        out = [u0.copy()]
        for _ in range(len(t_out) - 1):
            for _ in range(substeps):
                k1 = self.rhs(u_hat)
                k2 = self.rhs(u_hat + 0.5 * h * k1)
                k3 = self.rhs(u_hat + 0.5 * h * k2)
                k4 = self.rhs(u_hat + h * k3)
                u_hat = u_hat + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            out.append(np.fft.irfft(u_hat, n=self.n, axis=-1))
        return np.stack(out, axis=-2)


def burgers_ic(rng: np.random.Generator, S: int, x: np.ndarray, modes: int = 4) -> np.ndarray:
    """Random smooth periodic profiles with a small random mean on ``x in [-1, 1)``."""
    amp = rng.uniform(0.0, 1.0, size=(S, modes)) / np.arange(1, modes + 1)
    phase = rng.uniform(0.0, 2 * np.pi, size=(S, modes))
    offset = rng.normal(0.0, 0.1, size=(S, 1))
    m = np.arange(1, modes + 1)
    return offset + np.einsum("sm,snm->sn", amp, np.sin(np.pi * x[None, :, None] * m + phase[:, None, :]))


def gen_burgers_1d(S: int = 576, N: int = 256, T: int = 21, nu: float = 0.05, seed: int = 0,
                   t_final: float = 2.0, substeps: int | None = None, n_test: int = 64) -> Dataset:
    _check_sizes(S, N, T)
    rng = np.random.default_rng(seed)
    solver = BurgersSolver(N, nu)
    xs = -1.0 + 2.0 * np.arange(N) / N
    u0 = burgers_ic(rng, S, xs)
    t_out = np.linspace(0.0, t_final, T)
    if substeps is None:
        # the solution's sup norm never grows, so the IC bound holds throughout
        limit = solver.max_stable_step(float(np.abs(u0).max()))
        substeps = max(4, math.ceil((t_out[1] - t_out[0]) / (0.8 * limit)))
    traj = solver.integrate(u0, t_out, substeps)            # S, T, N
    out = traj[..., None].astype(np.float32)
    mesh = PointSet((np.arange(N) / N)[:, None], (True,))
    meta = _meta("burgers1d", out, mesh, t_out[1] - t_out[0], n_test, seed, nu=float(nu),
                 t_final=float(t_final), substeps=int(substeps), physical_domain=[-1.0, 1.0],
                 mesh_kind="regular")
    return Dataset(meta, mesh, out)


# ---------------------------------------------------------------------------
# 2D solid-body rotation


def blue_noise_disk_mesh(N: int, center, radius: float, density_ratio: float, rng: np.random.Generator,
                         candidates: int = 12) -> np.ndarray:
    """Best-candidate blue noise in ``[0, 1)^2`` with ``density_ratio`` x more points in a disk."""
    center = np.asarray(center, dtype=float)
    area = np.pi * radius ** 2
    p_in = density_ratio * area / (density_ratio * area + (1.0 - area))
    spacing_in = 1.0 / math.sqrt(density_ratio)

    def draw(m):
        pts = np.empty((m, 2))
        inside = rng.random(m) < p_in
        n_in = int(inside.sum())
        r = radius * np.sqrt(rng.random(n_in))
        th = rng.uniform(0, 2 * np.pi, n_in)
        pts[inside] = center + np.stack([r * np.cos(th), r * np.sin(th)], axis=1)
        for i in np.flatnonzero(~inside):
            while True:
                c = rng.random(2)
                if np.sum((c - center) ** 2) > radius ** 2:
                    pts[i] = c
                    break
        return np.clip(pts, 0.0, np.nextafter(1.0, 0.0))

    points = np.empty((N, 2))
    points[0] = draw(1)[0]
    for i in range(1, N):
        cand = draw(candidates)
        d = np.sqrt(((cand[:, None, :] - points[None, :i, :]) ** 2).sum(-1)).min(axis=1)
        local = np.where(((cand - center) ** 2).sum(-1) <= radius ** 2, spacing_in, 1.0)
        points[i] = cand[np.argmax(d / local)]
    return points


def gaussian_blobs(xy: np.ndarray, blobs: np.ndarray) -> np.ndarray:
    """Sum of Gaussians; ``blobs`` rows are ``(x, y, sigma, amplitude)``."""
    d2 = ((xy[..., None, :] - blobs[:, :2]) ** 2).sum(-1)
    return (blobs[:, 3] * np.exp(-0.5 * d2 / blobs[:, 2] ** 2)).sum(-1)


def rotate_about(xy: np.ndarray, center: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    d = xy - center
    return center + np.stack([c * d[..., 0] - s * d[..., 1], s * d[..., 0] + c * d[..., 1]], axis=-1)


def gen_rotating_2d(S: int = 576, N: int = 1024, T: int = 21, seed: int = 0, irregular: bool = True,
                    angular_velocity: float = math.pi, dt: float | None = None, n_blobs: int = 3,
                    refined_radius: float = 0.2, density_ratio: float = 4.0, n_test: int = 64) -> Dataset:
    """Gaussian blobs carried by solid-body rotation about a seeded centre.

    The initial blobs sit inside the refined disk around the rotation centre,
    so all structure stays in the densely sampled region.
    """
    _check_sizes(S, N, T)
    dt = 1.0 / (T - 1) if dt is None else dt
    rng = np.random.default_rng(seed)
    center = rng.uniform(0.4, 0.6, size=2)
    if irregular:
        mesh_pts = blue_noise_disk_mesh(N, center, refined_radius, density_ratio, rng)
    else:
        n = math.isqrt(N)
        if n * n != N:
            raise ValueError(f"a regular 2D grid needs a square point count, got {N}")
        g = (np.arange(n) + 0.5) / n
        mesh_pts = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    r = refined_radius * 0.8 * np.sqrt(rng.random((S, n_blobs)))
    th = rng.uniform(0, 2 * np.pi, size=(S, n_blobs))
    blobs = np.stack([center[0] + r * np.cos(th), center[1] + r * np.sin(th),
                      rng.uniform(0.04, 0.08, size=(S, n_blobs)),
                      rng.choice([-1.0, 1.0], size=(S, n_blobs)) * rng.uniform(0.5, 1.5, size=(S, n_blobs))],
                     axis=-1)
    out = np.empty((S, T, N, 1), dtype=np.float32)
    for k in range(T):
        back = rotate_about(mesh_pts, center, -angular_velocity * k * dt)
        for s in range(S):
            out[s, k, :, 0] = gaussian_blobs(back, blobs[s])
    mesh = PointSet(mesh_pts, (False, False))
    meta = _meta("rotating2d", out, mesh, dt, n_test, seed, angular_velocity=float(angular_velocity),
                 center=center.tolist(), mesh_kind="irregular" if irregular else "regular",
                 refined_disk=dict(center=center.tolist(), radius=refined_radius, density_ratio=density_ratio)
                 if irregular else None,
                 blobs=blobs.tolist())
    return Dataset(meta, mesh, out)


GENERATORS = {
    "advection1d": gen_advection_1d,
    "burgers1d": gen_burgers_1d,
    "rotating2d": gen_rotating_2d,
}


def generate(pde: str, **kwargs) -> Dataset:
    try:
        gen = GENERATORS[pde]
    except KeyError:
        raise ValueError(f"unknown pde {pde!r}; choose from {sorted(GENERATORS)}") from None
    return gen(**kwargs)


# ---------------------------------------------------------------------------
# persistence


def save(dataset: Dataset, path) -> int:
    samples = np.asarray(dataset.samples, dtype=np.float32)
    mesh = np.asarray(dataset.mesh.positions, dtype=np.float32)
    meta = dict(dataset.meta)
    meta.update(n_samples=samples.shape[0], n_timesteps=samples.shape[1], n_points=samples.shape[2],
                n_channels=samples.shape[3], n_dims=mesh.shape[1], periodic=list(dataset.mesh.periodic))
    return container.write(path, DATASET_MAGIC, {"metadata": meta}, {"mesh": mesh, "samples": samples})


def load(path) -> Dataset:
    header, arrays = container.read(path, DATASET_MAGIC)
    meta = header.get("metadata", {})
    try:
        mesh, samples = arrays["mesh"], arrays["samples"]
    except KeyError as e:
        raise PayloadSizeError(f"{path}: missing array {e}") from e
    want = (meta.get("n_samples"), meta.get("n_timesteps"), meta.get("n_points"), meta.get("n_channels"))
    if samples.shape != want:
        raise PayloadSizeError(f"{path}: samples shape {samples.shape} disagrees with metadata {want}")
    if mesh.shape != (meta.get("n_points"), meta.get("n_dims")):
        raise PayloadSizeError(f"{path}: mesh shape {mesh.shape} disagrees with metadata")
    return Dataset(meta, PointSet(mesh, tuple(meta["periodic"])), samples)


# ---------------------------------------------------------------------------
# normalisation


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(~(self.std > 0)):
            raise ValueError(f"channel std must be positive, got {self.std}")

    @classmethod
    def compute(cls, train: np.ndarray) -> ChannelStats:
        flat = np.asarray(train, dtype=np.float64).reshape(-1, train.shape[-1])
        return cls(flat.mean(axis=0), flat.std(axis=0))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) / self.std).astype(x.dtype, copy=False)

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return (x * self.std + self.mean).astype(x.dtype, copy=False)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> ChannelStats:
        return cls(d["mean"], d["std"])
