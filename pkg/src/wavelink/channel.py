"""Wireless channel generation and noise injection.

The channel acts on flat-indexed aperture vectors: the received field at
the outer receive plane is ``H @ u + noise``. Supported models:

* correlated Rician fading: a deterministic steering-vector outer product
  mixed with correlated Rayleigh scattering,
* rank-constrained random channels built from a low-rank Gaussian
  factorization,
* the identity channel for plumbing tests.

All stochastic channels are Frobenius-normalized exactly (not merely in
expectation) so received power is comparable across draws and models.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from .core import Geometry, RngSeed, to_flat, to_grid


@dataclass(frozen=True)
class RicianConfig:
    """Rician mixing factor (linear) and line-of-sight path angles (radians)."""

    k_factor: float = 1.0
    tx_elevation: float = np.pi / 4
    tx_azimuth: float = np.pi / 4
    rx_elevation: float = np.pi / 4
    rx_azimuth: float = np.pi / 4

    def __post_init__(self):
        if self.k_factor < 0.0:
            raise ValueError("k_factor must be non-negative")


@dataclass
class ChannelRealization:
    """One draw of the aperture-to-aperture matrix plus the noise level."""

    matrix: np.ndarray
    sigma2: float = 0.0
    kind: str = "identity"

    def __post_init__(self):
        if self.sigma2 < 0.0:
            raise ValueError("sigma2 must be non-negative")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("channel matrix must be finite")


def steering_vector(geometry: Geometry, elevation: float, azimuth: float) -> np.ndarray:
    """Unit-modulus array response of the plane, flat-indexed.

    The response factorizes along the two array axes with spatial
    frequencies ``w_x = (2 pi d_x / lambda) sin(elevation) cos(azimuth)``
    and ``w_z = (2 pi d_z / lambda) cos(elevation)``; element ``n`` carries
    phase ``n_x * w_x + n_z * w_z``.
    """
    w_x = 2.0 * np.pi * geometry.d_x / geometry.wavelength * np.sin(elevation) * np.cos(azimuth)
    w_z = 2.0 * np.pi * geometry.d_z / geometry.wavelength * np.cos(elevation)
    a_x = np.exp(1j * w_x * np.arange(geometry.n_x))
    a_z = np.exp(1j * w_z * np.arange(geometry.n_z))
    return to_flat(a_x[:, None] * a_z[None, :])


def los_channel(geometry: Geometry, config: RicianConfig) -> np.ndarray:
    """Rank-one deterministic component, ``a_tx a_rx^H``."""
    a_tx = steering_vector(geometry, config.tx_elevation, config.tx_azimuth)
    a_rx = steering_vector(geometry, config.rx_elevation, config.rx_azimuth)
    return np.outer(a_tx, np.conj(a_rx))


def correlation_matrix(geometry: Geometry) -> np.ndarray:
    """Spatial correlation between elements, sinc of twice the distance in
    wavelengths. Unit diagonal, symmetric."""
    cells = np.arange(geometry.n)
    cx = cells % geometry.n_x
    cz = cells // geometry.n_x
    dist = np.sqrt(
        ((cx[:, None] - cx[None, :]) * geometry.d_x) ** 2
        + ((cz[:, None] - cz[None, :]) * geometry.d_z) ** 2
    )
    return np.sinc(2.0 * dist / geometry.wavelength)


@functools.lru_cache(maxsize=8)
def correlation_sqrt(geometry: Geometry) -> np.ndarray:
    """Symmetric PSD square root of the correlation matrix.

    The sinc model can be numerically indefinite at fine spacing;
    eigenvalues are clipped at zero before the square root, which keeps
    the factor symmetric and positive semidefinite.
    """
    eigvals, eigvecs = np.linalg.eigh(correlation_matrix(geometry))
    clipped = np.sqrt(np.clip(eigvals, 0.0, None))
    root = (eigvecs * clipped) @ eigvecs.T
    if not np.any(clipped > 0.0):
        raise ValueError("degenerate correlation matrix: all-zero square root")
    return root


def _complex_gaussian(rng: np.random.Generator, shape) -> np.ndarray:
    """i.i.d. standard complex Gaussian, unit variance per complex entry."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def nlos_channel(geometry: Geometry, rng: np.random.Generator) -> np.ndarray:
    """Correlated Rayleigh component, scaled so its squared Frobenius norm
    equals N^2 exactly."""
    root = correlation_sqrt(geometry)
    shaped = root @ _complex_gaussian(rng, (geometry.n, geometry.n)) @ root
    norm = np.linalg.norm(shaped)
    if norm == 0.0:
        raise ValueError("degenerate scattering draw")
    return (geometry.n / norm) * shaped


def rician_channel(geometry: Geometry, config: RicianConfig,
                   rng: np.random.Generator) -> ChannelRealization:
    """Mix the deterministic and scattered components by the K-factor."""
    k = config.k_factor
    h = (
        np.sqrt(k / (1.0 + k)) * los_channel(geometry, config)
        + np.sqrt(1.0 / (1.0 + k)) * nlos_channel(geometry, rng)
    )
    return ChannelRealization(matrix=h, kind="rician")


def rank_constrained_channel(geometry: Geometry, rank: int,
                             rng: np.random.Generator) -> ChannelRealization:
    """Random channel of rank at most ``rank``, Frobenius norm N exactly."""
    if not (1 <= rank <= geometry.n):
        raise ValueError(f"rank must lie in [1, {geometry.n}]")
    left = _complex_gaussian(rng, (geometry.n, rank))
    right = _complex_gaussian(rng, (rank, geometry.n))
    product = left @ right
    return ChannelRealization(
        matrix=(geometry.n / np.linalg.norm(product)) * product,
        kind="rank-constrained",
    )


def identity_channel(geometry: Geometry) -> ChannelRealization:
    return ChannelRealization(matrix=np.eye(geometry.n, dtype=np.complex128),
                              kind="identity")


@dataclass(frozen=True)
class ChannelSpec:
    """Declarative channel model used by training and evaluation harnesses."""

    kind: str = "rician"
    rician: RicianConfig = field(default_factory=RicianConfig)
    rank: int = 1

    def __post_init__(self):
        if self.kind not in ("rician", "rank-constrained", "identity"):
            raise ValueError(f"unknown channel kind {self.kind!r}")

    def draw(self, geometry: Geometry, rng: np.random.Generator) -> ChannelRealization:
        if self.kind == "rician":
            return rician_channel(geometry, self.rician, rng)
        if self.kind == "rank-constrained":
            return rank_constrained_channel(geometry, self.rank, rng)
        return identity_channel(geometry)


def draw_noise(rng: np.random.Generator, shape, sigma2: float) -> np.ndarray:
    """Circular complex Gaussian noise, per-element variance ``sigma2``."""
    if sigma2 < 0.0:
        raise ValueError("sigma2 must be non-negative")
    if sigma2 == 0.0:
        return np.zeros(shape, dtype=np.complex128)
    return np.sqrt(sigma2) * _complex_gaussian(rng, shape)


def apply_channel(field: np.ndarray, ch: ChannelRealization,
                  rng: np.random.Generator = None) -> np.ndarray:
    """Propagate a field through the channel and add aperture noise.

    Noise is added at the receive aperture, before any receive-side
    processing, so downstream stacks shape signal and noise identically.
    """
    field = np.asarray(field, dtype=np.complex128)
    n_x, n_z = field.shape[-2:]
    flat = to_flat(field)
    if flat.shape[-1] != ch.matrix.shape[1]:
        raise ValueError(
            f"field length {flat.shape[-1]} does not match channel size "
            f"{ch.matrix.shape[1]}"
        )
    out = flat @ ch.matrix.T
    if ch.sigma2 > 0.0:
        if rng is None:
            raise ValueError("rng required when sigma2 > 0")
        out = out + draw_noise(rng, out.shape, ch.sigma2)
    return out.reshape(flat.shape[:-1] + (n_z, n_x)).swapaxes(-2, -1)


def snr_to_sigma2(mean_power: float, snr_db: float) -> float:
    """Noise variance that realizes the target SNR against a measured
    per-element signal power."""
    if mean_power <= 0.0:
        raise ValueError("calibration failed: zero received power")
    return mean_power / 10.0 ** (snr_db / 10.0)
