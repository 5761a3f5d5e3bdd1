"""Geometry, field, and symbol-domain primitives shared by every module.

Conventions used throughout the package:

* A field is a complex ``(n_x, n_z)`` ndarray; axis 0 runs along the x axis
  of the planar array, axis 1 along the z axis. Batched operations accept
  leading batch dimensions, ``(..., n_x, n_z)``.
* The flat (vector) index of grid cell ``(n_x, n_z)`` is
  ``n = n_z * N_x + n_x``, i.e. Fortran-order raveling of the grid.
* Phase parameters are real angles in radians. Element transmission
  coefficients are ``exp(1j * phase)`` and therefore unit-modulus by
  construction.
* Symbol indices are 0-based, ``m in {0, ..., M - 1}``.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Geometry:
    """Shared uniform-planar-array geometry of feeds, layers, and detectors.

    Parameters
    ----------
    n_x, n_z : int
        Element counts along the x and z axes.
    d_x, d_z : float
        Element pitch in meters.
    d_layer : float
        Spacing between consecutive planes, in meters.
    wavelength : float
        Carrier wavelength in meters.
    l_tx, l_rx : int
        Number of phase layers in the transmit and receive stacks.
    """

    n_x: int
    n_z: int
    d_x: float
    d_z: float
    d_layer: float
    wavelength: float
    l_tx: int = 1
    l_rx: int = 1

    def __post_init__(self):
        if self.n_x < 1 or self.n_z < 1:
            raise ValueError("element counts n_x, n_z must be >= 1")
        for name in ("d_x", "d_z", "d_layer", "wavelength"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.l_tx < 1 or self.l_rx < 1:
            raise ValueError("layer counts l_tx, l_rx must be >= 1")

    @property
    def n(self) -> int:
        """Total element count per plane."""
        return self.n_x * self.n_z

    @property
    def element_area(self) -> float:
        return self.d_x * self.d_z

    @property
    def wavenumber(self) -> float:
        return 2.0 * math.pi / self.wavelength

    @property
    def grid_shape(self) -> tuple:
        return (self.n_x, self.n_z)


def flat_index(n_x_idx: int, n_z_idx: int, geometry: Geometry) -> int:
    """Flat vector index of grid cell ``(n_x_idx, n_z_idx)``."""
    if not (0 <= n_x_idx < geometry.n_x and 0 <= n_z_idx < geometry.n_z):
        raise IndexError(
            f"cell ({n_x_idx}, {n_z_idx}) outside "
            f"{geometry.n_x}x{geometry.n_z} grid"
        )
    return n_z_idx * geometry.n_x + n_x_idx


def grid_index(n: int, geometry: Geometry) -> tuple:
    """Inverse of :func:`flat_index`."""
    if not (0 <= n < geometry.n):
        raise IndexError(f"flat index {n} outside grid of {geometry.n} cells")
    return n % geometry.n_x, n // geometry.n_x


def to_flat(fields: np.ndarray) -> np.ndarray:
    """Ravel the trailing ``(n_x, n_z)`` axes into flat-index vectors."""
    return np.swapaxes(fields, -2, -1).reshape(fields.shape[:-2] + (-1,))


def to_grid(flat: np.ndarray, geometry: Geometry) -> np.ndarray:
    """Reshape flat-index vectors back into ``(n_x, n_z)`` grids."""
    grids = flat.reshape(flat.shape[:-1] + (geometry.n_z, geometry.n_x))
    return np.swapaxes(grids, -2, -1)


def field_power(field: np.ndarray) -> float:
    """Total power of one field: sum of squared magnitudes."""
    return float(np.sum(np.abs(field) ** 2))


@dataclass
class LayerStack:
    """Phase parameters of one metasurface stack.

    ``phases`` has shape ``(layers, n_x, n_z)`` and is listed in the order
    the wave passes through the layers (for the receive stack this is the
    reverse of the detector-side numbering).
    """

    phases: np.ndarray

    def __post_init__(self):
        self.phases = np.asarray(self.phases, dtype=np.float64)
        if self.phases.ndim != 3:
            raise ValueError("phases must have shape (layers, n_x, n_z)")
        if not np.all(np.isfinite(self.phases)):
            raise ValueError("phases must be finite")

    @property
    def layers(self) -> int:
        return self.phases.shape[0]

    def coefficients(self) -> np.ndarray:
        """Unit-modulus transmission coefficients ``exp(1j * phase)``."""
        return np.exp(1j * self.phases)

    def copy(self) -> "LayerStack":
        return LayerStack(self.phases.copy())


@dataclass(frozen=True)
class ModulationScheme:
    """Spatial modulation order along each axis; ``M = m_x * m_z`` symbols."""

    m_x: int
    m_z: int

    def __post_init__(self):
        if self.m_x < 1 or self.m_z < 1:
            raise ValueError("modulation orders must be >= 1")
        if self.order & (self.order - 1) != 0:
            raise ValueError(f"symbol count M={self.order} must be a power of two")

    @property
    def order(self) -> int:
        return self.m_x * self.m_z

    @property
    def bits_per_symbol(self) -> int:
        return self.order.bit_length() - 1

    def subarray_shape(self, geometry: Geometry) -> tuple:
        """Per-symbol active block shape ``(n_sub_x, n_sub_z)``."""
        if geometry.n_x % self.m_x != 0:
            raise ValueError(f"n_x={geometry.n_x} not divisible by m_x={self.m_x}")
        if geometry.n_z % self.m_z != 0:
            raise ValueError(f"n_z={geometry.n_z} not divisible by m_z={self.m_z}")
        return geometry.n_x // self.m_x, geometry.n_z // self.m_z

    def block_slices(self, symbol: int, geometry: Geometry) -> tuple:
        """Grid slices ``(x_slice, z_slice)`` of the symbol's subarray."""
        if not (0 <= symbol < self.order):
            raise ValueError(f"symbol {symbol} outside [0, {self.order})")
        n_sub_x, n_sub_z = self.subarray_shape(geometry)
        m_x = symbol % self.m_x
        m_z = symbol // self.m_x
        return (
            slice(m_x * n_sub_x, (m_x + 1) * n_sub_x),
            slice(m_z * n_sub_z, (m_z + 1) * n_sub_z),
        )

    def one_hot_grid(self, symbol: int) -> np.ndarray:
        """The ``(m_x, m_z)`` indicator grid Q with exactly one active cell."""
        if not (0 <= symbol < self.order):
            raise ValueError(f"symbol {symbol} outside [0, {self.order})")
        grid = np.zeros((self.m_x, self.m_z))
        grid[symbol % self.m_x, symbol // self.m_x] = 1.0
        return grid


@dataclass(frozen=True)
class SymbolBatch:
    """A batch of symbol indices with their one-hot encodings."""

    symbols: np.ndarray
    one_hot: np.ndarray

    @classmethod
    def from_symbols(cls, symbols, scheme: ModulationScheme) -> "SymbolBatch":
        symbols = np.atleast_1d(np.asarray(symbols, dtype=np.int64))
        if symbols.ndim != 1:
            raise ValueError("symbols must be one-dimensional")
        if np.any((symbols < 0) | (symbols >= scheme.order)):
            raise ValueError(f"symbol indices must lie in [0, {scheme.order})")
        one_hot = np.zeros((symbols.size, scheme.order))
        one_hot[np.arange(symbols.size), symbols] = 1.0
        return cls(symbols=symbols, one_hot=one_hot)

    def __len__(self):
        return self.symbols.size


# Named substreams guarantee that adding draws to one consumer never shifts
# the sequences seen by the others.
_STREAM_IDS = {
    "init": 1,
    "data": 2,
    "channel": 3,
    "noise": 4,
    "calibration": 5,
    "eval": 6,
}


@dataclass(frozen=True)
class RngSeed:
    """Root seed with named, independently derived random streams."""

    seed: int

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must be a non-negative 64-bit integer")

    def stream(self, label: str, *indices: int) -> np.random.Generator:
        """Deterministic generator for a named stream, optionally indexed.

        Unknown labels hash to a stable id so callers may introduce
        ad-hoc streams without colliding with the named ones.
        """
        stream_id = _STREAM_IDS.get(label)
        if stream_id is None:
            stream_id = zlib.crc32(label.encode()) + len(_STREAM_IDS)
        if any(i < 0 for i in indices):
            raise ValueError("stream indices must be non-negative")
        return np.random.default_rng([int(self.seed), stream_id, *indices])
