"""Free-space propagation between parallel planes.

Two interchangeable engines compute the same linear hop operator:

* ``rsf-dense`` evaluates the exact element-to-element diffraction sum with
  a dense coefficient matrix, O(N^2) per hop. It is the reference oracle.
* ``asm-fft`` decomposes the field into plane waves with a zero-padded 2-D
  FFT, multiplies by the sampled free-space transfer function, and
  transforms back, O(P log P) per hop.

Both are exact linear operators; the discrete gap between them at a given
geometry is measured by the test suite, not assumed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Geometry, LayerStack, to_flat, to_grid


def rsf_coefficient(offset_x, offset_z, geometry: Geometry, distance=None):
    """Hop coefficient for a source/destination cell offset.

    Implements the scalar diffraction kernel sampled at cell centers and
    weighted by the element area: obliquity times the near-field and
    radiating terms times the spherical phase. Accepts scalar or array
    offsets (in cells, signed).
    """
    y = geometry.d_layer if distance is None else float(distance)
    if y <= 0.0:
        raise ValueError("propagation distance must be positive")
    lam = geometry.wavelength
    r = np.sqrt(
        y**2
        + (np.asarray(offset_x) * geometry.d_x) ** 2
        + (np.asarray(offset_z) * geometry.d_z) ** 2
    )
    amp = (geometry.element_area * y / r**2) * (1.0 / (2.0 * np.pi * r) + 1.0 / (1j * lam))
    return amp * np.exp(1j * 2.0 * np.pi * r / lam)


@dataclass(frozen=True)
class RsfKernel:
    """Dense hop matrix ``w[dst, src]`` over flat-indexed cells."""

    geometry: Geometry
    distance: float
    matrix: np.ndarray


def rsf_kernel_matrix(geometry: Geometry, distance=None) -> RsfKernel:
    """Build the dense N x N coefficient table for one hop."""
    y = geometry.d_layer if distance is None else float(distance)
    cells = np.arange(geometry.n)
    cx = cells % geometry.n_x
    cz = cells // geometry.n_x
    # w[dst, src] depends only on the signed offset src - dst
    dx = cx[None, :] - cx[:, None]
    dz = cz[None, :] - cz[:, None]
    return RsfKernel(geometry, y, rsf_coefficient(dx, dz, geometry, y))


def propagate_rsf(field: np.ndarray, geometry: Geometry, distance=None,
                  kernel: RsfKernel = None) -> np.ndarray:
    """Exact dense-summation hop. ``field`` is ``(..., n_x, n_z)``."""
    if field.shape[-2:] != geometry.grid_shape:
        raise ValueError(
            f"field shape {field.shape[-2:]} does not match geometry "
            f"{geometry.grid_shape}"
        )
    if kernel is None:
        kernel = rsf_kernel_matrix(geometry, distance)
    flat = to_flat(np.asarray(field, dtype=np.complex128))
    return to_grid(flat @ kernel.matrix.T, geometry)


@dataclass(frozen=True)
class AsmTransfer:
    """Sampled free-space transfer function on a zero-padded grid.

    ``grid`` holds the complex transfer samples in unshifted DFT order;
    ``propagating`` marks the samples inside the unit spatial-frequency
    disk, where the transfer has unit magnitude. Samples outside carry the
    real exponential decay of evanescent waves.
    """

    geometry: Geometry
    distance: float
    padding: float
    p_x: int
    p_z: int
    grid: np.ndarray
    propagating: np.ndarray


def build_asm_transfer(geometry: Geometry, distance=None, padding: float = 2.0) -> AsmTransfer:
    """Sample the transfer function on the padded frequency grid.

    Frequencies follow the signed DFT convention,
    ``f in {-P/2, ..., P/2 - 1} / (P * pitch)`` per axis. The evanescent
    branch is evaluated in real arithmetic so no NaN can leak from a
    complex square root.
    """
    if padding < 1.0:
        raise ValueError("padding factor must be >= 1")
    y = geometry.d_layer if distance is None else float(distance)
    if y <= 0.0:
        raise ValueError("propagation distance must be positive")
    p_x = int(np.ceil(padding * geometry.n_x))
    p_z = int(np.ceil(padding * geometry.n_z))
    lam = geometry.wavelength
    f_x = np.fft.fftfreq(p_x, d=geometry.d_x)
    f_z = np.fft.fftfreq(p_z, d=geometry.d_z)
    fx2 = (lam * f_x[:, None]) ** 2
    fz2 = (lam * f_z[None, :]) ** 2
    s2 = 1.0 - fx2 - fz2
    propagating = s2 >= 0.0
    k = geometry.wavenumber
    grid = np.empty((p_x, p_z), dtype=np.complex128)
    grid[propagating] = np.exp(1j * k * np.sqrt(s2[propagating]) * y)
    gamma = k * np.sqrt(-s2[~propagating])
    grid[~propagating] = np.exp(-gamma * y)
    return AsmTransfer(geometry, y, float(padding), p_x, p_z, grid, propagating)


def _asm_run(field: np.ndarray, transfer: AsmTransfer, grid: np.ndarray) -> np.ndarray:
    n_x, n_z = field.shape[-2:]
    if n_x > transfer.p_x or n_z > transfer.p_z:
        raise ValueError("field does not fit within the padded transfer grid")
    sx = (transfer.p_x - n_x) // 2
    sz = (transfer.p_z - n_z) // 2
    padded = np.zeros(field.shape[:-2] + (transfer.p_x, transfer.p_z), dtype=np.complex128)
    padded[..., sx:sx + n_x, sz:sz + n_z] = field
    spectrum = np.fft.fft2(padded, axes=(-2, -1))
    out = np.fft.ifft2(spectrum * grid, axes=(-2, -1))
    return out[..., sx:sx + n_x, sz:sz + n_z]


def propagate_asm(field: np.ndarray, transfer: AsmTransfer) -> np.ndarray:
    """FFT hop: embed centrally, transform, filter, crop the same window."""
    return _asm_run(np.asarray(field, dtype=np.complex128), transfer, transfer.grid)


class Propagator:
    """One reusable free-space hop, applicable forward or adjoint.

    The adjoint applies the conjugate transpose of the hop operator; it is
    what reverse-mode gradient accumulation propagates through the stacks.
    For the FFT engine this reduces to the same pipeline with the
    conjugated transfer grid.
    """

    ENGINES = ("asm-fft", "rsf-dense")

    def __init__(self, geometry: Geometry, distance=None, engine: str = "asm-fft",
                 padding: float = 2.0):
        if engine not in self.ENGINES:
            raise ValueError(f"unknown engine {engine!r}; expected one of {self.ENGINES}")
        self.geometry = geometry
        self.distance = geometry.d_layer if distance is None else float(distance)
        self.engine = engine
        self.padding = float(padding)
        if engine == "asm-fft":
            self.transfer = build_asm_transfer(geometry, self.distance, padding)
            self.kernel = None
        else:
            self.kernel = rsf_kernel_matrix(geometry, self.distance)
            self.transfer = None

    def apply(self, field: np.ndarray) -> np.ndarray:
        if field.shape[-2:] != self.geometry.grid_shape:
            raise ValueError(
                f"field shape {field.shape[-2:]} does not match geometry "
                f"{self.geometry.grid_shape}"
            )
        if self.engine == "asm-fft":
            return propagate_asm(field, self.transfer)
        flat = to_flat(np.asarray(field, dtype=np.complex128))
        return to_grid(flat @ self.kernel.matrix.T, self.geometry)

    def apply_adjoint(self, field: np.ndarray) -> np.ndarray:
        if field.shape[-2:] != self.geometry.grid_shape:
            raise ValueError(
                f"field shape {field.shape[-2:]} does not match geometry "
                f"{self.geometry.grid_shape}"
            )
        if self.engine == "asm-fft":
            return _asm_run(np.asarray(field, dtype=np.complex128),
                            self.transfer, np.conj(self.transfer.grid))
        flat = to_flat(np.asarray(field, dtype=np.complex128))
        return to_grid(flat @ np.conj(self.kernel.matrix), self.geometry)


def cascade(field: np.ndarray, stack: LayerStack, propagator: Propagator,
            direction: str, collect: bool = False):
    """Run a field through one phase stack.

    Transmit-side hops propagate first and apply the layer phase second;
    receive-side hops apply the phase first and propagate second. Layers
    are taken in wave-encounter order. With ``collect=True`` the per-hop
    output fields are returned alongside the final field.
    """
    if direction not in ("tx", "rx"):
        raise ValueError("direction must be 'tx' or 'rx'")
    coeffs = stack.coefficients()
    out = np.asarray(field, dtype=np.complex128)
    planes = []
    for coeff in coeffs:
        if direction == "tx":
            out = coeff * propagator.apply(out)
        else:
            out = propagator.apply(coeff * out)
        if collect:
            planes.append(out)
    if collect:
        return out, planes
    return out


def passband_slice(transfer: AsmTransfer):
    """The f_z = 0 axis of the transfer magnitude, in centered order.

    Returns ``(indices, magnitudes)`` where ``indices`` are the signed
    frequency bin numbers along x. On this axis the magnitude is 1 inside
    the passband and decays exponentially with distance outside it.
    """
    mags = np.abs(transfer.grid[:, 0])
    indices = np.rint(np.fft.fftfreq(transfer.p_x) * transfer.p_x).astype(int)
    return np.fft.fftshift(indices), np.fft.fftshift(mags)
