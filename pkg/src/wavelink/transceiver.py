"""End-to-end forward pipeline: symbol in, detected symbol out.

The pipeline is symbol -> modulated aperture field -> transmit stack ->
channel -> receive stack -> per-subarray powers -> decision. All stages
are batched over a leading sample dimension.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelRealization, ChannelSpec, apply_channel, snr_to_sigma2
from .core import Geometry, LayerStack, ModulationScheme, SymbolBatch, to_flat
from .diffraction import Propagator, cascade

NORMALIZATIONS = ("mean", "none")


@dataclass
class Transceiver:
    """Geometry, modulation, both phase stacks, and the propagation engine."""

    geometry: Geometry
    scheme: ModulationScheme
    tx_stack: LayerStack
    rx_stack: LayerStack
    propagator: Propagator
    normalization: str = "mean"

    def __post_init__(self):
        if self.tx_stack.phases.shape != (self.geometry.l_tx, *self.geometry.grid_shape):
            raise ValueError("tx_stack shape does not match geometry")
        if self.rx_stack.phases.shape != (self.geometry.l_rx, *self.geometry.grid_shape):
            raise ValueError("rx_stack shape does not match geometry")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        self.scheme.subarray_shape(self.geometry)  # divisibility check


def modulate(symbols, scheme: ModulationScheme, geometry: Geometry) -> np.ndarray:
    """Aperture fields for a batch of symbols.

    Each symbol activates one contiguous subarray block whose elements all
    radiate the same carrier amplitude ``1/sqrt(n_sub)``, so every
    modulated field has unit total power.
    """
    batch = SymbolBatch.from_symbols(symbols, scheme)
    n_sub_x, n_sub_z = scheme.subarray_shape(geometry)
    amp = 1.0 / np.sqrt(n_sub_x * n_sub_z)
    fields = np.zeros((len(batch), geometry.n_x, geometry.n_z), dtype=np.complex128)
    for i, m in enumerate(batch.symbols):
        sx, sz = scheme.block_slices(int(m), geometry)
        fields[i, sx, sz] = amp
    return fields


@dataclass
class DetectionResult:
    """Per-subarray powers, softmax probabilities, and argmax decisions."""

    powers: np.ndarray
    probabilities: np.ndarray
    decisions: np.ndarray


def subarray_powers(fields: np.ndarray, scheme: ModulationScheme,
                    geometry: Geometry) -> np.ndarray:
    """Total received power per subarray, ``(..., M)`` in symbol order."""
    n_sub_x, n_sub_z = scheme.subarray_shape(geometry)
    lead = fields.shape[:-2]
    blocks = np.abs(fields.reshape(lead + (scheme.m_x, n_sub_x, scheme.m_z, n_sub_z))) ** 2
    per_block = blocks.sum(axis=(-3, -1))  # (..., m_x, m_z)
    # symbol m maps to block (m % m_x, m // m_x)
    return np.swapaxes(per_block, -2, -1).reshape(lead + (scheme.order,))


def _softmax(values: np.ndarray) -> np.ndarray:
    shifted = values - values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def normalize_powers(powers: np.ndarray, normalization: str) -> np.ndarray:
    """Detector power conditioning applied before the softmax.

    ``mean`` divides each sample's powers by their own mean so the softmax
    operates on a scale-free vector; the argmax decision is unaffected.
    Samples with identically zero power pass through unchanged.
    """
    if normalization == "none":
        return powers
    if normalization != "mean":
        raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
    mean = powers.mean(axis=-1, keepdims=True)
    safe = np.where(mean > 0.0, mean, 1.0)
    return powers / safe


def detect(fields: np.ndarray, scheme: ModulationScheme, geometry: Geometry,
           normalization: str = "mean") -> DetectionResult:
    """Power detection over subarrays with softmax probabilities.

    Ties in the argmax resolve to the lowest symbol index.
    """
    if fields.shape[-2:] != geometry.grid_shape:
        raise ValueError("field shape does not match geometry")
    powers = subarray_powers(fields, scheme, geometry)
    probabilities = _softmax(normalize_powers(powers, normalization))
    decisions = np.argmax(powers, axis=-1)
    return DetectionResult(powers=powers, probabilities=probabilities,
                           decisions=decisions)


@dataclass
class ForwardFields:
    """Per-plane fields retained by a forward pass, in pipeline order."""

    modulator: np.ndarray
    tx_planes: list
    received: np.ndarray
    rx_planes: list

    def planes(self) -> list:
        """All plane fields: modulator, transmit layers, the received
        aperture field, intermediate receive layers, detector plane."""
        return [self.modulator, *self.tx_planes, self.received, *self.rx_planes]


def forward(tx: Transceiver, symbols, ch: ChannelRealization,
            rng: np.random.Generator = None, retain: bool = False):
    """Run symbols through the full link.

    Returns a :class:`DetectionResult`; with ``retain=True`` also returns
    the :class:`ForwardFields` for visualization or gradient work. Noise is
    drawn from ``rng`` at the channel's ``sigma2``.
    """
    fields = modulate(symbols, tx.scheme, tx.geometry)
    if retain:
        radiated, tx_planes = cascade(fields, tx.tx_stack, tx.propagator, "tx",
                                      collect=True)
    else:
        radiated = cascade(fields, tx.tx_stack, tx.propagator, "tx")
    received = apply_channel(radiated, ch, rng)
    if retain:
        out, rx_planes = cascade(received, tx.rx_stack, tx.propagator, "rx",
                                 collect=True)
    else:
        out = cascade(received, tx.rx_stack, tx.propagator, "rx")
    result = detect(out, tx.scheme, tx.geometry, tx.normalization)
    if retain:
        return result, ForwardFields(modulator=fields, tx_planes=tx_planes,
                                     received=received, rx_planes=rx_planes)
    return result


def dump_fields(intermediates: ForwardFields) -> list:
    """Magnitude grids of every plane for one retained sample.

    Expects batch size 1 (visualization runs one symbol at a time) and
    returns ``1 + l_tx + l_rx + 1`` non-negative magnitude grids.
    """
    if intermediates is None:
        raise ValueError("forward pass was run without retention")
    grids = []
    for plane in intermediates.planes():
        mag = np.abs(plane[0] if plane.ndim == 3 else plane)
        if not np.all(np.isfinite(mag)):
            raise ValueError("non-finite magnitudes in retained plane")
        grids.append(mag)
    return grids


def radiated_power(tx: Transceiver, rng: np.random.Generator,
                   batch: int = 512) -> float:
    """Mean per-element power of the field entering the channel.

    Averaged over a calibration batch of random symbols. This is the
    reference level SNR targets are defined against: the channel is
    normalized to unit average per-path gain, so referencing noise to the
    radiated per-element power keeps the array gain of large apertures
    visible in the link budget.
    """
    if batch < 1:
        raise ValueError("calibration batch must be >= 1")
    symbols = rng.integers(0, tx.scheme.order, size=batch)
    fields = modulate(symbols, tx.scheme, tx.geometry)
    radiated = cascade(fields, tx.tx_stack, tx.propagator, "tx")
    return float(np.mean(np.abs(radiated) ** 2))


def calibrate_noise(snr_db: float, tx: Transceiver, rng: np.random.Generator,
                    batch: int = 512) -> float:
    """Noise variance realizing ``snr_db`` against the radiated power."""
    return snr_to_sigma2(radiated_power(tx, rng, batch), snr_db)
