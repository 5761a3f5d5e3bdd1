"""Loss, analytic phase gradients, optimizers, and the training loop.

Gradients with respect to the real phase angles are accumulated in reverse
mode: the detector adjoint is propagated back through the receive stack,
the channel, and the transmit stack using the conjugate-transposed hop
operator. This keeps the backward pass at the same FFT complexity as the
forward pass; no dense layer-product matrices are ever materialized.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelSpec, draw_noise, snr_to_sigma2
from .core import Geometry, LayerStack, RngSeed, SymbolBatch, to_flat, to_grid
from .transceiver import Transceiver, modulate, normalize_powers, subarray_powers, _softmax

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-30

CHANNEL_REDRAWS = ("per-batch", "per-sample", "fixed")
OPTIMIZERS = ("adam", "sgd")
INIT_SCHEMES = ("uniform", "zero")


class TrainingDiverged(RuntimeError):
    """Raised when the loss turns non-finite; carries a diagnostic snapshot."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


@dataclass
class TrainConfig:
    batch_size: int = 32
    dataset_size: int = 3200
    epochs: int = 50
    learning_rate: float = 0.03
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    train_snr_db: float = -10.0
    batch_norm: bool = True
    channel_redraw: str = "per-batch"
    calibration_batch: int = 512
    freeze_tx: bool = False
    freeze_rx: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.dataset_size < 1:
            raise ValueError("dataset_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.channel_redraw not in CHANNEL_REDRAWS:
            raise ValueError(f"channel_redraw must be one of {CHANNEL_REDRAWS}")


def init_phases(layers: int, geometry: Geometry, rng: np.random.Generator,
                scheme: str = "uniform") -> LayerStack:
    """Fresh phase stack; ``uniform`` draws i.i.d. from (-pi, pi]."""
    shape = (layers, geometry.n_x, geometry.n_z)
    if scheme == "zero":
        return LayerStack(np.zeros(shape))
    if scheme == "uniform":
        return LayerStack(np.pi - rng.uniform(0.0, 2.0 * np.pi, size=shape))
    raise ValueError(f"init scheme must be one of {INIT_SCHEMES}")


def wrap_phase(phases: np.ndarray) -> np.ndarray:
    """Wrap angles into (-pi, pi]; the loss is 2-pi periodic so gradients
    are unaffected."""
    return np.angle(np.exp(1j * phases))


def batch_norm(fields: np.ndarray, mode: str = "train") -> np.ndarray:
    """Scale-only batch normalization over complex magnitudes.

    Train mode divides every field in the batch by the shared batch RMS
    magnitude; eval mode is the identity, matching hardware where no such
    stage exists at test time.
    """
    if mode == "eval":
        return fields
    if mode != "train":
        raise ValueError("mode must be 'train' or 'eval'")
    if fields.size == 0:
        raise ValueError("batch must be non-empty")
    normalized, _ = _bn_forward(fields)
    return normalized


def _bn_forward(fields: np.ndarray):
    scale = float(np.sqrt(np.mean(np.abs(fields) ** 2)))
    if scale == 0.0:
        logger.warning("batch norm skipped: all-zero batch at this layer")
        return fields, None
    return fields / scale, scale


def _bn_backward(out_adjoint: np.ndarray, pre_bn: np.ndarray, scale):
    # Exact adjoint of the shared-RMS division, including the coupling of
    # every element through the batch statistic.
    if scale is None:
        return out_adjoint
    inner = float(np.sum(np.real(np.conj(out_adjoint) * pre_bn)))
    return out_adjoint / scale - pre_bn * (inner / (scale**3 * pre_bn.size))


def ce_loss(batch: SymbolBatch, probabilities: np.ndarray) -> float:
    """Mean cross-entropy of the true-symbol probabilities."""
    loss, clamps = _ce_loss(batch.symbols, probabilities)
    if clamps:
        logger.warning("ce_loss clamped %d vanishing probabilities", clamps)
    return loss


def _ce_loss(symbols: np.ndarray, probabilities: np.ndarray):
    p_true = probabilities[np.arange(symbols.size), symbols]
    clamps = int(np.sum(p_true < PROB_FLOOR))
    return float(np.mean(-np.log(np.maximum(p_true, PROB_FLOOR)))), clamps


@dataclass
class GradientSet:
    """Per-layer gradients of the batch loss w.r.t. the phase angles."""

    tx: np.ndarray
    rx: np.ndarray


@dataclass
class BatchTrace:
    """Everything a backward pass needs from one batched forward pass."""

    symbols: np.ndarray
    one_hot: np.ndarray
    tx_hops: list          # per hop: (post-phase field, bn scale or None)
    rx_hops: list          # per hop: (post-phase, post-propagation, bn scale)
    channel: np.ndarray    # (n, n) shared or (batch, n, n) per sample
    output: np.ndarray     # detector-plane fields (batch, n_x, n_z)
    powers: np.ndarray
    probabilities: np.ndarray
    decisions: np.ndarray
    loss: float
    clamp_events: int


def _apply_channel_flat(flat: np.ndarray, channel: np.ndarray) -> np.ndarray:
    if channel.ndim == 2:
        return flat @ channel.T
    return np.einsum("bij,bj->bi", channel, flat)


def _apply_channel_adjoint_flat(flat: np.ndarray, channel: np.ndarray) -> np.ndarray:
    if channel.ndim == 2:
        return flat @ np.conj(channel)
    return np.einsum("bji,bj->bi", np.conj(channel), flat)


def forward_batch(tx: Transceiver, symbols, channel: np.ndarray,
                  noise: np.ndarray = None, use_batch_norm: bool = False) -> BatchTrace:
    """Training-grade forward pass retaining per-hop intermediates.

    ``channel`` is a flat-index matrix, either shared across the batch or
    one per sample; ``noise`` is a pre-drawn ``(batch, n)`` vector added at
    the receive aperture.
    """
    batch = SymbolBatch.from_symbols(symbols, tx.scheme)
    geometry = tx.geometry
    coeff_tx = tx.tx_stack.coefficients()
    coeff_rx = tx.rx_stack.coefficients()
    prop = tx.propagator

    u = modulate(batch.symbols, tx.scheme, geometry)
    tx_hops = []
    for coeff in coeff_tx:
        b = coeff * prop.apply(u)
        if use_batch_norm:
            u, scale = _bn_forward(b)
        else:
            u, scale = b, None
        tx_hops.append((b, scale))

    flat = _apply_channel_flat(to_flat(u), channel)
    if noise is not None:
        flat = flat + noise
    v = to_grid(flat, geometry)

    rx_hops = []
    for coeff in coeff_rx:
        b = coeff * v
        c = prop.apply(b)
        if use_batch_norm:
            v, scale = _bn_forward(c)
        else:
            v, scale = c, None
        rx_hops.append((b, c, scale))

    powers = subarray_powers(v, tx.scheme, geometry)
    probabilities = _softmax(normalize_powers(powers, tx.normalization))
    decisions = np.argmax(powers, axis=-1)
    loss, clamps = _ce_loss(batch.symbols, probabilities)
    return BatchTrace(
        symbols=batch.symbols, one_hot=batch.one_hot, tx_hops=tx_hops,
        rx_hops=rx_hops, channel=channel, output=v, powers=powers,
        probabilities=probabilities, decisions=decisions, loss=loss,
        clamp_events=clamps,
    )


def _power_adjoint(trace: BatchTrace, tx: Transceiver) -> np.ndarray:
    """d(loss)/d(power_m) per sample, including the detector normalization."""
    batch_size = trace.symbols.size
    dq = (trace.probabilities - trace.one_hot) / batch_size
    if tx.normalization == "none":
        return dq
    p = trace.powers
    mu = p.mean(axis=-1, keepdims=True)
    safe = np.where(mu > 0.0, mu, 1.0)
    order = p.shape[-1]
    return dq / safe - (dq * p).sum(axis=-1, keepdims=True) / (order * safe**2)


def _expand_over_blocks(per_symbol: np.ndarray, tx: Transceiver) -> np.ndarray:
    """Broadcast per-symbol values onto their subarray cells."""
    scheme, geometry = tx.scheme, tx.geometry
    n_sub_x, n_sub_z = scheme.subarray_shape(geometry)
    lead = per_symbol.shape[:-1]
    blocks = per_symbol.reshape(lead + (scheme.m_z, scheme.m_x)).swapaxes(-2, -1)
    return np.repeat(np.repeat(blocks, n_sub_x, axis=-2), n_sub_z, axis=-1)


def backward(trace: BatchTrace, tx: Transceiver, freeze_tx: bool = False,
             freeze_rx: bool = False) -> GradientSet:
    """Reverse-mode gradients of the batch-mean loss for both stacks."""
    geometry = tx.geometry
    prop = tx.propagator
    coeff_tx = tx.tx_stack.coefficients()
    coeff_rx = tx.rx_stack.coefficients()
    grads_tx = np.zeros_like(tx.tx_stack.phases)
    grads_rx = np.zeros_like(tx.rx_stack.phases)

    # Detector adjoint: d(loss)/d(conj(field)) = g_block * field.
    g = _power_adjoint(trace, tx)
    adj = _expand_over_blocks(g, tx) * trace.output

    for layer in range(len(trace.rx_hops) - 1, -1, -1):
        b, c, scale = trace.rx_hops[layer]
        adj = _bn_backward(adj, c, scale)
        b_adj = prop.apply_adjoint(adj)
        if not freeze_rx:
            grads_rx[layer] = np.sum(2.0 * np.real(1j * b * np.conj(b_adj)), axis=0)
        adj = np.conj(coeff_rx[layer]) * b_adj

    flat = _apply_channel_adjoint_flat(to_flat(adj), trace.channel)
    adj = to_grid(flat, geometry)

    for layer in range(len(trace.tx_hops) - 1, -1, -1):
        b, scale = trace.tx_hops[layer]
        b_adj = _bn_backward(adj, b, scale)
        if not freeze_tx:
            grads_tx[layer] = np.sum(2.0 * np.real(1j * b * np.conj(b_adj)), axis=0)
        if layer > 0:
            adj = prop.apply_adjoint(np.conj(coeff_tx[layer]) * b_adj)

    return GradientSet(tx=grads_tx, rx=grads_rx)


def sgd_step(stack: LayerStack, grads: np.ndarray, learning_rate: float) -> None:
    """Plain gradient step on the phase angles, wrapped into (-pi, pi]."""
    stack.phases = wrap_phase(stack.phases - learning_rate * grads)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def for_stack(cls, stack: LayerStack) -> "AdamState":
        return cls(m=np.zeros_like(stack.phases), v=np.zeros_like(stack.phases))


def adam_step(stack: LayerStack, grads: np.ndarray, state: AdamState,
              learning_rate: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """First/second-moment update with bias correction."""
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grads
    state.v = beta2 * state.v + (1.0 - beta2) * grads**2
    m_hat = state.m / (1.0 - beta1**state.step)
    v_hat = state.v / (1.0 - beta2**state.step)
    stack.phases = wrap_phase(
        stack.phases - learning_rate * m_hat / (np.sqrt(v_hat) + eps)
    )


@dataclass
class TrainReport:
    """Per-epoch history plus the calibration the run was performed at."""

    losses: list = field(default_factory=list)
    train_ser: list = field(default_factory=list)
    sigma2: float = 0.0
    radiated_power: float = 0.0
    clamp_events: int = 0

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def training_radiated_power(tx: Transceiver, rng: np.random.Generator,
                            batch: int = 512, use_batch_norm: bool = True) -> float:
    """Mean per-element radiated power of the training-mode pipeline.

    With batch norm active the final transmit hop pins this to one, so the
    calibration stays valid as the phases evolve.
    """
    symbols = rng.integers(0, tx.scheme.order, size=batch)
    u = modulate(symbols, tx.scheme, tx.geometry)
    for coeff in tx.tx_stack.coefficients():
        b = coeff * tx.propagator.apply(u)
        u = _bn_forward(b)[0] if use_batch_norm else b
    return float(np.mean(np.abs(u) ** 2))


def train(tx: Transceiver, config: TrainConfig, spec: ChannelSpec,
          seed: RngSeed) -> TrainReport:
    """Mini-batch training of both stacks against the channel distribution.

    Symbols are uniform i.i.d.; the channel is redrawn per batch (block
    fading) by default and noise per sample. The transceiver's stacks are
    updated in place.
    """
    report = TrainReport()
    data_rng = seed.stream("data")
    channel_rng = seed.stream("channel")
    noise_rng = seed.stream("noise")

    power = training_radiated_power(
        tx, seed.stream("calibration"), config.calibration_batch,
        use_batch_norm=config.batch_norm,
    )
    sigma2 = snr_to_sigma2(power, config.train_snr_db)
    report.sigma2 = sigma2
    report.radiated_power = power

    states = None
    if config.optimizer == "adam":
        states = (AdamState.for_stack(tx.tx_stack), AdamState.for_stack(tx.rx_stack))

    dataset = data_rng.integers(0, tx.scheme.order, size=config.dataset_size)
    fixed_channel = None
    if config.channel_redraw == "fixed":
        fixed_channel = spec.draw(tx.geometry, channel_rng).matrix

    for epoch in range(config.epochs):
        order = data_rng.permutation(config.dataset_size)
        epoch_losses = []
        epoch_errors = 0
        for start in range(0, config.dataset_size, config.batch_size):
            symbols = dataset[order[start:start + config.batch_size]]
            if config.channel_redraw == "per-sample":
                channel = np.stack([
                    spec.draw(tx.geometry, channel_rng).matrix
                    for _ in range(symbols.size)
                ])
            elif config.channel_redraw == "per-batch":
                channel = spec.draw(tx.geometry, channel_rng).matrix
            else:
                channel = fixed_channel
            noise = draw_noise(noise_rng, (symbols.size, tx.geometry.n), sigma2)

            trace = forward_batch(tx, symbols, channel, noise,
                                  use_batch_norm=config.batch_norm)
            if not np.isfinite(trace.loss):
                raise TrainingDiverged(
                    f"loss became non-finite at epoch {epoch}",
                    snapshot={"epoch": epoch, "batch_start": start,
                              "losses": report.losses},
                )
            grads = backward(trace, tx, config.freeze_tx, config.freeze_rx)
            if config.optimizer == "adam":
                adam_step(tx.tx_stack, grads.tx, states[0], config.learning_rate,
                          config.beta1, config.beta2, config.eps)
                adam_step(tx.rx_stack, grads.rx, states[1], config.learning_rate,
                          config.beta1, config.beta2, config.eps)
            else:
                sgd_step(tx.tx_stack, grads.tx, config.learning_rate)
                sgd_step(tx.rx_stack, grads.rx, config.learning_rate)

            epoch_losses.append(trace.loss)
            epoch_errors += int(np.sum(trace.decisions != symbols))
            report.clamp_events += trace.clamp_events

        report.losses.append(float(np.mean(epoch_losses)))
        report.train_ser.append(epoch_errors / config.dataset_size)
        logger.info("epoch %d: loss %.4f, train SER %.4f", epoch,
                    report.losses[-1], report.train_ser[-1])
    return report
