"""Feedback codec networks and their training loops.

Two variants share one architecture family:

* ``CsiQ``  - compresses the full complex CSI through real/imaginary planes.
* ``DualQ`` - compresses magnitudes only; the decoder additionally sees the
  uplink magnitude matrix as side information (phases travel separately
  through :mod:`csiq.phaseq`).

The encoder is a 3x3 conv plus a fully-connected compression to M values;
the decoder decompresses with a fully-connected layer and refines through
two residual blocks of three 3x3 convs (8/16/2 channels).  Between them
sits the per-element learnable quantizer from :mod:`csiq.quantizers`,
trained end to end through its soft-rounding surrogate.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import gradflow as gf
from . import quantizers as qz
from .channelgen import CsiDataset, NormStats, denormalize, normalize, normalize_dataset
from .harness.metrics import MetricResult, nmse

CSIQ = "CsiQ"
DUALQ = "DualQ"
VARIANTS = (CSIQ, DUALQ)

MODE_JOINT = "joint"
MODE_RETRAIN_DECODER = "retrain_decoder_only"
MODE_BASELINE = "no_quant_baseline"
TRAIN_MODES = (MODE_JOINT, MODE_RETRAIN_DECODER, MODE_BASELINE)

LEAKY_SLOPE = 0.3
_RESIDUAL_WIDTHS = (8, 16, 2)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; usually the learning rate or the rounding
    sharpness is too aggressive for the current scale."""


@dataclass
class RoundingSchedule:
    """Sharpness annealing for the soft quantizer: start gentle, steepen."""

    r0: float = 25.0
    growth: float = 1.5
    every: int = 50
    cap: float = 200.0

    def value(self, epoch: int) -> float:
        return min(self.r0 * self.growth ** (epoch // self.every), self.cap)


@dataclass
class TrainConfig:
    variant: str = CSIQ
    m: int = 32
    bits: int = 5
    epochs: int = 200
    batch_size: int = 50
    learning_rate: float = 0.001
    lambda_quan: float = 1e-4
    reg_kind: str = "l1"
    r_schedule: RoundingSchedule = field(default_factory=RoundingSchedule)
    seed: int = 0
    mode: str = MODE_JOINT
    rd_quantizer: str = "uq"  # quantizer for retrain_decoder_only forward

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lambda_quan < 0:
            raise ValueError("lambda_quan must be >= 0")
        if self.bits < 1:
            raise ValueError("bits must be >= 1")


@dataclass
class PlaneSet:
    """Normalized network inputs plus the raw matrices the metrics compare to."""

    variant: str
    inputs: np.ndarray  # (n, qf, nb, c) normalized, channels last
    side: np.ndarray | None  # (n, qf, nb, 1) normalized uplink magnitude (DualQ)
    stats: NormStats
    originals: np.ndarray  # (n, qf, nb) complex (CsiQ) or magnitude (DualQ)

    def __len__(self) -> int:
        return self.inputs.shape[0]


def prepare_planes(dataset: CsiDataset, variant: str, stats: NormStats | None = None) -> PlaneSet:
    """Split a CSI dataset into network planes and normalize into [0, 1].

    Pass the training set's ``stats`` when preparing evaluation data so both
    sides share one affine map.
    """
    if variant == CSIQ:
        planes = np.stack([dataset.downlink.real, dataset.downlink.imag], axis=-1)
        if stats is None:
            planes, stats = normalize_dataset(planes)
        else:
            planes = normalize(planes, stats)
        return PlaneSet(CSIQ, planes, None, stats, dataset.downlink.copy())
    if variant == DUALQ:
        if dataset.uplink is None:
            raise ValueError("DualQ needs a dataset with uplink samples")
        mag_dl = np.abs(dataset.downlink)
        mag_ul = np.abs(dataset.uplink)
        if stats is None:
            stats = NormStats(float(min(mag_dl.min(), mag_ul.min())),
                              float(max(mag_dl.max(), mag_ul.max())))
        return PlaneSet(DUALQ, normalize(mag_dl, stats)[..., None],
                        normalize(mag_ul, stats)[..., None], stats, mag_dl)
    raise ValueError(f"unknown variant {variant!r}")


# ---------------------------------------------------------------------------
# model


class CodecModel:
    """Parameter container for one trained codec (see module docstring)."""

    def __init__(self, variant: str, m: int, qf: int, nb: int, bits: int,
                 sharpness: float = 200.0):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.variant = variant
        self.m = m
        self.qf = qf
        self.nb = nb
        self.bits = bits
        self.sharpness = sharpness
        self.tape = gf.Tape()
        self.buffers: dict[str, np.ndarray] = {}
        self.norm_stats: NormStats | None = None
        self.loss_history: list[float] = []

    @property
    def params(self) -> dict[str, gf.Tensor]:
        return self.tape.parameters

    @property
    def in_channels(self) -> int:
        return 2 if self.variant == CSIQ else 1

    def clone(self) -> "CodecModel":
        other = CodecModel(self.variant, self.m, self.qf, self.nb, self.bits, self.sharpness)
        for name, p in self.params.items():
            other.tape.parameter(name, p.data.copy())
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        other.norm_stats = copy.copy(self.norm_stats)
        other.loss_history = list(self.loss_history)
        return other

    def set_trainable(self, predicate) -> None:
        for name, p in self.params.items():
            p.requires_grad = bool(predicate(name))

    def quantizer_params(self, sharpness: float | None = None) -> qz.QuantizerParams:
        w = np.logaddexp(0.0, self.params["quant.omega"].data)
        v = self.params["quant.v"].data
        return qz.QuantizerParams(w, v, self.bits, sharpness or self.sharpness)

    def codeword_range(self) -> tuple[float, float]:
        if "codeword.lo" not in self.buffers:
            raise ValueError("quantizer not calibrated: no codeword range recorded")
        return float(self.buffers["codeword.lo"].min()), float(self.buffers["codeword.hi"].max())


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build_model(variant: str, m: int, qf: int, nb: int, bits: int, seed: int = 0) -> CodecModel:
    """Fresh model with Glorot-uniform weights and an uncalibrated quantizer."""
    model = CodecModel(variant, m, qf, nb, bits)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0DEC]))
    p = model.tape.parameter
    c_in = model.in_channels
    flat = 2 * qf * nb  # encoder conv always widens to 2 channels
    p("enc.conv.kernels", _glorot(rng, (2, c_in, 3, 3), 9 * c_in, 9 * 2))
    p("enc.conv.bias", np.zeros(2))
    p("enc.fc.weight", _glorot(rng, (m, flat), flat, m))
    p("enc.fc.bias", np.zeros(m))
    p("quant.omega", np.full(m, np.log(np.expm1(1.0))))  # softplus(omega) == 1
    p("quant.v", np.ones(m))
    dec_flat = flat if variant == CSIQ else qf * nb
    p("dec.fc.weight", _glorot(rng, (dec_flat, m), m, dec_flat))
    p("dec.fc.bias", np.zeros(dec_flat))
    for block in (1, 2):
        widths = (2,) + _RESIDUAL_WIDTHS
        for layer in (1, 2, 3):
            ci, co = widths[layer - 1], widths[layer]
            p(f"dec.block{block}.conv{layer}.kernels", _glorot(rng, (co, ci, 3, 3), 9 * ci, 9 * co))
            p(f"dec.block{block}.conv{layer}.bias", np.zeros(co))
    if variant == DUALQ:
        p("dec.out.kernels", _glorot(rng, (1, 2, 3, 3), 18, 9))
        p("dec.out.bias", np.zeros(1))
    return model


def _softplus_inverse(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    small = np.log(np.expm1(np.minimum(w, 30.0)))
    return np.where(w > 30.0, w, small)


def _respan_quantizer(model: CodecModel, bits: int) -> None:
    """Point w at the recorded per-element codeword ranges for ``bits``; v = 1/w."""
    if "codeword.lo" not in model.buffers:
        raise ValueError("no recorded codeword range; calibrate or train the model first")
    model.bits = bits
    lo, hi = model.buffers["codeword.lo"], model.buffers["codeword.hi"]
    amax = np.maximum(np.maximum(np.abs(lo), np.abs(hi)), 1e-6)
    half = 1 << (bits - 1)
    w = (half - 0.5) / amax * (1.0 - 1e-9)
    model.params["quant.omega"].data = _softplus_inverse(w)
    model.params["quant.v"].data = 1.0 / w


def calibrate_quantizer(model: CodecModel, inputs: np.ndarray, bits: int | None = None) -> None:
    """Record per-element codeword bounds from data and span the quantizer on them."""
    s = encode_batched(model, inputs)
    model.buffers["codeword.lo"] = s.min(axis=0)
    model.buffers["codeword.hi"] = s.max(axis=0)
    _respan_quantizer(model, bits if bits is not None else model.bits)


def initialize_from(base: CodecModel, bits: int) -> CodecModel:
    """New model for joint training: weights copied, quantizer re-spanned at ``bits``.

    Requires a calibrated source (codeword ranges recorded after its
    training), which keeps initial hard-quantization clipping negligible.
    """
    model = base.clone()
    _respan_quantizer(model, bits)
    model.loss_history = []
    return model


# ---------------------------------------------------------------------------
# forward passes


def _residual_block(y, model: CodecModel, block: int):
    p = model.params
    z = gf.leaky_relu(gf.conv3x3_nhwc(y, p[f"dec.block{block}.conv1.kernels"],
                                      p[f"dec.block{block}.conv1.bias"]), LEAKY_SLOPE)
    z = gf.leaky_relu(gf.conv3x3_nhwc(z, p[f"dec.block{block}.conv2.kernels"],
                                      p[f"dec.block{block}.conv2.bias"]), LEAKY_SLOPE)
    z = gf.conv3x3_nhwc(z, p[f"dec.block{block}.conv3.kernels"],
                        p[f"dec.block{block}.conv3.bias"])
    return gf.add(y, z)


def encoder_forward(model: CodecModel, x: np.ndarray) -> gf.Tensor:
    """Normalized input planes (n, qf, nb, c) -> codewords (n, m).

    Inputs are standardized with the training-set mean/scale recorded on
    the model; normalized CSI planes cluster tightly (delay-domain samples
    are sparse), and re-spreading them keeps early gradients healthy.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != (model.qf, model.nb, model.in_channels):
        raise gf.ShapeError(
            f"expected input (n, {model.qf}, {model.nb}, {model.in_channels}), got {x.shape}")
    mean = model.buffers.get("input.mean")
    std = model.buffers.get("input.std")
    if mean is not None:
        x = (x - mean) / std
    p = model.params
    t = gf.Tensor(x)
    h = gf.leaky_relu(gf.conv3x3_nhwc(t, p["enc.conv.kernels"], p["enc.conv.bias"]), LEAKY_SLOPE)
    flat = gf.reshape(h, (x.shape[0], 2 * model.qf * model.nb))
    return gf.dense(flat, p["enc.fc.weight"], p["enc.fc.bias"])


def decoder_forward(model: CodecModel, s_hat, side=None) -> gf.Tensor:
    """Quantized codewords (n, m) [+ side info for DualQ] -> output planes."""
    s_hat = s_hat if isinstance(s_hat, gf.Tensor) else gf.Tensor(s_hat)
    n = s_hat.data.shape[0]
    if s_hat.data.shape != (n, model.m):
        raise gf.ShapeError(f"expected codewords (n, {model.m}), got {s_hat.data.shape}")
    if model.variant == CSIQ and side is not None:
        raise ValueError("CsiQ decoder takes no side information")
    if model.variant == DUALQ:
        if side is None:
            raise ValueError("DualQ decoder requires the uplink magnitude planes")
        side = side if isinstance(side, gf.Tensor) else gf.Tensor(side)
        if side.data.shape != (n, model.qf, model.nb, 1):
            raise gf.ShapeError(
                f"side info must be (n, {model.qf}, {model.nb}, 1), got {side.data.shape}")
    p = model.params
    y = gf.dense(s_hat, p["dec.fc.weight"], p["dec.fc.bias"])
    if model.variant == CSIQ:
        y = gf.reshape(y, (n, model.qf, model.nb, 2))
    else:
        y = gf.reshape(y, (n, model.qf, model.nb, 1))
        y = gf.concat([y, side], axis=3)
    y = _residual_block(y, model, 1)
    y = _residual_block(y, model, 2)
    if model.variant == DUALQ:
        y = gf.conv3x3_nhwc(y, p["dec.out.kernels"], p["dec.out.bias"])
    return gf.sigmoid(y)


def encode_csi(planes: np.ndarray, model: CodecModel) -> np.ndarray:
    """Public encode: channels-first planes (n, c, qf, nb) -> codewords (n, m)."""
    planes = np.asarray(planes, dtype=np.float64)
    single = planes.ndim == 3
    if single:
        planes = planes[None]
    with gf.no_grad():
        s = encoder_forward(model, planes.transpose(0, 2, 3, 1)).data
    return s[0] if single else s


def decode_csi(s_hat: np.ndarray, model: CodecModel, side_info: np.ndarray | None = None) -> np.ndarray:
    """Public decode: codewords -> channels-first planes (n, c, qf, nb)."""
    s_hat = np.asarray(s_hat, dtype=np.float64)
    single = s_hat.ndim == 1
    if single:
        s_hat = s_hat[None]
    side = None
    if side_info is not None:
        side_info = np.asarray(side_info, dtype=np.float64)
        if single and side_info.ndim == 3:
            side_info = side_info[None]
        side = side_info.transpose(0, 2, 3, 1)
    with gf.no_grad():
        out = decoder_forward(model, s_hat, side).data
    out = out.transpose(0, 3, 1, 2)
    return out[0] if single else out


def encode_batched(model: CodecModel, inputs: np.ndarray, batch: int = 256) -> np.ndarray:
    """Codewords for a full (n, qf, nb, c) set, evaluated without a graph."""
    chunks = []
    with gf.no_grad():
        for start in range(0, inputs.shape[0], batch):
            chunks.append(encoder_forward(model, inputs[start:start + batch]).data)
    return np.concatenate(chunks, axis=0)


def decode_batched(model: CodecModel, s_hat: np.ndarray, side: np.ndarray | None,
                   batch: int = 256) -> np.ndarray:
    chunks = []
    with gf.no_grad():
        for start in range(0, s_hat.shape[0], batch):
            side_chunk = None if side is None else side[start:start + batch]
            chunks.append(decoder_forward(model, s_hat[start:start + batch], side_chunk).data)
    return np.concatenate(chunks, axis=0)


# ---------------------------------------------------------------------------
# codeword quantization paths (evaluation)


def quantize_codewords(model: CodecModel, s: np.ndarray, kind: str = "hard",
                       bits: int | None = None, bits_eff: int | None = None,
                       sharpness: float | None = None) -> np.ndarray:
    """Apply one of the quantizer families to raw codewords.

    Kinds: ``float`` (bypass), ``hard`` (learned quantizer, integer path),
    ``soft`` (learned quantizer's training surrogate), ``uq`` (uniform over
    the recorded global codeword range), ``mulaw`` (companded uniform over
    the same range), ``truncated`` (learned indices with the top ``bits_eff``
    bits kept).
    """
    if kind == "float":
        return s.copy()
    if kind in ("hard", "soft", "truncated"):
        params = model.quantizer_params(sharpness)
        if kind == "soft":
            return qz.learned_forward(s, params, "train") * params.v
        k = qz.learned_forward(s, params, "infer")
        if kind == "hard":
            return qz.learned_inverse(k, params)
        if bits_eff is None:
            raise ValueError("truncated quantization needs bits_eff")
        k2 = qz.truncate_index(k, params.bits, bits_eff)
        return qz.truncated_inverse(k2, params, bits_eff)
    lo, hi = model.codeword_range()
    bits = bits if bits is not None else model.bits
    if kind == "uq":
        return qz.uniform_quantize(s, lo, hi, bits)
    if kind == "mulaw":
        return qz.mu_law_quantize(s, max(abs(lo), abs(hi)), bits)
    raise ValueError(f"unknown quantization kind {kind!r}")


def reconstruct_matrices(model: CodecModel, outputs: np.ndarray) -> np.ndarray:
    """Denormalize output planes back to complex or magnitude matrices."""
    planes = denormalize(outputs, model.norm_stats)
    if model.variant == CSIQ:
        return planes[..., 0] + 1j * planes[..., 1]
    return planes[..., 0]


def evaluate_model(model: CodecModel, data: PlaneSet, kind: str = "hard",
                   bits: int | None = None, bits_eff: int | None = None) -> MetricResult:
    """Held-out NMSE of the codec under a chosen codeword quantization."""
    if data.variant != model.variant:
        raise ValueError(f"dataset prepared for {data.variant}, model is {model.variant}")
    s = encode_batched(model, data.inputs)
    s_hat = quantize_codewords(model, s, kind, bits=bits, bits_eff=bits_eff)
    outputs = decode_batched(model, s_hat, data.side)
    return nmse(data.originals, reconstruct_matrices(model, outputs))


# ---------------------------------------------------------------------------
# training


def _forward_loss(model: CodecModel, x: np.ndarray, side, target: gf.Tensor,
                  cfg: TrainConfig, r: float, quantize: bool) -> gf.Tensor:
    s = encoder_forward(model, x)
    if quantize:
        w = gf.softplus(model.params["quant.omega"])
        z = gf.soft_round(gf.mul(s, w), model.bits, r)
        s_hat = gf.mul(z, model.params["quant.v"])
    else:
        s_hat = s
    out = decoder_forward(model, s_hat, side)
    loss = gf.mse(out, target)
    if quantize and cfg.lambda_quan > 0:
        if cfg.reg_kind != "l1":
            raise ValueError(f"training regularizer supports 'l1' only, got {cfg.reg_kind!r}")
        reg = gf.sum_all(gf.absolute(w))
        loss = gf.add(loss, gf.mul(reg, cfg.lambda_quan))
    return loss


def train(data: PlaneSet, cfg: TrainConfig, init_from: CodecModel | None = None) -> CodecModel:
    """Train a codec on prepared planes; returns a new model.

    Modes: ``no_quant_baseline`` skips the quantizer (and calibrates it at
    ``cfg.bits`` afterwards so the result supports post-hoc quantization),
    ``joint`` trains encoder + quantizer + decoder through the soft
    surrogate, ``retrain_decoder_only`` freezes the encoder and quantizer
    and fits the decoder to hard-quantized codewords.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    if data.variant != cfg.variant:
        raise ValueError(f"planes prepared for {data.variant}, config wants {cfg.variant}")
    qf, nb = data.inputs.shape[1], data.inputs.shape[2]
    if init_from is not None:
        if init_from.variant != cfg.variant or init_from.m != cfg.m:
            raise ValueError("init_from model variant/M does not match the config")
        model = init_from.clone()
        if model.bits != cfg.bits and "codeword.lo" in model.buffers:
            _respan_quantizer(model, cfg.bits)
        model.bits = cfg.bits
    else:
        model = build_model(cfg.variant, cfg.m, qf, nb, cfg.bits, seed=cfg.seed)
    model.norm_stats = data.stats

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A31]))
    n = len(data)
    state = gf.AdamState(learning_rate=cfg.learning_rate)

    if "input.mean" not in model.buffers:
        model.buffers["input.mean"] = np.asarray(data.inputs.mean())
        model.buffers["input.std"] = np.asarray(max(data.inputs.std(), 1e-9))

    joint = cfg.mode == MODE_JOINT
    if joint and "codeword.lo" not in model.buffers:
        calibrate_quantizer(model, data.inputs, cfg.bits)

    fixed_inputs = None
    if cfg.mode == MODE_RETRAIN_DECODER:
        if init_from is None:
            raise ValueError("retrain_decoder_only needs a trained model to start from")
        s = encode_batched(model, data.inputs)
        kind = {"uq": "uq", "mulaw": "mulaw", "learned": "hard"}[cfg.rd_quantizer]
        fixed_inputs = quantize_codewords(model, s, kind, bits=cfg.bits)
        model.set_trainable(lambda name: name.startswith("dec."))
    else:
        model.set_trainable(lambda name: True if joint else not name.startswith("quant."))

    trainable = [name for name, p in model.params.items() if p.requires_grad]
    model.loss_history = []
    for epoch in range(cfg.epochs):
        r = cfg.r_schedule.value(epoch)
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            side = None if data.side is None else gf.Tensor(data.side[idx])
            target = gf.Tensor(data.inputs[idx])
            if fixed_inputs is None:
                loss = _forward_loss(model, data.inputs[idx], side, target,
                                     cfg, r, quantize=joint)
            else:
                out = decoder_forward(model, gf.Tensor(fixed_inputs[idx]), side)
                loss = gf.mse(out, target)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}: lower learning_rate "
                    f"({cfg.learning_rate}) or soften the rounding schedule (r={r})")
            epoch_loss += value * idx.shape[0]
            grads = gf.backward(model.tape, loss)
            gf.adam_step(model.params, {k: grads[k] for k in trainable}, state)
        model.loss_history.append(epoch_loss / n)

    model.set_trainable(lambda name: True)
    if cfg.mode == MODE_BASELINE:
        calibrate_quantizer(model, data.inputs, cfg.bits)
    else:
        # Refresh the recorded codeword range for rate/NMSQE measurements.
        s = encode_batched(model, data.inputs)
        model.buffers["codeword.lo"] = s.min(axis=0)
        model.buffers["codeword.hi"] = s.max(axis=0)
    return model
