"""The multi-channel convolutional sliding-window detector.

Architecture, per input clip (3 x N, scaled to [0, 1]):

  * one channel per window width L_k: valid conv over the frame axis
    (u_1 kernels of shape 3 x L_k) -> batch norm -> ReLU -> second valid
    conv over the resulting (l_c x u_1) map (u_2 kernels spanning all u_1
    features, width w_k) -> batch norm -> ReLU -> per-kernel k-max
    pooling over positions;
  * one shared skip path: a (skip_rows x 3) matrix applied per frame ->
    batch norm -> ReLU -> per-row k-max pooling over positions;
  * channel blocks and the skip block are spliced into Z, dropout is
    applied to Z during training, a dense layer fuses Z into O (ReLU),
    and a final weight vector plus sigmoid yields the stego probability.

With the default sizes (widths 1/3/5, 128+64 kernels, 64 skip rows,
2-max conv pooling, 1-max skip pooling) the spliced vector has
3*(64*2) + 64 = 448 entries and O has 64.
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from .errors import (
    ArchMismatch,
    ClipTooShort,
    ConfigError,
    FormatError,
    IoError,
)
from .nn.layers import (
    BatchNormParams,
    ConvLayerParams,
    DenseParams,
    bn_backward,
    bn_forward_infer,
    bn_forward_train,
    conv_backward,
    conv_forward,
    dense,
    dense_backward,
    kmax_indices,
    relu,
    relu_backward,
    sigmoid,
)
from .nn.loss import CLAMP, bce_grad, bce_l2_loss, l2_norm_grad
from .streams import CodewordClip, NormalizedClip, normalize_matrix

CHECKPOINT_VERSION = 1

#: Reduced second-layer widths so ten-frame clips stay long enough to pool.
SHORT_CLIP_CONV2_WIDTHS = (3, 3, 3)

VARIANT_SETTINGS: dict[str, dict] = {
    "a": {},
    "b": {"skip_enabled": False},
    "c": {"conv_pool_k": 1},
    "d": {"conv_pool_k": 2, "skip_pool_k": 2},
    "e": {"conv_pool_k": 3, "skip_pool_k": 3},
    "f": {"conv1_enabled": False},
    "g": {"conv2_enabled": False},
    "h": {"extra_conv_layers": 1},
    "i": {"extra_conv_layers": 2},
    "j": {"window_widths": (1, 3), "conv2_widths": (3, 5)},
}

VARIANT_NOTES: dict[str, str] = {
    "a": "full model",
    "b": "skip connection removed",
    "c": "conv pooling reduced to plain max",
    "d": "2-max pooling on every path",
    "e": "3-max pooling on every path",
    "f": "first convolutional layer removed",
    "g": "second convolutional layer removed",
    "h": "three convolutional layers per channel",
    "i": "four convolutional layers per channel",
    "j": "two sliding-window channels",
}


@dataclass(frozen=True)
class ArchConfig:
    window_widths: tuple[int, ...] = (1, 3, 5)
    conv1_kernels: int = 128
    conv2_widths: tuple[int, ...] = (3, 5, 7)
    conv2_kernels: int = 64
    skip_rows: int = 64
    fused_dim: int = 64
    conv_pool_k: int = 2
    skip_pool_k: int = 1
    threshold: float = 0.5
    skip_enabled: bool = True
    conv1_enabled: bool = True
    conv2_enabled: bool = True
    extra_conv_layers: int = 0
    input_scaling: str = "unit"  # "unit" divides by (codebook size - 1); "raw" does not

    def __post_init__(self):
        object.__setattr__(self, "window_widths", tuple(int(w) for w in self.window_widths))
        object.__setattr__(self, "conv2_widths", tuple(int(w) for w in self.conv2_widths))
        if self.n_channels < 1:
            raise ConfigError("at least one sliding-window channel required")
        if min(self.window_widths) < 1:
            raise ConfigError("window widths must be >= 1")
        if self.conv2_enabled and len(self.conv2_widths) != self.n_channels:
            raise ConfigError("need one second-layer width per channel")
        if self.conv2_enabled and min(self.conv2_widths) < 1:
            raise ConfigError("second-layer widths must be >= 1")
        if min(self.conv1_kernels, self.conv2_kernels, self.fused_dim) < 1:
            raise ConfigError("kernel and feature counts must be >= 1")
        if self.skip_enabled and self.skip_rows < 1:
            raise ConfigError("skip_rows must be >= 1")
        if self.conv_pool_k < 1 or self.skip_pool_k < 1:
            raise ConfigError("pooling k must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie strictly inside (0, 1)")
        if not self.conv1_enabled and not self.conv2_enabled:
            raise ConfigError("each channel needs at least one convolutional layer")
        if self.extra_conv_layers < 0:
            raise ConfigError("extra_conv_layers must be >= 0")
        if self.extra_conv_layers and not self.conv2_enabled:
            raise ConfigError("extra conv layers stack on the second layer")
        if self.input_scaling not in ("unit", "raw"):
            raise ConfigError("input_scaling must be 'unit' or 'raw'")

    @property
    def n_channels(self) -> int:
        return len(self.window_widths)

    @property
    def channel_feature_count(self) -> int:
        """Kernel count of the last conv layer in a channel."""
        return self.conv2_kernels if self.conv2_enabled else self.conv1_kernels

    @property
    def channel_block_dim(self) -> int:
        return self.channel_feature_count * self.conv_pool_k

    @property
    def skip_block_dim(self) -> int:
        return self.skip_rows * self.skip_pool_k if self.skip_enabled else 0

    @property
    def fused_input_dim(self) -> int:
        """Length m of the spliced feature vector Z."""
        return self.n_channels * self.channel_block_dim + self.skip_block_dim

    def channel_conv_widths(self, ci: int) -> list[int]:
        widths = []
        if self.conv1_enabled:
            widths.append(self.window_widths[ci])
        if self.conv2_enabled:
            widths.append(self.conv2_widths[ci])
            widths.extend([self.conv2_widths[ci]] * self.extra_conv_layers)
        return widths

    @property
    def min_clip_frames(self) -> int:
        """Shortest N for which every pooling stage has k positions."""
        need = self.skip_pool_k if self.skip_enabled else 1
        for ci in range(self.n_channels):
            shrink = sum(w - 1 for w in self.channel_conv_widths(ci))
            need = max(need, shrink + self.conv_pool_k)
        return need

    @classmethod
    def variant(cls, name: str, **overrides) -> "ArchConfig":
        """Ablation presets: 'a' is the full model, 'b'..'j' the variants."""
        if name not in VARIANT_SETTINGS:
            raise ConfigError(f"unknown variant {name!r}; pick one of a..j")
        settings = dict(VARIANT_SETTINGS[name])
        settings.update(overrides)
        return cls(**settings)

    @classmethod
    def short_clip(cls, **overrides) -> "ArchConfig":
        return cls(conv2_widths=SHORT_CLIP_CONV2_WIDTHS, **overrides)

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_dict(cls, raw: dict) -> "ArchConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown arch config fields: {sorted(unknown)}")
        return cls(**raw)


def arch_config_hash(config: ArchConfig) -> str:
    blob = json.dumps(config.to_json_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class SkipParams:
    matrix: np.ndarray  # (skip_rows, 3)
    bias: np.ndarray  # (skip_rows,)


@dataclass
class ChannelParams:
    conv1: ConvLayerParams | None
    bn1: BatchNormParams | None
    conv2: ConvLayerParams | None
    bn2: BatchNormParams | None
    extras: list[tuple[ConvLayerParams, BatchNormParams]] = field(default_factory=list)


@dataclass
class CswModel:
    config: ArchConfig
    channels: list[ChannelParams]
    skip: SkipParams | None
    skip_bn: BatchNormParams | None
    fusion: DenseParams
    detector: DenseParams
    dtype: np.dtype
    seed: int

    @property
    def min_clip_frames(self) -> int:
        return self.config.min_clip_frames

    def channel_layers(self, ci: int):
        """(name, conv, bn) triples in forward order for channel ci."""
        ch = self.channels[ci]
        out = []
        if ch.conv1 is not None:
            out.append((f"ch{ci}.conv1", ch.conv1, ch.bn1))
        if ch.conv2 is not None:
            out.append((f"ch{ci}.conv2", ch.conv2, ch.bn2))
        for e, (conv, bn) in enumerate(ch.extras):
            out.append((f"ch{ci}.extra{e}", conv, bn))
        return out

    def named_params(self) -> dict[str, np.ndarray]:
        """Learnable tensors in a stable order (running BN stats excluded)."""
        params: dict[str, np.ndarray] = {}
        for ci in range(self.config.n_channels):
            for base, conv, bn in self.channel_layers(ci):
                params[f"{base}.kernels"] = conv.kernels
                params[f"{base}.biases"] = conv.biases
                params[f"{base}.bn.gamma"] = bn.gamma
                params[f"{base}.bn.beta"] = bn.beta
        if self.skip is not None:
            params["skip.matrix"] = self.skip.matrix
            params["skip.bias"] = self.skip.bias
            params["skip.bn.gamma"] = self.skip_bn.gamma
            params["skip.bn.beta"] = self.skip_bn.beta
        params["fusion.weight"] = self.fusion.weight
        params["fusion.bias"] = self.fusion.bias
        params["detector.weight"] = self.detector.weight
        params["detector.bias"] = self.detector.bias
        return params

    def named_batchnorms(self) -> dict[str, BatchNormParams]:
        bns: dict[str, BatchNormParams] = {}
        for ci in range(self.config.n_channels):
            for base, _conv, bn in self.channel_layers(ci):
                bns[f"{base}.bn"] = bn
        if self.skip_bn is not None:
            bns["skip.bn"] = self.skip_bn
        return bns

    def n_params(self) -> int:
        return sum(a.size for a in self.named_params().values())

    def prepare(self, clip: CodewordClip) -> np.ndarray:
        """Clip -> (3, N) float input per the configured scaling."""
        if self.config.input_scaling == "unit":
            return normalize_matrix(clip.codes, clip.codebook_sizes).astype(
                self.dtype, copy=False
            )
        return clip.codes.astype(self.dtype)

    def prepare_batch(self, codes: np.ndarray, codebook_sizes) -> np.ndarray:
        """(B, 3, N) uint16 -> (B, 3, N) float per the configured scaling."""
        if self.config.input_scaling == "unit":
            denom = np.array(
                [max(s - 1, 1) for s in codebook_sizes], dtype=self.dtype
            ).reshape(1, 3, 1)
            return codes.astype(self.dtype) / denom
        return codes.astype(self.dtype)

    def save(self, path, metadata: dict | None = None) -> int:
        return save_model(self, path, metadata)

    @classmethod
    def load(cls, path) -> "CswModel":
        return load_model(path)


def _uniform_init(rng, shape, fan_in: int, dtype) -> np.ndarray:
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def build(config: ArchConfig, seed: int = 0, dtype=np.float64) -> CswModel:
    """Deterministically initialize a model: fan-in-scaled uniform weights,
    zero biases, identity batch-norm."""
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    channels = []
    for ci in range(config.n_channels):
        conv1 = bn1 = conv2 = bn2 = None
        feat_in = 3
        if config.conv1_enabled:
            width = config.window_widths[ci]
            conv1 = ConvLayerParams(
                _uniform_init(rng, (config.conv1_kernels, 3, width), 3 * width, dtype),
                np.zeros(config.conv1_kernels, dtype=dtype),
            )
            bn1 = BatchNormParams.create(config.conv1_kernels, dtype)
            feat_in = config.conv1_kernels
        extras: list[tuple[ConvLayerParams, BatchNormParams]] = []
        if config.conv2_enabled:
            width = config.conv2_widths[ci]
            conv2 = ConvLayerParams(
                _uniform_init(
                    rng,
                    (config.conv2_kernels, feat_in, width),
                    feat_in * width,
                    dtype,
                ),
                np.zeros(config.conv2_kernels, dtype=dtype),
            )
            bn2 = BatchNormParams.create(config.conv2_kernels, dtype)
            for _ in range(config.extra_conv_layers):
                extras.append(
                    (
                        ConvLayerParams(
                            _uniform_init(
                                rng,
                                (config.conv2_kernels, config.conv2_kernels, width),
                                config.conv2_kernels * width,
                                dtype,
                            ),
                            np.zeros(config.conv2_kernels, dtype=dtype),
                        ),
                        BatchNormParams.create(config.conv2_kernels, dtype),
                    )
                )
        channels.append(ChannelParams(conv1, bn1, conv2, bn2, extras))

    skip = skip_bn = None
    if config.skip_enabled:
        skip = SkipParams(
            _uniform_init(rng, (config.skip_rows, 3), 3, dtype),
            np.zeros(config.skip_rows, dtype=dtype),
        )
        skip_bn = BatchNormParams.create(config.skip_rows, dtype)

    m = config.fused_input_dim
    fusion = DenseParams(
        _uniform_init(rng, (m, config.fused_dim), m, dtype),
        np.zeros(config.fused_dim, dtype=dtype),
    )
    detector = DenseParams(
        _uniform_init(rng, (config.fused_dim, 1), config.fused_dim, dtype),
        np.zeros(1, dtype=dtype),
    )
    return CswModel(config, channels, skip, skip_bn, fusion, detector, dtype, seed)


# ---------------------------------------------------------------------------
# forward / backward


def _bn_apply(z, bn, train, update_bn):
    """Batch norm over a (B, L, F) map, statistics across batch x positions."""
    b, l, f = z.shape
    flat = z.reshape(b * l, f)
    if train:
        out, cache = bn_forward_train(flat, bn, update_running=update_bn)
    else:
        out, cache = bn_forward_infer(flat, bn), None
    return out.reshape(b, l, f), cache


def _pool_block(h: np.ndarray, k: int):
    """Per-feature k-max pooling over positions; returns (block, idx)."""
    ht = h.transpose(0, 2, 1)  # (B, F, L)
    idx = kmax_indices(ht, k)
    return np.take_along_axis(ht, idx, -1).reshape(h.shape[0], -1), idx


def _bn_fold(bn, dtype):
    """Inference batch norm as a per-feature (scale, shift) pair.

    x*scale + shift equals gamma*(x - mean)/sqrt(var + eps) + beta, so the
    pair can be folded into the preceding affine layer's weights.
    """
    inv_std = 1.0 / np.sqrt(bn.running_var + bn.epsilon)
    scale = (bn.gamma * inv_std).astype(dtype, copy=False)
    shift = (bn.beta - bn.running_mean * scale).astype(dtype, copy=False)
    return scale, shift


def _channel_forward(model, ci, x_tf, train, update_bn, want_cache):
    h = x_tf
    layer_caches = []
    for _base, conv, bn in model.channel_layers(ci):
        if train:
            z = conv_forward(h, conv.kernels, conv.biases)
            zn, bn_cache = _bn_apply(z, bn, train, update_bn)
            a = np.maximum(zn, 0.0, out=zn)  # pre-ReLU map is not needed again
            if want_cache:
                layer_caches.append((h, bn_cache, a))
        else:
            scale, shift = _bn_fold(bn, model.dtype)
            z = conv_forward(
                h, conv.kernels * scale[:, None, None], conv.biases * scale + shift
            )
            a = np.maximum(z, 0.0, out=z)
        h = a
    block, idx = _pool_block(h, model.config.conv_pool_k)
    cache = (layer_caches, idx, h.shape) if want_cache else None
    return block, cache


def _skip_forward(model, x_tf, train, update_bn, want_cache):
    if train:
        z = x_tf @ model.skip.matrix.T + model.skip.bias  # (B, N, skip_rows)
        zn, bn_cache = _bn_apply(z, model.skip_bn, train, update_bn)
        a = np.maximum(zn, 0.0, out=zn)
    else:
        scale, shift = _bn_fold(model.skip_bn, model.dtype)
        z = x_tf @ (model.skip.matrix * scale[:, None]).T
        z += model.skip.bias * scale + shift
        a = np.maximum(z, 0.0, out=z)
        bn_cache = None
    block, idx = _pool_block(a, model.config.skip_pool_k)
    cache = (bn_cache, a, idx, a.shape) if want_cache else None
    return block, cache


def _forward_batch(
    model: CswModel,
    xb: np.ndarray,
    train: bool,
    dropout_rate: float = 0.0,
    rng=None,
    update_bn: bool = True,
    want_cache: bool = False,
):
    """Run a (B, 3, N) batch; returns (y (B,), O (B, h), cache or None)."""
    cfg = model.config
    if xb.ndim != 3 or xb.shape[1] != 3:
        raise ConfigError(f"expected (B, 3, N) input, got {xb.shape}")
    n = xb.shape[2]
    if n < cfg.min_clip_frames:
        raise ClipTooShort(n, cfg.min_clip_frames)
    if train and not 0.0 <= dropout_rate < 1.0:
        raise ConfigError(f"dropout rate {dropout_rate} outside [0, 1)")
    xb = xb.astype(model.dtype, copy=False)
    x_tf = np.ascontiguousarray(xb.transpose(0, 2, 1))

    blocks = []
    ch_caches = []
    for ci in range(cfg.n_channels):
        block, cache = _channel_forward(model, ci, x_tf, train, update_bn, want_cache)
        blocks.append(block)
        ch_caches.append(cache)
    skip_cache = None
    if model.skip is not None:
        block, skip_cache = _skip_forward(model, x_tf, train, update_bn, want_cache)
        blocks.append(block)

    z = np.concatenate(blocks, axis=1)
    assert z.shape[1] == cfg.fused_input_dim, "spliced dimension chain broken"

    drop_mask = None
    zd = z
    if train and dropout_rate > 0.0:
        if rng is None:
            rng = np.random.default_rng()
        drop_mask = rng.random(z.shape) >= dropout_rate
        zd = z * drop_mask / (1.0 - dropout_rate)

    o_aff = dense(zd, model.fusion)
    o = relu(o_aff)
    ytilde = dense(o, model.detector).reshape(-1)
    y = sigmoid(ytilde)

    cache = None
    if want_cache:
        cache = {
            "x_tf": x_tf,
            "channels": ch_caches,
            "skip": skip_cache,
            "zd": zd,
            "drop_mask": drop_mask,
            "dropout_rate": dropout_rate,
            "o_aff": o_aff,
            "o": o,
            "y": y,
        }
    return y, o, cache


def _pool_scatter(dblock, idx, positions: int, dtype) -> np.ndarray:
    """Route pooled gradients back into a zeroed (B, L, F) map.

    The k selected positions per (sample, feature) are distinct, so a
    plain scatter (no accumulation) is exact.
    """
    b, f, k = idx.shape
    dh = np.zeros((b, positions, f), dtype=dtype)
    np.put_along_axis(
        dh, idx.transpose(0, 2, 1), dblock.reshape(b, f, k).transpose(0, 2, 1), axis=1
    )
    return dh


def _channel_backward(model, ci, dblock, cache, grads):
    layer_caches, idx, h_shape = cache
    _b, l, _f = h_shape
    dh = _pool_scatter(dblock, idx, l, model.dtype)
    layers = model.channel_layers(ci)
    for li in range(len(layers) - 1, -1, -1):
        base, conv, bn = layers[li]
        x_in, bn_cache, a_out = layer_caches[li]
        dh *= a_out > 0  # ReLU mask, in place (dh is owned here)
        b2, l2, f2 = dh.shape
        dflat, dgamma, dbeta = bn_backward(dh.reshape(b2 * l2, f2), bn_cache, bn)
        grads[f"{base}.bn.gamma"] = dgamma
        grads[f"{base}.bn.beta"] = dbeta
        dx, dk, db = conv_backward(
            x_in, conv.kernels, dflat.reshape(b2, l2, f2), need_dx=li > 0
        )
        grads[f"{base}.kernels"] = dk
        grads[f"{base}.biases"] = db
        dh = dx


def _skip_backward(model, dblock, cache, x_tf, grads):
    bn_cache, a_out, idx, a_shape = cache
    b, n, f = a_shape
    da = _pool_scatter(dblock, idx, n, model.dtype)
    da *= a_out > 0
    dflat, dgamma, dbeta = bn_backward(da.reshape(b * n, f), bn_cache, model.skip_bn)
    grads["skip.bn.gamma"] = dgamma
    grads["skip.bn.beta"] = dbeta
    dz = dflat.reshape(b, n, f)
    grads["skip.matrix"] = np.matmul(dz.transpose(0, 2, 1), x_tf).sum(axis=0)
    grads["skip.bias"] = dz.sum(axis=(0, 1))


def _backward_batch(model: CswModel, cache: dict, labels: np.ndarray, lam: float):
    cfg = model.config
    y = cache["y"]
    # cast back down so a float32 model backpropagates in float32
    dyt = (bce_grad(y, labels) * y * (1.0 - y)).astype(model.dtype)

    grads: dict[str, np.ndarray] = {}
    o = cache["o"]
    do_, dv, dbdet = dense_backward(o, model.detector, dyt[:, None])
    grads["detector.weight"] = dv + l2_norm_grad(model.detector.weight, lam)
    grads["detector.bias"] = dbdet
    do_aff = relu_backward(do_, cache["o_aff"])
    dzd, dwf, dbf = dense_backward(cache["zd"], model.fusion, do_aff)
    grads["fusion.weight"] = dwf + l2_norm_grad(model.fusion.weight, lam)
    grads["fusion.bias"] = dbf

    if cache["drop_mask"] is not None:
        dz = dzd * cache["drop_mask"] / (1.0 - cache["dropout_rate"])
    else:
        dz = dzd

    offset = 0
    for ci in range(cfg.n_channels):
        dim = cfg.channel_block_dim
        _channel_backward(
            model, ci, dz[:, offset : offset + dim], cache["channels"][ci], grads
        )
        offset += dim
    if model.skip is not None:
        _skip_backward(model, dz[:, offset:], cache["skip"], cache["x_tf"], grads)
    return grads


def loss_and_grads(
    model: CswModel,
    xb: np.ndarray,
    labels: np.ndarray,
    lam: float = 1e-3,
    dropout_rate: float = 0.0,
    rng=None,
    update_bn: bool = False,
):
    """Train-mode forward + full backward pass over a batch."""
    y, _o, cache = _forward_batch(
        model, xb, train=True, dropout_rate=dropout_rate, rng=rng,
        update_bn=update_bn, want_cache=True,
    )
    labels = np.asarray(labels, dtype=np.float64)
    loss = bce_l2_loss(y, labels, [model.fusion.weight, model.detector.weight], lam)
    grads = _backward_batch(model, cache, labels, lam)
    return loss, y, grads


# ---------------------------------------------------------------------------
# spec-level single-clip operations


def forward(
    model: CswModel,
    clip,
    mode: str = "infer",
    dropout_rate: float = 0.0,
    rng=None,
):
    """Probability and fused features for one normalized clip (3 x N)."""
    if isinstance(clip, NormalizedClip):
        x = clip.matrix
    else:
        x = np.asarray(clip, dtype=np.float64)
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    y, o, _ = _forward_batch(
        model, x[None, :, :], train=(mode == "train"),
        dropout_rate=dropout_rate, rng=rng,
    )
    return float(y[0]), o[0]


def predict(model: CswModel, clip: CodewordClip, threshold: float | None = None):
    """Classify one clip; stego wins ties at the threshold (y >= threshold)."""
    if threshold is None:
        threshold = model.config.threshold
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold {threshold} outside (0, 1)")
    x = model.prepare(clip)
    y, _o, _ = _forward_batch(model, x[None, :, :], train=False)
    prob = float(y[0])
    return ("stego" if prob >= threshold else "cover"), prob


def batch_probabilities(
    model: CswModel,
    codes_list,
    codebook_sizes,
    batch_size: int = 256,
) -> np.ndarray:
    """Infer-mode stego probabilities for clips of possibly mixed lengths.

    Returns probabilities in input order; clips are grouped by length so
    every forward batch is rectangular.
    """
    probs = np.empty(len(codes_list))
    by_len: dict[int, list[int]] = {}
    for i, codes in enumerate(codes_list):
        by_len.setdefault(codes.shape[1], []).append(i)
    for _n, idxs in sorted(by_len.items()):
        for lo in range(0, len(idxs), batch_size):
            chunk = idxs[lo : lo + batch_size]
            stacked = np.stack([codes_list[i] for i in chunk])
            xb = model.prepare_batch(stacked, codebook_sizes)
            y, _o, _ = _forward_batch(model, xb, train=False)
            probs[chunk] = y
    return probs


def batch_features(
    model: CswModel,
    codes_list,
    codebook_sizes,
    batch_size: int = 256,
) -> np.ndarray:
    """Fused feature vectors O, one row per clip, in input order."""
    feats = np.empty((len(codes_list), model.config.fused_dim))
    by_len: dict[int, list[int]] = {}
    for i, codes in enumerate(codes_list):
        by_len.setdefault(codes.shape[1], []).append(i)
    for _n, idxs in sorted(by_len.items()):
        for lo in range(0, len(idxs), batch_size):
            chunk = idxs[lo : lo + batch_size]
            stacked = np.stack([codes_list[i] for i in chunk])
            xb = model.prepare_batch(stacked, codebook_sizes)
            _y, o, _ = _forward_batch(model, xb, train=False)
            feats[chunk] = o
    return feats


# ---------------------------------------------------------------------------
# gradient checking


def staged_loss_builder(model: CswModel, xb: np.ndarray, labels: np.ndarray, lam: float):
    """Loss closure for finite differences, plus the param -> stage map.

    A perturbed parameter only influences the graph downstream of the layer
    it sits in: channels, the skip path, and the head meet nowhere before
    the splice, and layers inside a channel are a simple chain. The builder
    therefore caches every layer input and recomputes exactly the perturbed
    suffix; the recomputed path is the same code the plain forward runs.
    Batch-norm uses batch statistics (as in training) without touching the
    running averages; dropout is off.
    """
    cfg = model.config
    xb = xb.astype(model.dtype, copy=False)
    x_tf = np.ascontiguousarray(xb.transpose(0, 2, 1))
    labels = np.asarray(labels, dtype=np.float64)

    def apply_layer(conv, bn, h):
        z = conv_forward(h, conv.kernels, conv.biases)
        zn, _ = _bn_apply(z, bn, True, False)
        return z, relu(zn)

    # baseline: per channel, the input of every layer and every conv output
    ch_inputs: list[list[np.ndarray]] = []
    ch_convouts: list[list[np.ndarray]] = []
    blocks: list[np.ndarray] = []
    for ci in range(cfg.n_channels):
        h = x_tf
        inputs, convouts = [], []
        for _base, conv, bn in model.channel_layers(ci):
            inputs.append(h)
            z, h = apply_layer(conv, bn, h)
            convouts.append(z)
        ch_inputs.append(inputs)
        ch_convouts.append(convouts)
        blocks.append(_pool_block(h, cfg.conv_pool_k)[0])

    skip_z = skip_blk = None
    if model.skip is not None:
        skip_z = x_tf @ model.skip.matrix.T + model.skip.bias
        zn, _ = _bn_apply(skip_z, model.skip_bn, True, False)
        skip_blk = _pool_block(relu(zn), cfg.skip_pool_k)[0]

    def channel_block_from(ci, li, from_bn):
        layers = model.channel_layers(ci)
        if from_bn:
            zn, _ = _bn_apply(ch_convouts[ci][li], layers[li][2], True, False)
            h = relu(zn)
            rest = layers[li + 1 :]
        else:
            h = ch_inputs[ci][li]
            rest = layers[li:]
        for _base, conv, bn in rest:
            _z, h = apply_layer(conv, bn, h)
        return _pool_block(h, cfg.conv_pool_k)[0]

    def skip_block_from(from_bn):
        z = skip_z if from_bn else x_tf @ model.skip.matrix.T + model.skip.bias
        zn, _ = _bn_apply(z, model.skip_bn, True, False)
        return _pool_block(relu(zn), cfg.skip_pool_k)[0]

    def reg_term():
        return lam * (
            np.sqrt((model.fusion.weight**2).sum())
            + np.sqrt((model.detector.weight**2).sum())
        )

    reg_cached = reg_term()

    def head_loss(z, reg):
        # same arithmetic as bce_l2_loss, minus the input validation the
        # FD inner loop would otherwise repeat hundreds of thousands of times
        o = relu(dense(z, model.fusion))
        y = sigmoid(dense(o, model.detector).reshape(-1))
        p = np.clip(y, CLAMP, 1.0 - CLAMP)
        ce = -np.mean(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))
        return float(ce + reg)

    def assemble(replaced_ci=None, new_block=None, new_skip=None):
        parts = [
            new_block if ci == replaced_ci else blocks[ci]
            for ci in range(cfg.n_channels)
        ]
        if model.skip is not None:
            parts.append(new_skip if new_skip is not None else skip_blk)
        return np.concatenate(parts, axis=1)

    z_cached = assemble()

    def loss_fn(stage: str | None) -> float:
        if stage == "head":
            return head_loss(z_cached, reg_term())
        if stage is not None and stage.startswith("skip:"):
            return head_loss(
                assemble(new_skip=skip_block_from(stage == "skip:bn")), reg_cached
            )
        if stage is not None and stage.startswith("ch"):
            tag, kind, li = stage.split(":")
            block = channel_block_from(int(tag[2:]), int(li), kind == "bn")
            return head_loss(assemble(int(tag[2:]), block), reg_cached)
        # unknown stage: recompute everything
        fresh = [channel_block_from(ci, 0, False) for ci in range(cfg.n_channels)]
        parts = fresh + ([skip_block_from(False)] if model.skip is not None else [])
        return head_loss(np.concatenate(parts, axis=1), reg_term())

    layer_index = {
        base: (ci, li)
        for ci in range(cfg.n_channels)
        for li, (base, _c, _b) in enumerate(model.channel_layers(ci))
    }

    def stage_of(name: str) -> str:
        if name.startswith("skip"):
            return "skip:bn" if ".bn." in name else "skip:affine"
        if name.startswith("ch"):
            base = name.rsplit(".bn.", 1)[0] if ".bn." in name else name.rsplit(".", 1)[0]
            ci, li = layer_index[base]
            return f"ch{ci}:{'bn' if '.bn.' in name else 'conv'}:{li}"
        return "head"

    return loss_fn, stage_of


def _init_fd_worker(model, xb, labels, lam, step):
    global _FD_WORKER
    loss_fn, _stage_of = staged_loss_builder(model, xb, labels, lam)
    _FD_WORKER = (model.named_params(), loss_fn, step)


def _fd_numeric_chunk(chunk):
    """Central differences for one (name, stage, lo, hi) parameter slice."""
    name, stage, lo, hi = chunk
    params, loss_fn, step = _FD_WORKER
    flat = params[name].ravel()
    out = np.empty(hi - lo)
    for j, i in enumerate(range(lo, hi)):
        orig = flat[i]
        flat[i] = orig + step
        lp = loss_fn(stage)
        flat[i] = orig - step
        lm = loss_fn(stage)
        flat[i] = orig
        out[j] = (lp - lm) / (2.0 * step)
    return name, lo, out


def grad_check_model(
    model: CswModel,
    xb: np.ndarray,
    labels: np.ndarray,
    lam: float = 1e-3,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    staged: bool = True,
    n_jobs: int = 1,
):
    """Check every parameter of the model against central finite differences.

    ``n_jobs > 1`` splits the parameter sweep across processes; each worker
    owns a private copy of the model, so probes stay isolated.
    """
    from .nn.gradcheck import grad_check, report_from_numeric

    if model.dtype != np.float64:
        raise ConfigError("gradient checks require a double-precision model")
    _loss, _y, grads = loss_and_grads(model, xb, labels, lam=lam)

    if n_jobs <= 1:
        loss_fn, stage_of = staged_loss_builder(model, xb, labels, lam)
        if not staged:
            stage_of = None  # every probe falls into the full-recompute path
        return grad_check(
            model.named_params(), grads, loss_fn, step=step,
            tolerance=tolerance, stage_of=stage_of,
        )

    import multiprocessing as mp
    from concurrent.futures import ProcessPoolExecutor

    params = model.named_params()
    _loss_fn, stage_of = staged_loss_builder(model, xb, labels, lam)
    chunks = []
    chunk_size = 4096
    for name, arr in params.items():
        stage = stage_of(name) if staged else None
        for lo in range(0, arr.size, chunk_size):
            chunks.append((name, stage, lo, min(lo + chunk_size, arr.size)))

    numeric = {name: np.empty(arr.size) for name, arr in params.items()}
    ctx = mp.get_context("fork")
    with ProcessPoolExecutor(
        max_workers=n_jobs,
        mp_context=ctx,
        initializer=_init_fd_worker,
        initargs=(model, xb, labels, lam, step),
    ) as pool:
        for name, lo, vals in pool.map(_fd_numeric_chunk, chunks):
            numeric[name][lo : lo + len(vals)] = vals
    numeric = {n: v.reshape(params[n].shape) for n, v in numeric.items()}
    return report_from_numeric(params, grads, numeric, step, tolerance)


# ---------------------------------------------------------------------------
# persistence


def save_model(model: CswModel, path, metadata: dict | None = None) -> int:
    """Write a self-describing checkpoint; round trips are bit-exact."""
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_json_dict(),
        "config_hash": arch_config_hash(model.config),
        "dtype": np.dtype(model.dtype).name,
        "seed": model.seed,
        "bn_hyper": {
            name: {"momentum": bn.momentum, "epsilon": bn.epsilon}
            for name, bn in model.named_batchnorms().items()
        },
        "metadata": metadata or {},
    }
    arrays = {"manifest": np.array(json.dumps(manifest, sort_keys=True))}
    for name, arr in model.named_params().items():
        arrays[f"param.{name}"] = arr
    for name, bn in model.named_batchnorms().items():
        arrays[f"state.{name}.running_mean"] = bn.running_mean
        arrays[f"state.{name}.running_var"] = bn.running_var
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc
    return path.stat().st_size


def load_model(path) -> CswModel:
    """Read a checkpoint; verifies the architecture hash and every tensor."""
    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    with fh:
        try:
            with np.load(fh, allow_pickle=False) as data:
                if "manifest" not in data:
                    raise FormatError(0, "checkpoint manifest missing")
                manifest = json.loads(str(data["manifest"]))
                if manifest.get("format_version") != CHECKPOINT_VERSION:
                    raise FormatError(0, "unsupported checkpoint version")
                config = ArchConfig.from_json_dict(manifest["config"])
                if arch_config_hash(config) != manifest["config_hash"]:
                    raise ArchMismatch(
                        "stored architecture hash does not match stored config"
                    )
                dtype = np.dtype(manifest["dtype"])
                model = build(config, seed=manifest["seed"], dtype=dtype)
                for name, arr in model.named_params().items():
                    key = f"param.{name}"
                    if key not in data:
                        raise FormatError(0, f"missing tensor {key}")
                    stored = data[key]
                    if stored.shape != arr.shape:
                        raise FormatError(
                            0, f"tensor {key} has shape {stored.shape}, "
                            f"expected {arr.shape}"
                        )
                    arr[...] = stored
                for name, bn in model.named_batchnorms().items():
                    hyper = manifest["bn_hyper"][name]
                    bn.momentum = hyper["momentum"]
                    bn.epsilon = hyper["epsilon"]
                    for stat in ("running_mean", "running_var"):
                        key = f"state.{name}.{stat}"
                        if key not in data:
                            raise FormatError(0, f"missing tensor {key}")
                        getattr(bn, stat)[...] = data[key]
                return model
        except (ArchMismatch, FormatError):
            raise
        except (zipfile.BadZipFile, EOFError, OSError) as exc:
            raise FormatError(0, f"corrupt checkpoint: {exc}") from exc
        except (KeyError, ValueError, json.JSONDecodeError) as exc:
            raise FormatError(0, f"malformed checkpoint: {exc}") from exc
