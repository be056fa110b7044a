"""Channel-count-invariant separation network: TCN superblocks interleaved with TAC layers.

Every channel is processed with the same weights; the only cross-channel
path is the channel average inside each TAC layer. Internally a batch is a
``(B, C, T)`` array and features are ``(B, C, K, L)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .signal import EstimateSet, MultiChannelSignal

__all__ = [
    "ModelConfig",
    "init_params",
    "param_shapes",
    "count_params",
    "num_frames",
    "encode",
    "tac_layer",
    "forward",
    "forward_batch",
    "remove_tac",
    "as_tensors",
]


@dataclass(frozen=True)
class ModelConfig:
    """Network hyperparameters. Defaults are the full-size preset."""

    num_superblocks: int = 4
    blocks_per_superblock: int = 8
    kernel_width: int = 3
    window: int = 64
    hop: int = 32
    bottleneck_dim: int = 128
    conv_channels: int = 512
    tac_dim: int = 128
    num_outputs: int = 8
    encoder_bases: int = 128
    use_tac: bool = True

    def __post_init__(self):
        for f in fields(self):
            if f.name == "use_tac":
                continue
            if int(getattr(self, f.name)) < 1:
                raise ValueError(f"{f.name} must be >= 1")
        if self.window % self.hop:
            raise ValueError("hop must divide window")
        if self.kernel_width % 2 == 0:
            raise ValueError("kernel_width must be odd")

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Desk-scale preset."""
        base = dict(num_superblocks=2, blocks_per_superblock=4, bottleneck_dim=32,
                    conv_channels=64, tac_dim=32, num_outputs=4, encoder_bases=32)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def dilations(self):
        return [2**b for b in range(self.blocks_per_superblock)]

    def receptive_field(self) -> int:
        """Frames of context on each side of a frame."""
        per_block = sum((self.kernel_width - 1) // 2 * d for d in self.dilations())
        return self.num_superblocks * per_block


def param_shapes(config: ModelConfig) -> dict:
    f, k, h = config.encoder_bases, config.bottleneck_dim, config.conv_channels
    shapes = {
        "encoder.weight": (f, config.window),
        "input_norm.scale": (f,),
        "input_norm.bias": (f,),
        "input.weight": (k, f),
        "input.bias": (k,),
    }
    for s in range(config.num_superblocks):
        for b in range(config.blocks_per_superblock):
            p = f"tcn.{s}.{b}."
            shapes[p + "in.weight"] = (h, k)
            shapes[p + "in.bias"] = (h,)
            shapes[p + "conv.kernel"] = (h, config.kernel_width)
            shapes[p + "norm.scale"] = (h,)
            shapes[p + "norm.bias"] = (h,)
            shapes[p + "out.weight"] = (k, h)
            shapes[p + "out.bias"] = (k,)
        p = f"tac.{s}."
        shapes[p + "transform.weight"] = (config.tac_dim, k)
        shapes[p + "average.weight"] = (config.tac_dim, k)
        shapes[p + "project.weight"] = (k, 2 * config.tac_dim)
        shapes[p + "project.bias"] = (k,)
    shapes["mask.weight"] = (config.num_outputs * f, k)
    shapes["mask.bias"] = (config.num_outputs * f,)
    shapes["decoder.weight"] = (config.window, f)
    return shapes


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float64) -> dict:
    """Seeded initialisation: scaled Gaussian weights, unit norm scales, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".scale"):
            value = np.ones(shape)
        elif name.endswith(".bias"):
            value = np.zeros(shape)
        else:
            value = rng.standard_normal(shape) / np.sqrt(shape[1])
        params[name] = value.astype(dtype)
    return params


def count_params(params: dict) -> int:
    return int(sum(np.asarray(v).size for v in params.values()))


def num_frames(num_samples: int, config: ModelConfig) -> int:
    if num_samples < config.window:
        raise ValueError(f"signal of {num_samples} samples is shorter than one window ({config.window})")
    return 1 + (num_samples - config.window) // config.hop


def as_tensors(params: dict, requires_grad: bool = False) -> dict:
    return {k: v if isinstance(v, ad.Tensor) else ad.Tensor(v, requires_grad=requires_grad)
            for k, v in params.items()}


def _encode(x: np.ndarray, p: dict, config: ModelConfig) -> ad.Tensor:
    n = num_frames(x.shape[-1], config)
    frames = ad.frame_signal(x, config.window, config.hop, n)  # (B, C, W, L)
    return ad.relu(ad.dense(ad.Tensor(frames), p["encoder.weight"]))


def _tcn_block(h: ad.Tensor, p: dict, prefix: str, dilation: int) -> ad.Tensor:
    y = ad.dense(h, p[prefix + "in.weight"], p[prefix + "in.bias"])
    y = ad.relu(y)
    y = ad.dilated_conv1d(y, p[prefix + "conv.kernel"], dilation)
    y = ad.feature_norm(y, p[prefix + "norm.scale"], p[prefix + "norm.bias"])
    y = ad.dense(y, p[prefix + "out.weight"], p[prefix + "out.bias"])
    return ad.add(h, y)


def _tac(h: ad.Tensor, p: dict, prefix: str) -> ad.Tensor:
    local = ad.relu(ad.dense(h, p[prefix + "transform.weight"]))
    shared = ad.relu(ad.dense(h, p[prefix + "average.weight"]))
    avg = ad.expand(ad.mean(shared, axis=1, keepdims=True), shared.shape)
    q = ad.concat([local, avg], axis=-2)
    return ad.add(h, ad.dense(q, p[prefix + "project.weight"], p[prefix + "project.bias"]))


def forward_batch(x: np.ndarray, params: dict, config: ModelConfig) -> ad.Tensor:
    """Separate a ``(B, C, T)`` batch into a ``(B, C, M, T)`` estimate tensor.

    ``params`` maps names to :class:`~mcmixit.autodiff.Tensor` (or arrays,
    treated as constants). The output satisfies mixture consistency.
    """
    p = as_tensors(params)
    dtype = p["encoder.weight"].dtype
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 3:
        raise ValueError(f"expected a (B, C, T) batch, got shape {x.shape}")
    b, c, t = x.shape
    m, f = config.num_outputs, config.encoder_bases

    enc = _encode(x, p, config)  # (B, C, F, L)
    h = ad.feature_norm(enc, p["input_norm.scale"], p["input_norm.bias"])
    h = ad.dense(h, p["input.weight"], p["input.bias"])
    for s in range(config.num_superblocks):
        for i, d in enumerate(config.dilations()):
            h = _tcn_block(h, p, f"tcn.{s}.{i}.", d)
        if config.use_tac:
            h = _tac(h, p, f"tac.{s}.")

    n_frames = h.shape[-1]
    logits = ad.dense(h, p["mask.weight"], p["mask.bias"])  # (B, C, M*F, L)
    masks = ad.sigmoid(ad.reshape(logits, (b, c, m, f, n_frames)))
    masked = ad.mul(masks, ad.reshape(enc, (b, c, 1, f, n_frames)))
    frames = ad.dense(masked, p["decoder.weight"])  # (B, C, M, W, L)
    est = ad.overlap_add(frames, config.hop, t)  # (B, C, M, T)

    # uniform mixture-consistency projection
    residual = ad.sub(x[:, :, None, :], ad.sum(est, axis=2, keepdims=True))
    return ad.add(est, ad.scale(residual, 1.0 / m))


def _signal_batch(signal) -> tuple[np.ndarray, int]:
    if isinstance(signal, MultiChannelSignal):
        return signal.samples.T[None], signal.sample_rate
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x.T[None], 16000


def forward(signal, params: dict, config: ModelConfig) -> EstimateSet:
    """Separate one ``T x C`` signal into a ``T x C x M`` :class:`EstimateSet`."""
    x, rate = _signal_batch(signal)
    out = forward_batch(x, params, config).data[0]  # (C, M, T)
    return EstimateSet(np.transpose(out, (2, 0, 1)), rate)


def encode(signal, params: dict, config: ModelConfig) -> np.ndarray:
    """Encoder output per channel, shape ``(C, F, L)``."""
    x, _ = _signal_batch(signal)
    p = as_tensors(params)
    return _encode(x.astype(p["encoder.weight"].dtype), p, config).data[0]


def tac_layer(features, params: dict, index: int = 0) -> np.ndarray:
    """Apply TAC layer ``index`` to per-channel features ``(C, K, L)``."""
    h = np.asarray(features)
    if h.ndim != 3:
        raise ValueError(f"expected (C, K, L) features, got shape {h.shape}")
    p = as_tensors(params)
    prefix = f"tac.{index}."
    dtype = p[prefix + "project.weight"].dtype
    return _tac(ad.Tensor(h[None].astype(dtype)), p, prefix).data[0]


def remove_tac(params: dict, config: ModelConfig):
    """Same weights with every TAC layer replaced by an identity pass-through."""
    return dict(params), replace(config, use_tac=False)
