"""ASCNet: a 1-D convolutional denoising autoencoder.

Encoder blocks are ``conv(stride 2) -> batch norm -> improved ReLU``. Each
decoder block is ``transposed conv(stride 2) -> batch norm -> improved ReLU``,
then adds a channel-averaged, convolved skip from the encoder activation at
the same resolution and gates the result with channel and spatial
attention. A final stride-1 convolution maps back to one channel with a
linear output.

The encoder activation at full resolution is the network input itself, so
the outermost decoder block takes its skip from the noisy signal.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigMismatch, InvalidConfig, ResolutionMismatch, ShapeMismatch


@dataclass
class ModelConfig:
    n_blocks: int = 4
    channels: list[int] = field(default_factory=lambda: [16, 32, 64, 64])
    kernels: list[int] = field(default_factory=lambda: [16, 16, 8, 8])
    stride: int = 2
    skip_kernel: int = 3
    attn_reduction: int = 4
    spatial_attn_kernel: int = 7
    segment_length: int = 1024
    final_kernel: int = 16
    attention: bool = True
    bn_before_activation: bool = True
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.channels = list(self.channels)
        self.kernels = list(self.kernels)
        self.validate()

    def validate(self):
        n = self.n_blocks
        if n < 1:
            raise InvalidConfig("n_blocks must be >= 1")
        if len(self.channels) != n or len(self.kernels) != n:
            raise InvalidConfig("channels and kernels need one entry per block")
        if any(k != 16 for k in self.kernels[:2]):
            raise InvalidConfig("the first two encoder kernels must be 16")
        if self.final_kernel != 16:
            raise InvalidConfig("the reconstruction kernel must be 16")
        if self.stride < 1 or any(k < 1 for k in self.kernels):
            raise InvalidConfig("stride and kernels must be positive")
        if self.segment_length % (self.stride ** n):
            raise InvalidConfig(
                f"segment_length {self.segment_length} is not divisible by {self.stride}^{n}"
            )
        if any(c < self.attn_reduction for c in self.channels):
            raise InvalidConfig("every block needs at least attn_reduction channels")

    def decoder_channels(self, j: int) -> int:
        return self.channels[j - 1] if j > 0 else self.channels[0]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class Parameters:
    """Trainable weights plus batch-norm running statistics, keyed by name."""

    weights: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]

    def copy(self) -> "Parameters":
        return Parameters({k: v.copy() for k, v in self.weights.items()},
                          {k: v.copy() for k, v in self.buffers.items()})

    def tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        """Leaf tensors wrapping (not copying) the weight arrays."""
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.weights.items()}


# ---------------------------------------------------------------- shapes & init

def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    r = cfg.attn_reduction
    c_prev = 1
    for i, (c, k) in enumerate(zip(cfg.channels, cfg.kernels)):
        shapes[f"enc{i}.conv.w"] = (c, c_prev, k)
        shapes[f"enc{i}.conv.b"] = (c,)
        shapes[f"enc{i}.bn.gamma"] = (c,)
        shapes[f"enc{i}.bn.beta"] = (c,)
        shapes[f"enc{i}.act.w"] = (c, 2 * c)
        shapes[f"enc{i}.act.b"] = (c,)
        c_prev = c
    for j in reversed(range(cfg.n_blocks)):
        d = cfg.decoder_channels(j)
        h = max(1, d // r)
        shapes[f"dec{j}.tconv.w"] = (c_prev, d, cfg.kernels[j])
        shapes[f"dec{j}.tconv.b"] = (d,)
        shapes[f"dec{j}.bn.gamma"] = (d,)
        shapes[f"dec{j}.bn.beta"] = (d,)
        shapes[f"dec{j}.act.w"] = (d, 2 * d)
        shapes[f"dec{j}.act.b"] = (d,)
        shapes[f"dec{j}.skip.w"] = (d, 1, cfg.skip_kernel)
        shapes[f"dec{j}.skip.b"] = (d,)
        if cfg.attention:
            shapes[f"dec{j}.ca.fc1.w"] = (h, d)
            shapes[f"dec{j}.ca.fc1.b"] = (h,)
            shapes[f"dec{j}.ca.fc2.w"] = (d, h)
            shapes[f"dec{j}.ca.fc2.b"] = (d,)
            shapes[f"dec{j}.sa.w"] = (1, 2, cfg.spatial_attn_kernel)
            shapes[f"dec{j}.sa.b"] = (1,)
        c_prev = d
    shapes["final.w"] = (1, c_prev, cfg.final_kernel)
    shapes["final.b"] = (1,)
    return shapes


def buffer_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    out = {}
    for i, c in enumerate(cfg.channels):
        out[f"enc{i}.bn.running_mean"] = (c,)
        out[f"enc{i}.bn.running_var"] = (c,)
    for j in reversed(range(cfg.n_blocks)):
        d = cfg.decoder_channels(j)
        out[f"dec{j}.bn.running_mean"] = (d,)
        out[f"dec{j}.bn.running_var"] = (d,)
    return out


def _fans(name: str, shape: tuple) -> tuple[int, int]:
    if len(shape) == 3:
        k = shape[2]
        if ".tconv." in name:
            # (C_in, C_out, K)
            return shape[0] * k, shape[1] * k
        return shape[1] * k, shape[0] * k
    return shape[1], shape[0]


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


def init_params(cfg: ModelConfig, seed: int = 0) -> Parameters:
    """Glorot-uniform weights, zero biases, unit BN scale; deterministic per seed."""
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    weights = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gamma"):
            weights[name] = np.ones(shape)
        elif name.endswith((".b", ".beta")):
            weights[name] = np.zeros(shape)
        else:
            weights[name] = glorot_uniform(rng, shape, *_fans(name, shape))
    buffers = {
        name: (np.zeros(shape) if name.endswith("mean") else np.ones(shape))
        for name, shape in buffer_shapes(cfg).items()
    }
    return Parameters(weights, buffers)


def validate_params(cfg: ModelConfig, params: Parameters) -> None:
    expected = param_shapes(cfg)
    if set(expected) != set(params.weights):
        missing = sorted(set(expected) - set(params.weights))
        extra = sorted(set(params.weights) - set(expected))
        raise ConfigMismatch(f"parameter names differ from config (missing {missing}, extra {extra})")
    for name, shape in expected.items():
        if params.weights[name].shape != shape:
            raise ConfigMismatch(f"{name}: shape {params.weights[name].shape}, expected {shape}")
        if not np.all(np.isfinite(params.weights[name])):
            raise ConfigMismatch(f"{name}: non-finite values")
    for name, shape in buffer_shapes(cfg).items():
        if name not in params.buffers or params.buffers[name].shape != shape:
            raise ConfigMismatch(f"buffer {name} missing or misshapen")


# ---------------------------------------------------------------- building blocks

def improved_relu(x: Tensor, fc_w: Tensor, fc_b: Tensor, alpha_override: float | None = None) -> Tensor:
    """max(x, 0) + alpha * min(x, 0) with a learned per-channel alpha.

    alpha = sigmoid(fc([avgpool(max(x,0)), avgpool(min(x,0))])) per (batch,
    channel). ``alpha_override`` replaces alpha by a constant.
    """
    if x.ndim != 3:
        raise ShapeMismatch(f"improved_relu expects (B, C, N), got {x.shape}")
    b, c, _ = x.shape
    pos, negp = ag.split_posneg(x)
    if alpha_override is not None:
        return pos + ag.scale(negp, alpha_override)
    if fc_w.shape != (c, 2 * c):
        raise ShapeMismatch(f"improved_relu fc must map {2 * c} -> {c}, got {fc_w.shape}")
    p = ag.reshape(ag.pool_spatial(pos, "avg"), (b, c))
    q = ag.reshape(ag.pool_spatial(negp, "avg"), (b, c))
    alpha = ag.sigmoid(ag.fully_connected(ag.concat([p, q], axis=1), fc_w, fc_b))
    return pos + ag.multiply(negp, ag.reshape(alpha, (b, c, 1)))


def skip_connect(enc_out: Tensor, w: Tensor, b: Tensor, length: int | None = None) -> Tensor:
    """Average the encoder channels into one, then convolve to the decoder width."""
    if length is not None and enc_out.shape[2] != length:
        raise ResolutionMismatch(f"skip source has length {enc_out.shape[2]}, decoder stage {length}")
    return ag.conv1d(ag.pool_channel(enc_out, "avg"), w, b, stride=1)


def _shared_mlp(v: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    h = ag.relu(ag.fully_connected(v, p[f"{prefix}.fc1.w"], p[f"{prefix}.fc1.b"]))
    return ag.fully_connected(h, p[f"{prefix}.fc2.w"], p[f"{prefix}.fc2.b"])


def channel_attention(x: Tensor, p: dict[str, Tensor], prefix: str = "ca") -> Tensor:
    """sigmoid(MLP(avgpool(x)) + MLP(maxpool(x))) as (B, C, 1) weights."""
    b, c, _ = x.shape
    if p[f"{prefix}.fc1.w"].shape[1] != c:
        raise ShapeMismatch(f"channel attention expects {p[f'{prefix}.fc1.w'].shape[1]} channels, got {c}")
    avg = _shared_mlp(ag.reshape(ag.pool_spatial(x, "avg"), (b, c)), p, prefix)
    mx = _shared_mlp(ag.reshape(ag.pool_spatial(x, "max"), (b, c)), p, prefix)
    return ag.reshape(ag.sigmoid(avg + mx), (b, c, 1))


def spatial_attention(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """sigmoid(conv([avg over channels, max over channels])) as (B, 1, N) weights."""
    if w.shape[:2] != (1, 2):
        raise ShapeMismatch(f"spatial attention conv must map 2 -> 1 channels, got {w.shape}")
    pooled = ag.concat_channels([ag.pool_channel(x, "avg"), ag.pool_channel(x, "max")])
    return ag.sigmoid(ag.conv1d(pooled, w, bias, stride=1))


def attention_block(x: Tensor, p: dict[str, Tensor], prefix: str,
                    channel_override: float | None = None,
                    spatial_override: float | None = None) -> Tensor:
    b, c, n = x.shape
    if channel_override is None:
        alpha_c = channel_attention(x, p, f"{prefix}.ca")
    else:
        alpha_c = Tensor(np.full((b, c, 1), float(channel_override)))
    mu = ag.multiply(x, alpha_c)
    if spatial_override is None:
        alpha_s = spatial_attention(mu, p[f"{prefix}.sa.w"], p[f"{prefix}.sa.b"])
    else:
        alpha_s = Tensor(np.full((b, 1, n), float(spatial_override)))
    return ag.multiply(mu, alpha_s)


def reconstruction_loss(denoised: Tensor, clean) -> Tensor:
    """Mean squared error over batch and samples."""
    return ag.mse_loss(denoised, clean)


# ---------------------------------------------------------------- network

class ASCNet:
    def __init__(self, config: ModelConfig, params: Parameters | None = None, seed: int = 0):
        self.config = config
        self.params = init_params(config, seed) if params is None else params
        validate_params(config, self.params)

    def _norm_act(self, h: Tensor, p: dict[str, Tensor], prefix: str, training: bool) -> Tensor:
        cfg = self.config

        def bn(t):
            return ag.batch_norm(
                t, p[f"{prefix}.bn.gamma"], p[f"{prefix}.bn.beta"],
                self.params.buffers[f"{prefix}.bn.running_mean"],
                self.params.buffers[f"{prefix}.bn.running_var"],
                training, cfg.bn_momentum, cfg.bn_eps,
            )

        def act(t):
            return improved_relu(t, p[f"{prefix}.act.w"], p[f"{prefix}.act.b"])

        return act(bn(h)) if cfg.bn_before_activation else bn(act(h))

    def forward(self, noisy, mode: str = "eval", leaves: dict[str, Tensor] | None = None) -> Tensor:
        """Denoise a (B, 1, L) batch.

        ``leaves`` maps parameter names to tensors (from ``Parameters.tensors``)
        when gradients are wanted; otherwise constants are used.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        cfg = self.config
        x = noisy if isinstance(noisy, Tensor) else Tensor(noisy)
        if x.ndim != 3 or x.shape[1] != 1 or x.shape[2] != cfg.segment_length:
            raise ShapeMismatch(f"expected (B, 1, {cfg.segment_length}), got {x.shape}")
        p = leaves if leaves is not None else self.params.tensors(requires_grad=False)
        training = mode == "train"

        acts = [x]
        h = x
        for i in range(cfg.n_blocks):
            h = ag.conv1d(h, p[f"enc{i}.conv.w"], p[f"enc{i}.conv.b"], cfg.stride)
            h = self._norm_act(h, p, f"enc{i}", training)
            acts.append(h)

        for j in reversed(range(cfg.n_blocks)):
            h = ag.transposed_conv1d(h, p[f"dec{j}.tconv.w"], p[f"dec{j}.tconv.b"], cfg.stride)
            h = self._norm_act(h, p, f"dec{j}", training)
            h = h + skip_connect(acts[j], p[f"dec{j}.skip.w"], p[f"dec{j}.skip.b"], h.shape[2])
            if cfg.attention:
                h = attention_block(h, p, f"dec{j}")

        return ag.conv1d(h, p["final.w"], p["final.b"], stride=1)

    __call__ = forward

    def predict(self, noisy: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Eval-mode forward over an (n, 1, L) array in batches."""
        noisy = np.asarray(noisy, dtype=np.float64)
        outs = [self.forward(noisy[i:i + batch_size]).data for i in range(0, len(noisy), batch_size)]
        return np.concatenate(outs) if outs else np.zeros_like(noisy)

    def loss_and_grads(self, noisy, clean, mode: str = "train") -> tuple[float, dict[str, np.ndarray]]:
        leaves = self.params.tensors()
        loss = reconstruction_loss(self.forward(noisy, mode, leaves), clean)
        loss.backward()
        return loss.item(), {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                             for k, t in leaves.items()}
