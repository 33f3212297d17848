"""The codec network: analysis/synthesis transforms, hyper transforms,
simplified attention, the two causal context models, and the parameter
heads that emit Gaussian-mixture parameters for latents and pixels.

Every layer carries two forward paths over the same parameter arrays: a
Tensor path that records the autodiff graph (training) and a plain-numpy
path (coding). Weights are immutable during inference and may be shared
read-only across threads; training is single-writer.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .entropy import SCALE_FLOOR, FactorizedPrior
from .errors import ConfigError, ContractViolation
from .tensor import Tensor, _pad_hw, _windows

WEIGHTS_MAGIC = b"NLW1"


@dataclass(frozen=True)
class ModelConfig:
    """Structural knobs. Paper-scale values sit in comments next to the
    desk-scale defaults used throughout the tests."""

    filters_n: int = 32          # paper: 192
    mixtures_k: int = 3          # paper: 3
    mask_kernel_x: int = 7       # pixel context kernel, 5 or 7
    use_attention: bool = True
    use_context_y: bool = True
    use_context_x: bool = True
    downsample_factor: int = 4   # total spatial stride of the analysis transform
    hyper_downsample: int = 4    # additional stride of the hyper analysis

    def __post_init__(self):
        if self.mixtures_k < 1:
            raise ConfigError(f"mixtures_k must be >= 1, got {self.mixtures_k}")
        if self.filters_n < 4:
            raise ConfigError(f"filters_n must be >= 4, got {self.filters_n}")
        for name in ("downsample_factor", "hyper_downsample"):
            v = getattr(self, name)
            if v < 2 or (v & (v - 1)) != 0:
                raise ConfigError(f"{name} must be a power of two >= 2, got {v}")
        if self.mask_kernel_x not in (5, 7):
            raise ConfigError(f"mask_kernel_x must be 5 or 7, got {self.mask_kernel_x}")

    @property
    def total_downsample(self) -> int:
        return self.downsample_factor * self.hyper_downsample


def canonical_config_text(config: ModelConfig) -> str:
    """Stable key=value block; its sha256 identifies the architecture."""
    lines = []
    for f in sorted(fields(config), key=lambda f: f.name):
        v = getattr(config, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> ModelConfig:
    values = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, raw = line.partition("=")
        values[key.strip()] = raw.strip()
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in values:
            continue
        raw = values[f.name]
        if f.type == "bool":
            kwargs[f.name] = raw.lower() in ("true", "1", "yes")
        else:
            kwargs[f.name] = int(raw)
    unknown = set(values) - {f.name for f in fields(ModelConfig)}
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    return ModelConfig(**kwargs)


def config_hash(config: ModelConfig) -> bytes:
    return hashlib.sha256(canonical_config_text(config).encode()).digest()


@dataclass
class GmmParams:
    """Per-symbol mixture parameters, each shaped [B, K, C, h, w].

    weights are post-softmax (sum to one over K); scales carry the floor.
    Payloads are Tensors on the training path and ndarrays on the coding
    path.
    """

    weights: object
    means: object
    scales: object


# ---------------------------------------------------------------------------
# numpy mirrors of the forward ops (coding path)
# ---------------------------------------------------------------------------


def conv2d_np(x, w, b, stride=1, pad=0):
    win = _windows(_pad_hw(x, pad), w.shape[2], w.shape[3], stride)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + b[None, :, None, None]


def conv2d_transposed_np(x, w, b, stride=1, pad=0):
    bsz, ci, h, wd = x.shape
    _, co, kh, kw = w.shape
    oh = (h - 1) * stride - 2 * pad + kh
    ow = (wd - 1) * stride - 2 * pad + kw
    full = np.zeros((bsz, co, (h - 1) * stride + kh, (wd - 1) * stride + kw))
    tmp = np.tensordot(x, w, axes=([1], [0]))
    for u in range(kh):
        for v in range(kw):
            full[:, :, u:u + stride * (h - 1) + 1:stride,
                 v:v + stride * (wd - 1) + 1:stride] += \
                tmp[:, :, :, :, u, v].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(full[:, :, pad:pad + oh, pad:pad + ow]) \
        + b[None, :, None, None]


def leaky_relu_np(x):
    return np.where(x >= 0, x, T.LEAKY_SLOPE * x)


def sigmoid_np(x):
    out = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + out), out / (1.0 + out))


def softplus_np(x):
    return np.logaddexp(0.0, x)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class _ParamStore:
    """Ordered name -> Tensor map; the key set is a pure function of config."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, shape, init: str, fan_in: int = 0) -> Tensor:
        if name in self.params:
            raise ContractViolation(f"duplicate parameter {name}")
        t = Tensor(np.zeros(shape), requires_grad=True)
        t._init_spec = (init, fan_in)  # consumed by init_random
        self.params[name] = t
        return t


class Conv2d:
    def __init__(self, store, name, cin, cout, k, stride=1, pad=None,
                 weight_init="fan_in"):
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        self.w = store.add(f"{name}.w", (cout, cin, k, k), weight_init, cin * k * k)
        self.b = store.add(f"{name}.b", (cout,), "zero")

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, self.stride, self.pad)

    def apply_np(self, x):
        return conv2d_np(x, self.w.data, self.b.data, self.stride, self.pad)


class ConvTranspose2d:
    def __init__(self, store, name, cin, cout, k, stride, pad):
        self.stride = stride
        self.pad = pad
        fan_in = max(1, cin * k * k // (stride * stride))
        self.w = store.add(f"{name}.w", (cin, cout, k, k), "fan_in", fan_in)
        self.b = store.add(f"{name}.b", (cout,), "zero")

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d_transposed(x, self.w, self.b, self.stride, self.pad)

    def apply_np(self, x):
        return conv2d_transposed_np(x, self.w.data, self.b.data, self.stride, self.pad)


class MaskedConv2d:
    def __init__(self, store, name, cin, cout, kernel):
        self.kernel = kernel
        self.mask = T.causal_mask(kernel)
        self.w = store.add(f"{name}.w", (cout, cin, kernel, kernel), "fan_in",
                           cin * kernel * kernel)
        self.b = store.add(f"{name}.b", (cout,), "zero")

    def __call__(self, x: Tensor) -> Tensor:
        return T.masked_conv2d(x, self.w, self.b, self.kernel)

    def apply_np(self, x):
        return conv2d_np(x, self.w.data * self.mask, self.b.data, 1, self.kernel // 2)

    def flat_masked_weight(self):
        """[Cout, Cin*k*k] with causal taps only; for per-location decode."""
        w = self.w.data * self.mask
        return np.ascontiguousarray(w.reshape(w.shape[0], -1))


class ResBlock:
    """Two 3x3 convs with a leaky_relu between and a skip around."""

    def __init__(self, store, name, channels):
        self.conv1 = Conv2d(store, f"{name}.conv1", channels, channels, 3)
        self.conv2 = Conv2d(store, f"{name}.conv2", channels, channels, 3)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(x, self.conv2(T.leaky_relu(self.conv1(x))))

    def apply_np(self, x):
        return x + self.conv2.apply_np(leaky_relu_np(self.conv1.apply_np(x)))


class AttentionBlock:
    """out = t + trunk(t) * sigmoid(mask(t)).

    Both branches stack three residual blocks; each ends in a 1x1 conv so a
    zero-initialized final layer collapses the branch exactly. Those finals
    start near zero, making the block close to identity at initialization.
    """

    def __init__(self, store, name, channels):
        self.trunk = [ResBlock(store, f"{name}.trunk{i}", channels) for i in range(3)]
        self.trunk_out = Conv2d(store, f"{name}.trunk_out", channels, channels, 1,
                                weight_init="small")
        self.mask = [ResBlock(store, f"{name}.mask{i}", channels) for i in range(3)]
        self.mask_out = Conv2d(store, f"{name}.mask_out", channels, channels, 1,
                               weight_init="small")

    def __call__(self, t: Tensor) -> Tensor:
        u = t
        for block in self.trunk:
            u = block(u)
        u = self.trunk_out(u)
        m = t
        for block in self.mask:
            m = block(m)
        m = self.mask_out(m)
        return T.add(t, T.mul(u, T.sigmoid(m)))

    def apply_np(self, t):
        u = t
        for block in self.trunk:
            u = block.apply_np(u)
        u = self.trunk_out.apply_np(u)
        m = t
        for block in self.mask:
            m = block.apply_np(m)
        m = self.mask_out.apply_np(m)
        return t + u * sigmoid_np(m)


def _n_stages(factor: int) -> int:
    return int(round(np.log2(factor)))


class Model:
    """All learnable state plus the transform/head graph over it."""

    def __init__(self, config: ModelConfig):
        self.config = config
        store = _ParamStore()
        n = config.filters_n
        k = config.mixtures_k
        n_down = _n_stages(config.downsample_factor)
        n_hyper = _n_stages(config.hyper_downsample)
        mid = (n_down + 1) // 2

        # analysis: stride-2 stages with residual blocks between, attention
        # mid-encoder, and a final stride-1 latent head
        self.ga_stages = []
        cin = 3
        for i in range(n_down):
            conv = Conv2d(store, f"ga.down{i}", cin, n, 3, stride=2)
            res = ResBlock(store, f"ga.res{i}", n)
            self.ga_stages.append((conv, res))
            cin = n
        self.ga_attn = AttentionBlock(store, "ga.attn", n) if config.use_attention else None
        self.ga_attn_after = mid  # attention placed after this many stages
        self.ga_out = Conv2d(store, "ga.out", n, n, 3)

        # synthesis mirror
        self.gs_in = Conv2d(store, "gs.in", n, n, 3)
        self.gs_res = ResBlock(store, "gs.res", n)
        self.gs_ups = [ConvTranspose2d(store, f"gs.up{i}", n, n, 4, stride=2, pad=1)
                       for i in range(n_down)]
        self.gs_attn = AttentionBlock(store, "gs.attn", n) if config.use_attention else None
        self.gs_attn_after = n_down - mid  # completed upsamples before attention
        self.gs_out = Conv2d(store, "gs.out", n, n, 3)

        # hyper transforms; hyper features twice as wide as the latent
        self.ha_in = Conv2d(store, "ha.in", n, n, 3)
        self.ha_downs = [Conv2d(store, f"ha.down{i}", n, n, 3, stride=2)
                         for i in range(n_hyper)]
        self.ha_out = Conv2d(store, "ha.out", n, n, 3)
        self.hs_ups = [ConvTranspose2d(store, f"hs.up{i}", n, n, 4, stride=2, pad=1)
                       for i in range(n_hyper)]
        self.hs_out = Conv2d(store, "hs.out", n, 2 * n, 3)

        # context models + entropy parameter heads
        self.ctx_y = MaskedConv2d(store, "ctx_y", n, n, 5) if config.use_context_y else None
        self.ctx_x = (MaskedConv2d(store, "ctx_x", 3, n, config.mask_kernel_x)
                      if config.use_context_x else None)
        self.head_y1 = Conv2d(store, "head_y.conv1", 3 * n, 3 * n, 1)
        self.head_y2 = Conv2d(store, "head_y.conv2", 3 * n, 3 * k * n, 1,
                              weight_init="small")
        self.head_x1 = Conv2d(store, "head_x.conv1", 2 * n, 2 * n, 1)
        self.head_x2 = Conv2d(store, "head_x.conv2", 2 * n, 9 * k, 1,
                              weight_init="small")

        # factorized prior over the hyper-latent: three gated affine layers
        for i in range(FactorizedPrior.N_LAYERS):
            store.add(f"prior.h{i}", (n,), "prior_slope")
            store.add(f"prior.b{i}", (n,), "zero")
            store.add(f"prior.a{i}", (n,), "zero")

        self.params = store.params

    # -- initialization ----------------------------------------------------

    def init_random(self, seed: int) -> "Model":
        """Deterministic per-parameter init; independent of sibling params so
        ablation configs share values for the keys they have in common."""
        prior_slope = (1.0 / 10.0) ** (1.0 / FactorizedPrior.N_LAYERS)
        for name, t in self.params.items():
            kind, fan_in = t._init_spec
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            if kind == "zero":
                data = np.zeros(t.data.shape)
            elif kind == "fan_in":
                bound = np.sqrt(3.0 / fan_in)
                data = rng.uniform(-bound, bound, size=t.data.shape)
            elif kind == "small":
                bound = 0.01 * np.sqrt(3.0 / fan_in)
                data = rng.uniform(-bound, bound, size=t.data.shape)
            elif kind == "prior_slope":
                data = np.full(t.data.shape, np.log(np.expm1(prior_slope)))
            else:
                raise ContractViolation(f"unknown init kind {kind}")
            t.data = data
        # parameter-head biases: uniform mixture weights, zero means, unit scales
        raw_unit_scale = float(np.log(np.expm1(1.0 - SCALE_FLOOR)))
        for head, coded_channels in ((self.head_y2, self.config.filters_n),
                                     (self.head_x2, 3)):
            b = np.zeros(head.b.data.shape)
            ck = coded_channels * self.config.mixtures_k
            b[2 * ck:3 * ck] = raw_unit_scale
            head.b.data = b
        return self

    # -- state -------------------------------------------------------------

    def state(self) -> dict:
        return {name: t.data for name, t in self.params.items()}

    def load_state(self, state: dict) -> "Model":
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ContractViolation(
                f"weight key mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, t in self.params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ContractViolation(
                    f"shape mismatch for {name}: {arr.shape} != {t.data.shape}")
            t.data = arr.copy()
        return self

    # -- transforms (Tensor path) -------------------------------------------

    def _check_divisible(self, x_shape):
        h, w = x_shape[2], x_shape[3]
        d = self.config.total_downsample
        if h % d or w % d:
            raise ContractViolation(
                f"spatial dims {h}x{w} not divisible by {d}; pad beforehand")

    def analysis(self, x: Tensor) -> Tensor:
        self._check_divisible(x.shape)
        h = x
        for i, (conv, res) in enumerate(self.ga_stages):
            h = res(T.leaky_relu(conv(h)))
            if self.ga_attn is not None and i + 1 == self.ga_attn_after:
                h = self.ga_attn(h)
        return self.ga_out(h)

    def synthesis(self, y: Tensor) -> Tensor:
        h = self.gs_res(T.leaky_relu(self.gs_in(y)))
        if self.gs_attn is not None and self.gs_attn_after == 0:
            h = self.gs_attn(h)
        for i, up in enumerate(self.gs_ups):
            h = T.leaky_relu(up(h))
            if self.gs_attn is not None and i + 1 == self.gs_attn_after:
                h = self.gs_attn(h)
        return self.gs_out(h)

    def hyper_analysis(self, y: Tensor) -> Tensor:
        h = T.leaky_relu(self.ha_in(y))
        for conv in self.ha_downs:
            h = T.leaky_relu(conv(h))
        return self.ha_out(h)

    def hyper_synthesis(self, z: Tensor) -> Tensor:
        h = z
        for up in self.hs_ups:
            h = T.leaky_relu(up(h))
        return self.hs_out(h)

    # -- entropy parameter heads (Tensor path) -------------------------------

    def _split_params(self, raw: Tensor, coded_channels: int) -> GmmParams:
        k = self.config.mixtures_k
        ck = coded_channels * k
        b, _, h, w = raw.shape
        weights = T.softmax_channel_groups(T.narrow(raw, 1, 0, ck), k)
        means = T.narrow(raw, 1, ck, ck)
        scales = T.add(T.softplus(T.narrow(raw, 1, 2 * ck, ck)), SCALE_FLOOR)

        def to_bkc(t):
            return T.transpose(T.reshape(t, (b, coded_channels, k, h, w)),
                               (0, 2, 1, 3, 4))

        return GmmParams(to_bkc(weights), to_bkc(means), to_bkc(scales))

    def entropy_params_y(self, hyper_features: Tensor, y_ctx_input: Tensor) -> GmmParams:
        n = self.config.filters_n
        if self.ctx_y is not None:
            if y_ctx_input.shape[2:] != hyper_features.shape[2:]:
                raise ContractViolation(
                    f"context/hyper spatial mismatch: {y_ctx_input.shape} vs "
                    f"{hyper_features.shape}")
            ctx = self.ctx_y(y_ctx_input)
        else:
            shape = (hyper_features.shape[0], n) + tuple(hyper_features.shape[2:])
            ctx = Tensor(np.zeros(shape))
        h = T.concat([hyper_features, ctx], axis=1)
        h = T.leaky_relu(self.head_y1(h))
        raw = self.head_y2(h)
        return self._split_params(raw, n)

    def entropy_params_x(self, pixel_features: Tensor, x_ctx_input: Tensor) -> GmmParams:
        n = self.config.filters_n
        if self.ctx_x is not None:
            if x_ctx_input.shape[2:] != pixel_features.shape[2:]:
                raise ContractViolation(
                    f"context/feature spatial mismatch: {x_ctx_input.shape} vs "
                    f"{pixel_features.shape}")
            ctx = self.ctx_x(x_ctx_input)
        else:
            shape = (pixel_features.shape[0], n) + tuple(pixel_features.shape[2:])
            ctx = Tensor(np.zeros(shape))
        h = T.concat([pixel_features, ctx], axis=1)
        h = T.leaky_relu(self.head_x1(h))
        raw = self.head_x2(h)
        return self._split_params(raw, 3)

    # -- factorized prior ----------------------------------------------------

    def prior_cdf(self, v: Tensor) -> Tensor:
        """Cumulative of the factorized prior at values [B, C, h, w]."""
        u = v
        for i in range(FactorizedPrior.N_LAYERS):
            h = T.reshape(self.params[f"prior.h{i}"], (1, -1, 1, 1))
            b = T.reshape(self.params[f"prior.b{i}"], (1, -1, 1, 1))
            a = T.reshape(self.params[f"prior.a{i}"], (1, -1, 1, 1))
            t = T.add(T.mul(T.softplus(h), u), b)
            u = T.add(t, T.mul(T.tanh(a), T.tanh(t)))
        return T.sigmoid(u)

    def prior_np(self) -> FactorizedPrior:
        return FactorizedPrior(
            h_layers=[self.params[f"prior.h{i}"].data for i in range(3)],
            b_layers=[self.params[f"prior.b{i}"].data for i in range(3)],
            a_layers=[self.params[f"prior.a{i}"].data for i in range(3)],
        )

    # -- numpy mirrors (coding path) ------------------------------------------

    def analysis_np(self, x):
        self._check_divisible(x.shape)
        h = x
        for i, (conv, res) in enumerate(self.ga_stages):
            h = res.apply_np(leaky_relu_np(conv.apply_np(h)))
            if self.ga_attn is not None and i + 1 == self.ga_attn_after:
                h = self.ga_attn.apply_np(h)
        return self.ga_out.apply_np(h)

    def synthesis_np(self, y):
        h = self.gs_res.apply_np(leaky_relu_np(self.gs_in.apply_np(y)))
        if self.gs_attn is not None and self.gs_attn_after == 0:
            h = self.gs_attn.apply_np(h)
        for i, up in enumerate(self.gs_ups):
            h = leaky_relu_np(up.apply_np(h))
            if self.gs_attn is not None and i + 1 == self.gs_attn_after:
                h = self.gs_attn.apply_np(h)
        return self.gs_out.apply_np(h)

    def hyper_analysis_np(self, y):
        h = leaky_relu_np(self.ha_in.apply_np(y))
        for conv in self.ha_downs:
            h = leaky_relu_np(conv.apply_np(h))
        return self.ha_out.apply_np(h)

    def hyper_synthesis_np(self, z):
        h = z
        for up in self.hs_ups:
            h = leaky_relu_np(up.apply_np(h))
        return self.hs_out.apply_np(h)

    def _split_params_np(self, raw, coded_channels):
        k = self.config.mixtures_k
        ck = coded_channels * k
        b, _, h, w = raw.shape
        logits = raw[:, :ck].reshape(b, coded_channels, k, h, w)
        logits = logits - logits.max(axis=2, keepdims=True)
        e = np.exp(logits)
        weights = e / e.sum(axis=2, keepdims=True)
        means = raw[:, ck:2 * ck].reshape(b, coded_channels, k, h, w)
        scales = softplus_np(raw[:, 2 * ck:3 * ck]).reshape(b, coded_channels, k, h, w) \
            + SCALE_FLOOR
        return GmmParams(weights.transpose(0, 2, 1, 3, 4),
                         means.transpose(0, 2, 1, 3, 4),
                         scales.transpose(0, 2, 1, 3, 4))

    def entropy_params_y_np(self, hyper_features, y_ctx_input) -> GmmParams:
        n = self.config.filters_n
        if self.ctx_y is not None:
            ctx = self.ctx_y.apply_np(y_ctx_input)
        else:
            ctx = np.zeros((hyper_features.shape[0], n) + hyper_features.shape[2:])
        h = np.concatenate([hyper_features, ctx], axis=1)
        h = leaky_relu_np(self.head_y1.apply_np(h))
        return self._split_params_np(self.head_y2.apply_np(h), n)

    def entropy_params_x_np(self, pixel_features, x_ctx_input) -> GmmParams:
        n = self.config.filters_n
        if self.ctx_x is not None:
            ctx = self.ctx_x.apply_np(x_ctx_input)
        else:
            ctx = np.zeros((pixel_features.shape[0], n) + pixel_features.shape[2:])
        h = np.concatenate([pixel_features, ctx], axis=1)
        h = leaky_relu_np(self.head_x1.apply_np(h))
        return self._split_params_np(self.head_x2.apply_np(h), 3)


def init_weights(config: ModelConfig, seed: int) -> Model:
    return Model(config).init_random(seed)


# ---------------------------------------------------------------------------
# weight serialization ("NLW1")
# ---------------------------------------------------------------------------


def serialize_weights(model: Model) -> bytes:
    """Magic, embedded canonical config text, length-prefixed manifest of
    (key, shape, offset), then raw little-endian float64 data."""
    config_text = canonical_config_text(model.config).encode()
    manifest = bytearray()
    data = bytearray()
    state = model.state()
    manifest += struct.pack("<I", len(state))
    for name, arr in state.items():
        key = name.encode()
        manifest += struct.pack("<H", len(key)) + key
        manifest += struct.pack("<B", arr.ndim)
        manifest += struct.pack(f"<{arr.ndim}I", *arr.shape)
        manifest += struct.pack("<Q", len(data))
        data += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    out = bytearray()
    out += WEIGHTS_MAGIC
    out += struct.pack("<I", len(config_text)) + config_text
    out += manifest
    out += struct.pack("<Q", len(data)) + data
    return bytes(out)


def deserialize_weights(blob: bytes) -> Model:
    if blob[:4] != WEIGHTS_MAGIC:
        raise ContractViolation(f"bad weights magic {blob[:4]!r}")
    off = 4
    (cfg_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    config = parse_config_text(blob[off:off + cfg_len].decode())
    off += cfg_len
    (n_params,) = struct.unpack_from("<I", blob, off)
    off += 4
    entries = []
    for _ in range(n_params):
        (key_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        key = blob[off:off + key_len].decode()
        off += key_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        (data_off,) = struct.unpack_from("<Q", blob, off)
        off += 8
        entries.append((key, shape, data_off))
    (data_len,) = struct.unpack_from("<Q", blob, off)
    off += 8
    data = blob[off:off + data_len]
    if len(data) != data_len:
        raise ContractViolation("weights file truncated")
    state = {}
    for key, shape, data_off in entries:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=data_off)
        state[key] = arr.reshape(shape).astype(np.float64)
    return Model(config).load_state(state)


def weight_hash(model: Model) -> bytes:
    return hashlib.sha256(serialize_weights(model)).digest()


def save_weights(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_weights(model))


def load_weights(path) -> Model:
    with open(path, "rb") as fh:
        return deserialize_weights(fh.read())
