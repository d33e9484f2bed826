"""Multi-scale anchor network, its compact encoder variant and checkpoint files."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .anchors import FAMILIES, AnchorTensor, ExtractorParams, FamilyLayout, extract_all, make_layout
from .io import FormatError, atomic_write
from .correction import BlockContext, CorrectionBundle, CorrectionHead, assemble_views
from .nn import MLP, Conv1d, Linear, Module, ScoreAttention
from .tensor import Tensor, as_tensor, ops, rdft


# -- configuration -----------------------------------------------------------

@dataclass
class ModelConfig:
    n_channels: int
    length: int
    n_classes: int
    block_sizes: tuple[int, ...] = (32, 128)
    strides: tuple[int, ...] | None = None
    n_views: int = 4
    d_proj: int = 128
    d_ctx: int = 256
    d_block: int = 16
    time_kernels: tuple[int, ...] = (5, 11, 21)
    time_filters: int = 32
    fft_sizes: tuple[int, ...] = (32, 64, 128)
    freq_channels: int = 8
    mixer_width: int = 64
    skip_oversized_fft: bool = False
    sensor_groups: tuple[tuple[int, ...], ...] | None = None
    context_pooling: str = "channels"
    disable_time: bool = False
    disable_freq: bool = False
    disable_correction: bool = False
    s_max: float = 0.5
    b_max: float = 0.5
    alpha_init: float = -2.0
    sampling_rate: float = 1.0
    tau: float = 0.1
    n_filters: int = 8
    seed: int = 0

    def __post_init__(self):
        self.block_sizes = tuple(int(m) for m in self.block_sizes)
        self.strides = tuple(int(s) for s in (self.strides or self.block_sizes))
        self.time_kernels = tuple(int(k) for k in self.time_kernels)
        self.fft_sizes = tuple(int(n) for n in self.fft_sizes)
        if self.sensor_groups is None:
            c = self.n_channels
            self.sensor_groups = tuple(tuple(range(i, min(i + 3, c))) for i in range(0, c, 3))
        else:
            self.sensor_groups = tuple(tuple(int(i) for i in g) for g in self.sensor_groups)
        self.validate()

    def validate(self) -> None:
        if min(self.n_channels, self.length, self.n_classes) < 1:
            raise ValueError("config: channels, length and classes must be positive")
        if not self.block_sizes or len(self.block_sizes) != len(self.strides):
            raise ValueError("config: need one stride per block size")
        for m, s in zip(self.block_sizes, self.strides):
            if m > self.length:
                raise ValueError(f"config: block size {m} exceeds window length {self.length}")
            if s < 1:
                raise ValueError(f"config: stride must be >= 1, got {s}")
        if self.n_views < 1:
            raise ValueError("config: n_views must be >= 1")
        flat = sorted(i for g in self.sensor_groups for i in g)
        if flat != list(range(self.n_channels)) or any(len(g) == 0 for g in self.sensor_groups):
            raise ValueError(f"config: sensor groups {self.sensor_groups} do not partition {self.n_channels} channels")
        if self.d_proj < len(FAMILIES):
            raise ValueError(f"config: d_proj must be >= {len(FAMILIES)}")
        if self.context_pooling not in ("channels", "groups"):
            raise ValueError("config: context_pooling must be 'channels' or 'groups'")

    @property
    def effective_views(self) -> int:
        return 1 if self.disable_correction else self.n_views

    def usable_fft_sizes(self) -> tuple[int, ...]:
        sizes = tuple(n for n in self.fft_sizes if n <= self.length)
        if len(sizes) != len(self.fft_sizes) and not self.skip_oversized_fft:
            raise ValueError(
                f"config: FFT sizes {self.fft_sizes} exceed window length {self.length}; "
                "set skip_oversized_fft to drop them"
            )
        if not sizes:
            raise ValueError(f"config: no FFT size fits window length {self.length}")
        return sizes

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: (list(map(list, v)) if k == "sensor_groups" else list(v) if isinstance(v, tuple) else v)
                for k, v in d.items()}

    @classmethod
    def from_json(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"config: unknown keys {sorted(unknown)}")
        return cls(**data)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


# -- blocking ----------------------------------------------------------------

def n_blocks(length: int, block: int, stride: int) -> int:
    if block > length:
        raise ValueError(f"blocking: block size {block} exceeds window length {length}")
    if stride < 1:
        raise ValueError(f"blocking: stride must be >= 1, got {stride}")
    return (length - block) // stride + 1


def unfold_blocks(x, block: int, stride: int) -> Tensor:
    """(B, C, L) -> (B, N, m, C); block n covers samples [n*stride, n*stride + m)."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ValueError(f"blocking: expected (B, C, L), got {x.shape}")
    n = n_blocks(x.shape[-1], block, stride)
    blocks = ops.stack([x[:, :, i * stride:i * stride + block] for i in range(n)], axis=1)
    return ops.swapaxes(blocks, -1, -2)


# -- context branches --------------------------------------------------------

class TimeBranch(Module):
    """Parallel same-padded convolutions, tanh, global average pool, MLP."""

    def __init__(self, n_channels: int, kernels, filters: int, out_dim: int, rng):
        super().__init__()
        self.kernels = tuple(kernels)
        self.convs = [self.add_child(f"conv{k}", Conv1d(n_channels, filters, k, rng)) for k in self.kernels]
        self.mlp = self.add_child("mlp", MLP(filters * len(self.kernels), out_dim, out_dim, rng))

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] < max(self.kernels):
            raise ValueError(f"time branch: window length {x.shape[-1]} is below kernel size {max(self.kernels)}")
        pooled = [ops.mean(ops.tanh(conv(x)), axis=-1) for conv in self.convs]
        return self.mlp(ops.concat(pooled, axis=-1))


def hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def log_spectrogram(x, n_fft: int) -> Tensor:
    """log(1 + |STFT|^2) with a Hann window and hop n_fft/2: (B, C, L) -> (B, C, T, n_fft/2+1).

    Trailing samples that do not fill a frame are dropped.
    """
    x = as_tensor(x)
    length = x.shape[-1]
    if length < n_fft:
        raise ValueError(f"spectrogram: window length {length} is below FFT size {n_fft}")
    hop = n_fft // 2
    n_frames = (length - n_fft) // hop + 1
    frames = ops.stack([x[..., i * hop:i * hop + n_fft] for i in range(n_frames)], axis=-2)
    re, im = rdft(frames * hann(n_fft))
    return ops.log1p(re * re + im * im)


class MixerLite(Module):
    """One token-mixing and one channel-mixing residual MLP over frame tokens."""

    def __init__(self, n_tokens: int, n_features: int, width: int, rng):
        super().__init__()
        self.embed = self.add_child("embed", Linear(n_features, width, rng))
        self.token_mix = self.add_child("token_mix", MLP(n_tokens, n_tokens, n_tokens, rng))
        self.channel_mix = self.add_child("channel_mix", MLP(width, width, width, rng))

    def __call__(self, tokens: Tensor) -> Tensor:
        h = self.embed(tokens)
        h = h + ops.swapaxes(self.token_mix(ops.swapaxes(h, -1, -2)), -1, -2)
        h = h + self.channel_mix(h)
        return ops.mean(h, axis=-2)


class FreqBranch(Module):
    """Per FFT size: log spectrogram, 1x1 channel mix, mixer, MLP; averaged over sizes."""

    def __init__(self, n_channels: int, length: int, fft_sizes, mix_channels: int, width: int, out_dim: int, rng):
        super().__init__()
        self.fft_sizes = tuple(fft_sizes)
        self.mix_channels = mix_channels
        self.stages = []
        for n in self.fft_sizes:
            stage = Module()
            stage.mix = stage.add_child("mix", Linear(n_channels, mix_channels, rng))
            n_tokens = (length - n) // (n // 2) + 1
            stage.mixer = stage.add_child("mixer", MixerLite(n_tokens, mix_channels * (n // 2 + 1), width, rng))
            stage.head = stage.add_child("head", MLP(width, out_dim, out_dim, rng))
            self.stages.append(self.add_child(f"fft{n}", stage))

    def __call__(self, x) -> Tensor:
        outs = []
        for n, stage in zip(self.fft_sizes, self.stages):
            spec = log_spectrogram(x, n)                          # B, C, T, F
            mixed = stage.mix(ops.transpose(spec, (0, 2, 3, 1)))  # B, T, F, Cm
            b, t, f, cm = mixed.shape
            outs.append(stage.head(stage.mixer(ops.reshape(mixed, (b, t, f * cm)))))
        total = outs[0]
        for o in outs[1:]:
            total = total + o
        return total * (1.0 / len(outs))


# -- fusion ------------------------------------------------------------------

def projection_widths(d_proj: int, n_families: int) -> list[int]:
    base = d_proj // n_families
    return [base] * (n_families - 1) + [d_proj - base * (n_families - 1)]


class GroupProjection(Module):
    """One linear map per family, outputs concatenated to d_proj."""

    def __init__(self, layout: FamilyLayout, d_proj: int, rng):
        super().__init__()
        self.layout = layout
        widths = projection_widths(d_proj, len(layout))
        self.maps = [self.add_child(name, Linear(stop - start, w, rng))
                     for (name, start, stop), w in zip(layout.families, widths)]

    def __call__(self, z) -> Tensor:
        z = as_tensor(z)
        if z.shape[-1] != self.layout.width:
            raise ValueError(f"group projection: input width {z.shape[-1]} does not match layout {self.layout.width}")
        parts = [lin(z[..., start:stop]) for lin, (_, start, stop) in zip(self.maps, self.layout.families)]
        return ops.concat(parts, axis=-1)


def group_project(z_multi, projection: GroupProjection) -> Tensor:
    return projection(z_multi)


class ViewGroupAttention(Module):
    """Average channels within each sensor group, attend over views, then over groups."""

    def __init__(self, d_proj: int, rng):
        super().__init__()
        self.views = self.add_child("views", ScoreAttention(d_proj, rng))
        self.groups = self.add_child("groups", ScoreAttention(d_proj, rng))

    def __call__(self, h_proj, sensor_groups, n_views: int) -> tuple[Tensor, Tensor, Tensor]:
        h = as_tensor(h_proj)
        b, n, kc, d = h.shape
        c = kc // n_views
        h = ops.reshape(h, (b, n, n_views, c, d))
        grouped = ops.stack([ops.mean(h[:, :, :, list(g), :], axis=3) for g in sensor_groups], axis=3)  # B,N,K,G,D
        fused, view_w = self.views(grouped, axis=2)       # B,N,G,D
        block, group_w = self.groups(fused, axis=2)       # B,N,D
        return block, view_w, group_w


def attend_views_groups(h_proj, sensor_groups, n_views: int, attention: ViewGroupAttention):
    return attention(h_proj, sensor_groups, n_views)


def pool_blocks(h_blk, attention: ScoreAttention) -> tuple[Tensor, Tensor]:
    """Softmax-weighted sum over blocks: (B, N, D) -> (B, D)."""
    return attention(as_tensor(h_blk), axis=1)


class Classifier(Module):
    """phi projection, two residual tanh blocks, output layer."""

    def __init__(self, n_in: int, width: int, n_classes: int, rng):
        super().__init__()
        self.phi = self.add_child("phi", Linear(n_in, width, rng))
        self.res1 = self.add_child("res1", Linear(width, width, rng))
        self.res2 = self.add_child("res2", Linear(width, width, rng))
        self.out = self.add_child("out", Linear(width, n_classes, rng))

    def __call__(self, scale_vectors) -> Tensor:
        h = self.phi(ops.concat(list(scale_vectors), axis=-1))
        h = h + ops.tanh(self.res1(h))
        h = h + ops.tanh(self.res2(h))
        return self.out(h)


def classify_multiscale(scale_vectors, classifier: Classifier) -> Tensor:
    return classifier(scale_vectors)


# -- full model --------------------------------------------------------------

def _extractor_module(owner: Module, n_filters: int, sampling_rate: float, tau: float) -> ExtractorParams:
    base = ExtractorParams.default(n_filters=n_filters, sampling_rate=sampling_rate)
    band = owner.add_param("band_logits", base.band_logits.data)
    win = owner.add_param("window_logit", base.window_logit.data)
    return dataclasses.replace(base, band_logits=band, window_logit=win).with_temperature(tau)


def standardize(z: Tensor, mean: np.ndarray, scale: np.ndarray) -> Tensor:
    return (z - mean) * (1.0 / scale)


def anchor_scaling(values: np.ndarray, floor: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and spread over every leading axis."""
    flat = values.reshape(-1, values.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    return mean, np.where(std > floor, std, 1.0)


class ScaleBranch(Module):
    """Everything that runs per block size: correction, projection and attention."""

    def __init__(self, cfg: ModelConfig, block: int, stride: int, extractor: ExtractorParams, rng):
        super().__init__()
        self.block, self.stride = block, stride
        self.layout = make_layout(extractor, block)
        width = self.layout.width
        self.add_buffer("anchor_mean", np.zeros(width))
        self.add_buffer("anchor_scale", np.ones(width))
        self.heads = []
        if cfg.effective_views > 1:
            self.context = self.add_child("context", BlockContext(
                width, cfg.d_block, rng, pooling=cfg.context_pooling, groups=cfg.sensor_groups))
            ctx_dim = 2 * cfg.d_ctx + cfg.d_block
            self.heads = [self.add_child(f"head{k}", CorrectionHead(
                ctx_dim, cfg.n_channels, len(FAMILIES), rng, hidden=max(cfg.d_ctx // 2, 1), alpha_init=cfg.alpha_init))
                for k in range(1, cfg.effective_views)]
        self.projection = self.add_child("projection", GroupProjection(self.layout, cfg.d_proj, rng))
        self.fusion = self.add_child("fusion", ViewGroupAttention(cfg.d_proj, rng))
        self.blocks = self.add_child("blocks", ScoreAttention(cfg.d_proj, rng))

    def standardized(self, z: Tensor) -> Tensor:
        return standardize(z, self.buffer("anchor_mean"), self.buffer("anchor_scale"))


@dataclass
class ForwardOutput:
    logits: Tensor
    bundles: list[CorrectionBundle]
    raw: list[AnchorTensor]
    attention: dict = field(default_factory=dict)


class TCNet(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        ext = Module()
        self.extractor = _extractor_module(ext, cfg.n_filters, cfg.sampling_rate, cfg.tau)
        self.add_child("extractor", ext)
        if not cfg.disable_time:
            self.time = self.add_child("time", TimeBranch(cfg.n_channels, cfg.time_kernels, cfg.time_filters, cfg.d_ctx, rng))
        if not cfg.disable_freq:
            self.freq = self.add_child("freq", FreqBranch(
                cfg.n_channels, cfg.length, cfg.usable_fft_sizes(), cfg.freq_channels, cfg.mixer_width, cfg.d_ctx, rng))
        self.scales = [self.add_child(f"scale{m}", ScaleBranch(cfg, m, s, self.extractor, rng))
                       for m, s in zip(cfg.block_sizes, cfg.strides)]
        self.classifier = self.add_child("classifier", Classifier(
            cfg.d_proj * len(self.scales), cfg.d_proj, cfg.n_classes, rng))

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 3 or x.shape[1:] != (self.cfg.n_channels, self.cfg.length):
            raise ValueError(
                f"input shape {x.shape} does not match config (B, {self.cfg.n_channels}, {self.cfg.length})"
            )

    def global_context(self, x: Tensor) -> Tensor:
        b, d = x.shape[0], self.cfg.d_ctx
        h_time = self.time(x) if not self.cfg.disable_time else Tensor(np.zeros((b, d)))
        h_freq = self.freq(x) if not self.cfg.disable_freq else Tensor(np.zeros((b, d)))
        return ops.concat([h_time, h_freq], axis=-1)

    def raw_anchors(self, x, scale: ScaleBranch, mode: str = "soft") -> AnchorTensor:
        return extract_all(unfold_blocks(x, scale.block, scale.stride), self.extractor, mode)

    def fit_anchor_scaling(self, windows: np.ndarray, batch: int = 128) -> None:
        """Freeze per-feature anchor standardization from (a sample of) training windows."""
        for scale in self.scales:
            chunks = [self.raw_anchors(Tensor(windows[i:i + batch]), scale).values.data
                      for i in range(0, len(windows), batch)]
            mean, spread = anchor_scaling(np.concatenate(chunks, axis=0))
            scale.buffer("anchor_mean")[...] = mean
            scale.buffer("anchor_scale")[...] = spread

    def __call__(self, x) -> ForwardOutput:
        return forward(self, x)


def forward(model: TCNet, x) -> ForwardOutput:
    """Windows (B, C, L) -> logits plus the per-scale correction bundles."""
    cfg = model.cfg
    x = as_tensor(x)
    model.check_input(x)
    h_global = model.global_context(x)
    bundles, raws, scale_vectors, attn = [], [], [], {}
    for scale in model.scales:
        z_raw = model.raw_anchors(x, scale)
        n = z_raw.values.shape[1]
        h_ctx = None
        if scale.heads:
            h_blk = scale.context(scale.standardized(z_raw.values))
            h_g = ops.broadcast_to(ops.reshape(h_global, (h_global.shape[0], 1, h_global.shape[1])),
                                   (h_global.shape[0], n, h_global.shape[1]))
            h_ctx = ops.concat([h_g, h_blk], axis=-1)
        bundle = assemble_views(z_raw, scale.heads, h_ctx, cfg.s_max, cfg.b_max)
        h_proj = scale.projection(scale.standardized(bundle.z_multi))
        h_blk, view_w, group_w = scale.fusion(h_proj, cfg.sensor_groups, bundle.n_views)
        h_scale, block_w = pool_blocks(h_blk, scale.blocks)
        attn[scale.block] = {"views": view_w.data, "groups": group_w.data, "blocks": block_w.data}
        bundles.append(bundle)
        raws.append(z_raw)
        scale_vectors.append(h_scale)
    logits = model.classifier(scale_vectors)
    return ForwardOutput(logits=logits, bundles=bundles, raw=raws, attention=attn)


# -- compact encoder ---------------------------------------------------------

@dataclass
class CompactConfig:
    length: int = 128
    block_size: int = 32
    d_time: int = 64
    time_kernel: int = 7
    time_layers: int = 2
    n_fft: int = 64
    d_freq: int = 64
    freq_channels: int = 8
    mixer_width: int = 64
    d_block: int = 16
    d_content: int = 128
    d_tsf: int = 128
    head_hidden: int = 64
    s_max: float = 0.5
    b_max: float = 0.5
    alpha_init: float = -2.0
    sampling_rate: float = 1.0
    tau: float = 0.1
    seed: int = 0

    @property
    def width(self) -> int:
        return self.d_content + self.d_tsf

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "CompactConfig":
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"compact config: unknown keys {sorted(unknown)}")
        return cls(**data)


class CompactEncoder(Module):
    """Tri-axial encoder: conv stack, one spectrogram branch, one correction view."""

    n_channels = 3

    def __init__(self, cfg: CompactConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        ext = Module()
        self.extractor = _extractor_module(ext, 8, cfg.sampling_rate, cfg.tau)
        self.add_child("extractor", ext)
        self.layout = make_layout(self.extractor, cfg.block_size)
        width = self.layout.width
        self.add_buffer("anchor_mean", np.zeros(width))
        self.add_buffer("anchor_scale", np.ones(width))
        chans = [3] + [cfg.d_time] * cfg.time_layers
        self.convs = [self.add_child(f"conv{i}", Conv1d(chans[i], chans[i + 1], cfg.time_kernel, rng))
                      for i in range(cfg.time_layers)]
        self.freq = self.add_child("freq", FreqBranch(
            3, cfg.length, (cfg.n_fft,), cfg.freq_channels, cfg.mixer_width, cfg.d_freq, rng))
        self.context = self.add_child("context", BlockContext(width, cfg.d_block, rng))
        ctx_dim = cfg.d_time + cfg.d_freq + cfg.d_block
        self.head = self.add_child("head", CorrectionHead(ctx_dim, 3, len(FAMILIES), rng, alpha_init=cfg.alpha_init))
        self.tsf_proj = self.add_child("tsf_proj", Linear(width, cfg.d_tsf, rng))
        self.content = self.add_child("content", MLP(cfg.d_time + cfg.d_freq + width, cfg.d_content, cfg.d_content, rng))

    def raw_anchors(self, x, mode: str = "soft") -> AnchorTensor:
        return extract_all(unfold_blocks(x, self.cfg.block_size, self.cfg.block_size), self.extractor, mode)

    def fit_anchor_scaling(self, windows: np.ndarray, batch: int = 256) -> None:
        chunks = [self.raw_anchors(Tensor(windows[i:i + batch])).values.data for i in range(0, len(windows), batch)]
        mean, spread = anchor_scaling(np.concatenate(chunks, axis=0))
        self.buffer("anchor_mean")[...] = mean
        self.buffer("anchor_scale")[...] = spread

    def __call__(self, x) -> tuple[Tensor, CorrectionBundle]:
        return forward_compact(self, x)


def forward_compact(model: CompactEncoder, x) -> tuple[Tensor, CorrectionBundle]:
    """(B, 3, L) -> (B, 256) frozen representation and the correction bundle."""
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] != 3:
        raise ValueError(f"compact encoder: expected a tri-axial (B, 3, L) input, got {x.shape}")
    if x.shape[2] != model.cfg.length:
        raise ValueError(f"compact encoder: window length {x.shape[2]} != configured {model.cfg.length}")
    h = x
    for conv in model.convs:
        h = ops.tanh(conv(h))
    h_time = ops.mean(h, axis=-1)
    h_freq = model.freq(x)
    h_global = ops.concat([h_time, h_freq], axis=-1)

    z_raw = model.raw_anchors(x)
    mean, spread = model.buffer("anchor_mean"), model.buffer("anchor_scale")
    n = z_raw.values.shape[1]
    h_blk = model.context(standardize(z_raw.values, mean, spread))
    h_g = ops.broadcast_to(ops.reshape(h_global, (x.shape[0], 1, h_global.shape[1])), (x.shape[0], n, h_global.shape[1]))
    bundle = assemble_views(z_raw, [model.head], ops.concat([h_g, h_blk], axis=-1), model.cfg.s_max, model.cfg.b_max)
    corrected = standardize(bundle.view(1), mean, spread)
    pooled = ops.mean(corrected, axis=(1, 2))                 # mean over blocks and channels
    content = model.content(ops.concat([h_time, h_freq, pooled], axis=-1))
    rep = ops.concat([content, model.tsf_proj(pooled)], axis=-1)
    return rep, bundle


class PretextHeads(Module):
    """Three binary heads (reversal, permutation, warp) on the frozen representation."""

    names = ("aot", "permute", "warp")

    def __init__(self, width: int, hidden: int, rng):
        super().__init__()
        self.heads = [self.add_child(n, MLP(width, hidden, 1, rng)) for n in self.names]

    def __call__(self, rep: Tensor) -> Tensor:
        return ops.concat([h(rep) for h in self.heads], axis=-1)


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"TCNM"
CHECKPOINT_VERSION = 1


def _write_records(fh, state: dict[str, np.ndarray]) -> None:
    fh.write(np.uint32(len(state)).tobytes())
    for name, arr in state.items():
        arr = np.asarray(arr)
        key = name.encode("utf-8")
        fh.write(np.uint32(len(key)).tobytes() + key)
        fh.write(np.uint32(arr.ndim).tobytes())
        fh.write(np.asarray(arr.shape, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_records(buf: memoryview, pos: int, what: str) -> tuple[dict[str, np.ndarray], int]:
    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError("truncated payload", f"{what} ends at byte {len(buf)}, needed {pos + n}")
        out = bytes(buf[pos:pos + n])
        pos += n
        return out

    count = int(np.frombuffer(take(4), "<u4")[0])
    state = {}
    for _ in range(count):
        name_len = int(np.frombuffer(take(4), "<u4")[0])
        name = take(name_len).decode("utf-8")
        rank = int(np.frombuffer(take(4), "<u4")[0])
        shape = tuple(int(v) for v in np.frombuffer(take(4 * rank), "<u4"))
        n = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(take(4 * n), "<f4").reshape(shape).astype(np.float64)
    return state, pos


def save_checkpoint(model: Module, path: str, kind: str | None = None) -> None:
    """Write magic, version, JSON config blob, then float32 parameter records (atomically)."""
    kind = kind or ("compact" if isinstance(model, CompactEncoder) else "tcnet")
    meta = json.dumps({"kind": kind, "config": model.cfg.to_json()}, sort_keys=True).encode("utf-8")

    def write(fh):
        fh.write(CHECKPOINT_MAGIC + np.uint32(CHECKPOINT_VERSION).tobytes())
        fh.write(np.uint32(len(meta)).tobytes() + meta)
        _write_records(fh, model.state_dict())

    atomic_write(path, write)


def load_checkpoint(path: str) -> Module:
    with open(path, "rb") as fh:
        buf = memoryview(fh.read())
    if bytes(buf[:4]) != CHECKPOINT_MAGIC:
        raise FormatError("unrecognized format", f"{path} is not a model checkpoint")
    if len(buf) < 12:
        raise FormatError("truncated payload", f"{path} ends inside the header")
    version = int(np.frombuffer(bytes(buf[4:8]), "<u4")[0])
    if version != CHECKPOINT_VERSION:
        raise FormatError("version mismatch", f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    meta_len = int(np.frombuffer(bytes(buf[8:12]), "<u4")[0])
    if 12 + meta_len > len(buf):
        raise FormatError("truncated payload", f"{path} ends inside the config blob")
    meta = json.loads(bytes(buf[12:12 + meta_len]).decode("utf-8"))
    state, pos = _read_records(buf, 12 + meta_len, "checkpoint")
    if pos != len(buf):
        raise FormatError("corrupt header", "trailing bytes after last record")
    if meta["kind"] == "compact":
        model = CompactEncoder(CompactConfig.from_json(meta["config"]))
    elif meta["kind"] == "tcnet":
        model = TCNet(ModelConfig.from_json(meta["config"]))
    else:
        raise FormatError("corrupt header", f"unknown model kind {meta['kind']!r}")
    model.load_state_dict(state)
    return model
