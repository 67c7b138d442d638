"""Multi-resolution segmentation network for 5-band stacks.

Four stages of parallel streams. Stage ``t`` carries ``min(t, len(widths))``
branches; a new branch is spawned from the lowest-resolution one at every
stage transition. Connections leaving the full-resolution branch use a
stride-3 convolution, all other resolution steps use stride 2, so for a stem
output of size R the branch sizes are::

    R, ceil(R/3), ceil(ceil(R/3)/2), ceil(ceil(ceil(R/3)/2)/2)

Block convolutions of stages 2 and 3 are dilated (dilation 2, padding 2),
which leaves every tensor shape unchanged. After stage 4 all branches are
upsampled to branch-1 resolution and concatenated; an auxiliary head yields
coarse logits that drive an object-contextual attention head, followed by
the main classifier.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, StatsError
from .raster import IGNORE, LabelMask, MultispectralImage
from .tensor import BatchNormState, ConvSpec, Var


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 5
    num_classes: int = 2
    num_stages: int = 4
    branch_widths: tuple = (8, 16, 32, 64)
    blocks_per_branch: int = 2
    stem_downsample: int = 4
    stage1_fusion_stride: int = 3
    other_fusion_stride: int = 2
    dilated_stages: tuple = (2, 3)
    dilation: int = 2
    ocr_enabled: bool = True
    ocr_key_channels: int = 16
    ocr_mid_channels: int = 32
    aux_loss_weight: float = 0.4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "branch_widths", tuple(int(w) for w in self.branch_widths))
        object.__setattr__(self, "dilated_stages", tuple(int(s) for s in self.dilated_stages))
        self.validate()

    def validate(self):
        if self.num_stages != 4:
            raise ConfigError("the network always has 4 stages")
        w = self.branch_widths
        if not 1 <= len(w) <= 4:
            raise ConfigError("branch_widths needs between 1 and 4 entries")
        if any(x < 1 for x in w):
            raise ConfigError(f"branch widths must be positive: {w}")
        if any(b <= a for a, b in zip(w, w[1:])):
            raise ConfigError(f"branch widths must strictly increase: {w}")
        if self.stem_downsample not in (1, 4):
            raise ConfigError("stem_downsample must be 1 or 4")
        if self.in_channels < 1 or self.num_classes < 2:
            raise ConfigError("need in_channels >= 1 and num_classes >= 2")
        if self.blocks_per_branch < 1:
            raise ConfigError("blocks_per_branch must be >= 1")
        if self.stage1_fusion_stride < 1 or self.other_fusion_stride < 1:
            raise ConfigError("fusion strides must be >= 1")
        if self.dilation < 1 or any(s not in (1, 2, 3, 4) for s in self.dilated_stages):
            raise ConfigError("invalid dilation settings")
        if self.ocr_key_channels < 1 or self.ocr_mid_channels < 1:
            raise ConfigError("OCR channel counts must be positive")
        if self.aux_loss_weight < 0:
            raise ConfigError("aux_loss_weight must be >= 0")

    @property
    def num_branches(self) -> int:
        return len(self.branch_widths)

    @property
    def min_input_size(self) -> int:
        return 12 * self.stem_downsample

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["branch_widths"] = list(self.branch_widths)
        d["dilated_stages"] = list(self.dilated_stages)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


def branch_sizes(stem_size: int, config: ModelConfig) -> list[int]:
    """Spatial size of every branch for a stem output of ``stem_size``."""
    sizes = [stem_size]
    for b in range(1, config.num_branches):
        s = config.stage1_fusion_stride if b == 1 else config.other_fusion_stride
        sizes.append(math.ceil(sizes[-1] / s))
    return sizes


# ---------------------------------------------------------------------------
# layers: stateless descriptors; parameters live in the Model


class Context:
    """Parameter/buffer lookup for one forward pass."""

    def __init__(self, params: Mapping[str, Var], buffers: Mapping[str, BatchNormState],
                 training: bool):
        self.params = params
        self.buffers = buffers
        self.training = training
        self.probes: dict[str, object] = {}


class Conv:
    def __init__(self, name, cin, cout, kernel=3, stride=1, dilation=1, padding=None, bias=False):
        if padding is None:
            padding = dilation * (kernel // 2)
        self.name = name
        self.spec = ConvSpec(cin, cout, kernel, stride, dilation, padding, bias)

    def init(self, rng, params, buffers):
        shape = self.spec.weight_shape
        fan_in = shape[1] * shape[2] * shape[3]
        bound = math.sqrt(6.0 / fan_in)
        params[f"{self.name}.weight"] = rng.uniform(-bound, bound, size=shape)
        if self.spec.has_bias:
            params[f"{self.name}.bias"] = np.zeros(shape[0])

    def __call__(self, ctx, x):
        bias = ctx.params[f"{self.name}.bias"] if self.spec.has_bias else None
        return T.conv2d(x, ctx.params[f"{self.name}.weight"], bias, self.spec)


class BatchNorm:
    def __init__(self, name, channels):
        self.name = name
        self.channels = channels

    def init(self, rng, params, buffers):
        params[f"{self.name}.gamma"] = np.ones(self.channels)
        params[f"{self.name}.beta"] = np.zeros(self.channels)
        buffers[self.name] = BatchNormState(self.channels)

    def __call__(self, ctx, x):
        return T.batch_norm(
            x, ctx.params[f"{self.name}.gamma"], ctx.params[f"{self.name}.beta"],
            ctx.buffers[self.name], ctx.training,
        )


class ConvBN:
    def __init__(self, name, cin, cout, kernel=3, stride=1, dilation=1, relu=True):
        self.conv = Conv(f"{name}.conv", cin, cout, kernel, stride, dilation)
        self.bn = BatchNorm(f"{name}.bn", cout)
        self.relu = relu

    def init(self, rng, params, buffers):
        self.conv.init(rng, params, buffers)
        self.bn.init(rng, params, buffers)

    def __call__(self, ctx, x):
        y = self.bn(ctx, self.conv(ctx, x))
        return T.relu(y) if self.relu else y


class BasicBlock:
    """Two 3x3 conv + BN layers with an identity shortcut."""

    def __init__(self, name, channels, dilation=1):
        self.a = ConvBN(f"{name}.a", channels, channels, 3, 1, dilation)
        self.b = ConvBN(f"{name}.b", channels, channels, 3, 1, dilation, relu=False)

    def init(self, rng, params, buffers):
        self.a.init(rng, params, buffers)
        self.b.init(rng, params, buffers)

    def __call__(self, ctx, x):
        return T.relu(T.add(self.b(ctx, self.a(ctx, x)), x))


class Fusion:
    """Exchange between every pair of branches of one stage."""

    def __init__(self, name, widths, strides):
        self.nb = len(widths)
        self.paths = {}
        for j in range(self.nb):
            for i in range(self.nb):
                pname = f"{name}.{i}to{j}"
                if i < j:
                    steps = []
                    for level in range(i, j):
                        last = level == j - 1
                        steps.append(ConvBN(
                            f"{pname}.down{level}", widths[i], widths[j] if last else widths[i],
                            3, strides[level], relu=not last,
                        ))
                    self.paths[i, j] = steps
                elif i > j:
                    self.paths[i, j] = [ConvBN(f"{pname}.up", widths[i], widths[j], 1, relu=False)]

    def init(self, rng, params, buffers):
        for steps in self.paths.values():
            for s in steps:
                s.init(rng, params, buffers)

    def __call__(self, ctx, streams):
        if len(streams) != self.nb:
            raise ShapeError(f"fusion expects {self.nb} streams, got {len(streams)}")
        if self.nb == 1:
            return list(streams)
        out = []
        for j in range(self.nb):
            th, tw = streams[j].shape[2:]
            terms = []
            for i in range(self.nb):
                x = streams[i]
                if i == j:
                    terms.append(x)
                    continue
                for step in self.paths[i, j]:
                    x = step(ctx, x)
                if i > j:
                    x = T.bilinear_resize(x, th, tw)
                if x.shape != streams[j].shape:
                    raise ShapeError(
                        f"fusion path {i}->{j} produced {x.shape}, expected {streams[j].shape}"
                    )
                terms.append(x)
            out.append(T.relu(T.add(*terms)))
        return out


class Stage:
    def __init__(self, index, config: ModelConfig):
        nb = min(index, config.num_branches)
        widths = config.branch_widths[:nb]
        d = config.dilation if index in config.dilated_stages else 1
        self.index = index
        self.branches = [
            [BasicBlock(f"stage{index}.branch{b}.block{k}", widths[b], d)
             for k in range(config.blocks_per_branch)]
            for b in range(nb)
        ]
        self.fusion = Fusion(f"stage{index}.fuse", widths, _level_strides(config))

    def init(self, rng, params, buffers):
        for blocks in self.branches:
            for blk in blocks:
                blk.init(rng, params, buffers)
        self.fusion.init(rng, params, buffers)

    def __call__(self, ctx, streams):
        out = []
        for x, blocks in zip(streams, self.branches):
            for blk in blocks:
                x = blk(ctx, x)
            out.append(x)
        return self.fusion(ctx, out)


def _level_strides(config: ModelConfig):
    # stride of the step from resolution level k to k + 1
    return [config.stage1_fusion_stride] + [config.other_fusion_stride] * 2


class OCRModule:
    """Object-contextual attention over soft class regions.

    Region vectors are pixel features pooled with a per-class spatial softmax
    of the coarse logits. Each pixel attends over the regions with keys
    ``phi(x)`` against ``psi(region)`` scaled by ``1/sqrt(key_channels)``;
    the attended values ``delta(region)`` are concatenated to the pixel
    features and mixed by ``eta``.
    """

    def __init__(self, name, channels, key_channels, out_channels):
        self.name = name
        self.key_channels = key_channels
        self.phi = Conv(f"{name}.phi", channels, key_channels, 1, bias=True)
        self.psi = Conv(f"{name}.psi", channels, key_channels, 1, bias=True)
        self.delta = Conv(f"{name}.delta", channels, key_channels, 1, bias=True)
        self.eta = ConvBN(f"{name}.eta", channels + key_channels, out_channels, 1)

    def init(self, rng, params, buffers):
        for part in (self.phi, self.psi, self.delta, self.eta):
            part.init(rng, params, buffers)

    def __call__(self, ctx, feats, coarse):
        n, c, h, w = feats.shape
        if coarse.value.ndim != 4 or coarse.shape[0] != n or coarse.shape[2:] != (h, w):
            raise ShapeError(f"coarse logits {coarse.shape} not aligned with features {feats.shape}")
        k = coarse.shape[1]
        hw = h * w
        # (n, K, hw): each class map normalized over pixels
        region_weights = T.softmax(T.reshape(coarse, (n, k, hw)), axis=2)
        pixels = T.reshape(feats, (n, c, hw))
        regions = T.matmul(region_weights, T.transpose(pixels, (0, 2, 1)))  # (n, K, c)
        # regions as an (n, c, K, 1) map so 1x1 convs apply unchanged
        region_map = T.reshape(T.transpose(regions, (0, 2, 1)), (n, c, k, 1))
        keys = T.reshape(T.relu(self.psi(ctx, region_map)), (n, self.key_channels, k))
        values = T.reshape(T.relu(self.delta(ctx, region_map)), (n, self.key_channels, k))
        query = T.reshape(T.relu(self.phi(ctx, feats)), (n, self.key_channels, hw))
        sim = T.scale(T.matmul(T.transpose(query, (0, 2, 1)), keys), 1.0 / math.sqrt(self.key_channels))
        attn = T.softmax(sim, axis=2)  # (n, hw, K)
        ctx.probes[f"{self.name}.attention"] = attn.value
        context = T.matmul(values, T.transpose(attn, (0, 2, 1)))  # (n, key, hw)
        context = T.reshape(context, (n, self.key_channels, h, w))
        return self.eta(ctx, T.concat([feats, context], axis=1))


class Network:
    def __init__(self, config: ModelConfig):
        self.config = config
        w0 = config.branch_widths[0]
        if config.stem_downsample == 4:
            self.stem = [
                ConvBN("stem.0", config.in_channels, w0, 3, 2),
                ConvBN("stem.1", w0, w0, 3, 2),
            ]
        else:
            self.stem = [ConvBN("stem.0", config.in_channels, w0, 3, 1)]
        self.stages = [Stage(t, config) for t in range(1, config.num_stages + 1)]
        strides = _level_strides(config)
        # transitions[t] spawns the new branch entering stage t + 2
        self.transitions = []
        for t in range(1, config.num_stages):
            nb_prev = min(t, config.num_branches)
            nb_next = min(t + 1, config.num_branches)
            if nb_next > nb_prev:
                src = nb_prev - 1
                self.transitions.append(ConvBN(
                    f"transition{t}", config.branch_widths[src], config.branch_widths[src + 1],
                    3, strides[src],
                ))
            else:
                self.transitions.append(None)
        cat = sum(config.branch_widths)
        mid = config.ocr_mid_channels
        k = config.num_classes
        self.aux = [ConvBN("aux.0", cat, mid, 1), Conv("aux.cls", mid, k, 1, bias=True)]
        if config.ocr_enabled:
            self.ocr_in = ConvBN("ocr.in", cat, mid, 1)
            self.ocr = OCRModule("ocr", mid, config.ocr_key_channels, mid)
            self.cls = Conv("cls", mid, k, 1, bias=True)

    def layers(self):
        yield from self.stem
        for stage, trans in zip(self.stages, self.transitions + [None]):
            yield stage
            if trans is not None:
                yield trans
        yield from self.aux
        if self.config.ocr_enabled:
            yield self.ocr_in
            yield self.ocr
            yield self.cls

    def init(self, rng):
        params, buffers = {}, {}
        for layer in self.layers():
            layer.init(rng, params, buffers)
        return params, buffers

    def streams(self, ctx, x):
        """Stem and the four stages; returns the final list of branch tensors."""
        for layer in self.stem:
            x = layer(ctx, x)
        streams = [x]
        for t, stage in enumerate(self.stages):
            streams = stage(ctx, streams)
            ctx.probes[f"stage{t + 1}"] = [s.shape for s in streams]
            if t < len(self.transitions) and self.transitions[t] is not None:
                streams = streams + [self.transitions[t](ctx, streams[-1])]
        return streams

    def __call__(self, ctx, x):
        n, c, h, w = x.shape
        streams = self.streams(ctx, x)
        rh, rw = streams[0].shape[2:]
        feats = T.concat([streams[0]] + [T.bilinear_resize(s, rh, rw) for s in streams[1:]], axis=1)
        aux = self.aux[1](ctx, self.aux[0](ctx, feats))
        if self.config.ocr_enabled:
            ocr = self.ocr(ctx, self.ocr_in(ctx, feats), aux)
            main = self.cls(ctx, ocr)
        else:
            main = aux
        main = T.bilinear_resize(main, h, w)
        aux = main if main is aux else T.bilinear_resize(aux, h, w)
        return main, aux


# ---------------------------------------------------------------------------
# model object and public operations


@dataclass
class Model:
    config: ModelConfig
    network: Network
    params: dict            # name -> float32 array
    buffers: dict           # batch-norm name -> BatchNormState
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None
    velocity: dict = field(default_factory=dict)
    step: int = 0

    @property
    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def param_vars(self) -> dict:
        return {k: Var(v) for k, v in self.params.items()}

    def set_normalization(self, mean, std):
        mean = np.asarray(mean, dtype=np.float32)
        std = np.asarray(std, dtype=np.float32)
        if mean.shape != (self.config.in_channels,) or std.shape != mean.shape:
            raise ShapeError("normalization statistics need one value per input band")
        if np.any(std <= 0):
            raise StatsError("normalization std must be positive")
        self.norm_mean, self.norm_std = mean, std


def build_model(config: ModelConfig) -> Model:
    config.validate()
    network = Network(config)
    rng = np.random.default_rng(config.seed)
    params, buffers = network.init(rng)
    params = {k: v.astype(np.float32) for k, v in params.items()}
    return Model(config, network, params, buffers)


def _check_batch(model: Model, batch: np.ndarray):
    if batch.ndim != 4:
        raise ShapeError(f"batch must be (n, c, h, w), got {batch.shape}")
    cfg = model.config
    if batch.shape[1] != cfg.in_channels:
        raise ShapeError(f"batch has {batch.shape[1]} bands, model expects {cfg.in_channels}")
    if min(batch.shape[2:]) < cfg.min_input_size:
        raise ShapeError(f"input {batch.shape[2:]} smaller than {cfg.min_input_size}")


def forward_vars(model: Model, x: Var, params: Mapping[str, Var], training: bool = False,
                 ctx: Context | None = None):
    """Differentiable forward pass with caller-supplied parameter variables."""
    if ctx is None:
        ctx = Context(params, model.buffers, training)
    return model.network(ctx, x)


def forward(model: Model, batch, training: bool = False, probes: dict | None = None):
    """Logits ``(main, aux)``, each shaped (n, num_classes, H, W)."""
    batch = np.asarray(batch, dtype=np.float64)
    _check_batch(model, batch)
    ctx = Context(model.param_vars(), model.buffers, training)
    main, aux = model.network(ctx, Var(batch))
    if probes is not None:
        probes.update(ctx.probes)
    return main.value, aux.value


def stream_sizes(model: Model, height: int, width: int) -> list[tuple[int, int]]:
    """Branch spatial sizes predicted by the size rule for an input of ``height x width``."""
    f = model.config.stem_downsample
    hs = branch_sizes(math.ceil(height / f), model.config)
    ws = branch_sizes(math.ceil(width / f), model.config)
    return list(zip(hs, ws))


def fusion_exchange(model: Model, streams: Sequence[np.ndarray], stage: int,
                    training: bool = False) -> list[np.ndarray]:
    """Run the cross-branch exchange of ``stage`` (1-based) on raw stream tensors."""
    fusion = model.network.stages[stage - 1].fusion
    ctx = Context(model.param_vars(), model.buffers, training)
    out = fusion(ctx, [Var(np.asarray(s, dtype=np.float64)) for s in streams])
    return [o.value for o in out]


def ocr_augment(features, coarse_logits, module: OCRModule, params: Mapping,
                buffers: Mapping, training: bool = False, probes: dict | None = None) -> Var:
    ctx = Context({k: T.as_var(v) for k, v in params.items()}, buffers, training)
    out = module(ctx, T.as_var(features), T.as_var(coarse_logits))
    if probes is not None:
        probes.update(ctx.probes)
    return out


def loss_vars(model: Model, x: Var, targets: np.ndarray, params: Mapping[str, Var],
              training: bool = True) -> Var:
    main, aux = forward_vars(model, x, params, training)
    loss = T.softmax_cross_entropy(main, targets, IGNORE)
    w = model.config.aux_loss_weight
    if w:
        loss = T.add(loss, T.scale(T.softmax_cross_entropy(aux, targets, IGNORE), w))
    return loss


def _mask_batch(masks) -> np.ndarray:
    if isinstance(masks, LabelMask):
        return masks.data[None]
    if isinstance(masks, np.ndarray):
        return masks if masks.ndim == 3 else masks[None]
    return np.stack([m.data if isinstance(m, LabelMask) else np.asarray(m) for m in masks])


def train_step(model: Model, batch, masks, lr: float, momentum: float = 0.9,
               weight_decay: float = 0.0) -> float:
    """One SGD-with-momentum step; returns the loss before the update."""
    batch = np.asarray(batch, dtype=np.float64)
    _check_batch(model, batch)
    targets = _mask_batch(masks)
    if targets.shape != (batch.shape[0],) + batch.shape[2:]:
        raise ShapeError(f"masks {targets.shape} do not match batch {batch.shape}")
    params = model.param_vars()
    loss = loss_vars(model, Var(batch), targets, params, training=True)
    loss.backward()
    for name, var in params.items():
        g = var.grad if var.grad is not None else np.zeros(var.shape)
        if weight_decay:
            g = g + weight_decay * var.value
        v = model.velocity.get(name)
        v = g if v is None else momentum * v + g
        model.velocity[name] = v
        model.params[name] = (var.value - lr * v).astype(np.float32)
    model.step += 1
    return float(loss.value)


def poly_lr(base_lr: float, step: int, total_steps: int, power: float = 0.9) -> float:
    if total_steps <= 0:
        return base_lr
    return base_lr * max(0.0, 1.0 - step / total_steps) ** power


def normalize(model: Model, data: np.ndarray) -> np.ndarray:
    if model.norm_mean is None or model.norm_std is None:
        raise StatsError("model carries no normalization statistics")
    mean = model.norm_mean.astype(np.float64)[:, None, None]
    std = model.norm_std.astype(np.float64)[:, None, None]
    return (np.asarray(data, dtype=np.float64) - mean) / std


def band_statistics(images: Sequence[MultispectralImage]):
    """Pooled per-band mean and population std over a set of stacks."""
    total = None
    sq = None
    count = 0
    for img in images:
        d = img.data.astype(np.float64)
        s = d.sum(axis=(1, 2))
        s2 = (d * d).sum(axis=(1, 2))
        total = s if total is None else total + s
        sq = s2 if sq is None else sq + s2
        count += d.shape[1] * d.shape[2]
    mean = total / count
    var = np.maximum(sq / count - mean * mean, 0.0)
    std = np.sqrt(var)
    return mean, np.where(std > 1e-6, std, 1.0)


def _tile_starts(size: int, tile: int, overlap: int) -> list[int]:
    if tile >= size:
        return [0]
    step = max(1, tile - overlap)
    starts = list(range(0, size - tile, step))
    starts.append(size - tile)
    return starts


def _owned_ranges(starts, tile, size):
    """Split [0, size) among tiles at the midpoints of their overlaps."""
    ranges = []
    for j, s in enumerate(starts):
        lo = 0 if j == 0 else (s + starts[j - 1] + tile) // 2
        hi = size if j == len(starts) - 1 else (starts[j + 1] + s + tile) // 2
        ranges.append((lo, hi))
    return ranges


def predict_logits(model: Model, image: MultispectralImage, tile: int | None = None,
                   overlap: int = 32) -> np.ndarray:
    """Main logits (K, H, W) from tiled eval-mode inference with center-crop stitching."""
    if image.band_count != model.config.in_channels:
        raise ShapeError(f"image has {image.band_count} bands, model expects {model.config.in_channels}")
    x = normalize(model, image.data)
    h, w = x.shape[1:]
    if tile is None or (tile >= h and tile >= w):
        main, _ = forward(model, x[None])
        return main[0]
    if tile < model.config.min_input_size:
        raise ShapeError(f"tile {tile} smaller than {model.config.min_input_size}")
    if not 0 <= overlap < tile:
        raise ShapeError("overlap must lie in [0, tile)")
    th, tw = min(tile, h), min(tile, w)
    ys, xs = _tile_starts(h, th, overlap), _tile_starts(w, tw, overlap)
    out = np.empty((model.config.num_classes, h, w))
    for y0, (ylo, yhi) in zip(ys, _owned_ranges(ys, th, h)):
        for x0, (xlo, xhi) in zip(xs, _owned_ranges(xs, tw, w)):
            main, _ = forward(model, x[None, :, y0 : y0 + th, x0 : x0 + tw])
            out[:, ylo:yhi, xlo:xhi] = main[0, :, ylo - y0 : yhi - y0, xlo - x0 : xhi - x0]
    return out


def predict_mask(model: Model, image: MultispectralImage, tile: int | None = None,
                 overlap: int = 32) -> LabelMask:
    logits = predict_logits(model, image, tile, overlap)
    # argmax keeps the first maximum, so ties go to the lower class code
    return LabelMask(np.argmax(logits, axis=0).astype(np.uint8), None)
