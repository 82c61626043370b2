"""End-to-end MAF classifier: backbone -> MLFE -> embedding -> LLFE -> head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .llfe import AttentionHeadParams, CoderParams, llfe_forward
from .mlfe import AttentionStack, LaNetParams, MlfeParams, check_mode, mlfe_forward
from .tensor import (
    DimensionError,
    Rng,
    Tensor,
    add,
    conv2d,
    layer_norm,
    matmul,
    mean,
    relu,
    reshape,
    swapaxes,
)


class ConfigError(ValueError):
    """Raised when a configuration violates a structural invariant."""


IMAGE_EPS = 1e-6
LLFE_INIT_STD = 0.02


def _conv_out(n: int) -> int:
    # 3x3, stride 2, padding 1
    return (n + 2 - 3) // 2 + 1


@dataclass(frozen=True)
class MafConfig:
    image_size: tuple[int, int] = (48, 48)
    channels: int = 32
    num_lanets: int = 2
    r: int = 4
    p_map: float = 0.6
    p_head: float = 0.4
    heads: int = 2
    units: int = 2
    num_classes: int = 2
    use_mlfe: bool = True
    use_llfe: bool = True

    @property
    def feature_grid(self) -> tuple[int, int]:
        h, w = self.image_size
        for _ in range(3):
            h, w = _conv_out(h), _conv_out(w)
        return h, w

    def violations(self) -> list[str]:
        bad = []
        h, w = self.image_size
        if h < 1 or w < 1:
            bad.append("image_size must be positive")
        if self.channels < 4 or self.channels % 4:
            bad.append("channels must be a positive multiple of 4 (backbone widths C/4, C/2, C)")
        if self.num_lanets < 1:
            bad.append("num_lanets (N) must be >= 1")
        if self.r < 1 or self.channels % self.r:
            bad.append("channels must be divisible by r")
        if self.heads < 1 or self.channels % self.heads:
            bad.append("heads must divide channels")
        if self.units < 1:
            bad.append("units (I) must be >= 1")
        for name in ("p_map", "p_head"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                bad.append(f"{name} must lie in [0, 1]")
        if self.num_classes < 2:
            bad.append("num_classes must be >= 2")
        return bad

    def validate(self) -> "MafConfig":
        bad = self.violations()
        if bad:
            raise ConfigError("invalid MafConfig: " + "; ".join(bad))
        return self


TOY_CONFIG = MafConfig(image_size=(12, 12), channels=8, num_lanets=2, r=4, heads=2, units=1)


@dataclass(frozen=True)
class ConvParams:
    w: Tensor
    b: Tensor


@dataclass(frozen=True)
class MafParams:
    backbone: tuple[ConvParams, ...]
    mlfe: MlfeParams | None
    embed_w: Tensor | None
    embed_b: Tensor | None
    patches: Tensor | None
    units: tuple[tuple[CoderParams, CoderParams], ...]
    head_w: Tensor
    head_b: Tensor

    def named_tensors(self) -> dict[str, Tensor]:
        return dict(_walk(self, ""))

    def map_tensors(self, fn: Callable[[str, Tensor], Tensor]) -> "MafParams":
        return _rebuild(self, "", fn)

    def replace_tensor(self, name: str, new: Tensor) -> "MafParams":
        return self.map_tensors(lambda n, t: new if n == name else t)

    def num_parameters(self) -> int:
        return sum(t.size for t in self.named_tensors().values())


def _walk(obj, prefix: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from _walk(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (tuple, list)):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}.{i}")


def _rebuild(obj, prefix: str, fn):
    if isinstance(obj, Tensor):
        return fn(prefix, obj)
    if dataclasses.is_dataclass(obj):
        changes = {f.name: _rebuild(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name, fn)
                   for f in dataclasses.fields(obj)}
        return type(obj)(**changes)
    if isinstance(obj, (tuple, list)):
        return type(obj)(_rebuild(item, f"{prefix}.{i}", fn) for i, item in enumerate(obj))
    return obj


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------


def standardize_image(image: Tensor) -> Tensor:
    """Per-image zero mean / unit variance; a constant image maps to zeros."""
    *lead, _, h, w = image.shape
    flat = reshape(image, tuple(lead) + (1, h * w))
    unit = layer_norm(flat, Tensor(np.ones(h * w)), Tensor(np.zeros(h * w)), IMAGE_EPS)
    return reshape(unit, image.shape)


def backbone_forward(image: Tensor, backbone: tuple[ConvParams, ...]) -> Tensor:
    """Standardise, then three stride-2 3x3 conv + ReLU blocks.

    ``(..., 1, H, W) -> (..., C, ceil(H/8), ceil(W/8))``.
    """
    if image.ndim < 3 or image.shape[-3] != 1:
        raise DimensionError(f"backbone expects (..., 1, H, W) grayscale input, got {image.shape}")
    x = standardize_image(image)
    for conv in backbone:
        x = relu(conv2d(x, conv.w, conv.b, stride=2, padding=1))
    return x


def flatten_rows(x: Tensor) -> Tensor:
    """``(..., C, H, W) -> (..., H*W, C)``, row index ``h*W + w``."""
    *lead, c, h, w = x.shape
    return swapaxes(reshape(x, tuple(lead) + (c, h * w)), -1, -2)


def embed(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Pixel rows through a C -> C linear map: ``row' = w @ row + b``."""
    return add(matmul(flatten_rows(x), swapaxes(w, 0, 1)), b)


def classify(x_out: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Mean over pixel rows, then a linear map to class logits."""
    pooled = mean(x_out, axis=-2)
    lead = pooled.shape[:-1]
    logits = matmul(reshape(pooled, (-1, pooled.shape[-1])), w)
    return add(reshape(logits, lead + (w.shape[1],)), b)


def maf_forward(image: Tensor, params: MafParams, config: MafConfig, rng: Rng | None,
                mode: str) -> tuple[Tensor, AttentionStack | None]:
    """Class logits ``(..., num_classes)`` and the post-drop attention stack.

    Drop probabilities come from ``config``; ``rng`` may be None in eval mode.
    """
    check_mode(mode)
    h, w = config.image_size
    if image.shape[-3:] != (1, h, w):
        raise DimensionError(f"image {image.shape} does not match configured size 1x{h}x{w}")
    feats = backbone_forward(image, params.backbone)
    stack = None
    if params.mlfe is not None:
        mlfe = params.mlfe
        if mlfe.p_map != config.p_map:
            mlfe = dataclasses.replace(mlfe, p_map=config.p_map)
        feats, stack = mlfe_forward(feats, mlfe, rng.split(0) if rng else None, mode)
    if params.patches is not None:
        x = embed(feats, params.embed_w, params.embed_b)
        x = llfe_forward(x, params.patches, params.units, config.p_head,
                         rng.split(1) if rng else None, mode)
    else:
        x = flatten_rows(feats)
    return classify(x, params.head_w, params.head_b), stack


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------


def init_params(config: MafConfig, seed: int) -> MafParams:
    """Initial parameters, deterministic in ``seed``.

    Convolutions, the embedding and the head use He-normal weights
    (std sqrt(2/fan_in)); attention and feed-forward weights inside the
    encoder/decoder blocks and the learnable patches use N(0, 0.02).
    Biases start at zero and norm gains at one.
    """
    config.validate()
    rng = Rng(seed)
    c = config.channels

    def he(shape, fan_in):
        return Tensor(rng.normal(shape, std=np.sqrt(2.0 / fan_in)), requires_grad=True)

    def small(*shape):
        # post-norm blocks start close to identity
        return Tensor(rng.normal(shape, std=LLFE_INIT_STD), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    widths = [1, c // 4, c // 2, c]
    backbone = tuple(ConvParams(he((co, ci, 3, 3), ci * 9), zeros(co))
                     for ci, co in zip(widths[:-1], widths[1:]))

    mlfe = None
    if config.use_mlfe:
        hidden = c // config.r
        lanets = tuple(LaNetParams(he((hidden, c), c), zeros(hidden), he((1, hidden), hidden), zeros(1), config.r)
                       for _ in range(config.num_lanets))
        mlfe = MlfeParams(lanets, config.p_map)

    embed_w = embed_b = patches = None
    units: tuple = ()
    if config.use_llfe:
        embed_w, embed_b = he((c, c), c), zeros(c)
        patches = Tensor(rng.normal((config.num_lanets, c), std=0.02), requires_grad=True)

        def coder():
            attn = AttentionHeadParams(small(c, c), small(c, c), small(c, c), small(c, c), config.heads)
            return CoderParams(attn, ones(c), zeros(c), ones(c), zeros(c),
                               small(c, 4 * c), zeros(4 * c), small(4 * c, c), zeros(c))

        units = tuple((coder(), coder()) for _ in range(config.units))

    k = config.num_classes
    return MafParams(backbone, mlfe, embed_w, embed_b, patches, units, he((c, k), c), zeros(k))


def count_params(config: MafConfig) -> int:
    """Closed-form parameter count for ``config``."""
    c, k = config.channels, config.num_classes
    c1, c2 = c // 4, c // 2
    total = (9 * c1 + c1) + (9 * c1 * c2 + c2) + (9 * c2 * c + c) + (c * k + k)
    if config.use_mlfe:
        hidden = c // config.r
        total += config.num_lanets * (c * hidden + hidden + hidden + 1)
    if config.use_llfe:
        coder = 4 * c * c + 4 * c + (c * 4 * c + 4 * c) + (4 * c * c + c)
        total += c * c + c + config.num_lanets * c + 2 * config.units * coder
    return total
