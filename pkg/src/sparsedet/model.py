"""The sparse set-prediction detector.

A small convolutional backbone produces one stride-8 feature map. A fixed
set of N learnable boxes and N learnable feature vectors is refined over T
chained stages: each stage pools an RoI feature per box, lets the feature
vectors exchange information through self-attention, runs a per-proposal
dynamic interaction whose weights are generated from the proposal feature
(or a multi-head cross-attention variant), and predicts class logits plus
a box update. The refined boxes and object features feed the next stage;
box gradients are blocked between stages, feature gradients are not.

All tensors carry a leading batch axis: stage outputs are (B, N, ...).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry
from .autodiff import ShapeError, Tensor
from .exceptions import ConfigError

INIT_SCHEMES = ("center", "image", "grid", "random")
INTERACTIONS = ("dynamic", "multi_head_attention")
BACKBONE_STRIDE = 8
CLS_PRIOR_PROB = 0.01


@dataclass
class ModelConfig:
    """Architecture knobs for the detector."""

    num_proposals: int = 100
    feature_dim: int = 256
    roi_size: int = 7
    num_stages: int = 6
    num_classes: int = 3
    num_attention_heads: int = 8
    init_scheme: str = "image"
    interaction: str = "dynamic"

    def validate(self) -> None:
        if self.num_proposals < 1 or self.num_stages < 1:
            raise ConfigError("num_proposals and num_stages must be at least 1")
        if self.num_classes < 1 or self.roi_size < 1:
            raise ConfigError("num_classes and roi_size must be at least 1")
        if self.feature_dim % 4 != 0:
            raise ConfigError(f"feature_dim must be divisible by 4, got {self.feature_dim}")
        if self.feature_dim % self.num_attention_heads != 0:
            raise ConfigError(
                f"feature_dim {self.feature_dim} not divisible by "
                f"{self.num_attention_heads} attention heads"
            )
        if self.init_scheme not in INIT_SCHEMES:
            raise ConfigError(
                f"unknown init_scheme {self.init_scheme!r}, expected one of {INIT_SCHEMES}"
            )
        if self.interaction not in INTERACTIONS:
            raise ConfigError(
                f"unknown interaction {self.interaction!r}, expected one of {INTERACTIONS}"
            )


class Module:
    """Minimal parameter container with dotted-name introspection."""

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for attr, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[attr] = value
            elif isinstance(value, Module):
                for sub, p in value.named_parameters().items():
                    out[f"{attr}.{sub}"] = p
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for sub, p in item.named_parameters().items():
                            out[f"{attr}.{i}.{sub}"] = p
        return out

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None


class Linear(Module):
    """Affine layer with Xavier-uniform weights."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 zero_init: bool = False, bias_init: float = 0.0):
        if zero_init:
            w = np.zeros((in_features, out_features))
        else:
            limit = math.sqrt(6.0 / (in_features + out_features))
            w = rng.uniform(-limit, limit, (in_features, out_features))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.full(out_features, bias_init, dtype=np.float64), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.scale = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.scale, self.shift)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        fan_in = in_ch * kernel * kernel
        fan_out = out_ch * kernel * kernel
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        self.weight = Tensor(
            rng.uniform(-limit, limit, (out_ch, in_ch, kernel, kernel)), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ProposalSet(Module):
    """N learnable normalized boxes paired with N learnable feature vectors."""

    def __init__(self, boxes: np.ndarray, features: np.ndarray):
        self.boxes = Tensor(boxes, requires_grad=True)
        self.features = Tensor(features, requires_grad=True)


def init_proposals(config: ModelConfig, seed: int = 0) -> ProposalSet:
    """Build the learnable proposal set for one of the four init schemes.

    center: every box at the image center with side 0.1 of the image.
    image:  every box covering the whole image.
    grid:   regular ceil(sqrt(N)) grid of cells, truncated to N.
    random: all four components Gaussian(0.5, 0.15), clamped to range.
    Features are always Gaussian(0, 0.02).
    """
    config.validate()
    n = config.num_proposals
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    if config.init_scheme == "center":
        boxes = np.tile([0.5, 0.5, 0.1, 0.1], (n, 1))
    elif config.init_scheme == "image":
        boxes = np.tile([0.5, 0.5, 1.0, 1.0], (n, 1))
    elif config.init_scheme == "grid":
        g = math.ceil(math.sqrt(n))
        centers = [((j + 0.5) / g, (i + 0.5) / g) for i in range(g) for j in range(g)]
        boxes = np.array([[cx, cy, 1.0 / g, 1.0 / g] for cx, cy in centers[:n]])
    else:
        boxes = rng.normal(0.5, 0.15, (n, 4))
        boxes[:, :2] = np.clip(boxes[:, :2], 0.0, 1.0)
        boxes[:, 2:] = np.clip(boxes[:, 2:], geometry.MIN_BOX_SIZE, 1.0)
    features = rng.normal(0.0, 0.02, (n, config.feature_dim))
    return ProposalSet(boxes, features)


class Backbone(Module):
    """Three stride-2 conv+relu blocks followed by a 1x1 projection to C."""

    def __init__(self, feature_dim: int, rng: np.random.Generator):
        c = feature_dim
        self.conv1 = Conv2d(3, c // 4, 3, rng, stride=2, padding=1)
        self.conv2 = Conv2d(c // 4, c // 2, 3, rng, stride=2, padding=1)
        self.conv3 = Conv2d(c // 2, c, 3, rng, stride=2, padding=1)
        self.proj = Conv2d(c, c, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"backbone expects (B, 3, H, W) input, got {x.shape}")
        if x.shape[2] % BACKBONE_STRIDE or x.shape[3] % BACKBONE_STRIDE:
            raise ShapeError(
                f"image dims must be divisible by {BACKBONE_STRIDE}, got {x.shape[2]}x{x.shape[3]}"
            )
        x = ad.relu(self.conv1(x))
        x = ad.relu(self.conv2(x))
        x = ad.relu(self.conv3(x))
        return self.proj(x)


# -- RoIAlign -----------------------------------------------------------------


def roi_align_batched(feat: Tensor, boxes_xyxy: Tensor, size: int) -> Tensor:
    """Pool an SxS grid from each box with one bilinear sample per bin center.

    ``feat`` is (B, C, h, w); ``boxes_xyxy`` is (B, N, 4) in feature-grid
    coordinates. Output is (B, N, S*S, C). Sampling is half-pixel aligned
    (pixel (r, c) has its center at (c+0.5, r+0.5)); out-of-bounds
    neighbors read as zero. Differentiable in both the feature map and the
    box corners. The interpolation is written in lerp form, so a constant
    map reproduces its value exactly.
    """
    feat = ad.as_tensor(feat)
    boxes_xyxy = ad.as_tensor(boxes_xyxy)
    bsz, chans, h, w = feat.shape
    if boxes_xyxy.ndim != 3 or boxes_xyxy.shape[0] != bsz or boxes_xyxy.shape[2] != 4:
        raise ShapeError(f"roi_align boxes must be ({bsz}, N, 4), got {boxes_xyxy.shape}")
    n, s = boxes_xyxy.shape[1], size

    box = boxes_xyxy.data
    frac = (np.arange(s) + 0.5) / s
    xs = box[:, :, 0:1] + frac * (box[:, :, 2:3] - box[:, :, 0:1])  # (B, N, S)
    ys = box[:, :, 1:2] + frac * (box[:, :, 3:4] - box[:, :, 1:2])
    u = xs - 0.5
    v = ys - 0.5
    ix = np.floor(u).astype(np.intp)
    iy = np.floor(v).astype(np.intp)
    shape4 = (bsz, n, s, s)
    # Output bin (i, j): row i follows y, column j follows x.
    ix0 = np.broadcast_to(ix[:, :, None, :], shape4)
    iy0 = np.broadcast_to(iy[:, :, :, None], shape4)
    fx = np.broadcast_to((u - ix)[:, :, None, :], shape4)[..., None]
    fy = np.broadcast_to((v - iy)[:, :, :, None], shape4)[..., None]
    bb = np.arange(bsz, dtype=np.intp)[:, None, None, None]

    fmap = np.ascontiguousarray(feat.data.transpose(0, 2, 3, 1))  # (B, h, w, C)

    def fetch(yidx, xidx):
        mask = (yidx >= 0) & (yidx < h) & (xidx >= 0) & (xidx < w)
        cy = np.clip(yidx, 0, h - 1)
        cx = np.clip(xidx, 0, w - 1)
        return fmap[bb, cy, cx] * mask[..., None], cy, cx, mask

    v00, cy00, cx00, m00 = fetch(iy0, ix0)
    v01, cy01, cx01, m01 = fetch(iy0, ix0 + 1)
    v10, cy10, cx10, m10 = fetch(iy0 + 1, ix0)
    v11, cy11, cx11, m11 = fetch(iy0 + 1, ix0 + 1)

    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    out_data = (top + fy * (bot - top)).reshape(bsz, n, s * s, chans)

    def backward(g):
        g = g.reshape(bsz, n, s, s, chans)
        if feat.requires_grad:
            dmap = np.zeros_like(fmap)
            np.add.at(dmap, (bb, cy00, cx00), g * ((1 - fx) * (1 - fy) * m00[..., None]))
            np.add.at(dmap, (bb, cy01, cx01), g * (fx * (1 - fy) * m01[..., None]))
            np.add.at(dmap, (bb, cy10, cx10), g * ((1 - fx) * fy * m10[..., None]))
            np.add.at(dmap, (bb, cy11, cx11), g * (fx * fy * m11[..., None]))
            feat._accumulate(dmap.transpose(0, 3, 1, 2))
        if boxes_xyxy.requires_grad:
            dfx = (g * ((1 - fy) * (v01 - v00) + fy * (v11 - v10))).sum(axis=-1)
            dfy = (g * ((v10 - v00) + fx * ((v11 - v10) - (v01 - v00)))).sum(axis=-1)
            gx = dfx.sum(axis=2)  # (B, N, S) per column j
            gy = dfy.sum(axis=3)  # (B, N, S) per row i
            dbox = np.stack(
                [
                    (gx * (1 - frac)).sum(axis=-1),
                    (gy * (1 - frac)).sum(axis=-1),
                    (gx * frac).sum(axis=-1),
                    (gy * frac).sum(axis=-1),
                ],
                axis=-1,
            )
            boxes_xyxy._accumulate(dbox)

    return ad.make_node(out_data, (feat, boxes_xyxy), backward)


def roi_align(feat: Tensor, box_xyxy, size: int) -> Tensor:
    """Single-map, single-box pooling: (C, h, w) + box -> (S, S, C)."""
    feat = ad.as_tensor(feat)
    if feat.ndim != 3:
        raise ShapeError(f"roi_align expects a (C, h, w) map, got {feat.shape}")
    box = ad.as_tensor(box_xyxy)
    batched = roi_align_batched(
        ad.reshape(feat, (1,) + feat.shape), ad.reshape(box, (1, 1, 4)), size
    )
    return ad.reshape(batched, (size, size, feat.shape[0]))


# -- interaction heads ----------------------------------------------------------


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, N, C) -> (B*heads, N, C/heads)."""
    b, n, c = x.shape
    x = ad.reshape(x, (b, n, heads, c // heads))
    x = ad.permute(x, (0, 2, 1, 3))
    return ad.reshape(x, (b * heads, n, c // heads))


def _merge_heads(x: Tensor, batch: int, heads: int) -> Tensor:
    """(B*heads, N, C/heads) -> (B, N, C)."""
    _, n, hd = x.shape
    x = ad.reshape(x, (batch, heads, n, hd))
    x = ad.permute(x, (0, 2, 1, 3))
    return ad.reshape(x, (batch, n, heads * hd))


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention with residual and layer norm.

    No positional encoding: proposals are a set, and their features alone
    carry identity.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.norm = LayerNorm(dim)

    def __call__(self, x: Tensor, return_weights: bool = False):
        b, _, c = x.shape
        hd = c // self.heads
        q = _split_heads(self.q(x), self.heads)
        k = _split_heads(self.k(x), self.heads)
        v = _split_heads(self.v(x), self.heads)
        scores = ad.bmm(q, ad.permute(k, (0, 2, 1))) * (1.0 / math.sqrt(hd))
        attn = ad.softmax(scores)
        ctx = _merge_heads(ad.bmm(attn, v), b, self.heads)
        out = self.norm(x + self.out(ctx))
        return (out, attn) if return_weights else out


class DynamicInteraction(Module):
    """Per-proposal conditional filtering of the pooled RoI feature.

    Each proposal feature generates the weights of two 1x1 convolutions
    (C -> C/4 -> C) that are applied to that proposal's own RoI grid, with
    layer norm and relu after each; the result is flattened and projected
    back to a C-dim object feature.
    """

    def __init__(self, dim: int, roi_size: int, rng: np.random.Generator):
        self.dim = dim
        self.quarter = dim // 4
        self.param_gen = Linear(dim, 2 * dim * self.quarter, rng)
        self.norm1 = LayerNorm(self.quarter)
        self.norm2 = LayerNorm(dim)
        self.out = Linear(roi_size * roi_size * dim, dim, rng)

    def __call__(self, pro_feats: Tensor, roi_feats: Tensor) -> Tensor:
        b, n, c = pro_feats.shape
        cq = self.quarter
        params = ad.reshape(self.param_gen(pro_feats), (b * n, 2 * c * cq))
        param1 = ad.reshape(ad.narrow(params, 1, 0, c * cq), (b * n, c, cq))
        param2 = ad.reshape(ad.narrow(params, 1, c * cq, cq * c), (b * n, cq, c))
        roi = ad.reshape(roi_feats, (b * n,) + roi_feats.shape[2:])
        x = ad.relu(self.norm1(ad.bmm(roi, param1)))
        x = ad.relu(self.norm2(ad.bmm(x, param2)))
        x = ad.reshape(x, (b * n, -1))
        return ad.reshape(self.out(x), (b, n, c))


class AttentionInteraction(Module):
    """Ablation variant: cross-attention from each proposal to its RoI bins."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.norm = LayerNorm(dim)

    def __call__(self, pro_feats: Tensor, roi_feats: Tensor) -> Tensor:
        b, n, c = pro_feats.shape
        hd = c // self.heads
        query = ad.reshape(pro_feats, (b * n, 1, c))
        bins = ad.reshape(roi_feats, (b * n,) + roi_feats.shape[2:])
        q = _split_heads(self.q(query), self.heads)
        k = _split_heads(self.k(bins), self.heads)
        v = _split_heads(self.v(bins), self.heads)
        scores = ad.bmm(q, ad.permute(k, (0, 2, 1))) * (1.0 / math.sqrt(hd))
        ctx = _merge_heads(ad.bmm(ad.softmax(scores), v), b * n, self.heads)
        out = self.norm(query + self.out(ctx))
        return ad.reshape(out, (b, n, c))


class PredictionHeads(Module):
    """Box regression (3-layer perceptron) and classification (one linear).

    The final regression layer starts at zero so stage 0 leaves boxes
    unchanged; the classification bias starts at the focal-detector prior
    so early scores sit near CLS_PRIOR_PROB.
    """

    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator):
        self.reg1 = Linear(dim, dim, rng)
        self.reg2 = Linear(dim, dim, rng)
        self.reg3 = Linear(dim, 4, rng, zero_init=True)
        bias = -math.log((1.0 - CLS_PRIOR_PROB) / CLS_PRIOR_PROB)
        self.cls = Linear(dim, num_classes, rng, bias_init=bias)

    def __call__(self, obj_feats: Tensor) -> tuple[Tensor, Tensor]:
        hidden = ad.relu(self.reg2(ad.relu(self.reg1(obj_feats))))
        return self.cls(obj_feats), self.reg3(hidden)


@dataclass
class StageOutput:
    """Per-stage predictions, batched (B, N, ...).

    ``boxes`` are the refined boxes in normalized center-size form and
    satisfy the box invariants; they are the pre-detach tensors, so
    gradient inspection sees exactly what the stage's loss can reach.
    """

    class_logits: Tensor
    boxes: Tensor
    object_features: Tensor


class DetectionModel(Module):
    """Backbone + proposal set + T chained refinement stages."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        self.backbone = Backbone(config.feature_dim, rng)
        self.proposals = init_proposals(config, seed)
        self.self_attn = MultiHeadSelfAttention(
            config.feature_dim, config.num_attention_heads, rng
        )
        if config.interaction == "dynamic":
            self.interaction = DynamicInteraction(config.feature_dim, config.roi_size, rng)
        else:
            self.interaction = AttentionInteraction(
                config.feature_dim, config.num_attention_heads, rng
            )
        self.fuse = Linear(2 * config.feature_dim, config.feature_dim, rng)
        self.heads = PredictionHeads(config.feature_dim, config.num_classes, rng)

    def forward(self, images, pinned_boxes: list[np.ndarray] | None = None) -> list[StageOutput]:
        """Run all stages on a batch of images (B, 3, H, W).

        ``pinned_boxes`` (one (B, N, 4) array per stage after the first)
        replaces each later stage's input boxes with the given constants.
        Box gradients are blocked between stages, so the autodiff gradient
        is a partial derivative that holds those inputs fixed; finite
        differences can only be compared against it when the same values
        stay pinned while parameters are perturbed.
        """
        x = ad.as_tensor(images)
        feat = self.backbone(x)
        bsz = x.shape[0]
        n = self.config.num_proposals
        grid_h, grid_w = feat.shape[2], feat.shape[3]
        grid_scale = np.array([grid_w, grid_h, grid_w, grid_h], dtype=np.float64)

        boxes = ad.add(
            ad.reshape(geometry.clamp_box_tensor(self.proposals.boxes), (1, n, 4)),
            np.zeros((bsz, n, 4)),
        )
        features = ad.add(
            ad.reshape(self.proposals.features, (1, n, self.config.feature_dim)),
            np.zeros((bsz, n, self.config.feature_dim)),
        )

        outputs: list[StageOutput] = []
        prev_obj: Tensor | None = None
        for stage in range(self.config.num_stages):
            if prev_obj is not None:
                # The carried proposal features and the reuse stream coincide
                # here (both are the previous stage's object features).
                features = self.fuse(ad.concat([features, prev_obj], axis=2))
            attended = self.self_attn(features)
            grid_boxes = geometry.cxcywh_to_xyxy_tensor(boxes) * grid_scale
            roi = roi_align_batched(feat, grid_boxes, self.config.roi_size)
            obj = self.interaction(attended, roi)
            logits, deltas = self.heads(obj)
            new_boxes = geometry.box_update(boxes, deltas)
            outputs.append(StageOutput(logits, new_boxes, obj))
            if pinned_boxes is not None and stage < self.config.num_stages - 1:
                boxes = Tensor(pinned_boxes[stage])
            else:
                boxes = new_boxes.detach()
            features = obj
            prev_obj = obj
        return outputs

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ConfigError(
                f"checkpoint does not match model: missing={missing}, unexpected={extra}"
            )
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ConfigError(
                    f"parameter {name!r} has shape {arr.shape}, model expects {p.data.shape}"
                )
            p.data = np.ascontiguousarray(arr)
