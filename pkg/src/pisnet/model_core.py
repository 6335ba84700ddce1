"""Backbone, query-guided attention block, feature corruption and pooling.

All tensors follow the ``(C, H, W)`` / ``(B, C, H, W)`` layout. Operations that
take a single feature map also accept a batch; the return value matches the
rank of the input.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import LayoutError, NumericError, ShapeError


# ---------------------------------------------------------------------------
# Layout types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PersonBox:
    """A labelled box in normalized ``[0, 1]`` coordinates of some frame."""

    pid: int
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def area(self) -> float:
        return max(0.0, self.x1 - self.x0) * max(0.0, self.y1 - self.y0)

    def intersection(self, other: "PersonBox") -> float:
        w = min(self.x1, other.x1) - max(self.x0, other.x0)
        h = min(self.y1, other.y1) - max(self.y0, other.y0)
        return max(0.0, w) * max(0.0, h)

    def as_tuple(self):
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass(frozen=True)
class BoxLayout:
    """Relative placement of the persons of a multi-person crop.

    ``z_order`` lists box indices back to front: later entries are drawn on
    top of earlier ones.
    """

    boxes: tuple
    z_order: tuple = field(default=None)

    def __post_init__(self):
        boxes = tuple(self.boxes)
        object.__setattr__(self, "boxes", boxes)
        z = tuple(range(len(boxes))) if self.z_order is None else tuple(int(i) for i in self.z_order)
        object.__setattr__(self, "z_order", z)
        if sorted(z) != list(range(len(boxes))):
            raise LayoutError(f"z_order {z} is not a permutation of {len(boxes)} boxes")
        for b in boxes:
            if not (0.0 <= b.x0 < b.x1 <= 1.0 and 0.0 <= b.y0 < b.y1 <= 1.0):
                raise LayoutError(f"box {b} is not a proper box inside the unit square")

    def is_multi_person(self) -> bool:
        """At least two boxes and every box overlaps some other box."""
        if len(self.boxes) < 2:
            return False
        return all(
            any(i != j and a.intersection(b) > 0 for j, b in enumerate(self.boxes))
            for i, a in enumerate(self.boxes)
        )


# ---------------------------------------------------------------------------
# Backbone
# ---------------------------------------------------------------------------

@dataclass
class BackboneConfig:
    arch: str = "small"
    channels: tuple = (16, 32, 48, 64)
    strides: tuple = (1, 2, 2, 2)

    @property
    def out_channels(self) -> int:
        return 2048 if self.arch == "resnet50" else int(self.channels[-1])

    @property
    def total_stride(self) -> int:
        return 16 if self.arch == "resnet50" else math.prod(self.strides)


def _conv_bn_relu(cin, cout, stride):
    return [
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    ]


class Backbone(nn.Module):
    """Fully convolutional feature extractor.

    ``arch="small"`` is a four-stage conv/BN/ReLU stack sized for CPU runs;
    ``arch="resnet50"`` builds an (unpretrained) torchvision ResNet-50 trunk
    with the last stage stride removed, giving a total stride of 16.
    """

    def __init__(self, cfg: BackboneConfig | None = None):
        super().__init__()
        self.cfg = cfg or BackboneConfig()
        if self.cfg.arch == "small":
            if len(self.cfg.channels) != len(self.cfg.strides):
                raise ShapeError("channels and strides must have one entry per stage")
            layers, cin = [], 3
            for cout, stride in zip(self.cfg.channels, self.cfg.strides):
                layers += _conv_bn_relu(cin, cout, stride) + _conv_bn_relu(cout, cout, 1)
                cin = cout
            self.body = nn.Sequential(*layers)
        elif self.cfg.arch == "resnet50":
            from torchvision.models import resnet50

            net = resnet50(weights=None)
            net.layer4[0].conv2.stride = (1, 1)
            net.layer4[0].downsample[0].stride = (1, 1)
            self.body = nn.Sequential(
                net.conv1, net.bn1, net.relu, net.maxpool,
                net.layer1, net.layer2, net.layer3, net.layer4,
            )
        else:
            raise ShapeError(f"unknown backbone arch {self.cfg.arch!r}")
        self.frozen = False

    @property
    def out_channels(self) -> int:
        return self.cfg.out_channels

    @property
    def total_stride(self) -> int:
        return self.cfg.total_stride

    def freeze(self):
        self.frozen = True
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def unfreeze(self):
        self.frozen = False
        for p in self.parameters():
            p.requires_grad_(True)
        return self

    def train(self, mode: bool = True):
        # a frozen backbone keeps its BN statistics fixed
        return super().train(mode and not self.frozen)

    def forward(self, x):
        return self.body(x)


def backbone_forward(image: torch.Tensor, backbone: Backbone) -> torch.Tensor:
    """Extract a feature map from a ``3xHxW`` (or batched) image in ``[0, 1]``."""
    squeeze = image.dim() == 3
    x = image.unsqueeze(0) if squeeze else image
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected a 3-channel image, got shape {tuple(image.shape)}")
    s = backbone.total_stride
    if x.shape[-2] % s or x.shape[-1] % s:
        raise ShapeError(f"image size {tuple(x.shape[-2:])} is not divisible by stride {s}")
    out = backbone(x)
    if not torch.isfinite(out).all():
        raise NumericError("backbone produced non-finite activations")
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Query-guided attention
# ---------------------------------------------------------------------------

class Attention(NamedTuple):
    refined: torch.Tensor
    attention: torch.Tensor
    affinity: torch.Tensor  # row-softmaxed, (B, HW, H'W')


class QGAB(nn.Module):
    """Query-guided attention block.

    ``c1`` projects the map being attended and ``c2`` the guiding map. The
    affinity between every attended pixel and every guide pixel is softmaxed
    over guide pixels; the row maximum becomes the per-pixel weight ``a`` and
    the output is ``a * x + x``.
    """

    def __init__(self, channels: int, guidance_channels: int | None = None):
        super().__init__()
        self.channels = channels
        self.guidance_channels = guidance_channels or channels
        self.c1 = nn.Conv2d(channels, self.guidance_channels, 1, bias=False)
        self.c2 = nn.Conv2d(channels, self.guidance_channels, 1, bias=False)

    def attend(self, attended: torch.Tensor, guide: torch.Tensor) -> Attention:
        squeeze = attended.dim() == 3
        x = attended.unsqueeze(0) if squeeze else attended
        y = guide.unsqueeze(0) if guide.dim() == 3 else guide
        if x.dim() != 4 or y.dim() != 4:
            raise ShapeError("feature maps must be CxHxW or BxCxHxW")
        if x.shape[1] != self.channels or y.shape[1] != self.channels:
            raise ShapeError(
                f"channel mismatch: attended {x.shape[1]}, guide {y.shape[1]}, block {self.channels}"
            )
        if y.shape[0] != x.shape[0]:
            y = y.expand(x.shape[0], -1, -1, -1)
        b, _, h, w = x.shape
        keys = self.c1(x).flatten(2)  # B x C' x HW
        guides = self.c2(y).flatten(2)  # B x C' x H'W'
        affinity = torch.softmax(torch.bmm(keys.transpose(1, 2), guides), dim=-1)
        weights = affinity.max(dim=-1).values.view(b, 1, h, w)
        refined = weights * x + x
        if squeeze:
            return Attention(refined[0], weights[0, 0], affinity[0])
        return Attention(refined, weights[:, 0], affinity)


def qgab_forward(gallery: torch.Tensor, query: torch.Tensor, qgab: QGAB):
    """Refine ``gallery`` under the guidance of ``query``.

    Returns ``(refined, attention)`` where ``attention`` has the gallery's
    spatial shape.
    """
    out = qgab.attend(gallery, query)
    return out.refined, out.attention


def gram_forward(refined_gallery: torch.Tensor, corrupted_query: torch.Tensor, qgab: QGAB):
    """Reversed pass: the refined gallery guides attention over the corrupted query."""
    return qgab.attend(corrupted_query, refined_gallery).refined


def embed(fm: torch.Tensor) -> torch.Tensor:
    """Global average pool over the two spatial axes."""
    return fm.mean(dim=(-2, -1))


# ---------------------------------------------------------------------------
# Feature corruption
# ---------------------------------------------------------------------------

def _span(lo: float, hi: float, n: int):
    return math.floor(lo * n + 0.5), math.floor(hi * n + 0.5)


def box_cells(box: PersonBox, shape) -> tuple:
    """Row/column span ``(r0, r1, c0, c1)`` of ``box`` on an ``HxW`` grid."""
    h, w = shape
    r0, r1 = _span(box.y0, box.y1, h)
    c0, c1 = _span(box.x0, box.x1, w)
    if r1 <= r0 or c1 <= c0:
        raise LayoutError(f"box {box.as_tuple()} covers no cell of a {h}x{w} grid")
    return r0, r1, c0, c1


def corruption_plan(layout: BoxLayout, src_shape, out_shape):
    """Precompute which source pixel lands in every output cell.

    Returns ``(owner, index)`` integer tensors of shape ``out_shape``. ``owner``
    is 0 for the query map, 1 for the sampled map and -1 for zero padding;
    ``index`` is the flat source pixel for owned cells.
    """
    if len(layout.boxes) < 2:
        raise LayoutError("feature corruption needs a layout with at least two boxes")
    h, w = out_shape
    sh, sw = src_shape
    owner = torch.full((h, w), -1, dtype=torch.long)
    index = torch.zeros((h, w), dtype=torch.long)
    for slot in layout.z_order:
        if slot > 1:
            continue
        r0, r1, c0, c1 = box_cells(layout.boxes[slot], out_shape)
        # nearest-neighbour resize, same rule as F.interpolate(mode="nearest")
        rows = (torch.arange(r1 - r0) * sh) // (r1 - r0)
        cols = (torch.arange(c1 - c0) * sw) // (c1 - c0)
        owner[r0:r1, c0:c1] = slot
        index[r0:r1, c0:c1] = rows[:, None] * sw + cols[None, :]
    return owner, index


def apply_corruption(query_fm, sampled_fm, owner, index):
    """Batched gather for precomputed plans (``owner``/``index`` are ``BxHxW``)."""
    b, c = query_fm.shape[:2]
    hw = owner.shape[-2] * owner.shape[-1]
    idx = index.reshape(b, 1, hw).expand(b, c, hw)
    from_q = torch.gather(query_fm.flatten(2), 2, idx)
    from_s = torch.gather(sampled_fm.flatten(2), 2, idx)
    own = owner.reshape(b, 1, hw)
    out = torch.where(own == 0, from_q, torch.where(own == 1, from_s, torch.zeros_like(from_q)))
    return out.view(b, c, *owner.shape[-2:])


def feature_corrupt(query_fm, sampled_fm, layout: BoxLayout, out_shape) -> torch.Tensor:
    """Place ``query_fm`` in box 0 and ``sampled_fm`` in box 1 of ``layout``.

    Cells outside both boxes are exactly zero; where the boxes overlap the box
    later in ``layout.z_order`` wins.
    """
    if query_fm.dim() != 3 or sampled_fm.dim() != 3:
        raise ShapeError("feature_corrupt takes single CxHxW maps")
    if query_fm.shape != sampled_fm.shape:
        raise ShapeError("query and sampled maps must have the same shape")
    owner, index = corruption_plan(layout, query_fm.shape[-2:], tuple(out_shape))
    return apply_corruption(query_fm[None], sampled_fm[None], owner[None], index[None])[0]


def stack_plans(plans: Sequence):
    owners, indices = zip(*plans)
    return torch.stack(owners), torch.stack(indices)


# ---------------------------------------------------------------------------
# Full network
# ---------------------------------------------------------------------------

class PISNet(nn.Module):
    """Backbone, shared QGAB and a single ID classifier over train identities.

    The classifier sees L2-normalised embeddings times ``head_scale``; with
    ``head_scale=None`` it sees raw embeddings.
    """

    def __init__(self, num_classes: int, backbone_cfg: BackboneConfig | None = None,
                 guidance_channels: int | None = None, head_scale: float | None = 16.0):
        super().__init__()
        self.backbone = Backbone(backbone_cfg)
        c = self.backbone.out_channels
        self.qgab = QGAB(c, guidance_channels)
        self.classifier = nn.Linear(c, num_classes)
        self.num_classes = num_classes
        self.class_ids = tuple(range(num_classes))
        self.head_scale = head_scale
        self.backbone_trained = False
        self.qgab_trained = False

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return backbone_forward(images, self.backbone)

    def logits(self, embedding: torch.Tensor) -> torch.Tensor:
        if self.head_scale is None:
            return self.classifier(embedding)
        return self.classifier(F.normalize(embedding, dim=-1) * self.head_scale)
