"""SMANet and the PSP-Net ablation variants.

All three variants share a dilated ResNet (bottleneck) encoder followed by
a pyramid pooling context head:

* ``psp_baseline``       encoder -> PSP head -> classifier -> upsample
* ``psp_double_decoder`` encoder -> PSP head -> two-level decoder -> classifier
* ``smanet``             encoder -> PSP head -> multiscale attention gating
                         -> two-level decoder -> classifier

The attention gating takes the head output, runs it through a 3x3 conv and
a pyramid of dilated convs each followed by pyramid pooling, and produces
two softmax-normalised maps. The foreground map multiplies a 1x1-reduced
copy of the head output. ``psp_double_decoder`` is SMANet with that gating
replaced by identity routing.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

VARIANTS = ("psp_baseline", "psp_double_decoder", "smanet")
VARIANT_ALIASES = {"psp": "psp_baseline", "psp-dd": "psp_double_decoder",
                   "psp_dd": "psp_double_decoder"}

IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    variant: str = "smanet"
    num_classes: int = 2
    layers: Tuple[int, ...] = (3, 4, 6, 3)
    base_width: int = 64
    output_stride: int = 8
    dilation_rates: Tuple[int, ...] = (1, 2, 4)
    psp_bins: Tuple[int, ...] = (1, 2, 3, 6)
    head_channels: int = 1024
    reduced_channels: int = 512
    attention_channels: int = 256
    decoder_channels: int = 256
    skip_channels: int = 48

    def __post_init__(self):
        variant = VARIANT_ALIASES.get(self.variant, self.variant)
        object.__setattr__(self, "variant", variant)
        for name in ("layers", "dilation_rates", "psp_bins"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if variant not in VARIANTS:
            raise SpecError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.num_classes != 2:
            raise SpecError("num_classes must be 2 (background, foreground)")
        if self.output_stride not in (8, 16):
            raise SpecError(f"output_stride must be 8 or 16, got {self.output_stride}")
        if len(self.layers) != 4 or min(self.layers) < 1:
            raise SpecError(f"layers must be four positive block counts, got {self.layers}")
        rates = self.dilation_rates
        if not rates or min(rates) < 1 or any(b <= a for a, b in zip(rates, rates[1:])):
            raise SpecError(f"dilation_rates must be positive and strictly increasing, got {rates}")
        if not self.psp_bins or min(self.psp_bins) < 1:
            raise SpecError(f"psp_bins must be positive, got {self.psp_bins}")
        for name in ("base_width", "head_channels", "reduced_channels", "attention_channels",
                     "decoder_channels", "skip_channels"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be positive")

    @property
    def encoder_channels(self) -> int:
        return self.base_width * 8 * Bottleneck.expansion

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown network spec keys: {sorted(unknown)}")
        return cls(**d)


def conv_bn_relu(cin, cout, kernel=3, dilation=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, padding=dilation * (kernel // 2), dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


# encoder --------------------------------------------------------------------

class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, inplanes, planes, stride=1, dilation=1, downsample=None):
        super().__init__()
        self.conv1 = nn.Conv2d(inplanes, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=stride, padding=dilation,
                               dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, planes * self.expansion, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(planes * self.expansion)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = downsample

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


class FeaturePyramid(NamedTuple):
    encoder_out: torch.Tensor  # 1/8 (or 1/16)
    conv_2: torch.Tensor       # 1/4, first skip used by the decoder
    conv_3: torch.Tensor       # 1/2, second skip used by the decoder


class ResNetEncoder(nn.Module):
    """Dilated ResNet with torchvision-compatible parameter names."""

    def __init__(self, layers=(3, 4, 6, 3), base_width=64, output_stride=8):
        super().__init__()
        self.inplanes = base_width
        self.conv1 = nn.Conv2d(3, base_width, 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(base_width)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        if output_stride == 8:
            strides, dilations = (1, 2, 1, 1), (1, 1, 2, 4)
        else:
            strides, dilations = (1, 2, 2, 1), (1, 1, 1, 2)
        self.layer1 = self._make_layer(base_width, layers[0], strides[0], dilations[0])
        self.layer2 = self._make_layer(base_width * 2, layers[1], strides[1], dilations[1])
        self.layer3 = self._make_layer(base_width * 4, layers[2], strides[2], dilations[2])
        self.layer4 = self._make_layer(base_width * 8, layers[3], strides[3], dilations[3])
        self.stem_channels = base_width
        self.layer1_channels = base_width * Bottleneck.expansion

    def _make_layer(self, planes, blocks, stride, dilation):
        downsample = None
        if stride != 1 or self.inplanes != planes * Bottleneck.expansion:
            downsample = nn.Sequential(
                nn.Conv2d(self.inplanes, planes * Bottleneck.expansion, 1, stride=stride, bias=False),
                nn.BatchNorm2d(planes * Bottleneck.expansion),
            )
        # first block of a dilated stage uses half the dilation, as in DeepLab/PSPNet
        layers = [Bottleneck(self.inplanes, planes, stride, max(dilation // 2, 1), downsample)]
        self.inplanes = planes * Bottleneck.expansion
        layers += [Bottleneck(self.inplanes, planes, 1, dilation) for _ in range(1, blocks)]
        return nn.Sequential(*layers)

    def forward(self, x) -> FeaturePyramid:
        half = self.relu(self.bn1(self.conv1(x)))
        quarter = self.layer1(self.maxpool(half))
        out = self.layer4(self.layer3(self.layer2(quarter)))
        return FeaturePyramid(out, quarter, half)


# context and attention ------------------------------------------------------

class PyramidPooling(nn.Module):
    """Pool into ``bins`` grids, project, upsample and concatenate with input."""

    def __init__(self, in_channels, bins=(1, 2, 3, 6)):
        super().__init__()
        self.bins = tuple(bins)
        branch = max(in_channels // len(self.bins), 1)
        self.stages = nn.ModuleList(
            nn.Sequential(nn.Conv2d(in_channels, branch, 1), nn.ReLU(inplace=True))
            for _ in self.bins
        )
        self.out_channels = in_channels + branch * len(self.bins)

    def forward(self, x):
        h, w = x.shape[-2:]
        if max(self.bins) > min(h, w):
            raise ValueError(f"pyramid bin {max(self.bins)} larger than feature map {h}x{w}")
        outs = [x]
        for bin_size, stage in zip(self.bins, self.stages):
            y = stage(F.adaptive_avg_pool2d(x, bin_size))
            outs.append(F.interpolate(y, size=(h, w), mode="bilinear", align_corners=False))
        return torch.cat(outs, dim=1)


class PSPHead(nn.Module):
    def __init__(self, in_channels, out_channels, bins):
        super().__init__()
        self.pool = PyramidPooling(in_channels, bins)
        self.conv = conv_bn_relu(self.pool.out_channels, out_channels)

    def forward(self, x):
        return self.conv(self.pool(x))


class MultiscaleAttentionPyramid(nn.Module):
    """One branch per dilation rate: dilated 3x3 conv then pyramid pooling."""

    def __init__(self, in_channels, branch_channels, rates=(1, 2, 4), bins=(1, 2, 3, 6)):
        super().__init__()
        self.rates = tuple(rates)
        self.branches = nn.ModuleList()
        for rate in self.rates:
            conv = conv_bn_relu(in_channels, branch_channels, 3, dilation=rate)
            self.branches.append(nn.Sequential(conv, PyramidPooling(branch_channels, bins)))
        self.branch_out = self.branches[0][1].out_channels
        self.out_channels = self.branch_out * len(self.rates)

    def forward(self, x):
        return torch.cat([branch(x) for branch in self.branches], dim=1)


class AttentionGate(nn.Module):
    """Two softmax attention maps; the foreground map gates reduced features."""

    def __init__(self, in_channels, reduced_channels, attention_channels, rates, bins):
        super().__init__()
        self.entry = conv_bn_relu(in_channels, attention_channels)
        self.pyramid = MultiscaleAttentionPyramid(attention_channels, attention_channels, rates, bins)
        self.scores = nn.Sequential(
            conv_bn_relu(self.pyramid.out_channels, attention_channels),
            nn.Conv2d(attention_channels, 2, 1),
        )
        self.reduce = nn.Sequential(
            nn.Conv2d(in_channels, reduced_channels, 1, bias=False),
            nn.BatchNorm2d(reduced_channels),
            nn.ReLU(inplace=True),
        )
        self.out_channels = reduced_channels

    def attention_maps(self, x):
        return torch.softmax(self.scores(self.pyramid(self.entry(x))), dim=1)

    def forward(self, x):
        maps = self.attention_maps(x)
        return self.reduce(x) * maps[:, 1:2], maps


# decoder --------------------------------------------------------------------

class DecoderStage(nn.Module):
    """Upsample to the skip resolution, concat reduced skip, two 3x3 convs."""

    def __init__(self, in_channels, skip_in, skip_channels, out_channels):
        super().__init__()
        self.skip = nn.Sequential(
            nn.Conv2d(skip_in, skip_channels, 1, bias=False),
            nn.BatchNorm2d(skip_channels),
            nn.ReLU(inplace=True),
        )
        self.convs = nn.Sequential(
            conv_bn_relu(in_channels + skip_channels, out_channels),
            conv_bn_relu(out_channels, out_channels),
        )

    def forward(self, x, skip):
        h, w = x.shape[-2:]
        sh, sw = skip.shape[-2:]
        if sh < h or sw < w or sh > 4 * h or sw > 4 * w:
            raise ValueError(f"decoder stage at {h}x{w} cannot join skip features at {sh}x{sw}")
        x = F.interpolate(x, size=(sh, sw), mode="bilinear", align_corners=False)
        return self.convs(torch.cat([x, self.skip(skip)], dim=1))


class TwoLevelDecoder(nn.Module):
    def __init__(self, in_channels, conv2_channels, conv3_channels, skip_channels, channels):
        super().__init__()
        self.stage1 = DecoderStage(in_channels, conv2_channels, skip_channels, channels)
        self.stage2 = DecoderStage(channels, conv3_channels, skip_channels, max(channels // 2, 1))
        self.out_channels = max(channels // 2, 1)

    def forward(self, x, conv_2, conv_3):
        return self.stage2(self.stage1(x, conv_2), conv_3)


def multiscale_attention_pyramid(pyramid: MultiscaleAttentionPyramid, features):
    """Concatenated per-rate branch outputs at the input feature resolution."""
    return pyramid(features)


def attention_forward(gate: AttentionGate, features):
    """Returns ``(maps, attended)``; ``maps[:, 1]`` is the foreground map."""
    attended, maps = gate(features)
    return maps, attended


def decoder_forward(decoder: TwoLevelDecoder, classifier: nn.Module, attended, conv_2, conv_3,
                    size):
    """Decode to class scores at ``size`` (height, width)."""
    y = classifier(decoder(attended, conv_2, conv_3))
    return F.interpolate(y, size=tuple(size), mode="bilinear", align_corners=False)


# full network ---------------------------------------------------------------

class SegmentationNet(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.encoder = ResNetEncoder(spec.layers, spec.base_width, spec.output_stride)
        self.head = PSPHead(spec.encoder_channels, spec.head_channels, spec.psp_bins)
        channels = spec.head_channels
        self.attention = None
        self.decoder = None
        if spec.variant == "smanet":
            self.attention = AttentionGate(spec.head_channels, spec.reduced_channels,
                                           spec.attention_channels, spec.dilation_rates,
                                           spec.psp_bins)
            channels = self.attention.out_channels
        if spec.variant in ("smanet", "psp_double_decoder"):
            self.decoder = TwoLevelDecoder(channels, self.encoder.layer1_channels,
                                           self.encoder.stem_channels, spec.skip_channels,
                                           spec.decoder_channels)
            channels = self.decoder.out_channels
        self.classifier = nn.Conv2d(channels, spec.num_classes, 1)
        init_weights(self)

    def forward(self, x, return_attention: bool = False):
        size = x.shape[-2:]
        feats = self.encoder(x)
        y = self.head(feats.encoder_out)
        maps = None
        if self.attention is not None:
            y, maps = self.attention(y)
        if self.decoder is not None:
            y = self.decoder(y, feats.conv_2, feats.conv_3)
        y = F.interpolate(self.classifier(y), size=size, mode="bilinear", align_corners=False)
        if return_attention:
            return y, maps
        return y


def init_weights(model: nn.Module) -> None:
    """Fan-in scaled normal init for convs; unit-scale batch norm."""
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_network(spec: NetworkSpec, encoder_weights: Optional[str] = None) -> SegmentationNet:
    """Construct the network for ``spec``.

    ``encoder_weights`` optionally names a ResNet state dict (torchvision
    layout); matching encoder tensors are loaded, the classifier ``fc`` is
    ignored.
    """
    if not isinstance(spec, NetworkSpec):
        raise SpecError("build_network expects a NetworkSpec")
    model = SegmentationNet(spec)
    if encoder_weights:
        state = torch.load(encoder_weights, map_location="cpu", weights_only=True)
        own = model.encoder.state_dict()
        matched = {k: v for k, v in state.items() if k in own and own[k].shape == v.shape}
        if not matched:
            raise SpecError(f"{encoder_weights}: no encoder tensors match the network spec")
        model.encoder.load_state_dict(matched, strict=False)
    return model


def block_census(model: SegmentationNet) -> dict:
    return {
        "encoder": True,
        "psp_head": model.head is not None,
        "attention": model.attention is not None,
        "decoder": model.decoder is not None,
    }


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def normalize_image(image) -> torch.Tensor:
    """uint8 HxWx3 array (or NxHxWx3) -> float NCHW tensor, mean/std normalized."""
    t = torch.as_tensor(image)
    if t.ndim == 3:
        t = t.unsqueeze(0)
    t = t.permute(0, 3, 1, 2).float().div_(255.0)
    mean = torch.tensor(IMAGE_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(IMAGE_STD).view(1, 3, 1, 1)
    return (t - mean) / std


# checkpoints ----------------------------------------------------------------

@dataclass
class Checkpoint:
    spec: NetworkSpec
    state_dict: dict
    step: int = 0
    config_digest: str = ""
    task: str = "seg"
    metrics: dict = field(default_factory=dict)

    def build(self) -> SegmentationNet:
        model = build_network(self.spec)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "spec": ckpt.spec.to_dict(),
        "state_dict": ckpt.state_dict,
        "step": ckpt.step,
        "config_digest": ckpt.config_digest,
        "task": ckpt.task,
        "metrics": ckpt.metrics,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    return Checkpoint(
        spec=NetworkSpec.from_dict(payload["spec"]),
        state_dict=payload["state_dict"],
        step=int(payload.get("step", 0)),
        config_digest=payload.get("config_digest", ""),
        task=payload.get("task", "seg"),
        metrics=dict(payload.get("metrics", {})),
    )


def load_model(path) -> SegmentationNet:
    return load_checkpoint(path).build()
