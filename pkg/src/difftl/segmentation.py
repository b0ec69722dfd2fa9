"""ResNet-encoder U-Nets and symmetric encoder/decoder truncation."""
from __future__ import annotations

import copy
from typing import Sequence

import torch
from torch import nn
from torch.nn import functional as F
from torchvision.models import resnet as tv_resnet


class SegmentationSurgeryError(ValueError):
    pass


def _conv_bn_relu(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class DecoderBlock(nn.Module):
    """Upsample x2, concatenate the skip (if any), two conv-bn-relu layers."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int, skip_from: int | None):
        super().__init__()
        self.in_channels = in_channels
        self.skip_channels = skip_channels
        self.out_channels = out_channels
        self.skip_from = skip_from
        self.conv1 = _conv_bn_relu(in_channels + skip_channels, out_channels)
        self.conv2 = _conv_bn_relu(out_channels, out_channels)

    def forward(self, x: torch.Tensor, skip: torch.Tensor | None) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        return self.conv2(self.conv1(x))


class ResNetUNet(nn.Module):
    """U-Net over an encoder given as stages; decoder block ``d`` mirrors stage ``D - 1 - d``.

    Stage ``i`` halves the resolution, so ``D + 1`` stages need ``D + 1``
    decoder blocks to return to the input resolution. The last decoder block
    has no skip.
    """

    def __init__(self, stages: Sequence[nn.Module], stage_channels: Sequence[int],
                 decoder_channels: Sequence[int], out_classes: int = 1):
        super().__init__()
        if len(stages) != len(stage_channels) or len(decoder_channels) != len(stages):
            raise SegmentationSurgeryError("need one decoder block per encoder stage")
        self.stages = nn.ModuleList(stages)
        self.stage_channels = list(stage_channels)
        depth = len(stages) - 1
        blocks = []
        cin = stage_channels[-1]
        for d, cout in enumerate(decoder_channels):
            skip = depth - 1 - d
            skip_ch = stage_channels[skip] if skip >= 0 else 0
            blocks.append(DecoderBlock(cin, skip_ch, cout, skip if skip >= 0 else None))
            cin = cout
        self.decoder = nn.ModuleList(blocks)
        self.segmentation_head = nn.Conv2d(cin, out_classes, 3, padding=1)

    @property
    def depth(self) -> int:
        return len(self.stages) - 1

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        for block in self.decoder:
            x = block(x, None if block.skip_from is None else feats[block.skip_from])
        return self.segmentation_head(x)

    def skips(self) -> list[tuple[int, int]]:
        """(decoder block, encoder stage) pairs joined by a skip connection."""
        return [(d, b.skip_from) for d, b in enumerate(self.decoder) if b.skip_from is not None]


def resnet34_unet(decoder_channels=(256, 128, 64, 32, 16), out_classes: int = 1,
                  weights: str | None = None) -> ResNetUNet:
    """ResNet34 encoder in five stages (stem, layer1..layer4)."""
    enc = tv_resnet.resnet34(weights=tv_resnet.ResNet34_Weights.DEFAULT if weights == "imagenet" else None)
    stages = [
        nn.Sequential(enc.conv1, enc.bn1, enc.relu),
        nn.Sequential(enc.maxpool, enc.layer1),
        enc.layer2, enc.layer3, enc.layer4,
    ]
    return ResNetUNet(stages, [64, 64, 128, 256, 512], decoder_channels, out_classes)


def toy_unet(levels: int = 3, width: int = 4, in_channels: int = 1, out_classes: int = 1) -> ResNetUNet:
    """Small U-Net with ``levels`` stride-2 conv stages."""
    chans = [width * 2 ** i for i in range(levels)]
    stages, cin = [], in_channels
    for c in chans:
        stages.append(nn.Sequential(nn.Conv2d(cin, c, 3, stride=2, padding=1, bias=False),
                                    nn.BatchNorm2d(c), nn.ReLU(inplace=True)))
        cin = c
    return ResNetUNet(stages, chans, list(reversed(chans)), out_classes)


def truncate_encoder_decoder(unet: ResNetUNet, block_cutoff: int, seed: int = 0) -> ResNetUNet:
    """Keep encoder stages ``0..block_cutoff`` and their mirrored decoder blocks.

    The deepest kept decoder block is rebuilt (fresh init) when its input
    width no longer matches the new encoder output; all other kept modules
    retain their weights. ``block_cutoff == unet.depth`` returns a copy.
    """
    from .surgery import init_fresh

    depth = unet.depth
    if not 0 <= block_cutoff <= depth:
        raise SegmentationSurgeryError(f"block cutoff {block_cutoff} outside [0, {depth}]")
    if block_cutoff == depth:
        return copy.deepcopy(unet)
    kept = [copy.deepcopy(b) for b in unet.decoder[depth - block_cutoff:]]
    for d, block in enumerate(kept):
        if block.skip_from is not None and block.skip_from > block_cutoff - 1:
            raise SegmentationSurgeryError(
                f"decoder block {depth - block_cutoff + d} would skip from removed stage {block.skip_from}"
            )
    new_in = unet.stage_channels[block_cutoff]
    first = kept[0]
    if first.in_channels != new_in:
        kept[0] = init_fresh(DecoderBlock(new_in, first.skip_channels, first.out_channels, first.skip_from), seed)

    out = copy.deepcopy(unet)
    out.stages = nn.ModuleList(list(out.stages)[: block_cutoff + 1])
    out.stage_channels = out.stage_channels[: block_cutoff + 1]
    out.decoder = nn.ModuleList(kept)
    return out


def params_with_full_encoder(truncated: ResNetUNet, original: ResNetUNet) -> int:
    """Parameters of ``truncated`` plus those of the encoder stages it dropped."""
    dropped = original.stages[len(truncated.stages):]
    return sum(p.numel() for p in truncated.parameters()) + sum(p.numel() for p in dropped.parameters())
