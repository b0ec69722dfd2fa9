import copy

import pytest

import torch
from torch import nn

torch.set_num_threads(1)


class Scrambled(nn.Module):
    """Stand-in for a re-randomized unit: random conv followed by a high-frequency cosine.

    The output keeps the unit's width and stride but carries no linear trace of
    its input, so its features are as unrelated to the original as random ones.
    """

    def __init__(self, unit: nn.Module, seed: int):
        super().__init__()
        convs = [m for m in unit.modules() if isinstance(m, nn.Conv2d)]
        stride = max(m.stride[0] for m in convs)
        gen = torch.Generator().manual_seed(seed)
        self.conv = nn.Conv2d(convs[0].in_channels, convs[-1].out_channels, 3, stride, 1)
        with torch.no_grad():
            self.conv.weight.copy_(torch.randn(self.conv.weight.shape, generator=gen))
            self.conv.bias.copy_(torch.rand(self.conv.out_channels, generator=gen) * 6.28)

    def forward(self, x):
        return torch.cos(37.0 * self.conv(x))


def scramble_blocks(backbone, blocks, seed: int = 0):
    """Deep copy of ``backbone`` whose units in ``blocks`` are re-randomized."""
    out = copy.deepcopy(backbone)
    for i, (_, block, unit) in enumerate(out.named_units()):
        if block in blocks:
            out.units[i] = Scrambled(unit, 1000 * seed + i)
    return out


@pytest.fixture(scope="session")
def source_backbone(tmp_path_factory):
    """mini_resnet pretrained on the synthetic line-angle source (about half a minute on CPU)."""
    from difftl.synthetic import PretrainSpec, pretrain_backbone

    return pretrain_backbone(PretrainSpec(), tmp_path_factory.mktemp("source"))
