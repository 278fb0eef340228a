"""Residual U-Net encoder/decoder with geometric attention blocks between encoder stages."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .block import GeloVecBlock, make_variant
from .errors import DimensionError
from .tensor import check_finite, concat, concat_backward

DEFAULT_PLACEMENT = {1: "Low", 2: "Low", 3: "Mid", 4: "High", 5: "VeryHigh"}


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 3
    stage_channels: tuple[int, ...] = (64, 64, 128, 256, 512)
    blocks: tuple[int, ...] = (1, 1, 1, 1)
    gelovec: bool = True
    placement: dict = field(default_factory=lambda: dict(DEFAULT_PLACEMENT))
    decoder_channels: tuple[int, ...] = (256, 128, 64, 32, 16)
    out_channels: int = 1
    attention_grid_cap: int = 16

    def __post_init__(self):
        if len(self.stage_channels) != 5 or len(self.blocks) != 4:
            raise ValueError("need 5 stage widths and 4 residual block counts")
        if len(self.decoder_channels) != 5:
            raise ValueError("need 5 decoder widths (one per x2 upsampling)")
        h, w = self.input_size
        if h % 32 or w % 32:
            raise ValueError(f"input size {self.input_size} must be divisible by 32")
        if min(self.blocks) < 1:
            raise ValueError("every stage needs at least one residual block")

    @classmethod
    def full_scale(cls, **kw):
        return cls(input_size=(224, 224), blocks=(3, 4, 6, 3), **kw)


def _conv(cin, cout, k, seed, name, stride=1, bias=False):
    spec = nn.ConvSpec(cin, cout, k, stride=stride, padding=k // 2, bias=bias)
    return nn.Conv2d(spec, seed=nn.derive_seed(seed, name))


class BasicBlock(nn.Module):
    """Two 3x3 conv/BN layers with an identity or projected shortcut."""

    def __init__(self, cin, cout, stride, seed, name):
        super().__init__()
        self.conv1 = self.add_child("conv1", _conv(cin, cout, 3, seed, name + ".conv1", stride))
        self.bn1 = self.add_child("bn1", nn.BatchNorm2d(cout))
        self.relu1 = self.add_child("relu1", nn.ReLU())
        self.conv2 = self.add_child("conv2", _conv(cout, cout, 3, seed, name + ".conv2"))
        self.bn2 = self.add_child("bn2", nn.BatchNorm2d(cout))
        self.relu2 = self.add_child("relu2", nn.ReLU())
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = self.add_child("downsample", nn.Sequential(
                conv=_conv(cin, cout, 1, seed, name + ".downsample.conv", stride),
                bn=nn.BatchNorm2d(cout),
            ))

    def forward(self, x):
        out = self.bn2.forward(self.conv2.forward(self.relu1.forward(self.bn1.forward(self.conv1.forward(x)))))
        shortcut = x if self.downsample is None else self.downsample.forward(x)
        return self.relu2.forward(out + shortcut)

    def backward(self, dout):
        d = self.relu2.backward(dout)
        dx = d if self.downsample is None else self.downsample.backward(d)
        d = self.conv1.backward(self.bn1.backward(self.relu1.backward(self.conv2.backward(self.bn2.backward(d)))))
        return dx + d


class Identity(nn.Module):
    def forward(self, x):
        return x

    def backward(self, dout):
        return dout


class Encoder(nn.Module):
    """Stem plus four residual stages; every stage output may pass through a geometric block."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        ch = cfg.stage_channels
        self.stem = self.add_child("stem", nn.Sequential(
            conv=nn.Conv2d(nn.ConvSpec(cfg.in_channels, ch[0], 7, stride=2, padding=3, bias=False),
                           seed=nn.derive_seed(seed, "encoder.stem.conv")),
            bn=nn.BatchNorm2d(ch[0]),
            relu=nn.ReLU(),
            pool=nn.MaxPool2d(2, 2),
        ))
        self.stages = [self.stem]
        for s in range(2, 6):
            layers = {}
            cin = ch[s - 2]
            for i in range(cfg.blocks[s - 2]):
                stride = 2 if (i == 0 and s >= 3) else 1
                name = f"encoder.stage{s}.block{i}"
                layers[f"block{i}"] = BasicBlock(cin, ch[s - 1], stride, seed, name)
                cin = ch[s - 1]
            self.stages.append(self.add_child(f"stage{s}", nn.Sequential(**layers)))
        self.refiners = []
        for s in range(1, 6):
            if cfg.gelovec and s in cfg.placement:
                vcfg = make_variant(cfg.placement[s], attention_grid_cap=cfg.attention_grid_cap)
                if vcfg.channels != ch[s - 1]:
                    # Narrow test models keep the preset geometry at their own width.
                    vcfg = replace(vcfg, channels=ch[s - 1], reduced=max(1, ch[s - 1] // 4))
                name = f"gelovec{s}"
                block = GeloVecBlock(vcfg, seed=seed, name=f"encoder.{name}")
                self.refiners.append(self.add_child(name, block))
            else:
                self.refiners.append(Identity())

    def gelovec_blocks(self):
        return [r for r in self.refiners if isinstance(r, GeloVecBlock)]

    def forward(self, x):
        outs = []
        for stage, refine in zip(self.stages, self.refiners):
            x = refine.forward(stage.forward(x))
            outs.append(x)
        return outs[-1], outs[:-1]

    def backward(self, dbottleneck, dskips):
        d = dbottleneck
        for i in range(len(self.stages) - 1, -1, -1):
            d = self.stages[i].backward(self.refiners[i].backward(d))
            if i > 0 and dskips[i - 1] is not None:
                d = d + dskips[i - 1]
        return d


class DecoderStage(nn.Module):
    """x2 transposed-conv upsampling, optional skip concat, two 3x3 conv/BN/ReLU."""

    def __init__(self, cin, skip_channels, cout, seed, name):
        super().__init__()
        self.skip_channels = skip_channels
        self.up = self.add_child("up", nn.ConvTranspose2d(cin, cout, 2, 2,
                                                          seed=nn.derive_seed(seed, name + ".up")))
        self.convs = self.add_child("convs", nn.Sequential(
            conv1=_conv(cout + skip_channels, cout, 3, seed, name + ".convs.conv1"),
            bn1=nn.BatchNorm2d(cout),
            relu1=nn.ReLU(),
            conv2=_conv(cout, cout, 3, seed, name + ".convs.conv2"),
            bn2=nn.BatchNorm2d(cout),
            relu2=nn.ReLU(),
        ))

    def forward(self, x, skip=None):
        x = self.up.forward(x)
        self._concat = None
        if self.skip_channels:
            if skip is None or skip.shape[1] != self.skip_channels or skip.shape[2:] != x.shape[2:]:
                got = None if skip is None else skip.shape
                raise DimensionError(f"decoder expected skip with {self.skip_channels} channels at "
                                     f"{x.shape[2:]}, got {got}")
            x, self._concat = concat([x, skip], axis=1)
        return self.convs.forward(x)

    def backward(self, dout):
        d = self.convs.backward(dout)
        dskip = None
        if self._concat is not None:
            d, dskip = concat_backward(d, self._concat)
        return self.up.backward(d), dskip


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        ch = cfg.stage_channels
        # Deep-to-shallow skip sources: stage4, stage3, stage2.  Stage 1 shares
        # stage 2's resolution, so only the deeper of the two is consumed.
        self.skip_index = [3, 2, 1, None, None]
        cin = ch[4]
        self.stages = []
        for i, cout in enumerate(cfg.decoder_channels):
            idx = self.skip_index[i]
            skip_ch = ch[idx] if idx is not None else 0
            stage = DecoderStage(cin, skip_ch, cout, seed, f"decoder.stage{i + 1}")
            self.stages.append(self.add_child(f"stage{i + 1}", stage))
            cin = cout
        self.head = self.add_child("head", nn.Conv2d(
            nn.ConvSpec(cin, cfg.out_channels, 1), seed=nn.derive_seed(seed, "decoder.head")))
        self.out_act = nn.Sigmoid()

    def forward(self, bottleneck, skips):
        x = bottleneck
        self._num_skips = len(skips)
        for stage, idx in zip(self.stages, self.skip_index):
            x = stage.forward(x, skips[idx] if idx is not None else None)
        return self.out_act.forward(self.head.forward(x))

    def backward(self, dmask):
        d = self.head.backward(self.out_act.backward(dmask))
        dskips = [None] * self._num_skips
        for stage, idx in zip(reversed(self.stages), reversed(self.skip_index)):
            d, dskip = stage.backward(d)
            if idx is not None:
                dskips[idx] = dskip
        return d, dskips


class SegmentationModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        self.encoder = self.add_child("encoder", Encoder(cfg, seed))
        self.decoder = self.add_child("decoder", Decoder(cfg, seed))

    def gelovec_blocks(self):
        return self.encoder.gelovec_blocks()

    def forward(self, x):
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.in_channels or tuple(x.shape[2:]) != tuple(cfg.input_size):
            raise DimensionError(
                f"model expects (B, {cfg.in_channels}, {cfg.input_size[0]}, {cfg.input_size[1]}), "
                f"got {x.shape}"
            )
        bottleneck, skips = self.encoder.forward(x)
        return check_finite(self.decoder.forward(bottleneck, skips), "model output")

    def backward(self, dmask):
        dbottleneck, dskips = self.decoder.backward(dmask)
        return self.encoder.backward(dbottleneck, dskips)


def build_model(cfg: ModelConfig, seed: int = 0) -> SegmentationModel:
    return SegmentationModel(cfg, seed)


def model_forward(x: np.ndarray, model: SegmentationModel) -> np.ndarray:
    return model.forward(x)
