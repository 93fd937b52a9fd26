"""Encoder-decoder segmentation network with side-output fusion, a
receptive-field-placed auxiliary head, and stand-alone localization
connections (ILCs) into one target decoder stage.

Decoder stage m upsamples the deeper feature, concatenates the encoder skip
E_m, and convolves: y_m = U_m(x_m (+) E_m). At the target stage t the
concatenation additionally receives every deeper encoder output E_i routed
through its own upsampling path UI_i (no parameter sharing between paths):

    y_t = U_t(x_t (+) E_t (+) UI_{t+1}(E_{t+1}) (+) ... (+) UI_M(E_M))

The extra operands enter through a separate projection conv added to the
first conv's pre-activation, which is algebraically the same as widening
that conv over the full concatenation while keeping the base parameters
structurally identical across ilc modes.

Per-decoder-stage side outputs (1x1 conv to class logits, upsampled to input
resolution) are concatenated and fused by a final 1x1 conv into the main
output. The auxiliary head branches from the preeminent encoder layer via a
1x1 conv plus learned upsampling.
"""

import math
from dataclasses import dataclass, asdict
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .lerf import LayerSpec

ILC_MODES = ("none", "target", "all_shared")


@dataclass
class NetworkSpec:
    """Declarative description of the encoder/decoder wiring."""
    num_stages: int = 4
    channels: tuple = (64, 128, 256, 512)
    convs_per_stage: int = 2
    kernel_size: int = 3
    downsample: int = 2
    target_stage: int = 1
    preeminent_layer: int = 2
    ilc_mode: str = "target"
    num_classes: int = 2
    in_channels: int = 3
    padding_mode: str = "zeros"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)

    def validate(self):
        if self.num_stages < 2:
            raise ValueError("need at least 2 stages")
        if len(self.channels) != self.num_stages:
            raise ValueError(
                f"{len(self.channels)} channel entries for {self.num_stages} stages")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError("channels must increase strictly down the encoder")
        if not 1 <= self.target_stage <= self.num_stages:
            raise ValueError(f"target_stage {self.target_stage} outside [1, {self.num_stages}]")
        if self.ilc_mode not in ILC_MODES:
            raise ValueError(f"ilc_mode must be one of {ILC_MODES}")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd (same-padding convs)")
        if not 1 <= self.preeminent_layer <= len(self.encoder_layers()):
            raise ValueError(f"preeminent_layer {self.preeminent_layer} out of range")
        if self.downsample < 2:
            raise ValueError("downsample factor must be >= 2")

    def encoder_layers(self):
        """Encoder as a flat layer list (convs per stage, pools between)."""
        layers = []
        for s in range(self.num_stages):
            layers += [LayerSpec("conv", self.kernel_size, 1)] * self.convs_per_stage
            if s < self.num_stages - 1:
                layers.append(LayerSpec("pool", self.downsample, self.downsample))
        return layers

    def encoder_layer_channels(self):
        """Output channel count of each entry in encoder_layers()."""
        chans = []
        for s in range(self.num_stages):
            chans += [self.channels[s]] * self.convs_per_stage
            if s < self.num_stages - 1:
                chans.append(self.channels[s])
        return chans

    def encoder_layer_stages(self):
        """1-based stage of each entry (a pool's output opens the next stage)."""
        stages, stage = [], 1
        for s in range(self.num_stages):
            stages += [stage] * self.convs_per_stage
            if s < self.num_stages - 1:
                stage += 1
                stages.append(stage)
        return stages

    def min_input_size(self):
        return self.downsample ** (self.num_stages - 1)


class DualOutput(NamedTuple):
    y_main: torch.Tensor
    y_aux: torch.Tensor


class ConvBlock(nn.Module):
    """n_convs x (conv + batchnorm + relu). The optional `extra` tensor is
    added to the first conv's pre-activation, letting callers widen the
    effective input concatenation without touching this block's weights."""

    def __init__(self, in_ch, out_ch, n_convs=2, kernel=3, padding_mode="zeros"):
        super().__init__()
        pad = kernel // 2
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        for i in range(n_convs):
            self.convs.append(nn.Conv2d(in_ch if i == 0 else out_ch, out_ch, kernel,
                                        padding=pad, padding_mode=padding_mode,
                                        bias=False))
            self.norms.append(nn.BatchNorm2d(out_ch))

    def forward(self, x, extra=None, collect=None):
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            x = conv(x)
            if i == 0 and extra is not None:
                x = x + extra
            x = F.relu(norm(x))
            if collect is not None:
                collect.append(x)
        return x


class UpBlock(nn.Module):
    """Learned upsampling: transposed conv (x factor) + batchnorm + relu."""

    def __init__(self, in_ch, out_ch, factor=2):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_ch, out_ch, factor, stride=factor)
        self.norm = nn.BatchNorm2d(out_ch)

    def forward(self, x):
        return F.relu(self.norm(self.up(x)))


class VesselNet(nn.Module):
    """Dual-output segmentation network built from a NetworkSpec."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        M, ch, ds = spec.num_stages, spec.channels, spec.downsample
        kw = dict(n_convs=spec.convs_per_stage, kernel=spec.kernel_size,
                  padding_mode=spec.padding_mode)

        self.enc_blocks = nn.ModuleList(
            [ConvBlock(spec.in_channels if s == 0 else ch[s - 1], ch[s], **kw)
             for s in range(M)])
        self.pool = nn.MaxPool2d(ds, ds)

        # decoder stage m (1-based, 1..M-1) lives at index m-1
        self.dec_ups = nn.ModuleList(
            [UpBlock(ch[m], ch[m - 1], ds) for m in range(1, M)])
        self.dec_blocks = nn.ModuleList(
            [ConvBlock(2 * ch[m - 1], ch[m - 1], **kw) for m in range(1, M)])

        self.side_convs = nn.ModuleList(
            [nn.Conv2d(ch[m - 1], spec.num_classes, 1) for m in range(1, M)])
        self.fuse = nn.Conv2d(spec.num_classes * (M - 1), spec.num_classes, 1)

        tap_ch = spec.encoder_layer_channels()[spec.preeminent_layer - 1]
        tap_stage = spec.encoder_layer_stages()[spec.preeminent_layer - 1]
        self.aux_proj = nn.Conv2d(tap_ch, spec.num_classes, 1)
        self.aux_ups = nn.Sequential(
            *[nn.ConvTranspose2d(spec.num_classes, spec.num_classes, ds, stride=ds)
              for _ in range(tap_stage - 1)])

        # ILC machinery is registered last so that, under one init seed, the
        # preceding parameters are drawn identically across ilc modes.
        t = spec.target_stage
        if spec.ilc_mode == "target" and t < M:
            self.ilc_paths = nn.ModuleList(
                [nn.Sequential(*[UpBlock(ch[s - 1], ch[s - 2], ds)
                                 for s in range(i, t, -1)])
                 for i in range(t + 1, M + 1)])
            self.ilc_proj = nn.Conv2d(
                (M - t) * ch[t - 1], ch[t - 1], spec.kernel_size,
                padding=spec.kernel_size // 2, padding_mode=spec.padding_mode,
                bias=False)
        elif spec.ilc_mode == "all_shared":
            # one shared upsampler per stage transition, reused by every path
            self.shared_ups = nn.ModuleList(
                [UpBlock(ch[s - 1], ch[s - 2], ds) for s in range(2, M + 1)])
            self.stage_projs = nn.ModuleList(
                [nn.Conv2d((M - m) * ch[m - 1], ch[m - 1], spec.kernel_size,
                           padding=spec.kernel_size // 2,
                           padding_mode=spec.padding_mode, bias=False)
                 for m in range(1, M)])

    # -- pieces -----------------------------------------------------------

    def encode(self, x):
        """Run the encoder; returns (per-stage outputs, per-layer outputs)."""
        stage_outputs, layer_outputs = [], []
        for s, block in enumerate(self.enc_blocks):
            x = block(x, collect=layer_outputs)
            stage_outputs.append(x)
            if s < self.spec.num_stages - 1:
                x = self.pool(x)
                layer_outputs.append(x)
        return stage_outputs, layer_outputs

    def decoder_stage(self, m, x_m, e_m, extra=None):
        """y_m = U_m(x_m (+) E_m): upsample, concatenate the skip, convolve.

        m is the 1-based decoder stage; x_m is the deeper feature at the
        coarser resolution.
        """
        up = self.dec_ups[m - 1](x_m)
        if up.shape[-2:] != e_m.shape[-2:]:
            raise ValueError(
                f"stage {m}: upsampled {tuple(up.shape[-2:])} vs skip {tuple(e_m.shape[-2:])}")
        return self.dec_blocks[m - 1](torch.cat([up, e_m], dim=1), extra=extra)

    def target_decoder_stage(self, x_t, e_t, deeper):
        """Target stage with ILC operands from every deeper encoder stage."""
        spec = self.spec
        t = spec.target_stage
        if spec.ilc_mode != "target":
            raise RuntimeError("target_decoder_stage requires ilc_mode='target'")
        if len(deeper) != spec.num_stages - t:
            raise ValueError(
                f"expected {spec.num_stages - t} deeper encoder outputs, got {len(deeper)}")
        if not deeper:  # t == M: no operands, plain decoder stage
            return self.decoder_stage(t, x_t, e_t)
        ilc_feats = [path(e) for path, e in zip(self.ilc_paths, deeper)]
        extra = self.ilc_proj(torch.cat(ilc_feats, dim=1))
        return self.decoder_stage(t, x_t, e_t, extra=extra)

    def _shared_extra(self, m, stage_outputs):
        """all_shared mode: deeper encoder outputs through shared upsamplers."""
        feats = []
        for i in range(m + 1, self.spec.num_stages + 1):
            f = stage_outputs[i - 1]
            for s in range(i, m, -1):
                f = self.shared_ups[s - 2](f)
            feats.append(f)
        return self.stage_projs[m - 1](torch.cat(feats, dim=1))

    # -- forward ----------------------------------------------------------

    def forward(self, x):
        spec = self.spec
        h, w = x.shape[-2:]
        div = spec.min_input_size()
        if h % div or w % div:
            raise ValueError(f"input {h}x{w} not divisible by {div}")

        stage_outputs, layer_outputs = self.encode(x)
        tap = layer_outputs[spec.preeminent_layer - 1]

        sides = [None] * (spec.num_stages - 1)
        y = stage_outputs[-1]
        for m in range(spec.num_stages - 1, 0, -1):
            e_m = stage_outputs[m - 1]
            if spec.ilc_mode == "target" and m == spec.target_stage and m < spec.num_stages:
                y = self.target_decoder_stage(y, e_m, stage_outputs[m:])
            elif spec.ilc_mode == "all_shared":
                y = self.decoder_stage(m, y, e_m, extra=self._shared_extra(m, stage_outputs))
            else:
                y = self.decoder_stage(m, y, e_m)
            side = self.side_convs[m - 1](y)
            if side.shape[-2:] != (h, w):
                side = F.interpolate(side, size=(h, w), mode="bilinear",
                                     align_corners=False)
            sides[m - 1] = side

        y_main = self.fuse(torch.cat(sides, dim=1))
        y_aux = self.aux_ups(self.aux_proj(tap))
        if y_aux.shape[-2:] != (h, w):
            raise RuntimeError(
                f"auxiliary head produced {tuple(y_aux.shape[-2:])}, expected {(h, w)}")
        return DualOutput(y_main, y_aux)


def _he_init(net, seed):
    """Deterministic He initialization, drawn in module registration order."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for mod in net.modules():
            if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d)):
                w = mod.weight
                k = w.shape[2] * w.shape[3]
                fan_in = (w.shape[1] if isinstance(mod, nn.Conv2d) else w.shape[0]) * k
                std = math.sqrt(2.0 / fan_in)
                w.copy_(torch.randn(w.shape, generator=gen) * std)
                if mod.bias is not None:
                    mod.bias.zero_()
            elif isinstance(mod, nn.BatchNorm2d):
                mod.weight.fill_(1.0)
                mod.bias.zero_()


def build_network(spec: NetworkSpec, init_seed: int = 0) -> VesselNet:
    """Construct and He-initialize the network, deterministically in the seed."""
    net = VesselNet(spec)
    _he_init(net, init_seed)
    return net


def count_parameters(net):
    return sum(p.numel() for p in net.parameters())


def ilc_extra_parameters(spec: NetworkSpec):
    """Analytic parameter count of the ILC machinery (paths + projection)."""
    M, ch, ds, t = spec.num_stages, spec.channels, spec.downsample, spec.target_stage
    if spec.ilc_mode != "target" or t >= M:
        return 0
    total = 0
    for i in range(t + 1, M + 1):
        for s in range(i, t, -1):
            c_in, c_out = ch[s - 1], ch[s - 2]
            total += c_in * c_out * ds * ds + c_out      # transposed conv + bias
            total += 2 * c_out                           # batchnorm affine
    total += (M - t) * ch[t - 1] * ch[t - 1] * spec.kernel_size ** 2  # projection
    return total


def spec_from_dict(d):
    return NetworkSpec(**{k: tuple(v) if k == "channels" else v for k, v in d.items()})
