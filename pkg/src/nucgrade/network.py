"""CHR-Net: ResNet/GC backbone, two-stage W-Net segmentation and two HRFE classification heads.

All modules work on N x C x H x W float tensors. Images enter as floats in
[0, 1]; :func:`forward` handles conversion from uint8 H x W x 3 arrays.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core_types import MalformedInputError, NetworkOutputs
from .targets import N_TASK_CLASSES, REMAP_TABLES

VARIANTS = ("full", "mhr_udist", "mhr", "shr")


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    input_size: tuple[int, int] = (512, 512)
    backbone_widths: tuple[int, ...] = (64, 64, 128, 256, 512)
    backbone_blocks: tuple[int, ...] = (3, 4, 6, 3)  # ResNet-34 layout
    hrfe_stream_widths: tuple[int, ...] = (16, 32, 64)
    hrfe_blocks: int = 1
    lunet_widths: tuple[int, ...] = (32, 64, 128)
    use_gc_attention: bool = True
    n_final_classes: int = 5
    n_task_classes: int = 4
    aux_factor: int = 4
    # full = W-Net + two HRFEs; mhr_udist = one-stage distance head + two HRFEs;
    # mhr = two HRFEs only; shr = one 5-class HRFE only
    variant: str = "full"
    # "remap" starts the fusion 1x1 conv at the task-consistency votes scaled by fusion_scale
    fusion_init: str = "remap"
    fusion_scale: float = 4.0
    bn_momentum: float = 0.1  # running = 0.9 * running + 0.1 * batch

    def __post_init__(self):
        for name in ("input_size", "backbone_widths", "backbone_blocks", "hrfe_stream_widths",
                     "lunet_widths"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self):
        h, w = self.input_size
        if h <= 0 or w <= 0 or h % 32 or w % 32:
            raise ConfigError(f"input size {h}x{w} must be positive and divisible by 32")
        if len(self.backbone_widths) != 5 or len(self.backbone_blocks) != 4:
            raise ConfigError("backbone needs 5 widths and 4 stage depths")
        if len(self.hrfe_stream_widths) != 3 or len(self.lunet_widths) != 3:
            raise ConfigError("hrfe_stream_widths and lunet_widths need 3 entries")
        s = self.hrfe_stream_widths
        if not s[0] < s[1] < s[2]:
            raise ConfigError("HRFE stream widths must strictly increase toward coarser streams")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.fusion_init not in ("remap", "random"):
            raise ConfigError("fusion_init must be 'remap' or 'random'")
        if min(self.backbone_widths + self.hrfe_stream_widths + self.lunet_widths) < 1:
            raise ConfigError("widths must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def has_segmentation(self) -> bool:
        return self.variant in ("full", "mhr_udist")

    @property
    def has_dual_heads(self) -> bool:
        return self.variant != "shr"


def _bn(c, cfg):
    return nn.BatchNorm2d(c, momentum=cfg.bn_momentum)


def _up(x, size):
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class GCBlock(nn.Module):
    """Global context attention: softmax-pooled context, bottleneck transform, broadcast add."""

    def __init__(self, c, ratio=1 / 16):
        super().__init__()
        # a 1-channel bottleneck makes the LayerNorm output constant
        r = max(int(c * ratio), min(c, 4))
        self.mask = nn.Conv2d(c, 1, 1)
        self.transform = nn.Sequential(
            nn.Conv2d(c, r, 1), nn.LayerNorm([r, 1, 1]), nn.ReLU(inplace=True), nn.Conv2d(r, c, 1))

    def forward(self, x):
        n, c, h, w = x.shape
        attn = torch.softmax(self.mask(x).view(n, 1, h * w), dim=-1)
        context = torch.bmm(x.view(n, c, h * w), attn.transpose(1, 2)).view(n, c, 1, 1)
        return x + self.transform(context)


class ResBlock(nn.Module):
    """Two 3x3 convolutions plus a shortcut."""

    def __init__(self, cin, cout, cfg, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = _bn(cout, cfg)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = _bn(cout, cfg)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _bn(cout, cfg))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class SimpleBlock(nn.Sequential):
    """Two 3x3 conv-BN-ReLU layers."""

    def __init__(self, cin, cout, cfg):
        super().__init__(
            nn.Conv2d(cin, cout, 3, 1, 1, bias=False), _bn(cout, cfg), nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, 1, 1, bias=False), _bn(cout, cfg), nn.ReLU(inplace=True))


class DecoderBlock(nn.Module):
    """Upsample, concatenate the skip, two 3x3 convolutions with a 1x1 shortcut."""

    def __init__(self, cin, cskip, cout, cfg):
        super().__init__()
        cat = cin + cskip
        self.shortcut = nn.Sequential(nn.Conv2d(cat, cout, 1, bias=False), _bn(cout, cfg))
        self.conv1 = nn.Conv2d(cat, cout, 3, 1, 1, bias=False)
        self.bn1 = _bn(cout, cfg)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = _bn(cout, cfg)

    def forward(self, x, skip=None, size=None):
        size = skip.shape[-2:] if skip is not None else size
        x = _up(x, size)
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        out = self.bn2(self.conv2(F.relu(self.bn1(self.conv1(x)))))
        return F.relu(out + self.shortcut(x))


class Backbone(nn.Module):
    """ResNet-style encoder producing five levels at strides 2, 4, 8, 16, 32."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        w = cfg.backbone_widths
        self.stem = nn.Sequential(nn.Conv2d(3, w[0], 7, 2, 3, bias=False), _bn(w[0], cfg),
                                  nn.ReLU(inplace=True))
        self.pool = nn.MaxPool2d(3, 2, 1)
        self.stages = nn.ModuleList()
        for i, depth in enumerate(cfg.backbone_blocks):
            cin, cout = w[i], w[i + 1]
            stride = 1 if i == 0 else 2
            blocks = [ResBlock(cin, cout, cfg, stride)]
            blocks += [ResBlock(cout, cout, cfg) for _ in range(depth - 1)]
            if cfg.use_gc_attention:
                blocks.append(GCBlock(cout))
            self.stages.append(nn.Sequential(*blocks))

    def forward(self, x):
        feats = [self.stem(x)]
        y = self.pool(feats[0])
        for stage in self.stages:
            y = stage(y)
            feats.append(y)
        return feats


def build_backbone(cfg: NetworkConfig) -> Backbone:
    cfg.validate()
    return Backbone(cfg)


class CompositeConnection(nn.Module):
    """Upsample + 1x1 conv + BN linking an encoder level into an HRFE stream."""

    def __init__(self, cin, cout, cfg):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 1, bias=False)
        self.bn = _bn(cout, cfg)

    def forward(self, x, size):
        h, w = x.shape[-2:]
        if size[0] < h or size[1] < w:
            raise ConfigError(f"composite connection cannot downscale {h}x{w} to {tuple(size)}")
        return self.bn(self.conv(_up(x, size)))


class StageOneDecoder(nn.Module):
    """U-Net decoder over the backbone levels; emits the binary map (and, for udist, distance)."""

    def __init__(self, cfg: NetworkConfig, with_distance=False):
        super().__init__()
        w = cfg.backbone_widths
        self.blocks = nn.ModuleList([DecoderBlock(w[i + 1], w[i], w[i], cfg) for i in (3, 2, 1, 0)])
        top = max(w[0] // 2, 1)
        self.to_full = DecoderBlock(w[0], 0, top, cfg)
        self.binary_head = nn.Conv2d(top, 1, 1)
        self.distance_head = nn.Conv2d(top, 1, 1) if with_distance else None

    def forward(self, feats, size):
        x = feats[4]
        for block, skip in zip(self.blocks, (feats[3], feats[2], feats[1], feats[0])):
            x = block(x, skip)
        x = self.to_full(x, size=size)
        binary = torch.sigmoid(self.binary_head(x))
        distance = torch.sigmoid(self.distance_head(x)) if self.distance_head is not None else None
        return binary, distance


class LUNet(nn.Module):
    """Lightweight 3-level U-Net mapping a 1-channel binary map to a distance map."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        a, b, c = cfg.lunet_widths
        self.enc1 = SimpleBlock(1, a, cfg)
        self.enc2 = SimpleBlock(a, b, cfg)
        self.bottom = SimpleBlock(b, c, cfg)
        self.dec2 = DecoderBlock(c, b, b, cfg)
        self.dec1 = DecoderBlock(b, a, a, cfg)
        self.head = nn.Conv2d(a, 1, 1)

    def forward(self, binary):
        e1 = self.enc1(binary)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        x = self.bottom(F.max_pool2d(e2, 2))
        x = self.dec1(self.dec2(x, e2), e1)
        return torch.sigmoid(self.head(x))


def build_wnet_heads(cfg: NetworkConfig) -> tuple[StageOneDecoder, LUNet]:
    return StageOneDecoder(cfg), LUNet(cfg)


class AuxStem(nn.Module):
    """Simple-block stem for the 400x (full-res) or 100x (downsampled) image."""

    def __init__(self, cfg: NetworkConfig, scale: str):
        super().__init__()
        if scale not in ("100x", "400x"):
            raise ConfigError(f"aux stem scale must be '100x' or '400x', got {scale!r}")
        self.scale = scale
        self.block = SimpleBlock(3, cfg.hrfe_stream_widths[0], cfg)

    def forward(self, image, size):
        return _up(self.block(image), size)


def build_aux_stem(cfg: NetworkConfig, scale: str) -> AuxStem:
    return AuxStem(cfg, scale)


class Exchange(nn.Module):
    """Multi-resolution fusion: each stream adds resized copies of the other streams."""

    def __init__(self, widths, cfg):
        super().__init__()
        n = len(widths)
        self.paths = nn.ModuleDict()
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                if j > i:  # coarser -> finer: 1x1 conv then upsample
                    path = nn.Sequential(nn.Conv2d(widths[j], widths[i], 1, bias=False),
                                         _bn(widths[i], cfg))
                else:  # finer -> coarser: strided 3x3 convs
                    layers = []
                    for step in range(i - j):
                        last = step == i - j - 1
                        cout = widths[i] if last else widths[j]
                        layers += [nn.Conv2d(widths[j], cout, 3, 2, 1, bias=False), _bn(cout, cfg)]
                        if not last:
                            layers.append(nn.ReLU(inplace=True))
                    path = nn.Sequential(*layers)
                self.paths[f"{j}to{i}"] = path
        self.n = n

    def forward(self, xs):
        out = []
        for i in range(self.n):
            y = xs[i]
            for j in range(self.n):
                if j != i:
                    y = y + _up(self.paths[f"{j}to{i}"](xs[j]), xs[i].shape[-2:])
            out.append(F.relu(y))
        return out


class HRFE(nn.Module):
    """Three parallel streams at 1/1, 1/2 and 1/4 resolution with fusion exchanges.

    Stream k receives encoder level k through a composite connection; stream 1
    additionally receives the auxiliary stem features.
    """

    def __init__(self, cfg: NetworkConfig, n_out: int):
        super().__init__()
        s = cfg.hrfe_stream_widths
        bw = cfg.backbone_widths
        nb = cfg.hrfe_blocks
        self.cc = nn.ModuleList([CompositeConnection(bw[k], s[k], cfg) for k in range(3)])
        self.down = nn.ModuleList([
            nn.Sequential(nn.Conv2d(s[k], s[k + 1], 3, 2, 1, bias=False), _bn(s[k + 1], cfg),
                          nn.ReLU(inplace=True))
            for k in range(2)])

        def branch(c):
            return nn.Sequential(*[ResBlock(c, c, cfg) for _ in range(nb)])

        self.stage1 = nn.ModuleList([branch(s[0])])
        self.stage2 = nn.ModuleList([branch(s[0]), branch(s[1])])
        self.fuse2 = Exchange(s[:2], cfg)
        self.stage3 = nn.ModuleList([branch(s[0]), branch(s[1]), branch(s[2])])
        self.fuse3 = Exchange(s, cfg)
        self.head = nn.Sequential(
            nn.Conv2d(sum(s), s[0], 1, bias=False), _bn(s[0], cfg), nn.ReLU(inplace=True),
            nn.Conv2d(s[0], n_out, 1))

    def streams(self, feats, aux):
        h, w = aux.shape[-2:]
        sizes = [(h, w), ((h + 1) // 2, (w + 1) // 2), ((h + 3) // 4, (w + 3) // 4)]
        x1 = aux + self.cc[0](feats[0], sizes[0])
        xs = [self.stage1[0](x1)]
        x2 = self.down[0](xs[0]) + self.cc[1](feats[1], sizes[1])
        xs = self.fuse2([self.stage2[0](xs[0]), self.stage2[1](x2)])
        x3 = self.down[1](xs[1]) + self.cc[2](feats[2], sizes[2])
        xs = self.fuse3([self.stage3[0](xs[0]), self.stage3[1](xs[1]), self.stage3[2](x3)])
        return xs

    def forward(self, feats, aux):
        xs = self.streams(feats, aux)
        size = xs[0].shape[-2:]
        cat = torch.cat([xs[0], _up(xs[1], size), _up(xs[2], size)], dim=1)
        return torch.softmax(self.head(cat), dim=1)


def build_hrfe(cfg: NetworkConfig, task: str) -> HRFE:
    if task not in ("task1", "task2", "single"):
        raise ConfigError(f"unknown HRFE task {task!r}")
    n_out = cfg.n_final_classes if task == "single" else cfg.n_task_classes
    return HRFE(cfg, n_out)


class FusionHead(nn.Module):
    """1x1 convolution over the concatenated task probability maps, then softmax."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.conv = nn.Conv2d(2 * cfg.n_task_classes, cfg.n_final_classes, 1)
        if cfg.fusion_init == "remap":
            with torch.no_grad():
                self.conv.weight.copy_(remap_fusion_weights(cfg.fusion_scale)[:, :, None, None])
                self.conv.bias.zero_()

    def forward(self, task1, task2):
        return torch.softmax(self.conv(torch.cat([task1, task2], dim=1)), dim=1)


def remap_fusion_weights(scale: float = 1.0) -> torch.Tensor:
    """5 x 8 weights giving each final class one vote per task whose merged code contains it."""
    w = torch.zeros(len(REMAP_TABLES["task1"]), 2 * N_TASK_CLASSES)
    for t, table in enumerate((REMAP_TABLES["task1"], REMAP_TABLES["task2"])):
        for final_code, task_code in enumerate(table):
            w[final_code, t * N_TASK_CLASSES + int(task_code)] = scale
    return w


def build_fusion_head(cfg: NetworkConfig) -> FusionHead:
    return FusionHead(cfg)


class CHRNet(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.backbone = build_backbone(cfg)
        self.stage1 = self.lunet = None
        if cfg.variant == "full":
            self.stage1, self.lunet = build_wnet_heads(cfg)
        elif cfg.variant == "mhr_udist":
            self.stage1 = StageOneDecoder(cfg, with_distance=True)
        if cfg.has_dual_heads:
            self.stem100 = build_aux_stem(cfg, "100x")
            self.stem400 = build_aux_stem(cfg, "400x")
            self.hrfe1 = build_hrfe(cfg, "task1")
            self.hrfe2 = build_hrfe(cfg, "task2")
            self.fusion = build_fusion_head(cfg)
        else:
            self.stem400 = build_aux_stem(cfg, "400x")
            self.hrfe = build_hrfe(cfg, "single")

    def forward(self, image, aux100=None):
        """Return a dict of N x C x H x W maps; heads absent from the variant map to ``None``."""
        size = image.shape[-2:]
        if aux100 is None:
            aux100 = F.avg_pool2d(image, self.cfg.aux_factor)
        feats = self.backbone(image)
        out = dict(binary=None, distance=None, task1=None, task2=None)
        if self.stage1 is not None:
            out["binary"], out["distance"] = self.stage1(feats, size)
            if self.lunet is not None:
                out["distance"] = self.lunet(out["binary"])
        if self.cfg.has_dual_heads:
            # task1 isolates grade 3 and sees the 100x view; task2 sees the 400x view
            out["task1"] = self.hrfe1(feats, self.stem100(aux100, size))
            out["task2"] = self.hrfe2(feats, self.stem400(image, size))
            out["final"] = self.fusion(out["task1"], out["task2"])
        else:
            out["final"] = self.hrfe(feats, self.stem400(image, size))
        return out

    def backbone_parameters(self):
        return self.backbone.parameters()


def load_backbone_weights(model: CHRNet, weights: dict, strict: bool = False) -> list[str]:
    """Copy externally supplied backbone arrays (keyed by parameter name) into ``model``."""
    state = model.backbone.state_dict()
    loaded = []
    for name, value in weights.items():
        key = name[len("backbone."):] if name.startswith("backbone.") else name
        if key not in state:
            if strict:
                raise KeyError(f"unknown backbone parameter {name!r}")
            continue
        tensor = torch.as_tensor(np.asarray(value))
        if tensor.shape != state[key].shape:
            raise ValueError(f"{name}: shape {tuple(tensor.shape)} != {tuple(state[key].shape)}")
        state[key] = tensor.to(state[key].dtype)
        loaded.append(key)
    if strict and set(loaded) != set(state):
        raise KeyError(f"missing backbone parameters: {sorted(set(state) - set(loaded))[:5]}")
    model.backbone.load_state_dict(state)
    return loaded


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """uint8 (N x) H x W x 3 -> float N x 3 x H x W in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).float() / 255.0


def tensor_to_hwc(t: torch.Tensor | None, squeeze: bool) -> np.ndarray | None:
    if t is None:
        return None
    arr = t.detach().cpu().numpy().transpose(0, 2, 3, 1)
    return arr[0] if squeeze else arr


def forward(model: CHRNet, image: np.ndarray, aux100: np.ndarray) -> NetworkOutputs:
    """Evaluation-mode forward pass on H x W x 3 (or N x H x W x 3) uint8 arrays."""
    image, aux100 = np.asarray(image), np.asarray(aux100)
    single = image.ndim == 3
    h, w = image.shape[-3:-1]
    f = model.cfg.aux_factor
    if h % 32 or w % 32:
        raise MalformedInputError(f"image {h}x{w} not divisible by 32")
    if aux100.shape[-3:] != (h // f, w // f, 3) or aux100.ndim != image.ndim:
        raise MalformedInputError(f"aux image shape {aux100.shape} does not match image {image.shape}")
    model.eval()
    with torch.no_grad():
        out = model(image_to_tensor(image), image_to_tensor(aux100))
    return NetworkOutputs(**{k: tensor_to_hwc(out[k], single) for k in
                             ("binary", "distance", "task1", "task2", "final")})
