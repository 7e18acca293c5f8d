"""Desk-scale dual-decoder segmentation network.

A 2.5D stem feeds one shared strided encoder. Two fusion decoders (top-down
then bottom-up passes over five scales) serve the polymorphic head (4
channels) and the multitask head (two independent 2-channel outputs for
airway and vessel). Every decoder output passes a spatial attention gate and
every scale carries its own head, for deep supervision.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import from_dict, to_dict
from .errors import CheckpointError, ConfigError, ShapeError, logger

SCALES = (1, 2, 4, 8, 16)
FORMAT_VERSION = 1

_DTYPE_TAGS = {
    torch.float32: ("f32", np.dtype("<f4")),
    torch.float64: ("f64", np.dtype("<f8")),
    torch.int64: ("i64", np.dtype("<i8")),
}
_TAG_DTYPES = {tag: (tdtype, npdtype) for tdtype, (tag, npdtype) in _DTYPE_TAGS.items()}


@dataclass
class ModelConfig:
    base_width: int = 16
    decoder_width: int = 32
    encoder_stages: int = 4
    patch_size: int = 64
    seed: int = 0
    attention: bool = True

    def validate(self):
        if self.patch_size % SCALES[-1]:
            raise ConfigError(f"patch size {self.patch_size} must be divisible by {SCALES[-1]}")
        if self.base_width < 4 or self.decoder_width < 4:
            raise ConfigError("channel widths must be at least 4")
        if self.encoder_stages != len(SCALES) - 1:
            raise ConfigError(f"encoder needs {len(SCALES) - 1} stages for scales {SCALES}")
        return self

    @property
    def encoder_widths(self) -> tuple[int, ...]:
        b = self.base_width
        return (b, 2 * b, 4 * b, 8 * b, 8 * b)


@dataclass
class NetworkOutputs:
    """Logits per scale (index 0 = full resolution) plus attention maps."""
    poly: list[torch.Tensor]
    airway: list[torch.Tensor]
    vessel: list[torch.Tensor]
    attention: dict[str, list[torch.Tensor]] = field(default_factory=dict)

    def select(self, index) -> "NetworkOutputs":
        index = torch.as_tensor(index, dtype=torch.long, device=self.poly[0].device)
        pick = lambda grids: [g.index_select(0, index) for g in grids]
        return NetworkOutputs(pick(self.poly), pick(self.airway), pick(self.vessel),
                              {k: pick(v) for k, v in self.attention.items()})

    def head(self, name: str) -> list[torch.Tensor]:
        return getattr(self, name)


def conv_bn_act(in_channels, out_channels, stride=1):
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.SiLU(),
    )


class Stem(nn.Module):
    """3×3×3 convolution, unpadded across the three slices, padded in-plane."""

    def __init__(self, out_channels):
        super().__init__()
        self.conv = nn.Conv3d(1, out_channels, kernel_size=3, padding=(0, 1, 1))

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"Stem expects N×3×H×W slabs, got {tuple(x.shape)}")
        return self.conv(x.unsqueeze(1)).squeeze(2)


class SeparableConvBlock(nn.Module):
    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.depthwise = nn.Conv2d(in_channels, in_channels, 3, padding=1, groups=in_channels, bias=False)
        self.pointwise = nn.Conv2d(in_channels, out_channels, 1, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)
        self.act = nn.SiLU()

    def forward(self, x):
        return self.act(self.bn(self.pointwise(self.depthwise(x))))


class AttentionGate(nn.Module):
    """alpha = sigmoid(1×1 conv(features)); returns (alpha * features, alpha)."""

    def __init__(self, channels, enabled=True):
        super().__init__()
        self.enabled = enabled
        self.conv = nn.Conv2d(channels, 1, 1)

    def forward(self, x):
        if not self.enabled:
            return x, torch.ones_like(x[:, :1])
        alpha = torch.sigmoid(self.conv(x))
        return x * alpha, alpha


class Encoder(nn.Module):
    def __init__(self, widths):
        super().__init__()
        self.stem = Stem(widths[0])
        stages = [nn.Sequential(nn.BatchNorm2d(widths[0]), nn.SiLU(), conv_bn_act(widths[0], widths[0]))]
        for prev, width in zip(widths[:-1], widths[1:]):
            stages.append(nn.Sequential(conv_bn_act(prev, width, stride=2), conv_bn_act(width, width)))
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        features = []
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features


class FusionDecoder(nn.Module):
    """Fixed-width bidirectional fusion over the five encoder scales."""

    def __init__(self, encoder_widths, width, attention=True):
        super().__init__()
        levels = len(encoder_widths)
        self.lateral = nn.ModuleList(nn.Conv2d(w, width, 1) for w in encoder_widths)
        self.top_down = nn.ModuleList(SeparableConvBlock(width, width) for _ in range(levels - 1))
        self.bottom_up = nn.ModuleList(SeparableConvBlock(width, width) for _ in range(levels - 1))
        self.gates = nn.ModuleList(AttentionGate(width, attention) for _ in range(levels))

    def forward(self, features):
        lat = [conv(f) for conv, f in zip(self.lateral, features)]
        levels = len(lat)

        td = [None] * levels
        td[-1] = lat[-1]
        for i in range(levels - 2, -1, -1):
            up = F.interpolate(td[i + 1], size=lat[i].shape[-2:], mode="bilinear", align_corners=False)
            td[i] = self.top_down[i](lat[i] + up)

        out = [None] * levels
        out[0] = td[0]
        for i in range(1, levels):
            fused = lat[i] + F.avg_pool2d(out[i - 1], 2)
            if i < levels - 1:
                fused = fused + td[i]
            out[i] = self.bottom_up[i - 1](fused)

        gated, alphas = zip(*(gate(o) for gate, o in zip(self.gates, out)))
        return list(gated), list(alphas)


class SegmentationHead(nn.Module):
    """Three separable conv/BN/swish blocks, then one 1×1 projection per output."""

    def __init__(self, width, outputs):
        super().__init__()
        self.blocks = nn.Sequential(*(SeparableConvBlock(width, width) for _ in range(3)))
        self.projections = nn.ModuleList(nn.Conv2d(width, c, 1) for c in outputs)

    def forward(self, x):
        x = self.blocks(x)
        return tuple(proj(x) for proj in self.projections)


class HPSegNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.validate()
        widths = cfg.encoder_widths
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.encoder = Encoder(widths)
            self.poly_decoder = FusionDecoder(widths, cfg.decoder_width, cfg.attention)
            self.multitask_decoder = FusionDecoder(widths, cfg.decoder_width, cfg.attention)
            self.poly_heads = nn.ModuleList(SegmentationHead(cfg.decoder_width, (4,)) for _ in SCALES)
            self.multitask_heads = nn.ModuleList(SegmentationHead(cfg.decoder_width, (2, 2)) for _ in SCALES)

    def forward(self, x) -> NetworkOutputs:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"Expected N×3×H×W input, got {tuple(x.shape)}")
        if x.shape[-1] % SCALES[-1] or x.shape[-2] % SCALES[-1]:
            raise ShapeError(f"Spatial dims {tuple(x.shape[-2:])} must be divisible by {SCALES[-1]}")

        features = self.encoder(x)
        poly_feats, poly_alpha = self.poly_decoder(features)
        mt_feats, mt_alpha = self.multitask_decoder(features)

        poly = [head(f)[0] for head, f in zip(self.poly_heads, poly_feats)]
        airway, vessel = [], []
        for head, f in zip(self.multitask_heads, mt_feats):
            a, v = head(f)
            airway.append(a)
            vessel.append(v)
        return NetworkOutputs(poly=poly, airway=airway, vessel=vessel,
                              attention={"poly": poly_alpha, "multitask": mt_alpha})


def build_model(cfg: ModelConfig | None = None) -> HPSegNet:
    model = HPSegNet(cfg or ModelConfig())
    logger.debug(f"Built model with {count_parameters(model)} parameters")
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _tensor_entries(tensors):
    entries, payload = [], []
    for name, t in tensors:
        t = t.detach().cpu()
        if t.dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"Unsupported tensor dtype {t.dtype} for '{name}'")
        tag, npdtype = _DTYPE_TAGS[t.dtype]
        entries.append({"name": name, "shape": list(t.shape), "dtype": tag})
        payload.append(np.ascontiguousarray(t.numpy(), dtype=npdtype).tobytes())
    return entries, b"".join(payload)


def _read_tensors(entries, raw, offset):
    tensors = {}
    for entry in entries:
        try:
            tdtype, npdtype = _TAG_DTYPES[entry["dtype"]]
            name, shape = entry["name"], entry["shape"]
        except (KeyError, TypeError) as e:
            raise CheckpointError(f"Malformed tensor entry {entry!r}") from e
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * npdtype.itemsize
        if offset + nbytes > len(raw):
            raise CheckpointError(f"Checkpoint payload truncated at '{name}'")
        array = np.frombuffer(raw, dtype=npdtype, count=count, offset=offset).copy()
        tensors[name] = torch.from_numpy(array).reshape(shape).to(tdtype)
        offset += nbytes
    return tensors, offset


def save_checkpoint(path, model: HPSegNet, optimizer_section: dict | None = None) -> Path:
    """Header line (JSON config + tensor table), raw payload; optional optimizer section."""
    entries, payload = _tensor_entries(model.state_dict().items())
    header = {"format_version": FORMAT_VERSION, "model": to_dict(model.cfg), "params": entries}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(payload)
        if optimizer_section is not None:
            tensors = optimizer_section.get("tensors", {})
            opt_entries, opt_payload = _tensor_entries(sorted(tensors.items()))
            opt_header = {"section": "optimizer", "meta": optimizer_section.get("meta", {}),
                          "tensors": opt_entries}
            f.write(json.dumps(opt_header, sort_keys=True).encode("utf-8") + b"\n")
            f.write(opt_payload)
    logger.info(f"Checkpoint saved to {path}")
    return path


def load_checkpoint(path, expected: ModelConfig | None = None):
    """Return (model, optimizer_section | None); config must match ``expected`` when given."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    newline = raw.find(b"\n")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint header") from e
    if newline < 0 or not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format")
    missing = sorted({"model", "params"} - set(header))
    if missing:
        raise CheckpointError(f"{path}: checkpoint header lacks {missing}")
    if not isinstance(header["params"], list):
        raise CheckpointError(f"{path}: tensor table must be a list")

    try:
        cfg = from_dict(ModelConfig, header["model"])
    except (ConfigError, TypeError) as e:
        raise CheckpointError(f"{path}: {e}") from e
    if expected is not None and to_dict(expected) != to_dict(cfg):
        raise CheckpointError(f"{path}: model config {to_dict(cfg)} does not match {to_dict(expected)}")

    tensors, offset = _read_tensors(header["params"], raw, newline + 1)
    model = HPSegNet(cfg)
    try:
        model.load_state_dict(tensors, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: {e}") from e

    optimizer_section = None
    if offset < len(raw):
        newline = raw.find(b"\n", offset)
        if newline < 0:
            raise CheckpointError(f"{path}: trailing bytes without a section header")
        try:
            opt_header = json.loads(raw[offset:newline].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: malformed optimizer section header") from e
        if not isinstance(opt_header, dict) or "tensors" not in opt_header:
            raise CheckpointError(f"{path}: optimizer section lacks a tensor table")
        opt_tensors, offset = _read_tensors(opt_header["tensors"], raw, newline + 1)
        optimizer_section = {"meta": opt_header.get("meta", {}), "tensors": opt_tensors}
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} unexpected trailing bytes")
    return model, optimizer_section
