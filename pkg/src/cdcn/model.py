"""Components-decomposition network with mutual collaboration blocks.

Dataflow for one LR batch ``x`` (N, 3, h, w):

    f_in            = head(x)
    f_s0, f_d0      = decompose(f_in)                   two residual extractors
    f_s, f_d        = groups(f_s0, f_d0)                N residual groups of M MCBs
    f_s, f_d        = f_in + W_s f_s, f_d0 + W_d f_d    asymmetric global skip
    f_out           = fusion(f_s, f_d)                  multi-scale fusion
    sr, s_hat, d_hat = up_sr(f_out), up_s(f_s), up_d(f_d)

Structure-path modules are named ``s_*`` / ``up_s`` and detail-path modules
``d_*`` / ``up_d``; everything else (shallow conv, fusion, SR head) belongs to
the fusion group. ``partition_of`` relies on this naming.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

ABLATIONS = ("full", "no_decomposition", "no_collab", "plain_block", "fuse_concat", "fuse_add")
MAGIC = b"CDCN1\n"


@dataclass(frozen=True)
class ModelConfig:
    scale: int = 4
    num_groups: int = 5
    blocks_per_group: int = 10
    channels: int = 64
    leaky_slope: float = 0.2
    ca_reduction: int = 16
    ablation: str = "full"

    def __post_init__(self):
        if self.num_groups < 1 or self.blocks_per_group < 1:
            raise ValueError("num_groups and blocks_per_group must be >= 1")
        if self.channels < 4:
            raise ValueError(f"channels must be >= 4, got {self.channels}")
        if self.ca_reduction < 1 or self.channels % self.ca_reduction:
            raise ValueError(f"channels ({self.channels}) must be divisible by ca_reduction ({self.ca_reduction})")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if self.scale not in (2, 3, 4):
            raise ValueError(f"unsupported scale {self.scale}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class ModelOutput(NamedTuple):
    sr: torch.Tensor
    structure_hat: Optional[torch.Tensor]
    detail_hat: Optional[torch.Tensor]


def conv(cin, cout, k=3):
    return nn.Conv2d(cin, cout, k, padding=k // 2, bias=True)


def init_weights(module: nn.Module, seed: int | None = None) -> None:
    """Fan-in scaled uniform weights, zero biases."""
    if any(p.is_meta for p in module.parameters()):
        return
    gen = None
    if seed is not None:
        gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            bound = 1.0 / np.sqrt(fan_in)
            with torch.no_grad():
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen, dtype=m.weight.dtype) * 2 * bound - bound)
                m.bias.zero_()


class ConvBlock(nn.Module):
    """conv3x3 -> LeakyReLU -> conv3x3 (no skip)."""

    def __init__(self, c, slope):
        super().__init__()
        self.conv1 = conv(c, c)
        self.conv2 = conv(c, c)
        self.slope = slope

    def forward(self, x):
        return self.conv2(F.leaky_relu(self.conv1(x), self.slope))


class ChannelAttention(nn.Module):
    """Global average pool -> 1x1 reduce -> LeakyReLU -> 1x1 expand -> sigmoid."""

    def __init__(self, cin, hidden, cout, slope):
        super().__init__()
        self.reduce = nn.Conv2d(cin, hidden, 1)
        self.expand = nn.Conv2d(hidden, cout, 1)
        self.slope = slope

    def forward(self, x):
        y = x.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.expand(F.leaky_relu(self.reduce(y), self.slope)))


class MCB(nn.Module):
    """Mutual collaboration block and its ablation variants."""

    def __init__(self, c, slope, reduction, mode="full"):
        super().__init__()
        self.mode = mode
        self.s_body = ConvBlock(c, slope)
        self.d_body = ConvBlock(c, slope)
        if mode == "full":
            self.s_att = ChannelAttention(2 * c, 2 * c // reduction, c, slope)
            self.d_att = ChannelAttention(2 * c, 2 * c // reduction, c, slope)
        elif mode == "no_collab":
            self.s_att = ChannelAttention(c, c // reduction, c, slope)
            self.d_att = ChannelAttention(c, c // reduction, c, slope)
        elif mode == "fuse_concat":
            self.s_fuse = nn.Conv2d(2 * c, c, 1)
            self.d_fuse = nn.Conv2d(2 * c, c, 1)
        elif mode == "fuse_add":
            self.s_fuse = nn.Conv2d(c, c, 1)  # detail -> structure
            self.d_fuse = nn.Conv2d(c, c, 1)  # structure -> detail
        elif mode != "plain_block":
            raise ValueError(f"unknown MCB mode {mode!r}")

    def attention(self, x_s, x_d):
        if self.mode == "full":
            x = torch.cat([x_s, x_d], dim=1)
            return self.s_att(x), self.d_att(x)
        if self.mode == "no_collab":
            return self.s_att(x_s), self.d_att(x_d)
        raise ValueError(f"mode {self.mode!r} has no attention")

    def forward(self, f_s, f_d):
        x_s, x_d = self.s_body(f_s), self.d_body(f_d)
        if self.mode in ("full", "no_collab"):
            a_s, a_d = self.attention(x_s, x_d)
            return f_s + a_s * x_s, f_d + a_d * x_d
        if self.mode == "fuse_concat":
            x = torch.cat([x_s, x_d], dim=1)
            return f_s + self.s_fuse(x), f_d + self.d_fuse(x)
        if self.mode == "fuse_add":
            return f_s + x_s + self.s_fuse(x_d), f_d + x_d + self.d_fuse(x_s)
        return f_s + x_s, f_d + x_d


class ResidualGroup(nn.Module):
    def __init__(self, c, m, slope, reduction, mode):
        super().__init__()
        self.blocks = nn.ModuleList(MCB(c, slope, reduction, mode) for _ in range(m))
        self.s_tail = conv(c, c)
        self.d_tail = conv(c, c)

    def forward(self, f_s, f_d):
        x_s, x_d = f_s, f_d
        for blk in self.blocks:
            x_s, x_d = blk(x_s, x_d)
        return f_s + self.s_tail(x_s), f_d + self.d_tail(x_d)


class MultiScaleFusion(nn.Module):
    """Fuses the two component features.

    Each of (f_s, f_d, f_s + f_d) passes its own 3/5/7 extractor. For every
    kernel size the three inputs' outputs are concatenated and convolved back
    to C channels with that kernel size; the three results are concatenated
    and reduced by a 1x1 conv. Six densely connected 3x3 layers and a 1x1
    compression enhance the fused feature, which is added to f_s + f_d.
    """

    KSIZES = (3, 5, 7)

    def __init__(self, c, slope):
        super().__init__()
        self.slope = slope
        self.extract = nn.ModuleDict({
            src: nn.ModuleList(conv(c, c, k) for k in self.KSIZES) for src in ("s", "d", "sum")
        })
        self.cross = nn.ModuleList(conv(3 * c, c, k) for k in self.KSIZES)
        self.reduce = nn.Conv2d(3 * c, c, 1)
        self.dense = nn.ModuleList(conv((j + 1) * c, c) for j in range(6))
        self.compress = nn.Conv2d(7 * c, c, 1)

    def fuse(self, f_s, f_d):
        f_sum = f_s + f_d
        feats = {src: [layer(x) for layer in self.extract[src]]
                 for src, x in (("s", f_s), ("d", f_d), ("sum", f_sum))}
        per_k = [self.cross[i](torch.cat([feats["s"][i], feats["d"][i], feats["sum"][i]], dim=1))
                 for i in range(len(self.KSIZES))]
        return self.reduce(torch.cat(per_k, dim=1))

    def enhance(self, f_f):
        outs = [f_f]
        for layer in self.dense:
            outs.append(F.leaky_relu(layer(torch.cat(outs, dim=1)), self.slope))
        return self.compress(torch.cat(outs, dim=1))

    def forward(self, f_s, f_d):
        return f_s + f_d + self.enhance(self.fuse(f_s, f_d))


class Upsampler(nn.Module):
    """Sub-pixel upsampling followed by a 3x3 conv to RGB."""

    def __init__(self, c, scale):
        super().__init__()
        if scale in (2, 4):
            stages = [nn.Sequential(conv(c, 4 * c), nn.PixelShuffle(2)) for _ in range(scale // 2)]
        elif scale == 3:
            stages = [nn.Sequential(conv(c, 9 * c), nn.PixelShuffle(3))]
        else:
            raise ValueError(f"unsupported scale {scale}")
        self.stages = nn.Sequential(*stages)
        self.out = conv(c, 3)

    def forward(self, x):
        return self.out(self.stages(x))


class CDCN(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int | None = 0):
        super().__init__()
        self.cfg = cfg
        c, slope = cfg.channels, cfg.leaky_slope
        self.shallow = conv(3, c)
        if cfg.ablation == "no_decomposition":
            # single path: reuse the structure-side names
            self.s_extract = ConvBlock(c, slope)
            self.groups = nn.ModuleList(
                _SingleGroup(c, cfg.blocks_per_group, slope, cfg.ca_reduction)
                for _ in range(cfg.num_groups))
            self.s_global = conv(c, c)
            self.up_sr = Upsampler(c, cfg.scale)
        else:
            self.s_extract = ConvBlock(c, slope)
            self.d_extract = ConvBlock(c, slope)
            mode = cfg.ablation
            self.groups = nn.ModuleList(
                ResidualGroup(c, cfg.blocks_per_group, slope, cfg.ca_reduction, mode)
                for _ in range(cfg.num_groups))
            self.s_global = conv(c, c)
            self.d_global = conv(c, c)
            self.fusion = MultiScaleFusion(c, slope)
            self.up_s = Upsampler(c, cfg.scale)
            self.up_d = Upsampler(c, cfg.scale)
            self.up_sr = Upsampler(c, cfg.scale)
        init_weights(self, seed)

    @property
    def decomposed(self) -> bool:
        return self.cfg.ablation != "no_decomposition"

    def shallow_extract(self, x):
        if x.shape[1] != 3:
            raise ValueError(f"expected 3 input channels, got {x.shape[1]}")
        return self.shallow(x)

    def decompose(self, f_in):
        return f_in + self.s_extract(f_in), f_in + self.d_extract(f_in)

    def global_residual(self, f_s, f_d, f_in, f_d0):
        return f_in + self.s_global(f_s), f_d0 + self.d_global(f_d)

    def features(self, x):
        """Returns (f_in, f_s, f_d) after the global residual."""
        f_in = self.shallow_extract(x)
        if not self.decomposed:
            f = f_in + self.s_extract(f_in)
            for g in self.groups:
                f = g(f)
            return f_in, f_in + self.s_global(f), None
        f_s0, f_d0 = self.decompose(f_in)
        f_s, f_d = f_s0, f_d0
        for g in self.groups:
            f_s, f_d = g(f_s, f_d)
        f_s, f_d = self.global_residual(f_s, f_d, f_in, f_d0)
        return f_in, f_s, f_d

    def forward(self, x) -> ModelOutput:
        _, f_s, f_d = self.features(x)
        if not self.decomposed:
            return ModelOutput(self.up_sr(f_s), None, None)
        f_out = self.fusion(f_s, f_d)
        return ModelOutput(self.up_sr(f_out), self.up_s(f_s), self.up_d(f_d))


class _SingleBlock(nn.Module):
    """Single-path residual channel-attention block for the no-decomposition model."""

    def __init__(self, c, slope, reduction):
        super().__init__()
        self.s_body = ConvBlock(c, slope)
        self.s_att = ChannelAttention(c, c // reduction, c, slope)

    def forward(self, f):
        x = self.s_body(f)
        return f + self.s_att(x) * x


class _SingleGroup(nn.Module):
    def __init__(self, c, m, slope, reduction):
        super().__init__()
        self.blocks = nn.ModuleList(_SingleBlock(c, slope, reduction) for _ in range(m))
        self.s_tail = conv(c, c)

    def forward(self, f):
        x = f
        for blk in self.blocks:
            x = blk(x)
        return f + self.s_tail(x)


# ---------------------------------------------------------------------------
# parameter partition and counting
# ---------------------------------------------------------------------------

PARTITIONS = ("structure", "detail", "fusion")


def partition_of(name: str) -> str:
    """Map a parameter name to its group: structure, detail or fusion."""
    for part in name.split("."):
        if part.startswith("s_") or part == "up_s":
            return "structure"
        if part.startswith("d_") or part == "up_d":
            return "detail"
    return "fusion"


def partition(model: nn.Module) -> dict[str, list[str]]:
    groups = {p: [] for p in PARTITIONS}
    for name, _ in model.named_parameters():
        groups[partition_of(name)].append(name)
    return groups


def param_count(cfg: ModelConfig) -> int:
    with torch.device("meta"):
        model = CDCN(cfg, seed=None)
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
#
#   b"CDCN1\n" | uint64 LE header length | JSON header | float32 LE payload
#
# The header holds the model config, free-form ``extra`` metadata and a list
# of {name, shape, offset} entries; offsets count float32 elements.

def save_checkpoint(path, model: CDCN, arrays: dict | None = None, extra: dict | None = None) -> None:
    tensors = {name: t.detach() for name, t in model.state_dict().items()}
    for name, t in (arrays or {}).items():
        tensors[name] = torch.as_tensor(t).detach()
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        flat = t.to(torch.float32).contiguous().cpu().numpy().astype("<f4").ravel()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(flat.tobytes())
        offset += flat.size
    header = json.dumps({"config": asdict(model.cfg), "tensors": entries, "extra": extra or {}}).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)
    tmp.replace(path)


class CheckpointError(ValueError):
    pass


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a CDCN1 checkpoint")
    pos = len(MAGIC)
    (n,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    header = json.loads(data[pos:pos + n])
    payload = np.frombuffer(data, dtype="<f4", offset=pos + n)
    arrays = {}
    for e in header["tensors"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = payload[e["offset"]:e["offset"] + size].reshape(e["shape"]).copy()
    return header, arrays


def load_checkpoint(path, expect: ModelConfig | None = None) -> tuple[CDCN, dict, dict[str, np.ndarray]]:
    """Rebuild the model; returns (model, header, non-model arrays)."""
    header, arrays = read_checkpoint(path)
    cfg = ModelConfig(**header["config"])
    if expect is not None and expect != cfg:
        raise CheckpointError(f"checkpoint config {cfg} does not match {expect}")
    model = CDCN(cfg, seed=None)
    state = model.state_dict()
    missing = set(state) - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    model.load_state_dict({k: torch.from_numpy(arrays[k]) for k in state})
    rest = {k: v for k, v in arrays.items() if k not in state}
    return model, header, rest
