"""Network building blocks: regression U-Net generator, PixelGAN/PatchGAN
discriminators, a 2-D DFT and a raw-buffer tensor checkpoint format.

Autodiff, convolution and pooling kernels come from torch; the thin
functional wrappers here pin down the shape contracts used elsewhere.
"""

from __future__ import annotations

import json
import math
import os
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .raster import atomic_dir

NORM_KINDS = ("batch", "instance", "none")
DISCRIMINATORS = {"pixelgan": 0, "patchgan16": 1, "patchgan34": 2}
BN_MOMENTUM = 0.1


# -- functional layer contracts ---------------------------------------------

def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, padding: int = 0) -> torch.Tensor:
    if x.dim() != 4 or weight.dim() != 4:
        raise ValueError("conv2d expects NCHW input and OIHW weights")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]} vs weight {weight.shape[1]}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def nearest_upsample(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    if factor != 2:
        raise ValueError("only factor 2 upsampling is supported")
    return F.interpolate(x, scale_factor=2, mode="nearest")


def maxpool(x: torch.Tensor, size: int = 2) -> torch.Tensor:
    return F.max_pool2d(x, size)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp_min(x, 0.0)


def norm_forward(x: torch.Tensor, kind: str, weight=None, bias=None, eps: float = 1e-5) -> torch.Tensor:
    """Stateless normalisation with batch statistics (batch) or per-sample statistics (instance)."""
    if kind == "none":
        return x
    if kind == "batch":
        dims = (0, 2, 3)
    elif kind == "instance":
        dims = (2, 3)
    else:
        raise ValueError(f"unknown norm kind {kind!r}")
    mean = x.mean(dim=dims, keepdim=True)
    var = x.var(dim=dims, unbiased=False, keepdim=True)
    out = (x - mean) / torch.sqrt(var + eps)
    if weight is not None:
        out = out * weight.view(1, -1, 1, 1) + bias.view(1, -1, 1, 1)
    return out


def make_norm(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels, momentum=BN_MOMENTUM)
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=True, track_running_stats=False)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown norm kind {kind!r}; expected one of {NORM_KINDS}")


def _conv(cin, cout, k, stride=1, padding=None, bias=False):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2 if padding is None else padding, bias=bias)


# -- encoder ------------------------------------------------------------------

class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin, width, stride=1, norm="batch"):
        super().__init__()
        bias = norm == "none"
        cout = width * self.expansion
        self.conv1 = _conv(cin, width, 3, stride, bias=bias)
        self.bn1 = make_norm(norm, width)
        self.conv2 = _conv(width, cout, 3, bias=bias)
        self.bn2 = make_norm(norm, cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(_conv(cin, cout, 1, stride, 0, bias=bias), make_norm(norm, cout))

    def forward(self, x):
        out = relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return relu(out + identity)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, width, stride=1, norm="batch"):
        super().__init__()
        bias = norm == "none"
        cout = width * self.expansion
        self.conv1 = _conv(cin, width, 1, bias=bias)
        self.bn1 = make_norm(norm, width)
        self.conv2 = _conv(width, width, 3, stride, bias=bias)
        self.bn2 = make_norm(norm, width)
        self.conv3 = _conv(width, cout, 1, bias=bias)
        self.bn3 = make_norm(norm, cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(_conv(cin, cout, 1, stride, 0, bias=bias), make_norm(norm, cout))

    def forward(self, x):
        out = relu(self.bn1(self.conv1(x)))
        out = relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return relu(out + identity)


# name -> (block type, blocks per residual stage)
ENCODERS = {
    "tiny": (BasicBlock, (1, 1, 1, 1)),
    "resnet18": (BasicBlock, (2, 2, 2, 2)),
    "resnet34": (BasicBlock, (3, 4, 6, 3)),
    "resnet50": (Bottleneck, (3, 4, 6, 3)),
}


class DecoderBlock(nn.Module):
    def __init__(self, cin, skip, cout, norm):
        super().__init__()
        bias = norm == "none"
        self.conv1 = _conv(cin + skip, cout, 3, bias=bias)
        self.bn1 = make_norm(norm, cout)
        self.conv2 = _conv(cout, cout, 3, bias=bias)
        self.bn2 = make_norm(norm, cout)

    def forward(self, x, skip=None):
        x = nearest_upsample(x)
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        x = relu(self.bn1(self.conv1(x)))
        return relu(self.bn2(self.conv2(x)))


def init_weights(module: nn.Module, seed: int) -> None:
    """He-normal convolutions, zero biases, unit/zero norm affine."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1] // m.groups
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d)) and m.affine:
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


class GeneratorNet(nn.Module):
    """Regression U-Net with a residual encoder and a ReLU output head.

    Inputs are standardised with stored per-channel statistics and the head
    output is multiplied by a stored ``target_scale``; both are buffers set
    from training data so the network itself works in O(1) units.
    """

    def __init__(self, in_channels: int = 9, depth: int = 4, base_channels: int = 16,
                 encoder: str = "tiny", norm: str = "batch", seed: int = 0):
        super().__init__()
        if depth not in (4, 5):
            raise ValueError("encoder/decoder depth must be 4 or 5")
        if encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {encoder!r}; expected one of {sorted(ENCODERS)}")
        self.arch = dict(in_channels=in_channels, depth=depth, base_channels=base_channels,
                         encoder=encoder, norm=norm)
        self.depth = depth
        block, layout = ENCODERS[encoder]
        bias = norm == "none"

        self.stem = nn.Sequential(_conv(in_channels, base_channels, 7, 2, 3, bias=bias),
                                  make_norm(norm, base_channels))
        skips = [base_channels]
        stages = []
        cin = base_channels
        for i in range(depth - 1):
            width = base_channels * 2 ** i
            blocks = []
            for j in range(layout[i]):
                stride = 2 if (j == 0 and i > 0) else 1
                blocks.append(block(cin, width, stride, norm))
                cin = width * block.expansion
            stages.append(nn.Sequential(*blocks))
            skips.append(cin)
        self.stages = nn.ModuleList(stages)

        dec = []
        ch = skips[-1]
        skip_chs = skips[-2::-1]
        for i in range(depth):
            out = max(4, skips[-1] >> (i + 1))
            skip = skip_chs[i] if i < len(skip_chs) else 0
            dec.append(DecoderBlock(ch, skip, out, norm))
            ch = out
        self.decoder = nn.ModuleList(dec)
        self.head = nn.Conv2d(ch, 1, 1)

        self.register_buffer("input_mean", torch.zeros(in_channels))
        self.register_buffer("input_std", torch.ones(in_channels))
        self.register_buffer("target_scale", torch.ones(()))
        init_weights(self, seed)
        with torch.no_grad():
            self.head.bias.fill_(1.0)  # initial output sits at target_scale

    @property
    def downsampling(self) -> int:
        return 2 ** self.depth

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.arch["in_channels"]:
            raise ValueError(f"expected (N, {self.arch['in_channels']}, H, W) input, got {tuple(x.shape)}")
        f = self.downsampling
        if x.shape[2] % f or x.shape[3] % f:
            raise ValueError(f"spatial dims {tuple(x.shape[2:])} not divisible by {f}")
        x = (x - self.input_mean.view(1, -1, 1, 1)) / self.input_std.view(1, -1, 1, 1)
        feats = [relu(self.stem(x))]
        h = maxpool(feats[0])
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        skips = feats[-2::-1]
        for i, block in enumerate(self.decoder):
            h = block(h, skips[i] if i < len(skips) else None)
        return relu(self.head(h)) * self.target_scale


class DiscriminatorNet(nn.Module):
    """Conditional discriminator on channel-concatenated (input, target) pairs.

    ``pixelgan`` uses 1x1 convolutions only; ``patchgan16``/``patchgan34``
    stack stride-2 4x4 convolutions so each response unit sees a 16x16 or
    34x34 window.
    """

    def __init__(self, in_channels: int = 9, variant: str = "patchgan16", ndf: int = 16,
                 norm: str = "batch", seed: int = 1):
        super().__init__()
        if variant not in DISCRIMINATORS:
            raise ValueError(f"unknown discriminator {variant!r}; expected one of {sorted(DISCRIMINATORS)}")
        self.arch = dict(in_channels=in_channels, variant=variant, ndf=ndf, norm=norm)
        cin = in_channels + 1
        bias = norm == "none"
        act = lambda: nn.LeakyReLU(0.2)  # noqa: E731
        if variant == "pixelgan":
            layers = [nn.Conv2d(cin, ndf, 1), act(),
                      nn.Conv2d(ndf, 2 * ndf, 1, bias=bias), make_norm(norm, 2 * ndf), act(),
                      nn.Conv2d(2 * ndf, 1, 1)]
        else:
            n_layers = DISCRIMINATORS[variant]
            layers = [nn.Conv2d(cin, ndf, 4, 2, 1), act()]
            mult = 1
            for n in range(1, n_layers):
                layers += [nn.Conv2d(ndf * mult, ndf * mult * 2, 4, 2, 1, bias=bias),
                           make_norm(norm, ndf * mult * 2), act()]
                mult *= 2
            layers += [nn.Conv2d(ndf * mult, ndf * mult * 2, 4, 1, 1, bias=bias),
                       make_norm(norm, ndf * mult * 2), act(),
                       nn.Conv2d(ndf * mult * 2, 1, 4, 1, 1)]
        self.net = nn.Sequential(*layers)
        self.register_buffer("input_mean", torch.zeros(in_channels))
        self.register_buffer("input_std", torch.ones(in_channels))
        self.register_buffer("target_scale", torch.ones(()))
        init_weights(self, seed)

    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for m in self.net:
            if isinstance(m, nn.Conv2d):
                rf += (m.kernel_size[0] - 1) * jump
                jump *= m.stride[0]
        return rf

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return the response map (N, 1, h, w) and its per-sample mean."""
        if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
            raise ValueError(f"misaligned pair: {tuple(x.shape)} vs {tuple(y.shape)}")
        x = (x - self.input_mean.view(1, -1, 1, 1)) / self.input_std.view(1, -1, 1, 1)
        resp = self.net(torch.cat([x, y / self.target_scale], dim=1))
        return resp, resp.mean(dim=(1, 2, 3))


# -- spectral transform -------------------------------------------------------

def dft2(x) -> tuple[torch.Tensor, torch.Tensor]:
    """Unnormalised forward 2-D DFT over the last two axes; returns (real, imag)."""
    if not torch.is_tensor(x):
        x = torch.as_tensor(np.asarray(x, dtype=np.float64))
    spec = torch.fft.fft2(x)
    return spec.real, spec.imag


def idft2(real: torch.Tensor, imag: torch.Tensor) -> torch.Tensor:
    return torch.fft.ifft2(torch.complex(real, imag)).real


# -- raw tensor checkpoints -----------------------------------------------------

_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
MANIFEST = "manifest.json"
BUFFERS = "tensors.bin"


def save_tensors(path: str | os.PathLike, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    """Write ``tensors`` as one little-endian buffer plus a JSON manifest."""
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise TypeError(f"{name}: unsupported dtype {t.dtype}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": _DTYPES[t.dtype],
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"meta": meta or {}, "tensors": entries}
    with atomic_dir(path) as tmp:
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        (tmp / BUFFERS).write_bytes(b"".join(chunks))


def load_tensors(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
        blob = (path / BUFFERS).read_bytes()
    except FileNotFoundError as err:
        raise ValueError(f"{path}: not a checkpoint ({err.filename} missing)") from None
    out = {}
    for e in manifest["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise ValueError(f"{path}: buffer too short for {e['name']}")
        arr = np.frombuffer(blob[e["offset"]:end], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return out, manifest["meta"]
