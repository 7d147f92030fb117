"""Pair-conditioned reconstructor, attention fusion and patch discriminator.

Tensors are NCHW float. The reconstructor takes the source image and its
counterpart and predicts the source image in [-1, 1].
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ImageGrid
from .errors import FormatError, ShapeError

ATTENTION_VARIANTS = ("none", "plain_cbam", "pseudo_pair_cbam")
FUSION_RULES = ("add_concat", "sum_only")
CHECKPOINT_FORMAT = "cdrl-reconstructor"
CHECKPOINT_VERSION = 1


def grid_to_tensor(grid: ImageGrid, dtype=torch.float32) -> torch.Tensor:
    """HWC grid -> 1xCxHxW tensor."""
    return torch.from_numpy(np.ascontiguousarray(grid.data.transpose(2, 0, 1))).unsqueeze(0).to(dtype)


def tensor_to_grid(t: torch.Tensor, space: str = "model") -> ImageGrid:
    arr = t.detach().to(torch.float32).squeeze(0).cpu().numpy().transpose(1, 2, 0)
    if space == "model":
        arr = np.clip(arr, -1.0, 1.0)
    return ImageGrid(arr, space)


class ChannelGate(nn.Module):
    """sigmoid(MLP(avgpool(f)) + MLP(maxpool(f))) with a shared bottleneck MLP."""

    def __init__(self, channels: int, ratio: int = 8):
        super().__init__()
        hidden = max(1, channels // ratio)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        # zero output layer: gate starts at exactly 0.5
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def mlp(self, v):
        return self.fc2(F.relu(self.fc1(v)))

    def forward(self, f):
        avg = f.mean(dim=(2, 3))
        mx = f.amax(dim=(2, 3))
        gate = torch.sigmoid(self.mlp(avg) + self.mlp(mx))
        return f * gate[:, :, None, None], gate


class SpatialGate(nn.Module):
    """sigmoid(conv7x7([mean_c(f); max_c(f)]))."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def forward(self, f):
        pooled = torch.cat([f.mean(dim=1, keepdim=True), f.amax(dim=1, keepdim=True)], dim=1)
        gate = torch.sigmoid(self.conv(pooled))
        return f * gate, gate


class CBAM(nn.Module):
    def __init__(self, channels: int, ratio: int = 8):
        super().__init__()
        self.channel = ChannelGate(channels, ratio)
        self.spatial = SpatialGate()

    def forward(self, f):
        f, _ = self.channel(f)
        f, _ = self.spatial(f)
        return f


class PairFusion(nn.Module):
    """Fuse same-scale features of the source and counterpart branches.

    pseudo_pair_cbam: channel gate on the source branch, spatial gate on the
    counterpart branch, each residual-added to its own branch. plain_cbam:
    channel+spatial CBAM on both branches (also residual). none: raw
    features. ``add_concat`` concatenates the two branches (2C channels);
    ``sum_only`` adds them (C channels).
    """

    def __init__(self, channels: int, variant: str = "pseudo_pair_cbam", fusion_rule: str = "add_concat"):
        super().__init__()
        if variant not in ATTENTION_VARIANTS:
            raise ValueError(f"unknown attention variant {variant!r}")
        if fusion_rule not in FUSION_RULES:
            raise ValueError(f"unknown fusion rule {fusion_rule!r}")
        self.variant = variant
        self.fusion_rule = fusion_rule
        self.channels = channels
        if variant == "pseudo_pair_cbam":
            self.channel_gate = ChannelGate(channels)
            self.spatial_gate = SpatialGate()
        elif variant == "plain_cbam":
            self.cbam1 = CBAM(channels)
            self.cbam2 = CBAM(channels)

    @property
    def out_channels(self) -> int:
        return 2 * self.channels if self.fusion_rule == "add_concat" else self.channels

    def attend(self, f1, f2):
        if self.variant == "pseudo_pair_cbam":
            return f1 + self.channel_gate(f1)[0], f2 + self.spatial_gate(f2)[0]
        if self.variant == "plain_cbam":
            return f1 + self.cbam1(f1), f2 + self.cbam2(f2)
        return f1, f2

    def forward(self, f1, f2):
        if f1.shape != f2.shape:
            raise ShapeError(f"feature shapes differ: {tuple(f1.shape)} vs {tuple(f2.shape)}")
        a1, a2 = self.attend(f1, f2)
        if self.fusion_rule == "sum_only":
            return a1 + a2
        return torch.cat([a1, a2], dim=1)


def conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.LeakyReLU(0.2),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.LeakyReLU(0.2),
    )


class Reconstructor(nn.Module):
    """Shared-encoder U-Net that reconstructs its first input.

    Scale ``s`` of the encoder runs at H/2^s with ``base_width * 2^s``
    channels. Every scale is fused by a :class:`PairFusion` block and fed
    to the decoder as a skip connection.
    """

    def __init__(self, channels: int = 3, depth: int = 4, base_width: int = 32,
                 attention_variant: str = "pseudo_pair_cbam", fusion_rule: str = "add_concat"):
        super().__init__()
        if depth < 1:
            raise ValueError("depth must be >= 1")
        if attention_variant not in ATTENTION_VARIANTS:
            raise ValueError(f"unknown attention variant {attention_variant!r}")
        self.channels = channels
        self.depth = depth
        self.base_width = base_width
        self.attention_variant = attention_variant
        self.fusion_rule = fusion_rule
        widths = [base_width * 2 ** s for s in range(depth)]
        self.widths = widths

        self.enc = nn.ModuleList()
        cin = channels
        for w in widths:
            self.enc.append(conv_block(cin, w))
            cin = w
        self.fuse = nn.ModuleList(PairFusion(w, attention_variant, fusion_rule) for w in widths)

        fused = [f.out_channels for f in self.fuse]
        self.bottom = conv_block(fused[-1], widths[-1])
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for s in range(depth - 2, -1, -1):
            self.up.append(nn.Conv2d(widths[s + 1], widths[s], 3, padding=1))
            self.dec.append(conv_block(widths[s] + fused[s], widths[s]))
        self.head = nn.Conv2d(widths[0], channels, 1)

    def arch(self) -> dict:
        return {
            "channels": self.channels,
            "depth": self.depth,
            "base_width": self.base_width,
            "attention_variant": self.attention_variant,
            "fusion_rule": self.fusion_rule,
        }

    def check_input(self, x):
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"expected Nx{self.channels}xHxW input, got {tuple(x.shape)}")
        k = 2 ** self.depth
        if x.shape[2] % k or x.shape[3] % k:
            raise ShapeError(f"height/width {tuple(x.shape[2:])} not divisible by {k}")

    def encode(self, x) -> list:
        self.check_input(x)
        feats = []
        for s, block in enumerate(self.enc):
            if s:
                x = F.max_pool2d(x, 2)
            x = block(x)
            feats.append(x)
        return feats

    def decode(self, fused: list):
        x = self.bottom(fused[-1])
        for i, s in enumerate(range(self.depth - 2, -1, -1)):
            x = F.leaky_relu(self.up[i](F.interpolate(x, scale_factor=2, mode="nearest")), 0.2)
            x = self.dec[i](torch.cat([x, fused[s]], dim=1))
        return torch.tanh(self.head(x))

    def forward(self, t1, t2):
        if t1.shape != t2.shape:
            raise ShapeError(f"pair shapes differ: {tuple(t1.shape)} vs {tuple(t2.shape)}")
        # one encoder pass over the stacked pair keeps weights tied by construction
        n = t1.shape[0]
        feats = self.encode(torch.cat([t1, t2], dim=0))
        fused = [fuse(f[:n], f[n:]) for fuse, f in zip(self.fuse, feats)]
        return self.decode(fused)


class PatchDiscriminator(nn.Module):
    """``n_layers`` stride-2 4x4 convs then a 3x3 conv to one logit channel.

    For even inputs each strided layer halves the extent, so the logit grid
    is (H / 2^n_layers) x (W / 2^n_layers).
    """

    def __init__(self, channels: int = 3, base_width: int = 32, n_layers: int = 3):
        super().__init__()
        self.channels = channels
        self.base_width = base_width
        self.n_layers = n_layers
        layers = []
        cin = channels
        for i in range(n_layers):
            cout = base_width * 2 ** i
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            cin = cout
        layers.append(nn.Conv2d(cin, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def arch(self) -> dict:
        return {"channels": self.channels, "base_width": self.base_width, "n_layers": self.n_layers}

    @staticmethod
    def output_size(extent: int, n_layers: int = 3) -> int:
        for _ in range(n_layers):
            extent = (extent + 2 - 4) // 2 + 1
        return extent

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for m in self.net:
            if isinstance(m, nn.Conv2d):
                rf += (m.kernel_size[0] - 1) * jump
                jump *= m.stride[0]
        return rf

    def forward(self, x):
        return self.net(x)


def build_reconstructor(seed: int = 0, **arch) -> Reconstructor:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Reconstructor(**arch)


def build_discriminator(seed: int = 0, **arch) -> PatchDiscriminator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return PatchDiscriminator(**arch)


# -- grid-level operations ---------------------------------------------------

def _model_tensor(model, grid: ImageGrid) -> torch.Tensor:
    if grid.space != "model":
        raise ShapeError(f"expected a model-space grid, got {grid.space}")
    return grid_to_tensor(grid, next(model.parameters()).dtype)


def encode(model: Reconstructor, img: ImageGrid) -> list:
    with torch.no_grad():
        return model.encode(_model_tensor(model, img))


def channel_attention(gate: ChannelGate, feature):
    return gate(feature)


def spatial_attention(gate: SpatialGate, feature):
    return gate(feature)


def fuse_features(fusion: PairFusion, f1, f2):
    return fusion(f1, f2)


def reconstruct(model: Reconstructor, t1: ImageGrid, t2: ImageGrid) -> ImageGrid:
    if t1.shape != t2.shape:
        raise ShapeError(f"pair shapes differ: {t1.shape} vs {t2.shape}")
    with torch.no_grad():
        out = model(_model_tensor(model, t1), _model_tensor(model, t2))
    return tensor_to_grid(out, "model")


def discriminate(disc: PatchDiscriminator, img: ImageGrid) -> np.ndarray:
    """Logit grid (H' x W') for one image; higher means more real."""
    with torch.no_grad():
        return disc(_model_tensor(disc, img))[0, 0].numpy()


# -- checkpoints -------------------------------------------------------------

def save_reconstructor(model: Reconstructor, path, extra: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": model.arch(),
        "state": model.state_dict(),
    }
    if extra:
        payload["extra"] = extra
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def validate_arch(arch: dict) -> dict:
    required = {"channels", "depth", "base_width", "attention_variant", "fusion_rule"}
    if set(arch) != required:
        raise FormatError(f"checkpoint arch keys {sorted(arch)} != {sorted(required)}")
    if arch["attention_variant"] not in ATTENTION_VARIANTS:
        raise FormatError(f"unknown attention variant {arch['attention_variant']!r}")
    if arch["fusion_rule"] not in FUSION_RULES:
        raise FormatError(f"unknown fusion rule {arch['fusion_rule']!r}")
    for key in ("channels", "depth", "base_width"):
        if not isinstance(arch[key], int) or arch[key] < 1:
            raise FormatError(f"bad {key}: {arch[key]!r}")
    return arch


def load_reconstructor(path) -> Reconstructor:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise FormatError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a reconstructor checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    model = Reconstructor(**validate_arch(dict(payload["arch"])))
    model.load_state_dict(payload["state"])
    model.eval()
    return model
