"""Network building blocks: desk-scale CNN classifier, U-Net generator, patch discriminator."""
import hashlib

import torch
import torch.nn as nn
import torch.nn.functional as F


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over every tensor of the state dict, in key order."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class SmallCNN(nn.Module):
    """Strided 3x3 conv stack with global average pooling and a linear head.

    ``negative_slope`` > 0 uses leaky ReLUs. With plain ReLUs a classifier that
    only detects a local pattern can end up with every feature at zero on
    images without it, which leaves zero input gradient there.
    """

    def __init__(self, width=16, depth=4, negative_slope=0.0):
        super().__init__()
        if negative_slope < 0:
            raise ValueError("negative_slope must be non-negative")
        chans = [1] + [width * min(2 ** i, 4) for i in range(depth)]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            act = nn.LeakyReLU(negative_slope) if negative_slope > 0 else nn.ReLU()
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), act]
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(chans[-1], 1)

    def forward(self, x):
        h = self.features(x)
        return self.head(h.mean(dim=(2, 3))).squeeze(1)


class _Down(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 4, stride=2, padding=1)

    def forward(self, x):
        return F.leaky_relu(self.conv(x), 0.2)


class _Up(nn.Module):
    def __init__(self, cin, cskip, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin + cskip, cout, 3, padding=1)

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
        return F.leaky_relu(self.conv(torch.cat([x, skip], dim=1)), 0.2)


def bounded_residual(x, t):
    """Move each pixel of x towards 1 (t > 0) or 0 (t < 0) by the fraction |t|.

    For t in (-1, 1) the result stays in [0, 1] whenever x does, and t = 0 is the identity.
    """
    return x + F.relu(t) * (1.0 - x) - F.relu(-t) * x


class UNetGenerator(nn.Module):
    """Encoder-decoder with skip connections producing a bounded residual edit.

    With ``out_stride=2`` the network runs at half resolution and its edit map
    is upsampled bilinearly, so edits are smooth at the two-pixel scale. The
    last conv is scaled by ``init_scale`` so the initial map is close to the
    identity.
    """

    def __init__(self, base=8, depth=3, init_scale=0.01, out_stride=2):
        super().__init__()
        if out_stride not in (1, 2):
            raise ValueError("out_stride must be 1 or 2")
        self.out_stride = out_stride
        self.stem = nn.Conv2d(1, base, 4 if out_stride == 2 else 3, stride=out_stride, padding=1)
        chans = [base * 2 ** i for i in range(depth + 1)]
        self.downs = nn.ModuleList(_Down(a, b) for a, b in zip(chans[:-1], chans[1:]))
        self.ups = nn.ModuleList(_Up(chans[i + 1], chans[i], chans[i]) for i in reversed(range(depth)))
        self.out = nn.Conv2d(base, 1, 3, padding=1)
        with torch.no_grad():
            self.out.weight.mul_(init_scale)
            self.out.bias.zero_()

    def forward(self, x):
        h = F.leaky_relu(self.stem(x), 0.2)
        skips = [h]
        for down in self.downs:
            h = down(h)
            skips.append(h)
        skips.pop()
        for up in self.ups:
            h = up(h, skips.pop())
        t = self.out(h)
        if self.out_stride != 1:
            t = F.interpolate(t, size=x.shape[-2:], mode="bilinear", align_corners=False)
        return bounded_residual(x, torch.tanh(t))


class PatchDiscriminator(nn.Module):
    """Maps an image to a grid of realness scores (one per receptive-field patch)."""

    def __init__(self, base=16, n_layers=3):
        super().__init__()
        layers, cin = [], 1
        for i in range(n_layers):
            cout = base * min(2 ** i, 4)
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
            cin = cout
        layers.append(nn.Conv2d(cin, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


ARCHITECTURES = {"small_cnn": SmallCNN}


def build_backbone(arch: dict) -> nn.Module:
    arch = dict(arch)
    name = arch.pop("name")
    try:
        cls = ARCHITECTURES[name]
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}") from None
    return cls(**arch)
