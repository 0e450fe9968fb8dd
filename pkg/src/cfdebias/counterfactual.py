"""Classifier-supervised cycle-consistent counterfactual generation."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .classifiers import BinaryClassifier, ChecksumError, records_to_tensors
from .forge import ImageRecord
from .nets import PatchDiscriminator, UNetGenerator, parameter_checksum

logger = logging.getLogger(__name__)

SICK_TO_HEALTHY = "sick->healthy"
HEALTHY_TO_SICK = "healthy->sick"

# per-sample floor of the consistency loss, as if probabilities were clamped to [eps, 1-eps]
PROB_EPS = 1e-6


@dataclass
class GANConfig:
    epochs: int = 8
    batch_size: int = 16
    lr_g: float = 1e-3
    lr_d: float = 1e-3
    betas: tuple = (0.5, 0.999)
    lambda_adv: float = 1.0
    lambda_cyc: float = 10.0
    lambda_id: float = 5.0
    lambda_cls: float = 1.0
    generator: dict = field(default_factory=lambda: {"base": 8, "depth": 3, "init_scale": 0.01, "out_stride": 2})
    discriminator: dict = field(default_factory=lambda: {"base": 16, "n_layers": 3})
    max_steps_per_epoch: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if min(self.lambda_adv, self.lambda_cyc, self.lambda_id, self.lambda_cls) < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def loss_weights(self) -> dict:
        return {"adv": self.lambda_adv, "cyc": self.lambda_cyc, "id": self.lambda_id, "cls": self.lambda_cls}

    @classmethod
    def from_dict(cls, d: dict) -> "GANConfig":
        return cls(**d)


def cycle_loss(g_fwd, g_bwd, batch: torch.Tensor) -> torch.Tensor:
    """Mean L1 between g_bwd(g_fwd(x)) and x."""
    return (g_bwd(g_fwd(batch)) - batch).abs().mean()


def identity_loss(g, batch: torch.Tensor) -> torch.Tensor:
    """Mean L1 between g(x) and x for x already in g's target domain."""
    return (g(batch) - batch).abs().mean()


def verify_frozen(f: BinaryClassifier, checksum: str):
    if f.checksum() != checksum:
        raise ChecksumError("supervising classifier parameters changed")


def classifier_consistency_loss(f: BinaryClassifier, x_cf: torch.Tensor, target: float,
                                checksum: Optional[str] = None) -> torch.Tensor:
    """Mean BCE between f(x_cf) and the target class.

    Gradients reach x_cf (hence the generator) but never f's parameters.
    """
    if checksum is not None:
        verify_frozen(f, checksum)
    params = list(f.parameters())
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        logits = f(x_cf)
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad_(flag)
    y = torch.full_like(logits, float(target))
    # BCE on logits so a confidently wrong f still yields a gradient (clamping the
    # probability would zero it); the floor only applies once the target is met
    per_sample = F.binary_cross_entropy_with_logits(logits, y, reduction="none")
    return per_sample.clamp_min(-math.log(1 - PROB_EPS)).mean()


def adversarial_loss(d, real: torch.Tensor, fake: torch.Tensor):
    """Least-squares GAN losses: (discriminator loss, generator loss)."""
    d_real, d_fake = d(real), d(fake)
    d_loss = 0.5 * ((d_real - 1) ** 2).mean() + 0.5 * (d_fake ** 2).mean()
    g_loss = ((d_fake - 1) ** 2).mean()
    return d_loss, g_loss


class CounterfactualBundle(nn.Module):
    """Both generators, both discriminators and the frozen supervising classifier."""

    def __init__(self, classifier: BinaryClassifier, config: GANConfig):
        super().__init__()
        self.config = config
        self.g_sh = UNetGenerator(**config.generator)
        self.g_hs = UNetGenerator(**config.generator)
        self.d_h = PatchDiscriminator(**config.discriminator)
        self.d_s = PatchDiscriminator(**config.discriminator)
        # kept outside the module tree so bundle.parameters() never includes f
        self.__dict__["classifier"] = classifier.freeze()
        self.classifier_checksum = classifier.checksum()
        self.history: list = []

    def verify(self):
        verify_frozen(self.classifier, self.classifier_checksum)

    def generator_state(self) -> dict:
        return {k: v for k, v in self.state_dict().items() if k.startswith(("g_", "d_"))}


@dataclass
class CounterfactualPair:
    x: np.ndarray
    x_cf: np.ndarray
    direction: str
    f_x: float
    f_x_cf: float


def _sample_stream(n: int, batch_size: int, gen: torch.Generator):
    while True:
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n - batch_size + 1, batch_size):
            yield perm[i:i + batch_size]


def train_counterfactual_gan(
    healthy: Sequence[ImageRecord],
    sick: Sequence[ImageRecord],
    classifier: BinaryClassifier,
    config: GANConfig,
    checkpoint_dir: Optional[str | Path] = None,
) -> CounterfactualBundle:
    """Alternate generator and discriminator updates for both translation directions.

    One equal-sized batch is drawn from each domain per step. An epoch is
    ``min(len(healthy), len(sick)) // batch_size`` steps, optionally capped by
    ``max_steps_per_epoch``.
    """
    if not healthy or not sick:
        raise ValueError("both the healthy and the sick domain need images")
    x_h, _, _ = records_to_tensors(healthy)
    x_s, _, _ = records_to_tensors(sick)
    torch.manual_seed(config.seed)
    bundle = CounterfactualBundle(classifier, config)
    f, checksum = bundle.classifier, bundle.classifier_checksum
    bs = min(config.batch_size, len(x_h), len(x_s))
    steps = max(1, min(len(x_h), len(x_s)) // bs)
    if config.max_steps_per_epoch:
        steps = min(steps, config.max_steps_per_epoch)

    opt_g = torch.optim.Adam(list(bundle.g_sh.parameters()) + list(bundle.g_hs.parameters()),
                             lr=config.lr_g, betas=config.betas)
    opt_d = torch.optim.Adam(list(bundle.d_h.parameters()) + list(bundle.d_s.parameters()),
                             lr=config.lr_d, betas=config.betas)
    gen = torch.Generator().manual_seed(config.seed)
    stream_h = _sample_stream(len(x_h), bs, gen)
    stream_s = _sample_stream(len(x_s), bs, gen)
    w = config.loss_weights

    with torch.no_grad():
        probe_h, probe_s = x_h[:64], x_s[:64]
        bundle.history.append({
            "epoch": -1,
            "cycle": float(0.5 * (cycle_loss(bundle.g_sh, bundle.g_hs, probe_s)
                                  + cycle_loss(bundle.g_hs, bundle.g_sh, probe_h))),
        })

    for epoch in range(config.epochs):
        sums = {"adv": 0.0, "cyc": 0.0, "id": 0.0, "cls": 0.0, "d": 0.0}
        for _ in range(steps):
            real_h, real_s = x_h[next(stream_h)], x_s[next(stream_s)]

            fake_h = bundle.g_sh(real_s)
            fake_s = bundle.g_hs(real_h)
            l_cyc = (bundle.g_hs(fake_h) - real_s).abs().mean() + (bundle.g_sh(fake_s) - real_h).abs().mean()
            l_id = identity_loss(bundle.g_sh, real_h) + identity_loss(bundle.g_hs, real_s)
            l_cls = (classifier_consistency_loss(f, fake_h, 0.0)
                     + classifier_consistency_loss(f, fake_s, 1.0))
            l_adv = ((bundle.d_h(fake_h) - 1) ** 2).mean() + ((bundle.d_s(fake_s) - 1) ** 2).mean()
            loss_g = w["adv"] * l_adv + w["cyc"] * l_cyc + w["id"] * l_id + w["cls"] * l_cls
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()

            d_h_loss, _ = adversarial_loss(bundle.d_h, real_h, fake_h.detach())
            d_s_loss, _ = adversarial_loss(bundle.d_s, real_s, fake_s.detach())
            loss_d = d_h_loss + d_s_loss
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()

            for k, v in (("adv", l_adv), ("cyc", l_cyc), ("id", l_id), ("cls", l_cls), ("d", loss_d)):
                sums[k] += float(v.detach())
        bundle.verify()
        entry = {"epoch": epoch, **{k: v / steps for k, v in sums.items()}}
        with torch.no_grad():
            entry["cycle"] = float(0.5 * (cycle_loss(bundle.g_sh, bundle.g_hs, probe_s)
                                          + cycle_loss(bundle.g_hs, bundle.g_sh, probe_h)))
        bundle.history.append(entry)
        logger.info("gan epoch %d %s", epoch, entry)
        if checkpoint_dir is not None:
            save_bundle(Path(checkpoint_dir) / f"bundle_epoch{epoch:03d}.pt", bundle)

    if f.checksum() != checksum:
        raise ChecksumError("supervising classifier changed during GAN training")
    bundle.eval()
    return bundle


@torch.no_grad()
def translate(bundle: CounterfactualBundle, images, batch_size: int = 128):
    """Route each image through one generator according to the classifier's decision.

    Returns (x_cf, direction flags as bool 'is sick', f(x), f(x_cf)) as numpy arrays.
    """
    bundle.verify()
    f = bundle.classifier
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if x.ndim == 3:
        x = x[:, None]
    side = f.input_side
    if side is not None and tuple(x.shape[-2:]) != (side, side):
        raise ValueError(f"bundle expects {side}x{side} images, got {tuple(x.shape[-2:])}")
    outs, sick_flags, fx, fcf = [], [], [], []
    for i in range(0, len(x), batch_size):
        xb = x[i:i + batch_size]
        p = torch.sigmoid(f(xb))
        is_sick = p >= f.threshold
        cf = torch.where(is_sick[:, None, None, None], bundle.g_sh(xb), bundle.g_hs(xb))
        outs.append(cf)
        sick_flags.append(is_sick)
        fx.append(p)
        fcf.append(torch.sigmoid(f(cf)))
    cat = lambda xs: torch.cat(xs).double().numpy()  # noqa: E731
    return cat(outs)[:, 0], torch.cat(sick_flags).numpy(), cat(fx), cat(fcf)


def generate_counterfactual(bundle: CounterfactualBundle, image: np.ndarray) -> CounterfactualPair:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected a single 2-D image, got shape {image.shape}")
    x_cf, sick, fx, fcf = translate(bundle, image[None])
    return CounterfactualPair(
        x=image.astype(np.float64),
        x_cf=x_cf[0],
        direction=SICK_TO_HEALTHY if sick[0] else HEALTHY_TO_SICK,
        f_x=float(fx[0]),
        f_x_cf=float(fcf[0]),
    )


def difference_heatmap(pair: CounterfactualPair) -> np.ndarray:
    diff = np.abs(np.asarray(pair.x, dtype=np.float64) - np.asarray(pair.x_cf, dtype=np.float64))
    peak = diff.max() if diff.size else 0.0
    return diff / peak if peak > 0 else np.zeros_like(diff)


def region_mass(heatmap: np.ndarray, mask: np.ndarray) -> float:
    """Fraction of the heatmap's total mass that falls inside ``mask``."""
    heatmap = np.asarray(heatmap, dtype=np.float64)
    mask = np.asarray(mask)
    if heatmap.shape != mask.shape:
        raise ValueError(f"heatmap {heatmap.shape} and mask {mask.shape} differ in shape")
    total = heatmap.sum()
    if total == 0:
        return 0.0
    return float(heatmap[mask.astype(bool)].sum() / total)


def save_bundle(path: str | Path, bundle: CounterfactualBundle):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "kind": "counterfactual_bundle",
            "config": asdict(bundle.config),
            "loss_weights": bundle.config.loss_weights,
            "classifier_checksum": bundle.classifier_checksum,
            "state_dict": bundle.generator_state(),
            "checksum": parameter_checksum(bundle),
            "history": bundle.history,
        },
        path,
    )


def load_bundle(path: str | Path, classifier: BinaryClassifier) -> CounterfactualBundle:
    """Rebuild a bundle around ``classifier``, which must be the one it was trained with."""
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("kind") != "counterfactual_bundle":
        raise ValueError(f"{path} is not a counterfactual bundle")
    if classifier.checksum() != ckpt["classifier_checksum"]:
        raise ChecksumError(f"{path}: bundle was trained under a different classifier")
    bundle = CounterfactualBundle(classifier, GANConfig.from_dict(ckpt["config"]))
    bundle.load_state_dict(ckpt["state_dict"])
    if parameter_checksum(bundle) != ckpt["checksum"]:
        raise ChecksumError(f"{path}: bundle parameter checksum mismatch")
    bundle.history = ckpt.get("history", [])
    bundle.eval()
    return bundle


def _png(path: Path, img: np.ndarray):
    Image.fromarray(np.clip(np.rint(img * 255), 0, 255).astype(np.uint8), mode="L").save(path)


def write_counterfactual(directory: str | Path, name: str, pair: CounterfactualPair):
    """Write factual / counterfactual / heatmap PNGs plus a JSON sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _png(directory / f"{name}_factual.png", pair.x)
    _png(directory / f"{name}_counterfactual.png", pair.x_cf)
    _png(directory / f"{name}_heatmap.png", difference_heatmap(pair))
    (directory / f"{name}.json").write_text(json.dumps(
        {"f_x": pair.f_x, "f_x_cf": pair.f_x_cf, "direction": pair.direction}, indent=2))
