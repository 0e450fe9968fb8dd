import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from cfdebias.classifiers import BinaryClassifier, ChecksumError, TrainConfig, train_erm
from cfdebias.counterfactual import (
    HEALTHY_TO_SICK,
    PROB_EPS,
    SICK_TO_HEALTHY,
    CounterfactualBundle,
    CounterfactualPair,
    GANConfig,
    adversarial_loss,
    classifier_consistency_loss,
    cycle_loss,
    difference_heatmap,
    generate_counterfactual,
    identity_loss,
    load_bundle,
    region_mass,
    save_bundle,
    train_counterfactual_gan,
    translate,
    write_counterfactual,
)
from cfdebias.forge import ForgeConfig, SubgroupPlan, build_synthetic_dataset
from cfdebias.nets import UNetGenerator, parameter_checksum

SMALL_ARCH = {"name": "small_cnn", "width": 8, "depth": 3}
TINY_GAN = dict(epochs=1, batch_size=8, max_steps_per_epoch=3,
                generator={"base": 4, "depth": 2, "init_scale": 0.01, "out_stride": 2},
                discriminator={"base": 4, "n_layers": 2})


class Identity(nn.Module):
    def forward(self, x):
        return x


class Constant(nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, x):
        return torch.full_like(x, self.value)


class MeanLogit(BinaryClassifier):
    """logit = scale * (mean(x) - 0.5); a bright image is 'sick'."""

    def __init__(self, scale=40.0, side=16):
        super().__init__(SMALL_ARCH, input_side=side)
        self.scale = scale

    def forward(self, x):
        return self.scale * (x.mean(dim=(1, 2, 3)) - 0.5)


class TwoParamF(nn.Module):
    """Two-parameter toy classifier: logit = w * mean(x) + b."""

    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.tensor(3.0, dtype=torch.float64))
        self.b = nn.Parameter(torch.tensor(-1.0, dtype=torch.float64))

    def forward(self, x):
        return self.w * x.mean(dim=(1, 2, 3)) + self.b

    def checksum(self):
        return parameter_checksum(self)


class ToyGenerator(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(1, 1, 3, padding=1).double()
        torch.manual_seed(0)
        nn.init.normal_(self.conv.weight, std=0.3)

    def forward(self, x):
        return torch.sigmoid(self.conv(x))


def pixel_loop_l1(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    total = 0.0
    for idx in np.ndindex(a.shape):
        total += abs(a[idx] - b[idx])
    return total / a.size


def desk_records(n=40, side=32, seed=0):
    cfg = ForgeConfig()
    cfg.plan = SubgroupPlan(p_artifact_sick=0.9, p_artifact_healthy=0.1, n_sick=n, n_healthy=n, seed=seed)
    return build_synthetic_dataset(cfg.plan, cfg.artifact, cfg.marker, side)


# --- loss oracles -----------------------------------------------------------

def test_cycle_loss_trivial_cases():
    x = torch.rand(3, 1, 8, 8)
    assert float(cycle_loss(Identity(), Identity(), x)) == 0.0
    assert float(cycle_loss(Constant(0.5), Identity(), torch.ones(2, 1, 4, 4))) == pytest.approx(0.5)


def test_cycle_and_identity_match_pixel_loop():
    torch.manual_seed(1)
    g1, g2 = ToyGenerator(), ToyGenerator()
    nn.init.normal_(g2.conv.weight, std=0.5)
    x = torch.rand(2, 1, 6, 6, dtype=torch.float64)
    with torch.no_grad():
        recon = g2(g1(x)).numpy()
        same = g1(x).numpy()
        assert abs(float(cycle_loss(g1, g2, x)) - pixel_loop_l1(recon, x.numpy())) <= 1e-6
        assert abs(float(identity_loss(g1, x)) - pixel_loop_l1(same, x.numpy())) <= 1e-6


def test_identity_loss_trivial_cases():
    assert float(identity_loss(Identity(), torch.rand(2, 1, 5, 5))) == 0.0
    assert float(identity_loss(Constant(0.3), torch.full((2, 1, 5, 5), 0.3))) == pytest.approx(0.0, abs=1e-7)


def test_consistency_loss_closed_forms():
    f = MeanLogit()
    half = torch.full((4, 1, 16, 16), 0.5)  # logit 0 -> p = 0.5
    assert float(classifier_consistency_loss(f, half, 1.0)) == pytest.approx(math.log(2), abs=1e-6)
    bright = torch.ones(2, 1, 16, 16)  # p clamps at 1 - eps
    assert float(classifier_consistency_loss(f, bright, 1.0)) == pytest.approx(-math.log(1 - PROB_EPS), abs=1e-6)


def test_consistency_loss_matches_per_sample_oracle():
    f = MeanLogit(scale=5.0)
    x = torch.rand(6, 1, 16, 16)
    with torch.no_grad():
        p = torch.sigmoid(f(x)).numpy().astype(np.float64)
    for target in (0.0, 1.0):
        oracle = np.mean([-(target * math.log(pi) + (1 - target) * math.log(1 - pi)) for pi in p])
        assert abs(float(classifier_consistency_loss(f, x, target)) - oracle) <= 1e-6


def test_consistency_loss_checksum_mismatch():
    f = MeanLogit()
    with pytest.raises(ChecksumError):
        classifier_consistency_loss(f, torch.rand(1, 1, 16, 16), 1.0, checksum="0" * 64)


def test_adversarial_loss_arithmetic():
    class D(nn.Module):
        def forward(self, x):
            return x.mean(dim=(1, 2, 3))

    d = D()
    d_loss, g_loss = adversarial_loss(d, torch.ones(3, 1, 4, 4), torch.zeros(3, 1, 4, 4))
    assert float(d_loss) == 0.0 and float(g_loss) == 1.0
    d_loss, _ = adversarial_loss(d, torch.full((3, 1, 4, 4), 0.5), torch.full((3, 1, 4, 4), 0.5))
    assert float(d_loss) == pytest.approx(0.25)


def test_adversarial_loss_random_oracle():
    class D(nn.Module):
        def forward(self, x):
            return x.flatten(1)

    rng = np.random.default_rng(0)
    real, fake = rng.normal(size=(2, 4, 1, 3, 3))
    d_loss, g_loss = adversarial_loss(D(), torch.tensor(real), torch.tensor(fake))
    assert abs(float(d_loss) - (0.5 * np.mean((real - 1) ** 2) + 0.5 * np.mean(fake ** 2))) <= 1e-6
    assert abs(float(g_loss) - np.mean((fake - 1) ** 2)) <= 1e-6
    assert float(d_loss) >= 0 and float(g_loss) >= 0


# --- gradient routing -------------------------------------------------------

def test_consistency_gradients_route_to_generator_only():
    f, g = TwoParamF(), ToyGenerator()
    before = f.checksum()
    x = torch.rand(3, 1, 5, 5, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    loss = classifier_consistency_loss(f, g(x), 0.0, checksum=before)
    loss.backward()
    assert all(p.grad is None or torch.count_nonzero(p.grad) == 0 for p in f.parameters())
    assert all(p.requires_grad for p in f.parameters())  # flags restored
    assert f.checksum() == before

    analytic = torch.cat([p.grad.flatten() for p in g.parameters()])
    numeric = []
    h = 1e-6
    with torch.no_grad():
        for p in g.parameters():
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(classifier_consistency_loss(f, g(x), 0.0))
                flat[i] = orig - h
                down = float(classifier_consistency_loss(f, g(x), 0.0))
                flat[i] = orig
                numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    rel = (analytic - numeric).abs().max() / numeric.abs().max()
    assert float(rel) <= 1e-4


# --- generator properties ---------------------------------------------------

@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 1000), scale=st.sampled_from([0.01, 1.0, 10.0]))
def test_generator_output_in_unit_range(seed, scale):
    torch.manual_seed(seed)
    g = UNetGenerator(base=4, depth=2, init_scale=scale)
    x = torch.rand(2, 1, 32, 32)
    x[0, 0, :4] = 0.0
    x[1, 0, :4] = 1.0
    with torch.no_grad():
        y = g(x)
    assert y.shape == x.shape
    assert float(y.min()) >= 0.0 and float(y.max()) <= 1.0


def test_near_identity_init_cycle_small():
    torch.manual_seed(0)
    g1, g2 = UNetGenerator(), UNetGenerator()
    x = torch.from_numpy(np.stack([r.image for r in desk_records(n=10, side=64)[:16]])).float()[:, None]
    with torch.no_grad():
        assert float(cycle_loss(g1, g2, x)) <= 0.05


# --- routing ----------------------------------------------------------------

def _bundle_with(f, g_sh, g_hs):
    b = CounterfactualBundle(f, GANConfig(**TINY_GAN))
    b.g_sh, b.g_hs = g_sh, g_hs
    return b


def test_identity_bundle_returns_input():
    f = MeanLogit()
    b = _bundle_with(f, Identity(), Identity())
    x = np.random.default_rng(0).uniform(size=(16, 16))
    pair = generate_counterfactual(b, x)
    assert np.array_equal(pair.x_cf, pair.x.astype(np.float32).astype(np.float64))
    assert pair.f_x == pytest.approx(pair.f_x_cf)


def test_routing_follows_threshold():
    f = MeanLogit()
    b = _bundle_with(f, Constant(0.0), Constant(1.0))
    bright, dark = np.full((16, 16), 0.6), np.full((16, 16), 0.4)
    p = generate_counterfactual(b, bright)
    assert p.direction == SICK_TO_HEALTHY and p.f_x >= 0.5 and np.all(p.x_cf == 0.0)
    p = generate_counterfactual(b, dark)
    assert p.direction == HEALTHY_TO_SICK and p.f_x < 0.5 and np.all(p.x_cf == 1.0)
    cf, sick, fx, _ = translate(b, np.stack([bright, dark, bright]))
    assert sick.tolist() == [True, False, True]
    assert [float(c[0, 0]) for c in cf] == [0.0, 1.0, 0.0]


def test_generate_counterfactual_shape_errors():
    b = _bundle_with(MeanLogit(), Identity(), Identity())
    with pytest.raises(ValueError):
        generate_counterfactual(b, np.zeros((2, 16, 16)))
    with pytest.raises(ValueError):
        generate_counterfactual(b, np.zeros((20, 20)))


# --- heatmap / region mass --------------------------------------------------

def test_heatmap_trivial_cases():
    x = np.random.default_rng(0).uniform(size=(8, 8))
    assert not difference_heatmap(CounterfactualPair(x, x.copy(), SICK_TO_HEALTHY, 0.9, 0.9)).any()
    y = x.copy()
    y[3, 4] += 0.2
    h = difference_heatmap(CounterfactualPair(x, y, SICK_TO_HEALTHY, 0.9, 0.1))
    assert np.count_nonzero(h) == 1 and h[3, 4] == 1.0


def test_heatmap_matches_pixel_loop():
    rng = np.random.default_rng(3)
    x, y = rng.uniform(size=(2, 12, 12))
    h = difference_heatmap(CounterfactualPair(x, y, SICK_TO_HEALTHY, 0.9, 0.1))
    peak = max(abs(x[i, j] - y[i, j]) for i in range(12) for j in range(12))
    for i in range(12):
        for j in range(12):
            assert abs(h[i, j] - abs(x[i, j] - y[i, j]) / peak) <= 1e-6


def test_region_mass_cases():
    rng = np.random.default_rng(4)
    h = rng.uniform(size=(10, 10))
    assert region_mass(h, np.ones((10, 10), bool)) == pytest.approx(1.0)
    assert region_mass(np.zeros((10, 10)), np.ones((10, 10), bool)) == 0.0
    mask = np.zeros((10, 10), bool)
    mask[2:5, 3:7] = True
    h2 = h.copy()
    h2[mask] = 0
    assert region_mass(h2, mask) == 0.0
    inside = sum(h[i, j] for i in range(10) for j in range(10) if mask[i, j])
    total = sum(h[i, j] for i in range(10) for j in range(10))
    assert abs(region_mass(h, mask) - inside / total) <= 1e-9
    with pytest.raises(ValueError):
        region_mass(h, np.ones((5, 5), bool))


# --- training ---------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_setup():
    recs = desk_records(n=40, side=32)
    train = [r for r in recs if r.split == "train"]
    val = [r for r in recs if r.split == "val"]
    f = train_erm(train, val, TrainConfig(epochs=2, arch=SMALL_ARCH))
    return recs, train, f


def test_training_keeps_classifier_bit_identical(tiny_setup, tmp_path):
    recs, train, f = tiny_setup
    before = {k: v.clone() for k, v in f.state_dict().items()}
    checksum = f.checksum()
    bundle = train_counterfactual_gan([r for r in train if r.label == 0], [r for r in train if r.label == 1],
                                      f, GANConfig(**{**TINY_GAN, "epochs": 2}), checkpoint_dir=tmp_path)
    assert f.checksum() == checksum == bundle.classifier_checksum
    assert all(torch.equal(before[k], v) for k, v in f.state_dict().items())
    assert sorted(p.name for p in tmp_path.iterdir()) == ["bundle_epoch000.pt", "bundle_epoch001.pt"]
    assert not any(p is q for p in bundle.parameters() for q in f.parameters())


def test_training_deterministic(tiny_setup):
    _, train, f = tiny_setup
    h, s = [r for r in train if r.label == 0], [r for r in train if r.label == 1]
    a = train_counterfactual_gan(h, s, f, GANConfig(**TINY_GAN))
    b = train_counterfactual_gan(h, s, f, GANConfig(**TINY_GAN))
    assert parameter_checksum(a) == parameter_checksum(b)


def test_training_empty_domain_rejected(tiny_setup):
    _, train, f = tiny_setup
    with pytest.raises(ValueError):
        train_counterfactual_gan([], [r for r in train if r.label == 1], f, GANConfig(**TINY_GAN))


def test_tampered_classifier_is_hard_failure(tiny_setup):
    _, train, f = tiny_setup
    bundle = CounterfactualBundle(f, GANConfig(**TINY_GAN))
    tampered = BinaryClassifier(f.arch, f.threshold, f.input_side)
    tampered.load_state_dict(f.state_dict())
    bundle.__dict__["classifier"] = tampered
    with torch.no_grad():
        next(tampered.parameters()).add_(1.0)
    with pytest.raises(ChecksumError):
        translate(bundle, np.zeros((1, 32, 32)))


def test_cycle_error_halves_from_a_nontrivial_start(tiny_setup):
    # near-identity init starts with almost no cycle error, so start from full-scale output layers
    _, train, f = tiny_setup
    cfg = GANConfig(**{**TINY_GAN, "epochs": 3, "max_steps_per_epoch": 10,
                       "generator": {**TINY_GAN["generator"], "init_scale": 1.0}})
    bundle = train_counterfactual_gan([r for r in train if r.label == 0], [r for r in train if r.label == 1], f, cfg)
    start, end = bundle.history[0]["cycle"], bundle.history[-1]["cycle"]
    assert bundle.history[0]["epoch"] == -1
    assert end <= 0.5 * start


def test_bundle_round_trip(tiny_setup, tmp_path):
    recs, train, f = tiny_setup
    bundle = train_counterfactual_gan([r for r in train if r.label == 0], [r for r in train if r.label == 1],
                                      f, GANConfig(**TINY_GAN))
    path = tmp_path / "b.pt"
    save_bundle(path, bundle)
    ckpt = torch.load(path, weights_only=False)
    assert ckpt["loss_weights"] == {"adv": 1.0, "cyc": 10.0, "id": 5.0, "cls": 1.0}
    assert ckpt["config"]["batch_size"] == 8
    loaded = load_bundle(path, f)
    x = np.stack([r.image for r in recs[:5]])
    assert np.array_equal(translate(loaded, x)[0], translate(bundle, x)[0])

    other = BinaryClassifier(SMALL_ARCH, input_side=32)
    with pytest.raises(ChecksumError):
        load_bundle(path, other)


def test_write_counterfactual_triplet(tmp_path):
    x = np.random.default_rng(0).uniform(size=(16, 16))
    pair = CounterfactualPair(x, 1 - x, SICK_TO_HEALTHY, 0.9, 0.2)
    write_counterfactual(tmp_path, "case", pair)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["case.json", "case_counterfactual.png", "case_factual.png", "case_heatmap.png"]


def test_ablation_without_classifier_term_runs():
    # untrained f and lambda_cls = 0: nothing pushes images across f's boundary
    recs = desk_records(n=40, side=32)
    train = [r for r in recs if r.split == "train"]
    test = [r for r in recs if r.split == "test"]
    torch.manual_seed(3)
    f = BinaryClassifier(SMALL_ARCH, input_side=32)
    bundle = train_counterfactual_gan([r for r in train if r.label == 0], [r for r in train if r.label == 1],
                                      f, GANConfig(**{**TINY_GAN, "lambda_cls": 0.0}))
    _, sick, fx, fcf = translate(bundle, np.stack([r.image for r in test]))
    flipped = np.mean((fcf >= 0.5) != sick)
    assert flipped <= 0.6
