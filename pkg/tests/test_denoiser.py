import numpy as np
import pytest
import torch
from torch import nn

from mriqt import diffusion as dm
from mriqt.denoiser import (
    ConditionBatch,
    Denoiser3D,
    DenoiserConfig,
    apply_cond_dropout,
    guided_predict,
    load_denoiser,
    predict_v,
    save_denoiser,
)
from mriqt.errors import CorruptHeader, IndivisibleSpatialDims, ShapeMismatch
from mriqt.perceptual import FeatureExtractor, PerceptualConfig, total_loss

TINY = DenoiserConfig(base_channels=4, channel_mults=(1, 2), time_embed_dim=16, norm_groups=2)


def batch(b=2, n=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return ConditionBatch(torch.randn(b, 1, n, n, n, generator=g), torch.randn(b, 1, n, n, n, generator=g),
                          torch.randint(1, 200, (b,), generator=g))


def test_output_shape_and_finite():
    torch.manual_seed(0)
    model = Denoiser3D().eval()
    out = predict_v(model, batch())
    assert out.shape == (2, 1, 16, 16, 16)
    assert torch.isfinite(out).all()


def test_eval_determinism():
    torch.manual_seed(0)
    model = Denoiser3D(TINY).eval()
    b = batch(n=8)
    with torch.no_grad():
        assert torch.equal(predict_v(model, b), predict_v(model, b))


def test_null_condition_equals_zeros():
    torch.manual_seed(0)
    model = Denoiser3D(TINY).eval()
    b = batch(n=8)
    masked = ConditionBatch(b.x_t, b.cond, b.t, torch.zeros(2, dtype=torch.bool))
    with torch.no_grad():
        assert torch.equal(predict_v(model, masked), model(b.x_t, torch.zeros_like(b.cond), b.t))


def test_shape_errors():
    model = Denoiser3D(TINY)
    with pytest.raises(IndivisibleSpatialDims):
        model(torch.zeros(1, 1, 9, 8, 8), torch.zeros(1, 1, 9, 8, 8), 3)
    with pytest.raises(ShapeMismatch):
        model(torch.zeros(1, 1, 8, 8, 8), torch.zeros(1, 1, 8, 8, 16), 3)
    with pytest.raises(ShapeMismatch):
        ConditionBatch(torch.zeros(2, 1, 8, 8, 8), torch.zeros(3, 1, 8, 8, 8), torch.ones(2))


def test_cond_dropout_rate_and_seed():
    b = ConditionBatch(torch.zeros(10_000, 1, 1, 1, 1), torch.ones(10_000, 1, 1, 1, 1), torch.ones(10_000))
    assert apply_cond_dropout(b, 0.0, torch.Generator().manual_seed(0)).cond_mask.all()
    d1 = apply_cond_dropout(b, 0.1, torch.Generator().manual_seed(0))
    d2 = apply_cond_dropout(b, 0.1, torch.Generator().manual_seed(0))
    frac = 1.0 - d1.cond_mask.float().mean().item()
    assert abs(frac - 0.1) <= 0.01
    assert torch.equal(d1.cond_mask, d2.cond_mask)
    assert torch.equal(d1.cond[~d1.cond_mask], torch.zeros_like(d1.cond[~d1.cond_mask]))
    with pytest.raises(ValueError):
        apply_cond_dropout(b, 1.0)


class LinearToy(nn.Module):
    """y = a x + b c + k, with a call counter."""

    def __init__(self, a=0.5, b=2.0, k=0.25):
        super().__init__()
        self.a, self.b, self.k = a, b, k
        self.calls = 0

    def forward(self, x, c, t):
        self.calls += 1
        return self.a * x + self.b * c + self.k


def test_guided_predict_weights():
    g = torch.Generator().manual_seed(1)
    x = torch.randn(1, 1, 4, 4, 4, generator=g)
    c = torch.randn(1, 1, 4, 4, 4, generator=g)
    toy = LinearToy()
    expected = 0.5 * x + 2 * 2.0 * c + 0.25
    assert torch.allclose(guided_predict(toy, x, c, 5, dm.GuidanceConfig(weight=2.0)), expected, atol=1e-6)
    assert toy.calls == 2

    torch.manual_seed(0)
    model = Denoiser3D(TINY).eval()
    x8, c8 = torch.randn(2, 1, 1, 8, 8, 8, generator=g)
    t = torch.full((1,), 7)
    with torch.no_grad():
        cond_pass = model(x8, c8, t)
        null_pass = model(x8, torch.zeros_like(c8), t)
    assert torch.equal(guided_predict(model, x8, c8, 7, dm.GuidanceConfig(weight=1.0)), cond_pass)
    assert torch.equal(guided_predict(model, x8, c8, 7, dm.GuidanceConfig(weight=0.0)), null_pass)


def test_gradient_check_against_finite_differences():
    torch.manual_seed(0)
    model = Denoiser3D(TINY).double()
    fe = FeatureExtractor((4, 4, 4), groups=2).double().eval()
    for p in fe.parameters():
        p.requires_grad_(False)
    sch = dm.make_schedule("COSINE", 50)
    g = torch.Generator().manual_seed(3)
    x0 = (torch.rand(2, 1, 8, 8, 8, generator=g, dtype=torch.float64) * 2 - 1)
    eps = torch.randn(2, 1, 8, 8, 8, generator=g, dtype=torch.float64)
    cond = torch.randn(2, 1, 8, 8, 8, generator=g, dtype=torch.float64)
    t = 10
    cfg = PerceptualConfig(lambda_p=0.25)

    def loss():
        x_t = dm.q_sample(x0, t, eps, sch)
        v_hat = model(x_t, cond, t)
        return total_loss(v_hat, dm.v_from(x0, eps, t, sch), dm.x0_from_v(x_t, v_hat, t, sch), x0, t, sch, cfg, fe).total

    model.zero_grad()
    loss().backward()
    params = [p for p in model.parameters()]
    rng = np.random.default_rng(0)
    checked = 0
    h = 1e-6
    with torch.no_grad():
        for _ in range(60):
            p = params[rng.integers(len(params))]
            idx = tuple(int(rng.integers(n)) for n in p.shape)
            orig = p[idx].item()
            p[idx] = orig + h
            up = loss().item()
            p[idx] = orig - h
            down = loss().item()
            p[idx] = orig
            fd = (up - down) / (2 * h)
            an = p.grad[idx].item()
            assert abs(an - fd) / max(abs(an), abs(fd), 1e-7) <= 1e-3, (idx, an, fd)
            checked += 1
    assert checked >= 50


@pytest.mark.xfail(strict=True, reason="GroupNorm statistics span the whole volume, so zero padding rescales "
                   "every activation; see test_perturbation_influence_decays for the locality that does hold")
def test_padding_locality():
    torch.manual_seed(0)
    model = Denoiser3D(DenoiserConfig(base_channels=8, channel_mults=(1, 2), attn_at_bottleneck=False)).eval()
    g = torch.Generator().manual_seed(5)
    x, c = torch.randn(2, 1, 1, 16, 16, 16, generator=g)
    pad = lambda v: nn.functional.pad(v, (8,) * 6)
    with torch.no_grad():
        small = model(x, c, 20)
        big = model(pad(x), pad(c), 20)[..., 8:24, 8:24, 8:24]
    assert torch.sqrt(((small - big) ** 2).mean()) < 0.1


def test_perturbation_influence_decays():
    torch.manual_seed(0)
    model = Denoiser3D(DenoiserConfig(base_channels=8, channel_mults=(1, 2), attn_at_bottleneck=False)).eval()
    g = torch.Generator().manual_seed(5)
    x, c = torch.randn(2, 1, 1, 32, 32, 32, generator=g)
    bumped = x.clone()
    bumped[..., 4, 4, 4] += 5.0
    with torch.no_grad():
        diff = (model(bumped, c, 20) - model(x, c, 20)).abs()[0, 0]
    near = diff[:9, :9, :9].mean()
    far = diff[20:, 20:, 20:].mean()
    assert far < 0.05 * near


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    model = Denoiser3D(TINY).eval()
    save_denoiser(tmp_path / "m.ckpt", model, prediction="v")
    back, payload = load_denoiser(tmp_path / "m.ckpt")
    assert back.cfg == TINY and payload["prediction"] == "v"
    b = batch(n=8)
    with torch.no_grad():
        assert torch.equal(predict_v(model, b), predict_v(back, b))
    fe = FeatureExtractor((4, 4, 4))
    from mriqt.perceptual import save_extractor
    save_extractor(tmp_path / "fe.ckpt", fe)
    with pytest.raises(CorruptHeader):
        load_denoiser(tmp_path / "fe.ckpt")
