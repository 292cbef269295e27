import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from pseudoreg import losses as L


def t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def l1_oracle(y, yh):
    y, yh = np.asarray(y, float), np.asarray(yh, float)
    n = y.shape[0]
    total = 0.0
    for k in range(n):
        s = 0.0
        for v in np.abs(y[k] - yh[k]).ravel():
            s += v
        total += s / y[k].size
    return total / n


def fft_oracle(y, yh):
    total = 0.0
    for k in range(y.shape[0]):
        for ch in range(y.shape[1]):
            f = np.fft.fft2(y[k, ch]) - np.fft.fft2(yh[k, ch])
            total += float((f.real ** 2).sum() + (f.imag ** 2).sum())
    return total / y.shape[0]


def test_l1_example():
    assert float(L.l1_loss(t([[1, 2], [3, 4]]), t(np.zeros((2, 2))))) == 2.5


def test_vgan_example():
    d, g = L.vgan_losses(t([0.5]), t([0.5]))
    assert float(d) == pytest.approx(2 * math.log(2), abs=1e-12)
    assert float(g) == pytest.approx(math.log(2), abs=1e-12)


def test_lsgan_example():
    assert float(L.lsgan_d_loss(t([0.5]), t([0.5]))) == pytest.approx(0.25)
    assert float(L.lsgan_g_loss(t([0.5]))) == pytest.approx(0.125)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        L.l1_loss(t(np.zeros((2, 2))), t(np.zeros((3, 3))))
    with pytest.raises(ValueError):
        L.l1_loss(t(np.zeros((1, 1, 1, 2, 2))), t(np.zeros((1, 1, 1, 2, 2))))


def test_l1_fft_match_loop_oracles(rng):
    y = rng.normal(size=(3, 1, 8, 8)) * 50
    yh = rng.normal(size=(3, 1, 8, 8)) * 50
    assert float(L.l1_loss(t(y), t(yh))) == pytest.approx(l1_oracle(y, yh), rel=1e-12)
    assert float(L.fft_loss(t(y), t(yh))) == pytest.approx(fft_oracle(y, yh), rel=1e-9)


def test_fft_parseval(rng):
    y, yh = rng.normal(size=(2, 1, 6, 6)), rng.normal(size=(2, 1, 6, 6))
    expect = 36 * ((y - yh) ** 2).sum() / 2
    assert float(L.fft_loss(t(y), t(yh))) == pytest.approx(expect, rel=1e-10)


@given(arrays(np.float64, (2, 1, 4, 4), elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, (2, 1, 4, 4), elements=st.floats(-1e3, 1e3)))
def test_l1_fft_nonneg_and_zero_at_equality(y, yh):
    assert float(L.l1_loss(t(y), t(yh))) >= 0
    assert float(L.fft_loss(t(y), t(yh))) >= 0
    assert float(L.l1_loss(t(y), t(y))) == 0
    assert float(L.fft_loss(t(y), t(y))) == 0


@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_gan_terms_nonneg(p, q):
    d, g = L.vgan_losses(t([p]), t([q]))
    assert float(d) >= 0 and float(g) >= 0
    assert float(L.lsgan_d_loss(t([p]), t([q]))) >= 0


def test_total_loss_ablations(rng):
    y, yh = t(rng.normal(size=(2, 1, 8, 8))), t(rng.normal(size=(2, 1, 8, 8)))
    dfake = t(rng.normal(size=(2, 1, 8, 8)))
    l1 = float(L.l1_loss(y, yh))
    # PAR-UNet: alpha = gamma = 0 reduces to L1
    assert float(L.total_loss(y, yh, dfake, L.LossConfig()).total) == l1
    cg = L.total_loss(y, yh, dfake, L.LossConfig(alpha=0.01)).total
    assert float(cg) == pytest.approx(float(L.cgan_g_loss(y, yh, dfake, 0.01)), rel=1e-12)
    ff = L.total_loss(y, yh, None, L.LossConfig(gamma=1e-5)).total
    assert float(ff) == pytest.approx(l1 + 1e-5 * float(L.fft_loss(y, yh)), rel=1e-12)
    # gan_kind none switches the adversarial term off even with alpha > 0
    off = L.total_loss(y, yh, dfake, L.LossConfig(alpha=0.5, gan_kind="none")).total
    assert float(off) == l1


def test_config_validation():
    with pytest.raises(ValueError):
        L.LossConfig(delta=0.5)
    with pytest.raises(ValueError):
        L.LossConfig(alpha=-1)
    with pytest.raises(ValueError):
        L.LossConfig(gan_kind="wgan")
    with pytest.raises(ValueError):
        L.cgan_g_loss(t([1.0]), t([1.0]), t([1.0]), alpha=2)


def test_masked_all_ones_and_zeros(rng):
    y, yh = t(rng.normal(size=(2, 1, 8, 8))), t(rng.normal(size=(2, 1, 8, 8)))
    one, zero = torch.ones_like(y), torch.zeros_like(y)
    assert float(L.masked_l1(y, yh, one)) == float(L.l1_loss(y, yh))
    assert float(L.masked_fft(y, yh, one)) == float(L.fft_loss(y, yh))
    assert float(L.masked_l1(y, yh, zero)) == 0
    assert float(L.masked_fft(y, yh, zero)) == 0


@pytest.mark.parametrize("delta", [1.0, 7.0, 500.0])
def test_decomposed_total_six_terms(rng, delta):
    shape = (2, 1, 8, 8)
    y, yh = t(rng.normal(size=shape) * 10), t(rng.normal(size=shape) * 10)
    m_gr = t(rng.random(shape) < 0.1)
    m_pt = t(rng.random(shape) < 0.6)
    d_gr, d_pt = t(rng.normal(size=shape)), t(rng.normal(size=shape))
    cfg = L.LossConfig(alpha=0.01, gamma=1e-4, delta=delta)
    rep = L.decomposed_total(y, yh, d_gr, d_pt, m_gr, m_pt, cfg)
    yn, yhn, g, p = (a.numpy() for a in (y, yh, m_gr, m_pt))
    terms = {
        "l1_gr": l1_oracle(g * yn, g * yhn), "l1_pt": l1_oracle(p * yn, p * yhn),
        "fft_gr": fft_oracle(g * yn, g * yhn), "fft_pt": fft_oracle(p * yn, p * yhn),
        "gan_g_gr": 0.5 * ((d_gr.numpy() - 1) ** 2).mean(), "gan_g_pt": 0.5 * ((d_pt.numpy() - 1) ** 2).mean(),
    }
    for k, v in terms.items():
        assert float(rep.parts[k]) == pytest.approx(v, rel=1e-9), k
    expect = (delta * terms["l1_gr"] + terms["l1_pt"] + 1e-4 * (delta * terms["fft_gr"] + terms["fft_pt"])
              + 0.01 * (delta * terms["gan_g_gr"] + terms["gan_g_pt"]))
    assert float(rep.total) == pytest.approx(expect, rel=1e-9)
    assert float(rep.recompute(cfg)) == pytest.approx(float(rep.total), rel=1e-12)


def test_decomposed_without_ground_reference_is_plain_total(rng):
    shape = (2, 1, 8, 8)
    y, yh, d = (t(rng.normal(size=shape)) for _ in range(3))
    cfg = L.LossConfig(alpha=0.01, gamma=1e-3, delta=300)
    dec = L.decomposed_total(y, yh, d, d, torch.zeros_like(y), torch.ones_like(y), cfg)
    plain = L.total_loss(y, yh, d, cfg)
    # the empty ground-reference GAN term still contributes delta * lsgan(d)
    gan_gr = float(L.lsgan_g_loss(d))
    assert float(dec.total) == pytest.approx(float(plain.total) + 0.01 * 300 * gan_gr, rel=1e-12)
