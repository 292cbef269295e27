import math

import numpy as np
import pytest
import torch

from pseudoreg import train as T
from pseudoreg.dataset import PatchRef, PatchSample, cv_folds
from pseudoreg.losses import LossConfig


def make_patches(n=6, size=32, channels=2, seed=0, tag=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        x = rng.normal(size=(channels, size, size)).astype(np.float32)
        truth = (100 + 40 * x[0:1]).clip(0).astype(np.float32)
        m_pt = (rng.random((1, size, size)) < 0.7).astype(np.float32)
        m_gr = np.zeros_like(m_pt)
        m_gr[0, size // 2, size // 2] = 1
        m_pt = np.maximum(m_pt, m_gr)
        out.append(PatchSample(x, truth * m_pt, m_pt, m_gr, PatchRef(i, 0, tag)))
    return out


def small_config(**kw):
    base = dict(in_channels=2, depth=4, base_channels=4, ndf=4, batch_size=4, lr=1e-3, epochs=2,
                augment=False)
    base.update(kw)
    return T.TrainConfig(**base)


def adam_oracle(p, grads, lr, b1, b2, eps):
    p = float(p)
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adam_zero_gradient_fixed_point():
    p = torch.tensor([1.5, -2.0], dtype=torch.float64)
    st = T.AdamState.zeros_like([p])
    for _ in range(5):
        T.adam_step([p], [torch.zeros_like(p)], st, 0.1, 0.9)
    assert torch.equal(p, torch.tensor([1.5, -2.0], dtype=torch.float64))


def test_adam_first_step_is_lr_sign():
    p = torch.tensor([0.0, 0.0], dtype=torch.float64)
    st = T.AdamState.zeros_like([p])
    T.adam_step([p], [torch.tensor([3.0, -0.5], dtype=torch.float64)], st, 0.1, 0.8)
    assert torch.allclose(p, torch.tensor([-0.1, 0.1], dtype=torch.float64), atol=1e-8)


def test_adam_matches_scalar_loop(rng):
    grads = rng.normal(size=10).tolist()
    p = torch.tensor([0.7], dtype=torch.float64)
    st = T.AdamState.zeros_like([p])
    for g in grads:
        T.adam_step([p], [torch.tensor([g], dtype=torch.float64)], st, 1e-2, 0.7)
    assert float(p) == pytest.approx(adam_oracle(0.7, grads, 1e-2, 0.7, 0.999, 1e-8), abs=1e-12)
    assert st.step == 10


def test_adam_skips_non_finite():
    p = torch.tensor([1.0], dtype=torch.float64)
    st = T.AdamState.zeros_like([p])
    assert not T.adam_step([p], [torch.tensor([float("nan")], dtype=torch.float64)], st, 0.1, 0.9)
    assert float(p) == 1.0 and st.step == 0 and st.skipped == 1
    with pytest.raises(ValueError):
        T.adam_step([p], [torch.zeros(2, dtype=torch.float64)], st, 0.1, 0.9)


def test_config_validation_and_roundtrip(tmp_path):
    with pytest.raises(ValueError):
        T.TrainConfig(beta1=1.0)
    with pytest.raises(ValueError):
        T.TrainConfig(lr=-1)
    with pytest.raises(ValueError):
        T.TrainConfig.from_dict({"bogus": 1})
    cfg = small_config(loss=LossConfig(alpha=0.01, delta=300))
    cfg.save(tmp_path / "c.json")
    back = T.TrainConfig.load(tmp_path / "c.json")
    assert back == cfg and back.hash() == cfg.hash()
    assert T.apply_overrides(cfg, {"lr": 0.5, "delta": 2.0}).loss.delta == 2.0
    with pytest.raises(ValueError):
        T.apply_overrides(cfg, {"nope": 1})


def test_effective_loss_ablations():
    lc = LossConfig(alpha=0.01, gamma=1e-5, delta=10)
    assert T.TrainConfig(loss=lc).effective_loss().alpha == 0
    assert T.TrainConfig(model="cgan_unet", loss=lc).effective_loss().gamma == 0
    ft = dict(stage="finetune", loss=lc)
    assert T.TrainConfig(finetune_objective="l1+fft", **ft).effective_loss().alpha == 0
    assert T.TrainConfig(finetune_objective="cgan", **ft).effective_loss().gamma == 0
    assert T.TrainConfig(finetune_objective="cgan+fft", **ft).effective_loss() == lc


def test_presets_load():
    from importlib import resources
    names = [p.name for p in resources.files("pseudoreg.presets").iterdir() if p.name.endswith(".json")]
    assert len(names) == 12
    for name in names:
        cfg = T.TrainConfig.load(resources.files("pseudoreg.presets") / name)
        assert cfg.beta2 == 0.999 and cfg.eps == 1e-8


def test_zero_lr_leaves_generator_unchanged():
    patches = make_patches()
    cfg = small_config(lr=0.0, model="cgan_unet", loss=LossConfig(alpha=0.01))
    ck = T.pretrain(cfg, patches)
    fresh = T.pretrain(small_config(lr=0.0, epochs=0, model="cgan_unet", loss=LossConfig(alpha=0.01)), patches)
    for (k, a), b in zip(ck.generator.named_parameters(), fresh.generator.parameters()):
        assert torch.equal(a, b), k
    ft = T.finetune(small_config(stage="finetune", lr=0.0, loss=LossConfig(alpha=0.01)), ck, patches)
    for a, b in zip(ft.generator.parameters(), ck.generator.parameters()):
        assert torch.equal(a, b)
    assert ft.epoch_label == "2+2"


def test_training_reduces_masked_l1():
    patches = make_patches(8)
    cfg = small_config(epochs=30, lr=3e-3)
    batch = T.stack_patches(patches)
    ck0 = T.pretrain(small_config(epochs=0), patches)
    ck = T.pretrain(cfg, patches)
    assert T.evaluate_masked_l1(ck.generator, batch) < 0.7 * T.evaluate_masked_l1(ck0.generator, batch)
    assert len(ck.history) == 30 and ck.history[-1]["epoch"] == 30


def test_discriminator_then_generator_order(monkeypatch):
    calls = []
    real = T.adam_step

    def spy(params, grads, state, *a, **k):
        calls.append(len(params))
        return real(params, grads, state, *a, **k)

    monkeypatch.setattr(T, "adam_step", spy)
    cfg = small_config(epochs=1, model="cgan_unet", batch_size=2, loss=LossConfig(alpha=0.01))
    ck = T.pretrain(cfg, make_patches(4))
    n_d = len(list(ck.discriminator.parameters()))
    n_g = len(list(ck.generator.parameters()))
    assert calls == [n_d, n_g, n_d, n_g]


def test_generator_step_leaves_discriminator_alone(monkeypatch):
    """Parameter-difference masks: D moves only on D steps, G only on G steps."""
    cfg = small_config(epochs=1, model="cgan_unet", batch_size=4, loss=LossConfig(alpha=0.1))
    snaps = []
    real = T.adam_step

    def spy(params, grads, state, *a, **k):
        ok = real(params, grads, state, *a, **k)
        snaps.append([p.detach().clone() for p in params])
        return ok

    monkeypatch.setattr(T, "adam_step", spy)
    ck = T.pretrain(cfg, make_patches(4))
    d_after, g_after = snaps
    fresh = T.pretrain(small_config(epochs=0, model="cgan_unet", loss=LossConfig(alpha=0.1)), make_patches(4))
    # both networks moved, and each moved exactly once
    assert any(not torch.equal(a, b) for a, b in zip(d_after, fresh.discriminator.parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(g_after, fresh.generator.parameters()))
    for a, b in zip(d_after, ck.discriminator.parameters()):
        assert torch.equal(a, b)


def test_adversarial_run_stays_finite():
    cfg = small_config(epochs=50, model="cgan_unet", lr=1e-3, loss=LossConfig(alpha=0.01, delta=50))
    ck = T.pretrain(cfg, make_patches(4))
    for row in ck.history:
        assert all(math.isfinite(row[k]) for k in ("l1", "gan_g", "gan_d", "total"))
    assert ck.opt_g.skipped == 0


def test_training_is_deterministic(tmp_path):
    cfg = small_config(epochs=3, model="cgan_unet", loss=LossConfig(alpha=0.01))
    a = T.pretrain(cfg, make_patches(), tmp_path / "a.csv")
    b = T.pretrain(cfg, make_patches(), tmp_path / "b.csv")
    T.save_checkpoint(a, tmp_path / "ca")
    T.save_checkpoint(b, tmp_path / "cb")
    assert (tmp_path / "ca" / "tensors.bin").read_bytes() == (tmp_path / "cb" / "tensors.bin").read_bytes()
    assert (tmp_path / "ca" / "manifest.json").read_bytes() == (tmp_path / "cb" / "manifest.json").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == ",".join(T.LOG_FIELDS)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    cfg = small_config(epochs=1, model="cgan_unet", norm="batch", loss=LossConfig(alpha=0.01))
    ck = T.pretrain(cfg, make_patches())
    T.save_checkpoint(ck, tmp_path / "one")
    back = T.load_checkpoint(tmp_path / "one")
    assert back.config == cfg and back.opt_g.step == ck.opt_g.step
    T.save_checkpoint(back, tmp_path / "two")
    for f in ("tensors.bin", "manifest.json"):
        assert (tmp_path / "one" / f).read_bytes() == (tmp_path / "two" / f).read_bytes()
    x = T.stack_patches(make_patches()).x
    assert torch.equal(T.predict_patches(ck.generator, x), T.predict_patches(back.generator, x))


def test_finetune_errors_and_fresh_discriminator():
    patches = make_patches()
    par = T.pretrain(small_config(epochs=1), patches)
    assert par.discriminator is None
    with pytest.raises(ValueError, match="does not match"):
        T.finetune(small_config(stage="finetune", depth=5), par, patches)
    with pytest.raises(ValueError):
        T.finetune(small_config(epochs=1), par, patches)
    ft = T.finetune(small_config(stage="finetune", epochs=1, discriminator="pixelgan",
                                 loss=LossConfig(alpha=0.01)), par, patches)
    assert ft.discriminator is not None and ft.discriminator.arch["variant"] == "pixelgan"
    assert ft.epochs_pretrain == 1 and ft.epochs_finetune == 1


def test_empty_and_mismatched_data():
    with pytest.raises(ValueError, match="empty"):
        T.pretrain(small_config(), [])
    with pytest.raises(ValueError, match="channels"):
        T.pretrain(small_config(in_channels=3), make_patches())


def test_grid_search_single_and_ranking():
    units = [make_patches(2, seed=s) for s in range(4)]
    folds = cv_folds(4, k=2, seed=0)
    base = small_config(epochs=3, lr=1e-3)
    one = T.grid_search({"lr": [1e-3]}, base, folds, units)
    assert len(one) == 1 and one[0]["rank"] == 1 and len(one[0]["fold_rmse"]) == 2
    res = T.grid_search({"lr": [0.0, 3e-3]}, base, folds, units)
    assert [r["rank"] for r in res] == [1, 2]
    assert res[0]["overrides"]["lr"] == 3e-3
    assert res[0]["mean_rmse"] <= res[1]["mean_rmse"]
    with pytest.raises(ValueError):
        T.grid_search([], base, folds, units)


def test_expand_grid_product():
    combos = T.expand_grid({"lr": [1, 2], "alpha": [0.1, 0.2, 0.3]})
    assert len(combos) == 6 and {"lr": 2, "alpha": 0.3} in combos
    for region, grid in T.SEARCH_GRIDS.items():
        assert T.expand_grid(grid)
