"""Training objectives: L1, vanilla and least-squares GAN terms, the FFT
spectral loss, their weighted composite and the mask-decomposed total.

Tensors are (N, C, H, W) batches; 2-D inputs are treated as one patch.
Pixel and spectral terms average over the N patches of a batch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch

from .neuro import dft2

GAN_KINDS = ("lsgan", "vgan", "none")
PROB_CLAMP = 1e-7


@dataclass
class LossConfig:
    alpha: float = 0.0  # GAN weight
    gamma: float = 0.0  # FFT weight
    delta: float = 1.0  # ground-reference boost
    gan_kind: str = "lsgan"
    a: float = 0.0  # fake label
    b: float = 1.0  # real label
    c: float = 1.0  # generator target label

    def __post_init__(self):
        if self.alpha < 0 or self.gamma < 0:
            raise ValueError("alpha and gamma must be >= 0")
        if self.delta < 1:
            raise ValueError("delta must be >= 1")
        if self.gan_kind not in GAN_KINDS:
            raise ValueError(f"unknown gan_kind {self.gan_kind!r}")

    @property
    def adversarial(self) -> bool:
        return self.gan_kind != "none" and self.alpha > 0

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.gan_kind != "none" else 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _as_batch(t: torch.Tensor) -> torch.Tensor:
    if t.dim() == 2:
        return t[None, None]
    if t.dim() == 3:
        return t[None]
    if t.dim() == 4:
        return t
    raise ValueError(f"expected a 2-D patch or (N, C, H, W) batch, got shape {tuple(t.shape)}")


def _check_same(y, y_hat):
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(y.shape)} vs {tuple(y_hat.shape)}")


def l1_loss(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """Mean absolute error per patch, averaged over the patches."""
    _check_same(y, y_hat)
    r = _as_batch(y - y_hat).abs()
    return r.mean(dim=(1, 2, 3)).mean()


def masked_l1(y, y_hat, mask) -> torch.Tensor:
    """L1 on (M*Y, M*Y_hat); the 1/(N*N) normaliser counts every pixel."""
    _check_same(y, y_hat)
    _check_same(y, mask)
    return l1_loss(mask * y, mask * y_hat)


def fft_loss(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """Squared error of real and imaginary DFT parts, summed over bins,
    averaged over patches."""
    _check_same(y, y_hat)
    y, y_hat = _as_batch(y), _as_batch(y_hat)
    re_y, im_y = dft2(y)
    re_p, im_p = dft2(y_hat)
    per_patch = ((im_y - im_p) ** 2).sum(dim=(1, 2, 3)) + ((re_y - re_p) ** 2).sum(dim=(1, 2, 3))
    return per_patch.mean()


def masked_fft(y, y_hat, mask) -> torch.Tensor:
    _check_same(y, mask)
    return fft_loss(mask * y, mask * y_hat)


def vgan_losses(d_real: torch.Tensor, d_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Vanilla GAN losses on probabilities: (discriminator, non-saturating generator)."""
    p_real = d_real.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    p_fake = d_fake.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    loss_d = -torch.log(p_real).mean() - torch.log(1 - p_fake).mean()
    loss_g = -torch.log(p_fake).mean()
    return loss_d, loss_g


def lsgan_d_loss(d_real: torch.Tensor, d_fake: torch.Tensor, b: float = 1.0, a: float = 0.0) -> torch.Tensor:
    _check_same(d_real, d_fake)
    return 0.5 * ((d_real - b) ** 2).mean() + 0.5 * ((d_fake - a) ** 2).mean()


def lsgan_g_loss(d_fake: torch.Tensor, c: float = 1.0) -> torch.Tensor:
    return 0.5 * ((d_fake - c) ** 2).mean()


def gan_g_term(d_fake: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Generator adversarial term for raw discriminator responses."""
    if cfg.gan_kind == "vgan":
        return -torch.log(torch.sigmoid(d_fake).clamp(PROB_CLAMP, 1 - PROB_CLAMP)).mean()
    return lsgan_g_loss(d_fake, cfg.c)


def gan_d_term(d_real: torch.Tensor, d_fake: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    if cfg.gan_kind == "vgan":
        return vgan_losses(torch.sigmoid(d_real), torch.sigmoid(d_fake))[0]
    return lsgan_d_loss(d_real, d_fake, cfg.b, cfg.a)


def cgan_g_loss(y, y_hat, d_fake, alpha: float = 0.01, c: float = 1.0) -> torch.Tensor:
    """L1 plus alpha-weighted LSGAN generator term."""
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    return l1_loss(y, y_hat) + alpha * lsgan_g_loss(d_fake, c)


def _zero(like: torch.Tensor) -> torch.Tensor:
    return torch.zeros((), dtype=like.dtype, device=like.device)


@dataclass
class LossReport:
    l1: torch.Tensor
    fft: torch.Tensor
    gan_g: torch.Tensor
    total: torch.Tensor
    gan_d: torch.Tensor | None = None
    parts: dict[str, torch.Tensor] = field(default_factory=dict)

    def recompute(self, cfg: LossConfig) -> torch.Tensor:
        """Total rebuilt from the stored terms."""
        if self.parts:
            p, d = self.parts, cfg.delta
            return (d * p["l1_gr"] + p["l1_pt"] + cfg.gamma * (d * p["fft_gr"] + p["fft_pt"])
                    + cfg.effective_alpha * (d * p["gan_g_gr"] + p["gan_g_pt"]))
        return self.l1 + cfg.effective_alpha * self.gan_g + cfg.gamma * self.fft

    def as_floats(self) -> dict[str, float]:
        out = {"l1": float(self.l1), "fft": float(self.fft), "gan_g": float(self.gan_g),
               "total": float(self.total)}
        if self.gan_d is not None:
            out["gan_d"] = float(self.gan_d)
        out.update({k: float(v) for k, v in self.parts.items()})
        return out


def total_loss(y, y_hat, d_fake, cfg: LossConfig) -> LossReport:
    """L1 + alpha * GAN + gamma * FFT; zero weights drop their term entirely."""
    l1 = l1_loss(y, y_hat)
    alpha = cfg.effective_alpha
    gan = gan_g_term(d_fake, cfg) if (alpha > 0 and d_fake is not None) else _zero(l1)
    fft = fft_loss(y, y_hat) if cfg.gamma > 0 else _zero(l1)
    total = l1
    if alpha > 0:
        total = total + alpha * gan
    if cfg.gamma > 0:
        total = total + cfg.gamma * fft
    return LossReport(l1, fft, gan, total)


def decomposed_total(y, y_hat, d_gr, d_pt, m_gr, m_pt, cfg: LossConfig) -> LossReport:
    """Ground-reference terms weighted by delta plus pseudo-target terms.

    ``d_gr``/``d_pt`` are discriminator responses on the fake pair masked
    with the respective mask (may be None when the GAN term is off).
    """
    d = cfg.delta
    alpha = cfg.effective_alpha
    p = {
        "l1_gr": masked_l1(y, y_hat, m_gr),
        "l1_pt": masked_l1(y, y_hat, m_pt),
    }
    zero = _zero(p["l1_gr"])
    p["fft_gr"] = masked_fft(y, y_hat, m_gr) if cfg.gamma > 0 else zero
    p["fft_pt"] = masked_fft(y, y_hat, m_pt) if cfg.gamma > 0 else zero
    use_gan = alpha > 0 and d_gr is not None and d_pt is not None
    p["gan_g_gr"] = gan_g_term(d_gr, cfg) if use_gan else zero
    p["gan_g_pt"] = gan_g_term(d_pt, cfg) if use_gan else zero

    l1 = d * p["l1_gr"] + p["l1_pt"]
    fft = d * p["fft_gr"] + p["fft_pt"]
    gan = d * p["gan_g_gr"] + p["gan_g_pt"]
    total = l1
    if cfg.gamma > 0:
        total = total + cfg.gamma * fft
    if use_gan:
        total = total + alpha * gan
    return LossReport(l1, fft, gan, total, parts=p)
