"""Central finite-difference checks of every layer and loss in float64.

Each case is a scalar function of a list of leaf tensors. Layer outputs are
projected onto a fixed random tensor so one scalar probes the full Jacobian.
Elements sitting on a kink (ReLU, max, abs) show different one-sided
slopes; those are skipped and replaced by another sample.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import losses as L
from . import neuro as N

log = logging.getLogger(__name__)

DEFAULT_EPS = 1e-6
DEFAULT_TOL = 1e-4


@dataclass
class GradcheckResult:
    name: str
    n_checked: int
    n_skipped: int
    max_rel_err: float
    tol: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: {self.n_checked} elements, max rel err {self.max_rel_err:.2e}"
                f" (skipped {self.n_skipped} at kinks, {self.seconds:.2f}s)")


def check_function(name: str, fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor],
                   n_samples: int = 100, eps: float = DEFAULT_EPS, tol: float = DEFAULT_TOL,
                   seed: int = 0) -> GradcheckResult:
    """Compare autograd against central differences on sampled tensor elements.

    ``fn`` closes over ``tensors`` (float64 leaves with requires_grad) and
    returns a scalar. Relative error is |a - n| / max(|a|, |n|, floor) with
    floor = 1e-5 * max(1, largest sampled |gradient|).
    """
    t0 = time.perf_counter()
    for t in tensors:
        if t.dtype != torch.float64:
            raise TypeError(f"{name}: gradcheck needs float64 tensors")
    out = fn()
    grads = torch.autograd.grad(out, list(tensors), allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g.detach() for t, g in zip(tensors, grads)]

    sizes = np.array([t.numel() for t in tensors])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    pool = rng.permutation(total)
    bounds = np.cumsum(sizes)

    analytic, numeric, skipped = [], [], 0
    with torch.no_grad():
        for flat in pool:
            if len(analytic) >= n_samples:
                break
            ti = int(np.searchsorted(bounds, flat, side="right"))
            idx = int(flat - (bounds[ti - 1] if ti else 0))
            view = tensors[ti].view(-1)
            orig = view[idx].item()
            f0 = float(fn())
            view[idx] = orig + eps
            fp = float(fn())
            view[idx] = orig - eps
            fm = float(fn())
            view[idx] = orig
            d_plus, d_minus = (fp - f0) / eps, (f0 - fm) / eps
            scale = max(abs(d_plus), abs(d_minus), 1e-8)
            if abs(d_plus - d_minus) > 1e-2 * scale:
                skipped += 1
                continue
            analytic.append(float(grads[ti].reshape(-1)[idx]))
            numeric.append((fp - fm) / (2 * eps))
    a, n = np.array(analytic), np.array(numeric)
    if a.size == 0:
        return GradcheckResult(name, 0, skipped, float("inf"), tol, time.perf_counter() - t0)
    floor = 1e-5 * max(1.0, float(np.abs(a).max()))
    rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return GradcheckResult(name, int(a.size), skipped, float(rel.max()), tol, time.perf_counter() - t0)


# -- cases ------------------------------------------------------------------------

def _leaf(gen, *shape, scale=1.0, positive=False):
    t = torch.randn(*shape, generator=gen, dtype=torch.float64) * scale
    if positive:
        t = t.abs() + 0.1
    return t.requires_grad_(True)


def _projected(gen, fn, tensors):
    """Scalar <R, fn()> with a fixed random R shaped like the output."""
    with torch.no_grad():
        shape = fn().shape
    r = torch.randn(shape, generator=gen, dtype=torch.float64)
    return lambda: (fn() * r).sum()


def _module_case(gen, module: nn.Module, inputs: list[torch.Tensor]):
    N.init_weights(module, int(torch.randint(0, 2**31 - 1, (1,), generator=gen)))
    module = module.double().train()
    params = [p.requires_grad_(True) for p in module.parameters()]
    # randomise norm affines so they are not a trivial identity
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d)) and m.affine:
                m.weight.copy_(1 + 0.3 * torch.randn(m.weight.shape, generator=gen, dtype=torch.float64))
                m.bias.copy_(0.3 * torch.randn(m.bias.shape, generator=gen, dtype=torch.float64))
            if isinstance(m, nn.Conv2d) and m.bias is not None:
                m.bias.copy_(0.1 * torch.randn(m.bias.shape, generator=gen, dtype=torch.float64))

    def fn():
        out = module(*inputs)
        return out[0] if isinstance(out, tuple) else out

    return _projected(gen, fn, inputs + params), inputs + params


def layer_cases(seed: int = 0) -> list[tuple[str, Callable, list[torch.Tensor]]]:
    g = torch.Generator().manual_seed(seed)
    cases = []

    x, w, b = _leaf(g, 2, 3, 8, 8), _leaf(g, 4, 3, 3, 3, scale=0.3), _leaf(g, 4)
    cases.append(("conv2d", _projected(g, lambda x=x, w=w, b=b: N.conv2d(x, w, b, 1, 1), [x, w, b]), [x, w, b]))
    x2, w2 = _leaf(g, 2, 3, 9, 9), _leaf(g, 5, 3, 4, 4, scale=0.3)
    cases.append(("conv2d_stride2", _projected(g, lambda: N.conv2d(x2, w2, None, 2, 1), [x2, w2]), [x2, w2]))
    x = _leaf(g, 2, 3, 8, 8)
    cases.append(("relu", _projected(g, lambda x=x: N.relu(x), [x]), [x]))
    x = _leaf(g, 2, 3, 8, 8)
    lrelu = nn.LeakyReLU(0.2)
    cases.append(("leaky_relu", _projected(g, lambda x=x: lrelu(x), [x]), [x]))
    x = _leaf(g, 2, 3, 8, 8)
    cases.append(("maxpool", _projected(g, lambda x=x: N.maxpool(x), [x]), [x]))
    x = _leaf(g, 2, 3, 6, 6)
    cases.append(("nearest_upsample", _projected(g, lambda x=x: N.nearest_upsample(x), [x]), [x]))
    for kind in ("batch", "instance"):
        x = _leaf(g, 3, 4, 6, 6)
        wt, bs = _leaf(g, 4), _leaf(g, 4)
        fn = (lambda k, x, wt, bs: lambda: N.norm_forward(x, k, wt, bs))(kind, x, wt, bs)
        cases.append((f"norm_{kind}", _projected(g, fn, [x, wt, bs]), [x, wt, bs]))
    for kind in ("batch", "instance"):
        x = _leaf(g, 3, 4, 6, 6)
        f, t = _module_case(g, N.make_norm(kind, 4), [x])
        cases.append((f"norm_module_{kind}", f, t))

    f, t = _module_case(g, N.BasicBlock(4, 6, 2, "instance"), [_leaf(g, 2, 4, 8, 8)])
    cases.append(("basic_block", f, t))
    f, t = _module_case(g, N.Bottleneck(6, 2, 1, "batch"), [_leaf(g, 2, 6, 6, 6)])
    cases.append(("bottleneck_block", f, t))
    f, t = _module_case(g, N.DecoderBlock(6, 3, 4, "instance"), [_leaf(g, 2, 6, 4, 4), _leaf(g, 2, 3, 8, 8)])
    cases.append(("decoder_block", f, t))
    head = nn.Conv2d(4, 1, 1)
    f, t = _module_case(g, head, [_leaf(g, 2, 4, 8, 8)])
    cases.append(("head_conv1x1", f, t))

    for depth, norm, size in ((4, "instance", 32), (4, "none", 32), (5, "batch", 64)):
        net = N.GeneratorNet(3, depth, 4, "tiny", norm, seed=seed)
        with torch.no_grad():
            net.target_scale.fill_(2.5)
        f, t = _module_case(g, net, [_leaf(g, 2, 3, size, size)])
        cases.append((f"generator_depth{depth}_{norm}", f, t))
    for variant in ("pixelgan", "patchgan16", "patchgan34"):
        size = 40 if variant == "patchgan34" else 16
        net = N.DiscriminatorNet(3, variant, 4, "batch", seed=seed)
        f, t = _module_case(g, net, [_leaf(g, 2, 3, size, size), _leaf(g, 2, 1, size, size)])
        cases.append((f"discriminator_{variant}", f, t))

    x = _leaf(g, 2, 1, 8, 8)
    rr, ri = torch.randn(2, 1, 8, 8, generator=g, dtype=torch.float64), torch.randn(2, 1, 8, 8, generator=g,
                                                                                     dtype=torch.float64)

    def dft_fn():
        re, im = N.dft2(x)
        return (re * rr).sum() + (im * ri).sum()

    cases.append(("dft2", dft_fn, [x]))
    return cases


def loss_cases(seed: int = 0) -> list[tuple[str, Callable, list[torch.Tensor]]]:
    g = torch.Generator().manual_seed(seed)
    shape = (2, 1, 8, 8)
    cases = []

    def pair():
        return _leaf(g, *shape), _leaf(g, *shape)

    def mask(p=0.5):
        return (torch.rand(shape, generator=g, dtype=torch.float64) < p).double()

    y, yh = pair()
    cases.append(("l1_loss", lambda y=y, yh=yh: L.l1_loss(y, yh), [y, yh]))
    y, yh = pair()
    m = mask()
    cases.append(("masked_l1", lambda y=y, yh=yh: L.masked_l1(y, yh, m), [y, yh]))
    y, yh = pair()
    cases.append(("fft_loss", lambda y=y, yh=yh: L.fft_loss(y, yh), [y, yh]))
    y, yh = pair()
    m2 = mask()
    cases.append(("masked_fft", lambda y=y, yh=yh: L.masked_fft(y, yh, m2), [y, yh]))

    pr = torch.rand(4, 1, 6, 5, generator=g, dtype=torch.float64).mul(0.9).add(0.05).requires_grad_(True)
    pf = torch.rand(4, 1, 6, 5, generator=g, dtype=torch.float64).mul(0.9).add(0.05).requires_grad_(True)
    cases.append(("vgan_d", lambda: L.vgan_losses(pr, pf)[0], [pr, pf]))
    cases.append(("vgan_g", lambda: L.vgan_losses(pr, pf)[1], [pf]))
    dr, df = _leaf(g, 4, 1, 6, 5), _leaf(g, 4, 1, 6, 5)
    cases.append(("lsgan_d", lambda: L.lsgan_d_loss(dr, df), [dr, df]))
    cases.append(("lsgan_g", lambda: L.lsgan_g_loss(df), [df]))
    vcfg = L.LossConfig(alpha=0.1, gan_kind="vgan")
    cases.append(("vgan_logit_d", lambda: L.gan_d_term(dr, df, vcfg), [dr, df]))
    cases.append(("vgan_logit_g", lambda: L.gan_g_term(df, vcfg), [df]))

    y, yh = pair()
    d = _leaf(g, 2, 1, 6, 6)
    cases.append(("cgan_g_loss", lambda y=y, yh=yh, d=d: L.cgan_g_loss(y, yh, d, 0.01), [y, yh, d]))
    y, yh = pair()
    d = _leaf(g, 2, 1, 6, 6)
    cfg = L.LossConfig(alpha=0.01, gamma=1e-3, delta=1)
    cases.append(("total_loss", lambda y=y, yh=yh, d=d: L.total_loss(y, yh, d, cfg).total, [y, yh, d]))

    y, yh = pair()
    dg, dp = _leaf(g, 2, 1, 6, 6), _leaf(g, 2, 1, 6, 6)
    mg = mask(0.05)
    mp = torch.clamp(mask(0.6) + mg, max=1.0)
    dcfg = L.LossConfig(alpha=0.01, gamma=1e-3, delta=50)
    cases.append(("decomposed_total", lambda: L.decomposed_total(y, yh, dg, dp, mg, mp, dcfg).total,
                  [y, yh, dg, dp]))
    return cases


def run_all(n_samples: int = 100, tol: float = DEFAULT_TOL, eps: float = DEFAULT_EPS,
            seed: int = 0) -> list[GradcheckResult]:
    results = []
    for name, fn, tensors in layer_cases(seed) + loss_cases(seed):
        res = check_function(name, fn, tensors, n_samples, eps, tol, seed)
        log.info(res.line())
        results.append(res)
    return results
