import pytest
import torch

from pseudoreg.gradcheck import check_function, run_all


def test_all_layers_and_losses_pass():
    results = run_all(n_samples=100, tol=1e-4)
    names = {r.name for r in results}
    for expected in ("conv2d", "maxpool", "norm_batch", "norm_instance", "dft2", "fft_loss", "lsgan_d", "vgan_g",
                     "decomposed_total"):
        assert expected in names
    bad = [r.line() for r in results if not r.passed]
    assert not bad, bad


def test_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x.clone()

        @staticmethod
        def backward(ctx, g):
            return 2 * g

    x = torch.randn(5, dtype=torch.float64, requires_grad=True)
    res = check_function("wrong", lambda: Wrong.apply(x).sum(), [x], n_samples=5)
    assert not res.passed and res.max_rel_err > 0.3
