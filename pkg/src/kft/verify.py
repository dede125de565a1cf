"""End-to-end gradient verification against central finite differences.

Every layer class and every attention-block variant is checked in 64-bit
mode, plus the full network per variant with a classification loss on top.
Coordinates are sampled per parameter tensor to keep runtime sane; worst
relative error per component is reported.
"""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass

from .tensor import Tensor, finite_diff_check
from .layers import (Conv3d, BatchNorm3d, LayerNorm, Linear, max_pool3d,
                     avg_pool3d, cross_entropy, sigmoid_bce)
from .attention import KftBlock, KftBlockSpec, MultiHeadAttention, SpatialCompressor
from .model import KftModel, ModelConfig


@dataclass
class ComponentReport:
    component: str
    max_rel_error: float
    passed: bool


def _check_params(build_loss, params: dict, h=1e-5, tol=1e-4, sample=4,
                  rng=None) -> float:
    """FD-check sampled coordinates of every tensor in ``params`` against one
    analytic backward pass of the scalar ``build_loss()``."""
    if rng is None:
        rng = np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    build_loss().backward()
    worst = 0.0
    for name, p in params.items():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        n = flat.size
        coords = rng.choice(n, size=min(sample, n), replace=False)

        def central(i, step):
            orig = flat[i]
            flat[i] = orig + step
            fp = build_loss().item()
            flat[i] = orig - step
            fm = build_loss().item()
            flat[i] = orig
            return (fp - fm) / (2 * step)

        for i in coords:
            num = central(i, h)
            err = abs(num - gflat[i]) / max(abs(num), abs(gflat[i]), 1.0)
            if err > tol:
                # retry with a smaller step in case the interval straddled a
                # relu/maxpool kink; a correct gradient converges
                num = central(i, h / 100.0)
                err = abs(num - gflat[i]) / max(abs(num), abs(gflat[i]), 1.0)
            worst = max(worst, err)
    for p in params.values():
        p.grad = None
    return worst


def _layer_components(seed: int, tol: float):
    rng = np.random.default_rng(seed)
    f64 = np.float64
    out = []

    def fd(name, f, x):
        rep = finite_diff_check(f, Tensor(x), tol=tol)
        out.append(ComponentReport(name, rep.max_rel_error, rep.passed))

    # input gradients through each primitive
    conv = Conv3d(2, 3, (2, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1),
                  rng=rng, dtype=f64)
    x5 = rng.standard_normal((2, 2, 3, 5, 5))
    fd("conv3d/input", lambda t: (conv(t) ** 2.0).sum(), x5)

    fd("maxpool3d/input",
       lambda t: (max_pool3d(t, (2, 2, 2), (2, 2, 2)) ** 2.0).sum(),
       rng.standard_normal((1, 2, 4, 4, 4)))
    fd("avgpool3d/input",
       lambda t: (avg_pool3d(t, (1, 3, 3), (1, 1, 1), (0, 1, 1)) ** 2.0).sum(),
       rng.standard_normal((1, 2, 2, 4, 4)))

    bn = BatchNorm3d(3, dtype=f64)
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
    bn.beta.data[:] = rng.standard_normal(3)
    fd("batchnorm3d/input", lambda t: (bn(t, training=True) ** 3.0).sum(),
       rng.standard_normal((2, 3, 2, 3, 3)))

    ln = LayerNorm(6, dtype=f64)
    ln.gamma.data[:] = rng.uniform(0.5, 1.5, 6)
    fd("layernorm/input", lambda t: (ln(t) ** 3.0).sum(),
       rng.standard_normal((2, 4, 6)))

    lin = Linear(5, 4, rng=rng, dtype=f64)
    fd("linear/input", lambda t: (lin(t) ** 2.0).sum(),
       rng.standard_normal((3, 5)))

    labels = rng.integers(0, 4, size=3)
    fd("cross_entropy/logits", lambda t: cross_entropy(t, labels),
       rng.standard_normal((3, 4)))
    targets = rng.integers(0, 2, size=(3, 4)).astype(np.float64)
    fd("sigmoid_bce/logits", lambda t: sigmoid_bce(t, targets),
       rng.standard_normal((3, 4)))

    mha = MultiHeadAttention(8, 2, rng=rng, dtype=f64)
    fd("multi_head_attention/input",
       lambda t: (mha(t, t, t) ** 2.0).sum(), rng.standard_normal((2, 5, 8)))

    sc = SpatialCompressor(2, spatial=4, rng=rng, dtype=f64)
    fd("spatial_compressor/input",
       lambda t: (sc(t, training=True) ** 2.0).sum(),
       rng.standard_normal((2, 2, 3, 4, 4)))

    # parameter gradients of the parametric layers
    xin = Tensor(rng.standard_normal((2, 2, 3, 5, 5)))
    err = _check_params(lambda: (conv(xin) ** 2.0).sum(),
                        conv.named_parameters("conv"), tol=tol, rng=rng)
    out.append(ComponentReport("conv3d/params", err, err < tol))

    xb = Tensor(rng.standard_normal((2, 3, 2, 3, 3)))
    err = _check_params(lambda: (bn(xb, training=True) ** 3.0).sum(),
                        bn.named_parameters("bn"), tol=tol, rng=rng)
    out.append(ComponentReport("batchnorm3d/params", err, err < tol))

    xl = Tensor(rng.standard_normal((2, 4, 6)))
    err = _check_params(lambda: (ln(xl) ** 3.0).sum(),
                        ln.named_parameters("ln"), tol=tol, rng=rng)
    out.append(ComponentReport("layernorm/params", err, err < tol))

    xm = Tensor(rng.standard_normal((2, 5, 8)))
    err = _check_params(lambda: (mha(xm, xm, xm) ** 2.0).sum(),
                        mha.named_parameters("mha"), tol=tol, rng=rng)
    out.append(ComponentReport("multi_head_attention/params", err, err < tol))

    for variant, shape in (("1d", (1, 8, 5, 1, 1)), ("2d", (1, 8, 5, 1, 1)),
                           ("3d", (1, 8, 2, 2, 2))):
        spec = KftBlockSpec(variant=variant, embed_dim=8, heads=2, num_attentions=2)
        blk = KftBlock(spec, rng=rng, dtype=f64)
        xk = rng.standard_normal(shape)
        fd(f"kft_block_{variant}/input", lambda t: (blk(t) ** 2.0).sum(), xk)
        err = _check_params(lambda: (blk(Tensor(xk)) ** 2.0).sum(),
                            blk.named_parameters("blk"), tol=tol, rng=rng)
        out.append(ComponentReport(f"kft_block_{variant}/params", err, err < tol))

    return out


def micro_config(variant: str, num_classes: int = 3) -> ModelConfig:
    """Smallest legal configuration used for end-to-end gradient checks."""
    return ModelConfig(num_classes=num_classes, frames=4, size=32, variant=variant,
                       width=0.125, kft_heads=[2, 4, 4], kft_attentions=[1, 1, 1])


def _model_component(variant: str, seed: int, tol: float,
                     sample: int = 2) -> ComponentReport:
    rng = np.random.default_rng(seed)
    cfg = micro_config(variant)
    model = KftModel(cfg, seed=seed, dtype=np.float64)
    x = Tensor(rng.standard_normal((2, 3, cfg.frames, cfg.size, cfg.size)))
    labels = rng.integers(0, cfg.num_classes, size=2)

    def loss():
        return cross_entropy(model.forward(x, training=True), labels)

    err = _check_params(loss, model.named_parameters(), tol=tol, sample=sample,
                        rng=rng)
    return ComponentReport(f"model_{variant}/end_to_end", err, err < tol)


def gradcheck_report(seed: int = 0, tol: float = 1e-4,
                     variants=("1d", "2d", "3d")) -> list[ComponentReport]:
    """Full verification sweep; one report per component."""
    reports = _layer_components(seed, tol)
    for variant in variants:
        reports.append(_model_component(variant, seed, tol))
    return reports
