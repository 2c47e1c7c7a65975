"""Finite-difference checks of every differentiable stage, up to the full
texture -> render -> crop -> embed -> head -> loss pipeline."""

from dataclasses import asdict, dataclass

import numpy as np

from stalab import autodiff as ad
from stalab.attack import AttackConfig, EotDistribution, sample_views, sta_loss_rpn, sta_loss_symmetric
from stalab.autodiff import Tape, Tensor
from stalab.renderer import default_object, render, target_box
from stalab.siamese import VictimConfig, build_victim
from stalab.tracker import crop_and_scale

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    coords: int
    max_rel_error: float
    passed: bool


def _check(name, f, x, coords, h=1e-5, tol=TOLERANCE, floor=1e-8):
    """Compare the tape gradient of scalar ``f(Tensor)`` with central differences."""
    t = Tensor(x, requires_grad=True)
    with Tape():
        g = ad.backward(f(t))[t].reshape(-1)
    num = ad.numerical_grad(lambda a: f(Tensor(a)).item(), x, coords, h)
    err = ad.relative_error(g[list(coords)], num, floor)
    worst = float(err.max()) if err.size else 0.0
    return CheckResult(name, len(coords), worst, worst <= tol)


def _coords(rng, size, n):
    return [int(i) for i in rng.choice(size, size=min(n, size), replace=False)]


def check_ops(seed=0):
    rng = np.random.default_rng([seed, 7])
    out = []
    w = rng.standard_normal((3, 2, 3, 3))
    x = rng.standard_normal((2, 7, 7))
    out.append(_check("conv2d/input", lambda t: ad.sum_(ad.square(ad.conv2d(t, Tensor._wrap(w), 2))), x,
                      range(x.size)))
    out.append(_check("conv2d/kernel", lambda t: ad.sum_(ad.square(ad.conv2d(Tensor._wrap(x), t, 1))), w,
                      range(w.size)))
    z = rng.standard_normal((2, 3, 3))
    out.append(_check("cross_correlate", lambda t: ad.sum_(ad.square(ad.cross_correlate(t, Tensor._wrap(x)))),
                      z, range(z.size)))
    img = rng.uniform(size=(3, 6, 8))
    ys = rng.uniform(-2, 7, size=(5, 5))
    xs = rng.uniform(-2, 9, size=(5, 5))

    def sample(t):
        fill = ad.mean(t, axis=(1, 2))
        return ad.sum_(ad.square(ad.bilinear_sample(t, ys, xs, fill=fill)))
    out.append(_check("bilinear_sample", sample, img, range(img.size)))
    logits = rng.standard_normal((6, 2))
    labels = rng.integers(0, 2, size=6)
    out.append(_check("softmax_cross_entropy", lambda t: ad.softmax_cross_entropy(t, labels), logits,
                      range(logits.size)))
    return out


def _perturbed_texture(obj, rng):
    # keep away from the L2 kink at zero and from the [0, 1] clamp of the lit texels
    tex = obj.texture.chw()
    return np.clip(tex + rng.uniform(-0.05, 0.05, size=tex.shape), 0.02, 0.75)


def check_pipeline(seed=0, n_coords=100, samples=2):
    """Full-pipeline texel gradients for both losses and for crop_and_scale."""
    rng = np.random.default_rng([seed, 8])
    obj = default_object()
    views = sample_views(EotDistribution(gain=(0.9, 1.1)), samples, rng)
    original = obj.texture.chw()
    x0 = _perturbed_texture(obj, rng)
    out = []
    sym = build_victim(VictimConfig(head="symmetric", seed=seed))
    rpn = build_victim(VictimConfig(head="rpn", seed=seed))
    cfg = AttackConfig(canvas=(96, 96))
    weights = rng.standard_normal((3, sym.crop_spec.search_size, sym.crop_spec.search_size))

    def crop(t):
        img = render(obj, views[0], cfg.canvas, texture=t)
        x = crop_and_scale(img, target_box(obj, views[0], cfg.canvas), "search", sym.crop_spec)
        return ad.sum_(ad.mul(x, Tensor._wrap(weights)))
    out.append(_check("render+crop", crop, x0, _coords(rng, x0.size, n_coords)))
    out.append(_check("pipeline/symmetric",
                      lambda t: sta_loss_symmetric(sym, obj, t, views, 1e-2, original, cfg),
                      x0, _coords(rng, x0.size, n_coords)))
    out.append(_check("pipeline/rpn",
                      lambda t: sta_loss_rpn(rpn, obj, t, views, 1e-2, original, cfg),
                      x0, _coords(rng, x0.size, n_coords)))
    return out


def run_all(seed=0, n_coords=100):
    return check_ops(seed) + check_pipeline(seed, n_coords)


def report(results):
    return {"tolerance": TOLERANCE, "passed": all(r.passed for r in results),
            "checks": [asdict(r) for r in results]}
