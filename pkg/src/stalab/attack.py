"""Expectation-over-transformation PGD on the object texture.

One EOT sample renders the textured object under a random view, crops the
same image in exemplar and search roles and scores the pair with the victim.
The symmetric loss is the centre-aligned self-similarity; the RPN loss is
the cross entropy of every anchor against the background label.  Both add
``lam * ||texture - original||_2``.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from stalab import autodiff as ad
from stalab.autodiff import Tape, Tensor
from stalab.renderer import TextureMap, ViewParams, render, target_box
from stalab.siamese import anchor_logits, fg_probability
from stalab.tracker import crop_and_scale


@dataclass(frozen=True)
class EotDistribution:
    """Uniform ranges ``(low, high)`` for every view parameter."""

    scale: tuple = (0.8, 1.2)
    rotation: tuple = (-0.15, 0.15)
    shear: tuple = (-0.2, 0.2)
    tx: tuple = (-2.0, 2.0)
    ty: tuple = (-2.0, 2.0)
    gain: tuple = (0.7, 1.3)
    background_low: tuple = (0.0, 0.0, 0.0)
    background_high: tuple = (1.0, 1.0, 1.0)
    occluder_phase: tuple = (0.0, 1.0)

    def __post_init__(self):
        for name in ("scale", "rotation", "shear", "tx", "ty", "gain", "occluder_phase"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"range {name} has low > high")
        if self.scale[0] <= 0 or self.gain[0] <= 0:
            raise ValueError("scale and gain ranges must be strictly positive")
        if not 0.0 <= self.occluder_phase[0] <= self.occluder_phase[1] <= 1.0:
            raise ValueError("occluder phase range must lie in [0, 1]")
        lo, hi = np.asarray(self.background_low), np.asarray(self.background_high)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(lo > hi) or lo.min() < 0 or hi.max() > 1:
            raise ValueError("background ranges must be RGB triples within [0, 1] with low <= high")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown EOT keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) for k, v in d.items()})


def sample_views(dist, K, rng):
    """Draw ``K`` independent views; ``rng`` is a numpy Generator."""
    if K < 1:
        raise ValueError("need at least one sample")
    views = []
    for _ in range(K):
        u = lambda r: float(rng.uniform(r[0], r[1])) if r[1] > r[0] else float(r[0])  # noqa: E731
        scale = u(dist.scale)
        rotation = u(dist.rotation)
        shear = u(dist.shear)
        tx = u(dist.tx)
        ty = u(dist.ty)
        gain = u(dist.gain)
        bg = tuple(u((lo, hi)) for lo, hi in zip(dist.background_low, dist.background_high))
        phase = u(dist.occluder_phase)
        views.append(ViewParams(scale, rotation, shear, tx, ty, gain, bg, phase))
    return views


@dataclass(frozen=True)
class AttackConfig:
    lam: float = 1e-4
    step: float = 0.02
    decay: float = 0.5
    iterations: int = 150
    samples: int = 8
    seed: int = 0
    head: str = "symmetric"
    independent_views: bool = False
    objective: str = "center"
    grad_norm: str = "max"
    canvas: tuple = (128, 128)
    occluder_width: float = 0.0
    rounds: int = 2

    def __post_init__(self):
        if self.iterations < 1 or self.samples < 1:
            raise ValueError("iterations and samples must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.objective not in ("center", "max"):
            raise ValueError("objective must be 'center' or 'max'")
        if self.grad_norm not in ("none", "max"):
            raise ValueError("grad_norm must be 'none' or 'max'")
        if self.head not in ("symmetric", "rpn"):
            raise ValueError("head must be 'symmetric' or 'rpn'")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown attack keys: {sorted(unknown)}")
        d = dict(d)
        if "canvas" in d:
            d["canvas"] = tuple(d["canvas"])
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class AttackResult:
    texture: TextureMap
    loss_trace: list
    l2: float
    score_trace: list = field(default_factory=list)


# ---------------------------------------------------------------- losses

def _crops(obj, tex, view, config, spec, second_view=None):
    occ = None
    if config.occluder_width > 0:
        occ = (config.occluder_width, (0.25, 0.22, 0.20))
    img = render(obj, view, config.canvas, texture=tex, occluder=occ)
    box = target_box(obj, view, config.canvas)
    z = crop_and_scale(img, box, "exemplar", spec)
    if second_view is not None:
        img2 = render(obj, second_view, config.canvas, texture=tex, occluder=occ)
        x = crop_and_scale(img2, target_box(obj, second_view, config.canvas), "search", spec)
    else:
        x = crop_and_scale(img, box, "search", spec)
    return z, x


def sample_score(victim, obj, tex, view, config, second_view=None):
    """Per-sample adversarial objective (a scalar Tensor)."""
    z, x = _crops(obj, tex, view, config, victim.crop_spec, second_view)
    if victim.head_kind == "rpn":
        logits = victim.rpn_cls_logits(z, x)
        table = anchor_logits(logits)
        return ad.softmax_cross_entropy(table, np.zeros(table.shape[0], dtype=np.int64))
    smap = victim.symmetric_score(z, x)
    if config.objective == "max":
        return ad.max_all(smap)
    c = (smap.shape[0] - 1) // 2
    return ad.reshape(smap[c, c], ())


def l2_term(tex, original, lam):
    return ad.scale(ad.l2_norm(ad.sub(tex, Tensor._wrap(original))), lam)


def sta_loss(victim, obj, tex, views, lam, original, config, second_views=None):
    """Mean EOT objective plus the L2 perceptibility term, on the active tape."""
    terms = []
    for i, view in enumerate(views):
        sv = second_views[i] if second_views is not None else None
        terms.append(sample_score(victim, obj, tex, view, config, sv))
    total = ad.scale(ad.stack_sum(terms), 1.0 / len(terms))
    return ad.add(total, l2_term(tex, original, lam))


def sta_loss_symmetric(victim, obj, tex, views, lam, original, config=None):
    config = replace(config or AttackConfig(), head="symmetric")
    if victim.head_kind != "symmetric":
        raise ValueError("sta_loss_symmetric needs a symmetric victim")
    return sta_loss(victim, obj, tex, views, lam, original, config)


def sta_loss_rpn(victim, obj, tex, views, lam, original, config=None):
    config = replace(config or AttackConfig(), head="rpn")
    if victim.head_kind != "rpn":
        raise ValueError("sta_loss_rpn needs an RPN victim")
    return sta_loss(victim, obj, tex, views, lam, original, config)


# ---------------------------------------------------------------- optimisation

class GradientError(FloatingPointError):
    pass


def pgd_step(texture, gradient, step):
    """``clip(texture - step * gradient, 0, 1)``."""
    texture = np.asarray(texture, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    if texture.shape != gradient.shape:
        raise ValueError(f"gradient shape {gradient.shape} does not match texture {texture.shape}")
    if not np.all(np.isfinite(gradient)):
        bad = int(np.count_nonzero(~np.isfinite(gradient)))
        raise GradientError(f"non-finite gradient ({bad} entries); aborting PGD")
    return np.clip(texture - step * gradient, 0.0, 1.0)


def loss_and_grad(victim, obj, tex_chw, views, lam, original_chw, config, second_views=None):
    """EOT loss value and texture gradient; one tape per sample, summed in order."""
    K = len(views)
    grad = np.zeros_like(tex_chw)
    value = 0.0
    for i, view in enumerate(views):
        tex = Tensor(tex_chw, requires_grad=True)
        with Tape():
            sv = second_views[i] if second_views is not None else None
            loss = ad.scale(sample_score(victim, obj, tex, view, config, sv), 1.0 / K)
            g = ad.backward(loss)
        value += loss.item()
        grad += g.get(tex, 0.0)
    tex = Tensor(tex_chw, requires_grad=True)
    with Tape():
        reg = l2_term(tex, original_chw, lam)
        g = ad.backward(reg) if lam > 0 else {}
    value += reg.item()
    grad += g.get(tex, 0.0)
    return value, grad


def _normalise(grad, mode):
    if mode == "max":
        m = np.abs(grad).max()
        return grad / m if m > 0 else grad
    return grad


def run_sta(victim, obj, config, init_texture=None, original=None, stream=(), step=None, dist=None,
            callback=None):
    """Optimise the texture of ``obj`` against ``victim``.

    ``stream`` extends the seed so that callers (``run_combined``) get
    independent but reproducible view sequences.
    """
    dist = dist or EotDistribution()
    step = config.step if step is None else step
    tex = (init_texture or obj.texture).chw()
    orig = (original or obj.texture).chw()
    rng = np.random.default_rng([config.seed, *stream])
    trace = []
    for it in range(config.iterations):
        views = sample_views(dist, config.samples, rng)
        second = sample_views(dist, config.samples, rng) if config.independent_views else None
        value, grad = loss_and_grad(victim, obj, tex, views, config.lam, orig, config, second)
        if not math.isfinite(value):
            raise GradientError(f"non-finite loss at iteration {it}")
        trace.append(value)
        tex = pgd_step(tex, _normalise(grad, config.grad_norm), step)
        if callback is not None:
            callback(it, value)
    texture = TextureMap.from_chw(tex)
    return AttackResult(texture, trace, float(np.linalg.norm(tex - orig)))


def run_combined(victims, obj, config, rounds=None, dist=None, callback=None):
    """Cycle STA over ``victims`` with a step multiplied by ``config.decay`` per round.

    Order matters: the last victim of each round gets the final word on the
    texture, so put the hardest victim last.
    """
    if len(victims) < 1:
        raise ValueError("need at least one victim")
    rounds = config.rounds if rounds is None else rounds
    tex = obj.texture
    trace = []
    for r in range(rounds):
        step = config.step * config.decay ** r
        for i, victim in enumerate(victims):
            cfg = replace(config, head=victim.head_kind)
            res = run_sta(victim, obj, cfg, init_texture=tex, original=obj.texture,
                          stream=(r, i), step=step, dist=dist, callback=callback)
            tex = res.texture
            trace.extend(res.loss_trace)
    l2 = float(np.linalg.norm(tex.data - obj.texture.data))
    return AttackResult(tex, trace, l2)


# ---------------------------------------------------------------- measurement

def target_scores(victim, obj, texture, views, config=None):
    """Per-view target score: centre self-similarity (symmetric) or the best
    anchor foreground probability at the centre cell (RPN)."""
    config = config or AttackConfig(head=victim.head_kind)
    tex = Tensor._wrap(texture.chw())
    out = []
    for view in views:
        z, x = _crops(obj, tex, view, config, victim.crop_spec)
        if victim.head_kind == "rpn":
            p = fg_probability(victim.rpn_cls_logits(z, x))
            c = (p.shape[1] - 1) // 2
            out.append(float(p[:, c, c].max()))
        else:
            m = victim.symmetric_score(z, x).data
            c = (m.shape[0] - 1) // 2
            out.append(float(m[c, c]))
    return np.array(out)


def evaluation_views(n=32, seed=12345, dist=None):
    return sample_views(dist or EotDistribution(), n, np.random.default_rng(seed))


# ---------------------------------------------------------------- files

def write_loss_csv(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])


def save_config(path, config):
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2)


def load_config(path):
    with open(path) as fh:
        return AttackConfig.from_dict(json.load(fh))
