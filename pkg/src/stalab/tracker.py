"""Siamese tracking loop: crop/scale, cosine-window penalty, localisation."""

import csv
import math
from dataclasses import dataclass

import numpy as np

from stalab import autodiff as ad
from stalab.autodiff import Tensor


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box given by centre and size, in image pixels."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box needs positive width and height, got {self.w} x {self.h}")

    @classmethod
    def from_corners(cls, x0, y0, x1, y1):
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def corners(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    def moved(self, cx, cy):
        return BBox(cx, cy, self.w, self.h)

    def as_tuple(self):
        return (self.cx, self.cy, self.w, self.h)


@dataclass(frozen=True)
class CropSpec:
    """SiamFC-style cropping rule.

    The context margin is ``p = (w + h) / 4`` and the scale factor ``s``
    satisfies ``s(w + 2p) * s(h + 2p) = A`` where ``A = exemplar_size ** 2``.
    The exemplar crop is the square of side ``sqrt((w + 2p)(h + 2p))``; the
    search crop is ``search_size / exemplar_size`` times larger, so both
    roles share one scale.
    """

    exemplar_size: int = 32
    search_size: int = 64
    context: float = 0.25
    antialias: bool = True

    @property
    def area(self):
        return float(self.exemplar_size) ** 2

    @property
    def ratio(self):
        return self.search_size / self.exemplar_size

    def margin(self, w, h):
        return self.context * (w + h)

    def scale(self, w, h):
        p = self.margin(w, h)
        return math.sqrt(self.area / ((w + 2 * p) * (h + 2 * p)))

    def supersampling(self, w, h):
        """Samples per axis averaged into one crop pixel when shrinking."""
        if not self.antialias:
            return 1
        return max(1, math.ceil(1.0 / self.scale(w, h) - 1e-9))

    def out_size(self, role):
        if role == "exemplar":
            return self.exemplar_size
        if role == "search":
            return self.search_size
        raise ValueError(f"unknown crop role {role!r}")


def crop_grid(box, role, spec, sub=(0.0, 0.0)):
    """Image-space sample coordinates (ys, xs) of every crop pixel.

    ``sub`` shifts the grid by a fraction of one crop pixel.
    """
    n = spec.out_size(role)
    s = spec.scale(box.w, box.h)
    offs = (np.arange(n) - (n - 1) / 2.0) / s
    ys = np.repeat((box.cy + offs + sub[0] / s)[:, None], n, axis=1)
    xs = np.repeat((box.cx + offs + sub[1] / s)[None, :], n, axis=0)
    return ys, xs


def crop_and_scale(image, box, role, spec):
    """Crop around ``box`` and resample to the network input size.

    ``image`` is a 3 x H x W Tensor (or array).  Pixels outside the image take
    the image's mean colour; the result stays differentiable w.r.t. the image.
    When shrinking, each crop pixel averages an ``n x n`` grid of bilinear
    samples over its footprint (area resampling) to avoid aliasing.
    """
    if not isinstance(box, BBox):
        box = BBox(*box)
    image = ad.as_tensor(image)
    fill = ad.mean(image, axis=(1, 2))
    n = spec.supersampling(box.w, box.h)
    if n == 1:
        ys, xs = crop_grid(box, role, spec)
        return ad.bilinear_sample(image, ys, xs, fill=fill)
    subs = (np.arange(n) + 0.5) / n - 0.5
    grids = [crop_grid(box, role, spec, (a, b)) for a in subs for b in subs]
    ys = np.stack([g[0] for g in grids])
    xs = np.stack([g[1] for g in grids])
    return ad.mean(ad.bilinear_sample(image, ys, xs, fill=fill), axis=1)


# ---------------------------------------------------------------- penalty

def hann(M):
    d = np.arange(M) - (M - 1) / 2.0
    if M == 1:
        return np.ones(1)
    return 0.5 + 0.5 * np.cos(2 * np.pi * d / (M - 1))


@dataclass(frozen=True)
class CosineWindow:
    size: int
    weight: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError(f"penalty weight must lie in [0, 1], got {self.weight}")
        if self.size < 1:
            raise ValueError("window size must be positive")

    def values(self):
        h = hann(self.size)
        return np.outer(h, h)


def apply_penalty(score_map, window):
    """``(1 - c) * s + c * window`` per cell, window centred on the map centre."""
    s = np.asarray(score_map.data if isinstance(score_map, Tensor) else score_map, dtype=np.float64)
    if s.shape != (window.size, window.size):
        raise ValueError(f"score map {s.shape} does not match window size {window.size}")
    c = window.weight
    return (1.0 - c) * s + c * window.values()


def penalized_score(s, d, c, M):
    """Single-position penalised score with the 1D window at distance ``d``."""
    return (1.0 - c) * s + c * (0.5 + 0.5 * math.cos(2 * math.pi * d / (M - 1)))


def mislead_threshold(d, d_prime, c, M):
    """Score gap below which a disturbing position at ``d_prime`` beats the target at ``d``."""
    if not 0.0 <= c < 1.0:
        raise ValueError(f"penalty weight must lie in [0, 1), got {c}")
    if M < 2:
        raise ValueError("score map size must be at least 2")
    k = 2 * math.pi / (M - 1)
    return 0.5 * c / (1.0 - c) * (math.cos(k * d_prime) - math.cos(k * d))


def check_mislead(s, s_prime, d, d_prime, c, M):
    """True when the disturbing position outranks the target after the penalty."""
    return (s - s_prime) < mislead_threshold(d, d_prime, c, M)


def argmax_first(a):
    """Row-major first index of the maximum."""
    i = int(np.argmax(a))
    return np.unravel_index(i, a.shape)


# ---------------------------------------------------------------- tracking

@dataclass
class TrackerState:
    box: BBox
    template: object
    window: CosineWindow
    head_kind: str
    frame: int = 0


@dataclass(frozen=True)
class TrackStep:
    box: BBox
    raw_max: float
    penalized_max: float


class SiameseTracker:
    """Fixed-template tracker around a victim network.

    ``victim`` supplies ``crop_spec``, ``stride`` (effective feature stride),
    ``head_kind``, ``template(z_img)`` and ``response_map(template, x_img)``
    (an M x M numpy array: similarity for the symmetric head, per-cell max
    foreground probability for the RPN head).
    """

    def __init__(self, victim, penalty=0.3):
        self.victim = victim
        self.penalty = penalty

    def init(self, frame, box):
        spec = self.victim.crop_spec
        z = crop_and_scale(frame, box, "exemplar", spec)
        template = self.victim.template(z)
        M = self.victim.score_size
        return TrackerState(box, template, CosineWindow(M, self.penalty), self.victim.head_kind)

    def step(self, state, frame):
        spec = self.victim.crop_spec
        x = crop_and_scale(frame, state.box, "search", spec)
        raw = self.victim.response_map(state.template, x)
        pen = apply_penalty(raw, state.window)
        r, c = argmax_first(pen)
        M = state.window.size
        centre = (M - 1) / 2.0
        s = spec.scale(state.box.w, state.box.h)
        dy = (r - centre) * self.victim.stride / s
        dx = (c - centre) * self.victim.stride / s
        box = state.box.moved(state.box.cx + dx, state.box.cy + dy)
        new = TrackerState(box, state.template, state.window, state.head_kind, state.frame + 1)
        return new, float(raw.max()), float(pen.max())

    def track(self, frames, init_box):
        if len(frames) == 0:
            raise ValueError("cannot track an empty video")
        if not isinstance(init_box, BBox):
            init_box = BBox(*init_box)
        state = self.init(frames[0], init_box)
        first = crop_and_scale(frames[0], init_box, "search", self.victim.crop_spec)
        raw0 = self.victim.response_map(state.template, first)
        pen0 = apply_penalty(raw0, state.window)
        out = [TrackStep(init_box, float(raw0.max()), float(pen0.max()))]
        for frame in frames[1:]:
            state, raw_max, pen_max = self.step(state, frame)
            out.append(TrackStep(state.box, raw_max, pen_max))
        return out


def track(frames, init_box, victim, penalty=0.3):
    return SiameseTracker(victim, penalty).track(frames, init_box)


def write_track_csv(path, steps):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "cx", "cy", "w", "h", "raw_max", "penalized_max"])
        for i, st in enumerate(steps):
            b = st.box
            w.writerow([i] + [repr(float(v)) for v in (b.cx, b.cy, b.w, b.h, st.raw_max, st.penalized_max)])


def read_track_csv(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(TrackStep(BBox(float(row["cx"]), float(row["cy"]), float(row["w"]), float(row["h"])),
                                 float(row["raw_max"]), float(row["penalized_max"])))
    return out
