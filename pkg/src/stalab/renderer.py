"""Differentiable planar billboard renderer and the occlusion video scenes.

Pixel centres sit at integer coordinates.  A view maps object space to the
image by ``x = origin + t + A q`` with ``A = scale * Rot(rotation) * Shear``,
``Shear = [[1, shear], [0, 1]]`` and ``origin`` the canvas centre.
"""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

from stalab import autodiff as ad
from stalab.autodiff import Tensor
from stalab.tracker import BBox


# ---------------------------------------------------------------- textures

class TextureMap:
    """H x W x 3 texture with values in [0, 1]."""

    def __init__(self, data):
        data = np.array(data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValueError(f"texture must be H x W x 3, got {data.shape}")
        if not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("texture values must lie in [0, 1]")
        self.data = data

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    def chw(self):
        return np.ascontiguousarray(self.data.transpose(2, 0, 1))

    @classmethod
    def from_chw(cls, arr):
        return cls(np.asarray(arr).transpose(1, 2, 0))

    def quantized(self):
        return TextureMap(np.round(self.data * 255.0) / 255.0)

    def save_png(self, path):
        save_png(path, self.data)

    @classmethod
    def load_png(cls, path):
        return cls(load_png(path))

    def save_sidecar(self, path):
        np.save(path, self.data)

    @classmethod
    def load_sidecar(cls, path):
        return cls(np.load(path))


def save_png(path, hwc):
    arr = np.round(np.clip(np.asarray(hwc, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def car_texture(height=10, width=16):
    """Procedural high-contrast 'car' livery: body, stripe, windows, wheels."""
    t = np.zeros((height, width, 3))
    yy, xx = np.mgrid[0:height, 0:width]
    v = (yy + 0.5) / height
    u = (xx + 0.5) / width
    t[...] = (0.85, 0.12, 0.10)
    t[(v > 0.12) & (v < 0.42) & (u > 0.22) & (u < 0.78)] = (0.95, 0.95, 0.35)
    for a, b in ((0.27, 0.46), (0.54, 0.73)):
        t[(v > 0.17) & (v < 0.40) & (u > a) & (u < b)] = (0.10, 0.25, 0.55)
    t[(v > 0.52) & (v < 0.62)] = (1.0, 1.0, 1.0)
    t[(v > 0.55) & (v < 0.59) & ((u * 13).astype(int) % 2 == 0)] = (0.05, 0.05, 0.05)
    for cu in (0.2, 0.8):
        r2 = ((u - cu) * width) ** 2 + ((v - 0.86) * height) ** 2
        t[r2 < (0.16 * height) ** 2] = (0.05, 0.05, 0.05)
        t[r2 < (0.07 * height) ** 2] = (0.75, 0.75, 0.75)
    return TextureMap(t)


def noise_texture(height, width, seed):
    """I.i.d. uniform texels."""
    rng = np.random.default_rng(seed)
    return TextureMap(rng.uniform(0.0, 1.0, size=(height, width, 3)))


# ---------------------------------------------------------------- geometry

class PlanarObject:
    """Textured parallelogram; corners in object space, ordered c0, c1, c2, c3.

    Texture column index runs along c0 -> c1, row index along c0 -> c3.
    """

    def __init__(self, corners, texture):
        c = np.asarray(corners, dtype=np.float64)
        if c.shape != (4, 2):
            raise ValueError("a quad needs 4 corners")
        e1 = c[1] - c[0]
        e2 = c[3] - c[0]
        if not np.allclose(c[2], c[0] + e1 + e2, atol=1e-9):
            raise ValueError("quad must be a parallelogram (c2 = c1 + c3 - c0)")
        area = abs(e1[0] * e2[1] - e1[1] * e2[0])
        if area <= 1e-12:
            raise ValueError("degenerate quad (zero area)")
        self.corners = c
        self.texture = texture

    @classmethod
    def rectangle(cls, width, height, texture):
        hw, hh = width / 2.0, height / 2.0
        return cls([(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)], texture)

    @property
    def size(self):
        return (float(np.linalg.norm(self.corners[1] - self.corners[0])),
                float(np.linalg.norm(self.corners[3] - self.corners[0])))

    def with_texture(self, texture):
        return PlanarObject(self.corners, texture)


def default_object(texture=None, size=(32.0, 20.0)):
    """The tracked target: a ``size`` px rectangle carrying ``texture``
    (by default the car livery, two object pixels per texel)."""
    return PlanarObject.rectangle(size[0], size[1], texture if texture is not None else car_texture())


@dataclass(frozen=True)
class ViewParams:
    scale: float = 1.0
    rotation: float = 0.0
    shear: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    gain: float = 1.0
    background: tuple = (0.5, 0.5, 0.5)
    occluder_phase: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not self.gain >= 0:
            raise ValueError(f"lighting gain must be non-negative, got {self.gain}")
        if not 0.0 <= self.occluder_phase <= 1.0:
            raise ValueError("occluder phase must lie in [0, 1]")

    def matrix(self):
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        rot = np.array([[c, -s], [s, c]])
        shear = np.array([[1.0, self.shear], [0.0, 1.0]])
        return self.scale * rot @ shear


def _origin(canvas, view):
    H, W = canvas
    return np.array([(W - 1) / 2.0 + view.tx, (H - 1) / 2.0 + view.ty])


def image_corners(obj, view, canvas):
    """Object corners mapped to image (x, y) coordinates."""
    return obj.corners @ view.matrix().T + _origin(canvas, view)


def target_box(obj, view, canvas):
    """Axis-aligned extent of the rendered quad."""
    pts = image_corners(obj, view, canvas)
    return BBox.from_corners(pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max())


def _texture_coords(obj, view, canvas):
    """Per-pixel (mask, v, u) texture coordinates of the quad footprint."""
    H, W = canvas
    A = view.matrix()
    inv = np.linalg.inv(A)
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    rel = np.stack([xs.ravel(), ys.ravel()], axis=1) - _origin(canvas, view)
    q = rel @ inv.T - obj.corners[0]
    e1 = obj.corners[1] - obj.corners[0]
    e2 = obj.corners[3] - obj.corners[0]
    frame = np.linalg.inv(np.stack([e1, e2], axis=1))
    ab = q @ frame.T
    a = ab[:, 0].reshape(H, W)
    b = ab[:, 1].reshape(H, W)
    eps = 1e-9
    mask = (a >= -eps) & (a <= 1 + eps) & (b >= -eps) & (b <= 1 + eps)
    th, tw = obj.texture.height, obj.texture.width
    u = a[mask] * tw - 0.5
    v = b[mask] * th - 0.5
    return mask, v, u


def target_mask(obj, view, canvas):
    return _texture_coords(obj, view, canvas)[0]


def solid_background(canvas, color):
    H, W = canvas
    return np.broadcast_to(np.asarray(color, dtype=np.float64)[:, None, None], (3, H, W)).copy()


def render(obj, view, canvas, texture=None, background=None, occluder=None):
    """Render ``obj`` under ``view`` onto a canvas of extents (H, W).

    ``texture`` optionally overrides the object's texture with a 3 x th x tw
    Tensor (the differentiable path).  ``background`` is a 3 x H x W array;
    by default the view's solid colour.  ``occluder`` is an optional
    ``(width, color)`` bar placed across the target at ``view.occluder_phase``.
    Returns a 3 x H x W Tensor in [0, 1].
    """
    H, W = canvas
    if texture is None:
        texture = Tensor._wrap(obj.texture.chw())
    bg = solid_background(canvas, view.background) if background is None else np.asarray(background)
    mask, v, u = _texture_coords(obj, view, canvas)
    samples = ad.bilinear_sample(texture, v, u)
    lit = ad.clamp(ad.scale(samples, view.gain), 0.0, 1.0)
    img = ad.paste(lit, mask, Tensor._wrap(bg))
    if occluder is not None:
        width, color = occluder
        box = target_box(obj, view, canvas)
        x0 = box.cx - box.w / 2 + view.occluder_phase * box.w - width / 2.0
        img = draw_bars(img, [Occluder(x0, width, tuple(color))])
    return img


# ---------------------------------------------------------------- scenes

@dataclass(frozen=True)
class Occluder:
    """Opaque full-height vertical bar covering pixel columns in [x, x + width)."""

    x: float
    width: float
    color: tuple = (0.35, 0.33, 0.30)

    def columns(self, W):
        xs = np.arange(W)
        return (xs >= self.x) & (xs < self.x + self.width)


def draw_bars(img, occluders):
    H, W = img.shape[1:]
    cols = np.zeros(W, dtype=bool)
    paint = np.zeros((3, H, W))
    for occ in occluders:
        m = occ.columns(W)
        paint[:, :, m] = np.asarray(occ.color, dtype=np.float64)[:, None, None]
        cols |= m
    if not cols.any():
        return img
    mask = np.broadcast_to(cols[None, None, :], img.shape)
    return ad.where(mask, Tensor._wrap(paint), img)


@dataclass(frozen=True)
class Keyframe:
    frame: int
    cx: float
    cy: float
    scale: float = 1.0


@dataclass
class Scene:
    height: int
    width: int
    n_frames: int
    keyframes: list
    occluders: list = field(default_factory=list)
    background: dict = field(default_factory=lambda: {"kind": "solid", "color": [0.55, 0.6, 0.65]})
    object_size: tuple = (32.0, 20.0)

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("scene needs at least one frame")
        if not self.keyframes:
            raise ValueError("scene needs at least one trajectory keyframe")
        kf = sorted(self.keyframes, key=lambda k: k.frame)
        if kf[0].frame > 0 or kf[-1].frame < self.n_frames - 1:
            raise ValueError("keyframes must cover every frame (first <= 0, last >= n_frames - 1)")
        self.keyframes = kf
        for occ in self.occluders:
            if occ.x < 0 or occ.x + occ.width > self.width or occ.width <= 0:
                raise ValueError(f"occluder {occ} outside image bounds")
        if self.background.get("kind") not in ("solid", "gradient"):
            raise ValueError("background kind must be 'solid' or 'gradient'")

    @property
    def canvas(self):
        return (self.height, self.width)

    def trajectory(self):
        """Per-frame (cx, cy, scale) by linear interpolation between keyframes."""
        f = np.array([k.frame for k in self.keyframes], dtype=np.float64)
        t = np.arange(self.n_frames, dtype=np.float64)
        cx = np.interp(t, f, [k.cx for k in self.keyframes])
        cy = np.interp(t, f, [k.cy for k in self.keyframes])
        sc = np.interp(t, f, [k.scale for k in self.keyframes])
        return list(zip(cx, cy, sc))

    def background_image(self):
        H, W = self.canvas
        bg = self.background
        if bg["kind"] == "solid":
            return solid_background(self.canvas, bg["color"])
        top = np.asarray(bg["top"], dtype=np.float64)
        bottom = np.asarray(bg["bottom"], dtype=np.float64)
        a = (np.arange(H) / max(H - 1, 1))[None, :, None]
        col = top[:, None, None] * (1 - a) + bottom[:, None, None] * a
        return np.broadcast_to(col, (3, H, W)).copy()

    def views(self):
        H, W = self.canvas
        return [ViewParams(scale=sc, tx=cx - (W - 1) / 2.0, ty=cy - (H - 1) / 2.0)
                for cx, cy, sc in self.trajectory()]

    def without_occluders(self):
        return Scene(self.height, self.width, self.n_frames, list(self.keyframes), [],
                     dict(self.background), self.object_size)

    def to_dict(self):
        return {
            "height": self.height,
            "width": self.width,
            "n_frames": self.n_frames,
            "background": self.background,
            "object_size": list(self.object_size),
            "occluders": [{"x": o.x, "width": o.width, "color": list(o.color)} for o in self.occluders],
            "keyframes": [asdict(k) for k in self.keyframes],
        }

    @classmethod
    def from_dict(cls, d):
        allowed = {"height", "width", "n_frames", "background", "object_size", "occluders", "keyframes"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        return cls(
            height=int(d["height"]),
            width=int(d["width"]),
            n_frames=int(d["n_frames"]),
            keyframes=[Keyframe(**k) for k in d["keyframes"]],
            occluders=[Occluder(o["x"], o["width"], tuple(o.get("color", (0.35, 0.33, 0.30))))
                       for o in d.get("occluders", [])],
            background=d.get("background", {"kind": "solid", "color": [0.55, 0.6, 0.65]}),
            object_size=tuple(d.get("object_size", (32.0, 20.0))),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def default_scene(occluders=True, n_frames=60, speed=3.0):
    """Bridge-style scene: the target drives left to right past five columns.

    ``speed`` is in pixels per frame.  The 4 px columns sit where the target
    centre arrives at frames 6, 19, 32, 45 and 58, far enough apart that the
    target is never behind two columns at once; shorter runs pass fewer.
    """
    H, W = 144, 256
    x0, y0 = 36.0, 72.0
    keys = [Keyframe(0, x0, y0), Keyframe(n_frames - 1, x0 + speed * (n_frames - 1), y0)]
    bars = []
    if occluders:
        bars = [Occluder(x0 + speed * f, 4.0, (0.25, 0.22, 0.20)) for f in (6, 19, 32, 45, 58)]
    return Scene(H, W, n_frames, keys, bars,
                 {"kind": "gradient", "top": [0.62, 0.70, 0.80], "bottom": [0.45, 0.47, 0.50]})


def render_sequence(scene, obj, texture=None):
    """Render every frame of ``scene``; returns (frames, ground-truth boxes).

    Frames are 3 x H x W numpy arrays; occluders are painted over the target.
    """
    views = scene.views()
    if not views:
        raise ValueError("scene has an empty trajectory")
    bg = scene.background_image()
    frames, boxes = [], []
    for view in views:
        img = render(obj, view, scene.canvas, texture=texture, background=bg)
        img = draw_bars(img, scene.occluders)
        frames.append(img.data)
        boxes.append(target_box(obj, view, scene.canvas))
    return frames, boxes


def occlusion_overlap(scene, obj):
    """Per-frame count of target pixels hidden by an occluder."""
    views = scene.views()
    W = scene.width
    cols = np.zeros(W, dtype=bool)
    for occ in scene.occluders:
        cols |= occ.columns(W)
    return [int((target_mask(obj, v, scene.canvas) & cols[None, :]).sum()) for v in views]
