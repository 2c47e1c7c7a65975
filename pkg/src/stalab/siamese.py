"""Victim Siamese networks with fixed, calibrated random weights.

Both heads share one :class:`Embedder` per victim.  The symmetric head scores
``corr(embed(z), embed(x)) / (C h w)``.  The RPN head lifts template features
through a template-adjust conv into ``2k`` correlation kernels and matches
them against search-adjusted features, giving per-anchor
background/foreground logits (channel ``2a`` background, ``2a + 1``
foreground for anchor ``a``).
"""

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from stalab import autodiff as ad
from stalab.autodiff import Tensor
from stalab.tracker import CropSpec

HEAD_KINDS = ("symmetric", "rpn")
MAGIC = b"STALABW\x00"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class VictimConfig:
    head: str = "symmetric"
    seed: int = 0
    channels: tuple = (8, 16, 16)
    kernel: int = 3
    strides: tuple = (2, 1, 1)
    exemplar_size: int = 32
    search_size: int = 64
    anchors: int = 3
    aspect_ratios: tuple = (0.5, 1.0, 2.0)
    base_scale: float = 8.0
    rpn_asymmetry: float = 0.5
    rpn_logit_target: float = 2.0
    rpn_background_prior: float = 0.01
    highpass_layers: tuple = (0, 2)
    self_score_target: float = 3.0

    def __post_init__(self):
        if self.head not in HEAD_KINDS:
            raise ValueError(f"head must be one of {HEAD_KINDS}, got {self.head!r}")
        if len(self.channels) != len(self.strides):
            raise ValueError("channels and strides need one entry per layer")
        if self.anchors < 1 or len(self.aspect_ratios) != self.anchors:
            raise ValueError("need one aspect ratio per anchor and at least one anchor")
        if not 0.0 < self.rpn_background_prior < 1.0:
            raise ValueError("rpn_background_prior must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown victim keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


def conv_out(n, kernel, stride):
    return (n - kernel) // stride + 1


def _orthonormal_rows(rng, K, fan_in, zero_mean_groups=None):
    g = rng.standard_normal((K, fan_in))
    if zero_mean_groups is not None:
        g = g.reshape(K, zero_mean_groups, -1)
        g = g - g.mean(axis=2, keepdims=True)
        g = g.reshape(K, fan_in)
    q, r = np.linalg.qr(g.T)
    q = q * np.sign(np.diag(r))[None, :]
    return q.T


def calibration_images(rng, n, size):
    return [rng.uniform(0.0, 1.0, size=(3, size, size)) for _ in range(n)]


def structured_pairs(rng, n, spec):
    """Blocky objects on flat backgrounds; exemplar is the search centre crop."""
    S, E = spec.search_size, spec.exemplar_size
    out = []
    for _ in range(n):
        img = np.empty((3, S, S))
        img[:] = rng.uniform(0, 1, size=3)[:, None, None]
        oh, ow = rng.integers(8, 14), rng.integers(12, 20)
        grid = rng.uniform(0, 1, size=(3, 3, 4))
        block = np.repeat(np.repeat(grid, -(-oh // 3), axis=1), -(-ow // 4), axis=2)[:, :oh, :ow]
        y0, x0 = (S - oh) // 2, (S - ow) // 2
        img[:, y0:y0 + oh, x0:x0 + ow] = block
        lo = (S - E) // 2
        out.append((img[:, lo:lo + E, lo:lo + E].copy(), img))
    return out


class Embedder:
    """Shared feature extractor: conv layers with ReLU between them."""

    def __init__(self, weights, strides, exemplar_size, search_size):
        if len(weights) != len(strides):
            raise ValueError("one stride per conv layer")
        self.weights = [Tensor(w) for w in weights]
        self.strides = tuple(int(s) for s in strides)
        self.exemplar_size = exemplar_size
        self.search_size = search_size

    @property
    def channels(self):
        return self.weights[-1].shape[0]

    @property
    def stride(self):
        return int(np.prod(self.strides))

    def out_size(self, n):
        for w, s in zip(self.weights, self.strides):
            n = conv_out(n, w.shape[2], s)
        return n

    def __call__(self, image):
        image = ad.as_tensor(image)
        if image.ndim != 3 or image.shape[0] != 3 or image.shape[1] != image.shape[2] \
                or image.shape[1] not in (self.exemplar_size, self.search_size):
            raise ValueError(
                f"embedder expects 3 x {self.exemplar_size}^2 or 3 x {self.search_size}^2 input, "
                f"got {image.shape}")
        x = image
        last = len(self.weights) - 1
        for i, (w, s) in enumerate(zip(self.weights, self.strides)):
            x = ad.conv2d(x, w, s)
            if i < last:
                x = ad.relu(x)
        return x

    def activations(self, image):
        """Pre-activation output of every layer (numpy), for calibration checks."""
        x = np.asarray(image, dtype=np.float64)
        outs = []
        for i, (w, s) in enumerate(zip(self.weights, self.strides)):
            x = ad.conv2d(Tensor._wrap(x), w, s).data
            outs.append(x)
            if i < len(self.weights) - 1:
                x = np.maximum(x, 0.0)
        return outs


@dataclass
class AnchorSet:
    ratios: tuple
    base_scale: float
    centers: np.ndarray = field(repr=False)

    @property
    def k(self):
        return len(self.ratios)

    def boxes(self):
        """(M, M, k, 4) anchors as (cx, cy, w, h) in search-crop pixels."""
        M = self.centers.shape[0]
        out = np.zeros((M, M, self.k, 4))
        for a, r in enumerate(self.ratios):
            w = self.base_scale * np.sqrt(1.0 / r)
            h = self.base_scale * np.sqrt(r)
            out[:, :, a, 0] = self.centers[..., 0]
            out[:, :, a, 1] = self.centers[..., 1]
            out[:, :, a, 2] = w
            out[:, :, a, 3] = h
        return out


class RpnHead:
    """Asymmetric classification head (template adjust != search adjust)."""

    def __init__(self, template_adjust, search_adjust, anchors, bias=None):
        self.template_adjust = Tensor(template_adjust)
        self.search_adjust = Tensor(search_adjust)
        self.anchors = anchors
        C = self.search_adjust.shape[0]
        if self.template_adjust.shape[0] != 2 * anchors.k * C:
            raise ValueError("template adjust must output 2k * C channels")
        self.bias = np.zeros(2 * anchors.k) if bias is None else np.asarray(bias, dtype=np.float64)
        if self.bias.shape != (2 * anchors.k,):
            raise ValueError("bias must hold one value per logit channel")

    @property
    def k(self):
        return self.anchors.k

    def kernels(self, z_feat):
        C = self.search_adjust.shape[0]
        t = ad.conv2d(z_feat, self.template_adjust, 1)
        return ad.reshape(t, (2 * self.k, C) + t.shape[1:])

    def logits(self, kernels, x_feat):
        xa = ad.conv2d(x_feat, self.search_adjust, 1)
        out = ad.conv2d(xa, kernels, 1)
        norm = 1.0 / (kernels.shape[1] * kernels.shape[2] * kernels.shape[3])
        out = ad.scale(out, norm)
        if not np.any(self.bias):
            return out
        return ad.add(out, Tensor._wrap(np.broadcast_to(self.bias[:, None, None], out.shape).copy()))


def fg_probability(logits):
    """Per-anchor foreground probability, shape (k, M, M), from 2k x M x M logits."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    bg, fg = z[0::2], z[1::2]
    return 1.0 / (1.0 + np.exp(bg - fg))


def anchor_logits(logits):
    """Rearrange 2k x M x M logits into an (k*M*M) x 2 [background, foreground] table."""
    k2, M, _ = logits.shape
    t = ad.reshape(logits, (k2 // 2, 2, M * M))
    t = ad.transpose(t, (0, 2, 1))
    return ad.reshape(t, (k2 // 2 * M * M, 2))


class Victim:
    """Embedder + head, with the crop geometry the tracker needs."""

    def __init__(self, config, embedder, rpn=None):
        self.config = config
        self.embedder = embedder
        self.rpn = rpn
        if config.head == "rpn" and rpn is None:
            raise ValueError("rpn victim needs an RpnHead")
        self.crop_spec = CropSpec(config.exemplar_size, config.search_size)

    @property
    def head_kind(self):
        return self.config.head

    @property
    def name(self):
        return f"{self.config.head}-s{self.config.seed}"

    @property
    def stride(self):
        return self.embedder.stride

    @property
    def score_size(self):
        zf = self.embedder.out_size(self.config.exemplar_size)
        xf = self.embedder.out_size(self.config.search_size)
        if self.rpn is not None and self.head_kind == "rpn":
            kz = self.rpn.template_adjust.shape[2]
            kx = self.rpn.search_adjust.shape[2]
            return (xf - kx + 1) - (zf - kz + 1) + 1
        return xf - zf + 1

    # differentiable scores
    def symmetric_score(self, z_img, x_img):
        zf = self.embedder(z_img)
        xf = self.embedder(x_img)
        return symmetric_from_features(zf, xf)

    def rpn_cls_logits(self, z_img, x_img):
        if self.rpn is None:
            raise ValueError("victim has no RPN head")
        zf = self.embedder(z_img)
        xf = self.embedder(x_img)
        return self.rpn.logits(self.rpn.kernels(zf), xf)

    # tracker interface
    def template(self, z_img):
        zf = self.embedder(z_img)
        if self.head_kind == "rpn":
            return self.rpn.kernels(zf)
        return zf

    def response_map(self, template, x_img):
        xf = self.embedder(x_img)
        if self.head_kind == "rpn":
            return fg_probability(self.rpn.logits(template, xf)).max(axis=0)
        return symmetric_from_features(template, xf).data

    def weight_tensors(self):
        out = [(f"embed.{i}", w.data) for i, w in enumerate(self.embedder.weights)]
        if self.rpn is not None:
            out += [("rpn.template_adjust", self.rpn.template_adjust.data),
                    ("rpn.search_adjust", self.rpn.search_adjust.data),
                    ("rpn.bias", self.rpn.bias)]
        return out


def symmetric_from_features(zf, xf):
    C, h, w = zf.shape
    return ad.scale(ad.cross_correlate(zf, xf), 1.0 / (C * h * w))


def init_embedder(config):
    """Orthogonal rows, first layer high-pass (zero spatial mean per input channel),
    each layer rescaled so its output RMS on uniform-noise images is 1."""
    rng = np.random.default_rng([config.seed, 1, HEAD_KINDS.index(config.head)])
    k = config.kernel
    weights = []
    cin = 3
    calib = calibration_images(rng, 8, config.search_size)
    feats = [c for c in calib]
    for i, (cout, s) in enumerate(zip(config.channels, config.strides)):
        groups = cin if i in config.highpass_layers else None
        w = _orthonormal_rows(rng, cout, cin * k * k, groups).reshape(cout, cin, k, k)
        outs = [ad.conv2d(Tensor._wrap(f), Tensor._wrap(w), s).data for f in feats]
        rms = np.sqrt(np.mean([np.mean(o ** 2) for o in outs]))
        w = w / rms
        outs = [o / rms for o in outs]
        weights.append(w)
        feats = [np.maximum(o, 0.0) for o in outs] if i < len(config.channels) - 1 else outs
        cin = cout
    emb = Embedder(weights, config.strides, config.exemplar_size, config.search_size)
    # unit-order clean self-scores: the score is quadratic in the last layer's scale
    pairs = structured_pairs(rng, 16, CropSpec(config.exemplar_size, config.search_size))
    selfs = []
    for z, _ in pairs:
        zf = emb(Tensor._wrap(z)).data
        selfs.append(np.mean(zf ** 2))
    weights[-1] = weights[-1] / np.sqrt(np.median(selfs) / config.self_score_target)
    return Embedder(weights, config.strides, config.exemplar_size, config.search_size)


def init_rpn(config, embedder):
    """Search adjust is an orthogonal conv; the template adjust for anchor ``a``
    is ``+/- gamma (W_x + asym * N)`` so foreground logits reward alignment while
    independent perturbations ``N`` break the symmetry.

    Foreground channels carry a bias so that a featureless background has
    foreground probability ``rpn_background_prior``; ``gamma`` is chosen so the
    median aligned logit difference on structured pairs is ``rpn_logit_target``.
    """
    rng = np.random.default_rng([config.seed, 2])
    C = embedder.channels
    k = config.kernel
    wx = _orthonormal_rows(rng, C, C * k * k).reshape(C, C, k, k)
    spec = CropSpec(config.exemplar_size, config.search_size)
    pairs = structured_pairs(rng, 16, spec)
    xs = [embedder(Tensor._wrap(x)).data for _, x in pairs]
    rms = np.sqrt(np.mean([np.mean(ad.conv2d(Tensor._wrap(x), Tensor._wrap(wx), 1).data ** 2) for x in xs]))
    wx = wx / rms
    blocks = []
    for a in range(config.anchors):
        for sign in (-1.0, 1.0):
            noise = rng.standard_normal(wx.shape) * np.sqrt(np.mean(wx ** 2))
            blocks.append(sign * (wx + config.rpn_asymmetry * noise))
    wz = np.concatenate(blocks, axis=0)
    M = None
    head = RpnHead(wz, wx, AnchorSet(tuple(config.aspect_ratios), config.base_scale, np.zeros((1, 1, 2))))
    diffs = []
    for z, x in pairs:
        logits = head.logits(head.kernels(embedder(Tensor._wrap(z))), embedder(Tensor._wrap(x))).data
        M = logits.shape[1]
        c = (M - 1) // 2
        diffs.append(np.mean(logits[1::2, c, c] - logits[0::2, c, c]))
    prior = config.rpn_background_prior
    fg_bias = math.log(prior / (1.0 - prior))
    gain = (config.rpn_logit_target - fg_bias) / np.median(diffs)
    bias = np.tile([0.0, fg_bias], config.anchors)
    return RpnHead(wz * gain, wx, make_anchors(config, M, embedder.stride), bias)


def make_anchors(config, M, stride):
    """Anchor centres on the score-map lattice, in search-crop pixels."""
    centre = (config.search_size - 1) / 2.0
    grid = (np.arange(M) - (M - 1) / 2.0) * stride + centre
    centers = np.stack(np.meshgrid(grid, grid, indexing="xy"), axis=-1)
    return AnchorSet(tuple(config.aspect_ratios), config.base_scale, centers)


def init_weights(seed, head="symmetric", **geometry):
    """Build a victim with deterministic calibrated random weights."""
    return build_victim(VictimConfig(head=head, seed=seed, **geometry))


def build_victim(config):
    embedder = init_embedder(config)
    rpn = init_rpn(config, embedder) if config.head == "rpn" else None
    return Victim(config, embedder, rpn)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(victim, path):
    """Write ``path`` (binary weights) and ``path + '.json'`` (manifest)."""
    tensors = victim.weight_tensors()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
        for _, arr in tensors:
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    manifest = {
        "format": "stalab-weights",
        "version": FORMAT_VERSION,
        "config": asdict(victim.config),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_checkpoint(path):
    with open(str(path) + ".json") as fh:
        manifest = json.load(fh)
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ValueError("not a stalab weight file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported weight format version {version}")
    off = 16
    shapes = []
    for _ in range(count):
        (nd,) = struct.unpack_from("<I", blob, off)
        off += 4
        shapes.append(struct.unpack_from(f"<{nd}I", blob, off))
        off += 4 * nd
    arrays = []
    for shp in shapes:
        n = int(np.prod(shp))
        arrays.append(np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shp).astype(np.float64))
        off += 8 * n
    if off != len(blob):
        raise ValueError("trailing bytes in weight file")
    names = [t["name"] for t in manifest["tensors"]]
    if len(names) != count:
        raise ValueError("manifest and weight file disagree on tensor count")
    config = VictimConfig.from_dict(manifest["config"])
    named = dict(zip(names, arrays))
    n_embed = len(config.channels)
    embedder = Embedder([named[f"embed.{i}"] for i in range(n_embed)], config.strides,
                        config.exemplar_size, config.search_size)
    rpn = None
    if "rpn.template_adjust" in named:
        wz, wx = named["rpn.template_adjust"], named["rpn.search_adjust"]
        zf = embedder.out_size(config.exemplar_size) - wz.shape[2] + 1
        xf = embedder.out_size(config.search_size) - wx.shape[2] + 1
        rpn = RpnHead(wz, wx, make_anchors(config, xf - zf + 1, embedder.stride), named["rpn.bias"])
    return Victim(config, embedder, rpn)
