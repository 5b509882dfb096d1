"""Image I/O, rescaling, augmentation, synthetic corpora and seeded batching."""

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


class FormatError(ValueError):
    pass


# -- PGM I/O ---------------------------------------------------------------------------

def _read_token(buf, pos):
    """Next whitespace-delimited header token, skipping # comments; returns (token, next_pos)."""
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError(f"truncated PGM header at byte {start}")
    return buf[start:pos], pos


def decode_pgm(buf):
    """Parse binary PGM bytes into (uint array, maxval)."""
    if buf[:2] != b"P5":
        raise FormatError("bad magic at byte 0: expected P5")
    pos = 2
    values = []
    for what in ("width", "height", "maxval"):
        tok, tok_end = _read_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"bad {what} {tok!r} at byte {tok_end - len(tok)}")
        values.append(int(tok))
        pos = tok_end
    w, h, maxval = values
    if not 0 < maxval < 65536 or w <= 0 or h <= 0:
        raise FormatError(f"invalid header values at byte {pos}: {w}x{h} maxval {maxval}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"missing separator after header at byte {pos}")
    pos += 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    if len(buf) - pos < need:
        raise FormatError(f"truncated pixel data at byte {len(buf)}: need {need} bytes from byte {pos}")
    arr = np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    if arr.max(initial=0) > maxval:
        bad = int(np.argmax(arr.ravel() > maxval))
        raise FormatError(f"sample exceeds maxval at byte {pos + bad * dtype.itemsize}")
    return arr.astype(np.uint16), maxval


def encode_pgm(samples, maxval):
    samples = np.asarray(samples)
    h, w = samples.shape
    dtype = ">u2" if maxval > 255 else "u1"
    return f"P5\n{w} {h}\n{maxval}\n".encode() + samples.astype(dtype).tobytes()


def load_image(path, value_range=(0.0, 1.0)):
    """Read a P5 PGM as float32 scaled into ``value_range``."""
    arr, maxval = decode_pgm(Path(path).read_bytes())
    return rescale(arr.astype(np.float64), (0.0, float(maxval)), value_range).astype(np.float32)


def save_image(image, path, value_range=(0.0, 1.0), bits=16):
    """Write a 2-D float image as P5 PGM; values outside the range are clipped."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 2:
        raise ValueError(f"expected a single-channel 2-D image, got shape {image.shape}")
    maxval = 65535 if bits == 16 else 255
    q = np.rint(np.clip(rescale(image, value_range, (0.0, maxval)), 0, maxval))
    Path(path).write_bytes(encode_pgm(q, maxval))


def rescale(image, from_range, to_range):
    lo, hi = map(float, from_range)
    a, b = map(float, to_range)
    if hi == lo:
        raise ValueError(f"degenerate source range {from_range}")
    return (np.asarray(image) - lo) * ((b - a) / (hi - lo)) + a


# -- corpora ------------------------------------------------------------------------------

@dataclass
class ImageCorpus:
    images: np.ndarray  # (N, H, W) float32
    value_range: tuple = (-1.0, 1.0)
    masks: Optional[np.ndarray] = None
    names: list = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 3:
            raise ValueError(f"corpus images must be (N, H, W), got {self.images.shape}")
        lo, hi = self.value_range
        if self.images.size and (self.images.min() < lo - 1e-6 or self.images.max() > hi + 1e-6):
            raise ValueError(f"image values leave the declared range {self.value_range}")
        if self.masks is not None:
            self.masks = np.asarray(self.masks, dtype=np.float32)
            if self.masks.shape != self.images.shape:
                raise ValueError("masks must pair 1:1 with images")
            if not np.isin(self.masks, (0.0, 1.0)).all():
                raise ValueError("masks must be binary")

    def __len__(self):
        return self.images.shape[0]

    @property
    def resolution(self):
        return self.images.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return ImageCorpus(self.images[idx], self.value_range,
                           None if self.masks is None else self.masks[idx],
                           [self.names[i] for i in idx] if self.names else [])

    def split(self):
        """Fixed 2/3 train, 1/3 test split: every third index is held out."""
        idx = np.arange(len(self))
        test = idx % 3 == 2
        return self.subset(idx[~test]), self.subset(idx[test])

    def flat(self):
        return self.images.reshape(len(self), -1).astype(np.float64)


def read_manifest(path):
    base = Path(path).parent
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.append(base / line)
    return out


def load_corpus(source, value_range=(-1.0, 1.0)):
    """Load a directory of PGMs (with optional ``masks/`` sibling) or a manifest file."""
    source = Path(source)
    if source.is_dir():
        files = sorted(p for p in source.iterdir() if p.suffix.lower() == ".pgm")
        mask_dir = source / "masks"
    else:
        files = read_manifest(source)
        mask_dir = None
    if not files:
        raise FileNotFoundError(f"no PGM images found in {source}")
    images = [load_image(f, value_range) for f in files]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"images differ in shape: {sorted(shapes)}")
    masks = None
    md = mask_dir if mask_dir is not None else files[0].parent / "masks"
    if md.is_dir() and all((md / f.name).exists() for f in files):
        masks = np.stack([(load_image(md / f.name) >= 0.5).astype(np.float32) for f in files])
    return ImageCorpus(np.stack(images), tuple(value_range), masks, [f.name for f in files])


def save_corpus(corpus, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = corpus.names or [f"img{i:05d}.pgm" for i in range(len(corpus))]
    for im, name in zip(corpus.images, names):
        save_image(im, d / name, corpus.value_range)
    if corpus.masks is not None:
        (d / "masks").mkdir(exist_ok=True)
        for m, name in zip(corpus.masks, names):
            save_image(m, d / "masks" / name, (0.0, 1.0))


def synthetic_blobs(n, res, modes=2, rng=None, value_range=(-1.0, 1.0), width=0.15, jitter=0.02):
    """Single-Gaussian-blob images whose centers cluster around ``modes`` fixed sites.

    Sites are spread evenly on a circle of radius 0.28*res around the
    image center. Masks mark pixels at or above half the blob peak.
    """
    if modes < 1:
        raise ValueError("modes must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    angles = 2 * np.pi * np.arange(modes) / modes
    radius = 0.28 * res if modes > 1 else 0.0
    sites = np.stack([res / 2 + radius * np.sin(angles), res / 2 + radius * np.cos(angles)], axis=1)
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) + 0.5
    images = np.empty((n, res, res), dtype=np.float32)
    masks = np.empty((n, res, res), dtype=np.float32)
    lo, hi = value_range
    for i in range(n):
        cy, cx = sites[rng.integers(modes)] + rng.normal(0.0, jitter * res, size=2)
        s = width * res * rng.uniform(0.85, 1.15)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        images[i] = lo + (hi - lo) * blob
        masks[i] = blob >= 0.5
    return ImageCorpus(images, tuple(value_range), masks)


# -- augmentation -----------------------------------------------------------------------

@dataclass
class AugmentProfile:
    rotation_deg: tuple = (0.0, 0.0)
    hflip: bool = False
    shift_frac: float = 0.0
    zoom_frac: float = 0.0

    def __post_init__(self):
        lo, hi = self.rotation_deg
        if not 0 <= lo <= hi <= 180:
            raise ValueError(f"rotation bounds must satisfy 0 <= lo <= hi <= 180, got {self.rotation_deg}")
        for name in ("shift_frac", "zoom_frac"):
            if not 0 <= getattr(self, name) <= 0.5:
                raise ValueError(f"{name} must be in [0, 0.5]")

    @property
    def is_identity(self):
        return self.rotation_deg == (0.0, 0.0) and not self.hflip and not self.shift_frac and not self.zoom_frac


PROFILES = {
    "none": AugmentProfile(),
    "full": AugmentProfile((0.0, 180.0), True, 0.10, 0.20),
    "mild": AugmentProfile((0.0, 5.0), False, 0.05, 0.0),
}


@dataclass
class Transform:
    angle: float = 0.0
    flip: bool = False
    dy: float = 0.0
    dx: float = 0.0
    zoom: float = 1.0


def sample_transform(profile, shape, rng):
    """Draw one transform; the draw order is fixed so streams are reproducible."""
    h, w = shape
    angle = rng.uniform(*profile.rotation_deg)
    flip = bool(rng.integers(2)) if profile.hflip else False
    dy = rng.uniform(-profile.shift_frac, profile.shift_frac) * h
    dx = rng.uniform(-profile.shift_frac, profile.shift_frac) * w
    zoom = 1.0 + rng.uniform(-profile.zoom_frac, profile.zoom_frac)
    return Transform(angle, flip, dy, dx, zoom)


def apply_transform(image, t, order, fill):
    out = image[:, ::-1] if t.flip else image
    if t.angle == 0 and t.dy == 0 and t.dx == 0 and t.zoom == 1:
        return np.array(out, dtype=image.dtype)
    h, w = image.shape
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    th = np.deg2rad(t.angle)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    # output -> input coordinate map: inverse of (rotate, zoom about center, then shift)
    m = rot.T / t.zoom
    offset = c - m @ (c + np.array([t.dy, t.dx]))
    from scipy import ndimage  # deferred: slow import, only augmentation needs it

    res = ndimage.affine_transform(np.asarray(out, dtype=np.float64), m, offset=offset, order=order,
                                   mode="constant", cval=fill)
    return res.astype(image.dtype)


def augment(image, mask=None, profile=None, rng=None, value_range=(-1.0, 1.0)):
    """Apply one sampled transform to an image (bilinear) and its mask (nearest)."""
    profile = profile or AugmentProfile()
    if profile.is_identity:
        return image.copy(), None if mask is None else mask.copy()
    t = sample_transform(profile, image.shape, rng)
    img = apply_transform(image, t, 1, value_range[0])
    img = np.clip(img, value_range[0], value_range[1])
    if mask is None:
        return img, None
    m = apply_transform(mask, t, 0, 0.0)
    return img, (m >= 0.5).astype(mask.dtype)


# -- batching ---------------------------------------------------------------------------

class BatchSampler:
    """Seeded epoch shuffles with per-draw augmentation.

    Without ``steps_per_epoch`` an epoch is floor(N / batch) batches over one
    permutation. With it, an epoch is exactly that many batches drawn from a
    continuing stream of permutations, so examples recur within an epoch.
    The sampler's position is plain data (``state``) for checkpointing.
    """

    def __init__(self, corpus, batch_size, rng, steps_per_epoch=None, profile=None):
        n = len(corpus)
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if steps_per_epoch is None and batch_size > n:
            raise ValueError(f"batch size {batch_size} exceeds corpus size {n}")
        self.corpus = corpus
        self.batch_size = batch_size
        self.rng = rng
        self.steps_per_epoch = steps_per_epoch or n // batch_size
        self.profile = profile or AugmentProfile()
        self.perm = np.zeros(0, dtype=np.int64)
        self.cursor = 0

    def _next_indices(self):
        n = len(self.corpus)
        out = []
        while len(out) < self.batch_size:
            if self.cursor >= self.perm.size:
                self.perm = self.rng.permutation(n)
                self.cursor = 0
            take = min(self.batch_size - len(out), self.perm.size - self.cursor)
            out.extend(self.perm[self.cursor:self.cursor + take].tolist())
            self.cursor += take
        return np.asarray(out, dtype=np.int64)

    def next_batch(self):
        """(images, masks or None) with images shaped (B, 1, H, W)."""
        idx = self._next_indices()
        ims = self.corpus.images[idx]
        ms = None if self.corpus.masks is None else self.corpus.masks[idx]
        if not self.profile.is_identity:
            ims = ims.copy()
            ms = None if ms is None else ms.copy()
            for j in range(len(idx)):
                a, b = augment(ims[j], None if ms is None else ms[j], self.profile, self.rng,
                               self.corpus.value_range)
                ims[j] = a
                if ms is not None:
                    ms[j] = b
        return ims[:, None], None if ms is None else ms[:, None]

    def epoch(self):
        if self.steps_per_epoch is None or self.steps_per_epoch < 1:
            raise ValueError("epoch has no batches")
        for _ in range(self.steps_per_epoch):
            yield self.next_batch()

    def state(self):
        return {"perm": self.perm.copy(), "cursor": self.cursor}

    def load_state(self, state):
        self.perm = np.asarray(state["perm"], dtype=np.int64)
        self.cursor = int(state["cursor"])


def batches(corpus, batch_size, rng, steps_per_epoch=None, profile=None):
    """Iterator over one epoch of batches."""
    return BatchSampler(corpus, batch_size, rng, steps_per_epoch, profile).epoch()


def downsample_to(images, res):
    """Average-pool a (B, 1, H, W) batch down to ``res``."""
    b, c, h, w = images.shape
    f = h // res
    if f * res != h:
        raise ValueError(f"cannot pool {h} down to {res}")
    if f == 1:
        return images
    return images.reshape(b, c, res, f, res, f).mean(axis=(3, 5), dtype=np.float64).astype(images.dtype)


def upsample_to(images, res):
    f = res // images.shape[2]
    if f == 1:
        return images
    return images.repeat(f, axis=2).repeat(f, axis=3)


def list_images(directory):
    return sorted(os.path.join(directory, f) for f in os.listdir(directory) if f.lower().endswith(".pgm"))
