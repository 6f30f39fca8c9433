"""Volumes, stack plans, view transposition, cropping, augmentation, phantoms and file I/O.

All arrays are (depth, length, width) with slices along axis 0.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

KINDS = ("image", "label", "probability")
VIEWS = ("axial", "coronal", "sagittal")

# view -> axis permutation applied to a (d, l, w) volume
_PERMUTATIONS = {
    "axial": (0, 1, 2),
    "coronal": (1, 0, 2),
    "sagittal": (2, 0, 1),
}


class VolumeError(ValueError):
    pass


@dataclass
class Volume:
    voxels: np.ndarray
    kind: str = "image"
    spacing: tuple | None = None

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise VolumeError(f"volume must be 3-D with positive extents, got {self.voxels.shape}")
        if self.kind not in KINDS:
            raise VolumeError(f"unknown volume kind {self.kind!r}")
        if self.kind == "label" and not np.isin(self.voxels, (0, 1)).all():
            raise VolumeError("label volumes may only contain 0 and 1")
        if self.kind == "probability" and (self.voxels.min() < 0 or self.voxels.max() > 1):
            raise VolumeError("probability volumes must lie in [0, 1]")
        if self.spacing is not None:
            self.spacing = tuple(float(s) for s in self.spacing)
            if len(self.spacing) != 3:
                raise VolumeError("spacing needs one value per axis")

    @property
    def dims(self):
        return self.voxels.shape


def _unwrap(vol):
    return (vol.voxels, vol) if isinstance(vol, Volume) else (np.asarray(vol), None)


def _rewrap(arr, like, spacing=None):
    if like is None:
        return arr
    return Volume(arr, like.kind, spacing if spacing is not None else like.spacing)


# ----------------------------------------------------------------------------
# stacks
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class StackPlan:
    k: int
    starts: tuple
    d: int

    def __len__(self):
        return len(self.starts)

    def slices(self, i):
        return slice(self.starts[i], self.starts[i] + self.k)

    def coverage(self):
        counts = np.zeros(self.d, dtype=int)
        for s in self.starts:
            counts[s : s + self.k] += 1
        return counts


def plan_stacks(d, k):
    """Stride-k stacks over depth ``d``; an indivisible tail gets one extra stack at ``d - k``."""
    if k < 1:
        raise VolumeError(f"stack size must be >= 1, got {k}")
    if k > d:
        raise VolumeError(f"stack size {k} exceeds depth {d}")
    starts = list(range(0, d - k + 1, k))
    if d % k:
        starts.append(d - k)
    return StackPlan(k, tuple(starts), d)


def extract_stack(volume, plan, i):
    arr, _ = _unwrap(volume)
    if arr.shape[0] != plan.d:
        raise VolumeError(f"volume depth {arr.shape[0]} != plan depth {plan.d}")
    return arr[plan.slices(i)]


def extract_all(volume, plan):
    return [extract_stack(volume, plan, i) for i in range(len(plan))]


def merge_stacks(stacks, plan):
    """Reassemble stacks into a (d, l, w) array, averaging slices covered twice."""
    if len(stacks) != len(plan):
        raise VolumeError(f"got {len(stacks)} stacks for a plan of {len(plan)}")
    first = np.asarray(stacks[0])
    out = np.zeros((plan.d,) + first.shape[1:], dtype=np.result_type(first.dtype, np.float64))
    counts = np.zeros(plan.d)
    for i, s in enumerate(stacks):
        s = np.asarray(s)
        if s.shape != (plan.k,) + first.shape[1:]:
            raise VolumeError(f"stack {i} has shape {s.shape}, expected {(plan.k,) + first.shape[1:]}")
        out[plan.slices(i)] += s
        counts[plan.slices(i)] += 1
    # x + 0 and x / 1 are exact, so disjoint plans reproduce the stacks bit for bit
    return out / counts[:, None, None]


# ----------------------------------------------------------------------------
# views
# ----------------------------------------------------------------------------

def _check_view(axis):
    if axis not in _PERMUTATIONS:
        raise VolumeError(f"unknown view {axis!r}; expected one of {VIEWS}")
    return _PERMUTATIONS[axis]


def transpose_view(volume, axis):
    """Re-slice an axial (d, l, w) volume so that slices run along the given view."""
    perm = _check_view(axis)
    arr, like = _unwrap(volume)
    spacing = tuple(like.spacing[p] for p in perm) if like is not None and like.spacing else None
    return _rewrap(np.ascontiguousarray(arr.transpose(perm)), like, spacing)


def inverse_view(volume, axis):
    """Undo :func:`transpose_view`, returning to the axial frame."""
    inv = tuple(np.argsort(_check_view(axis)))
    arr, like = _unwrap(volume)
    spacing = tuple(like.spacing[p] for p in inv) if like is not None and like.spacing else None
    return _rewrap(np.ascontiguousarray(arr.transpose(inv)), like, spacing)


# ----------------------------------------------------------------------------
# cropping
# ----------------------------------------------------------------------------

def bbox_center(label):
    """In-plane centre of the foreground bounding box, or None for an empty label."""
    arr, _ = _unwrap(label)
    ys, xs = np.nonzero(arr.any(axis=0))
    if ys.size == 0:
        return None
    return ((ys.min() + ys.max()) / 2.0, (xs.min() + xs.max()) / 2.0)


def crop_origin(inplane, target_l, target_w, center=None):
    """Top-left corner of a (target_l, target_w) window centred on ``center``, clamped."""
    l, w = inplane
    if target_l > l or target_w > w:
        raise VolumeError(f"crop {target_l}x{target_w} exceeds in-plane extent {l}x{w}")
    if target_l < 1 or target_w < 1:
        raise VolumeError("crop extents must be positive")
    if center is None:
        center = ((l - 1) / 2.0, (w - 1) / 2.0)
    y0 = int(np.clip(np.floor(center[0] - (target_l - 1) / 2.0 + 0.5), 0, l - target_l))
    x0 = int(np.clip(np.floor(center[1] - (target_w - 1) / 2.0 + 0.5), 0, w - target_w))
    return y0, x0


def crop_to(volume, target_l, target_w, center=None):
    """In-plane crop of size (target_l, target_w) around ``center`` (default: slice centre)."""
    arr, like = _unwrap(volume)
    y0, x0 = crop_origin(arr.shape[1:], target_l, target_w, center)
    return _rewrap(arr[:, y0 : y0 + target_l, x0 : x0 + target_w].copy(), like)


# ----------------------------------------------------------------------------
# augmentation
# ----------------------------------------------------------------------------

AUGMENTATIONS = ("rotate90", "hflip", "vflip")


def augment(stack, label, op, rng=None):
    """Apply the same in-plane transform to a stack and its label.

    ``op=None`` draws one of identity/rotate90/hflip/vflip from ``rng``;
    rotate90 is only drawn for square slices.
    """
    if op is None:
        choices = ["identity", "hflip", "vflip"]
        if stack.shape[-1] == stack.shape[-2]:
            choices.append("rotate90")
        op = choices[int(rng.integers(len(choices)))]
    if op == "identity":
        return stack, label
    if op == "rotate90":
        f = lambda a: np.rot90(a, 1, axes=(-2, -1))
    elif op == "hflip":
        f = lambda a: a[..., ::-1]
    elif op == "vflip":
        f = lambda a: a[..., ::-1, :]
    else:
        raise VolumeError(f"unknown augmentation {op!r}")
    return np.ascontiguousarray(f(stack)), np.ascontiguousarray(f(label))


# ----------------------------------------------------------------------------
# phantoms
# ----------------------------------------------------------------------------

def _smooth_profile(rng, n, n_terms=3):
    """Random smooth curve over n samples with values in [-1, 1]."""
    t = np.linspace(0.0, 1.0, n)
    amps = rng.uniform(0.3, 1.0, n_terms)
    freqs = rng.uniform(0.4, 2.0, n_terms)
    phases = rng.uniform(0, 2 * np.pi, n_terms)
    curve = sum(a * np.sin(2 * np.pi * f * t + p) for a, f, p in zip(amps, freqs, phases))
    return curve / amps.sum()


def _ellipse_mask(yy, xx, cy, cx, a, b, theta):
    c, s = np.cos(theta), np.sin(theta)
    u = (yy - cy) * c + (xx - cx) * s
    v = -(yy - cy) * s + (xx - cx) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def generate_phantom(seed, dims=(32, 64, 64), shape_variability=1.0, spacing=None):
    """Synthetic organ volume: a swept ellipse whose size, eccentricity, orientation
    and centre drift from slice to slice, embedded in textured background with
    low-contrast distractor blobs.

    Returns ``(image, label)`` volumes; the image is min-max normalised to [0, 1].
    """
    d, l, w = (int(x) for x in dims)
    if min(d, l, w) < 16:
        raise VolumeError(f"phantom extents must be >= 16 per axis, got {dims}")
    rng = np.random.default_rng(seed)
    v = float(shape_variability)
    size = min(l, w)

    cy0 = rng.uniform(0.42, 0.58) * l
    cx0 = rng.uniform(0.42, 0.58) * w
    a0 = rng.uniform(0.10, 0.15) * size
    b0 = a0 * rng.uniform(0.5, 0.8)
    theta0 = rng.uniform(0, np.pi)
    prof = [_smooth_profile(rng, d) for _ in range(5)]
    cy = cy0 + v * 0.10 * l * prof[0]
    cx = cx0 + v * 0.10 * w * prof[1]
    a = a0 * (1 + v * 0.35 * prof[2])
    b = b0 * (1 + v * 0.35 * prof[3])
    theta = theta0 + v * 0.6 * prof[4]

    yy, xx = np.mgrid[0:l, 0:w].astype(float)
    label = np.zeros((d, l, w), dtype=np.uint8)
    for z in range(d):
        label[z] = _ellipse_mask(yy, xx, cy[z], cx[z], a[z], b[z], theta[z])

    # textured body on a dark surround
    body = _ellipse_mask(yy, xx, (l - 1) / 2, (w - 1) / 2, 0.47 * l, 0.47 * w, 0.0)
    texture = ndimage.gaussian_filter(rng.standard_normal((d, l, w)), sigma=3.0)
    texture /= np.abs(texture).max() + 1e-12
    image = np.where(body[None], 0.35 + 0.08 * texture, 0.05)

    zz = np.arange(d, dtype=float)[:, None, None]
    distractors = np.zeros((d, l, w), dtype=bool)
    for _ in range(int(rng.integers(3, 6))):
        c = (rng.uniform(0, d), rng.uniform(0.2, 0.8) * l, rng.uniform(0.2, 0.8) * w)
        r = (rng.uniform(0.15, 0.4) * d, rng.uniform(0.04, 0.09) * size, rng.uniform(0.04, 0.09) * size)
        blob = ((zz - c[0]) / r[0]) ** 2 + ((yy - c[1]) / r[1]) ** 2 + ((xx - c[2]) / r[2]) ** 2 <= 1
        distractors |= blob
    distractors &= ~label.astype(bool)
    image = np.where(distractors, 0.50 + 0.04 * texture, image)

    organ_texture = ndimage.gaussian_filter(rng.standard_normal((d, l, w)), sigma=1.0)
    image = np.where(label.astype(bool), 0.60 + 0.15 * organ_texture, image)
    image = image + 0.04 * rng.standard_normal((d, l, w))
    lo, hi = image.min(), image.max()
    image = (image - lo) / (hi - lo)
    return Volume(image, "image", spacing), Volume(label, "label", spacing)


# ----------------------------------------------------------------------------
# file I/O
# ----------------------------------------------------------------------------

_HEADER = "mdsnet-volume 1"
_RAW = {"u8": "<u1", "f32": "<f4", "f64": "<f8"}


def save_volume(path, volume, dtype=None):
    """Write ``<path>.hdr`` (text) and ``<path>.raw`` (little-endian voxels)."""
    if not isinstance(volume, Volume):
        raise VolumeError("save_volume expects a Volume")
    if dtype is None:
        dtype = "u8" if volume.kind == "label" else "f32"
    if dtype not in _RAW:
        raise VolumeError(f"unsupported voxel dtype {dtype!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = [
        _HEADER,
        "dims " + " ".join(str(n) for n in volume.dims),
        f"dtype {dtype}",
        "axis_order d,l,w",
        f"kind {volume.kind}",
    ]
    if volume.spacing:
        header.append("spacing " + " ".join(repr(s) for s in volume.spacing))
    path.with_suffix(".hdr").write_text("\n".join(header) + "\n")
    path.with_suffix(".raw").write_bytes(np.ascontiguousarray(volume.voxels, dtype=_RAW[dtype]).tobytes())
    return path.with_suffix(".hdr")


def load_volume(path):
    path = Path(path)
    lines = path.with_suffix(".hdr").read_text().splitlines()
    if not lines or lines[0] != _HEADER:
        raise VolumeError(f"{path}: not a volume header")
    fields = dict(line.split(" ", 1) for line in lines[1:] if line.strip())
    dims = tuple(int(x) for x in fields["dims"].split())
    if fields.get("axis_order", "d,l,w") != "d,l,w":
        raise VolumeError(f"{path}: unsupported axis order {fields['axis_order']}")
    raw_dtype = _RAW[fields["dtype"]]
    arr = np.frombuffer(path.with_suffix(".raw").read_bytes(), dtype=raw_dtype)
    if arr.size != np.prod(dims):
        raise VolumeError(f"{path}: blob holds {arr.size} voxels, header says {dims}")
    arr = arr.reshape(dims).astype(np.dtype(raw_dtype).newbyteorder("="))
    spacing = tuple(float(s) for s in fields["spacing"].split()) if "spacing" in fields else None
    return Volume(arr, fields.get("kind", "image"), spacing)
