"""Deterministic synthetic DCE phantoms with ground-truth masks.

Geometry (y grows posteriorly):

* two half-ellipsoid breasts mirrored about the plane ``x = nx // 2`` and
  resting on the chest wall at ``y = chest_y``;
* a chest block (``y > chest_y``) with a strongly enhancing heart inside;
* scattered lesion clusters inside the breasts (non-mass morphology) and
  benign enhancing foci acting as confounders.

All breast tissue shares one pre-contrast intensity, so frame 0 is exactly
mirror-symmetric when ``noise_sigma == 0``. Kinetics differ per tissue:

* persistent: ``b + A (1 - exp(-r t))``
* washout: linear rise to ``b + A`` at ``t_peak`` then linear decay
* plateau: washout with zero decay
"""
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .exceptions import SpecError
from .volume import DynamicVolume, Mask3D

__all__ = ["CurveParams", "PhantomSpec", "generate", "persistent_curve", "washout_curve",
           "frame_times", "load_spec"]


@dataclass(frozen=True)
class CurveParams:
    """Kinetic parameters of one tissue class.

    ``kind`` is 'persistent', 'washout' or 'plateau'. ``uptake`` is the
    enhancement amplitude, ``rate`` the persistent uptake rate (1/s),
    ``peak_time`` the washout/plateau peak (s) and ``washout_slope`` the
    post-peak decay (intensity/s).
    """

    kind: str = "persistent"
    uptake: float = 40.0
    rate: float = 0.01
    peak_time: float = 60.0
    washout_slope: float = 0.0

    def __post_init__(self):
        if self.kind not in ("persistent", "washout", "plateau"):
            raise SpecError(f"unknown curve kind {self.kind!r}")
        for f in ("uptake", "rate", "peak_time", "washout_slope"):
            if not np.isfinite(getattr(self, f)):
                raise SpecError(f"{f} must be finite")
        if self.kind != "persistent" and self.peak_time <= 0:
            raise SpecError("peak_time must be positive")


def _default_tissues():
    return {
        "fat": CurveParams("persistent", uptake=15.0, rate=0.004),
        "fibroglandular": CurveParams("persistent", uptake=55.0, rate=0.008),
        "benign_focus": CurveParams("persistent", uptake=90.0, rate=0.04),
        "lesion_washout": CurveParams("washout", uptake=110.0, peak_time=30.0, washout_slope=0.25),
        "lesion_plateau": CurveParams("plateau", uptake=90.0, peak_time=50.0),
        "chest": CurveParams("persistent", uptake=30.0, rate=0.02),
        "heart": CurveParams("washout", uptake=250.0, peak_time=20.0, washout_slope=0.6),
    }


@dataclass
class PhantomSpec:
    """Parameters of one synthetic case. All randomness derives from ``seed``."""

    dims: tuple = (48, 40, 16)
    nt: int = 10
    dt: float = 24.0
    spacing: tuple = (1.7, 1.7, 1.7)
    seed: int = 0
    # pre-contrast intensities
    air_level: float = 5.0
    breast_level: float = 100.0
    chest_level: float = 160.0
    heart_level: float = 180.0
    # geometry, in voxels
    chest_y: int = 26
    breast_offset: float = 12.0
    breast_radii: tuple = (10.0, 22.0, 7.0)
    heart_radius: float = 6.0
    # tissue mixture inside the breasts
    fibroglandular_fraction: float = 0.35
    fibroglandular_blob_radius: float = 2.5
    benign_focus_count: int = 14
    benign_focus_radius: tuple = (1.0, 2.5)
    # lesions: scattered clusters
    lesion_fraction: float = 0.004
    lesion_clusters: int = 4
    lesion_radius: tuple = (1.5, 3.0)
    lesion_spread: float = 5.0
    lesion_washout_share: float = 0.7
    # per-voxel kinetic jitter (log-normal sigma, truncated at 2 sigma) and additive noise
    kinetic_jitter: float = 0.3
    noise_sigma: float = 2.0
    tissues: dict = field(default_factory=_default_tissues)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.breast_radii = tuple(float(r) for r in self.breast_radii)
        self.benign_focus_radius = tuple(float(r) for r in self.benign_focus_radius)
        self.lesion_radius = tuple(float(r) for r in self.lesion_radius)
        tissues = _default_tissues()
        for k, v in (self.tissues or {}).items():
            if k not in tissues:
                raise SpecError(f"unknown tissue class {k!r}; expected one of {sorted(tissues)}")
            if not isinstance(v, CurveParams):
                # partial entries only change the fields they name
                v = CurveParams(**{**asdict(tissues[k]), **v})
            tissues[k] = v
        self.tissues = tissues
        self.validate()

    def validate(self):
        if len(self.dims) != 3 or min(self.dims) < 3 or self.nt < 3:
            raise SpecError("need dims >= 3 per axis and nt >= 3")
        if not 0.0 < self.lesion_fraction < 0.2:
            raise SpecError(f"lesion_fraction must be in (0, 0.2), got {self.lesion_fraction}")
        if not 0 < self.chest_y < self.dims[1] - 1:
            raise SpecError("chest_y must leave room for breasts and chest")
        if self.noise_sigma < 0 or not np.isfinite(self.noise_sigma):
            raise SpecError("noise_sigma must be finite and >= 0")
        if self.lesion_clusters < 1:
            raise SpecError("need at least one lesion cluster")

    def to_dict(self):
        d = asdict(self)
        d["tissues"] = {k: asdict(v) for k, v in self.tissues.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown phantom spec keys: {sorted(unknown)}")
        return cls(**d)


def load_spec(path):
    with open(path) as fh:
        return PhantomSpec.from_dict(json.load(fh))


def frame_times(nt, dt):
    """Seconds since contrast arrival; frame 0 is pre-contrast (t = 0)."""
    return np.arange(nt) * float(dt)


def persistent_curve(t, base, uptake, rate):
    t = np.asarray(t, dtype=np.float64)
    return base + uptake * (1.0 - np.exp(-rate * t))


def washout_curve(t, base, uptake, peak_time, slope):
    t = np.asarray(t, dtype=np.float64)
    rise = base + uptake * np.minimum(t / peak_time, 1.0)
    return rise - slope * np.maximum(t - peak_time, 0.0)


def _curves(params, base, t, jitter):
    """Curves for ``len(base)`` voxels; ``jitter`` is a (n, 3) log-normal factor array."""
    up = params.uptake * jitter[:, 0]
    if params.kind == "persistent":
        rate = params.rate * jitter[:, 1]
        return persistent_curve(t[None, :], base[:, None], up[:, None], rate[:, None])
    peak = params.peak_time * jitter[:, 1]
    slope = 0.0 if params.kind == "plateau" else params.washout_slope * jitter[:, 2]
    slope = np.broadcast_to(slope, base.shape)
    return washout_curve(t[None, :], base[:, None], up[:, None], peak[:, None], slope[:, None])


def _ellipsoid(grid, center, radii):
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)) <= 1.0


def _balls(grid, centers, radii, shape):
    out = np.zeros(shape, dtype=bool)
    for c, r in zip(centers, radii):
        out |= sum((g - ci) ** 2 for g, ci in zip(grid, c)) <= r * r
    return out


def generate(spec):
    """Build one phantom case.

    Returns
    -------
    volume : DynamicVolume
    truth : Mask3D
        Lesion voxels.
    kept_region : Mask3D
        Breast voxels, the region preprocessing should retain.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    nx, ny, nz = spec.dims
    grid = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    gx, gy, gz = grid
    cx = nx // 2
    cz = (nz - 1) / 2.0
    t = frame_times(spec.nt, spec.dt)

    # breasts: half ellipsoids anterior to the chest wall, mirrored about cx
    rx, ry, rz = spec.breast_radii
    breast = np.zeros(spec.dims, dtype=bool)
    for sgn in (-1, 1):
        breast |= _ellipsoid(grid, (cx + sgn * spec.breast_offset, spec.chest_y, cz), (rx, ry, rz))
    breast &= gy <= spec.chest_y
    half = min(cx, nx - 1 - cx)
    chest = (gy > spec.chest_y) & (np.abs(gx - cx) <= half)
    heart = chest & _ellipsoid(grid, (cx, spec.chest_y + 1 + spec.heart_radius, cz),
                               (spec.heart_radius,) * 3)

    bidx = np.argwhere(breast)
    if bidx.shape[0] == 0:
        raise SpecError("breast geometry is empty")
    n_lesion = int(round(spec.lesion_fraction * np.prod(spec.dims)))
    if not 0 < n_lesion < bidx.shape[0] // 2:
        raise SpecError(f"lesion fraction gives {n_lesion} voxels for {bidx.shape[0]} breast voxels")

    # fibroglandular pattern: random blobs until the target share is covered
    fg = np.zeros(spec.dims, dtype=bool)
    target_fg = spec.fibroglandular_fraction * bidx.shape[0]
    while (fg & breast).sum() < target_fg:
        c = bidx[rng.integers(bidx.shape[0])]
        fg |= _balls(grid, [c], [spec.fibroglandular_blob_radius], spec.dims)
    fg &= breast

    # lesions: clusters of balls around a few seeds, then exact count by
    # ranking breast voxels on normalized distance to the nearest ball
    interior = bidx[bidx[:, 1] <= spec.chest_y - 2]
    seeds = interior[rng.integers(interior.shape[0], size=spec.lesion_clusters)]
    centers, radii = [], []
    for s in seeds:
        for _ in range(3):
            centers.append(s + rng.normal(0.0, spec.lesion_spread / 2.0, size=3))
            radii.append(rng.uniform(*spec.lesion_radius))
    centers = np.array(centers)
    radii = np.array(radii)
    d = np.min(np.linalg.norm(bidx[:, None, :] - centers[None], axis=2) / radii[None], axis=1)
    d += rng.uniform(0.0, 0.35, size=d.shape)  # ragged borders
    d[bidx[:, 1] > spec.chest_y - 1] = np.inf
    lesion_idx = bidx[np.argsort(d, kind="stable")[:n_lesion]]
    lesion = np.zeros(spec.dims, dtype=bool)
    lesion[tuple(lesion_idx.T)] = True

    focus_seeds = bidx[rng.integers(bidx.shape[0], size=spec.benign_focus_count)]
    focus_r = rng.uniform(*spec.benign_focus_radius, size=spec.benign_focus_count)
    focus = _balls(grid, focus_seeds, focus_r, spec.dims) & breast & ~lesion

    # pre-contrast intensities; identical across breast tissue classes
    base = np.full(spec.dims, spec.air_level)
    base[breast] = spec.breast_level
    base[chest] = spec.chest_level
    base[heart] = spec.heart_level

    data = np.repeat(base[..., None], spec.nt, axis=3)
    tissue = spec.tissues
    wash = rng.random(spec.dims) < spec.lesion_washout_share
    labels = [
        ("fat", breast & ~fg & ~focus & ~lesion),
        ("fibroglandular", fg & ~focus & ~lesion),
        ("benign_focus", focus),
        ("lesion_washout", lesion & wash),
        ("lesion_plateau", lesion & ~wash),
        ("chest", chest & ~heart),
        ("heart", heart),
    ]
    for name, sel in labels:
        n = int(sel.sum())
        if n == 0:
            continue
        # truncated at 2 sigma so no voxel loses its tissue character entirely
        jit = np.exp(spec.kinetic_jitter * np.clip(rng.normal(size=(n, 3)), -2.0, 2.0))
        data[sel] = _curves(tissue[name], base[sel], t, jit)

    if spec.noise_sigma > 0:
        data = data + rng.normal(0.0, spec.noise_sigma, size=data.shape)
    vol = DynamicVolume(data, spec.spacing, spec.dt)
    return vol, Mask3D(lesion, spec.spacing), Mask3D(breast, spec.spacing)
