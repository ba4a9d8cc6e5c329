"""Smoothing and chest-midplane cropping of dynamic volumes."""
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from .exceptions import ArgumentError, GeometryError
from .volume import DynamicVolume, Mask3D

__all__ = ["CropPlanes", "gaussian_kernel", "gaussian_smooth", "symmetry_profile",
           "find_midplanes", "crop_chest", "preprocess_volume"]

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


@dataclass(frozen=True)
class CropPlanes:
    sagittal_mid: int
    coronal_cut: int

    def validate(self, dims):
        nx, ny = dims[0], dims[1]
        if not (0 <= self.sagittal_mid < nx and 0 <= self.coronal_cut < ny):
            raise ArgumentError(f"{self} outside volume dims {dims}")


def gaussian_kernel(fwhm_voxels):
    """Normalized 1D Gaussian taps for a given FWHM, truncated at +-4 sigma."""
    fwhm = float(fwhm_voxels)
    if not math.isfinite(fwhm) or fwhm <= 0:
        raise ArgumentError(f"fwhm must be a positive finite number, got {fwhm_voxels!r}")
    sigma = fwhm * FWHM_TO_SIGMA
    radius = int(math.floor(4.0 * sigma))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (k / sigma) ** 2)
    return w / w.sum()


def gaussian_smooth(vol, fwhm_voxels=2.0):
    """Separable 3D Gaussian smoothing of every frame.

    Boundaries use half-sample reflection, so each frame's sum is preserved.
    """
    w = gaussian_kernel(fwhm_voxels)
    out = vol.data
    for axis in range(3):
        out = ndimage.correlate1d(out, w, axis=axis, mode="reflect")
    return vol.with_data(out)


def symmetry_profile(frame):
    """Self-convolution of a 3D frame along x, summed over y and z.

    Entry ``s`` equals sum_i I(i) * I(s - i), i.e. the reflection-symmetry
    score of the (possibly half-integer) plane x = s / 2.
    """
    nx = frame.shape[0]
    prof = np.zeros(2 * nx - 1)
    for s in range(2 * nx - 1):
        lo, hi = max(0, s - nx + 1), min(s, nx - 1)
        i = np.arange(lo, hi + 1)
        prof[s] = np.sum(frame[i] * frame[s - i])
    return prof


def find_midplanes(vol, smooth_fwhm=None):
    """Locate the body symmetry plane and the chest-wall cut on frame 0.

    ``sagittal_mid`` is ``floor(s*/2)`` where ``s*`` maximizes
    :func:`symmetry_profile`. ``coronal_cut`` is the y maximizing the mean
    absolute forward difference along y on the midplane slice. Ties go to
    the smaller index.
    """
    nx, ny, _ = vol.dims
    if nx < 3 or ny < 3:
        raise GeometryError(f"need >= 3 planes along x and y, got dims {vol.dims}")
    if smooth_fwhm:
        vol = gaussian_smooth(vol, smooth_fwhm)
    frame = vol.frame(0)
    s_best = int(np.argmax(symmetry_profile(frame)))
    mid = s_best // 2
    sl = frame[mid]
    grad = np.abs(np.diff(sl, axis=0)).mean(axis=1)
    cut = int(np.argmax(grad))
    return CropPlanes(mid, cut)


def crop_chest(vol, planes):
    """Keep-mask excluding everything posterior to the chest wall and the
    background.

    Background is frame-0 intensity below an Otsu threshold computed over the
    anterior region (``y <= coronal_cut``) only, so bright chest tissue does
    not bias the threshold.
    """
    planes.validate(vol.dims)
    frame = vol.frame(0)
    keep = np.zeros(vol.dims, dtype=bool)
    ant = frame[:, : planes.coronal_cut + 1, :]
    if np.ptp(ant) > 0:
        thr = threshold_otsu(ant.ravel())
        keep[:, : planes.coronal_cut + 1, :] = ant > thr
    else:
        keep[:, : planes.coronal_cut + 1, :] = True
    return Mask3D(keep, vol.spacing)


def preprocess_volume(vol, fwhm_voxels=2.0, smooth_for_planes=True):
    """Smooth, find the crop planes and build the keep-mask.

    Returns
    -------
    smoothed : DynamicVolume
    keep : Mask3D
    planes : CropPlanes
    """
    smoothed = gaussian_smooth(vol, fwhm_voxels) if fwhm_voxels else vol
    planes = find_midplanes(smoothed if smooth_for_planes else vol)
    keep = crop_chest(smoothed, planes)
    return smoothed, keep, planes
