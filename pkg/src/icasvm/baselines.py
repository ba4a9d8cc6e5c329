"""Signal-enhancement-ratio detectors used as reference methods."""
import numpy as np
from scipy import ndimage

from .exceptions import ArgumentError

__all__ = ["ser_map", "derivative_ser_map", "laplacian", "default_frames"]

EPS_REL = 1e-9


def default_frames(nt):
    """First post-contrast frame and last frame."""
    return 1, nt - 1


def _check_frames(vol, t_first_post, t_final):
    if not 0 < t_first_post < t_final <= vol.nt - 1:
        raise ArgumentError(
            f"need 0 < t_first_post < t_final <= {vol.nt - 1}, got {t_first_post}, {t_final}")


def _ratio(pre, first, final, eps):
    den = final - pre
    undefined = np.abs(den) < eps
    with np.errstate(divide="ignore", invalid="ignore"):
        ser = (first - pre) / den
    ser[undefined] = np.nan
    return ser


def ser_map(vol, t_first_post=None, t_final=None):
    """Per-voxel ``(SI_1 - SI_0) / (SI_f - SI_0)``.

    Voxels whose denominator is below ``1e-9 * max|SI|`` are NaN.
    """
    d1, df = default_frames(vol.nt)
    t_first_post = d1 if t_first_post is None else t_first_post
    t_final = df if t_final is None else t_final
    _check_frames(vol, t_first_post, t_final)
    eps = EPS_REL * np.abs(vol.data).max()
    return _ratio(vol.frame(0), vol.frame(t_first_post), vol.frame(t_final), eps)


def laplacian(frame):
    """6-neighbour discrete Laplacian with half-sample reflective boundaries."""
    return ndimage.laplace(np.asarray(frame, dtype=np.float64), mode="reflect")


def derivative_ser_map(vol, t_first_post=None, t_final=None):
    """SER computed on Laplacian-filtered pre, first-post and final frames."""
    d1, df = default_frames(vol.nt)
    t_first_post = d1 if t_first_post is None else t_first_post
    t_final = df if t_final is None else t_final
    _check_frames(vol, t_first_post, t_final)
    eps = EPS_REL * np.abs(vol.data).max()
    return _ratio(laplacian(vol.frame(0)), laplacian(vol.frame(t_first_post)),
                  laplacian(vol.frame(t_final)), eps)
