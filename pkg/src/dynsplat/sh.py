"""Real spherical-harmonic color evaluation (degrees 0-3)."""
import numpy as np

from . import autodiff as ad

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)


def num_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def degree_from_coeffs(k: int) -> int:
    d = int(round(np.sqrt(k))) - 1
    if (d + 1) ** 2 != k or not 0 <= d <= 3:
        raise ValueError(f"{k} is not a valid SH coefficient count")
    return d


def sh_basis(dirs, degree: int):
    """Basis values ``(..., K)`` for unit directions ``(..., 3)``."""
    x, y, z = (dirs[..., 0], dirs[..., 1], dirs[..., 2])
    one = x * 0.0 + 1.0
    terms = [C0 * one]
    if degree >= 1:
        terms += [-C1 * y, C1 * z, -C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        terms += [
            C2[0] * (x * y),
            C2[1] * (y * z),
            C2[2] * (2.0 * zz - xx - yy),
            C2[3] * (x * z),
            C2[4] * (xx - yy),
        ]
    if degree >= 3:
        terms += [
            C3[0] * y * (3.0 * xx - yy),
            C3[1] * (x * y) * z,
            C3[2] * y * (4.0 * zz - xx - yy),
            C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            C3[4] * x * (4.0 * zz - xx - yy),
            C3[5] * z * (xx - yy),
            C3[6] * x * (xx - 3.0 * yy),
        ]
    return ad.stack(terms, axis=-1)


def evaluate_sh(sh_coeffs, view_dir):
    """RGB from ``(..., K, 3)`` coefficients, clamped to [0, 1] after +0.5.

    Works on plain arrays or tape variables.
    """
    k = np.shape(ad.value(sh_coeffs))[-2]
    basis = sh_basis(view_dir, degree_from_coeffs(k))
    basis = ad.reshape(basis, np.shape(ad.value(basis)) + (1,))
    rgb = (sh_coeffs * basis).sum(axis=-2)
    return ad.clip(rgb + 0.5, 0.0, 1.0)


def rgb_to_dc(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / C0
