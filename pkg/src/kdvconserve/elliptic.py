"""Complete elliptic integral K(m) and the Jacobi elliptic cn(z|m), the two
special functions entering the cnoidal-wave exact solution.

Both use arithmetic-geometric mean iteration; cn additionally runs the
descending Landen transformation with amplitude back-substitution
(the classical AGM scheme for the Jacobi amplitude). The parameter
convention is cn(z|m) with m the *parameter* (not the modulus sqrt(m)).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

__all__ = ["EllipticModulus", "elliptic_K", "jacobi_cn", "jacobi_sn_cn_dn"]

_AGM_TOL = 1e-16
_AGM_MAX_ITER = 40


@dataclass(frozen=True)
class EllipticModulus:
    """Elliptic parameter m in [0, 1)."""

    m: float

    def __post_init__(self):
        if not 0.0 <= self.m < 1.0:
            raise ValueError(f"elliptic parameter must lie in [0, 1), got {self.m}")


def _param(m: Union[float, EllipticModulus]) -> float:
    m = m.m if isinstance(m, EllipticModulus) else float(m)
    if not 0.0 <= m < 1.0:
        raise ValueError(f"elliptic parameter must lie in [0, 1), got {m}")
    return m


def elliptic_K(m: Union[float, EllipticModulus]) -> float:
    """K(m) = int_0^{pi/2} dtheta / sqrt(1 - m sin^2 theta) by AGM."""
    m = _param(m)
    a, b = 1.0, np.sqrt(1.0 - m)
    for _ in range(_AGM_MAX_ITER):
        if abs(a - b) <= _AGM_TOL * a:
            break
        a, b = 0.5 * (a + b), np.sqrt(a * b)
    return float(np.pi / (2.0 * a))


def jacobi_sn_cn_dn(z, m: Union[float, EllipticModulus]):
    """(sn, cn, dn)(z|m) for real z (scalar or array) via descending Landen
    transformation; periodic in z with period 4K(m)."""
    m = _param(m)
    z = np.asarray(z, dtype=float)
    if m == 0.0:
        return np.sin(z), np.cos(z), np.ones_like(z)

    a_seq = [1.0]
    c_seq = [np.sqrt(m)]
    b = np.sqrt(1.0 - m)
    for _ in range(_AGM_MAX_ITER):
        a, c = 0.5 * (a_seq[-1] + b), 0.5 * (a_seq[-1] - b)
        b = np.sqrt(a_seq[-1] * b)
        a_seq.append(a)
        c_seq.append(c)
        if abs(c) <= _AGM_TOL * a:
            break
    n = len(a_seq) - 1

    phi = (2.0**n) * a_seq[n] * z
    for i in range(n, 0, -1):
        phi = 0.5 * (phi + np.arcsin(np.clip(c_seq[i] / a_seq[i] * np.sin(phi), -1.0, 1.0)))
    sn = np.sin(phi)
    cn = np.cos(phi)
    # dn > 0 for m < 1, so the defining relation gives it stably for any z
    dn = np.sqrt(1.0 - m * sn * sn)
    return sn, cn, dn


def jacobi_cn(z, m: Union[float, EllipticModulus]):
    """cn(z|m) for real z, via the same AGM pass as sn and dn."""
    _, cn, _ = jacobi_sn_cn_dn(z, m)
    if np.ndim(z) == 0:
        return float(cn)
    return cn
