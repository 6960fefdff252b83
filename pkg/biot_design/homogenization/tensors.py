"""
Tensor storage conventions and coefficient records.

Fourth-order tensors with minor and major symmetries are stored as 6x6 arrays of their
tensor entries, X[I, J] = X_ijkl, with the Voigt pair order 11, 22, 33, 23, 13, 12.
Strains are paired with these arrays in engineering form (doubled shears), stresses in
plain form. Inversion and quadratic forms go through the orthonormal Mandel basis.
"""
from dataclasses import dataclass, field, replace
from typing import Dict

import numpy as np

VOIGT_PAIRS = ((0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1))
VOIGT_INDEX = np.array([[0, 5, 4], [5, 1, 3], [4, 3, 2]])
MANDEL_WEIGHTS = np.array([1.0, 1.0, 1.0, np.sqrt(2.0), np.sqrt(2.0), np.sqrt(2.0)])
ENGINEERING_WEIGHTS = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])

_ROWS = np.array([p[0] for p in VOIGT_PAIRS])
_COLS = np.array([p[1] for p in VOIGT_PAIRS])


def voigt_to_tensor(a: np.ndarray) -> np.ndarray:
    return a[..., VOIGT_INDEX[:, :, None, None], VOIGT_INDEX[None, None, :, :]]


def tensor_to_voigt(t: np.ndarray) -> np.ndarray:
    return t[..., _ROWS[:, None], _COLS[:, None], _ROWS[None, :], _COLS[None, :]]


def strain_to_voigt(e: np.ndarray) -> np.ndarray:
    """Engineering Voigt vector of a (batch of) 3x3 strain(s); the input is symmetrized."""
    sym = 0.5 * (e + np.swapaxes(e, -1, -2))
    return sym[..., _ROWS, _COLS] * ENGINEERING_WEIGHTS


def voigt_to_stress(s: np.ndarray) -> np.ndarray:
    return s[..., VOIGT_INDEX]


def stress_to_voigt(s: np.ndarray) -> np.ndarray:
    return s[..., _ROWS, _COLS]


def voigt_to_strain(e: np.ndarray) -> np.ndarray:
    return (e / ENGINEERING_WEIGHTS)[..., VOIGT_INDEX]


def to_mandel(a: np.ndarray) -> np.ndarray:
    return a * MANDEL_WEIGHTS[:, None] * MANDEL_WEIGHTS[None, :]


def from_mandel(a: np.ndarray) -> np.ndarray:
    return a / MANDEL_WEIGHTS[:, None] / MANDEL_WEIGHTS[None, :]


def sym_to_mandel(m: np.ndarray) -> np.ndarray:
    return m[..., _ROWS, _COLS] * MANDEL_WEIGHTS


def mandel_to_sym(v: np.ndarray) -> np.ndarray:
    return (v / MANDEL_WEIGHTS)[..., VOIGT_INDEX]


def isotropic_stiffness(young: float, poisson: float) -> np.ndarray:
    """
    Isotropic elasticity in Voigt storage

    :param young: Young's modulus
    :param poisson: Poisson's ratio, in (-1, 0.5)
    :return: 6x6 array of tensor entries D_ijkl
    """
    if not -1.0 < poisson < 0.5 or young <= 0.0:
        raise ValueError(f"Invalid isotropic material: young={young}, poisson={poisson}")
    lam = young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson))
    mu = young / (2.0 * (1.0 + poisson))
    d = np.zeros((6, 6))
    d[:3, :3] = lam
    d[[0, 1, 2], [0, 1, 2]] += 2.0 * mu
    d[[3, 4, 5], [3, 4, 5]] = mu
    return d


def _axis_rotations(theta: np.ndarray):
    c1, c2, c3 = np.cos(theta)
    s1, s2, s3 = np.sin(theta)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, c1, -s1], [0.0, s1, c1]])
    ry = np.array([[c2, 0.0, s2], [0.0, 1.0, 0.0], [-s2, 0.0, c2]])
    rz = np.array([[c3, -s3, 0.0], [s3, c3, 0.0], [0.0, 0.0, 1.0]])
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -s1, -c1], [0.0, c1, -s1]])
    dry = np.array([[-s2, 0.0, c2], [0.0, 0.0, 0.0], [-c2, 0.0, -s2]])
    drz = np.array([[-s3, -c3, 0.0], [c3, -s3, 0.0], [0.0, 0.0, 0.0]])
    return rx, ry, rz, drx, dry, drz


def rotation_matrix(theta: np.ndarray) -> np.ndarray:
    """R = Rz(theta_3) Ry(theta_2) Rx(theta_1)."""
    rx, ry, rz, _, _, _ = _axis_rotations(np.asarray(theta, dtype=float))
    return rz @ ry @ rx


def rotation_derivatives(theta: np.ndarray) -> np.ndarray:
    """dR/dtheta_k stacked along the first axis."""
    rx, ry, rz, drx, dry, drz = _axis_rotations(np.asarray(theta, dtype=float))
    return np.stack([rz @ ry @ drx, rz @ dry @ rx, drz @ ry @ rx])


def rotate_second(m: np.ndarray, r: np.ndarray) -> np.ndarray:
    return np.einsum("ia,...ab,jb->...ij", r, m, r)


def rotate_fourth(a: np.ndarray, r: np.ndarray) -> np.ndarray:
    t = voigt_to_tensor(a)
    t = np.einsum("ia,jb,kc,ld,...abcd->...ijkl", r, r, r, r, t, optimize=True)
    return tensor_to_voigt(t)


def rotate_second_derivative(m: np.ndarray, r: np.ndarray, dr: np.ndarray) -> np.ndarray:
    return np.einsum("ia,...ab,jb->...ij", dr, m, r) + np.einsum("ia,...ab,jb->...ij", r, m, dr)


def rotate_fourth_derivative(a: np.ndarray, r: np.ndarray, dr: np.ndarray) -> np.ndarray:
    t = voigt_to_tensor(a)
    d = (
        np.einsum("ia,jb,kc,ld,...abcd->...ijkl", dr, r, r, r, t, optimize=True)
        + np.einsum("ia,jb,kc,ld,...abcd->...ijkl", r, dr, r, r, t, optimize=True)
        + np.einsum("ia,jb,kc,ld,...abcd->...ijkl", r, r, dr, r, t, optimize=True)
        + np.einsum("ia,jb,kc,ld,...abcd->...ijkl", r, r, r, dr, t, optimize=True)
    )
    return tensor_to_voigt(d)


@dataclass(frozen=True)
class HomCoefficients:
    """
    Homogenized poroelastic coefficients of one periodic cell.

    A is the drained stiffness (Voigt storage), C the Biot stress coupling, N the Biot
    compressibility of the skeleton, K the geometry-only permeability and phi the
    porosity. gamma and viscosity are data of the fluid carried along for B, M and the
    macroscopic Darcy law.
    """

    A: np.ndarray
    C: np.ndarray
    N: float
    K: np.ndarray
    phi: float
    gamma: float = 0.0
    viscosity: float = 1.0

    @property
    def B(self) -> np.ndarray:
        return self.C + self.phi * np.eye(3)

    @property
    def M(self) -> float:
        return self.N + self.phi * self.gamma

    def with_tensors(self, **tensors) -> "HomCoefficients":
        return replace(self, **tensors)


@dataclass(frozen=True)
class UndrainedConstants:
    CC: np.ndarray
    S: np.ndarray
    K_bulk: float


@dataclass(frozen=True)
class RotatedCoefficients:
    """Rotated coefficients plus d/dtheta_k of each rotated tensor (leading axis k)."""

    coefficients: HomCoefficients
    derivatives: Dict[str, np.ndarray] = field(default_factory=dict)
