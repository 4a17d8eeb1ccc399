"""Independent reference computations used as test oracles.

Nothing here imports the package's Hamiltonian code: spin matrices are built
in ascending-m order from the ladder formula and diagonalised with LAPACK.
"""
import math

import numpy as np

MU_B_OVER_H = 13.996244936e9


def spin_ops(s):
    """(Sz, S+, S-) in the ascending basis m = -s..s."""
    n = int(round(2 * s)) + 1
    m = np.array([-s + k for k in range(n)])
    sz = np.diag(m).astype(complex)
    sp = np.zeros((n, n), dtype=complex)
    for k in range(n - 1):
        # <m+1| S+ |m> = sqrt(s(s+1) - m(m+1))
        sp[k + 1, k] = math.sqrt(s * (s + 1) - m[k] * (m[k] + 1))
    return sz, sp, sp.conj().T


def stevens(s, k, q):
    sz, sp, sm = spin_ops(s)
    n = sz.shape[0]
    one = np.eye(n)
    x = s * (s + 1)
    z2 = sz @ sz
    z4 = z2 @ z2
    if (k, q) == (2, 0):
        return 3 * z2 - x * one
    if (k, q) == (4, 0):
        return 35 * z4 - (30 * x - 25) * z2 + (3 * x * x - 6 * x) * one
    if (k, q) == (4, 4):
        p4 = np.linalg.matrix_power(sp, 4)
        return 0.5 * (p4 + p4.conj().T)
    if (k, q) == (6, 0):
        z6 = z4 @ z2
        return (231 * z6 - (315 * x - 735) * z4 + (105 * x * x - 525 * x + 294) * z2
                + (-5 * x**3 + 40 * x * x - 60 * x) * one)
    if (k, q) == (6, 4):
        p4 = np.linalg.matrix_power(sp, 4)
        a = 11 * z2 - (x + 38) * one
        p = p4 + p4.conj().T
        return 0.25 * (p @ a + a @ p)
    raise KeyError((k, q))


def hamiltonian(s, g, coeffs_ghz, b):
    sz = spin_ops(s)[0]
    h = g * MU_B_OVER_H * b * sz
    for (k, q), c in coeffs_ghz.items():
        h = h + 1e9 * c * stevens(s, k, q)
    return h


def levels(s, g, coeffs_ghz, b):
    return np.linalg.eigvalsh(hamiltonian(s, g, coeffs_ghz, b))


GD = (3.5, 1.99, {(2, 0): -0.9215, (4, 0): -1.139e-3, (4, 4): -7.015e-3, (6, 0): 5.935e-7, (6, 4): 4.747e-7})


def lorentzian_dip(f, f0, gamma, depth, base=1.0):
    return base - depth * (gamma / 2) ** 2 / ((gamma / 2) ** 2 + (f - f0) ** 2)


def dispersive_shift(fp, fs, g):
    """Second-order pull of the photon mode: -g^2 / (fs - fp)."""
    return -g * g / (fs - fp)
