"""Pure NumPy implementations of the hot kernels.

These are the reference versions of the routines in ``_ckernels.pyx``. They
are selected automatically when the compiled extension is unavailable or
when ``WGMESR_PURE_PYTHON`` is set.
"""
import numpy as np


def jacobi_eigh(a_in, tol=1e-13, max_sweeps=100):
    """Cyclic Jacobi diagonalisation of a complex Hermitian matrix.

    Each rotation first removes the phase of the pivot ``a[p, q]`` with a
    diagonal unitary on column ``q`` and then applies the classic real
    symmetric Jacobi rotation, so the pivot is annihilated exactly.

    Parameters
    ----------
    a_in : (n, n) array_like
        Hermitian matrix. Only used as input; a copy is rotated in place.
    tol : float
        Stop once the off-diagonal Frobenius norm is below
        ``tol * ||A||_F``.
    max_sweeps : int
        Upper bound on full cyclic sweeps.

    Returns
    -------
    w : ndarray
        Eigenvalues in diagonal order (unsorted).
    v : ndarray
        Unitary matrix whose columns are the eigenvectors.
    sweeps : int
        Number of sweeps performed.
    converged : bool
    """
    a = np.array(a_in, dtype=np.complex128, copy=True)
    n = a.shape[0]
    v = np.eye(n, dtype=np.complex128)
    thresh2 = tol * tol * float(np.sum(np.abs(a) ** 2))
    iu = np.triu_indices(n, 1)
    sweep = 0
    converged = False
    while sweep < max_sweeps:
        off2 = 2.0 * float(np.sum(np.abs(a[iu]) ** 2))
        if off2 <= thresh2:
            converged = True
            break
        sweep += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                r = abs(apq)
                if r == 0.0:
                    continue
                ph = apq / r
                theta = (a[q, q].real - a[p, p].real) / (2.0 * r)
                t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                jpp, jpq = c, s
                jqp, jqq = -s * np.conj(ph), c * np.conj(ph)
                x, y = a[:, p].copy(), a[:, q].copy()
                a[:, p] = x * jpp + y * jqp
                a[:, q] = x * jpq + y * jqq
                x, y = a[p, :].copy(), a[q, :].copy()
                a[p, :] = np.conj(jpp) * x + np.conj(jqp) * y
                a[q, :] = np.conj(jpq) * x + np.conj(jqq) * y
                a[p, q] = a[q, p] = 0.0
                a[p, p] = a[p, p].real
                a[q, q] = a[q, q].real
                x, y = v[:, p].copy(), v[:, q].copy()
                v[:, p] = x * jpp + y * jqp
                v[:, q] = x * jpq + y * jqq
    return np.real(np.diag(a)).copy(), v, sweep, converged


def fano_eval(f_in, f0, gamma, q, amp, offset):
    f = np.asarray(f_in, dtype=np.float64).ravel()
    hw = 0.5 * gamma
    d = f - f0
    num = q * hw + d
    return amp * (1.0 - num * num / (hw * hw + d * d)) + offset
