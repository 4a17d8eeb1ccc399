"""Physical constants (SI, CODATA 2018 exact/recommended values).

Library code reads these as module attributes at call time, so
:func:`override` can swap them for a block (the CLI uses this for
``constants`` overrides in its config file).
"""
import contextlib
import math

#: Bohr magneton over Planck constant, Hz per tesla.
MU_B_OVER_H = 13.996244936e9
#: Planck constant, J s.
H = 6.62607015e-34
#: Vacuum permeability, N / A^2.
MU_0 = 1.25663706212e-6

_NAMES = ("MU_B_OVER_H", "H", "MU_0")


def hbar():
    return H / (2.0 * math.pi)


def mu_b():
    """Bohr magneton in J/T, consistent with ``MU_B_OVER_H`` and ``H``."""
    return MU_B_OVER_H * H


@contextlib.contextmanager
def override(**values):
    """Temporarily replace constants, e.g. ``override(MU_B_OVER_H=14e9)``."""
    g = globals()
    unknown = set(values) - set(_NAMES)
    if unknown:
        raise KeyError(f"unknown constant(s): {sorted(unknown)}; known: {list(_NAMES)}")
    saved = {k: g[k] for k in values}
    g.update({k: float(v) for k, v in values.items()})
    try:
        yield
    finally:
        g.update(saved)
