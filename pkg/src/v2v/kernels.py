"""Hot-loop backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
pure-Python ``_pykernels`` module. Set ``V2V_KERNELS=python`` to force the
fallback.
"""
import importlib
import os

_NAMES = {"cython": "v2v._ckernels", "python": "v2v._pykernels"}


def load(name):
    """Import a backend module by name (``"cython"`` or ``"python"``)."""
    return importlib.import_module(_NAMES[name])


def available():
    found = []
    for name in _NAMES:
        try:
            load(name)
        except ImportError:
            continue
        found.append(name)
    return found


def _select():
    if os.environ.get("V2V_KERNELS", "").lower() != "python":
        try:
            return "cython", load("cython")
        except ImportError:
            pass
    return "python", load("python")


BACKEND, impl = _select()

patch_cost = impl.patch_cost
compute_costs = impl.compute_costs
pm_iteration = impl.pm_iteration
vote = impl.vote
