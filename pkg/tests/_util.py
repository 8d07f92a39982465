"""Helpers shared by the test modules."""

import numpy as np

from ats.core_math import finite_difference_gradient, relative_error


def numeric_grads(loss, params: dict, h: float = 1e-5) -> dict:
    """Central-difference gradient of ``loss(params)`` for every entry of ``params``."""
    out = {}
    for key, value in params.items():
        shape = np.shape(value)

        def f(flat, key=key, shape=shape):
            trial = dict(params)
            trial[key] = flat.reshape(shape)
            return loss(trial)

        out[key] = finite_difference_gradient(f, np.asarray(value, dtype=np.float64).ravel(), h).reshape(shape)
    return out


# Central differences at h=1e-5 carry ~1e-11 absolute round-off, which would
# swamp the relative error of entries that are themselves ~1e-6. Entries below
# this floor are effectively compared with an absolute tolerance.
GRAD_FLOOR = 1e-5


def scaled_error(analytic, numeric) -> float:
    return relative_error(analytic, numeric, floor=GRAD_FLOOR)


def worst_error(analytic: dict, numeric: dict) -> tuple[str, float]:
    errs = {k: scaled_error(analytic[k], numeric[k]) for k in numeric}
    key = max(errs, key=errs.get)
    return key, errs[key]
