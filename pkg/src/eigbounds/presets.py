"""Built-in test domains with fixed initial triangulations."""

from __future__ import annotations

import json
import math
from importlib import resources

from .fem import ProblemCoefficients
from .mesh import Mesh, mesh_from_document

PRESETS = ("dumbbell", "square-dirichlet", "square-neumann-reaction")

_MESH_FILES = {
    "dumbbell": "dumbbell.json",
    "square-dirichlet": "square-dirichlet.json",
    "square-neumann-reaction": "square-neumann.json",
}


class PresetError(KeyError):
    pass


def preset_document(name: str) -> dict:
    if name not in _MESH_FILES:
        raise PresetError(f"unknown preset {name!r}; choose one of {', '.join(PRESETS)}")
    text = resources.files("eigbounds").joinpath("data").joinpath(_MESH_FILES[name]).read_text()
    return json.loads(text)


def preset_coefficients(name: str) -> ProblemCoefficients:
    if name == "dumbbell":
        return ProblemCoefficients.laplace(beta1=1.0, beta2=1.0)
    if name == "square-dirichlet":
        return ProblemCoefficients.laplace()
    if name == "square-neumann-reaction":
        return ProblemCoefficients.laplace(c=1.0)
    raise PresetError(f"unknown preset {name!r}; choose one of {', '.join(PRESETS)}")


def preset_domain(name: str) -> tuple[Mesh, ProblemCoefficients]:
    """Initial mesh and coefficients of a built-in problem.

    ``dumbbell``
        two squares of side pi joined by a channel of width pi/3, Dirichlet on
        the lower polyline, Neumann elsewhere, beta1 = beta2 = 1.
    ``square-dirichlet``
        Laplacian on (0, pi)^2 with Dirichlet boundary; eigenvalues m^2 + n^2.
    ``square-neumann-reaction``
        -Laplace u + u on (0, pi)^2 with Neumann boundary; eigenvalues 1 + m^2 + n^2.
    """
    return mesh_from_document(preset_document(name)), preset_coefficients(name)


def exact_eigenvalues(name: str, count: int) -> list[float] | None:
    """Leading exact eigenvalues of the square presets (None for the dumbbell)."""
    if name == "square-dirichlet":
        lo, shift = 1, 0.0
    elif name == "square-neumann-reaction":
        lo, shift = 0, 1.0
    elif name == "dumbbell":
        return None
    else:
        raise PresetError(f"unknown preset {name!r}")
    top = lo + math.isqrt(count) + 2
    vals = sorted(shift + m * m + n * n for m in range(lo, top + 1) for n in range(lo, top + 1))
    return [float(v) for v in vals[:count]]
