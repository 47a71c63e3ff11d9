"""Garment mesh geometry: registration, re-meshing, PCA shape space,
interpolated skinning, forward-only neural operators and evaluation."""

from .errors import (
    GarmeshError,
    InputError,
    MeshError,
    NumericalError,
    TopologyMismatchError,
)
from .mesh import Mesh, build_laplacian, extract_boundary_loops, load_obj, save_obj

__version__ = "0.1.0"

__all__ = [
    "GarmeshError",
    "InputError",
    "Mesh",
    "MeshError",
    "NumericalError",
    "TopologyMismatchError",
    "build_laplacian",
    "extract_boundary_loops",
    "load_obj",
    "save_obj",
]
