"""Mesh container, file I/O, landmarks, closest-point queries and similarity alignment."""
from .align import Similarity, similarity_align, similarity_from_points
from .closest import BVH, SurfaceHit, closest_point_on_triangles, get_bvh, nearest_point_on_surface
from .io import load_mesh, save_mesh, save_mesh_with_scalars, scalars_to_colors
from .landmarks import LandmarkError, LandmarkSet, common_names, read_landmarks, write_landmarks
from .mesh import Mesh, MeshError

__all__ = [
    "BVH",
    "LandmarkError",
    "LandmarkSet",
    "Mesh",
    "MeshError",
    "Similarity",
    "SurfaceHit",
    "closest_point_on_triangles",
    "common_names",
    "get_bvh",
    "load_mesh",
    "nearest_point_on_surface",
    "read_landmarks",
    "save_mesh",
    "save_mesh_with_scalars",
    "scalars_to_colors",
    "similarity_align",
    "similarity_from_points",
    "write_landmarks",
]
