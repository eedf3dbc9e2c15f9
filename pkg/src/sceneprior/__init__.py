"""Learning 3D scene priors from multi-view 2D instance masks.

A unit-norm latent is decoded by an order-agnostic autoregressive transformer
into labelled, boxed and meshed objects; training sees only projected boxes
and silhouettes, rendered differentiably and compared after bipartite
matching.
"""
__version__ = "0.1.0"

from .latent import AnchorSet, compose_latent, init_anchors, random_latent, slerp
from .model import ModelConfig, ScenePrior, load_model, save_model
from .scene import CategoryTable, Mesh, ObjectInstance, Scene, make_icosphere, read_scene, write_scene

__all__ = [
    "AnchorSet", "CategoryTable", "Mesh", "ModelConfig", "ObjectInstance", "Scene", "ScenePrior",
    "compose_latent", "init_anchors", "load_model", "make_icosphere", "random_latent", "read_scene",
    "save_model", "slerp", "write_scene",
]
