"""nfseg: self-supervised object segmentation on small neural radiance fields.

Submodules
----------
scene        scene/feature-map IO and validation
synthetic    procedural multi-view test scenes
rays         camera rays, strided patches, stratified samples
field        the trainable radiance+segmentation network
render       differentiable volumetric rendering
correspond   correspondence volumes and patch-pair discovery
losses       photometric and collaborative contrastive losses
training     two-stage schedule, optimizer, checkpoints
cluster_eval k-means segmentation and evaluation metrics
cli          command-line entry point

Submodules import lazily so the CLI can honor NFSEG_THREADS before the
numerics stack loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("scene", "synthetic", "rays", "field", "render", "correspond",
               "losses", "training", "cluster_eval", "cli", "container")


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
