from __future__ import annotations

import numpy as np
import pytest

from octoflow import octree as ot
from octoflow.hemo_bc import default_injection, synth_inflow_waveform
from octoflow.model import ModelConfig, SurrogateModel
from octoflow.vasctree import BranchSegment, TreeGenConfig, VesselTree, generate_tree, sample_lumen_points

# Small enough for fast tests; keeps the (2, 3, 4, 6) encoder layout.
TINY = ModelConfig(latent_dim=4, unet_channels=(4, 4, 4, 4), head_hidden=8, trunk_width=8)

# Small run config used by train/cli tests.
SMALL_RUN = {
    "n_generations_choices": (1,),
    "spacing_mm": 0.8,
    "latent_dim": 4,
    "unet_channels": (4, 4, 4, 4),
    "head_hidden": 8,
    "trunk_width": 8,
    "batch_spatial_points": 256,
    "batch_time_points": 4,
    "max_epochs": 2,
}


def cylinder(radius=1.0, length=10.0) -> VesselTree:
    return VesselTree((BranchSegment((0.0, 0.0, 0.0), (0.0, 0.0, length), radius, radius, None),))


def bifurcation(r_parent=2.0, r_a=1.5, r_b=1.0) -> VesselTree:
    return VesselTree((
        BranchSegment((0, 0, 0), (0, 0, 10), r_parent, r_parent, None),
        BranchSegment((0, 0, 10), (5, 0, 18), r_a, r_a, 0),
        BranchSegment((0, 0, 10), (-5, 0, 18), r_b, r_b, 0),
    ))


@pytest.fixture(scope="session")
def small_tree():
    return generate_tree(TreeGenConfig(n_generations=1), seed=3)


@pytest.fixture(scope="session")
def small_cloud(small_tree):
    return sample_lumen_points(small_tree, 0.6, seed=3)


@pytest.fixture(scope="session")
def small_octree(small_cloud):
    return ot.build(small_cloud)


@pytest.fixture(scope="session")
def waveform():
    return synth_inflow_waveform(4.4, 885.0, "young")


@pytest.fixture(scope="session")
def injection(waveform):
    return default_injection(waveform)


@pytest.fixture
def tiny_model():
    return SurrogateModel(TINY, seed=1)


def block_octree(n=8, max_depth=10):
    """Octree whose finest level is a fully occupied n^3 block of cells.

    Points sit at cell centers of a block placed so that, with the root cube
    centered at the centroid, it is aligned to the finest grid.
    """
    cfg = ot.OctreeConfig(max_depth)
    g = np.stack(np.meshgrid(*[np.arange(n)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    pts = (g + 0.5) * cfg.finest_pitch
    tree = ot.build(pts, cfg)
    return tree, pts
