"""
Shared fixtures: a tiny field configuration and small synthetic datasets.
"""

import os
import sys

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from semtemplate.core.config import FieldConfig, LossWeights, RunConfig, TrainConfig
from semtemplate.core.fields import TemplateModel
from semtemplate.geometry.synth import generate_family


@pytest.fixture
def tiny_field() -> FieldConfig:
    return FieldConfig(
        latent_dim=3,
        prior_dim=2,
        template_hidden=6,
        template_layers=3,
        deform_hidden=6,
        deform_layers=3,
        hyper_hidden=4,
        hyper_layers=2,
        omega0=3.0,
    )


@pytest.fixture(scope="session")
def spheres():
    """Four two-part blobs with few points each"""
    return generate_family("sphere", 4, seed=0, n_surface=48, n_query=48)


@pytest.fixture
def tiny_model(tiny_field, spheres) -> TemplateModel:
    return TemplateModel(tiny_field, n_parts=2, n_shapes=len(spheres))


@pytest.fixture
def tiny_run(tiny_field, tmp_path) -> RunConfig:
    return RunConfig(
        dataset=str(tmp_path / "data"),
        output_dir=str(tmp_path / "run"),
        run_db=None,
        mesh_resolution=8,
        field=tiny_field,
        train=TrainConfig(
            epochs=5, max_steps=3, batch_size=2, surface_points=16, query_points=16,
            lr=1e-3, seed=0, fit_steps=2,
        ),
        weights=LossWeights(),
    )


@pytest.fixture
def still_params():
    """Zero the hypernetworks of a parameter vector so every shape maps onto the template unchanged"""
    def zero(model: TemplateModel, params):
        params = params.copy()
        for name in params.layout.names:
            if name.startswith("hyper."):
                params.block(name)[...] = 0.0
        return params

    return zero


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
