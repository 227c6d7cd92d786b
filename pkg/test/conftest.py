import pytest
import os
import torch
from torch.func import functional_call
from pyrflow.io import (
    ConfigBundle,
    LossConfig,
    ModelConfig,
    SynthConfig,
    TrainConfig,
    write_config,
)
from pyrflow.data import generate_scenes, synth_rigid_scene


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(
        level_sizes=(64, 32, 16, 8),
        widths=(8, 8, 16, 16),
        backbone_k=8,
        weightnet_hidden=4,
        weightnet_width=4,
        heads=2,
        attention_width=8,
        position_width=8,
        embedding_width=16,
        str_k=4,
        cost_k_target=4,
        cost_k_source=4,
        predictor_k=4,
        predictor_widths=(16, 8),
    )


@pytest.fixture
def synth_config():
    return SynthConfig(object_count=2, points_per_object=48, seed=3)


@pytest.fixture
def scene_pair(synth_config):
    return synth_rigid_scene(synth_config)


@pytest.fixture
def tiny_bundle(tiny_model_config, synth_config):
    return ConfigBundle(
        model=tiny_model_config,
        loss=LossConfig(radius=0.1, k=8),
        train=TrainConfig(epochs=1, batch_size=2, patience=5),
        synth=synth_config,
    )


@pytest.fixture
def tiny_config_file(tmp_path, tiny_bundle):
    path = os.path.join(tmp_path, "tiny.ini")
    write_config(tiny_bundle, path)
    return path


@pytest.fixture
def scene_dir(tmp_path, synth_config):
    out = os.path.join(tmp_path, "scenes")
    generate_scenes(out, 4, 0, synth_config)
    return out


@pytest.fixture
def gradcheck_params():
    """Central finite-difference check over tensor inputs and every parameter.

    ``call(forward, *inputs)`` must return a tensor or a tuple of tensors,
    with ``forward`` invoked in place of the module.
    """

    def check(module, call, *inputs):
        names = [name for name, _ in module.named_parameters()]
        params = tuple(
            p.detach().clone().requires_grad_(True) for p in module.parameters()
        )
        count = len(inputs)

        def run(*args):
            values = dict(zip(names, args[count:]))

            def forward(*module_args):
                return functional_call(module, values, module_args)

            return call(forward, *args[:count])

        return torch.autograd.gradcheck(
            run, tuple(inputs) + params, eps=1e-6, atol=1e-5, rtol=1e-4
        )

    return check
