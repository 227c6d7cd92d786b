import pytest
import torch
from pyrflow.backbone import PyramidLevel
from pyrflow.fusion import position_encoding
from pyrflow.geometry import NeighborSet, knn
from pyrflow.io import ModelConfig
from pyrflow.refine import (
    CostVolume,
    FlowPredictor,
    RefineLevel,
    Reembedding,
    SpatialTemporalReembedding,
    WarpedFrame,
    upsample_flow_and_features,
    warp,
)

DTYPE = torch.float64


@pytest.fixture
def small_config():
    return ModelConfig(
        level_sizes=(16, 8),
        widths=(4, 4),
        backbone_k=4,
        weightnet_hidden=3,
        weightnet_width=2,
        heads=1,
        attention_width=4,
        position_width=3,
        embedding_width=4,
        str_k=3,
        cost_k_target=3,
        cost_k_source=3,
        predictor_k=3,
        predictor_widths=(4, 3),
    )


def random_level(n, channels, sample_indices=None):
    return PyramidLevel(
        torch.rand(n, 3, dtype=DTYPE),
        torch.rand(n, channels, dtype=DTYPE),
        sample_indices,
    )


def randomize_head(predictor):
    with torch.no_grad():
        predictor.fc.weight.normal_(std=0.5)
        predictor.fc.bias.normal_(std=0.1)


@torch.no_grad()
def reembed_oracle(module, warped, group_positions, group_features, indices):
    embedded = module.target_embed(group_features)
    out = []
    for i in range(warped.positions.shape[0]):
        trfs, scores = [], []
        for j in indices[i].tolist():
            x, y = warped.positions[i], group_positions[j]
            pe = torch.cat([x, y, y - x])
            trf = module.pair_mlp(torch.cat([embedded[j], warped.features[i], pe]))
            trfs.append(trf)
            scores.append(module.score_mlp(torch.cat([trf, module.position_mlp(pe)]))[0])
        weights = torch.softmax(torch.stack(scores), dim=0)
        out.append(sum(w * t for w, t in zip(weights, trfs)))
    return torch.stack(out)


@torch.no_grad()
def cost_volume_oracle(module, warped, target_level):
    n = warped.positions.shape[0]
    target_groups = knn(
        warped.positions, target_level.positions, module.k_target
    ).indices
    source_groups = knn(warped.positions, warped.positions, module.k_source).indices
    point = []
    for i in range(n):
        total = 0
        for j in target_groups[i].tolist():
            direction = target_level.positions[j] - warped.positions[i]
            cost = module.cost_mlp(
                torch.cat([warped.features[i], target_level.features[j], direction])
            )
            total = total + module.point_weights(direction) * cost
        point.append(total)
    patch = []
    for i in range(n):
        total = 0
        for j in source_groups[i].tolist():
            direction = warped.positions[j] - warped.positions[i]
            total = total + module.patch_weights(direction) * point[j]
        patch.append(total)
    return torch.stack(patch)


def test_warp():
    positions = torch.rand(10, 3)
    assert torch.equal(warp(positions, torch.zeros(10, 3)), positions)

    moved = warp(torch.tensor([[1.0, 2.0, 3.0]]), torch.tensor([[0.1, 0.0, -0.1]]))
    assert moved[0].tolist() == pytest.approx([1.1, 2.0, 2.9])

    with pytest.raises(ValueError):
        warp(positions, torch.zeros(9, 3))


def test_warp_ground_truth(scene_pair):
    warped = warp(torch.as_tensor(scene_pair.pos1), torch.as_tensor(scene_pair.flow))
    expected = {tuple(p) for p in scene_pair.pos2.tolist()}
    assert {tuple(p) for p in warped.tolist()} == expected


def test_upsample_flow_and_features():
    coarse = random_level(6, 2)
    fine = random_level(20, 2)

    constant = torch.tensor([[0.5, -1.0, 2.0]], dtype=DTYPE).expand(6, 3)
    flow, features = upsample_flow_and_features(coarse, fine, constant)
    assert features is None
    assert torch.allclose(flow, constant[:1].expand(20, 3))

    flow, features = upsample_flow_and_features(
        coarse, fine, torch.zeros(6, 3, dtype=DTYPE), coarse.features
    )
    assert torch.equal(flow, torch.zeros(20, 3, dtype=DTYPE))
    assert features.shape == (20, 2)

    values = torch.rand(6, 3, dtype=DTYPE)
    same, _ = upsample_flow_and_features(coarse, coarse, values, eps=1e-12)
    assert torch.allclose(same, values, atol=1e-5)

    # k is capped by the coarse level size
    tiny = random_level(2, 2)
    flow, _ = upsample_flow_and_features(tiny, fine, torch.ones(2, 3, dtype=DTYPE), k=3)
    assert torch.allclose(flow, torch.ones(20, 3, dtype=DTYPE))


def test_reembedding_oracle():
    torch.manual_seed(0)
    module = Reembedding(3, 2, 4, position_width=3).double()
    warped = WarpedFrame(torch.rand(2, 3, dtype=DTYPE), torch.rand(2, 3, dtype=DTYPE))
    group_positions = torch.rand(3, 3, dtype=DTYPE)
    group_features = torch.rand(3, 2, dtype=DTYPE)
    neighbors = knn(warped.positions, group_positions, 2)

    out = module(warped, group_positions, group_features, neighbors)
    expected = reembed_oracle(
        module, warped, group_positions, group_features, neighbors.indices
    )
    assert out.features.shape == (2, 4)
    assert out.target_features.shape == (3, 4)
    assert torch.allclose(out.weights.sum(dim=1), torch.ones(2, dtype=DTYPE))
    assert torch.allclose(out.features, expected, atol=1e-6)


def test_reembedding_single_member():
    torch.manual_seed(1)
    module = Reembedding(3, 3, 3, position_width=2).double()
    warped = WarpedFrame(torch.rand(4, 3, dtype=DTYPE), torch.rand(4, 3, dtype=DTYPE))
    neighbors = knn(warped.positions, warped.positions, 1)

    out = module(warped, warped.positions, warped.features, neighbors)
    assert torch.equal(out.weights, torch.ones(4, 1, dtype=DTYPE))

    embedded = module.target_embed(warped.features)
    encoding = position_encoding(warped.positions, warped.positions[neighbors.indices])
    assert torch.equal(encoding[..., :3], encoding[..., 3:6])
    assert torch.equal(encoding[..., 6:], torch.zeros(4, 1, 3, dtype=DTYPE))
    pair = module.pair_mlp(
        torch.cat([embedded[:, None, :], warped.features[:, None, :], encoding], dim=-1)
    )
    assert torch.allclose(out.features, pair[:, 0])


def test_reembedding_permutation_invariance():
    torch.manual_seed(2)
    module = Reembedding(3, 3, 5, position_width=4).double()
    warped = WarpedFrame(torch.rand(6, 3, dtype=DTYPE), torch.rand(6, 3, dtype=DTYPE))
    positions = torch.rand(9, 3, dtype=DTYPE)
    features = torch.rand(9, 3, dtype=DTYPE)
    neighbors = knn(warped.positions, positions, 4)
    shuffled = NeighborSet(neighbors.indices[:, [2, 0, 3, 1]], neighbors.valid)

    a = module(warped, positions, features, neighbors).features
    b = module(warped, positions, features, shuffled).features
    assert torch.allclose(a, b, rtol=1e-6, atol=1e-12)


def test_reembedding_errors():
    module = Reembedding(3, 3, 3, position_width=2)
    warped = WarpedFrame(torch.rand(4, 3), torch.rand(4, 3))
    neighbors = knn(warped.positions, warped.positions, 2)

    truncated = NeighborSet(neighbors.indices[:3], neighbors.valid[:3])
    with pytest.raises(ValueError):
        module(warped, warped.positions, warped.features, truncated)

    empty = torch.zeros_like(neighbors.valid)
    padded = NeighborSet(neighbors.indices, empty, radius=0.1)
    with pytest.raises(ValueError):
        module(warped, warped.positions, warped.features, padded)


def test_str_branches():
    torch.manual_seed(3)
    warped = WarpedFrame(torch.rand(8, 3, dtype=DTYPE), torch.rand(8, 4, dtype=DTYPE))
    target = random_level(10, 4)

    full = SpatialTemporalReembedding(4, k=3, position_width=3).double()
    strf, target_features = full(warped, target)
    assert strf.shape == (8, 4)
    assert target_features.shape == (10, 4)

    spatial_only = SpatialTemporalReembedding(
        4, k=3, position_width=3, use_temporal=False
    ).double()
    strf, target_features = spatial_only(warped, target)
    assert strf.shape == (8, 4)
    assert target_features is None
    srf = spatial_only.spatial_reembed(warped).features
    assert torch.allclose(strf, spatial_only.str_fuse(warped.features, srf))

    disabled = SpatialTemporalReembedding(
        4, k=3, position_width=3, use_spatial=False, use_temporal=False
    )
    strf, target_features = disabled(warped, target)
    assert strf is warped.features
    assert target_features is None

    with pytest.raises(ValueError):
        full.str_fuse(torch.rand(8, 4), torch.rand(8, 3))


def test_str_single_point():
    torch.manual_seed(4)
    module = SpatialTemporalReembedding(2, k=1, position_width=2).double()
    warped = WarpedFrame(torch.rand(1, 3, dtype=DTYPE), torch.rand(1, 2, dtype=DTYPE))
    out = module.spatial_reembed(warped)
    assert out.weights.tolist() == [[1.0]]
    assert out.features.shape == (1, 2)


def test_spatial_reembedding_translation():
    torch.manual_seed(5)
    warped = WarpedFrame(torch.rand(12, 3, dtype=DTYPE), torch.rand(12, 3, dtype=DTYPE))
    shift = torch.tensor([0.3, -0.2, 0.7], dtype=DTYPE)
    moved = WarpedFrame(warped.positions + shift, warped.features)

    a = knn(warped.positions, warped.positions, 4).indices
    b = knn(moved.positions, moved.positions, 4).indices
    assert torch.equal(a, b)
    pe_a = position_encoding(warped.positions, warped.positions[a])
    pe_b = position_encoding(moved.positions, moved.positions[b])
    assert torch.allclose(pe_a[..., 6:], pe_b[..., 6:], atol=1e-12)


def test_cost_volume_oracle():
    torch.manual_seed(6)
    module = CostVolume(
        3, 2, cost_channels=4, k_target=2, k_source=2, weightnet_hidden=3
    )
    module = module.double()
    warped = WarpedFrame(torch.rand(3, 3, dtype=DTYPE), torch.rand(3, 3, dtype=DTYPE))
    target = random_level(3, 2)

    out = module(warped, target)
    assert out.shape == (3, 4)
    assert torch.allclose(out, cost_volume_oracle(module, warped, target), atol=1e-6)


def test_cost_volume_singleton():
    torch.manual_seed(7)
    module = CostVolume(2, 2, k_target=1, k_source=1, weightnet_hidden=3).double()
    warped = WarpedFrame(torch.rand(1, 3, dtype=DTYPE), torch.rand(1, 2, dtype=DTYPE))
    target = random_level(1, 2)

    direction = target.positions[0] - warped.positions[0]
    stacked = torch.cat([warped.features[0], target.features[0], direction])
    cost = module.cost_mlp(stacked)
    gate = module.patch_weights(torch.zeros(3, dtype=DTYPE))
    expected = gate * module.point_weights(direction) * cost
    assert torch.allclose(module(warped, target)[0], expected)


def test_cost_volume_point_order():
    torch.manual_seed(8)
    module = CostVolume(3, 3, k_target=4, k_source=4).double()
    warped = WarpedFrame(torch.rand(10, 3, dtype=DTYPE), torch.rand(10, 3, dtype=DTYPE))
    target = random_level(12, 3)
    out = module(warped, target)

    order = torch.randperm(10)
    target_order = torch.randperm(12)
    permuted = module(
        WarpedFrame(warped.positions[order], warped.features[order]),
        PyramidLevel(target.positions[target_order], target.features[target_order]),
    )
    assert torch.allclose(permuted, out[order], rtol=1e-6, atol=1e-12)


def test_flow_predictor():
    torch.manual_seed(9)
    predictor = FlowPredictor(5, (6, 4), k=3, weightnet=2, weightnet_hidden=3).double()
    positions = torch.rand(8, 3, dtype=DTYPE)
    features = torch.rand(8, 5, dtype=DTYPE, requires_grad=True)

    flow = predictor(positions, features)
    assert flow.shape == (8, 3)
    assert torch.equal(flow, torch.zeros(8, 3, dtype=DTYPE))

    randomize_head(predictor)
    assert torch.autograd.gradcheck(
        lambda f: predictor(positions, f), (features,), eps=1e-6, atol=1e-5, rtol=1e-4
    )


def test_refine_level_zero_residual(small_config):
    torch.manual_seed(10)
    refiner = RefineLevel(small_config, 0, coarse_width=4).double()
    source = random_level(16, 4)
    target = random_level(16, 4)
    coarse = random_level(8, 4, torch.arange(8))
    coarse.positions = source.positions[:8]
    coarse_flow = 0.05 * torch.rand(8, 3, dtype=DTYPE)

    out = refiner(source, target, coarse, coarse_flow, coarse.features)
    upsampled, _ = upsample_flow_and_features(coarse, source, coarse_flow)
    assert torch.equal(out.residual, torch.zeros(16, 3, dtype=DTYPE))
    assert torch.equal(out.flow, out.upsampled_flow)
    assert torch.allclose(out.upsampled_flow, upsampled)
    assert torch.equal(out.warped_positions, source.positions + out.upsampled_flow)
    assert out.features.shape == (16, 4)
    assert out.target_features.shape == (16, 4)


def test_refine_level_residual_accounting(small_config):
    torch.manual_seed(11)
    refiner = RefineLevel(small_config, 0, coarse_width=4).double()
    randomize_head(refiner.predictor)
    source = random_level(16, 4)
    target = random_level(16, 4)
    coarse_features = torch.rand(8, 4, dtype=DTYPE)
    coarse = PyramidLevel(source.positions[:8], coarse_features, torch.arange(8))

    out = refiner(source, target, coarse, torch.rand(8, 3, dtype=DTYPE), coarse.features)
    assert not torch.equal(out.residual, torch.zeros_like(out.residual))
    difference = out.flow - out.upsampled_flow
    assert torch.allclose(difference, out.residual, rtol=0, atol=1e-12)


def test_refine_level_without_coarse_flow(small_config):
    torch.manual_seed(12)
    refiner = RefineLevel(small_config, 1, coarse_width=0).double()
    source = random_level(8, 4)
    out = refiner(source, random_level(8, 4))
    assert torch.equal(out.upsampled_flow, torch.zeros(8, 3, dtype=DTYPE))
    assert torch.equal(out.warped_positions, source.positions)


def test_refine_level_missing_features(small_config):
    refiner = RefineLevel(small_config, 0, coarse_width=4).double()
    source = random_level(16, 4)
    coarse_features = torch.rand(8, 4, dtype=DTYPE)
    coarse = PyramidLevel(source.positions[:8], coarse_features, torch.arange(8))
    with pytest.raises(ValueError):
        refiner(source, random_level(16, 4), coarse, torch.rand(8, 3, dtype=DTYPE))


def test_refine_level_gradcheck(small_config):
    torch.manual_seed(13)
    refiner = RefineLevel(small_config, 0, coarse_width=4).double()
    randomize_head(refiner.predictor)
    source = random_level(16, 4)
    target = random_level(16, 4)
    coarse_positions = source.positions[:8]
    coarse_flow = 0.01 * torch.rand(8, 3, dtype=DTYPE)
    features = source.features.clone().requires_grad_(True)
    coarse_features = torch.rand(8, 4, dtype=DTYPE, requires_grad=True)

    def run(f, c):
        level = PyramidLevel(source.positions, f)
        coarse = PyramidLevel(coarse_positions, c, torch.arange(8))
        return refiner(level, target, coarse, coarse_flow, c).flow

    assert torch.autograd.gradcheck(
        run, (features, coarse_features), eps=1e-6, atol=1e-5, rtol=1e-4
    )


def test_temporal_reembedding_gradcheck(gradcheck_params):
    torch.manual_seed(14)
    module = Reembedding(3, 2, 4, position_width=3).double()
    positions = torch.rand(6, 3, dtype=DTYPE, requires_grad=True)
    features = torch.rand(6, 3, dtype=DTYPE, requires_grad=True)
    target = random_level(8, 2)
    target.positions.requires_grad_(True)
    target.features.requires_grad_(True)
    neighbors = knn(positions, target.positions, 3)

    def call(forward, p, f, tp, tf):
        out = forward(WarpedFrame(p, f), tp, tf, neighbors)
        return out.features, out.target_features

    assert gradcheck_params(
        module, call, positions, features, target.positions, target.features
    )


def test_spatial_reembedding_gradcheck(gradcheck_params):
    torch.manual_seed(15)
    module = Reembedding(3, 3, 3, position_width=2).double()
    positions = torch.rand(8, 3, dtype=DTYPE, requires_grad=True)
    features = torch.rand(8, 3, dtype=DTYPE, requires_grad=True)
    neighbors = knn(positions, positions, 4)

    def call(forward, p, f):
        return forward(WarpedFrame(p, f), p, f, neighbors).features

    assert gradcheck_params(module, call, positions, features)


def test_str_gradcheck(gradcheck_params):
    torch.manual_seed(16)
    module = SpatialTemporalReembedding(3, k=3, position_width=2).double()
    positions = torch.rand(8, 3, dtype=DTYPE, requires_grad=True)
    features = torch.rand(8, 3, dtype=DTYPE, requires_grad=True)
    target = random_level(10, 3)
    target.features.requires_grad_(True)

    def call(forward, p, f, tf):
        return forward(WarpedFrame(p, f), PyramidLevel(target.positions, tf))

    assert gradcheck_params(module, call, positions, features, target.features)


def test_cost_volume_gradcheck(gradcheck_params):
    torch.manual_seed(17)
    module = CostVolume(
        3, 2, cost_channels=4, k_target=3, k_source=3, weightnet_hidden=3
    ).double()
    positions = torch.rand(8, 3, dtype=DTYPE, requires_grad=True)
    features = torch.rand(8, 3, dtype=DTYPE, requires_grad=True)
    target = random_level(10, 2)
    target.positions.requires_grad_(True)
    target.features.requires_grad_(True)

    def call(forward, p, f, tp, tf):
        return forward(WarpedFrame(p, f), PyramidLevel(tp, tf))

    assert gradcheck_params(
        module, call, positions, features, target.positions, target.features
    )


def test_refine_level_gradcheck_params(small_config, gradcheck_params):
    torch.manual_seed(18)
    refiner = RefineLevel(small_config, 0, coarse_width=4).double()
    randomize_head(refiner.predictor)
    source = random_level(16, 4)
    target = random_level(16, 4)
    coarse_positions = source.positions[:8]
    coarse_flow = 0.01 * torch.rand(8, 3, dtype=DTYPE)
    coarse_features = torch.rand(8, 4, dtype=DTYPE)
    features = source.features.clone().requires_grad_(True)
    target_features = target.features.clone().requires_grad_(True)

    def call(forward, f, tf):
        level = PyramidLevel(source.positions, f)
        coarse = PyramidLevel(coarse_positions, coarse_features, torch.arange(8))
        target_level = PyramidLevel(target.positions, tf)
        out = forward(level, target_level, coarse, coarse_flow, coarse_features)
        return out.flow

    assert gradcheck_params(refiner, call, features, target_features)
