import numpy as np
import pytest

from normalforge import nn, refine as R
from normalforge.errors import ShapeMismatch, ZeroQuaternion, ZeroVector
from normalforge.features import BranchInputs, FeatureParams
from normalforge.filtering import FilterParams
from normalforge.geometry import build_index, pca_normals
from normalforge.synth import SynthShape, synth_generate

from conftest import random_rotation

TINY = dict(point_mlp=(4, 6), point_fc=(5,), conv=(3, 0, 4), hmp_fc=(5,), feature_dim=4,
            lift=(4,), head=(6,), keep_prob=1.0)


def _batch(rng, b=4, x=3, m=5, p=10):
    v = rng.standard_normal((b, x, 3))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    gt = rng.standard_normal((b, 3))
    gt /= np.linalg.norm(gt, axis=1, keepdims=True)
    return v, rng.standard_normal((b, p, 3)), rng.standard_normal((b, x, m, m)), gt


# -- connection modules ---------------------------------------------------------

def test_identity_quaternion():
    v = np.array([0.3, -1.2, 2.0])
    assert np.allclose(R.connection_apply("rotation", [1.0, 0, 0, 0], v), v, atol=1e-12, rtol=0)
    assert np.allclose(R.connection_apply("rotation", [2.5, 0, 0, 0], v), v, atol=1e-12, rtol=0)


def test_quaternion_preserves_norm(rng):
    for _ in range(20):
        q = rng.standard_normal(4)
        v = rng.standard_normal(3)
        y = R.connection_apply("rotation", q, v)
        assert abs(np.linalg.norm(y) - np.linalg.norm(v)) < 1e-12
    m = R.quat_to_matrix(np.array([np.cos(0.5), 0, 0, np.sin(0.5)]))
    assert np.allclose(m @ [1, 0, 0], [np.cos(1.0), np.sin(1.0), 0])


def test_zero_quaternion():
    with pytest.raises(ZeroQuaternion):
        R.connection_apply("rotation", np.zeros(4), np.ones(3))


def test_weight_matrix_stacked_identity():
    v = np.array([1.5, -0.25, 3.0])
    t = np.vstack([np.eye(3), np.eye(3)]).ravel()
    y = R.connection_apply("weight", t, v)
    assert np.allclose(y, np.concatenate([v, v]), atol=1e-12, rtol=0)


def test_transform_reshape_and_shape_errors():
    t = np.arange(9.0)
    v = np.array([1.0, 0, 0])
    assert np.allclose(R.connection_apply("transform", t, v), [0, 3, 6])
    with pytest.raises(ShapeMismatch):
        R.connection_apply("weight", np.ones(7), v)
    with pytest.raises(ShapeMismatch):
        R.connection_apply("rotation", np.ones(4), np.ones(4))


def test_connection_dims():
    assert R.connection_dim("weight", 64, 3) == 192
    assert R.connection_dim("weight", 64, 64) == 4096
    assert R.FULL_NET.d1 == 192 and R.FULL_NET.d2 == 4096
    assert R.FULL_NET.branch_width == 192


# -- network ----------------------------------------------------------------------

@pytest.mark.parametrize("kinds", [("weight", "weight"), ("transform", "transform"),
                                   ("rotation", "rotation"), ("rotation", "weight")])
def test_end_to_end_grad_check(kinds, rng):
    cfg = R.NetConfig(**TINY, connection1=kinds[0], connection2=kinds[1])
    net = R.RefineNet(cfg, 3, 5, seed=2)
    for k in net.params:
        if k.endswith("running_var"):
            net.params[k] = rng.uniform(0.5, 2.0, net.params[k].shape)
    v, pat, hm, gt = _batch(rng)

    def f():
        return R.objective(net, v, pat, hm, gt, 0.02, "l2", nn.EVAL)[0]

    _, grads, _ = R.objective(net, v, pat, hm, gt, 0.02, "l2", nn.EVAL)
    for name in net.params.trainable_names():
        num = nn.numeric_grad(f, net.params[name], 1e-6)
        assert nn.relative_error(grads[name], num) < 1e-4, name


@pytest.mark.parametrize("use_points,use_hmp", [(False, True), (True, False), (False, False)])
def test_ablations_run_and_shapes(use_points, use_hmp, rng):
    cfg = R.NetConfig(**TINY, use_points=use_points, use_hmp=use_hmp)
    net = R.RefineNet(cfg, 3, 5, seed=0)
    v, pat, hm, gt = _batch(rng)
    out, tape = net.forward(v, pat, hm)
    assert out.shape == (4, 3)
    assert ("point" in net.layers) == use_points and ("hmp" in net.layers) == use_hmp
    grads = net.backward(tape, np.ones_like(out))
    assert set(grads) <= set(net.params)


def test_point_module_permutation_invariant(rng):
    cfg = R.NetConfig(**TINY)
    net = R.RefineNet(cfg, 3, 5, seed=0)
    pat = rng.standard_normal((2, 10, 3))
    perm = rng.permutation(10)
    a, _ = nn.forward(net.layers["point"], net.params, pat)
    b, _ = nn.forward(net.layers["point"], net.params, pat[:, perm])
    assert np.array_equal(a, b)
    z, _ = nn.forward(net.layers["point"], net.params, np.zeros((1, 10, 3)))
    assert np.all(np.isfinite(z))


def test_zeroed_connections_leave_lift_path(rng):
    cfg = R.NetConfig(**TINY)
    net = R.RefineNet(cfg, 3, 5, seed=0)
    for key in ("point.out.W", "point.out.b", "hmp.out.W", "hmp.out.b"):
        net.params[key][:] = 0
    v, pat, hm, _ = _batch(rng)
    a, _ = net.forward(v, pat, hm)
    b, _ = net.forward(v, pat * 3 + 1, hm * -2)
    assert np.allclose(a, b)


def test_forward_shape_errors(rng):
    net = R.RefineNet(R.NetConfig(**TINY), 3, 5)
    v, pat, hm, _ = _batch(rng)
    with pytest.raises(ShapeMismatch):
        net.forward(v[:, :2], pat, hm)
    with pytest.raises(ShapeMismatch):
        net.forward(v, pat, hm[:, :, :4, :4])


def test_rotation_connection_needs_vector_input():
    with pytest.raises(ValueError):
        R.NetConfig(**TINY, connection1="weight", connection2="rotation")


def test_normal_loss_examples():
    gt = np.array([[0, 0, 1.0]])
    assert R.normal_loss(gt * 5, gt)[0] == 0.0
    assert R.normal_loss([[1.0, 0, 0]], gt)[0] == pytest.approx(2.0)
    assert R.normal_loss([[1.0, 0, 0]], gt, "l1")[0] == pytest.approx(2.0)
    with pytest.raises(ZeroVector):
        R.normal_loss(np.zeros((1, 3)), gt)
    params = nn.ParamStore({"a.W": np.ones((2, 2)), "a.b": np.ones(2)})
    assert R.loss(gt, gt, params, lam=0.02) == pytest.approx(0.08)


# -- training / model -------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_training():
    cloud = synth_generate(SynthShape("cube", 600, 0.003, seed=5))
    init = pca_normals(cloud, build_index(cloud), 20)
    fp = FilterParams(spatial_fracs=(0.05,), range_sigmas=(0.2, 0.5))
    fe = FeatureParams(max_pts=16, m=5)
    net = R.NetConfig(**{**TINY, "keep_prob": 0.8})
    tc = R.TrainConfig(lr=0.05, batch=32, epochs=15, clusters=2, samples_per_cloud=200)
    data = R.training_set([cloud], [init], fp, fe, tc)
    model = R.train(data, net, tc, fp, fe)
    return cloud, init, model, data


def test_training_reduces_loss(tiny_training):
    _, _, model, data = tiny_training
    h = model.loss_history
    assert len(h) == 16 and h[-1] < h[0]
    assert len(data.gt) == 200
    assert model.cluster.k == 2


def test_training_deterministic(tiny_training):
    cloud, init, model, data = tiny_training
    again = R.train(data, model.net, model.train, model.filter_params, model.feature_params)
    assert again.to_bytes() == model.to_bytes()


def test_model_roundtrip_and_predict(tiny_training, tmp_path):
    cloud, init, model, _ = tiny_training
    path = tmp_path / "m.nfm"
    model.save(path)
    back = R.RefineModel.load(path)
    assert back.to_bytes() == model.to_bytes()
    a = R.refine_field(cloud, init, model)
    b = R.refine_field(cloud, init, back)
    assert np.array_equal(a, b)
    assert a.shape == init.shape and np.allclose(np.linalg.norm(a, axis=1), 1.0)
    with pytest.raises(ValueError):
        R.RefineModel.from_bytes(b"JUNK" + path.read_bytes()[4:])


def test_refine_rotation_equivariant(tiny_training):
    cloud, init, model, _ = tiny_training
    Rm = random_rotation(np.random.default_rng(4))
    from normalforge.geometry import PointCloud
    from normalforge.geometry import bbox_diagonal
    diag = bbox_diagonal(cloud)  # the axis-aligned diagonal itself changes under rotation
    a = R.refine_field(cloud, init, model, diag=diag)
    b = R.refine_field(PointCloud(cloud.points @ Rm.T), init @ Rm.T, model, diag=diag)
    assert np.max(np.abs(np.abs(np.sum((a @ Rm.T) * b, 1)) - 1)) < 1e-6


def test_predict_normal_single(tiny_training):
    from normalforge.features import build_branch_inputs
    cloud, init, model, _ = tiny_training
    inputs = build_branch_inputs(cloud, build_index(cloud), init, model.filter_params, model.feature_params)
    full = R.predict(model, inputs)
    assert np.allclose(R.predict_normal(model, inputs, 7), full[7])


def test_canonical_gt_upper_hemisphere(rng):
    gt = rng.standard_normal((10, 3))
    gt /= np.linalg.norm(gt, axis=1, keepdims=True)
    frames = np.stack([random_rotation(rng) for _ in range(10)])
    c = R.canonical_gt(gt, frames)
    assert np.all(c[:, 2] >= 0)
    assert np.allclose(np.abs(np.einsum("nij,nj->ni", frames, c)), np.abs(gt))


def test_train_config_validation():
    with pytest.raises(ValueError):
        R.TrainConfig(loss="l3")
    with pytest.raises(ValueError):
        R.TrainConfig(batch=1)
