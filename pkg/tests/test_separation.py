import math

import numpy as np
import pytest

from upcr import autodiff as ad
from upcr import geom, separation
from upcr.datagen import synth_shape
from upcr.encoder import EncoderConfig, init_params
from upcr.features import FeatureSpec
from upcr.geom import PointCloud, RotationParam
from upcr.rng import Rng
from upcr.separation import (Representation, pose_related_rep, register_pair,
                             regress_pose, to_distribution)

from conftest import random_transform

CFG = EncoderConfig(k=5, m=24, layers=3, widths=(8, 12, 24), head_widths=(16,))
SPEC = FeatureSpec("distance")


def small_model(mode="euler", seed=2):
    return init_params(CFG, SPEC, mode, seed)


# ---------------------------------------------------------------------------
# to_distribution


def test_to_distribution_uniform_on_constant():
    rep = Representation(np.full(8, 3.25))
    out = to_distribution(rep)
    assert out.tag == "distribution"
    np.testing.assert_allclose(out.values, 1.0 / 8)


def test_to_distribution_reference_values():
    out = to_distribution(Representation(np.array([1.0, 2.0, 3.0])))
    e = [math.exp(v) for v in (1.0, 2.0, 3.0)]
    np.testing.assert_allclose(out.values, np.array(e) / sum(e), rtol=1e-12)


def test_to_distribution_shift_invariance():
    rng = Rng(1)
    v = rng.uniform(-3, 3, 16)
    a = to_distribution(Representation(v)).values
    b = to_distribution(Representation(v + 7.3)).values
    np.testing.assert_allclose(a, b, atol=1e-12)


# ---------------------------------------------------------------------------
# pose_related_rep


def dist(values) -> Representation:
    v = np.asarray(values, dtype=np.float64)
    return Representation(v / v.sum(), tag="distribution")


def test_pose_related_identical_is_exact_zero():
    p = dist(Rng(2).uniform(0.1, 1.0, 12))
    out = pose_related_rep(p, p)
    assert np.all(out.values == 0.0)


def test_pose_related_reference_values():
    p = dist([0.5, 0.5])
    q = dist([0.25, 0.75])
    out = pose_related_rep(p, q)
    expected = [0.5 * math.log(2.0), 0.5 * math.log(2.0 / 3.0)]
    np.testing.assert_allclose(out.values, expected, atol=1e-9)
    np.testing.assert_allclose(out.values, [0.346574, -0.202733], atol=1e-6)


def test_pose_related_sum_is_kl_and_nonnegative():
    rng = Rng(3)
    for _ in range(1000):
        p = dist(rng.uniform(0.01, 1.0, 10))
        q = dist(rng.uniform(0.01, 1.0, 10))
        out = pose_related_rep(p, q)
        kl = float(np.sum(p.values * np.log(p.values / q.values)))
        assert abs(out.values.sum() - kl) <= 1e-9
        assert out.values.sum() >= -1e-9


def test_pose_related_width_mismatch():
    with pytest.raises(ValueError):
        pose_related_rep(dist(np.ones(4)), dist(np.ones(5)))


# ---------------------------------------------------------------------------
# regress_pose


def test_regress_pose_zero_final_layer_gives_identity():
    for mode in ("euler", "quaternion", "sixd", "matrix"):
        model = small_model(mode)
        model.tensors["head.1.w"][:] = 0.0
        model.tensors["head.1.b"][:] = 0.0
        pose = regress_pose(Representation(Rng(4).uniform(-1, 1, CFG.m)), model)
        np.testing.assert_allclose(pose.decoded.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(pose.decoded.translation, 0.0, atol=1e-12)


@pytest.mark.parametrize("mode,rot_dim", [("euler", 3), ("quaternion", 4),
                                          ("sixd", 6), ("matrix", 9)])
def test_regress_pose_output_dims(mode, rot_dim):
    model = small_model(mode)
    assert model.tensors["head.1.w"].shape[1] == rot_dim + 3
    pose = regress_pose(Representation(Rng(5).uniform(-1, 1, CFG.m)), model)
    assert pose.rotation_param.values.shape == (rot_dim,)
    assert pose.translation.shape == (3,)
    # decoded transform matches an independent decode of the stored parameter
    np.testing.assert_allclose(
        pose.decoded.rotation,
        geom.decode_rotation(RotationParam(mode, pose.rotation_param.values)),
        atol=1e-10)


@pytest.mark.parametrize("mode", ["euler", "quaternion", "sixd", "matrix"])
def test_pose_head_gradient_through_rotation(mode):
    model = small_model(mode, seed=6)
    gamma = Rng(7).uniform(-0.5, 0.5, CFG.m)
    probe = Rng(8).uniform(-1, 1, (3, 3))
    name = "head.1.w"

    def fn(t):
        params = {k: (t if k == name else ad.constant(v))
                  for k, v in model.tensors.items()}
        _, _, rot = separation._head_forward(ad.constant(gamma), params, CFG, mode)
        return ad.reduce_sum(ad.mul(rot, ad.constant(probe)))

    rep = ad.grad_check(fn, model.tensors[name], h=1e-6, tol=1e-3)
    assert rep.passed, (mode, rep.max_rel_error)


def test_tape_rotation_decoders_match_geom():
    rng = Rng(9)
    for mode, dim in (("euler", 3), ("quaternion", 4), ("sixd", 6), ("matrix", 9)):
        for _ in range(20):
            vals = rng.uniform(-1.0, 1.0, dim)
            if mode == "matrix":
                vals = (np.eye(3) + 0.3 * rng.uniform(-1, 1, (3, 3))).reshape(-1)
            try:
                expected = geom.decode_rotation(RotationParam(mode, vals))
            except ValueError:
                continue
            got = separation._ROT_TENSOR[mode](ad.constant(vals)).data
            np.testing.assert_allclose(got, expected, atol=1e-10, err_msg=mode)


# ---------------------------------------------------------------------------
# register_pair


def test_register_identical_clouds_gives_identity():
    rng = Rng(10)
    for seed in range(20):
        model = init_params(CFG, SPEC, "euler", seed)
        cloud = synth_shape(seed % 7, 24, Rng(100 + seed))
        res = register_pair(cloud, cloud, model)
        np.testing.assert_allclose(res.transform.rotation, np.eye(3), atol=1e-10)
        np.testing.assert_allclose(res.transform.translation, 0.0, atol=1e-10)


def test_register_output_satisfies_so3():
    model = small_model()
    rng = Rng(11)
    x = synth_shape(1, 24, rng.spawn("x"))
    y = synth_shape(2, 24, rng.spawn("y"))
    res = register_pair(x, y, model)
    rot = res.transform.rotation
    assert np.abs(rot.T @ rot - np.eye(3)).max() < 1e-10
    assert abs(np.linalg.det(rot) - 1.0) < 1e-10


def test_register_invariant_to_point_order():
    model = small_model(seed=12)
    rng = Rng(13)
    x = synth_shape(3, 30, rng.spawn("x"))
    y = geom.apply_transform(random_transform(rng, 45.0, 0.5), x)
    base = register_pair(x, y, model)
    perm_x = np.argsort(rng.uniform(size=30))
    perm_y = np.argsort(rng.uniform(size=30))
    res = register_pair(PointCloud(x.points[perm_x]), PointCloud(y.points[perm_y]), model)
    np.testing.assert_allclose(res.transform.rotation, base.transform.rotation, atol=1e-9)
    np.testing.assert_allclose(res.transform.translation, base.transform.translation,
                               atol=1e-9)


def test_register_returns_canonical_shapes():
    model = small_model(seed=14)
    rng = Rng(15)
    x = synth_shape(4, 24, rng.spawn("x"))
    y = geom.apply_transform(random_transform(rng, 45.0, 0.5), x)
    res = register_pair(x, y, model)
    expected_xc = geom.canonicalize(x, res.pose_x.decoded)
    np.testing.assert_allclose(res.canonical_x.points, expected_xc.points, atol=1e-12)
    expected_yc = geom.canonicalize(y, res.pose_y.decoded)
    np.testing.assert_allclose(res.canonical_y.points, expected_yc.points, atol=1e-12)


def test_full_pipeline_grad_check_all_parameters():
    # 8-point clouds keep the finite-difference sweep cheap
    cfg = EncoderConfig(k=3, m=16, layers=2, widths=(8, 16), head_widths=(8,))
    model = init_params(cfg, SPEC, "euler", 16)
    x = PointCloud(Rng(17).uniform(-1, 1, (8, 3)))
    y = geom.apply_transform(random_transform(Rng(18), 30.0, 0.3), x)
    from upcr.training import unsupervised_loss

    for name in model.tensors:
        def fn(t, name=name):
            params = {k: (t if k == name else ad.constant(v))
                      for k, v in model.tensors.items()}
            res = register_pair(x, y, model, bound=params)
            return unsupervised_loss(res.canonical_x_t, res.canonical_y_t)
        rep = ad.grad_check(fn, model.tensors[name], h=1e-6, tol=1e-3)
        assert rep.passed, (name, rep.max_rel_error)
