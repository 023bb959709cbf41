import numpy as np
import pytest

from sculptorkit import errors
from sculptorkit.fitting import (
    FitPriors,
    FitProblem,
    ForwardState,
    VertexObjective,
    fit_to_scan,
)
from sculptorkit.mesh import TriMesh, msve
from sculptorkit.model import ParamVector, generate

from .conftest import toy_model


@pytest.fixture(scope="module")
def model():
    return toy_model()


def fd_gradient(fun, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (fun(xp) - fun(xm)) / (2 * eps)
    return g


def random_objectives(model, rng):
    lo_f, hi_f = model.face_range
    lo_s, hi_s = model.skull_range
    face_rows = np.arange(lo_f, hi_f)
    skull_rows = np.arange(lo_s, hi_s)
    return [
        VertexObjective(face_rows, model.template_vertices[face_rows] + rng.normal(size=(len(face_rows), 3)),
                        weight=1.0, name="face"),
        VertexObjective(skull_rows, model.template_vertices[skull_rows] + rng.normal(size=(len(skull_rows), 3)),
                        weight=0.7, row_weights=rng.random(len(skull_rows)) + 0.5, name="skull"),
    ]


def test_fit_gradient_matches_fd_all_blocks(model, rng):
    objs = random_objectives(model, rng)
    priors = FitPriors(lambda_beta=0.01, lambda_gamma=0.02, lambda_phi=0.03,
                       gamma_anchor=rng.normal(size=2))
    prob = FitProblem(model, objs, ("beta", "gamma", "theta", "phi"), priors)
    x = rng.normal(size=3 + 2 + 9 + 2) * 0.3
    _, grad = prob.value_and_grad(x)
    fd = fd_gradient(lambda q: prob.value_and_grad(q)[0], x)
    rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)
    assert rel < 1e-5


def test_fit_gradient_fixed_template(model, rng):
    objs = random_objectives(model, rng)
    base = model.template_vertices + rng.normal(size=model.template_vertices.shape) * 0.5
    prob = FitProblem(model, objs, ("theta", "phi"), FitPriors(), base_rest=base)
    x = rng.normal(size=9 + 2) * 0.2
    _, grad = prob.value_and_grad(x)
    fd = fd_gradient(lambda q: prob.value_and_grad(q)[0], x)
    rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)
    assert rel < 1e-5


def test_fit_recovers_known_parameters(model, rng):
    true = ParamVector(rng.normal(size=3) * 1.5, rng.normal(size=2) * 0.8,
                       np.concatenate([rng.normal(size=3) * 0.2, rng.normal(size=3) * 0.15,
                                       rng.normal(size=3) * 2.0]),
                       rng.normal(size=2) * 0.4, np.zeros(2))
    head = generate(model, true)
    lo_f, hi_f = model.face_range
    lo_s, hi_s = model.skull_range
    res = fit_to_scan(
        model,
        target_face=head.vertices[lo_f:hi_f],
        target_skull=head.vertices[lo_s:hi_s],
        priors=FitPriors(lambda_beta=1e-9, lambda_gamma=1e-9, lambda_phi=1e-9),
        max_iter=500,
    )
    assert res.msve["face"] < 1e-4
    assert res.msve["skull"] < 1e-4
    assert np.allclose(res.params.beta, true.beta, atol=1e-3)
    assert np.allclose(res.params.theta, true.theta, atol=1e-3)


def test_fit_template_target_near_zero_params(model):
    lo_f, hi_f = model.face_range
    res = fit_to_scan(model, target_face=model.template_vertices[lo_f:hi_f],
                      priors=FitPriors(lambda_beta=1e-4, lambda_gamma=1e-4, lambda_phi=1e-4))
    assert np.abs(res.params.beta).max() < 1e-3
    assert res.msve["face"] < 1e-8


def test_fit_errors(model):
    with pytest.raises(errors.NoTarget):
        fit_to_scan(model)
    lo_f, hi_f = model.face_range
    with pytest.raises(errors.EmptyMask):
        fit_to_scan(model, target_face=model.template_vertices[lo_f:hi_f], free=())


def test_fit_point_cloud_target(model, rng):
    true = ParamVector.zeros(model)
    true.beta = rng.normal(size=3) * 0.5
    head = generate(model, true)
    lo_f, hi_f = model.face_range
    cloud = head.vertices[lo_f:hi_f][rng.permutation(hi_f - lo_f)]  # shuffled = cloud mode
    cloud = np.concatenate([cloud, cloud[:3]])                      # different count
    res = fit_to_scan(model, target_face=TriMesh(cloud, np.zeros((0, 3))),
                      free=("beta",), priors=FitPriors(lambda_beta=1e-9))
    assert res.msve["face"] < 1e-3


def test_skin_offset_residual(model, rng):
    lo_f, hi_f = model.face_range
    target = model.template_vertices[lo_f:hi_f].copy()
    bump = rng.normal(size=target.shape) * 0.3
    res = fit_to_scan(model, target_face=target + bump, free=("beta",),
                      priors=FitPriors(lambda_beta=1e3))  # frozen params: offset is the bump
    state = ForwardState(model, res.params)
    assert np.allclose(res.skin_offset, (target + bump) - state.vertices[lo_f:hi_f], atol=1e-9)
