import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import GRAD_TOL, SEEDS, input_error, jitter, param_error
from rcfuse.numerics import DimensionError, LinearParams
from rcfuse.rcs_bev import BEVGrid
from rcfuse.sparse import (SparseFusionLayerParams, SparseQuerySet, linear_fuse, linear_fuse_backward,
                           project_and_sample, project_and_sample_backward, sine_encoding, sparse_decoder,
                           sparse_decoder_backward, splat_to_bev)


def radar_grid(rng, c=4, side=6, extent=6.0):
    return BEVGrid.centered(side, extent, data=rng.normal(size=(c, side, side)))


def test_sample_at_pixel_centres_reads_the_grid():
    rng = np.random.default_rng(0)
    g = radar_grid(rng)
    c = g.pixel_centers().reshape(-1, 2)
    pos = np.c_[c, np.zeros(len(c))]
    assert np.array_equal(project_and_sample(pos, g), g.data.reshape(4, -1).T)


def test_sample_far_outside_is_zero():
    g = radar_grid(np.random.default_rng(1))
    assert not project_and_sample(np.array([[1e3, 0.0, 0.0], [0.0, -50.0, 1.0]]), g).any()


@settings(max_examples=20)
@given(st.integers(0, 2**31 - 1))
def test_splat_is_adjoint_of_sampling(seed):
    rng = np.random.default_rng(seed)
    g = radar_grid(rng)
    pos = np.c_[rng.uniform(-7, 7, (5, 2)), np.zeros(5)]
    f = rng.normal(size=(5, 4))
    lhs = (project_and_sample(pos, g) * f).sum()
    rhs = (g.data * splat_to_bev(f, pos, g.geometry())).sum()
    assert abs(lhs - rhs) < 1e-10


def test_splat_conserves_mass_inside():
    g = BEVGrid.centered(8, 8.0)
    f = np.ones((3, 1))
    pos = np.array([[0.3, 0.2, 0.0], [-2.5, 1.1, 0.0], [1.0, -3.3, 0.0]])
    assert abs(splat_to_bev(f, pos, g).sum() - 3.0) < 1e-12


def test_sine_encoding_layout():
    e = sine_encoding(np.array([[0.0, 0.0, 0.0], [16.0, 0.0, 0.0]]), octaves=10, extent=64.0)
    assert e.shape == (2, 60)
    assert np.array_equal(e[0], np.tile([0.0, 1.0], 30))
    assert abs(e[1, 0] - np.sin(np.pi / 4)) < 1e-15 and abs(e[1, 1] - np.cos(np.pi / 4)) < 1e-15


def test_linear_fuse_selection():
    q, r = np.ones((2, 3)), 5 * np.ones((2, 2))
    p = LinearParams(np.hstack([np.eye(3), np.zeros((3, 2))]), np.zeros(3))
    assert np.array_equal(linear_fuse(q, r, p), q)
    with pytest.raises(DimensionError):
        linear_fuse(q, r[:1], p)


def test_query_set_jsonl_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    qs = SparseQuerySet(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)))
    qs.to_jsonl(tmp_path / "q.jsonl")
    back = SparseQuerySet.from_jsonl(tmp_path / "q.jsonl")
    assert np.array_equal(back.features, qs.features) and np.array_equal(back.positions, qs.positions)


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_fuse_gradients(seed):
    rng = np.random.default_rng(seed)
    p = LinearParams.init(rng, 5, 3)
    q, r = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    w = rng.normal(size=(4, 3))
    dq, dr, g = linear_fuse_backward(w, q, r, p)
    assert param_error(lambda: float((linear_fuse(q, r, p) * w).sum()), p, g) < GRAD_TOL
    assert input_error(lambda v: float((linear_fuse(v, r, p) * w).sum()), q, dq) < GRAD_TOL
    assert input_error(lambda v: float((linear_fuse(q, v, p) * w).sum()), r, dr) < GRAD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_sampling_gradient_wrt_raster(seed):
    rng = np.random.default_rng(seed)
    g = radar_grid(rng)
    pos = np.c_[rng.uniform(-5, 5, (5, 2)), np.zeros(5)]
    w = rng.normal(size=(5, 4))
    dF = project_and_sample_backward(w, pos, g)

    def f(v):
        return float((project_and_sample(pos, g.with_data(v)) * w).sum())

    assert input_error(f, g.data, dF) < GRAD_TOL


@pytest.mark.parametrize("seed", range(3))
def test_decoder_gradients(seed):
    rng = np.random.default_rng(seed)
    g = radar_grid(rng)
    layers = [jitter(SparseFusionLayerParams.init(rng, 4, 4, heads=2, points=2), rng) for _ in range(2)]
    qs = SparseQuerySet(rng.normal(size=(5, 4)), np.c_[rng.uniform(-5, 5, (5, 2)), rng.normal(size=5)])
    w = rng.normal(size=(5, 4))
    dq, dF, grads = sparse_decoder_backward(w, sparse_decoder(qs, g, layers)[1], layers)
    assert param_error(lambda: float((sparse_decoder(qs, g, layers)[0] * w).sum()), layers, grads,
                       max_entries=8, seed=seed) < GRAD_TOL

    def fq(v):
        return float((sparse_decoder(SparseQuerySet(v, qs.positions), g, layers)[0] * w).sum())

    def fF(v):
        return float((sparse_decoder(qs, g.with_data(v), layers)[0] * w).sum())

    assert input_error(fq, qs.features, dq) < GRAD_TOL
    assert input_error(fF, g.data, dF) < GRAD_TOL
