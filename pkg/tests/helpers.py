"""Shared pieces for the gradient tests."""
import numpy as np

from rcfuse.numerics import finite_diff_gradient, grad_check, relative_error, tree_items

GRAD_TOL = 1e-5
SEEDS = range(10)


def jitter(tree, rng, scale=0.05):
    """Perturb every leaf in place so that no ReLU input or bias sits exactly on a kink."""
    for _, a in tree_items(tree):
        a += rng.normal(0.0, scale, a.shape)
    return tree


def param_error(loss, params, grads, max_entries=None, seed=0):
    return grad_check(loss, params, grads, max_entries=max_entries, rng=np.random.default_rng(seed)).max_rel_error


def input_error(f, x, analytic):
    return relative_error(analytic, finite_diff_gradient(f, x))
