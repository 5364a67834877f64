"""Shared gradient-check plumbing for the test suite."""

import numpy as np

from diffcd.numerics import Tensor, backward, finite_diff_grad, max_relative_error, mul, sum_


def projected(fn, weights):
    """Scalar ``sum(fn(...) * weights)`` so tensor-valued ops can be checked."""
    def scalar(*args):
        return sum_(mul(fn(*args), Tensor(weights)))
    return scalar


def grad_errors(fn, inputs, h=1e-5):
    """Max relative error between backward and finite differences per input."""
    leaves = [Tensor(x, requires_grad=True) for x in inputs]
    grads = backward(fn(*leaves))
    errors = []
    for i, leaf in enumerate(leaves):
        def partial(t, i=i):
            args = [Tensor(x) for x in inputs]
            args[i] = t
            return fn(*args)
        numeric = finite_diff_grad(partial, Tensor(inputs[i]), h=h).data
        analytic = grads[leaf].data if leaf in grads else np.zeros_like(numeric)
        errors.append(max_relative_error(analytic, numeric))
    return errors


def param_grad_error(loss_fn, params, h=1e-5):
    """Worst relative error over every entry of every parameter in ``params``.

    ``loss_fn(params)`` must be deterministic and return a scalar Tensor.
    """
    live = {k: Tensor(v.data, requires_grad=True) for k, v in params.items()}
    grads = backward(loss_fn(live))
    analytic, numeric = [], []
    for name, leaf in live.items():
        def partial(t, name=name):
            probe = {k: Tensor(v.data) for k, v in params.items()}
            probe[name] = t
            return loss_fn(probe)
        numeric.append(finite_diff_grad(partial, Tensor(leaf.data), h=h).data.ravel())
        g = grads.get(leaf)
        analytic.append(np.zeros(leaf.size) if g is None else g.data.ravel())
    # one shared floor across the whole model so tiny entries are judged on a common scale
    return max_relative_error(np.concatenate(analytic), np.concatenate(numeric))
