"""Shared test utilities: finite-difference gradient checking."""

import numpy as np

from dgm_dte.numerics import Tape, leaf


def finite_diff(f, arrays, h=1e-5):
    """Central-difference gradient of scalar f w.r.t. each array, in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gf = arr.ravel(), g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def check_gradients(build, arrays, rtol=1e-4, atol=1e-7, h=1e-5):
    """Compare tape gradients against central finite differences.

    ``build(tape, leaves) -> scalar Tensor`` re-runs the forward pass; the
    leaves alias ``arrays`` so perturbations are visible without copies.
    Fails the test if any element violates |a - n| <= atol + rtol*max(|a|,|n|).
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]

    tape = Tape()
    leaves = [leaf(a) for a in arrays]
    loss = build(tape, leaves)
    tape.backward(loss)
    analytic = [np.array(lf.grad) for lf in leaves]

    def value():
        t = Tape()
        return build(t, [leaf(a) for a in arrays]).data.item()

    numeric = finite_diff(value, arrays, h=h)
    for a, n in zip(analytic, numeric):
        err = np.abs(a - n)
        bound = atol + rtol * np.maximum(np.abs(a), np.abs(n))
        assert np.all(err <= bound), (
            f"gradient mismatch: max err {err.max():.3e} vs bound {bound[err > bound].min():.3e}"
        )


def away_from_kinks(x, margin=0.05):
    """Push entries of x away from 0 so relu/abs kinks don't poison FD checks."""
    x = np.asarray(x, dtype=np.float64).copy()
    small = np.abs(x) < margin
    x[small] += np.where(x[small] >= 0, margin, -margin)
    return x


def fd_check_params(make_loss, params, rtol=1e-4, atol=1e-7, h=1e-5):
    """FD-check gradients w.r.t. long-lived parameter leaves.

    ``make_loss(tape) -> scalar Tensor`` must rebuild the forward pass from
    the params' current data; perturbations happen in place.
    """
    tape = Tape()
    tape.backward(make_loss(tape))
    analytic = {
        n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for n, p in params.items()
    }
    for name, p in params.items():
        flat = p.data.ravel()
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = make_loss(Tape()).data.item()
            flat[i] = orig - h
            fm = make_loss(Tape()).data.item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)
        a = analytic[name].ravel()
        err = np.abs(a - numeric)
        bound = atol + rtol * np.maximum(np.abs(a), np.abs(numeric))
        assert np.all(err <= bound), (
            f"{name}: max grad err {err.max():.3e} exceeds bound"
        )
