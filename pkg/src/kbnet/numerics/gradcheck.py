import numpy as np

from kbnet.numerics.tensor import Tape, backward, no_grad


def finite_diff_check(f, theta, eps=1e-5, n_samples=None, rng=None):
    """Max relative error between taped and central-difference gradients.

    ``f`` is a zero-argument callable that builds the scalar loss from
    ``theta`` (and anything else it closes over).  ``n_samples`` limits the
    check to that many coordinates drawn without replacement from ``rng``;
    by default every coordinate is checked.

    The error per coordinate is ``|a - c| / max(|a|, |c|, 1e-12)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with Tape() as tape:
        loss = f()
    backward(loss, tape, [theta])
    analytic = theta.grad.reshape(-1).copy()

    flat = theta.data.reshape(-1)
    if n_samples is None or n_samples >= flat.size:
        coords = np.arange(flat.size)
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        coords = rng.choice(flat.size, size=n_samples, replace=False)

    worst = 0.0
    with no_grad():
        for i in coords:
            saved = flat[i]
            flat[i] = saved + eps
            up = f().item()
            flat[i] = saved - eps
            down = f().item()
            flat[i] = saved
            numeric = (up - down) / (2.0 * eps)
            a = analytic[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst
