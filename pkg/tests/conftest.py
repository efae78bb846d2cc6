"""Shared gradient-check oracle.

Central finite differences, step sized to the dtype: 1e-6 for float64
(verification mode) and 1e-3 for float32. The reported error is the largest
absolute deviation normalised by the largest gradient magnitude on either
side, so near-zero components do not blow up the ratio.

Tests that exercise kinked functions (relu, abs, max ties, pooling) must
keep every evaluation point at least a few steps away from the kink;
helpers below draw such inputs.
"""

import numpy as np

from nowquant.tensor import GradientTape, Tensor, backward


def fd_step(dtype) -> float:
    return 1e-6 if np.dtype(dtype) == np.float64 else 1e-3


def relative_gradient_error(build, arrays, h: float | None = None,
                            fraction: float = 1.0, rng=None,
                            probe_dtype=None) -> float:
    """Worst relative error between tape gradients and central differences.

    ``build`` maps a tuple of Tensors to a scalar Tensor; ``arrays`` are the
    leaf values to differentiate at. By default every component of every
    leaf is perturbed; ``fraction`` < 1 probes a random subset per leaf
    (at least one component each), which keeps deep-composition checks
    affordable while still covering all coordinates across repeats.

    ``probe_dtype=np.float64`` evaluates the difference quotients at float64
    copies of the leaves: the oracle approximates the exact derivative, and
    bumping a float32 array by h would round both the step and the loss,
    drowning the comparison in evaluation noise instead of measuring the
    backward pass. ``build`` must then accept float64 leaves.
    """
    dtype = np.asarray(arrays[0]).dtype
    if h is None:
        h = fd_step(dtype)
    if rng is None:
        rng = np.random.default_rng(0)

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with GradientTape() as tape:
        loss = build(*leaves)
    backward(loss, tape)
    analytic = [leaf.grad.copy() for leaf in leaves]

    def value_at(swapped: list[np.ndarray]) -> float:
        return build(*[Tensor(a) for a in swapped]).item()

    # One scale for the whole gradient vector: a leaf behind a saturated
    # gate has a near-zero gradient, and normalising it by itself would
    # just measure the finite-difference noise floor eps*|loss|/(2h).
    scale = max(max(np.abs(g).max(initial=0.0) for g in analytic), 1e-12)
    work = [np.array(a, dtype=probe_dtype or dtype) for a in arrays]
    worst = 0.0
    for idx, base in enumerate(work):
        flat = base.reshape(-1)
        if fraction >= 1.0:
            probe = np.arange(flat.size)
        else:
            count = max(1, int(np.ceil(fraction * flat.size)))
            probe = rng.choice(flat.size, size=count, replace=False)
        numeric = np.zeros(probe.size, dtype=np.float64)
        for j, i in enumerate(probe):
            bumped = [a.copy() for a in work]
            bumped[idx].reshape(-1)[i] = flat[i] + h
            up = value_at(bumped)
            bumped[idx].reshape(-1)[i] = flat[i] - h
            down = value_at(bumped)
            numeric[j] = (up - down) / (2.0 * h)
        analytic_probed = analytic[idx].reshape(-1)[probe].astype(np.float64)
        scale = max(scale, np.abs(numeric).max(initial=0.0))
        err = np.abs(analytic_probed - numeric).max(initial=0.0)
        worst = max(worst, err / scale)
    return worst


def away_from_zero(rng: np.random.Generator, shape, margin: float,
                   dtype=np.float64) -> np.ndarray:
    """Values with |x| >= margin, so an FD step cannot cross a kink at 0."""
    magnitude = rng.uniform(margin, 1.0, size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    return (magnitude * sign).astype(dtype)


def distinct_windows(rng: np.random.Generator, shape, gap: float,
                     dtype=np.float64) -> np.ndarray:
    """A field whose values are pairwise separated by at least ``gap``.

    Built from a shuffled ramp, so every 2x2 pooling window has a unique
    maximum regardless of how the field is blocked.
    """
    n = int(np.prod(shape))
    ramp = (np.arange(n, dtype=np.float64) - n / 2.0) * gap
    return rng.permutation(ramp).reshape(shape).astype(dtype)


def kink_margin(fn) -> float:
    """Smallest distance from any kink encountered while running ``fn``.

    Wraps relu/leaky_relu/absolute (distance of the argument from zero),
    maximum (gap between the branches), max_pool2 (gap between the top
    two values in each window) and channel_pool (gap between the top two
    channels per pixel), runs ``fn()`` once, and restores the ops. A
    finite-difference check is only a valid oracle when this margin
    comfortably exceeds the probe step.
    """
    from nowquant import tensor as T

    margins = [np.inf]
    saved = {name: getattr(T, name)
             for name in ("relu", "leaky_relu", "absolute", "maximum",
                          "max_pool2", "channel_pool")}

    def at_zero(name):
        def op(t):
            margins.append(np.abs(t.values).min(initial=np.inf))
            return saved[name](t)
        return op

    def two_arg(a, b):
        margins.append(np.abs(a.values - b.values).min(initial=np.inf))
        return saved["maximum"](a, b)

    def pool(t):
        v = t.values
        n, c, h, w = v.shape
        blocks = (v.reshape(n, c, h // 2, 2, w // 2, 2)
                  .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4))
        s = np.sort(blocks, axis=-1)
        margins.append((s[..., 3] - s[..., 2]).min(initial=np.inf))
        return saved["max_pool2"](t)

    def cpool(t):
        v = t.values
        if v.shape[1] > 1:
            s = np.sort(v, axis=1)
            margins.append((s[:, -1] - s[:, -2]).min(initial=np.inf))
        return saved["channel_pool"](t)

    T.relu, T.leaky_relu, T.absolute = at_zero("relu"), at_zero("leaky_relu"), at_zero("absolute")
    T.maximum, T.max_pool2, T.channel_pool = two_arg, pool, cpool
    try:
        fn()
    finally:
        for name, f in saved.items():
            setattr(T, name, f)
    return float(min(margins))
