import dataclasses

import numpy as np
import pytest

from latentscene import nets
from latentscene import tensor as T


def finite_difference_check(build, tracked, rng, samples=4, step=1e-4,
                            rtol=1e-4, atol=1e-6):
    """Compare analytic gradients of `build()` against central differences.

    `build` must rebuild the loss graph from the current parameter data on
    every call (64-bit). A handful of coordinates is probed per tensor.
    """
    loss = build()
    T.backward(loss)
    grads = [t.grad.copy() for t in tracked]
    worst = 0.0
    for tensor, grad in zip(tracked, grads):
        flat = tensor.data.ravel()
        count = min(samples, flat.size)
        indices = rng.choice(flat.size, size=count, replace=False)
        for i in indices:
            original = flat[i]
            flat[i] = original + step
            upper = build().item()
            flat[i] = original - step
            lower = build().item()
            flat[i] = original
            numeric = (upper - lower) / (2.0 * step)
            analytic = grad.ravel()[i]
            scale = max(abs(numeric), abs(analytic))
            if scale < atol:
                continue
            rel = abs(numeric - analytic) / scale
            worst = max(worst, rel)
            assert rel < rtol, (f"gradient mismatch at {tensor.data.shape} coord"
                                f" {i}: analytic {analytic}, numeric {numeric}")
    return worst


def tiny_arch(resolution=16, layout=None):
    """Smallest architecture that still exercises every layer type."""
    layout = layout or nets.LatentLayout(8, 2, 2)
    arch = nets.desk_arch(64, layout)
    return dataclasses.replace(
        arch,
        resolution=resolution,
        conv_specs=(nets.ConvSpec(3, 2, 2), nets.ConvSpec(3, 3, 2),
                    nets.ConvSpec(3, 3, 2), nets.ConvSpec(3, 4, 2)),
        enc_dense=(12, 10),
        dec_dense=(10,),
        dec_grid_channels=2,
    ).validate()


def tiny_params(kind, seed=0, dtype=np.float64, arch=None):
    arch = arch or tiny_arch()
    raw = nets.init_params(arch, kind, seed)
    return arch, nets.as_tensors({k: v.astype(dtype) for k, v in raw.items()})


def random_batch(rng, arch, batch=2, steps=1):
    out = {}
    res = arch.resolution
    for t in range(steps):
        suffix = "" if t == 0 else str(t)
        out["rgb" + suffix] = rng.random((batch, 3, res, res))
        out["car" + suffix] = (rng.random((batch, res, res)) < 0.1).astype(np.uint8)
        out["lane" + suffix] = (rng.random((batch, res, res)) < 0.05).astype(np.uint8)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
