"""Shared fixtures and the finite-difference helper for network checks."""

import numpy as np
import pytest

from lidarflow.lidar_ingest import GridSpec
from lidarflow.network import NetworkConfig


def desk_spec() -> GridSpec:
    return GridSpec(rows=32, cols=64, image_h=64, image_w=128)


def desk_config(**overrides) -> NetworkConfig:
    kw = dict(spec=desk_spec(), base_channels=16)
    kw.update(overrides)
    return NetworkConfig(**kw)


def kitti_scale_config() -> NetworkConfig:
    return NetworkConfig(spec=GridSpec(), base_channels=64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def network_fd_sample_check(params, sample, loss_fn, layer_names,
                            coords_per_layer=3, h=1e-5, seed=0):
    """Compare analytic grads with central differences on sampled weights.

    loss_fn(params) must run a fresh forward and return the scalar loss
    Tensor4. Returns the worst relative error over the probed coordinates.
    """
    from lidarflow.autodiff import backward

    params.zero_grad()
    loss = loss_fn(params)
    backward(loss)
    probe_rng = np.random.default_rng(seed)
    worst = 0.0
    for name in layer_names:
        t = params.tensors[name]
        analytic = t.grad
        assert analytic is not None, f"no gradient reached {name}"
        flat = t.data.ravel()
        picks = probe_rng.choice(flat.size, size=min(coords_per_layer, flat.size),
                                 replace=False)
        for k in picks:
            keep = flat[k]
            flat[k] = keep + h
            fp = loss_fn(params).item()
            flat[k] = keep - h
            fm = loss_fn(params).item()
            flat[k] = keep
            num = (fp - fm) / (2 * h)
            ana = float(analytic.ravel()[k])
            rel = abs(ana - num) / max(abs(ana) + abs(num), 1e-8)
            worst = max(worst, rel)
    params.zero_grad()
    return worst
