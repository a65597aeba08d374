import numpy as np
import pytest

from gsocc.core import GaussianSet


def make_gaussians(rng, n, d=4, center=(0.0, 0.0, 0.0), spread=1.0,
                   scale_lo=-1.5, scale_hi=0.0):
    """Random but well-conditioned gaussian set around a center point."""
    return GaussianSet(
        means=rng.uniform(-spread, spread, (n, 3)) + np.asarray(center),
        quats=rng.normal(size=(n, 4)),
        log_scales=rng.uniform(scale_lo, scale_hi, (n, 3)),
        opacity_logits=rng.normal(size=n),
        embeddings=rng.normal(size=(n, d)),
    )


def perturb(gs, field, flat_index, h):
    """Copy of a gaussian set with one raw parameter entry shifted by h."""
    arrays = {
        "means": gs.means.copy(),
        "quats": gs.quats.copy(),
        "log_scales": gs.log_scales.copy(),
        "opacity_logits": gs.opacity_logits.copy(),
        "embeddings": gs.embeddings.copy(),
    }
    arrays[field].reshape(-1)[flat_index] += h
    return GaussianSet(**arrays)


def check_param_grads(loss_fn, gs, grads, fields=None, h=1e-4, rtol=1e-3,
                      atol=1e-7, skip=None):
    """Central-difference check of analytic gradients for every raw entry."""
    fields = fields or ["means", "quats", "log_scales", "opacity_logits",
                        "embeddings"]
    for field in fields:
        garr = getattr(grads, "d_" + field)
        size = getattr(gs, field).size
        for i in range(size):
            if skip and skip(field, i):
                continue
            fd = (loss_fn(perturb(gs, field, i, h))
                  - loss_fn(perturb(gs, field, i, -h))) / (2 * h)
            an = garr.reshape(-1)[i]
            assert an == pytest.approx(fd, rel=rtol, abs=atol), \
                f"{field}[{i}]: analytic {an} vs fd {fd}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
