"""Backend dispatch for the hot kernels.

The compiled Cython extension is preferred when present; otherwise the
pure-numpy implementation is used. Selection happens once at import and
can be forced with the environment variable ``GSOCC_BACKEND`` set to
``cy``, ``py`` or ``auto`` (default).

Both backends implement the same functions with identical semantics:
``g2o_forward``, ``g2o_backward``, ``embed_forward``,
``nearest_embed_forward``, ``splat_forward``, ``splat_backward``.
"""

import os

from ._core_py import MODE_BERNOULLI, MODE_GF2, MODE_POISSON

_requested = os.environ.get("GSOCC_BACKEND", "auto")

if _requested not in ("auto", "cy", "py"):
    raise ValueError(f"GSOCC_BACKEND must be auto|cy|py, got {_requested!r}")

if _requested in ("auto", "cy"):
    try:
        from . import _core_cy as _impl
        BACKEND = "cy"
    except ImportError:
        if _requested == "cy":
            raise
        from . import _core_py as _impl
        BACKEND = "py"
else:
    from . import _core_py as _impl
    BACKEND = "py"

g2o_forward = _impl.g2o_forward
g2o_backward = _impl.g2o_backward
embed_forward = _impl.embed_forward
nearest_embed_forward = _impl.nearest_embed_forward
splat_forward = _impl.splat_forward
splat_backward = _impl.splat_backward

__all__ = [
    "BACKEND",
    "MODE_GF2",
    "MODE_BERNOULLI",
    "MODE_POISSON",
    "g2o_forward",
    "g2o_backward",
    "embed_forward",
    "nearest_embed_forward",
    "splat_forward",
    "splat_backward",
]
