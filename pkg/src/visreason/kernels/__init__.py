"""Hot-loop kernels with a compiled core and a pure-numpy fallback.

The Cython extension (visreason.kernels._native) is used when it imported
cleanly; otherwise the numpy implementations serve. Set VISREASON_PURE=1
to force the fallback. Both backends are bit-identical by construction;
`backend_name()` reports which one is active.
"""

from __future__ import annotations

import os

from . import _pure

if os.environ.get("VISREASON_PURE"):
    _impl = _pure
    _BACKEND = "pure"
else:
    try:
        from . import _native as _impl  # type: ignore[no-redef]

        _BACKEND = "native"
    except ImportError:
        _impl = _pure
        _BACKEND = "pure"

alpha_blend = _impl.alpha_blend
zoom_nearest = _impl.zoom_nearest
simulate_chain = _impl.simulate_chain


def backend_name() -> str:
    return _BACKEND


def available_backends() -> dict[str, object]:
    """Importable kernel modules keyed by name (for parity tests and benchmarks)."""
    found: dict[str, object] = {"pure": _pure}
    try:
        from . import _native

        found["native"] = _native
    except ImportError:
        pass
    return found
