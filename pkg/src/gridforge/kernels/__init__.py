"""Hot-kernel selection.

The compiled extension (gridforge._core, built from _core.pyx) and the numpy
implementation (gridforge.kernels.pure) export the same functions:

    decode, encode, build_arrows, hilbert_keys

The compiled one is used when importable; set GRIDFORGE_KERNELS=pure or
=compiled to force a choice. ``implementation_name()`` reports the active
backend and ``get_implementation(name)`` returns a specific one (used by the
kernel benchmark to compare both).
"""

import os

from . import pure

_FORCED = os.environ.get("GRIDFORGE_KERNELS", "").strip().lower()

_compiled = None
if _FORCED != "pure":
    try:
        from .. import _core as _compiled
    except ImportError:
        _compiled = None
        if _FORCED == "compiled":
            raise ImportError(
                "GRIDFORGE_KERNELS=compiled but the gridforge._core extension is not built"
            )

_active = _compiled if _compiled is not None else pure

decode = _active.decode
encode = _active.encode
build_arrows = _active.build_arrows
hilbert_keys = _active.hilbert_keys


def implementation_name() -> str:
    return "compiled" if _active is _compiled else "pure"


def get_implementation(name: str):
    if name == "pure":
        return pure
    if name == "compiled":
        if _compiled is None:
            raise ImportError("gridforge._core extension is not built")
        return _compiled
    raise ValueError(f"unknown kernel implementation {name!r}")


def available_implementations() -> list[str]:
    names = ["pure"]
    if _compiled is not None:
        names.insert(0, "compiled")
    return names
