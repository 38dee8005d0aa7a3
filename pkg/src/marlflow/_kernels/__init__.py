"""Kernel backend selection.

The compiled extension (`marlflow._kernels._fast`) is used when importable;
otherwise the numpy implementation. Override with MARLFLOW_KERNELS=python
or MARLFLOW_KERNELS=compiled (the latter fails loudly if the extension is
missing). Both backends agree on sampled tokens and on log-probs/gradients
to ~1e-12; byte-level run determinism is guaranteed within one backend.
"""
from __future__ import annotations

import os

from . import pyref

_choice = os.environ.get("MARLFLOW_KERNELS", "auto").strip().lower()

if _choice in ("auto", "", "compiled", "c", "fast"):
    try:
        from . import _fast as _impl  # type: ignore[attr-defined]
    except ImportError:
        if _choice in ("compiled", "c", "fast"):
            raise ImportError(
                "MARLFLOW_KERNELS requested the compiled backend but "
                "marlflow._kernels._fast is not built; run "
                "`python setup.py build_ext --inplace`"
            )
        _impl = pyref
elif _choice in ("python", "py", "pyref"):
    _impl = pyref
else:
    raise ValueError(f"unknown MARLFLOW_KERNELS value: {_choice!r}")

BACKEND_NAME: str = _impl.BACKEND_NAME
sample_tokens = _impl.sample_tokens
score_tokens = _impl.score_tokens
policy_loss_grad = _impl.policy_loss_grad
value_loss_grad = _impl.value_loss_grad
gae_batch = _impl.gae_batch


def backend_name() -> str:
    return BACKEND_NAME
