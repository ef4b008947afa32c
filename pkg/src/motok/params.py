"""Named parameter store: weights, gradient accumulators, optimizer moments."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .tensor import DEFAULT_DTYPE, Tensor


class ParamStore:
    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def create(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(data, dtype=DEFAULT_DTYPE), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def n_values(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing={sorted(missing)[:4]} extra={sorted(extra)[:4]}")
        for k, t in self._params.items():
            arr = np.asarray(arrays[k], dtype=DEFAULT_DTYPE)
            if arr.shape != t.data.shape:
                raise ConfigError(f"shape mismatch for {k}: {arr.shape} vs {t.data.shape}")
            t.data = arr
