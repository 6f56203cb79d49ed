"""Parameter checkpoint files.

Format (stable, line-delimited UTF-8 text):

* optional header lines ``# key=value`` carrying free-form metadata,
* one record per parameter: ``name<TAB>d0,d1,...<TAB>v0 v1 v2 ...``
  where the dims are the row-major shape and the values use ``repr`` floats,
  so a save/load round trip is bit-exact.

Scalar parameters write an empty dim field.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .autodiff import Tensor

__all__ = ["save_checkpoint", "load_checkpoint"]


def save_checkpoint(path: str | Path, params: dict[str, Tensor],
                    meta: dict[str, str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for key, value in sorted((meta or {}).items()):
        if "\n" in key or "\n" in str(value):
            raise ValueError("checkpoint metadata must be single-line")
        lines.append(f"# {key}={value}")
    for name in sorted(params):
        tensor = params[name]
        if "\t" in name or "\n" in name:
            raise ValueError(f"invalid parameter name {name!r}")
        dims = ",".join(str(d) for d in tensor.shape)
        values = " ".join(repr(float(v)) for v in tensor.data.reshape(-1))
        lines.append(f"{name}\t{dims}\t{values}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict[str, str]]:
    path = Path(path)
    params: dict[str, Tensor] = {}
    meta: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                key, _, value = body.partition("=")
                meta[key.strip()] = value.strip()
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: malformed checkpoint record")
        name, dims, values = parts
        shape = tuple(int(d) for d in dims.split(",") if d != "")
        arr = np.array([float(v) for v in values.split()], dtype=np.float64)
        expected = int(np.prod(shape)) if shape else 1
        if arr.size != expected:
            raise ValueError(
                f"{path}:{lineno}: {name!r} has {arr.size} values, "
                f"shape {shape} needs {expected}")
        params[name] = Tensor(arr.reshape(shape), requires_grad=True)
    return params, meta
