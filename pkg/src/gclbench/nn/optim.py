"""Adam with decoupled weight decay, EMA updates and checkpoint I/O."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], lr: float, weight_decay: float,
              state: AdamState, betas=(0.9, 0.999), eps: float = 1e-8) -> list[np.ndarray]:
    """One Adam update with decoupled weight decay; returns new arrays."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ValueError("optimizer state does not match parameters")
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(p) if g is None else g
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        update = (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
        out.append(p - lr * (update + weight_decay * p))
    return out


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 0.01, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = AdamState()

    def step(self) -> None:
        new = adam_step([p.data for p in self.params], [p.grad for p in self.params],
                        self.lr, self.weight_decay, self.state)
        for p, d in zip(self.params, new):
            p.data = d

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def ema_update(target: list[Tensor], online: list[Tensor], decay: float) -> None:
    """target <- decay * target + (1 - decay) * online, in place and gradient-free."""
    for t, o in zip(target, online):
        t.data = decay * t.data + (1.0 - decay) * o.data


def save_checkpoint(directory, state: dict[str, np.ndarray]) -> None:
    """Write ``params.bin`` (little-endian float64, concatenated) and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    offset = 0
    with open(directory / "params.bin", "wb") as fh:
        for name in sorted(state):
            arr = np.ascontiguousarray(state[name], dtype="<f8")
            fh.write(arr.tobytes())
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    (directory / "manifest.json").write_text(json.dumps({"dtype": "float64", "arrays": manifest}, indent=1))


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    flat = np.fromfile(directory / "params.bin", dtype="<f8")
    out = {}
    for entry in manifest["arrays"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        out[entry["name"]] = flat[entry["offset"]:entry["offset"] + size].reshape(entry["shape"]).copy()
    return out
