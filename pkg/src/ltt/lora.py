"""Low-rank adapters on the image encoder's attention projections.

Adapted forward: h = W0 x + gamma * B (A x), with A ~ Kaiming-uniform
(bound 1/sqrt(d2)) and B = 0 at init, so a fresh adapter is an exact
identity on the model output. The base weights are never written.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import ClipModel
from .optim import Parameter
from .serial import read_checkpoint, write_checkpoint
from .tensor import Tensor

MATRIX_TAGS = ("q", "k", "v", "o")


@dataclass
class LoraConfig:
    rank: int = 16
    scale: float = 12.0  # the distribution-shift setting; fine-grained-style tasks want ~2
    matrices: tuple = ("q", "k", "v", "o")
    layers: tuple = ()  # 1-based layer indices; empty means the last two

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.scale < 0:
            raise ValueError(f"scale must be >= 0, got {self.scale}")
        self.matrices = tuple(self.matrices)
        self.layers = tuple(self.layers)
        if not self.matrices:
            raise ValueError("target matrices must be non-empty")
        for m in self.matrices:
            if m not in MATRIX_TAGS:
                raise ValueError(f"unknown matrix tag {m!r} (expected one of {MATRIX_TAGS})")

    def resolved_layers(self, num_layers: int) -> tuple:
        layers = self.layers or (num_layers - 1, num_layers)
        for i in layers:
            if not (1 <= i <= num_layers):
                raise ValueError(f"layer index {i} out of range 1..{num_layers}")
        return tuple(sorted(set(layers)))

    def to_json(self) -> dict:
        return {"rank": self.rank, "scale": self.scale,
                "matrices": list(self.matrices), "layers": list(self.layers)}

    @classmethod
    def from_json(cls, obj: dict) -> "LoraConfig":
        return cls(rank=obj.get("rank", 16), scale=obj.get("scale", 2.0),
                   matrices=tuple(obj.get("matrices", MATRIX_TAGS)),
                   layers=tuple(obj.get("layers", ())))


class LoraAdapter:
    """One (A, B) pair attached in parallel to a frozen projection matrix."""

    def __init__(self, base_name: str, d1: int, d2: int, rank: int, scale: float, dtype):
        self.base_name = base_name
        self.scale = scale
        self.d1 = d1
        self.d2 = d2
        self.a = Parameter(f"{base_name}.lora_a", Tensor(np.zeros((rank, d2), dtype=dtype)),
                           trainable=True)
        self.b = Parameter(f"{base_name}.lora_b", Tensor(np.zeros((d1, rank), dtype=dtype)),
                           trainable=True)

    def init_weights(self, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(self.d2)
        dt = self.a.data.dtype
        self.a.value.data = rng.uniform(-bound, bound, size=self.a.data.shape).astype(dt)
        self.b.value.data = np.zeros_like(self.b.data)

    def load_state(self, a: np.ndarray, b: np.ndarray):
        self.a.value.data = a.astype(self.a.data.dtype)
        self.b.value.data = b.astype(self.b.data.dtype)

    def delta(self, x: Tensor) -> Tensor:
        # gamma * (x A^T) B^T, the parallel branch of the adapted projection
        h = T.matmul(x, T.transpose(self.a.value, (1, 0)))
        h = T.matmul(h, T.transpose(self.b.value, (1, 0)))
        return T.mul(h, float(self.scale))


class AdaptedEncoder:
    """Frozen base model plus episode-local LoRA adapters."""

    def __init__(self, model: ClipModel, config: LoraConfig, rng: np.random.Generator):
        self.model = model
        self.config = config
        d = model.vit.embed_dim
        if config.rank > d // 2:
            raise ValueError(f"rank {config.rank} exceeds min(d1,d2)/2 = {d // 2}")
        layers = config.resolved_layers(model.vit.num_layers)
        self.adapters: dict[tuple, LoraAdapter] = {}
        for li in layers:
            for m in config.matrices:
                base = f"img.layers.{li - 1}.attn.w{m}"
                if base not in model.params:
                    raise ValueError(f"no such base matrix {base!r}")
                self.adapters[(li, m)] = LoraAdapter(base, d, d, config.rank,
                                                     config.scale, model.dtype)
        self.baseline: dict[str, np.ndarray] | None = None
        self.reset(rng)

    # forward hooks -------------------------------------------------------

    def _adapter_fn(self, prefix: str, matrix: str):
        if not prefix.startswith("img.layers."):
            return None
        li = int(prefix.split(".")[2]) + 1
        return self.adapters.get((li, matrix[-1]))

    def encode_image_batch(self, images):
        return self.model.encode_image_batch(images, adapter_fn=self._adapter_fn)

    def encode_image(self, image, mask=None):
        return self.model.encode_image(image, mask=mask, adapter_fn=self._adapter_fn)

    # lifecycle -----------------------------------------------------------

    def trainable_params(self) -> list[Parameter]:
        out = []
        for key in sorted(self.adapters):
            ad = self.adapters[key]
            out.extend([ad.a, ad.b])
        return out

    def trainable_count(self) -> int:
        return sum(p.data.size for p in self.trainable_params())

    def reset(self, rng: np.random.Generator):
        """Return to the pre-episode state: B=0 with a fresh A draw, or the
        loaded pre-initialized adapter weights when those were installed."""
        if self.baseline is not None:
            for key in sorted(self.adapters):
                ad = self.adapters[key]
                ad.load_state(self.baseline[ad.a.name], self.baseline[ad.b.name])
        else:
            for key in sorted(self.adapters):
                self.adapters[key].init_weights(rng)
        for p in self.trainable_params():
            p.zero_grad()

    def set_baseline_from_current(self):
        self.baseline = {p.name: p.data.copy() for p in self.trainable_params()}

    def save_adapters(self, path):
        arrays = {p.name: p.data for p in self.trainable_params()}
        arrays["meta.lora"] = np.asarray(
            [self.config.rank, self.config.scale,
             len(self.config.matrices), len(self.adapters)], dtype=np.float32)
        write_checkpoint(path, arrays)

    def load_adapters(self, path):
        arrays = read_checkpoint(path)
        arrays.pop("meta.lora", None)
        for key in sorted(self.adapters):
            ad = self.adapters[key]
            if ad.a.name not in arrays or ad.b.name not in arrays:
                raise ValueError(f"adapter checkpoint missing {ad.a.name!r}")
            if arrays[ad.a.name].shape != ad.a.data.shape:
                raise ValueError(
                    f"adapter {ad.a.name!r} has shape {arrays[ad.a.name].shape}, "
                    f"expected {ad.a.data.shape}")
            ad.load_state(arrays[ad.a.name], arrays[ad.b.name])
        self.set_baseline_from_current()


def attach(model: ClipModel, config: LoraConfig,
           rng: np.random.Generator | None = None) -> AdaptedEncoder:
    if rng is None:
        rng = np.random.default_rng(0)
    return AdaptedEncoder(model, config, rng)


def trainable_parameter_count(config: LoraConfig, embed_dim: int, num_layers: int) -> int:
    layers = config.resolved_layers(num_layers)
    return len(layers) * len(config.matrices) * 2 * config.rank * embed_dim


def base_weight_hash(model: ClipModel) -> str:
    """sha256 over every base parameter, in name order."""
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(model.params[name].data).tobytes())
    return h.hexdigest()
