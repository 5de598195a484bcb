"""A small two-tower classifier: vision MLP, projector, token-fused head.

The vision encoder embeds a flattened image, the projector maps that
embedding into the language head's space, and the head classifies the
concatenation of the projected embedding with a learned token embedding.
Quantization targets the linear layers of the vision and language modules;
the projector and the token-embedding table always stay full precision.

Layer names are stable strings ("vision.fc1", ..., "language.fc2") used for
capture hooks, weight overrides during QAT, optimizer parameter groups, and
tensor names in the serialized artifact.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import Tensor

__all__ = ["LinearLayer", "ModelConfig", "QUANT_MODULES", "ToyVLM"]

QUANT_MODULES = ("vision", "language")


@dataclass(frozen=True)
class ModelConfig:
    image_pixels: int = 64
    vision_hidden: int = 32
    embed_dim: int = 16
    lm_dim: int = 16
    token_dim: int = 16
    lm_hidden: int = 32
    n_tokens: int = 8
    n_classes: int = 16

    def __post_init__(self):
        for name in ("image_pixels", "vision_hidden", "embed_dim", "lm_dim",
                     "token_dim", "lm_hidden", "n_tokens", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


class LinearLayer:
    """y = x @ W.T + b with W stored as (d_out, d_in)."""

    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, d_out: int, d_in: int, rng: np.random.Generator, name: str) -> "LinearLayer":
        w = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_out, d_in))
        return cls(Tensor(w, requires_grad=True, name=f"{name}.weight"),
                   Tensor(np.zeros(d_out), requires_grad=True, name=f"{name}.bias"))

    def __call__(self, x: Tensor, weight: Tensor | None = None) -> Tensor:
        w = self.weight if weight is None else weight
        return autodiff.add(autodiff.matmul(x, autodiff.transpose(w)), self.bias)


class ToyVLM:
    """Two-tower model with named layers and per-module bookkeeping."""

    LAYER_NAMES = ("vision.fc1", "vision.fc2", "projector.fc",
                   "language.fc1", "language.fc2")

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        if rng is None:
            rng = np.random.default_rng(0)
        self.layers: dict[str, LinearLayer] = {
            "vision.fc1": LinearLayer.init(cfg.vision_hidden, cfg.image_pixels, rng, "vision.fc1"),
            "vision.fc2": LinearLayer.init(cfg.embed_dim, cfg.vision_hidden, rng, "vision.fc2"),
            "projector.fc": LinearLayer.init(cfg.lm_dim, cfg.embed_dim, rng, "projector.fc"),
            "language.fc1": LinearLayer.init(cfg.lm_hidden, cfg.lm_dim + cfg.token_dim,
                                             rng, "language.fc1"),
            "language.fc2": LinearLayer.init(cfg.n_classes, cfg.lm_hidden, rng, "language.fc2"),
        }
        self.token_embedding = Tensor(rng.normal(0.0, 1.0, size=(cfg.n_tokens, cfg.token_dim)),
                                      requires_grad=True, name="token_embedding")
        self._eye = np.eye(cfg.n_tokens, dtype=np.float32)

    # ------------------------------------------------------------------
    # forward

    def forward(self, images: np.ndarray, tokens: np.ndarray | None,
                weight_overrides: dict[str, Tensor] | None = None,
                _capture: dict[str, np.ndarray] | None = None) -> Tensor:
        """Logits for a batch. ``weight_overrides`` maps layer names to
        replacement weight tensors (the QAT fake-quantization hook).

        ``tokens=None`` runs with token id 0 for every sample, which leaves
        vision-side activations unaffected (image-only calibration).
        """
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 2 or images.shape[1] != self.cfg.image_pixels:
            raise ValueError(
                f"expected images of shape (batch, {self.cfg.image_pixels}), got {images.shape}")
        if tokens is None:
            tokens = np.zeros(len(images), dtype=np.int64)
        tokens = np.asarray(tokens)
        if tokens.shape != (len(images),):
            raise ValueError(f"expected {len(images)} token ids, got shape {tokens.shape}")
        if len(tokens) and (tokens.min() < 0 or tokens.max() >= self.cfg.n_tokens):
            raise ValueError(f"token id out of range [0, {self.cfg.n_tokens})")
        overrides = weight_overrides or {}
        unknown = set(overrides) - set(self.layers)
        if unknown:
            raise ValueError(f"unknown override layers {sorted(unknown)}; "
                             f"available: {list(self.layers)}")

        def apply(name: str, x: Tensor) -> Tensor:
            if _capture is not None and name in _capture:
                _capture[name] = x.data.copy()
            return self.layers[name](x, overrides.get(name))

        x = Tensor(images)
        h = autodiff.relu(apply("vision.fc1", x))
        emb = apply("vision.fc2", h)
        proj = apply("projector.fc", emb)
        tok = autodiff.matmul(Tensor(self._eye[tokens]), self.token_embedding)
        fused = autodiff.concat([proj, tok], axis=1)
        h2 = autodiff.relu(apply("language.fc1", fused))
        return apply("language.fc2", h2)

    def capture(self, layer_names, images: np.ndarray,
                tokens: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Input activations of the named layers on one no-grad pass."""
        names = [layer_names] if isinstance(layer_names, str) else list(layer_names)
        unknown = [n for n in names if n not in self.layers]
        if unknown:
            raise ValueError(f"unknown layer(s) {unknown}; available: {list(self.layers)}")
        grabbed: dict[str, np.ndarray] = {n: None for n in names}
        with autodiff.no_grad():
            self.forward(images, tokens, _capture=grabbed)
        return grabbed

    # ------------------------------------------------------------------
    # parameters and modules

    def named_params(self) -> list[tuple[str, Tensor]]:
        params = []
        for name, layer in self.layers.items():
            params.append((f"{name}.weight", layer.weight))
            params.append((f"{name}.bias", layer.bias))
        params.append(("token_embedding", self.token_embedding))
        return params

    @staticmethod
    def module_of(param_name: str) -> str:
        if param_name == "token_embedding":
            return "embedding"
        return param_name.split(".", 1)[0]

    def module_params(self, modules) -> list[tuple[str, Tensor]]:
        modules = {modules} if isinstance(modules, str) else set(modules)
        return [(n, p) for n, p in self.named_params() if self.module_of(n) in modules]

    def set_trainable(self, modules) -> None:
        modules = {modules} if isinstance(modules, str) else set(modules)
        for name, p in self.named_params():
            p.requires_grad = self.module_of(name) in modules
            p.grad = None

    def quant_layers(self, module: str) -> list[str]:
        return [n for n in self.layers if n.startswith(module + ".")]

    def checksums(self) -> dict[str, str]:
        """Per-module digest of parameter bytes, for freeze-integrity checks."""
        packs: dict = {}
        for name, p in self.named_params():
            mod = self.module_of(name)
            packs.setdefault(mod, hashlib.sha256()).update(p.data.tobytes())
        return {mod: h.hexdigest() for mod, h in sorted(packs.items())}

    def clone(self) -> "ToyVLM":
        other = ToyVLM(self.cfg)
        for (_, src), (_, dst) in zip(self.named_params(), other.named_params()):
            dst.data = src.data.copy()
            dst.requires_grad = src.requires_grad
        return other
