"""Toy vision transformer with adapter hook points on the Q and V projections.

The backbone (patch embedding, positional embeddings, class token, attention
and MLP blocks, layer norms) is randomly initialized and frozen by default;
only the classifier head and whatever adapter pairs are trainable receive
gradients. Attention projection weights are stored output-major (d x d,
applied as ``tokens @ W^T``) so adapter deltas B @ A fold into them directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import lora
from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor

def weight_std(embed_dim: int) -> float:
    """Width-scaled gaussian init: unit-gain signal propagation per matrix."""
    return 1.0 / math.sqrt(embed_dim)


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 1
    embed_dim: int = 64
    num_heads: int = 4
    num_layers: int = 2
    mlp_ratio: float = 2.0
    num_classes: int = 20
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 1 or self.patch_size < 1:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim < 1 or self.num_heads < 1:
            raise ConfigError("embed_dim and num_heads must be positive")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.num_layers < 1:
            raise ConfigError("num_layers must be positive")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if self.channels < 1:
            raise ConfigError("channels must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


class ViTModel:
    def __init__(self, cfg: ViTConfig, params: dict, backbone_frozen: bool = True):
        self.cfg = cfg
        self.params = params
        self.backbone_frozen = backbone_frozen

    def weight_names(self):
        return list(self.params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def backbone_tensors(self):
        return [t for name, t in self.params.items() if name != "head.w"]

    def set_backbone_frozen(self, frozen: bool) -> None:
        self.backbone_frozen = frozen
        for t in self.backbone_tensors():
            t.requires_grad = not frozen


def _weight_plan(cfg: ViTConfig):
    """Fixed (name, shape, kind) order; init draws follow this order exactly."""
    d, hidden = cfg.embed_dim, cfg.mlp_dim
    plan = [
        ("patch.w", (cfg.patch_dim, d), "gauss"),
        ("pos", (1, cfg.num_tokens, d), "gauss"),
        # zero-init: a random class token is a content-free constant that
        # dominates the classifier features at this scale
        ("cls", (1, 1, d), "zeros"),
    ]
    for i in range(cfg.num_layers):
        plan += [
            (f"layer{i}.ln1.g", (d,), "ones"),
            (f"layer{i}.ln1.b", (d,), "zeros"),
            (f"layer{i}.wq", (d, d), "gauss"),
            (f"layer{i}.wk", (d, d), "gauss"),
            (f"layer{i}.wv", (d, d), "gauss"),
            (f"layer{i}.wo", (d, d), "gauss"),
            (f"layer{i}.ln2.g", (d,), "ones"),
            (f"layer{i}.ln2.b", (d,), "zeros"),
            (f"layer{i}.mlp.w1", (d, hidden), "gauss"),
            (f"layer{i}.mlp.w2", (hidden, d), "gauss"),
        ]
    plan += [
        ("ln_f.g", (d,), "ones"),
        ("ln_f.b", (d,), "zeros"),
        # zero-init head: unseen classes start at uniform probability instead
        # of arbitrary suppressed logits
        ("head.w", (d, cfg.num_classes), "zeros"),
    ]
    return plan


def init_model(cfg: ViTConfig, dtype=np.float32) -> ViTModel:
    """Fresh model with width-scaled gaussian weights, deterministic under cfg.seed."""
    cfg.validate()
    rng = T.make_rng(cfg.seed)
    std = weight_std(cfg.embed_dim)
    params = {}
    for name, shape, kind in _weight_plan(cfg):
        if kind == "gauss":
            params[name] = T.randn(shape, rng, scale=std, dtype=dtype)
        elif kind == "ones":
            params[name] = Tensor(np.ones(shape), dtype=dtype)
        else:
            params[name] = T.zeros(shape, dtype=dtype)
    model = ViTModel(cfg, params, backbone_frozen=True)
    model.set_backbone_frozen(True)
    model.params["head.w"].requires_grad = True
    return model


def new_stack(cfg: ViTConfig) -> lora.LoRAStack:
    return lora.LoRAStack(cfg.num_layers, cfg.embed_dim)


def _patchify(cfg: ViTConfig, images: Tensor) -> Tensor:
    b = images.shape[0]
    g, p, c = cfg.grid, cfg.patch_size, cfg.channels
    x = T.reshape(images, (b, c, g, p, g, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (b, g * g, cfg.patch_dim))


def forward(model: ViTModel, stack: lora.LoRAStack, images) -> Tensor:
    """Logits for a batch of images, adapters applied on Q and V."""
    cfg = model.cfg
    if not isinstance(images, Tensor):
        images = Tensor(images, dtype=model.params["patch.w"].dtype)
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if len(images.shape) != 4 or images.shape[1:] != expected:
        raise ShapeError(f"forward: expected images [batch, {expected}], got {images.shape}")
    if stack.num_layers != cfg.num_layers or stack.dim != cfg.embed_dim:
        raise ContractError(
            f"forward: stack ({stack.num_layers} layers, dim {stack.dim}) does not "
            f"match model ({cfg.num_layers} layers, dim {cfg.embed_dim})"
        )
    b = images.shape[0]
    d, h = cfg.embed_dim, cfg.num_heads
    dh = d // h
    t = cfg.num_tokens

    # center unit-interval pixels so patch embeddings carry content, not DC
    centered = T.scale(T.add(images, Tensor(np.full(images.shape, -0.5),
                                            dtype=images.dtype)), 2.0)
    x = T.matmul(_patchify(cfg, centered), model["patch.w"])
    cls = T.broadcast_to(model["cls"], (b, 1, d))
    x = T.concat([cls, x], axis=1)
    x = T.add(x, T.broadcast_to(model["pos"], (b, t, d)))

    def split_heads(y):
        return T.transpose(T.reshape(y, (b, t, h, dh)), (0, 2, 1, 3))

    for i in range(cfg.num_layers):
        xn = T.layer_norm(x, model[f"layer{i}.ln1.g"], model[f"layer{i}.ln1.b"])
        q = split_heads(lora.apply_tokens(stack, (i, "q"), model[f"layer{i}.wq"], xn))
        k = split_heads(T.matmul(xn, T.transpose(model[f"layer{i}.wk"], (1, 0))))
        v = split_heads(lora.apply_tokens(stack, (i, "v"), model[f"layer{i}.wv"], xn))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        attn = T.softmax(scores, axis=-1)
        ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
        x = T.add(x, T.matmul(ctx, T.transpose(model[f"layer{i}.wo"], (1, 0))))
        xn2 = T.layer_norm(x, model[f"layer{i}.ln2.g"], model[f"layer{i}.ln2.b"])
        mlp = T.matmul(T.gelu(T.matmul(xn2, model[f"layer{i}.mlp.w1"])), model[f"layer{i}.mlp.w2"])
        x = T.add(x, mlp)

    x = T.layer_norm(x, model["ln_f.g"], model["ln_f.b"])
    cls_out = T.reshape(T.slice_axis(x, 1, 0, 1), (b, d))
    return T.matmul(cls_out, model["head.w"])


def trainable_parameters(model: ViTModel, stack: lora.LoRAStack):
    """Ordered trainables: head, then adapter pairs (backbone too if unfrozen)."""
    out = []
    if not model.backbone_frozen:
        out.extend(model.backbone_tensors())
    out.append(model.params["head.w"])
    out.extend(stack.trainable_tensors())
    return out


def model_tensors(model: ViTModel) -> dict:
    return {name: t.nd for name, t in model.params.items()}


def model_from_tensors(cfg: ViTConfig, tensors: dict, backbone_frozen: bool = True) -> ViTModel:
    cfg.validate()
    params = {}
    for name, shape, _ in _weight_plan(cfg):
        arr = tensors[name]
        if tuple(arr.shape) != shape:
            raise ShapeError(f"checkpoint tensor {name}: expected {shape}, got {arr.shape}")
        params[name] = Tensor(arr)
    model = ViTModel(cfg, params, backbone_frozen=backbone_frozen)
    model.set_backbone_frozen(backbone_frozen)
    model.params["head.w"].requires_grad = True
    return model
