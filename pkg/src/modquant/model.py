"""Synthetic layer stacks standing in for a real vision-language model.

A model is a sequential stack: vision layers (one square weight each)
followed by cross-modal layers, each of which owns the four component
groups quantized as units (attention QKV including modality experts,
attention output, MLP gate/up, MLP down).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvariantError
from .tensorio import check_matrix, load_container, write_container

GROUP_ORDER = ("attn_qkv", "attn_out", "mlp_gate_up", "mlp_down")

# Member suffixes per group; attn_qkv carries a modality-expert projection.
_GROUP_MEMBERS = {
    "attn_qkv": ("q_proj", "k_proj", "v_proj", "expert_qkv"),
    "attn_out": ("o_proj",),
    "mlp_gate_up": ("gate_proj", "up_proj"),
    "mlp_down": ("down_proj",),
}


@dataclass
class ComponentGroup:
    group_kind: str
    members: list[str]

    def __post_init__(self):
        if self.group_kind not in GROUP_ORDER:
            raise InvariantError(f"unknown group kind {self.group_kind!r}")
        if not self.members:
            raise InvariantError(f"group {self.group_kind!r} has no members")


@dataclass
class CrossModalLayer:
    index: int
    groups: list[ComponentGroup]

    def __post_init__(self):
        kinds = tuple(g.group_kind for g in self.groups)
        if kinds != GROUP_ORDER:
            raise InvariantError(
                f"cross-modal layer {self.index} must hold the four groups "
                f"{GROUP_ORDER} in order, got {kinds}"
            )


@dataclass
class SyntheticModel:
    vision_layers: list[str]
    crossmodal_layers: list[CrossModalLayer]
    weights: dict[str, np.ndarray]
    embed_dims: tuple[int, int]
    misc_params: int = 0

    def __post_init__(self):
        names = list(self.vision_layers) + [
            m for layer in self.crossmodal_layers for g in layer.groups for m in g.members
        ]
        if len(set(names)) != len(names):
            raise InvariantError("weight matrix names must be unique")
        missing = [n for n in names if n not in self.weights]
        if missing:
            raise InvariantError(f"weights missing for {missing}")

    def forward_vision(self, x: np.ndarray) -> np.ndarray:
        """Propagate activations through the full vision stack."""
        for name in self.vision_layers:
            x = (x @ self.weights[name]).astype(np.float32)
        return x

    def forward_crossmodal_layer(self, layer: CrossModalLayer, x: np.ndarray) -> np.ndarray:
        """One cross-modal layer: apply each group's first member in order."""
        for group in layer.groups:
            x = (x @ self.weights[group.members[0]]).astype(np.float32)
        return x


def vision_seq_len(image_size: int, patch_size: int) -> int:
    """Sequence length of vision samples: (image_size/patch_size)^2 + 1."""
    if patch_size <= 0 or image_size % patch_size != 0:
        raise InvariantError(
            f"patch size {patch_size} must divide image size {image_size}"
        )
    return (image_size // patch_size) ** 2 + 1


def generate_model(
    vision_layers: int,
    crossmodal_layers: int,
    dim: int,
    seed: int,
    misc_params: int = 0,
) -> SyntheticModel:
    """Random synthetic model with square dim x dim weights.

    Weights are scaled by 1/sqrt(dim) so activations stay O(1) through
    arbitrarily deep stacks.
    """
    if dim < 1 or vision_layers < 0 or crossmodal_layers < 0:
        raise InvariantError("bad model geometry")
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(dim)
    weights: dict[str, np.ndarray] = {}

    def fresh(name):
        weights[name] = (rng.standard_normal((dim, dim)) * scale).astype(np.float32)

    vnames = []
    for i in range(vision_layers):
        name = f"vision.{i}.proj"
        fresh(name)
        vnames.append(name)

    layers = []
    for j in range(crossmodal_layers):
        groups = []
        for kind in GROUP_ORDER:
            members = [f"crossmodal.{j}.{kind}.{suffix}" for suffix in _GROUP_MEMBERS[kind]]
            for m in members:
                fresh(m)
            groups.append(ComponentGroup(kind, members))
        layers.append(CrossModalLayer(j, groups))

    return SyntheticModel(vnames, layers, weights, (dim, dim), misc_params)


def save_model(model: SyntheticModel, path) -> None:
    attrs = {
        "schema": "synthetic-model/1",
        "vision_layers": list(model.vision_layers),
        "crossmodal_layers": [
            {
                "index": layer.index,
                "groups": [
                    {"kind": g.group_kind, "members": list(g.members)}
                    for g in layer.groups
                ],
            }
            for layer in model.crossmodal_layers
        ],
        "embed_dims": list(model.embed_dims),
        "misc_params": model.misc_params,
    }
    write_container(path, model.weights, attrs)


def load_model(path) -> SyntheticModel:
    tensors, attrs = load_container(path)
    if attrs.get("schema") != "synthetic-model/1":
        raise InvariantError(f"{path}: not a synthetic-model container")
    layers = [
        CrossModalLayer(
            entry["index"],
            [ComponentGroup(g["kind"], list(g["members"])) for g in entry["groups"]],
        )
        for entry in attrs["crossmodal_layers"]
    ]
    weights = {name: check_matrix(t) for name, t in tensors.items()}
    return SyntheticModel(
        list(attrs["vision_layers"]),
        layers,
        weights,
        tuple(attrs["embed_dims"]),
        int(attrs.get("misc_params", 0)),
    )
