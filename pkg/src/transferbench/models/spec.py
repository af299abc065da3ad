"""Declarative architecture descriptions and their derived layer labels."""

from __future__ import annotations

from dataclasses import dataclass, field

ARCH_KINDS = ("toy_cnn", "toy_resnet", "toy_vit", "toy_mixer")
PATCH = 4  # patch size for toy_vit / toy_mixer


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; the label set is a pure function of it.

    ``width`` is channels for the conv families and the embedding dimension
    for toy_vit / toy_mixer.  ``depth`` counts blocks.  Inputs are 3-channel
    square images of side ``input_size``.
    """

    arch_kind: str
    width: int = 16
    depth: int = 3
    input_size: int = 32
    num_classes: int = 8

    def __post_init__(self):
        if self.arch_kind not in ARCH_KINDS:
            raise ModelError(f"unsupported arch_kind {self.arch_kind!r}")
        if self.num_classes < 2 or self.width < 1 or self.depth < 1:
            raise ModelError("num_classes >= 2, width >= 1, depth >= 1 required")
        if self.arch_kind in ("toy_resnet", "toy_vit") and self.depth < 2:
            raise ModelError(f"{self.arch_kind} needs depth >= 2")
        if self.arch_kind == "toy_cnn" and self.input_size % (2 ** self.depth):
            raise ModelError("toy_cnn input_size must be divisible by 2**depth")
        if self.arch_kind == "toy_resnet" and (self.input_size // 2) % (2 ** (self.depth - 1)):
            raise ModelError("toy_resnet input_size/2 must be divisible by 2**(depth-1)")
        if self.arch_kind in ("toy_vit", "toy_mixer") and self.input_size % PATCH:
            raise ModelError(f"{self.arch_kind} input_size must be divisible by {PATCH}")

    @property
    def tokens(self) -> int:
        return (self.input_size // PATCH) ** 2

    @property
    def relu_labels(self) -> tuple:
        if self.arch_kind == "toy_cnn":
            return tuple(f"block{i}.relu" for i in range(1, self.depth + 1))
        if self.arch_kind == "toy_resnet":
            labels = ["stem.relu"]
            for i in range(1, self.depth + 1):
                labels += [f"block{i}.relu1", f"block{i}.relu2"]
            return tuple(labels)
        return ()

    @property
    def skip_labels(self) -> tuple:
        if self.arch_kind == "toy_resnet":
            return tuple(f"block{i}.skip" for i in range(1, self.depth + 1))
        if self.arch_kind == "toy_vit":
            out = []
            for i in range(1, self.depth + 1):
                out += [f"block{i}.attn_skip", f"block{i}.mlp_skip"]
            return tuple(out)
        if self.arch_kind == "toy_mixer":
            out = []
            for i in range(1, self.depth + 1):
                out += [f"block{i}.token_skip", f"block{i}.channel_skip"]
            return tuple(out)
        return ()

    @property
    def attention_labels(self) -> tuple:
        if self.arch_kind == "toy_vit":
            return tuple(f"block{i}.attn.weights" for i in range(1, self.depth + 1))
        return ()

    @property
    def capture_points(self) -> tuple:
        """Ordered feature-capture labels; a middle-layer index selects one."""
        return tuple(f"block{i}.out" for i in range(1, self.depth + 1))

    @property
    def cls_labels(self) -> tuple:
        if self.arch_kind == "toy_vit":
            return tuple(f"block{i}.cls" for i in range(1, self.depth + 1))
        return ()

    @property
    def layer_labels(self) -> tuple:
        labels = (self.relu_labels + self.skip_labels + self.attention_labels
                  + self.capture_points + self.cls_labels)
        assert len(labels) == len(set(labels))
        return labels

    def to_json(self) -> dict:
        return {
            "arch_kind": self.arch_kind,
            "width": self.width,
            "depth": self.depth,
            "input_size": self.input_size,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelSpec":
        return cls(**obj)
