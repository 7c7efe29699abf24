"""Model zoo: standard CNN, vanilla CBM, CBM-Res, CBM-Skip, SCM, oracle.

All image models share a convolutional base (three 3x3 conv blocks with
'same' padding, relu and 2x2 maxpooling, then dropout, flatten and a
hidden linear layer). Variants differ only in their heads:

standard     hidden -> plain linear(k) -> linear(p), no concept path
vanilla_cbm  hidden -> bottleneck linear(k); class head consumes sigma(c)
cbm_res      class head consumes sigma(c) + skip(hidden)
cbm_skip     class head consumes concat(sigma(c), skip(hidden))
scm          concept heads spread over the conv stages (global average
             and max pooling + linear(1) each); class head consumes
             concat(all sigma(c), hidden)
oracle       logistic regression straight on the true concept bits

In hard-bottleneck mode the class head consumes 0/1 roundings of the
concept probabilities; gradients pass through the soft sigmoid path
(straight-through estimator).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import InvalidConfigError, ShapeMismatchError, UnsupportedVariantError
from . import ops

VARIANTS = ("standard", "vanilla_cbm", "cbm_res", "cbm_skip", "scm", "oracle")
CONCEPT_VARIANTS = ("vanilla_cbm", "cbm_res", "cbm_skip", "scm")
NUM_CONV_STAGES = 3


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    num_classes: int
    num_concepts: int
    image_size: int = 64
    conv_channels: tuple[int, int, int] = (16, 32, 64)
    hidden_width: int = 64
    dropout: float = 0.0
    bottleneck: str = "soft"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidConfigError(f"unknown variant {self.variant!r}")
        if self.bottleneck not in ("soft", "hard"):
            raise InvalidConfigError(f"bottleneck must be 'soft' or 'hard', got {self.bottleneck!r}")
        if self.num_classes < 2 or self.num_concepts < 1:
            raise InvalidConfigError("need at least 2 classes and 1 concept")
        if self.image_size % 2 ** NUM_CONV_STAGES != 0:
            raise InvalidConfigError(
                f"image_size must be divisible by {2 ** NUM_CONV_STAGES}")


def scm_stage_of_concept(j: int) -> int:
    """Round-robin assignment of concept heads to conv stages, earliest first."""
    return j % NUM_CONV_STAGES


class ConvBase(nn.Module):
    """Shared convolutional trunk; returns per-stage maps and the hidden layer."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        channels = (3, *config.conv_channels)
        self.convs = nn.ModuleList(
            nn.Conv2d(channels[i], channels[i + 1], kernel_size=3, padding="same")
            for i in range(NUM_CONV_STAGES))
        flat = config.conv_channels[-1] * (config.image_size // 2 ** NUM_CONV_STAGES) ** 2
        self.hidden = nn.Linear(flat, config.hidden_width)
        self.dropout_p = config.dropout

    def forward(self, x):
        stages = []
        for conv in self.convs:
            x = ops.maxpool2d(ops.relu(conv(x)))
            stages.append(x)
        x = ops.dropout(x, self.dropout_p, self.training)
        hidden = ops.relu(self.hidden(x.flatten(1)))
        return stages, hidden


class ConceptModel(nn.Module):
    """Unified interface: forward(x) -> (class logits, concept logits or None)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.variant = config.variant
        k, p = config.num_concepts, config.num_classes
        if self.variant == "oracle":
            self.out = nn.Linear(k, p)
            return
        self.base = ConvBase(config)
        hidden = config.hidden_width
        if self.variant == "standard":
            self.mid = nn.Linear(hidden, k)
            self.out = nn.Linear(k, p)
        elif self.variant == "vanilla_cbm":
            self.bottleneck = nn.Linear(hidden, k)
            self.out = nn.Linear(k, p)
        elif self.variant == "cbm_res":
            # The skip layer is built after the shared layers so the shared
            # parameters get the same seeded init as a vanilla CBM.
            self.bottleneck = nn.Linear(hidden, k)
            self.out = nn.Linear(k, p)
            self.skip = nn.Linear(hidden, k)
        elif self.variant == "cbm_skip":
            self.bottleneck = nn.Linear(hidden, k)
            self.out = nn.Linear(2 * k, p)
            self.skip = nn.Linear(hidden, k)
        elif self.variant == "scm":
            # Each concept head reads its stage's average- and max-pooled
            # feature maps; average pooling alone trains poorly for the
            # size and stripe concepts at the early stages.
            stage_channels = config.conv_channels
            self.concept_heads = nn.ModuleList(
                nn.Linear(2 * stage_channels[scm_stage_of_concept(j)], 1)
                for j in range(k))
            self.out = nn.Linear(k + hidden, p)

    def _class_head_concepts(self, concept_logits):
        """Concept activations consumed by the class head (soft or hard)."""
        probs = ops.sigmoid(concept_logits)
        if self.config.bottleneck == "hard":
            hard = (probs > 0.5).to(probs.dtype)
            return hard + probs - probs.detach()
        return probs

    def forward(self, x):
        if self.variant == "oracle":
            return self.out(x.to(self.out.weight.dtype)), None
        stages, hidden = self.base(x)
        if self.variant == "standard":
            return self.out(ops.relu(self.mid(hidden))), None
        if self.variant == "scm":
            pooled = [torch.cat([s.mean(dim=(2, 3)), s.amax(dim=(2, 3))], dim=1)
                      for s in stages]
            concept_logits = ops.concat(
                [head(pooled[scm_stage_of_concept(j)])
                 for j, head in enumerate(self.concept_heads)], axis=1)
        else:
            concept_logits = self.bottleneck(hidden)
        activ = self._class_head_concepts(concept_logits)
        if self.variant == "vanilla_cbm":
            class_in = activ
        elif self.variant == "cbm_res":
            class_in = ops.add(activ, self.skip(hidden))
        elif self.variant == "cbm_skip":
            class_in = ops.concat([activ, self.skip(hidden)], axis=1)
        else:  # scm
            class_in = ops.concat([activ, hidden], axis=1)
        return self.out(class_in), concept_logits

    @property
    def has_concept_path(self) -> bool:
        return self.variant in CONCEPT_VARIANTS


def build(config: ModelConfig, seed: int) -> ConceptModel:
    """Construct a model with seeded fan-in-scaled uniform initialization."""
    torch.manual_seed(seed)
    return ConceptModel(config)


def forward(model: ConceptModel, images, mode: str = "eval"):
    """Run a forward pass in 'train' or 'eval' mode (dropout off in eval)."""
    if mode not in ("train", "eval"):
        raise InvalidConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    expected = _expected_input_shape(model.config)
    if tuple(images.shape[1:]) != expected:
        raise ShapeMismatchError(
            f"{model.variant} expects inputs of shape (N, {', '.join(map(str, expected))}), "
            f"got {tuple(images.shape)}")
    model.train(mode == "train")
    return model(images)


def _expected_input_shape(config: ModelConfig):
    if config.variant == "oracle":
        return (config.num_concepts,)
    return (3, config.image_size, config.image_size)


def predict_concepts_binary(model: ConceptModel, images) -> torch.Tensor:
    """0/1 concept predictions: strict threshold sigma(g(x)) > 0.5."""
    if not model.has_concept_path:
        raise UnsupportedVariantError(
            f"{model.variant} has no concept prediction path")
    model.eval()
    with torch.no_grad():
        _, concept_logits = model(images)
    return (concept_logits > 0).to(torch.int64)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_model(path, model: ConceptModel) -> None:
    from dataclasses import asdict

    ops.save_checkpoint(path, dict(model.state_dict()), asdict(model.config))


def load_model(path) -> ConceptModel:
    tensors, config = ops.load_checkpoint(path)
    config["conv_channels"] = tuple(config["conv_channels"])
    model = ConceptModel(ModelConfig(**config))
    model.load_state_dict(tensors)
    return model
