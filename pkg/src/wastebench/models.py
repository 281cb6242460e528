"""Backbone registry, log-probability heads, layer freezing and the parallel ensemble."""

from __future__ import annotations

import contextlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (
    IOFailure,
    MissingFile,
    PrefixOutOfRange,
    ShapeMismatch,
    UnknownArchitecture,
    ValidationError,
    WeightsUnavailable,
)

logger = logging.getLogger(__name__)

NUM_CLASSES = 2
INPUT_SIZE = 224


# --- backbones ---------------------------------------------------------------


class ToyCNN(nn.Module):
    """Two small convolution stages and a pooled feature vector; synthetic, for desk-scale tests."""

    def __init__(self, width=32):
        super().__init__()
        self.conv1 = nn.Conv2d(3, width, kernel_size=5, stride=4, padding=2)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, kernel_size=3, stride=2, padding=1)
        self.bn2 = nn.BatchNorm2d(width)
        # max pooling keeps a small salient patch from being averaged away
        self.pool = nn.AdaptiveMaxPool2d(1)
        self.norm = nn.BatchNorm1d(width)
        self.num_features = width

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        x = F.relu(self.bn2(self.conv2(x)))
        return self.norm(torch.flatten(self.pool(x), 1))


class _TorchvisionFeatures(nn.Module):
    def __init__(self, net, features_attr, width, pool=False):
        super().__init__()
        self.net = net
        self.num_features = width
        self.pool = nn.AdaptiveAvgPool2d(1) if pool else None
        self._features_attr = features_attr

    def forward(self, x):
        if self.pool is not None:
            x = getattr(self.net, self._features_attr)(x)
            return torch.flatten(self.pool(F.relu(x)), 1)
        return self.net(x)


def _timm_backbone(name, pretrained):
    import timm

    try:
        net = timm.create_model(name, pretrained=pretrained, num_classes=0)
    except Exception as exc:  # hub/network failures surface from deep inside timm
        if pretrained:
            raise WeightsUnavailable(f"could not fetch pretrained weights for {name}: {exc}") from exc
        raise
    return net, net.num_features


def _torchvision_backbone(name, pretrained):
    import torchvision.models as tvm

    weights = "DEFAULT" if pretrained else None
    try:
        if name == "densenet121":
            net = tvm.densenet121(weights=weights)
            net.classifier = nn.Identity()
            return _TorchvisionFeatures(net, None, 1024), 1024
        if name == "squeezenet1_0":
            net = tvm.squeezenet1_0(weights=weights)
            net.classifier = nn.Identity()
            return _TorchvisionFeatures(net, "features", 512, pool=True), 512
        if name == "googlenet":
            kwargs = {} if pretrained else {"aux_logits": False, "init_weights": True}
            net = tvm.googlenet(weights=weights, **kwargs)
            net.aux_logits = False
            net.aux1 = net.aux2 = None
            net.fc = nn.Identity()
            return _TorchvisionFeatures(net, None, 1024), 1024
    except (OSError, RuntimeError) as exc:
        if pretrained:
            raise WeightsUnavailable(f"could not fetch pretrained weights for {name}: {exc}") from exc
        raise
    raise UnknownArchitecture(name)


ARCHITECTURES = {
    "mobilenetv2_050": "timm",
    "mobilenetv2_100": "timm",
    "mobilevit_xs": "timm",
    "vit_tiny_r_s16_p8_224": "timm",
    "densenet121": "torchvision",
    "squeezenet1_0": "torchvision",
    "googlenet": "torchvision",
    "toy_cnn": "local",
}


def build_backbone(architecture, pretrained=False, weights_source=None, toy_width=32):
    """Feature extractor for ``architecture`` and its output width."""
    kind = ARCHITECTURES.get(architecture)
    if kind is None:
        raise UnknownArchitecture(f"unknown architecture {architecture!r}; known: {', '.join(sorted(ARCHITECTURES))}")
    if kind == "local":
        if pretrained:
            raise WeightsUnavailable("toy_cnn has no pretrained weights")
        net = ToyCNN(toy_width)
        return net, net.num_features
    # a local registry directory of <arch>.pth backbone state dicts replaces hub downloads
    local = pretrained and weights_source not in (None, "", "hub")
    if kind == "timm":
        net, width = _timm_backbone(architecture, pretrained and not local)
    else:
        net, width = _torchvision_backbone(architecture, pretrained and not local)
    if local:
        path = Path(weights_source) / f"{architecture}.pth"
        if not path.is_file():
            raise WeightsUnavailable(f"weights registry {weights_source} has no {path.name}")
        state = torch.load(path, map_location="cpu", weights_only=True)
        missing, unexpected = net.load_state_dict(state, strict=False)
        if unexpected:
            logger.info("ignored %d unexpected keys in %s", len(unexpected), path)
        if missing:
            raise WeightsUnavailable(f"{path} is missing {len(missing)} backbone parameters, e.g. {missing[0]}")
    return net, width


# --- specs -------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    pretrained: bool = False
    frozen_prefix: int = 0
    num_classes: int = NUM_CLASSES
    input_size: int = INPUT_SIZE
    toy_width: int = 32

    def __post_init__(self):
        if self.num_classes != NUM_CLASSES:
            raise ValidationError("only binary classification (num_classes=2) is supported")
        if self.input_size != INPUT_SIZE:
            raise ValidationError(f"input size is fixed at {INPUT_SIZE}")
        if self.frozen_prefix < 0:
            raise PrefixOutOfRange("frozen_prefix must be >= 0")

    @property
    def name(self):
        return self.architecture

    def to_json(self):
        return {"kind": "single", **asdict(self)}


@dataclass(frozen=True)
class ParallelEnsembleSpec:
    backbone_a: ModelSpec = field(default_factory=lambda: ModelSpec("mobilevit_xs"))
    backbone_b: ModelSpec = field(default_factory=lambda: ModelSpec("vit_tiny_r_s16_p8_224"))
    fusion_mode: str = "feature_concat"
    fusion_out: int = NUM_CLASSES

    def __post_init__(self):
        if self.fusion_mode not in ("feature_concat", "logit_concat"):
            raise ValidationError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.fusion_out != NUM_CLASSES:
            raise ValidationError("fusion output must have 2 classes")

    @property
    def name(self):
        return "parallel_ensemble"

    def to_json(self):
        return {
            "kind": "parallel_ensemble",
            "backbone_a": asdict(self.backbone_a),
            "backbone_b": asdict(self.backbone_b),
            "fusion_mode": self.fusion_mode,
            "fusion_out": self.fusion_out,
        }


def spec_from_json(doc):
    doc = dict(doc)
    kind = doc.pop("kind", "single")
    if kind == "single":
        return ModelSpec(**doc)
    if kind == "parallel_ensemble":
        return ParallelEnsembleSpec(ModelSpec(**doc["backbone_a"]), ModelSpec(**doc["backbone_b"]),
                                    doc.get("fusion_mode", "feature_concat"), doc.get("fusion_out", NUM_CLASSES))
    raise ValidationError(f"unknown model spec kind {kind!r}")


# --- modules -----------------------------------------------------------------


class WasteClassifier(nn.Module):
    """Backbone -> linear head -> log-softmax over (negative, positive)."""

    def __init__(self, backbone, width):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Linear(width, NUM_CLASSES)
        self.feature_width = width

    def logits(self, x):
        return self.head(self.backbone(x))

    def forward(self, x):
        return F.log_softmax(self.logits(x), dim=1)


class ParallelEnsembleModel(nn.Module):
    """Run two backbones on the same input, concatenate, fuse with ``fc1``.

    ``feature_concat`` joins the pooled feature vectors; ``logit_concat``
    joins each member's own 2-way head output.
    """

    def __init__(self, backbone_a, width_a, backbone_b, width_b, fusion_mode="feature_concat"):
        super().__init__()
        self.fusion_mode = fusion_mode
        self.backbone_a = backbone_a
        self.backbone_b = backbone_b
        if fusion_mode == "logit_concat":
            self.head_a = nn.Linear(width_a, NUM_CLASSES)
            self.head_b = nn.Linear(width_b, NUM_CLASSES)
            self.fusion_in = 2 * NUM_CLASSES
        else:
            self.fusion_in = width_a + width_b
        self.fc1 = nn.Linear(self.fusion_in, NUM_CLASSES)

    def fused_input(self, x):
        a = self.backbone_a(x)
        b = self.backbone_b(x)
        if self.fusion_mode == "logit_concat":
            a, b = self.head_a(a), self.head_b(b)
        return torch.cat([a, b], dim=1)

    def forward(self, x):
        return F.log_softmax(self.fc1(self.fused_input(x)), dim=1)


# --- handles -----------------------------------------------------------------


def parameterized_layers(module: nn.Module):
    """(name, module) for every module that directly owns parameters, in registration order."""
    return [(name, m) for name, m in module.named_modules() if any(True for _ in m.parameters(recurse=False))]


@dataclass
class ModelHandle:
    spec: object
    module: nn.Module
    frozen_prefix: int = 0

    @property
    def name(self):
        return self.spec.name

    @property
    def parameter_count(self):
        return sum(p.numel() for p in self.module.parameters())

    @property
    def trainable_parameter_count(self):
        return sum(p.numel() for p in self.module.parameters() if p.requires_grad)

    @property
    def layer_count(self):
        return len(parameterized_layers(self.module))

    def trainable_parameters(self):
        return [p for p in self.module.parameters() if p.requires_grad]

    def describe(self):
        """Canonical layer ordering used by ``freeze_prefix``."""
        rows = []
        for i, (name, m) in enumerate(parameterized_layers(self.module)):
            params = list(m.parameters(recurse=False))
            rows.append({
                "index": i,
                "name": name or "<root>",
                "type": type(m).__name__,
                "parameters": sum(p.numel() for p in params),
                "frozen": not any(p.requires_grad for p in params),
            })
        return rows


def freeze_prefix(model: ModelHandle, n: int) -> ModelHandle:
    """Exclude the first ``n`` parameter-bearing layers from gradient updates; unfreeze the rest."""
    layers = parameterized_layers(model.module)
    if n < 0 or n > len(layers):
        raise PrefixOutOfRange(f"cannot freeze {n} layers; {model.name} has {len(layers)}")
    for i, (_, m) in enumerate(layers):
        for p in m.parameters(recurse=False):
            p.requires_grad_(i >= n)
    model.frozen_prefix = n
    return model


@contextlib.contextmanager
def _seeded(seed):
    if seed is None:
        yield
        return
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        yield


def build_model(spec: ModelSpec, weights_source=None, seed=None) -> ModelHandle:
    """Instantiate a single-backbone classifier; ``seed`` pins random initialisation."""
    if isinstance(spec, ParallelEnsembleSpec):
        return build_parallel_ensemble(spec, weights_source, seed)
    with _seeded(seed):
        backbone, width = build_backbone(spec.architecture, spec.pretrained, weights_source, spec.toy_width)
        module = WasteClassifier(backbone, width)
    module.eval()
    handle = ModelHandle(spec, module)
    return freeze_prefix(handle, spec.frozen_prefix)


def build_parallel_ensemble(spec: ParallelEnsembleSpec, weights_source=None, seed=None) -> ModelHandle:
    with _seeded(seed):
        a, wa = build_backbone(spec.backbone_a.architecture, spec.backbone_a.pretrained, weights_source,
                               spec.backbone_a.toy_width)
        b, wb = build_backbone(spec.backbone_b.architecture, spec.backbone_b.pretrained, weights_source,
                               spec.backbone_b.toy_width)
        module = ParallelEnsembleModel(a, wa, b, wb, spec.fusion_mode)
    module.eval()
    handle = ModelHandle(spec, module)
    # per-member freezing counts layers within each backbone
    for sub, member in ((module.backbone_a, spec.backbone_a), (module.backbone_b, spec.backbone_b)):
        layers = parameterized_layers(sub)
        if member.frozen_prefix > len(layers):
            raise PrefixOutOfRange(f"cannot freeze {member.frozen_prefix} layers of {member.architecture}")
        for _, m in layers[: member.frozen_prefix]:
            for p in m.parameters(recurse=False):
                p.requires_grad_(False)
    handle.frozen_prefix = spec.backbone_a.frozen_prefix + spec.backbone_b.frozen_prefix
    return handle


def as_batch(batch) -> torch.Tensor:
    """Accept Bx224x224x3 (numpy or tensor) or Bx3x224x224 tensors; return NCHW float32."""
    t = torch.as_tensor(np.asarray(batch) if not isinstance(batch, torch.Tensor) else batch, dtype=torch.float32)
    if t.ndim == 3:
        t = t.unsqueeze(0)
    if t.ndim != 4:
        raise ShapeMismatch(f"expected a 4-d batch, got shape {tuple(t.shape)}")
    if t.shape[1:] == (INPUT_SIZE, INPUT_SIZE, 3):
        t = t.permute(0, 3, 1, 2)
    if t.shape[1:] != (3, INPUT_SIZE, INPUT_SIZE):
        raise ShapeMismatch(f"expected Bx{INPUT_SIZE}x{INPUT_SIZE}x3 input, got {tuple(t.shape)}")
    return t.contiguous()


@torch.no_grad()
def forward_logprobs(model: ModelHandle, batch) -> np.ndarray:
    """Evaluation-mode forward pass; returns a Bx2 float64 array of log-probabilities."""
    x = as_batch(batch)
    was_training = model.module.training
    model.module.eval()
    try:
        out = model.module(x)
    finally:
        model.module.train(was_training)
    return out.double().numpy()


def zero_head(model: ModelHandle):
    """Zero the final classification layer (weights and bias)."""
    head = model.module.fc1 if isinstance(model.module, ParallelEnsembleModel) else model.module.head
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
    return model


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(model: ModelHandle, path, meta=None):
    """Write spec JSON, parameters and training metadata into one torch archive."""
    payload = {
        "format": "wastebench-checkpoint/1",
        "spec": json.dumps(model.spec.to_json(), sort_keys=True),
        "frozen_prefix": model.frozen_prefix,
        "trainable": [name for name, p in model.module.named_parameters() if p.requires_grad],
        "state_dict": model.module.state_dict(),
        "meta": json.dumps(meta or {}, sort_keys=True),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(buf.getvalue())
    except OSError as exc:
        raise IOFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    """Rebuild a model from its archive (random init, then stored parameters); returns (handle, meta)."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such checkpoint: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    spec = spec_from_json(json.loads(payload["spec"]))
    if isinstance(spec, ParallelEnsembleSpec):
        bare = ParallelEnsembleSpec(
            ModelSpec(**{**asdict(spec.backbone_a), "pretrained": False}),
            ModelSpec(**{**asdict(spec.backbone_b), "pretrained": False}),
            spec.fusion_mode,
        )
        handle = build_parallel_ensemble(bare)
    else:
        handle = build_model(ModelSpec(**{**asdict(spec), "pretrained": False, "frozen_prefix": 0}))
    handle.spec = spec
    handle.module.load_state_dict(payload["state_dict"])
    trainable = set(payload["trainable"])
    for name, p in handle.module.named_parameters():
        p.requires_grad_(name in trainable)
    handle.frozen_prefix = payload["frozen_prefix"]
    handle.module.eval()
    return handle, json.loads(payload["meta"])
