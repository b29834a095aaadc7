"""Prototype-part image classifier.

The pipeline is backbone convolutions -> a two-layer 1x1 add-on ending in
a sigmoid -> Euclidean comparison of every spatial patch against a bank
of class-assigned prototype vectors -> per-prototype min-distance ->
log-ratio similarity -> a sparse linear decision layer. Prototypes can be
projected onto their nearest same-class training patch, which makes each
one an actual piece of a training image.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError, DomainError
from .serialize import read_json, write_json

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ConvSpec:
    """One backbone convolution block (conv + ReLU)."""
    out_channels: int
    kernel: int
    stride: int
    padding: int


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    prototypes_per_class: int
    proto_dim: int
    input_size: int
    backbone: tuple
    addon_hidden: int
    in_channels: int = 1
    sim_eps: float = 1e-4

    def __post_init__(self):
        if min(self.num_classes, self.prototypes_per_class, self.proto_dim) < 1:
            raise ConfigError("num_classes, prototypes_per_class and proto_dim must be >= 1")
        if self.addon_hidden < 1 or self.in_channels < 1:
            raise ConfigError("addon_hidden and in_channels must be >= 1")
        if self.sim_eps <= 0:
            raise ConfigError("sim_eps must be positive")
        object.__setattr__(self, "backbone", tuple(
            spec if isinstance(spec, ConvSpec) else ConvSpec(*spec) for spec in self.backbone))
        if self.feature_hw < 1:
            raise ConfigError("backbone reduces the input to an empty feature map")

    @property
    def num_prototypes(self) -> int:
        return self.num_classes * self.prototypes_per_class

    @property
    def feature_hw(self) -> int:
        """Spatial side length of the add-on feature map."""
        size = self.input_size
        for spec in self.backbone:
            size = (size + 2 * spec.padding - spec.kernel) // spec.stride + 1
            if size < 1:
                return size
        return size

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "prototypes_per_class": self.prototypes_per_class,
            "proto_dim": self.proto_dim,
            "input_size": self.input_size,
            "backbone": [[s.out_channels, s.kernel, s.stride, s.padding] for s in self.backbone],
            "addon_hidden": self.addon_hidden,
            "in_channels": self.in_channels,
            "sim_eps": self.sim_eps,
        }

    @staticmethod
    def from_dict(doc: dict) -> "ModelConfig":
        return ModelConfig(
            num_classes=int(doc["num_classes"]),
            prototypes_per_class=int(doc["prototypes_per_class"]),
            proto_dim=int(doc["proto_dim"]),
            input_size=int(doc["input_size"]),
            backbone=tuple(ConvSpec(*map(int, s)) for s in doc["backbone"]),
            addon_hidden=int(doc["addon_hidden"]),
            in_channels=int(doc["in_channels"]),
            sim_eps=float(doc["sim_eps"]),
        )


def teacher_config(num_classes: int = 8, prototypes_per_class: int = 5, proto_dim: int = 32,
                   input_size: int = 64) -> ModelConfig:
    """Four stride-2 conv blocks: 64x64 input -> 4x4 feature map."""
    return ModelConfig(
        num_classes=num_classes,
        prototypes_per_class=prototypes_per_class,
        proto_dim=proto_dim,
        input_size=input_size,
        backbone=(ConvSpec(16, 3, 2, 1), ConvSpec(32, 3, 2, 1),
                  ConvSpec(64, 3, 2, 1), ConvSpec(64, 3, 2, 1)),
        addon_hidden=64,
    )


def student_config(num_classes: int = 8, prototypes_per_class: int = 5, proto_dim: int = 32,
                   input_size: int = 64) -> ModelConfig:
    """Two stride-4 conv blocks: same 4x4 feature map from a much smaller net."""
    return ModelConfig(
        num_classes=num_classes,
        prototypes_per_class=prototypes_per_class,
        proto_dim=proto_dim,
        input_size=input_size,
        backbone=(ConvSpec(16, 5, 4, 2), ConvSpec(32, 5, 4, 2)),
        addon_hidden=32,
    )


class FeatureMap:
    """Add-on output for one image, stored as (H, W, d)."""

    def __init__(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 3:
            raise DimensionError("FeatureMap expects a (H, W, d) array")
        self.values = values

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def depth(self):
        return self.values.shape[2]

    def l(self, i: int, j: int) -> np.ndarray:
        """The length-d local patch at spatial position (i, j)."""
        return self.values[i, j]


class PrototypeModel:
    """Learnable parameters plus the class assignment of each prototype."""

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params  # name -> Tensor
        self.class_of_prototype = np.repeat(
            np.arange(config.num_classes), config.prototypes_per_class)
        self.projection = None  # set by project_prototypes

    # -- construction -------------------------------------------------

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "PrototypeModel":
        """He-style conv init, uniform (0,1) prototypes, sparse decision layer."""
        params = {}
        cin = config.in_channels
        for idx, spec in enumerate(config.backbone):
            fan_in = cin * spec.kernel * spec.kernel
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in),
                           size=(spec.out_channels, cin, spec.kernel, spec.kernel))
            params[f"conv{idx}.weight"] = T.Tensor(w, requires_grad=True)
            params[f"conv{idx}.bias"] = T.Tensor(np.zeros(spec.out_channels), requires_grad=True)
            cin = spec.out_channels
        w1 = rng.normal(0.0, math.sqrt(2.0 / cin), size=(config.addon_hidden, cin, 1, 1))
        params["addon1.weight"] = T.Tensor(w1, requires_grad=True)
        params["addon1.bias"] = T.Tensor(np.zeros(config.addon_hidden), requires_grad=True)
        w2 = rng.normal(0.0, math.sqrt(2.0 / config.addon_hidden),
                        size=(config.proto_dim, config.addon_hidden, 1, 1))
        params["addon2.weight"] = T.Tensor(w2, requires_grad=True)
        params["addon2.bias"] = T.Tensor(np.zeros(config.proto_dim), requires_grad=True)
        m = config.num_prototypes
        params["prototypes"] = T.Tensor(rng.uniform(0.0, 1.0, size=(m, config.proto_dim)),
                                        requires_grad=True)
        decision = np.full((m, config.num_classes), -0.5)
        class_of = np.repeat(np.arange(config.num_classes), config.prototypes_per_class)
        decision[np.arange(m), class_of] = 1.0
        params["decision.weight"] = T.Tensor(decision, requires_grad=True)
        return cls(config, params)

    # -- parameter access ----------------------------------------------

    def named_parameters(self):
        return sorted(self.params.items())

    def trainable_parameters(self):
        return [p for _, p in self.named_parameters() if p.requires_grad]

    @property
    def prototypes(self) -> T.Tensor:
        return self.params["prototypes"]

    @property
    def decision(self) -> T.Tensor:
        return self.params["decision.weight"]

    def set_trainable(self, flag: bool) -> None:
        for _, p in self.named_parameters():
            p.requires_grad = flag

    def clone(self) -> "PrototypeModel":
        other = PrototypeModel(self.config, {
            name: T.Tensor(p.data.copy(), requires_grad=p.requires_grad)
            for name, p in self.params.items()})
        other.projection = None if self.projection is None else [dict(r) for r in self.projection]
        return other


@dataclass
class ForwardPass:
    """Batched forward results; every field is a Tensor."""
    logits: T.Tensor        # (N, C)
    fmap: T.Tensor          # (N, d, H, W)
    dist: T.Tensor          # (N, m, H, W)
    sim: T.Tensor           # (N, m)


def forward_batch(model: PrototypeModel, images) -> ForwardPass:
    """Run the full pipeline on a (N, C_in, S, S) batch."""
    cfg = model.config
    x = images if isinstance(images, T.Tensor) else T.Tensor(images)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2] != cfg.input_size \
            or x.shape[3] != cfg.input_size:
        raise DimensionError(
            f"expected images of shape (N, {cfg.in_channels}, {cfg.input_size}, "
            f"{cfg.input_size}), got {x.shape}")
    h = x
    for idx in range(len(cfg.backbone)):
        spec = cfg.backbone[idx]
        h = T.conv2d(h, model.params[f"conv{idx}.weight"], stride=spec.stride, pad=spec.padding)
        h = T.bias_add(h, model.params[f"conv{idx}.bias"])
        h = T.relu(h)
    a = T.relu(T.bias_add(T.conv2d(h, model.params["addon1.weight"]), model.params["addon1.bias"]))
    fmap = T.sigmoid(T.bias_add(T.conv2d(a, model.params["addon2.weight"]),
                                model.params["addon2.bias"]))
    dist = T.batch_patch_distances(fmap, model.prototypes)
    dmin = T.spatial_min(dist)
    d2 = T.square(dmin)
    sim = T.sub(T.log(T.add(d2, 1.0)), T.log(T.add(d2, cfg.sim_eps)))
    logits = T.matmul(sim, model.decision)
    return ForwardPass(logits=logits, fmap=fmap, dist=dist, sim=sim)


def forward(model: PrototypeModel, image: np.ndarray):
    """Single-image inference.

    Returns (logits (C,), FeatureMap, dist (m, H, W), sim (m,)) as plain
    arrays; gradients are never tracked on this path.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None, :, :]
    if image.ndim != 3:
        raise DimensionError("forward expects one (C,S,S) or (S,S) image")
    out = forward_batch(model, image[None])
    fmap = FeatureMap(np.transpose(out.fmap.data[0], (1, 2, 0)))
    return out.logits.data[0], fmap, out.dist.data[0], out.sim.data[0]


def similarity_from_distance(dist2: float, eps: float) -> float:
    """log((dist2 + 1) / (dist2 + eps)) for a squared distance dist2.

    Evaluated as log(dist2 + 1) - log(dist2 + eps), the exact arithmetic
    the batched forward pass uses.
    """
    if eps <= 0:
        raise DomainError("eps must be positive")
    if dist2 < 0:
        raise DomainError(f"squared distance must be non-negative, got {dist2}")
    return math.log(dist2 + 1.0) - math.log(dist2 + eps)


def patch_distances(fmap: FeatureMap, prototypes: np.ndarray) -> np.ndarray:
    """Distances of one image's patches to every prototype: (m, H, W)."""
    protos = prototypes.data if isinstance(prototypes, T.Tensor) else np.asarray(prototypes)
    nchw = np.transpose(fmap.values, (2, 0, 1))[None]
    return T.batch_patch_distances(nchw, protos).data[0]


def classify(model: PrototypeModel, image: np.ndarray) -> int:
    """Predicted class; ties break toward the lower class index."""
    logits, _, _, _ = forward(model, image)
    return int(np.argmax(logits))


def top1_accuracy(model: PrototypeModel, dataset, batch_size: int = 64) -> float:
    hits = 0
    for start in range(0, len(dataset.labels), batch_size):
        batch = dataset.images[start:start + batch_size]
        out = forward_batch(model, batch)
        hits += int((out.logits.data.argmax(axis=1)
                     == dataset.labels[start:start + batch_size]).sum())
    return hits / len(dataset.labels)


def feature_maps(model: PrototypeModel, images: np.ndarray) -> np.ndarray:
    """(N, d, H, W) add-on features with no graph attached."""
    return forward_batch(model, images).fmap.data


# ---------------------------------------------------------------------------
# prototype projection
# ---------------------------------------------------------------------------

def project_prototypes(model: PrototypeModel, train_set, batch_size: int = 64) -> list:
    """Replace each prototype by its nearest same-class training patch.

    Scans every image of the prototype's class; ties break toward the
    lowest (image index, i, j). Returns (and stores on the model) one
    record per prototype: {prototype, image_index, i, j, distance}.
    """
    cfg = model.config
    m = cfg.num_prototypes
    best_dist = np.full(m, np.inf)
    best_where = np.full((m, 3), -1, dtype=np.int64)  # image index, i, j
    best_vec = np.zeros((m, cfg.proto_dim))
    labels = np.asarray(train_set.labels)
    for c in range(cfg.num_classes):
        if not (labels == c).any():
            raise DataError(f"class {c} has no training images to project onto")

    protos = model.prototypes.data
    for start in range(0, len(labels), batch_size):
        images = train_set.images[start:start + batch_size]
        fmaps = feature_maps(model, images)
        dists = T.batch_patch_distances(fmaps, protos).data  # (B, m, H, W)
        h, w = dists.shape[2], dists.shape[3]
        for b in range(dists.shape[0]):
            idx = start + b
            allowed = model.class_of_prototype == labels[idx]
            flat = dists[b].reshape(m, h * w)
            k = flat.argmin(axis=1)
            dmin = flat[np.arange(m), k]
            improve = allowed & (dmin < best_dist[np.arange(m)])
            for p in np.nonzero(improve)[0]:
                best_dist[p] = dmin[p]
                best_where[p] = (idx, k[p] // w, k[p] % w)
                best_vec[p] = fmaps[b, :, k[p] // w, k[p] % w]

    model.prototypes.data[:] = best_vec
    report = [
        {"prototype": int(p), "image_index": int(best_where[p, 0]),
         "i": int(best_where[p, 1]), "j": int(best_where[p, 2]),
         "distance": float(best_dist[p])}
        for p in range(m)
    ]
    model.projection = report
    return report


def receptive_field(config: ModelConfig, i: int, j: int):
    """Input-pixel rectangle (r0, r1, c0, c1) seen by feature position (i, j).

    Exact for a stack of stride-s convolutions; the rectangle is clamped
    to the image bounds, end indices are exclusive.
    """
    start = 0.0
    jump = 1
    rf = 1
    for spec in config.backbone:
        start += (-spec.padding) * jump
        rf += (spec.kernel - 1) * jump
        jump *= spec.stride
    r0 = int(start + i * jump)
    c0 = int(start + j * jump)
    size = config.input_size
    return (max(0, r0), min(size, r0 + rf), max(0, c0), min(size, c0 + rf))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: PrototypeModel, path) -> None:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "prototype-model",
        "config": model.config.to_dict(),
        "params": {name: p.data.tolist() for name, p in model.named_parameters()},
        "class_of_prototype": model.class_of_prototype.tolist(),
        "projection": model.projection,
    }
    write_json(path, doc)


def load_checkpoint(path) -> PrototypeModel:
    doc = read_json(path)
    if not isinstance(doc, dict) or doc.get("kind") != "prototype-model":
        raise DataError(f"{path} is not a model checkpoint")
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    config = ModelConfig.from_dict(doc["config"])
    blank = PrototypeModel.initialize(config, np.random.default_rng(0))
    params = {}
    for name, ref in blank.params.items():
        if name not in doc["params"]:
            raise DataError(f"checkpoint missing parameter {name!r}")
        arr = np.asarray(doc["params"][name], dtype=np.float64)
        if arr.shape != ref.data.shape:
            raise DataError(f"parameter {name!r} has shape {arr.shape}, "
                            f"expected {ref.data.shape}")
        params[name] = T.Tensor(arr, requires_grad=True)
    model = PrototypeModel(config, params)
    stored_classes = np.asarray(doc["class_of_prototype"], dtype=np.int64)
    if not np.array_equal(stored_classes, model.class_of_prototype):
        raise DataError("checkpoint class_of_prototype does not match the config layout")
    model.projection = doc.get("projection")
    return model
