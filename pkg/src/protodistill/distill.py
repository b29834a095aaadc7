"""Active-patch masks, the distillation objective, and training loops.

A patch is *active* when it is the argmin-distance patch of at least one
prototype and that distance is within tau. The patch-correspondence loss
pulls the student's add-on features toward the teacher's at exactly the
teacher's active positions; the global loss pulls student prototype i
toward teacher prototype i. Three training modes share one loop:

  baseline     model loss only (no teacher involved)
  hint         model loss + feature mimicry with an all-ones mask
  proto2proto  model loss + masked patch loss + prototype alignment

The teacher is frozen throughout; gradients only ever reach the student.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError
from .model import FeatureMap, PrototypeModel, forward_batch

MODES = ("baseline", "hint", "proto2proto")


@dataclass(frozen=True)
class DistillConfig:
    mode: str = "proto2proto"
    tau_train: float = 1.0
    tau_test: float = 1.0
    # strong alignment defaults: weaker pulls leave student prototypes
    # stranded between the two patch clouds, and projection then wrecks
    # the decision calibration (measured on the synthetic benchmark)
    lambda_global: float = 2.0
    lambda_ppc: float = 2.0
    lambda_cluster: float = 0.8
    lambda_sep: float = 0.08
    reuse_decision_module: bool = False
    use_model_loss: bool = True
    ppc_normalize: bool = False   # divide each image's norm by its active-patch count
    distance: str = "euclidean"
    lr: float = 1e-2
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 16

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.tau_train <= 0 or self.tau_test <= 0:
            raise ConfigError("tau_train and tau_test must be positive")
        if min(self.lambda_global, self.lambda_ppc, self.lambda_cluster, self.lambda_sep) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.distance != "euclidean":
            raise ConfigError(f"unsupported distance metric {self.distance!r}")
        if not self.use_model_loss and not self.reuse_decision_module:
            raise ConfigError("dropping the model loss requires reuse_decision_module")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "tau_train": self.tau_train,
            "tau_test": self.tau_test,
            "lambda_global": self.lambda_global,
            "lambda_ppc": self.lambda_ppc,
            "lambda_cluster": self.lambda_cluster,
            "lambda_sep": self.lambda_sep,
            "reuse_decision_module": self.reuse_decision_module,
            "use_model_loss": self.use_model_loss,
            "ppc_normalize": self.ppc_normalize,
            "distance": self.distance,
            "lr": self.lr,
            "momentum": self.momentum,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
        }


@dataclass
class ActiveMask:
    bits: np.ndarray          # (H, W) bool
    tau: float
    image_id: int | None = None

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())


# ---------------------------------------------------------------------------
# active patches
# ---------------------------------------------------------------------------

def _argmin_info(dist: np.ndarray):
    """Per-prototype flat argmin index (first minimum) and its distance."""
    m = dist.shape[0]
    flat = dist.reshape(m, -1)
    k = flat.argmin(axis=1)
    return k, flat[np.arange(m), k]


def mask_bits_from_distances(dist: np.ndarray, tau: float) -> np.ndarray:
    """(H, W) boolean mask from one image's (m, H, W) distance stack."""
    _, h, w = dist.shape
    k, dmin = _argmin_info(dist)
    bits = np.zeros(h * w, dtype=bool)
    bits[k[dmin <= tau]] = True
    return bits.reshape(h, w)


def batch_mask_bits(dist: np.ndarray, tau: float) -> np.ndarray:
    """(N, H, W) masks from a (N, m, H, W) distance stack."""
    n, m, h, w = dist.shape
    flat = dist.reshape(n, m, h * w)
    k = flat.argmin(axis=2)
    dmin = np.take_along_axis(flat, k[:, :, None], axis=2)[:, :, 0]
    bits = np.zeros((n, h * w), dtype=bool)
    rows, cols = np.nonzero(dmin <= tau)
    bits[rows, k[rows, cols]] = True
    return bits.reshape(n, h, w)


def _distances_for(fmap: FeatureMap, prototypes) -> np.ndarray:
    protos = prototypes.data if isinstance(prototypes, T.Tensor) else np.asarray(prototypes)
    if fmap.depth != protos.shape[1]:
        raise DimensionError(
            f"feature depth {fmap.depth} != prototype depth {protos.shape[1]}")
    nchw = np.transpose(fmap.values, (2, 0, 1))[None]
    return T.batch_patch_distances(nchw, protos).data[0]


def is_active(patch: np.ndarray, fmap: FeatureMap, tau: float, prototypes) -> bool:
    """True iff this patch is some prototype's argmin patch within tau.

    The patch is located in the feature map by exact value match (first
    occurrence in row-major order, consistent with the lexicographic
    argmin tie-break).
    """
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != (fmap.depth,):
        raise DimensionError(f"patch has shape {patch.shape}, expected ({fmap.depth},)")
    hits = np.nonzero((fmap.values == patch).all(axis=2))
    if hits[0].size == 0:
        raise DataError("patch is not part of the feature map")
    i, j = int(hits[0][0]), int(hits[1][0])
    dist = _distances_for(fmap, prototypes)
    return bool(mask_bits_from_distances(dist, tau)[i, j])


def active_mask(fmap: FeatureMap, tau: float, prototypes, image_id=None) -> ActiveMask:
    dist = _distances_for(fmap, prototypes)
    return ActiveMask(mask_bits_from_distances(dist, tau), float(tau), image_id)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_ppc(teacher_fmaps: np.ndarray, student_fmaps, masks: np.ndarray,
             normalize: bool = False) -> T.Tensor:
    """Mean per-image L2 norm of the masked feature difference.

    teacher_fmaps (N, d, H, W) is a constant; the mask broadcasts over
    the channel axis and gates gradients as well as values. With
    normalize=True each image's norm is divided by its active-patch
    count (empty masks contribute zero either way).
    """
    student_fmaps = student_fmaps if isinstance(student_fmaps, T.Tensor) \
        else T.Tensor(student_fmaps)
    if teacher_fmaps.shape != student_fmaps.shape:
        raise DimensionError(
            f"feature shapes differ: {teacher_fmaps.shape} vs {student_fmaps.shape}")
    n, d, h, w = teacher_fmaps.shape
    if masks.shape != (n, h, w):
        raise DimensionError(f"masks have shape {masks.shape}, expected {(n, h, w)}")
    maskf = np.broadcast_to(masks[:, None, :, :].astype(np.float64), (n, d, h, w))
    diff = T.sub(T.Tensor(teacher_fmaps), student_fmaps)
    per_image = T.l2_norm_rows(T.mul(diff, T.Tensor(maskf.copy())))
    if normalize:
        counts = np.maximum(masks.reshape(n, -1).sum(axis=1), 1.0)
        per_image = T.mul(per_image, T.Tensor(1.0 / counts))
    return T.mean(per_image)


def loss_global(teacher_prototypes, student_prototypes) -> T.Tensor:
    """Mean index-wise Euclidean distance between the two prototype banks."""
    pt = teacher_prototypes.data if isinstance(teacher_prototypes, T.Tensor) \
        else np.asarray(teacher_prototypes, dtype=np.float64)
    ps = student_prototypes if isinstance(student_prototypes, T.Tensor) \
        else T.Tensor(student_prototypes)
    if pt.shape != ps.shape:
        raise DimensionError(f"prototype banks differ in shape: {pt.shape} vs {ps.shape}")
    return T.mean(T.l2_norm_rows(T.sub(T.Tensor(pt), ps)))


def loss_model(logits, labels, dist, class_of_prototype,
               lambda_cluster: float = 0.8, lambda_sep: float = 0.08) -> T.Tensor:
    """Cross-entropy + cluster pull - separation push.

    The cluster term is the mean (over images) minimum distance to any
    same-class prototype; separation is the same for other-class
    prototypes and enters negatively.
    """
    labels = np.asarray(labels)
    class_of_prototype = np.asarray(class_of_prototype)
    ce = T.cross_entropy(logits, labels)
    dmin = T.spatial_min(dist)  # (N, m)
    same = class_of_prototype[None, :] == labels[:, None]
    total = ce
    if lambda_cluster:
        total = T.add(total, T.mul(T.mean(T.select_min(dmin, same)), lambda_cluster))
    if lambda_sep:
        total = T.sub(total, T.mul(T.mean(T.select_min(dmin, ~same)), lambda_sep))
    return total


@dataclass
class LossParts:
    model: T.Tensor | None = None
    global_: T.Tensor | None = None
    ppc: T.Tensor | None = None


def loss_total(config: DistillConfig, parts: LossParts) -> T.Tensor:
    """Combine the loss terms according to the training mode."""
    terms = []
    if config.use_model_loss:
        if parts.model is None:
            raise ConfigError("model loss requested but not provided")
        terms.append(parts.model)
    if config.mode in ("hint", "proto2proto") and config.lambda_ppc:
        if parts.ppc is None:
            raise ConfigError(f"mode {config.mode!r} needs a patch-correspondence term")
        terms.append(T.mul(parts.ppc, config.lambda_ppc))
    if config.mode == "proto2proto" and config.lambda_global:
        if parts.global_ is None:
            raise ConfigError("proto2proto mode needs a prototype-alignment term")
        terms.append(T.mul(parts.global_, config.lambda_global))
    if not terms:
        raise ConfigError("the configured objective has no terms")
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    return total


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    loss_total: float
    loss_model: float
    loss_global: float
    loss_ppc: float
    accuracy: float

    def to_dict(self) -> dict:
        return {
            "loss_total": self.loss_total,
            "loss_model": self.loss_model,
            "loss_global": self.loss_global,
            "loss_ppc": self.loss_ppc,
            "accuracy": self.accuracy,
        }


class MaskCache:
    """Per-(image, tau) mask memo; valid because the teacher is frozen."""

    def __init__(self):
        self._store = {}

    def get(self, image_ids, tau: float, dist: np.ndarray) -> np.ndarray:
        missing = [b for b, idx in enumerate(image_ids)
                   if (int(idx), float(tau)) not in self._store]
        if missing:
            fresh = batch_mask_bits(dist[missing], tau)
            for row, b in enumerate(missing):
                self._store[(int(image_ids[b]), float(tau))] = fresh[row]
        return np.stack([self._store[(int(idx), float(tau))] for idx in image_ids])


def check_compatible(teacher: PrototypeModel, student: PrototypeModel) -> None:
    """Distillation requires identical m, d, C, H, W and input size."""
    t, s = teacher.config, student.config
    mismatches = [name for name, a, b in (
        ("num_classes", t.num_classes, s.num_classes),
        ("num_prototypes", t.num_prototypes, s.num_prototypes),
        ("proto_dim", t.proto_dim, s.proto_dim),
        ("feature_hw", t.feature_hw, s.feature_hw),
        ("input_size", t.input_size, s.input_size),
        ("in_channels", t.in_channels, s.in_channels),
    ) if a != b]
    if mismatches:
        raise ConfigError(f"teacher/student configs differ on: {', '.join(mismatches)}")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _live_teacher_feats(teacher: PrototypeModel, mask_cache: MaskCache, tau: float):
    def fetch(batch_ids, images):
        t_out = forward_batch(teacher, images)
        return t_out.fmap.data, mask_cache.get(batch_ids, tau, t_out.dist.data)
    return fetch


def _cached_teacher_feats(teacher: PrototypeModel, train_set, tau: float,
                          batch_size: int = 64):
    """Precompute the frozen teacher's features and masks for a whole split."""
    fmaps = []
    dists = []
    for start in range(0, len(train_set), batch_size):
        t_out = forward_batch(teacher, train_set.images[start:start + batch_size])
        fmaps.append(t_out.fmap.data)
        dists.append(t_out.dist.data)
    fmaps = np.concatenate(fmaps, axis=0)
    masks = batch_mask_bits(np.concatenate(dists, axis=0), tau)

    def fetch(batch_ids, images):
        return fmaps[batch_ids], masks[batch_ids]
    return fetch


def _run_epoch(student, train_set, config, optimizer, rng,
               teacher_feats=None, teacher_protos=None) -> EpochStats:
    sums = {"total": 0.0, "model": 0.0, "global": 0.0, "ppc": 0.0}
    hits = 0
    seen = 0
    for batch_ids in _batches(len(train_set), config.batch_size, rng):
        images = train_set.images[batch_ids]
        labels = train_set.labels[batch_ids]
        out = forward_batch(student, images)
        parts = LossParts()
        if config.use_model_loss:
            parts.model = loss_model(out.logits, labels, out.dist,
                                     student.class_of_prototype,
                                     config.lambda_cluster, config.lambda_sep)
        if teacher_feats is not None:
            t_fmaps, masks = teacher_feats(batch_ids, images)
            if config.mode == "hint":
                masks = np.ones(masks.shape, dtype=bool)
            parts.ppc = loss_ppc(t_fmaps, out.fmap, masks,
                                 normalize=config.ppc_normalize)
            if config.mode == "proto2proto":
                parts.global_ = loss_global(teacher_protos, student.prototypes)
        total = loss_total(config, parts)
        T.assert_finite(total, "training loss")
        total.backward()
        optimizer.step()

        b = len(batch_ids)
        seen += b
        sums["total"] += total.item() * b
        sums["model"] += (parts.model.item() if parts.model is not None else 0.0) * b
        sums["global"] += (parts.global_.item() if parts.global_ is not None else 0.0) * b
        sums["ppc"] += (parts.ppc.item() if parts.ppc is not None else 0.0) * b
        hits += int((out.logits.data.argmax(axis=1) == labels).sum())
    return EpochStats(sums["total"] / seen, sums["model"] / seen,
                      sums["global"] / seen, sums["ppc"] / seen, hits / seen)


def train_model(model: PrototypeModel, train_set, epochs: int, lr: float,
                momentum: float, batch_size: int, seed: int,
                lambda_cluster: float = 0.8, lambda_sep: float = 0.08) -> list:
    """Fit a model on the model loss alone (used for teachers and baselines)."""
    config = DistillConfig(mode="baseline", lambda_cluster=lambda_cluster,
                           lambda_sep=lambda_sep, lr=lr, momentum=momentum,
                           epochs=epochs, batch_size=batch_size)
    optimizer = T.SGD(model.trainable_parameters(), lr=lr, momentum=momentum)
    history = []
    for epoch in range(epochs):
        rng = T.subseed(seed, "shuffle", epoch)
        history.append(_run_epoch(model, train_set, config, optimizer, rng))
    return history


def refit_decision_layer(model: PrototypeModel, train_set, epochs: int = 10,
                         lr: float = 1e-2, momentum: float = 0.9,
                         batch_size: int = 16, seed: int = 0) -> None:
    """Cross-entropy refit of the decision weights with everything else frozen.

    Projection snaps prototypes onto training patches, which rescales the
    similarity scores the decision layer was calibrated against; a short
    last-layer refit restores accuracy without moving any prototype or
    feature parameter.
    """
    saved = {name: p.requires_grad for name, p in model.named_parameters()}
    for name, p in model.named_parameters():
        p.requires_grad = name == "decision.weight"
        p.grad = None
    try:
        optimizer = T.SGD([model.decision], lr=lr, momentum=momentum)
        for epoch in range(epochs):
            rng = T.subseed(seed, "refit", epoch)
            for batch_ids in _batches(len(train_set), batch_size, rng):
                out = forward_batch(model, train_set.images[batch_ids])
                loss = T.cross_entropy(out.logits, train_set.labels[batch_ids])
                T.assert_finite(loss, "decision refit loss")
                loss.backward()
                optimizer.step()
    finally:
        for name, p in model.named_parameters():
            p.requires_grad = saved[name]


def distill_epoch(teacher: PrototypeModel, student: PrototypeModel, train_set,
                  config: DistillConfig, optimizer, rng,
                  mask_cache: MaskCache | None = None) -> EpochStats:
    """One pass of mini-batch SGD on the student; the teacher is read-only."""
    check_compatible(teacher, student)
    feats = None
    if config.mode in ("hint", "proto2proto"):
        feats = _live_teacher_feats(teacher, mask_cache or MaskCache(), config.tau_train)
    return _run_epoch(student, train_set, config, optimizer, rng,
                      teacher_feats=feats, teacher_protos=teacher.prototypes.data)


def distill(teacher: PrototypeModel, student: PrototypeModel, train_set,
            config: DistillConfig, seed: int) -> list:
    """Full distillation run per config.mode; returns per-epoch stats.

    Teacher features and masks are computed once up front (the teacher
    never changes), so epochs only pay for the student.
    """
    check_compatible(teacher, student)
    teacher.set_trainable(False)
    if config.reuse_decision_module:
        student.decision.data[:] = teacher.decision.data
        student.decision.requires_grad = False
        student.decision.grad = None
    optimizer = T.SGD(student.trainable_parameters(), lr=config.lr,
                      momentum=config.momentum)
    feats = None
    if config.mode in ("hint", "proto2proto"):
        feats = _cached_teacher_feats(teacher, train_set, config.tau_train)
    history = []
    for epoch in range(config.epochs):
        rng = T.subseed(seed, "shuffle", epoch)
        history.append(_run_epoch(student, train_set, config, optimizer, rng,
                                  teacher_feats=feats,
                                  teacher_protos=teacher.prototypes.data))
    return history
