"""Interpretability-transfer metrics between a teacher and a student.

Three quantities are computed over a shared dataset:

  AAP  mean number of active patches per image for one model at tau.
  AJS  mean per-image Jaccard similarity of the two models' active-patch
       id sets (1.0 when both models light up exactly the same patches).
  PMS  mean Hungarian-matched Jaccard similarity between per-prototype
       argmin-patch id sets; argmins are taken with no tau filter.

Patches are identified by image_index*(H*W) + i*W + j, so ids are
comparable whenever the two models share the feature-map geometry. All
routines are pure; repeated evaluation gives identical results.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .model import PrototypeModel, forward_batch, top1_accuracy
from .serialize import float_key

DUMP_VERSION = 1


def encode_patch_id(image_index: int, i: int, j: int, h: int, w: int) -> int:
    return image_index * (h * w) + i * w + j


def decode_patch_id(patch_id: int, h: int, w: int):
    image_index, rest = divmod(patch_id, h * w)
    i, j = divmod(rest, w)
    return image_index, i, j


def _dataset_distances(model: PrototypeModel, dataset, batch_size: int = 64):
    """Stacked (N, m, H, W) patch distances over a dataset, no gradients."""
    if len(dataset) == 0:
        raise DataError("dataset is empty")
    chunks = []
    for start in range(0, len(dataset), batch_size):
        out = forward_batch(model, dataset.images[start:start + batch_size])
        chunks.append(out.dist.data)
    return np.concatenate(chunks, axis=0)


def _active_ids_from_distances(dists: np.ndarray, tau: float) -> list:
    """Per-image sets of active patch ids from (N, m, H, W) distances."""
    n, m, h, w = dists.shape
    flat = dists.reshape(n, m, h * w)
    k = flat.argmin(axis=2)
    dmin = np.take_along_axis(flat, k[:, :, None], axis=2)[:, :, 0]
    ids = []
    for idx in range(n):
        active = np.unique(k[idx][dmin[idx] <= tau])
        base = idx * h * w
        ids.append({int(base + flat_pos) for flat_pos in active})
    return ids


def _argmin_ids_from_distances(dists: np.ndarray) -> list:
    """Per-prototype sets of argmin patch ids (no tau filter)."""
    n, m, h, w = dists.shape
    flat = dists.reshape(n, m, h * w)
    k = flat.argmin(axis=2)  # (n, m), first minimum = lexicographic tie-break
    base = np.arange(n)[:, None] * (h * w)
    ids = base + k
    return [set(int(v) for v in ids[:, p]) for p in range(m)]


def active_patch_ids(model: PrototypeModel, image, tau_test: float,
                     image_index: int = 0) -> set:
    """Ids of this image's active patches at tau_test."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    out = forward_batch(model, image[None])
    h, w = out.dist.data.shape[2], out.dist.data.shape[3]
    base = image_index * h * w
    return {base + pid for pid in _active_ids_from_distances(out.dist.data, tau_test)[0]}


def aap(model: PrototypeModel, dataset, tau_test: float) -> float:
    """Average number of active patches per image."""
    dists = _dataset_distances(model, dataset)
    ids = _active_ids_from_distances(dists, tau_test)
    return float(np.mean([len(s) for s in ids]))


def ajs(student: PrototypeModel, teacher: PrototypeModel, dataset,
        tau_test: float) -> float:
    """Mean per-image Jaccard similarity of active-patch id sets.

    An image where neither model activates anything counts as perfect
    agreement (1.0).
    """
    if student.config.feature_hw != teacher.config.feature_hw:
        raise ConfigError("AJS needs teacher and student to share the feature-map size")
    ids_t = _active_ids_from_distances(_dataset_distances(teacher, dataset), tau_test)
    ids_s = _active_ids_from_distances(_dataset_distances(student, dataset), tau_test)
    return _mean_jaccard(ids_t, ids_s)


def _mean_jaccard(ids_a: list, ids_b: list) -> float:
    scores = []
    for sa, sb in zip(ids_a, ids_b):
        union = len(sa | sb)
        scores.append(1.0 if union == 0 else len(sa & sb) / union)
    return float(np.mean(scores))


def prototype_id_lists(model: PrototypeModel, dataset) -> list:
    """For each prototype, the set of its argmin patch ids over the dataset."""
    return _argmin_ids_from_distances(_dataset_distances(model, dataset))


def modified_jaccard_matrix(q_teacher: list, q_student: list) -> np.ndarray:
    """Pairwise Jaccard similarity of argmin-id sets; entries in [0, 1]."""
    m = len(q_teacher)
    if len(q_student) != m:
        raise ConfigError(f"prototype list lengths differ: {m} vs {len(q_student)}")
    score = np.zeros((m, m))
    for a in range(m):
        qa = q_teacher[a]
        for b in range(m):
            qb = q_student[b]
            union = len(qa | qb)
            score[a, b] = 1.0 if union == 0 else len(qa & qb) / union
    return score


def hungarian(score_matrix: np.ndarray, maximize: bool = False):
    """Optimal assignment on a square matrix (O(m^3) augmenting paths).

    Returns (assignment, total) where assignment[row] = column and total
    is the sum of the selected entries of the original matrix.
    """
    cost = np.asarray(score_matrix, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ConfigError(f"score matrix must be square, got {cost.shape}")
    if cost.size == 0:
        raise ConfigError("score matrix must be non-empty")
    if not np.isfinite(cost).all():
        raise ConfigError("score matrix must be finite")
    work = -cost if maximize else cost
    n = work.shape[0]

    # Potentials-based Kuhn-Munkres; 1-indexed with a virtual column 0.
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # match[col] = row
    for row in range(1, n + 1):
        match[0] = row
        j0 = 0
        minv = np.full(n + 1, np.inf)
        way = np.zeros(n + 1, dtype=np.int64)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = work[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1

    assignment = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        assignment[match[j] - 1] = j - 1
    total = float(cost[np.arange(n), assignment].sum())
    return assignment, total


def pms(student: PrototypeModel, teacher: PrototypeModel, dataset) -> float:
    """Mean matched prototype similarity under the optimal assignment."""
    if student.config.num_prototypes != teacher.config.num_prototypes:
        raise ConfigError("PMS needs equal prototype counts")
    q_t = prototype_id_lists(teacher, dataset)
    q_s = prototype_id_lists(student, dataset)
    score = modified_jaccard_matrix(q_t, q_s)
    _, total = hungarian(score, maximize=True)
    return total / len(q_t)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    aap_teacher: float
    aap_student: float
    ajs: float
    pms: float
    top1_teacher: float
    top1_student: float
    tau_test: float

    def __post_init__(self):
        for name in ("ajs", "pms"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise DataError(f"{name} out of [0,1]: {value}")

    def to_dict(self) -> dict:
        return {
            "aap_teacher": self.aap_teacher,
            "aap_student": self.aap_student,
            "ajs": self.ajs,
            "pms": self.pms,
            "top1_teacher": self.top1_teacher,
            "top1_student": self.top1_student,
            "tau_test": self.tau_test,
            "pms_score_fn": "jaccard-of-argmin-patch-id-sets",
        }


def evaluate_pair(teacher: PrototypeModel, student: PrototypeModel, dataset,
                  tau_test: float) -> MetricsReport:
    return MetricsReport(
        aap_teacher=aap(teacher, dataset, tau_test),
        aap_student=aap(student, dataset, tau_test),
        ajs=ajs(student, teacher, dataset, tau_test),
        pms=pms(student, teacher, dataset),
        top1_teacher=top1_accuracy(teacher, dataset),
        top1_student=top1_accuracy(student, dataset),
        tau_test=float(tau_test),
    )


# ---------------------------------------------------------------------------
# activation dumps: metrics without model access
# ---------------------------------------------------------------------------

def export_dump(model: PrototypeModel, dataset, taus, model_id: str) -> dict:
    """Everything the metrics need, frozen into a JSON-friendly document."""
    dists = _dataset_distances(model, dataset)
    n, m, h, w = dists.shape
    argmin_sets = _argmin_ids_from_distances(dists)
    doc = {
        "format_version": DUMP_VERSION,
        "kind": "activation-dump",
        "model_id": model_id,
        "H": h,
        "W": w,
        "d": model.config.proto_dim,
        "num_images": n,
        "num_prototypes": m,
        "argmin_ids": [sorted(s) for s in argmin_sets],
        "active_ids": {
            float_key(tau): [sorted(s) for s in _active_ids_from_distances(dists, tau)]
            for tau in taus
        },
    }
    return doc


def _dump_active(dump: dict, tau: float) -> list:
    key = float_key(tau)
    if key not in dump["active_ids"]:
        raise DataError(f"dump has no active ids for tau={key}; "
                        f"available: {sorted(dump['active_ids'])}")
    return [set(ids) for ids in dump["active_ids"][key]]


def _check_dumps_comparable(dump_a: dict, dump_b: dict) -> None:
    for field_name in ("H", "W", "num_images"):
        if dump_a[field_name] != dump_b[field_name]:
            raise ConfigError(f"dumps disagree on {field_name}: "
                              f"{dump_a[field_name]} vs {dump_b[field_name]}")


def aap_from_dump(dump: dict, tau: float) -> float:
    return float(np.mean([len(s) for s in _dump_active(dump, tau)]))


def ajs_from_dumps(dump_student: dict, dump_teacher: dict, tau: float) -> float:
    _check_dumps_comparable(dump_student, dump_teacher)
    return _mean_jaccard(_dump_active(dump_teacher, tau), _dump_active(dump_student, tau))


def pms_from_dumps(dump_student: dict, dump_teacher: dict) -> float:
    _check_dumps_comparable(dump_student, dump_teacher)
    if dump_student["num_prototypes"] != dump_teacher["num_prototypes"]:
        raise ConfigError("dumps have different prototype counts")
    q_t = [set(ids) for ids in dump_teacher["argmin_ids"]]
    q_s = [set(ids) for ids in dump_student["argmin_ids"]]
    _, total = hungarian(modified_jaccard_matrix(q_t, q_s), maximize=True)
    return total / len(q_t)
