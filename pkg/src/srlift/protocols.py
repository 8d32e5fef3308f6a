"""Evaluation metrics, rare-pose ranking and train/test split builders."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .data.dataset import PoseDataset
from .numerics import ShapeError

PCK_THRESHOLD = 150.0
AUC_THRESHOLDS = np.arange(5.0, 150.0 + 1e-9, 5.0)
DEFAULT_SIGMA = 100.0


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    if pred.shape[-1] != 3:
        raise ShapeError(f"poses must be [..., N, 3], got {pred.shape}")
    return pred, gt


def joint_errors(pred, gt) -> np.ndarray:
    """Per-joint Euclidean distances, shape [..., N]."""
    pred, gt = _pair(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt) -> float:
    """Mean per-joint position error over all joints (and samples, if batched)."""
    return float(joint_errors(pred, gt).mean())


def procrustes_align(pred, gt, scale: bool = True) -> np.ndarray:
    """Best similarity (or rigid, with ``scale=False``) transform of ``pred`` onto ``gt``.

    Works on [N, 3] or batched [B, N, 3] poses; the rotation is kept proper
    (det = +1) by flipping the last singular direction when needed.
    """
    pred, gt = _pair(pred, gt)
    single = pred.ndim == 2
    P, G = (pred[None], gt[None]) if single else (pred, gt)
    mu_p = P.mean(axis=1, keepdims=True)
    mu_g = G.mean(axis=1, keepdims=True)
    X, Y = P - mu_p, G - mu_g
    Gc = np.einsum("bni,bnj->bij", Y, Y)
    sv = np.linalg.svd(Gc, compute_uv=False)
    if np.any(sv[:, 1] <= 1e-10 * np.maximum(sv[:, 0], 1e-300)):
        raise ValueError("ground-truth joints are collinear (or coincident); alignment is undefined")
    M = np.einsum("bni,bnj->bij", Y, X)  # cross-covariance gt^T pred
    U, S, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.ones_like(S)
    D[:, -1] = d
    R = U @ (D[:, :, None] * Vt)  # rotation taking pred onto gt
    if scale:
        s = (S * D).sum(axis=1) / np.maximum((X ** 2).sum(axis=(1, 2)), 1e-300)
    else:
        s = np.ones(len(P))
    aligned = s[:, None, None] * np.einsum("bij,bnj->bni", R, X) + mu_g
    return aligned[0] if single else aligned


def pa_mpjpe(pred, gt, scale: bool = True) -> float:
    """MPJPE after Procrustes alignment (similarity by default, rigid with ``scale=False``)."""
    return mpjpe(procrustes_align(pred, gt, scale), gt)


def pck_auc(errors, threshold: float = PCK_THRESHOLD, thresholds=AUC_THRESHOLDS) -> tuple[float, float]:
    """PCK at ``threshold`` (fraction of joints with error below it) and AUC over ``thresholds``."""
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise ValueError("pck_auc needs at least one error value")
    pck = float(np.mean(e < threshold))
    auc = float(np.mean([np.mean(e < t) for t in thresholds]))
    return pck, auc


# ---------------------------------------------------------------------------
# rare poses
# ---------------------------------------------------------------------------

def _sigma(sigma, n: int) -> np.ndarray:
    s = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,))
    if np.any(~(s > 0)):
        raise ValueError("every per-joint sigma must be positive")
    return s


def pose_similarity(J, I, sigma=DEFAULT_SIGMA) -> float:
    """Mean over joints of an unnormalized Gaussian of the joint displacement."""
    J, I = _pair(J, I)
    if J.ndim != 2:
        raise ShapeError(f"pose_similarity expects single [N, 3] poses, got {J.shape}")
    s = _sigma(sigma, J.shape[0])
    d2 = ((J - I) ** 2).sum(axis=-1)
    return float(np.mean(np.exp(-d2 / (2.0 * s ** 2))))


def occurrence(queries, pose_set, sigma=DEFAULT_SIGMA, chunk: int | None = None) -> np.ndarray:
    """Average similarity of each query pose [Q, N, 3] to every pose of ``pose_set`` [M, N, 3].

    A query that is itself in the set contributes its self-similarity of 1.
    Work is chunked over queries to bound memory; every query's terms are
    reduced in the same order whatever the chunk size.
    """
    Q = np.asarray(queries, dtype=np.float64)
    O = np.asarray(pose_set, dtype=np.float64)
    if O.ndim != 3 or len(O) == 0:
        raise ValueError("occurrence needs a non-empty [M, N, 3] reference set")
    single = Q.ndim == 2
    Q = Q[None] if single else Q
    if Q.shape[1:] != O.shape[1:]:
        raise ShapeError(f"query poses {Q.shape[1:]} do not match reference poses {O.shape[1:]}")
    n = O.shape[1]
    inv = 1.0 / (2.0 * _sigma(sigma, n) ** 2)
    chunk = chunk or max(1, 4_000_000 // len(O))
    out = np.empty(len(Q))
    for a in range(0, len(Q), chunk):
        q = Q[a:a + chunk]
        ps = np.zeros((len(q), len(O)))
        for j in range(n):
            d2 = ((q[:, None, j, :] - O[None, :, j, :]) ** 2).sum(axis=-1)
            ps += np.exp(-d2 * inv[j])
        out[a:a + chunk] = (ps / n).mean(axis=-1)
    return out[0] if single else out


def n_rare(m: int, percent: float) -> int:
    if not 0 < percent <= 100:
        raise ValueError(f"rare percentage must lie in (0, 100], got {percent}")
    return min(m, int(math.ceil(percent * m / 100.0 - 1e-9)))


def select_rare(poses, percent: float, sigma=DEFAULT_SIGMA, occ: np.ndarray | None = None) -> np.ndarray:
    """Indices of the ceil(R*M/100) poses with lowest occurrence; ties by ascending index."""
    P = np.asarray(poses, dtype=np.float64)
    if len(P) == 0:
        raise ValueError("cannot select rare poses from an empty set")
    k = n_rare(len(P), percent)
    occ = occurrence(P, P, sigma) if occ is None else np.asarray(occ)
    order = np.lexsort((np.arange(len(P)), occ))
    return np.sort(order[:k])


def rareness_deciles(occ: np.ndarray) -> np.ndarray:
    """Decile label 0 (rarest 10%) .. 9 (most common) for each pose, by occurrence rank."""
    occ = np.asarray(occ)
    m = len(occ)
    rank = np.empty(m, dtype=np.int64)
    rank[np.lexsort((np.arange(m), occ))] = np.arange(m)
    return (rank * 10) // max(m, 1)


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProtocolSpec:
    """``kind`` is ``subject``, ``cross_action``, ``rare_pose`` or ``compositional``."""

    kind: str = "subject"
    train_subjects: tuple[str, ...] = ()
    test_subjects: tuple[str, ...] = ()
    train_action: str | None = None
    rare_percent: float = 100.0
    sigma: float | tuple[float, ...] = DEFAULT_SIGMA

    def __post_init__(self):
        kind = self.kind.lower().replace("-", "_")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "train_subjects", tuple(self.train_subjects))
        object.__setattr__(self, "test_subjects", tuple(self.test_subjects))
        if isinstance(self.sigma, (list, tuple)):
            object.__setattr__(self, "sigma", tuple(float(s) for s in self.sigma))
        if kind not in ("subject", "cross_action", "rare_pose", "compositional"):
            raise ValueError(f"unknown protocol {self.kind!r}")
        if not 0 < self.rare_percent <= 100:
            raise ValueError(f"rare percentage must lie in (0, 100], got {self.rare_percent}")
        if np.any(np.asarray(self.sigma) <= 0):
            raise ValueError("sigma must be positive for every joint")
        if kind == "cross_action" and not self.train_action:
            raise ValueError("cross_action protocol needs a train_action")


def _default_subjects(dataset: PoseDataset) -> tuple[list[str], list[str]]:
    subjects = sorted(set(dataset.subject.tolist()), key=lambda s: (len(s), s))
    if len(subjects) < 2:
        raise ValueError(f"need at least two subjects for a subject split, found {subjects}")
    n_train = max(1, int(round(len(subjects) * 0.7)))
    n_train = min(n_train, len(subjects) - 1)
    return subjects[:n_train], subjects[n_train:]


def _require(values, available, what: str) -> None:
    missing = sorted(set(values) - set(available))
    if missing:
        raise ValueError(f"{what} {missing} not found; available: {sorted(set(available))}")


def build_split(dataset: PoseDataset, proto: ProtocolSpec) -> tuple[PoseDataset, PoseDataset]:
    if proto.kind == "compositional":
        from .data.synth import compositional_split
        return compositional_split(dataset)
    subjects = dataset.subject.tolist()
    if proto.train_subjects or proto.test_subjects:
        train_s, test_s = list(proto.train_subjects), list(proto.test_subjects)
        _require(train_s + test_s, subjects, "subjects")
    else:
        train_s, test_s = _default_subjects(dataset)
    if set(train_s) & set(test_s):
        raise ValueError(f"subjects {sorted(set(train_s) & set(test_s))} are in both train and test")
    train_mask = np.isin(dataset.subject, train_s)
    test_mask = np.isin(dataset.subject, test_s)
    if proto.kind == "cross_action":
        _require([proto.train_action], dataset.action.tolist(), "action")
        train_mask &= dataset.action == proto.train_action
    train, test = dataset.subset(np.nonzero(train_mask)[0]), dataset.subset(np.nonzero(test_mask)[0])
    if proto.kind == "rare_pose" and proto.rare_percent < 100:
        test = test.subset(select_rare(test.pose_3d, proto.rare_percent, proto.sigma))
    return train, test


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    """Rows of (metric, slice, value, count); slices are ``all``, ``action=...`` and ``decile=k``."""

    rows: list[tuple[str, str, float, int]] = field(default_factory=list)

    @classmethod
    def from_predictions(cls, pred, gt, actions=None, occ=None, pa_scale: bool = True) -> "MetricReport":
        pred, gt = _pair(pred, gt)
        if len(pred) == 0:
            raise ValueError("cannot report on an empty test set")
        err = joint_errors(pred, gt)
        pa_err = joint_errors(procrustes_align(pred, gt, pa_scale), gt)
        rows = []

        def add_slice(name: str, mask: np.ndarray):
            n = int(mask.sum())
            rows.append(("mpjpe", name, float(err[mask].mean()), n))
            rows.append(("pa_mpjpe", name, float(pa_err[mask].mean()), n))
            pck, auc = pck_auc(err[mask])
            rows.append(("pck150", name, pck, n))
            rows.append(("auc", name, auc, n))

        add_slice("all", np.ones(len(pred), dtype=bool))
        if actions is not None:
            actions = np.asarray(actions, dtype=object)
            for a in sorted(set(actions.tolist())):
                add_slice(f"action={a}", actions == a)
        if occ is not None:
            dec = rareness_deciles(occ)
            for k in range(10):
                if np.any(dec == k):
                    add_slice(f"decile={k}", dec == k)
        return cls(rows)

    def value(self, metric: str, slice_: str = "all") -> float:
        for m, s, v, _ in self.rows:
            if m == metric and s == slice_:
                return v
        raise KeyError(f"no {metric} value for slice {slice_!r}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "slice", "value", "count"])
        for m, s, v, n in self.rows:
            w.writerow([m, s, repr(float(v)), n])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["metric", "slice", "value", "count"]:
            raise ValueError("not a metric report (missing header)")
        return cls([(m, s, float(v), int(n)) for m, s, v, n in rows[1:]])

    def table(self) -> str:
        """Fixed-width table, one row per slice, one column per metric."""
        metrics = list(dict.fromkeys(m for m, *_ in self.rows))
        slices = list(dict.fromkeys(s for _, s, *_ in self.rows))
        vals = {(m, s): (v, n) for m, s, v, n in self.rows}
        width = max([5] + [len(s) for s in slices])
        lines = [f"{'slice':<{width}}  " + "  ".join(f"{m:>9}" for m in metrics) + "      n"]
        for s in slices:
            cells = [f"{vals[(m, s)][0]:9.3f}" if (m, s) in vals else " " * 9 for m in metrics]
            n = next(vals[(m, s)][1] for m in metrics if (m, s) in vals)
            lines.append(f"{s:<{width}}  " + "  ".join(cells) + f"  {n:5d}")
        return "\n".join(lines) + "\n"
