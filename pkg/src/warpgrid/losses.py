"""Training objectives with value-and-gradient evaluation.

Conventions shared by every loss here:

* a grid ``G_st`` lives on the target lattice and holds source coordinates, so
  ``W(I_s, G_st)`` is the source rendered in the target frame; ``G_ts`` is the
  reverse. ``C_t`` rates ``G_st`` and ``C_s`` rates ``G_ts``.
* reductions are means over masked pixels, taken per side and summed over the
  two sides.
* per-pixel L2 norms use the zero subgradient where the residual vanishes.

Gradients are returned in ``LossReport.grads`` keyed by ``grid_st``, ``grid_ts``,
``conf_s``, ``conf_t`` (or ``grid`` for single-grid losses).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import numpy as np

from .features import FeatureExtractor, make_extractor
from .imagery import KeypointSet, identity_grid, pixel_to_normalized
from .warp import bilinear_sample, bilinear_sample_backward

__all__ = [
    "LossError",
    "LossWeights",
    "LossReport",
    "ObjectiveInputs",
    "ReferenceConfidence",
    "STAGES",
    "loss_matching",
    "loss_reconstruction",
    "reference_confidence",
    "reference_from_error",
    "loss_uncertainty",
    "loss_smoothness",
    "loss_dense_supervised",
    "loss_sparse_keypoints",
    "total_objective",
    "cycle_images",
]

STAGES = ("i", "ii", "iii", "iv")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    dense: float = 10000.0
    sparse: float = 0.1
    reconstruction: float = 100.0
    matching: float = 2000.0
    smooth: float = 1000.0
    uncertainty: float = 0.01
    lambda_conf: float = 0.1
    learning_rate: float = 1e-4

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise LossError(f"weight {f.name} must be finite and >= 0, got {v}")

    def coefficients(self) -> tuple[float, ...]:
        """(dense, sparse, reconstruction, matching, smooth, uncertainty)."""
        return (self.dense, self.sparse, self.reconstruction, self.matching, self.smooth, self.uncertainty)

    @classmethod
    def from_dict(cls, data: dict) -> "LossWeights":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise LossError(f"unknown loss weight keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})

    @classmethod
    def from_json(cls, path) -> "LossWeights":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    terms: dict[str, float]
    total: float
    grads: dict[str, np.ndarray]
    weights: dict[str, float] = field(default_factory=dict)
    flags: set[str] = field(default_factory=set)
    maps: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def value(self) -> float:
        return self.total


def _single(name, value, grads, flags=(), maps=None) -> LossReport:
    return LossReport(
        terms={name: float(value)}, total=float(value), grads=grads,
        weights={name: 1.0}, flags=set(flags), maps=maps or {},
    )


def _img(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a[None] if a.ndim == 2 else a


def _map(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_shapes(hw, *arrays):
    for a in arrays:
        if a.shape[-2:] != hw:
            raise LossError(f"dimension mismatch: expected {hw}, got {a.shape}")


def _norm(r: np.ndarray):
    """Per-pixel L2 over channels and the unit direction (zero where the norm is 0)."""
    n = np.sqrt((r * r).sum(axis=0))
    safe = np.where(n > 0, n, 1.0)
    return n, np.where(n > 0, r / safe, 0.0)


# ---------------------------------------------------------------------------
# cycle-consistent losses


def loss_matching(I_s, I_t, G_st, G_ts, C_s, C_t, M_s, M_t,
                  extractor: FeatureExtractor | None = None) -> LossReport:
    """Confidence-weighted feature distance between each image and its warped counterpart."""
    I_s, I_t = _img(I_s), _img(I_t)
    G_st, G_ts = _map(G_st), _map(G_ts)
    C_s, C_t, M_s, M_t = map(_map, (C_s, C_t, M_s, M_t))
    hw = I_s.shape[1:]
    _check_shapes(hw, I_t, G_st, G_ts, C_s, C_t, M_s, M_t)
    E = extractor if extractor is not None else make_extractor()

    value = 0.0
    grads = {}
    flags = set()
    maps = {}
    # (side, reference image, image being warped, grid, confidence, mask)
    for side, ref, src, grid, conf, mask, gkey in (
        ("t", I_t, I_s, G_st, C_t, M_t, "grid_st"),
        ("s", I_s, I_t, G_ts, C_s, M_s, "grid_ts"),
    ):
        n = mask.sum()
        if n == 0:
            flags.add(f"empty_mask_{side}")
            grads[f"conf_{side}"] = np.zeros(hw)
            grads[gkey] = np.zeros((2,) + hw)
            continue
        warped = bilinear_sample(src, grid)
        fw = E(warped)
        dist, unit = _norm(fw - E(ref))
        value += (mask * dist * conf).sum() / n
        grads[f"conf_{side}"] = mask * dist / n
        cot_img = E.vjp(warped, unit * (mask * conf / n))
        grads[gkey] = bilinear_sample_backward(src, grid, cot_img).d_grid
        maps[f"feature_distance_{side}"] = dist
    return _single("matching", value, grads, flags, maps)


def cycle_images(I_s, I_t, G_st, G_ts):
    """Return (I_s->t, I_t->s, I_s cycle, I_t cycle)."""
    st = bilinear_sample(I_s, G_st)
    ts = bilinear_sample(I_t, G_ts)
    return st, ts, bilinear_sample(st, G_ts), bilinear_sample(ts, G_st)


def loss_reconstruction(I_s, I_t, G_st, G_ts, C_s, C_t, M_s, M_t) -> LossReport:
    """Confidence-weighted L2 between each image and its round trip through both grids."""
    I_s, I_t = _img(I_s), _img(I_t)
    G_st, G_ts = _map(G_st), _map(G_ts)
    C_s, C_t, M_s, M_t = map(_map, (C_s, C_t, M_s, M_t))
    hw = I_s.shape[1:]
    _check_shapes(hw, I_t, G_st, G_ts, C_s, C_t, M_s, M_t)

    value = 0.0
    grads = {"grid_st": np.zeros((2,) + hw), "grid_ts": np.zeros((2,) + hw)}
    flags = set()
    maps = {}
    # side s: I_s -> (G_st) -> target frame -> (G_ts) -> source frame; side t mirrors it
    for side, img, inner, outer, conf, mask, kin, kout in (
        ("s", I_s, G_st, G_ts, C_s, M_s, "grid_st", "grid_ts"),
        ("t", I_t, G_ts, G_st, C_t, M_t, "grid_ts", "grid_st"),
    ):
        mid = bilinear_sample(img, inner)
        cyc = bilinear_sample(mid, outer)
        err, unit = _norm(cyc - img)
        maps[f"cycle_{side}"] = cyc
        maps[f"error_{side}"] = err
        n = mask.sum()
        if n == 0:
            flags.add(f"empty_mask_{side}")
            grads[f"conf_{side}"] = np.zeros(hw)
            continue
        value += (mask * err * conf).sum() / n
        grads[f"conf_{side}"] = mask * err / n
        bw_outer = bilinear_sample_backward(mid, outer, unit * (mask * conf / n))
        bw_inner = bilinear_sample_backward(img, inner, bw_outer.d_image)
        grads[kout] = grads[kout] + bw_outer.d_grid
        grads[kin] = grads[kin] + bw_inner.d_grid
    return _single("reconstruction", value, grads, flags, maps)


class ReferenceConfidence(NamedTuple):
    error: np.ndarray
    normalized_error: np.ndarray
    confidence: np.ndarray
    degenerate: bool


def reference_from_error(e, M) -> ReferenceConfidence:
    """Min-max normalize ``e`` using masked pixels only; confidence is ``1 - e*``.

    A constant masked error carries no ranking, so it maps to ``e* = 0`` (full trust).
    Values outside the masked range are clamped, keeping both maps in [0, 1].
    """
    e = _map(e)
    M = _map(M)
    if e.shape != M.shape:
        raise LossError(f"dimension mismatch: {e.shape} vs {M.shape}")
    sel = M > 0
    if not np.any(sel):
        raise LossError("reference confidence needs a nonempty mask")
    lo, hi = e[sel].min(), e[sel].max()
    if hi > lo:
        e_star = np.clip((e - lo) / (hi - lo), 0.0, 1.0)
        degenerate = False
    else:
        e_star = np.zeros_like(e)
        degenerate = True
    return ReferenceConfidence(e, e_star, 1.0 - e_star, degenerate)


def reference_confidence(I, I_cycle, M) -> ReferenceConfidence:
    I, I_cycle = _img(I), _img(I_cycle)
    if I.shape != I_cycle.shape:
        raise LossError(f"dimension mismatch: {I.shape} vs {I_cycle.shape}")
    e, _ = _norm(I - I_cycle)
    return reference_from_error(e, M)


def loss_uncertainty(C_ref_s, C_ref_t, C_s, C_t, M_s, M_t, lambda_conf: float = 0.1) -> LossReport:
    """Masked-mean L1 to the (constant) reference confidence minus a reward for confidence."""
    C_ref_s, C_ref_t, C_s, C_t, M_s, M_t = map(_map, (C_ref_s, C_ref_t, C_s, C_t, M_s, M_t))
    hw = C_s.shape
    _check_shapes(hw, C_ref_s, C_ref_t, C_t, M_s, M_t)
    value = 0.0
    grads = {}
    flags = set()
    for side, ref, conf, mask in (("s", C_ref_s, C_s, M_s), ("t", C_ref_t, C_t, M_t)):
        n = mask.sum()
        if n == 0:
            flags.add(f"empty_mask_{side}")
            grads[f"conf_{side}"] = np.zeros(hw)
            continue
        diff = ref - conf
        value += (mask * np.abs(diff)).sum() / n - lambda_conf * (mask * conf).sum() / n
        grads[f"conf_{side}"] = mask * (-np.sign(diff) - lambda_conf) / n
    return _single("uncertainty", value, grads, flags)


# ---------------------------------------------------------------------------
# regularizers and supervision


def loss_smoothness(grid, mode: str = "displacement") -> LossReport:
    """Mean squared first difference between neighbouring grid entries.

    ``displacement`` differences ``grid - identity`` over horizontal and vertical
    neighbours, so rigid translations cost nothing. ``literal`` flattens each raw
    coordinate plane row-major and differences consecutive entries of that vector.
    """
    g = _map(grid)
    if g.ndim != 3 or g.shape[0] != 2 or min(g.shape[1:]) < 2:
        raise LossError(f"smoothness needs a (2, H>=2, W>=2) grid, got {g.shape}")
    _, h, w = g.shape
    if mode == "displacement":
        d = g - identity_grid(h, w).coords.astype(np.float64)
        dx = d[:, :, 1:] - d[:, :, :-1]
        dy = d[:, 1:, :] - d[:, :-1, :]
        count = dx.size + dy.size
        value = ((dx ** 2).sum() + (dy ** 2).sum()) / count
        grad = np.zeros_like(d)
        grad[:, :, 1:] += 2 * dx / count
        grad[:, :, :-1] -= 2 * dx / count
        grad[:, 1:, :] += 2 * dy / count
        grad[:, :-1, :] -= 2 * dy / count
    elif mode == "literal":
        flat = g.reshape(2, -1)
        diff = flat[:, 1:] - flat[:, :-1]
        count = diff.size
        value = (diff ** 2).sum() / count
        gf = np.zeros_like(flat)
        gf[:, 1:] += 2 * diff / count
        gf[:, :-1] -= 2 * diff / count
        grad = gf.reshape(g.shape)
    else:
        raise LossError(f"unknown smoothness mode {mode!r}")
    return _single("smooth", value, {"grid": grad})


def loss_dense_supervised(G, G_gt, visibility) -> LossReport:
    """Mean squared coordinate error over visible pixels and both coordinate planes."""
    G, G_gt, V = _map(G), _map(G_gt), _map(visibility)
    if G.shape != G_gt.shape or G.shape[1:] != V.shape:
        raise LossError(f"dimension mismatch: {G.shape}, {G_gt.shape}, {V.shape}")
    count = 2 * V.sum()
    if count == 0:
        return _single("dense", 0.0, {"grid": np.zeros_like(G)}, {"empty_visibility"})
    diff = (G - G_gt) * V
    return _single("dense", (diff ** 2).sum() / count, {"grid": 2 * diff / count})


def loss_sparse_keypoints(G_st, G_ts, keypoints: KeypointSet) -> LossReport:
    """Squared error of grid-predicted correspondences at keypoints.

    ``G_st`` is read at each target keypoint and compared with the source point;
    ``G_ts`` is read at each source keypoint and compared with the target point.
    Each direction is a mean over visible points and both coordinates; the two
    directions are summed.
    """
    G_st, G_ts = _map(G_st), _map(G_ts)
    if G_st.shape != G_ts.shape:
        raise LossError(f"dimension mismatch: {G_st.shape} vs {G_ts.shape}")
    _, h, w = G_st.shape
    grads = {"grid_st": np.zeros_like(G_st), "grid_ts": np.zeros_like(G_ts)}
    pts = keypoints.points[keypoints.visible]
    if len(pts) == 0:
        return _single("sparse", 0.0, grads, {"no_visible_keypoints"})
    src = np.stack([pixel_to_normalized(pts[:, 0], w), pixel_to_normalized(pts[:, 1], h)])
    tgt = np.stack([pixel_to_normalized(pts[:, 2], w), pixel_to_normalized(pts[:, 3], h)])
    count = 2 * len(pts)
    value = 0.0
    for key, grid, where, truth in (("grid_st", G_st, tgt, src), ("grid_ts", G_ts, src, tgt)):
        loc = where[:, None, :]  # (2, 1, N) sampling grid
        pred = bilinear_sample(grid, loc)[:, 0, :]
        diff = pred - truth
        value += (diff ** 2).sum() / count
        up = (2 * diff / count)[:, None, :]
        grads[key] = bilinear_sample_backward(grid, loc, up).d_image
    return _single("sparse", value, grads)


# ---------------------------------------------------------------------------
# stage-gated objective


@dataclass
class ObjectiveInputs:
    I_s: np.ndarray
    I_t: np.ndarray
    M_s: np.ndarray
    M_t: np.ndarray
    G_st: np.ndarray
    G_ts: np.ndarray
    C_s: np.ndarray
    C_t: np.ndarray
    gt_st: np.ndarray | None = None
    gt_ts: np.ndarray | None = None
    vis_s: np.ndarray | None = None
    vis_t: np.ndarray | None = None
    keypoints: KeypointSet | None = None


def _stage_index(stage) -> int:
    if isinstance(stage, int) and 1 <= stage <= 4:
        return stage
    if isinstance(stage, str) and stage.lower() in STAGES:
        return STAGES.index(stage.lower()) + 1
    raise LossError(f"unknown stage {stage!r}")


def total_objective(stage, inputs: ObjectiveInputs, weights: LossWeights | None = None,
                    extractor: FeatureExtractor | None = None, smooth_mode: str = "displacement",
                    conf_grad: str = "uncertainty") -> LossReport:
    """Weighted sum of the losses active at ``stage`` ("i" .. "iv").

    i: dense + smooth; ii: adds sparse keypoints; iii: adds matching and
    reconstruction; iv: adds uncertainty. Dense and sparse terms only apply
    when the pair carries ground-truth grids or keypoints respectively.

    ``conf_grad`` selects which terms may move the confidences: ``"uncertainty"``
    (only the uncertainty loss) or ``"all"``.
    """
    if conf_grad not in ("uncertainty", "all"):
        raise LossError(f"unknown conf_grad policy {conf_grad!r}")
    k = _stage_index(stage)
    wts = weights or LossWeights()
    x = inputs
    hw = np.asarray(x.G_st).shape[1:]
    grads = {
        "grid_st": np.zeros((2,) + hw), "grid_ts": np.zeros((2,) + hw),
        "conf_s": np.zeros(hw), "conf_t": np.zeros(hw),
    }
    terms: dict[str, float] = {}
    used: dict[str, float] = {}
    flags: set[str] = set()
    maps: dict[str, np.ndarray] = {}

    def add(name, weight, value, part_grads, conf_ok=False):
        terms[name] = float(value)
        used[name] = weight
        for key, g in part_grads.items():
            if key.startswith("conf") and not conf_ok:
                continue
            grads[key] = grads[key] + weight * g

    if x.gt_st is not None and x.gt_ts is not None:
        vis_t = np.ones(hw) if x.vis_t is None else x.vis_t
        vis_s = np.ones(hw) if x.vis_s is None else x.vis_s
        a = loss_dense_supervised(x.G_st, x.gt_st, vis_t)
        b = loss_dense_supervised(x.G_ts, x.gt_ts, vis_s)
        flags |= {f"dense:{f}" for f in a.flags | b.flags}
        add("dense", wts.dense, a.total + b.total, {"grid_st": a.grads["grid"], "grid_ts": b.grads["grid"]})

    a = loss_smoothness(x.G_st, smooth_mode)
    b = loss_smoothness(x.G_ts, smooth_mode)
    add("smooth", wts.smooth, a.total + b.total, {"grid_st": a.grads["grid"], "grid_ts": b.grads["grid"]})

    if k >= 2 and x.keypoints is not None:
        r = loss_sparse_keypoints(x.G_st, x.G_ts, x.keypoints)
        flags |= {f"sparse:{f}" for f in r.flags}
        add("sparse", wts.sparse, r.total, r.grads)

    if k >= 3:
        r = loss_matching(x.I_s, x.I_t, x.G_st, x.G_ts, x.C_s, x.C_t, x.M_s, x.M_t, extractor)
        flags |= {f"matching:{f}" for f in r.flags}
        add("matching", wts.matching, r.total, r.grads, conf_ok=conf_grad == "all")
        r = loss_reconstruction(x.I_s, x.I_t, x.G_st, x.G_ts, x.C_s, x.C_t, x.M_s, x.M_t)
        flags |= {f"reconstruction:{f}" for f in r.flags}
        add("reconstruction", wts.reconstruction, r.total, r.grads, conf_ok=conf_grad == "all")
        maps.update(r.maps)

    if k >= 4:
        ref_s = _safe_reference(maps["error_s"], x.M_s)
        ref_t = _safe_reference(maps["error_t"], x.M_t)
        maps["reference_s"], maps["reference_t"] = ref_s, ref_t
        r = loss_uncertainty(ref_s, ref_t, x.C_s, x.C_t, x.M_s, x.M_t, wts.lambda_conf)
        flags |= {f"uncertainty:{f}" for f in r.flags}
        add("uncertainty", wts.uncertainty, r.total, r.grads, conf_ok=True)

    total = sum(used[name] * terms[name] for name in terms)
    return LossReport(terms=terms, total=float(total), grads=grads, weights=used, flags=flags, maps=maps)


def _safe_reference(err, mask):
    if np.asarray(mask).sum() == 0:
        return np.ones_like(err)
    return reference_from_error(err, mask).confidence
