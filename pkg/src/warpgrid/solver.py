"""Per-pair direct optimization of bidirectional grids and confidences.

Grids are parameterized as displacements from the identity grid and
confidences as logits, so the starting point is the identity map with full
confidence. The solve runs coarse-to-fine; displacement fields are carried
between levels unchanged because normalized coordinates do not depend on
resolution.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .features import make_extractor
from .imagery import ConfidenceMap, SamplingGrid, identity_grid
from .losses import LossWeights, ObjectiveInputs, total_objective
from .warp import resample

__all__ = [
    "NumericalError",
    "Adam",
    "adam_step",
    "confidence_from_logits",
    "confidence_logit_grad",
    "DirectSolveConfig",
    "SolveResult",
    "direct_solve",
    "downsample_image",
    "upsample_displacement",
]

log = logging.getLogger(__name__)

CONF_EPS = 1e-6


class NumericalError(RuntimeError):
    """Raised when a loss goes non-finite; ``trace`` holds the records so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class Adam:
    """Bias-corrected Adam over a dict of parameter arrays."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Return updated copies of ``params``; moments are kept on the optimizer."""
        for k in params:
            if np.shape(grads[k]) != np.shape(params[k]):
                raise ValueError(f"gradient for {k!r} has shape {np.shape(grads[k])}, expected {np.shape(params[k])}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        out = {}
        for k, p in params.items():
            g = np.asarray(grads[k], dtype=p.dtype)
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            elif self.m[k].shape != p.shape:
                raise ValueError(f"moment buffer for {k!r} does not match parameter shape")
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            out[k] = (p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype, copy=False)
        return out


def adam_step(state: Adam, params, grads):
    return state.step(params, grads)


def confidence_from_logits(z):
    """Squashed sigmoid; stays strictly inside (0, 1) for every finite or infinite logit."""
    s = 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))
    return CONF_EPS + (1.0 - 2 * CONF_EPS) * s


def confidence_logit_grad(z, grad_conf):
    s = 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))
    return grad_conf * (1.0 - 2 * CONF_EPS) * s * (1 - s)


# ---------------------------------------------------------------------------
# pyramid helpers


def downsample_image(image, height: int, width: int) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    factor = img.shape[-1] / width
    if factor > 1:
        sigma = 0.5 * factor
        img = ndimage.gaussian_filter(img, sigma=(0, sigma, sigma), mode="nearest")
    return resample(img, height, width)


def upsample_displacement(disp, height: int, width: int) -> np.ndarray:
    return resample(disp, height, width)


def _downsample_mask(mask, height, width):
    m = np.asarray(mask, dtype=np.float64)
    if m.shape == (height, width):
        return m
    return (resample(m, height, width)[0] >= 0.5).astype(np.float64)


# ---------------------------------------------------------------------------
# direct solve


@dataclass(frozen=True)
class DirectSolveConfig:
    """Budgets and step sizes for ``direct_solve``.

    ``schedule`` runs at full resolution after ``levels - 1`` coarser levels of
    ``coarse_iterations`` stage-iii steps each (level ``k`` works at ``H / 2**k``).
    Coarse levels multiply the smoothness weight by ``coarse_smooth_scale``; that
    keeps the early estimate close to affine so textured patches cannot lock onto
    a neighbouring blob before the global motion is found.
    """

    levels: int = 4
    coarse_iterations: int = 150
    schedule: tuple[tuple[str, int], ...] = (("iii", 200), ("iv", 150))
    grid_lr: float = 4e-3
    conf_lr: float = 0.1
    conf_init_logit: float = 8.0
    weights: LossWeights = field(default_factory=LossWeights)
    extractor: str = "random_conv"
    extractor_seed: int = 0
    smooth_mode: str = "displacement"
    conf_grad: str = "uncertainty"
    coarse_smooth_scale: float = 100.0

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.coarse_iterations < 0 or any(n < 0 for _, n in self.schedule):
            raise ValueError("iteration budgets must be >= 0")

    def with_iterations(self, scale: float) -> "DirectSolveConfig":
        return replace(
            self,
            coarse_iterations=int(round(self.coarse_iterations * scale)),
            schedule=tuple((s, int(round(n * scale))) for s, n in self.schedule),
        )


@dataclass
class SolveResult:
    G_st: SamplingGrid
    G_ts: SamplingGrid
    C_s: ConfidenceMap
    C_t: ConfidenceMap
    trace: list[dict]


def _level_sizes(h, w, levels):
    return [(max(2, h >> k), max(2, w >> k)) for k in reversed(range(levels))]


def direct_solve(I_s, I_t, M_s, M_t, config: DirectSolveConfig | None = None) -> SolveResult:
    cfg = config or DirectSolveConfig()
    I_s = np.asarray(I_s, dtype=np.float64)
    I_t = np.asarray(I_t, dtype=np.float64)
    if I_s.shape != I_t.shape:
        raise ValueError(f"image shapes differ: {I_s.shape} vs {I_t.shape}")
    _, h, w = I_s.shape
    if np.shape(M_s) != (h, w) or np.shape(M_t) != (h, w):
        raise ValueError("masks must match the image size")
    extractor = make_extractor(cfg.extractor, seed=cfg.extractor_seed)

    trace: list[dict] = []
    sizes = _level_sizes(h, w, cfg.levels)
    disp_st = np.zeros((2,) + sizes[0])
    disp_ts = np.zeros((2,) + sizes[0])
    logit_s = np.full((h, w), cfg.conf_init_logit)
    logit_t = np.full((h, w), cfg.conf_init_logit)

    for level, (lh, lw) in enumerate(sizes):
        finest = level == len(sizes) - 1
        if disp_st.shape[1:] != (lh, lw):
            disp_st = upsample_displacement(disp_st, lh, lw)
            disp_ts = upsample_displacement(disp_ts, lh, lw)
        if finest:
            a, b = I_s, I_t
            ms, mt = np.asarray(M_s, np.float64), np.asarray(M_t, np.float64)
            plan = list(cfg.schedule)
        else:
            a, b = downsample_image(I_s, lh, lw), downsample_image(I_t, lh, lw)
            ms, mt = _downsample_mask(M_s, lh, lw), _downsample_mask(M_t, lh, lw)
            plan = [("iii", cfg.coarse_iterations)]
        weights = cfg.weights if finest else replace(cfg.weights, smooth=cfg.weights.smooth * cfg.coarse_smooth_scale)
        ident = identity_grid(lh, lw).coords.astype(np.float64)
        opt = Adam(lr=cfg.grid_lr)
        conf_opt = Adam(lr=cfg.conf_lr)

        for stage, iters in plan:
            for it in range(iters):
                if finest:
                    c_s, c_t = confidence_from_logits(logit_s), confidence_from_logits(logit_t)
                else:
                    c_s = c_t = np.full((lh, lw), confidence_from_logits(cfg.conf_init_logit))
                inputs = ObjectiveInputs(
                    I_s=a, I_t=b, M_s=ms, M_t=mt, G_st=ident + disp_st, G_ts=ident + disp_ts, C_s=c_s, C_t=c_t,
                )
                rep = total_objective(stage, inputs, weights, extractor, cfg.smooth_mode, cfg.conf_grad)
                rec = {"level": level, "stage": stage, "iteration": it, "total": rep.total, **rep.terms}
                trace.append(rec)
                if not np.isfinite(rep.total) or not all(np.all(np.isfinite(g)) for g in rep.grads.values()):
                    raise NumericalError(f"non-finite loss at level {level}, stage {stage}, step {it}: {rec}", trace)
                upd = opt.step({"st": disp_st, "ts": disp_ts},
                               {"st": rep.grads["grid_st"], "ts": rep.grads["grid_ts"]})
                disp_st, disp_ts = upd["st"], upd["ts"]
                if finest and stage == "iv" or (finest and cfg.conf_grad == "all" and stage == "iii"):
                    upd = conf_opt.step(
                        {"s": logit_s, "t": logit_t},
                        {"s": confidence_logit_grad(logit_s, rep.grads["conf_s"]),
                         "t": confidence_logit_grad(logit_t, rep.grads["conf_t"])},
                    )
                    logit_s, logit_t = upd["s"], upd["t"]
        log.debug("level %d (%dx%d) done, total=%s", level, lh, lw, trace[-1]["total"] if trace else None)

    ident = identity_grid(h, w).coords.astype(np.float64)
    if disp_st.shape[1:] != (h, w):
        disp_st = upsample_displacement(disp_st, h, w)
        disp_ts = upsample_displacement(disp_ts, h, w)
    return SolveResult(
        G_st=SamplingGrid(ident + disp_st),
        G_ts=SamplingGrid(ident + disp_ts),
        C_s=ConfidenceMap(confidence_from_logits(logit_s)),
        C_t=ConfidenceMap(confidence_from_logits(logit_t)),
        trace=trace,
    )
