"""Procedural image pairs with exact ground-truth bidirectional grids.

A pair is built from a texture ``I_s`` and a known warp ``T`` taking source
normalized coordinates to target ones:

* ``G_ts(p) = T(p)`` on the source lattice,
* ``G_st(q) = T^-1(q)`` on the target lattice (analytic for the affine part,
  fixed-point iteration when a nonrigid component is present),
* ``I_t = W(I_s, G_st)``, then solid occluders are pasted onto ``I_t``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .imagery import (
    ImageBuffer,
    KeypointSet,
    Mask,
    SamplingGrid,
    identity_grid,
    load_grid,
    load_image,
    load_keypoints,
    load_mask,
    normalized_to_pixel,
    save_grid,
    save_image,
    save_keypoints,
    save_mask,
)
from .warp import OUT_OF_RANGE, bilinear_sample

__all__ = [
    "SynthError",
    "NonrigidSpec",
    "WarpSpec",
    "SyntheticPair",
    "SynthConfig",
    "TEXTURE_KINDS",
    "generate_texture",
    "grids_from_warp",
    "make_pair",
    "object_mask",
    "sample_warp_spec",
    "generate_dataset",
    "regenerate",
    "load_pair",
    "load_manifest",
    "pair_from_record",
]

TEXTURE_KINDS = ("blobs", "value_noise", "checker_noise")
MIN_TEXTURE_SIZE = 8
FIXED_POINT_ITERS = 50
FIXED_POINT_TOL = 1e-5
MAX_DIVERGED_FRACTION = 0.2


class SynthError(ValueError):
    pass


# ---------------------------------------------------------------------------
# warps


@dataclass(frozen=True)
class NonrigidSpec:
    """Radial-basis displacement field anchored at control points (source coordinates)."""

    control_points: tuple[tuple[float, float], ...]
    displacements: tuple[tuple[float, float], ...]
    stiffness: float = 1e-3
    width: float = 0.5

    def __post_init__(self):
        if len(self.control_points) != len(self.displacements) or not self.control_points:
            raise SynthError("nonrigid warp needs one displacement per control point")
        mags = np.linalg.norm(np.asarray(self.displacements, dtype=np.float64), axis=1)
        if np.any(mags > 0.3 + 1e-12):
            raise SynthError("nonrigid displacement magnitude must be <= 0.3")
        if self.stiffness < 0 or self.width <= 0:
            raise SynthError("stiffness must be >= 0 and width > 0")


@dataclass(frozen=True)
class WarpSpec:
    rotation: float = 0.0
    scale: tuple[float, float] = (1.0, 1.0)
    translation: tuple[float, float] = (0.0, 0.0)
    nonrigid: NonrigidSpec | None = None
    seed: int = 0

    def __post_init__(self):
        if any(not 0.5 <= s <= 2.0 for s in self.scale):
            raise SynthError(f"scale must lie in [0.5, 2], got {self.scale}")
        if any(abs(t) > 0.5 for t in self.translation):
            raise SynthError(f"|translation| must be <= 0.5, got {self.translation}")

    def affine(self) -> tuple[np.ndarray, np.ndarray]:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        A = np.array([[c, -s], [s, c]]) @ np.diag(self.scale)
        return A, np.asarray(self.translation, dtype=np.float64)

    def to_dict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "WarpSpec":
        nr = d.get("nonrigid")
        if nr is not None:
            nr = NonrigidSpec(
                control_points=tuple(map(tuple, nr["control_points"])),
                displacements=tuple(map(tuple, nr["displacements"])),
                stiffness=nr["stiffness"],
                width=nr["width"],
            )
        return cls(
            rotation=d["rotation"], scale=tuple(d["scale"]), translation=tuple(d["translation"]),
            nonrigid=nr, seed=d.get("seed", 0),
        )


class _RBFField:
    def __init__(self, spec: NonrigidSpec):
        self.centers = np.asarray(spec.control_points, dtype=np.float64)
        self.width = spec.width
        K = self._kernel(self.centers)
        d = np.asarray(spec.displacements, dtype=np.float64)
        self.weights = np.linalg.solve(K + spec.stiffness * np.eye(len(d)), d)

    def _kernel(self, pts):
        r2 = ((pts[:, None, :] - self.centers[None, :, :]) ** 2).sum(-1)
        return np.exp(-r2 / (2 * self.width ** 2))

    def __call__(self, pts):
        """pts (N, 2) -> displacement (N, 2)."""
        return self._kernel(pts) @ self.weights


def grids_from_warp(spec: WarpSpec, height: int, width: int) -> tuple[SamplingGrid, SamplingGrid]:
    """Ground-truth ``(G_st, G_ts)`` for a warp.

    Target pixels where the inverse iteration does not converge are set to
    ``OUT_OF_RANGE`` so that they read as invisible.
    """
    A, t = spec.affine()
    if abs(np.linalg.det(A)) < 1e-6:
        raise SynthError("affine part is not invertible")
    A_inv = np.linalg.inv(A)
    ident = identity_grid(height, width).coords.astype(np.float64)
    pts = ident.reshape(2, -1).T  # (N, 2), x then y

    field = None
    if spec.nonrigid is not None:
        field = _RBFField(spec.nonrigid)
        peak = np.abs(field(pts)).max()
        if peak > 0.3:
            field.weights *= 0.3 / peak

    fwd = pts @ A.T + t
    if field is not None:
        fwd = fwd + field(pts)

    base = (pts - t) @ A_inv.T
    inv = base.copy()
    ok = np.ones(len(pts), dtype=bool)
    if field is not None:
        done = np.zeros(len(pts), dtype=bool)
        for _ in range(FIXED_POINT_ITERS):
            nxt = base - field(inv) @ A_inv.T
            step = np.abs(nxt - inv).max(axis=1)
            inv = np.where(done[:, None], inv, nxt)
            done |= step < FIXED_POINT_TOL
            if done.all():
                break
        ok = done & np.all(np.isfinite(inv), axis=1)
        if (~ok).mean() > MAX_DIVERGED_FRACTION:
            raise SynthError(f"nonrigid inversion diverged on {(~ok).mean():.1%} of pixels")
        inv[~ok] = OUT_OF_RANGE

    g_ts = fwd.T.reshape(2, height, width)
    g_st = inv.T.reshape(2, height, width)
    return SamplingGrid(g_st), SamplingGrid(g_ts)


# ---------------------------------------------------------------------------
# textures and masks


def _check_size(height, width):
    if height < MIN_TEXTURE_SIZE or width < MIN_TEXTURE_SIZE:
        raise SynthError(f"textures must be at least {MIN_TEXTURE_SIZE}x{MIN_TEXTURE_SIZE}")


def _blobs(h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.broadcast_to(rng.uniform(0.3, 0.7, (3, 1, 1)), (3, h, w)).copy()
    size = max(h, w)
    n = int(rng.integers(40, 80))
    # large splats first so fine detail stays on top
    sigmas = np.sort(np.exp(rng.uniform(np.log(size / 32), np.log(size / 5), n)))[::-1]
    for sigma in sigmas:
        cy, cx = rng.uniform(-0.1 * h, 1.1 * h), rng.uniform(-0.1 * w, 1.1 * w)
        color = rng.uniform(0, 1, (3, 1, 1))
        alpha = 0.85 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        img = (1 - alpha) * img + alpha * color
    return img


def _value_noise(h, w, rng):
    out = np.zeros((3, h, w))
    amp = 1.0
    cells = 3
    while cells <= max(h, w) // 2:
        lattice = rng.uniform(0, 1, (3, cells + 1, cells + 1))
        ident = identity_grid(h, w).coords.astype(np.float64)
        out += amp * bilinear_sample(lattice, ident)
        amp *= 0.6
        cells *= 2
    lo = out.min(axis=(1, 2), keepdims=True)
    hi = out.max(axis=(1, 2), keepdims=True)
    return (out - lo) / np.maximum(hi - lo, 1e-12)


def _checker_noise(h, w, rng):
    period = int(rng.integers(max(2, min(h, w) // 12), max(3, min(h, w) // 4) + 1))
    yy, xx = np.mgrid[0:h, 0:w]
    board = ((yy // period + xx // period) % 2).astype(np.float64)
    c0, c1 = rng.uniform(0.1, 0.9, (2, 3, 1, 1))
    img = c0 * (1 - board) + c1 * board + 0.5 * (_value_noise(h, w, rng) - 0.5)
    return np.clip(img, 0, 1)


def generate_texture(height: int, width: int, kind: str = "blobs", seed: int = 0) -> ImageBuffer:
    """Deterministic RGB texture with locally distinctive structure."""
    _check_size(height, width)
    makers = {"blobs": _blobs, "value_noise": _value_noise, "checker_noise": _checker_noise}
    if kind not in makers:
        raise SynthError(f"unknown texture kind {kind!r}")
    rng = np.random.default_rng([seed, TEXTURE_KINDS.index(kind)])
    return ImageBuffer(np.clip(makers[kind](height, width, rng), 0.0, 1.0))


def object_mask(height: int, width: int, seed: int) -> Mask:
    """Random rotated ellipse covering the central part of the frame."""
    rng = np.random.default_rng([seed, 101])
    ident = identity_grid(height, width).coords.astype(np.float64)
    cx, cy = rng.uniform(-0.1, 0.1, 2)
    rx, ry = rng.uniform(0.55, 0.8, 2)
    ang = rng.uniform(0, np.pi)
    x, y = ident[0] - cx, ident[1] - cy
    u = x * np.cos(ang) + y * np.sin(ang)
    v = -x * np.sin(ang) + y * np.cos(ang)
    return Mask(((u / rx) ** 2 + (v / ry) ** 2 <= 1.0).astype(np.float32))


def _occluder(region: np.ndarray, fraction: float, rng) -> np.ndarray:
    """Rectangle or ellipse covering ``fraction`` of ``region`` (bisection on its size)."""
    h, w = region.shape
    total = region.sum()
    if fraction <= 0 or total == 0:
        return np.zeros_like(region, dtype=bool)
    ys, xs = np.nonzero(region)
    i = rng.integers(len(ys))
    cy, cx = ys[i], xs[i]
    aspect = np.exp(rng.uniform(-0.5, 0.5))
    ellipse = bool(rng.integers(2))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    def shape(size):
        dy = (yy - cy) / (size * aspect)
        dx = (xx - cx) / (size / aspect)
        if ellipse:
            return dy ** 2 + dx ** 2 <= 1.0
        return (np.abs(dy) <= 1.0) & (np.abs(dx) <= 1.0)

    lo, hi = 0.0, 2.0 * max(h, w)
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if (shape(mid) & region).sum() / total < fraction:
            lo = mid
        else:
            hi = mid
    cands = [shape(lo), shape(hi)]
    errs = [abs((c & region).sum() / total - fraction) for c in cands]
    return cands[int(np.argmin(errs))]


# ---------------------------------------------------------------------------
# pairs


@dataclass(frozen=True, eq=False)
class SyntheticPair:
    I_s: ImageBuffer
    I_t: ImageBuffer
    M_s: Mask
    M_t: Mask
    G_st: SamplingGrid
    G_ts: SamplingGrid
    V_s: Mask
    V_t: Mask
    keypoints: KeypointSet
    seed: int = 0
    occluder: Mask | None = None
    spec: WarpSpec | None = field(default=None, compare=False)


def make_pair(texture: ImageBuffer, spec: WarpSpec, occlusion_fraction: float = 0.0, seed: int = 0,
              n_keypoints: int = 16, mask: Mask | None = None) -> SyntheticPair:
    if not 0.0 <= occlusion_fraction <= 0.5:
        raise SynthError(f"occlusion_fraction must lie in [0, 0.5], got {occlusion_fraction}")
    I_s = np.asarray(texture, dtype=np.float64)
    _, h, w = I_s.shape
    rng = np.random.default_rng([seed, 202])
    M_s = np.asarray(mask if mask is not None else object_mask(h, w, seed), dtype=np.float64)

    G_st, G_ts = grids_from_warp(spec, h, w)
    gst = G_st.coords.astype(np.float64)
    gts = G_ts.coords.astype(np.float64)
    in_st = G_st.in_range()
    in_ts = G_ts.in_range()

    I_t = bilinear_sample(I_s, gst)
    M_t = (bilinear_sample(M_s, gst)[0] >= 0.5) & in_st

    occ = _occluder(M_t, occlusion_fraction, rng)
    if occ.any():
        I_t[:, occ] = rng.uniform(0, 1, (3, 1))

    V_t = M_t & in_st & ~occ
    V_s = (M_s > 0) & in_ts & (bilinear_sample(V_t.astype(np.float64), gts)[0] >= 0.5)

    src_idx = np.flatnonzero(V_s)
    n = min(n_keypoints, len(src_idx))
    chosen = np.sort(rng.choice(src_idx, size=n, replace=False)) if n else np.zeros(0, dtype=int)
    ys, xs = np.divmod(chosen, w)
    tx = normalized_to_pixel(gts[0].ravel()[chosen], w)
    ty = normalized_to_pixel(gts[1].ravel()[chosen], h)
    kps = KeypointSet(np.stack([xs, ys, tx, ty], axis=1).astype(np.float64), np.ones(n, dtype=bool))

    return SyntheticPair(
        I_s=ImageBuffer(I_s),
        I_t=ImageBuffer(np.clip(I_t, 0, 1)),
        M_s=Mask(M_s),
        M_t=Mask(M_t.astype(np.float32)),
        G_st=G_st,
        G_ts=G_ts,
        V_s=Mask(V_s.astype(np.float32)),
        V_t=Mask(V_t.astype(np.float32)),
        keypoints=kps,
        seed=seed,
        occluder=Mask(occ.astype(np.float32)),
        spec=spec,
    )


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class SynthConfig:
    size: int = 64
    seed: int = 0
    texture_kinds: tuple[str, ...] = ("blobs", "value_noise")
    rotation_max_deg: float = 30.0
    scale_range: tuple[float, float] = (0.8, 1.25)
    translation_max: float = 0.2
    nonrigid_prob: float = 0.0
    nonrigid_max: float = 0.1
    occlusion_fraction: float = 0.0
    n_keypoints: int = 16
    bit_depth: int = 8

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SynthError(f"unknown synth config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("texture_kinds", "scale_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def _pair_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([base, index]).generate_state(1)[0])


def sample_warp_spec(config: SynthConfig, seed: int) -> WarpSpec:
    rng = np.random.default_rng([seed, 303])
    rot = math.radians(rng.uniform(-config.rotation_max_deg, config.rotation_max_deg))
    lo, hi = config.scale_range
    s = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    aniso = float(np.exp(rng.uniform(-0.05, 0.05)))
    scale = (float(np.clip(s * aniso, lo, hi)), float(np.clip(s / aniso, lo, hi)))
    trans = tuple(float(v) for v in rng.uniform(-config.translation_max, config.translation_max, 2))
    nonrigid = None
    if rng.uniform() < config.nonrigid_prob:
        k = int(rng.integers(4, 10))
        ctrl = rng.uniform(-0.7, 0.7, (k, 2))
        disp = rng.uniform(-1, 1, (k, 2))
        disp *= config.nonrigid_max * rng.uniform(0, 1, (k, 1)) / np.maximum(
            np.linalg.norm(disp, axis=1, keepdims=True), 1e-12)
        nonrigid = NonrigidSpec(tuple(map(tuple, ctrl.tolist())), tuple(map(tuple, disp.tolist())))
    return WarpSpec(rotation=rot, scale=scale, translation=trans, nonrigid=nonrigid, seed=seed)


def _record(config: SynthConfig, index: int) -> dict:
    seed = _pair_seed(config.seed, index)
    rng = np.random.default_rng([seed, 404])
    kind = config.texture_kinds[int(rng.integers(len(config.texture_kinds)))]
    return {
        "id": f"{index:05d}",
        "seed": seed,
        "texture_kind": kind,
        "occlusion_fraction": config.occlusion_fraction,
        "n_keypoints": config.n_keypoints,
        "spec": sample_warp_spec(config, seed).to_dict(),
    }


def pair_from_record(record: dict, size: int) -> SyntheticPair:
    tex = generate_texture(size, size, record["texture_kind"], record["seed"])
    return make_pair(
        tex, WarpSpec.from_dict(record["spec"]), record["occlusion_fraction"], record["seed"],
        n_keypoints=record.get("n_keypoints", 16),
    )


def _write_pair(pair: SyntheticPair, out_dir: Path, pid: str, bit_depth: int) -> None:
    save_image(pair.I_s, out_dir / f"{pid}_src.png", bit_depth)
    save_image(pair.I_t, out_dir / f"{pid}_tgt.png", bit_depth)
    save_mask(pair.M_s, out_dir / f"{pid}_mask_s.png")
    save_mask(pair.M_t, out_dir / f"{pid}_mask_t.png")
    save_mask(pair.V_s, out_dir / f"{pid}_vis_s.png")
    save_mask(pair.V_t, out_dir / f"{pid}_vis_t.png")
    save_grid(pair.G_st, out_dir / f"{pid}_gst.wgrd")
    save_grid(pair.G_ts, out_dir / f"{pid}_gts.wgrd")
    save_keypoints(pair.keypoints, out_dir / f"{pid}_kps.json")


def _write_all(manifest: dict, out_dir: Path) -> dict:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for rec in manifest["pairs"]:
            _write_pair(pair_from_record(rec, manifest["config"]["size"]), out_dir, rec["id"],
                        manifest["config"]["bit_depth"])
        with open(out_dir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out_dir}: {exc}") from exc
    return manifest


def generate_dataset(count: int, config: SynthConfig, out_dir) -> dict:
    """Write ``count`` pairs plus ``manifest.json`` to ``out_dir`` and return the manifest."""
    if count < 0:
        raise SynthError("count must be >= 0")
    manifest = {
        "version": 1,
        "config": config.to_dict(),
        "pairs": [_record(config, i) for i in range(count)],
    }
    return _write_all(manifest, Path(out_dir))


def regenerate(manifest: dict | str | Path, out_dir) -> dict:
    """Rebuild every file of a dataset from its manifest alone."""
    if not isinstance(manifest, dict):
        manifest = load_manifest(manifest)
    return _write_all(manifest, Path(out_dir))


def load_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    with open(path) as fh:
        return json.load(fh)


def load_pair(directory, pid: str) -> SyntheticPair:
    d = Path(directory)
    return SyntheticPair(
        I_s=load_image(d / f"{pid}_src.png"),
        I_t=load_image(d / f"{pid}_tgt.png"),
        M_s=load_mask(d / f"{pid}_mask_s.png"),
        M_t=load_mask(d / f"{pid}_mask_t.png"),
        G_st=load_grid(d / f"{pid}_gst.wgrd"),
        G_ts=load_grid(d / f"{pid}_gts.wgrd"),
        V_s=load_mask(d / f"{pid}_vis_s.png"),
        V_t=load_mask(d / f"{pid}_vis_t.png"),
        keypoints=load_keypoints(d / f"{pid}_kps.json"),
    )
