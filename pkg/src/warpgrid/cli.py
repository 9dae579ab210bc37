"""``warpgrid`` command line: synth, solve, train, eval and viz.

Every command reads an optional JSON config (``--config``); flags override the
matching config keys one to one. Exit codes: 0 success, 2 usage or config
error, 3 I/O error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .imagery import (ImageryError, KeypointSet, SamplingGrid, load_grid, load_image, load_mask, normalized_to_pixel,
                      pixel_to_normalized, save_grid, save_image)
from .losses import LossWeights, cycle_images
from .metrics import EvalReport, calibration, end_point_error, pck, synthetic_dense, write_csv
from .solver import DirectSolveConfig, NumericalError, direct_solve
from .synth import SynthConfig, generate_dataset, load_manifest, load_pair
from .warp import bilinear_sample

log = logging.getLogger("warpgrid")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

LOCK_NAME = ".warpgrid.lock"
ERROR_SCALE = 0.5  # cycle errors at or above this value saturate the heatmap


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config


@dataclass
class RunConfig:
    seed: int = 0
    size: int = 64
    count: int = 10
    occlusion_fraction: float = 0.0
    nonrigid_prob: float = 0.0
    solver: str = "direct"
    iterations: int | None = None
    levels: int = 4
    checkpoint: str | None = None
    base_channels: int = 32
    budgets: dict = field(default_factory=lambda: {"i": 200, "ii": 100, "iii": 100, "iv": 100})
    weights: dict = field(default_factory=dict)
    extractor: str = "random_conv"
    smooth_mode: str = "displacement"
    alphas: list = field(default_factory=lambda: [0.1, 0.05, 0.01])

    def __post_init__(self):
        if self.count < 0:
            raise ConfigError("count must be >= 0")
        if self.size < 8:
            raise ConfigError("size must be >= 8")
        if self.solver not in ("direct", "predictor"):
            raise ConfigError(f"solver must be 'direct' or 'predictor', got {self.solver!r}")
        if self.iterations is not None and self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not self.alphas or any(a <= 0 for a in self.alphas):
            raise ConfigError("alphas must be a nonempty list of positive numbers")
        try:
            self.loss_weights()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def loss_weights(self) -> LossWeights:
        return LossWeights.from_dict(self.weights)

    def solve_config(self) -> DirectSolveConfig:
        cfg = DirectSolveConfig(levels=self.levels, weights=self.loss_weights(), extractor=self.extractor,
                                extractor_seed=self.seed, smooth_mode=self.smooth_mode)
        if self.iterations is not None:
            n = self.iterations
            cfg = replace(cfg, coarse_iterations=n, schedule=tuple((s, n) for s, _ in cfg.schedule))
        return cfg


# ---------------------------------------------------------------------------
# colormap: 256 RGB entries interpolated from fixed anchors (dark blue -> red -> yellow -> white)

_ANCHORS = np.array([
    [0.00, 0, 0, 32],
    [0.25, 64, 16, 128],
    [0.50, 200, 40, 64],
    [0.75, 250, 170, 20],
    [1.00, 255, 255, 224],
])
COLORMAP = np.stack(
    [np.rint(np.interp(np.linspace(0, 1, 256), _ANCHORS[:, 0], _ANCHORS[:, k])) for k in (1, 2, 3)], axis=1
).astype(np.uint8)


def heatmap(values, scale: float = ERROR_SCALE) -> np.ndarray:
    """Map non-negative values to (3, H, W) colors in [0, 1]; 0 maps to entry 0."""
    idx = np.rint(np.clip(np.asarray(values, np.float64) / scale, 0.0, 1.0) * 255).astype(np.int64)
    return COLORMAP[idx].transpose(2, 0, 1).astype(np.float64) / 255.0


def checkerboard_blend(a, b, tile: int = 8) -> np.ndarray:
    _, h, w = a.shape
    yy, xx = np.mgrid[0:h, 0:w]
    sel = ((yy // tile + xx // tile) % 2).astype(bool)
    return np.where(sel, b, a)


# ---------------------------------------------------------------------------
# helpers


class _Lock:
    """Run-level lock file; refuses to share an output directory between runs."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / LOCK_NAME

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise OSError(f"{self.path} exists: another run is writing to this directory") from exc
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _workers() -> int:
    raw = os.environ.get("WARPGRID_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"WARPGRID_THREADS must be an integer, got {raw!r}") from exc
    return max(1, n)


def _write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class PairFiles:
    pid: str
    I_s: np.ndarray
    I_t: np.ndarray
    M_s: np.ndarray
    M_t: np.ndarray


def _pairs_from_args(args) -> list[PairFiles]:
    if args.src or args.tgt:
        if not (args.src and args.tgt):
            raise ConfigError("--src and --tgt must be given together")
        I_s = np.asarray(load_image(args.src), np.float64)
        I_t = np.asarray(load_image(args.tgt), np.float64)
        hw = I_s.shape[1:]
        M_s = np.asarray(load_mask(args.mask_s), np.float64) if args.mask_s else np.ones(hw)
        M_t = np.asarray(load_mask(args.mask_t), np.float64) if args.mask_t else np.ones(hw)
        return [PairFiles("pair", I_s, I_t, M_s, M_t)]
    if not args.data:
        raise ConfigError("give either --data DIR or --src/--tgt images")
    ids = [args.id] if args.id else [rec["id"] for rec in load_manifest(args.data)["pairs"]]
    out = []
    for pid in ids:
        d = Path(args.data)
        out.append(PairFiles(
            pid,
            np.asarray(load_image(d / f"{pid}_src.png"), np.float64),
            np.asarray(load_image(d / f"{pid}_tgt.png"), np.float64),
            np.asarray(load_mask(d / f"{pid}_mask_s.png"), np.float64),
            np.asarray(load_mask(d / f"{pid}_mask_t.png"), np.float64),
        ))
    return out


def _load_prediction(pred_dir: Path, pid: str):
    g_st = load_grid(pred_dir / f"{pid}_gst.wgrd")
    g_ts = load_grid(pred_dir / f"{pid}_gts.wgrd")
    conf = []
    for side in ("s", "t"):
        p = pred_dir / f"{pid}_conf_{side}.png"
        conf.append(np.asarray(load_image(p), np.float64)[0] if p.exists() else None)
    return g_st, g_ts, conf[0], conf[1]


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, out_dir: Path) -> Path:
    sc = SynthConfig(size=cfg.size, seed=cfg.seed, occlusion_fraction=cfg.occlusion_fraction,
                     nonrigid_prob=cfg.nonrigid_prob)
    manifest = generate_dataset(cfg.count, sc, out_dir)
    print(f"wrote {len(manifest['pairs'])} pairs ({cfg.size}x{cfg.size}) to {out_dir}")
    return out_dir / "manifest.json"


def _solve_one(cfg: RunConfig, pair: PairFiles, out_dir: Path) -> str:
    if cfg.solver == "predictor":
        from .predictor import load_checkpoint, predict
        if not cfg.checkpoint:
            raise ConfigError("solver 'predictor' needs a checkpoint")
        model, _ = load_checkpoint(cfg.checkpoint)
        pr = predict(model, pair.I_s, pair.I_t)
        g_st, g_ts, c_s, c_t, trace = pr.G_st, pr.G_ts, pr.C_s, pr.C_t, []
    else:
        res = direct_solve(pair.I_s, pair.I_t, pair.M_s, pair.M_t, cfg.solve_config())
        g_st, g_ts, c_s, c_t, trace = res.G_st, res.G_ts, res.C_s, res.C_t, res.trace
    save_grid(g_st, out_dir / f"{pair.pid}_gst.wgrd")
    save_grid(g_ts, out_dir / f"{pair.pid}_gts.wgrd")
    save_image(np.asarray(c_s)[None], out_dir / f"{pair.pid}_conf_s.png", 8)
    save_image(np.asarray(c_t)[None], out_dir / f"{pair.pid}_conf_t.png", 8)
    _write_json(trace, out_dir / f"{pair.pid}_trace.json")
    return pair.pid


def cmd_solve(cfg: RunConfig, pairs: list[PairFiles], out_dir: Path) -> list[str]:
    n = min(_workers(), len(pairs))
    if n <= 1:
        done = [_solve_one(cfg, p, out_dir) for p in pairs]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            done = list(pool.map(_solve_one, [cfg] * len(pairs), pairs, [out_dir] * len(pairs)))
    print(f"solved {len(done)} pair(s) into {out_dir}")
    return done


def cmd_train(cfg: RunConfig, data: Path, keypoint_data: Path | None, heldout: Path | None,
              out_dir: Path) -> dict:
    from .predictor import PredictorConfig, TinyPredictor, TrainConfig, train_predictor

    def pairs(d):
        return [load_pair(d, rec["id"]) for rec in load_manifest(d)["pairs"]]

    dense = pairs(data)
    if not dense:
        raise ConfigError(f"{data}: dataset is empty")
    kp = pairs(keypoint_data) if keypoint_data else []
    held = pairs(heldout) if heldout else []
    weights = cfg.loss_weights()
    tc = TrainConfig(budgets=dict(cfg.budgets), learning_rate=weights.learning_rate, weights=weights,
                     extractor=cfg.extractor, smooth_mode=cfg.smooth_mode, seed=cfg.seed)
    model = TinyPredictor(PredictorConfig(in_channels=np.asarray(dense[0].I_s).shape[0],
                                          base_channels=cfg.base_channels, seed=cfg.seed))
    res = train_predictor(dense, kp, tc, model, held, checkpoint_dir=out_dir,
                          log_path=out_dir / "metrics.jsonl")
    print(f"trained {model.n_parameters()} parameters; checkpoints: "
          + ", ".join(p.name for p in res.checkpoints.values()))
    return {k: str(v) for k, v in res.checkpoints.items()}


def _keypoint_predictions(g_ts: SamplingGrid, kps: KeypointSet, h: int, w: int):
    """Predicted target pixels for each source keypoint, read from G_ts."""
    if len(kps) == 0:
        return np.zeros((0, 2))
    xs = pixel_to_normalized(kps.points[:, 0], w)
    ys = pixel_to_normalized(kps.points[:, 1], h)
    where = np.stack([xs, ys])[:, None, :]
    hit = bilinear_sample(g_ts.coords, where)[:, 0, :]
    return np.stack([normalized_to_pixel(hit[0], w), normalized_to_pixel(hit[1], h)], axis=1)


def cmd_eval(cfg: RunConfig, data: Path, pred_dir: Path, out_dir: Path) -> EvalReport:
    manifest = load_manifest(data)
    rows = []
    hits = {str(a): [] for a in cfg.alphas}
    dense, epes, cals = [], [], []
    n_pix = n_kp = 0
    for rec in manifest["pairs"]:
        pid = rec["id"]
        pair = load_pair(data, pid)
        g_st, g_ts, c_s, c_t = _load_prediction(pred_dir, pid)
        I_s, I_t = np.asarray(pair.I_s, np.float64), np.asarray(pair.I_t, np.float64)
        _, h, w = I_s.shape
        row = {"id": pid}
        kps = pair.keypoints
        pred_pts = _keypoint_predictions(g_ts, kps, h, w)
        gt_pts = kps.points[:, 2:4]
        for a in cfg.alphas:
            v = pck(pred_pts, gt_pts, a, h, w, kps.visible) if len(kps) else None
            row[f"pck@{a}"] = v
            if v is not None:
                d = np.linalg.norm(pred_pts[kps.visible] - gt_pts[kps.visible], axis=1)
                hits[str(a)].extend((d <= a * max(h, w)).tolist())
        n_kp += int(kps.visible.sum())
        sd = synthetic_dense(g_st, g_ts, pair.G_st, pair.G_ts, I_s, I_t, pair.V_s, pair.V_t)
        e = [end_point_error(g_st.coords, pair.G_st.coords, pair.V_t, h, w),
             end_point_error(g_ts.coords, pair.G_ts.coords, pair.V_s, h, w)]
        e = [x for x in e if x is not None]
        epe = float(np.mean(e)) if e else None
        cal = None
        if c_s is not None and c_t is not None:
            _, _, cyc_s, cyc_t = cycle_images(I_s, I_t, g_st.coords, g_ts.coords)
            err_s = np.sqrt(((cyc_s - I_s) ** 2).sum(axis=0))
            err_t = np.sqrt(((cyc_t - I_t) ** 2).sum(axis=0))
            cal = calibration(np.concatenate([c_s.ravel(), c_t.ravel()]),
                              np.concatenate([err_s.ravel(), err_t.ravel()]),
                              np.concatenate([np.asarray(pair.M_s).ravel(), np.asarray(pair.M_t).ravel()]))
        row.update(synthetic_dense=sd, epe=epe, calibration=cal)
        rows.append(row)
        n_pix += int(np.asarray(pair.V_s).sum() + np.asarray(pair.V_t).sum())
        for lst, v in ((dense, sd), (epes, epe), (cals, cal)):
            if v is not None:
                lst.append(v)

    report = EvalReport(
        pck={k: (float(np.mean(v)) if v else None) for k, v in hits.items()},
        synthetic_dense=float(np.mean(dense)) if dense else None,
        epe=float(np.mean(epes)) if epes else None,
        calibration=float(np.mean(cals)) if cals else None,
        n_pixels=n_pix,
        n_keypoints=n_kp,
        per_pair=rows,
    )
    report.to_json(out_dir / "eval.json")
    write_csv(rows, out_dir / "eval.csv")
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "per_pair"}, sort_keys=True))
    return report


VIZ_FILES = ("warped.png", "checker.png", "cycle_error.png", "confidence.png")


def cmd_viz(pair: PairFiles, pred_dir: Path, out_dir: Path) -> list[Path]:
    """Write <id>_warped, _checker, _cycle_error and _confidence PNGs.

    The cycle-error heatmap shows the target-side round-trip error through
    ``COLORMAP`` with ``ERROR_SCALE`` as full scale; the confidence image is
    Ĉ_t as 8-bit grey.
    """
    g_st, g_ts, _, c_t = _load_prediction(pred_dir, pair.pid)
    warped, _, _, cyc_t = cycle_images(pair.I_s, pair.I_t, g_st.coords, g_ts.coords)
    err = np.sqrt(((cyc_t - pair.I_t) ** 2).sum(axis=0)) * (pair.M_t > 0)
    conf = c_t if c_t is not None else np.ones(pair.M_t.shape)
    paths = [out_dir / f"{pair.pid}_{name}" for name in VIZ_FILES]
    save_image(np.clip(warped, 0, 1), paths[0])
    save_image(checkerboard_blend(np.clip(warped, 0, 1), pair.I_t), paths[1])
    save_image(heatmap(err), paths[2])
    save_image(conf[None], paths[3])
    print("wrote " + ", ".join(p.name for p in paths))
    return paths


# ---------------------------------------------------------------------------
# argument parsing


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _alpha_list(text):
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if not vals or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("alphas must be positive")
    return vals


# flag dest -> RunConfig key
_OVERRIDES = ("seed", "size", "count", "occlusion_fraction", "nonrigid_prob", "solver", "iterations",
              "levels", "checkpoint", "base_channels", "extractor", "smooth_mode", "alphas")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="warpgrid", description="Dense matching with bidirectional grids.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON run config; flags override its keys")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")

    def pair_inputs(p):
        p.add_argument("--data", help="dataset directory with manifest.json")
        p.add_argument("--id", help="solve or render a single pair id from --data")
        p.add_argument("--src", help="source PNG (instead of --data)")
        p.add_argument("--tgt", help="target PNG")
        p.add_argument("--mask-s", dest="mask_s", help="source mask PNG (default: all ones)")
        p.add_argument("--mask-t", dest="mask_t", help="target mask PNG (default: all ones)")

    p = sub.add_parser("synth", help="generate synthetic pairs with ground-truth grids")
    common(p)
    p.add_argument("--count", type=_nonneg_int)
    p.add_argument("--size", type=int)
    p.add_argument("--occlusion-fraction", dest="occlusion_fraction", type=float)
    p.add_argument("--nonrigid-prob", dest="nonrigid_prob", type=float)

    p = sub.add_parser("solve", help="estimate grids and confidences for pairs")
    common(p)
    pair_inputs(p)
    p.add_argument("--solver", choices=("direct", "predictor"))
    p.add_argument("--iterations", type=_nonneg_int, help="set every direct-solve stage budget")
    p.add_argument("--levels", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--extractor", choices=("identity", "random_conv", "pyramid"))
    p.add_argument("--smooth-mode", dest="smooth_mode", choices=("displacement", "literal"))

    p = sub.add_parser("train", help="train the predictor through stages i-iv")
    common(p)
    p.add_argument("--data", required=True, help="dense synthetic training set")
    p.add_argument("--keypoint-data", dest="keypoint_data", help="keypoint-only set used from stage ii on")
    p.add_argument("--heldout", help="held-out set scored after every evaluation")
    p.add_argument("--base-channels", dest="base_channels", type=int)

    p = sub.add_parser("eval", help="score predictions against a dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True, help="directory holding <id>_gst.wgrd etc.")
    p.add_argument("--alphas", type=_alpha_list, help="comma-separated PCK thresholds")

    p = sub.add_parser("viz", help="render warped image, checkerboard, cycle error and confidence")
    common(p)
    pair_inputs(p)
    p.add_argument("--pred", required=True)
    return parser


def _config_from_args(args) -> RunConfig:
    base = RunConfig.load(args.config) if args.config else RunConfig()
    data = asdict(base)
    for key in _OVERRIDES:
        v = getattr(args, key, None)
        if v is not None:
            data[key] = v
    return RunConfig.from_dict(data)


def run(args) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out)
    with _Lock(out):
        if args.command == "synth":
            cmd_synth(cfg, out)
        elif args.command == "solve":
            cmd_solve(cfg, _pairs_from_args(args), out)
        elif args.command == "train":
            cmd_train(cfg, Path(args.data), Path(args.keypoint_data) if args.keypoint_data else None,
                      Path(args.heldout) if args.heldout else None, out)
        elif args.command == "eval":
            cmd_eval(cfg, Path(args.data), Path(args.pred), out)
        elif args.command == "viz":
            pairs = _pairs_from_args(args)
            if len(pairs) != 1:
                raise ConfigError("viz renders one pair: pass --id or --src/--tgt")
            cmd_viz(pairs[0], Path(args.pred), out)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except NumericalError as exc:
        print(f"warpgrid: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ImageryError, OSError) as exc:
        print(f"warpgrid: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"warpgrid: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
