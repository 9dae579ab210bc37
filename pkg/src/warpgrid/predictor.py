"""A tiny encoder/decoder that predicts bidirectional grids and confidences.

The network sees both images (plus two coordinate channels) and emits
displacements from the identity grid together with confidence logits. The last
convolution starts at zero, so a fresh model predicts identity grids with
confidence 0.5 everywhere.

Training follows the staged recipe: dense supervision on synthetic pairs (i),
keypoint-only pairs interleaved 1:3 with synthetic ones (ii), the cycle losses
(iii) and finally the uncertainty loss (iv). The "real" pairs of stage ii are
held-out synthetic pairs that expose only their keypoints; no real photographs
are involved.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor
from .features import make_extractor
from .imagery import (BadMagicError, ConfidenceMap, GridFormatError, MissingFileError, SamplingGrid,
                      identity_grid)
from .losses import STAGES, LossWeights, ObjectiveInputs, loss_dense_supervised, total_objective
from .metrics import synthetic_dense
from .solver import Adam, NumericalError, confidence_from_logits, confidence_logit_grad
from .synth import SyntheticPair

__all__ = [
    "PredictorConfig",
    "TinyPredictor",
    "Prediction",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
    "TrainConfig",
    "TrainResult",
    "TrainingPair",
    "train_predictor",
    "evaluate_dense",
    "evaluate_held_out",
]

log = logging.getLogger(__name__)

CKPT_MAGIC = b"WCKP"
CKPT_VERSION = 1
STRIDE = 16


@dataclass(frozen=True)
class PredictorConfig:
    """Layer spec. Channel width doubles per encoder block up to ``8 * base_channels``."""

    in_channels: int = 3
    base_channels: int = 32
    depth: int = 4
    symmetric: bool = False
    slope: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.depth != 4:
            raise ValueError("depth is fixed at 4 stride-2 blocks")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be positive")

    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** min(k, 3) for k in range(self.depth)]

    @property
    def out_channels(self) -> int:
        # per direction: 2 displacement channels and 1 confidence logit
        return 3 if self.symmetric else 6


def _layer_shapes(cfg: PredictorConfig) -> list[tuple[str, tuple[int, ...]]]:
    """(name, shape) of every parameter buffer, in declaration order."""
    cin = 2 * cfg.in_channels + 2  # both images plus the coordinate planes
    widths = cfg.widths()
    shapes = []
    prev = cin
    for k, wk in enumerate(widths):
        shapes += [(f"enc{k}.w", (wk, prev, 3, 3)), (f"enc{k}.b", (wk,))]
        prev = wk
    # decoder j upsamples to the resolution of skip j (deepest first); skip 0 is the input
    skips = [cin] + widths[:-1]
    outs = list(reversed(widths[:-1])) + [cfg.base_channels]
    for j, (skip, wo) in enumerate(zip(reversed(skips), outs)):
        shapes += [(f"dec{j}.w", (wo, prev + skip, 3, 3)), (f"dec{j}.b", (wo,))]
        prev = wo
    shapes += [("head.w", (cfg.out_channels, prev, 3, 3)), ("head.b", (cfg.out_channels,))]
    return shapes


class TinyPredictor:
    """Parameter buffers plus the forward pass; all buffers are float32."""

    def __init__(self, config: PredictorConfig | None = None, params: dict[str, np.ndarray] | None = None):
        self.config = config or PredictorConfig()
        self.shapes = _layer_shapes(self.config)
        if params is None:
            params = self._init_params()
        for name, shape in self.shapes:
            if name not in params or params[name].shape != shape:
                raise ValueError(f"parameter {name} missing or not shaped {shape}")
        self.params = {name: np.asarray(params[name], dtype=np.float32) for name, _ in self.shapes}

    def _init_params(self) -> dict[str, np.ndarray]:
        rng = np.random.default_rng([self.config.seed, 77])
        out = {}
        for name, shape in self.shapes:
            if name.startswith("head") or name.endswith(".b"):
                out[name] = np.zeros(shape, dtype=np.float32)
            else:
                fan_in = shape[1] * shape[2] * shape[3]
                out[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        return out

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def _net(self, tape: Tape, p: dict[str, Tensor], x: Tensor) -> Tensor:
        slope = self.config.slope
        feats = [x]
        h = x
        for k in range(self.config.depth):
            h = tape.leaky_relu(tape.conv2d(h, p[f"enc{k}.w"], p[f"enc{k}.b"], stride=2, padding=1), slope)
            feats.append(h)
        for j in range(self.config.depth):
            skip = feats[self.config.depth - 1 - j]
            h = tape.concat([tape.upsample(h, 2), skip], axis=1)
            h = tape.leaky_relu(tape.conv2d(h, p[f"dec{j}.w"], p[f"dec{j}.b"]), slope)
        return tape.conv2d(h, p["head.w"], p["head.b"])

    def forward(self, tape: Tape, I_s: np.ndarray, I_t: np.ndarray, trainable: bool = False):
        """Run on batches (N, C, H, W); returns (params, raw) where raw is (N, 6, H, W).

        Channels of ``raw``: displacement of G_st (2), of G_ts (2), logit of C_s, logit of C_t.
        """
        n, c, h, w = I_s.shape
        if I_t.shape != I_s.shape:
            raise ValueError(f"image shapes differ: {I_s.shape} vs {I_t.shape}")
        if c != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} channels, got {c}")
        if h % STRIDE or w % STRIDE:
            raise ValueError(f"image size {h}x{w} is not divisible by {STRIDE}")
        make = tape.variable if trainable else tape.constant
        p = {k: make(v) for k, v in self.params.items()}
        coords = np.broadcast_to(identity_grid(h, w).coords, (n, 2, h, w))
        a = I_s.astype(np.float32)
        b = I_t.astype(np.float32)
        x_st = tape.constant(np.concatenate([a, b, coords], axis=1))
        if not self.config.symmetric:
            return p, self._net(tape, p, x_st)
        # one shared network maps (first, second) to the grid on the second image's lattice
        x_ts = tape.constant(np.concatenate([b, a, coords], axis=1))
        fwd = self._net(tape, p, x_st)   # G_st displacement, C_t logit
        bwd = self._net(tape, p, x_ts)   # G_ts displacement, C_s logit
        raw = tape.concat([
            tape.slice_channels(fwd, 0, 2), tape.slice_channels(bwd, 0, 2),
            tape.slice_channels(bwd, 2, 3), tape.slice_channels(fwd, 2, 3),
        ], axis=1)
        return p, raw


@dataclass
class Prediction:
    G_st: SamplingGrid
    G_ts: SamplingGrid
    C_s: ConfidenceMap
    C_t: ConfidenceMap


def _decode(raw: np.ndarray, h: int, w: int):
    ident = identity_grid(h, w).coords.astype(np.float64)
    raw = raw.astype(np.float64)
    return ident + raw[0:2], ident + raw[2:4], confidence_from_logits(raw[4]), confidence_from_logits(raw[5])


def predict(predictor: TinyPredictor, I_s, I_t) -> Prediction:
    """Grids and confidences for one pair of (C, H, W) images."""
    a = np.asarray(I_s, dtype=np.float32)[None]
    b = np.asarray(I_t, dtype=np.float32)[None]
    _, raw = predictor.forward(Tape(), a, b)
    if not np.all(np.isfinite(raw.value)):
        raise NumericalError("predictor produced non-finite activations")
    g_st, g_ts, c_s, c_t = _decode(raw.value[0], a.shape[2], a.shape[3])
    return Prediction(SamplingGrid(g_st), SamplingGrid(g_ts), ConfidenceMap(c_s), ConfidenceMap(c_t))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(predictor: TinyPredictor, path, extra: dict | None = None) -> None:
    """WCKP: magic, u32 version, u32 blob length, JSON layer spec, raw little-endian f32 buffers."""
    spec = {
        "config": asdict(predictor.config),
        "params": [[name, list(shape)] for name, shape in predictor.shapes],
        "extra": extra or {},
    }
    blob = json.dumps(spec, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for name, _ in predictor.shapes:
            fh.write(predictor.params[name].astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[TinyPredictor, dict]:
    """Return the predictor and the ``extra`` metadata stored with it."""
    p = Path(path)
    if not p.exists():
        raise MissingFileError(f"no such checkpoint: {p}")
    data = p.read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise BadMagicError(f"{p} is not a checkpoint (magic {data[:4]!r})")
    if len(data) < 12:
        raise GridFormatError(f"{p}: truncated header")
    version, n = struct.unpack("<II", data[4:12])
    if version != CKPT_VERSION:
        raise GridFormatError(f"{p}: unsupported checkpoint version {version}")
    spec = json.loads(data[12:12 + n].decode("utf-8"))
    cfg = PredictorConfig(**spec["config"])
    offset = 12 + n
    params = {}
    for name, shape in spec["params"]:
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(data):
            raise GridFormatError(f"{p}: truncated at parameter {name}")
        params[name] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        offset = end
    if offset != len(data):
        raise GridFormatError(f"{p}: {len(data) - offset} trailing bytes")
    return TinyPredictor(cfg, params), spec.get("extra", {})


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingPair:
    """One training example; ``keypoint_only`` hides the dense ground truth."""

    pair: SyntheticPair
    keypoint_only: bool = False

    def inputs(self, g_st, g_ts, c_s, c_t) -> ObjectiveInputs:
        p = self.pair
        dense = not self.keypoint_only
        return ObjectiveInputs(
            I_s=np.asarray(p.I_s, np.float64), I_t=np.asarray(p.I_t, np.float64),
            M_s=np.asarray(p.M_s, np.float64), M_t=np.asarray(p.M_t, np.float64),
            G_st=g_st, G_ts=g_ts, C_s=c_s, C_t=c_t,
            gt_st=np.asarray(p.G_st, np.float64) if dense else None,
            gt_ts=np.asarray(p.G_ts, np.float64) if dense else None,
            vis_s=np.asarray(p.V_s, np.float64) if dense else None,
            vis_t=np.asarray(p.V_t, np.float64) if dense else None,
            keypoints=p.keypoints if self.keypoint_only else None,
        )


@dataclass(frozen=True)
class TrainConfig:
    """Step budgets per stage and optimizer settings.

    Stage ``ii`` and later draw one dense synthetic pair for every three
    keypoint-only pairs when keypoint pairs are available.
    """

    budgets: dict = field(default_factory=lambda: {"i": 200, "ii": 100, "iii": 100, "iv": 100})
    learning_rate: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    extractor: str = "random_conv"
    smooth_mode: str = "displacement"
    conf_grad: str = "uncertainty"
    synthetic_ratio: tuple[int, int] = (1, 3)
    batch_size: int = 1
    eval_every: int = 50
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.budgets) - set(STAGES)
        if unknown:
            raise ValueError(f"unknown stages in budgets: {sorted(unknown)}")
        if any(int(n) < 0 for n in self.budgets.values()):
            raise ValueError("stage budgets must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainResult:
    predictor: TinyPredictor
    log: list[dict]
    checkpoints: dict[str, Path]


def evaluate_held_out(predictor: TinyPredictor, pairs: list[SyntheticPair]) -> dict[str, float | None]:
    """Mean Synthetic Dense and mean dense supervised loss (both directions summed) over ``pairs``."""
    scores, losses = [], []
    for p in pairs:
        pr = predict(predictor, p.I_s, p.I_t)
        s = synthetic_dense(pr.G_st, pr.G_ts, p.G_st, p.G_ts, p.I_s, p.I_t, p.V_s, p.V_t)
        if s is not None:
            scores.append(s)
        losses.append(loss_dense_supervised(pr.G_st.coords, p.G_st.coords, p.V_t).total
                      + loss_dense_supervised(pr.G_ts.coords, p.G_ts.coords, p.V_s).total)
    return {
        "synthetic_dense": float(np.mean(scores)) if scores else None,
        "dense_loss": float(np.mean(losses)) if losses else None,
    }


def evaluate_dense(predictor: TinyPredictor, pairs: list[SyntheticPair]) -> float | None:
    """Mean Synthetic Dense over ``pairs``."""
    return evaluate_held_out(predictor, pairs)["synthetic_dense"]


def _schedule(cfg: TrainConfig, n_dense: int, n_kp: int, rng) -> list[tuple[str, list[tuple[bool, int]]]]:
    """(stage, [(keypoint_only, index), ...]) for every optimizer step, in order."""
    n_syn, n_real = cfg.synthetic_ratio
    steps = []
    for stage in STAGES:
        k = 0
        for _ in range(int(cfg.budgets.get(stage, 0))):
            batch = []
            for _ in range(cfg.batch_size):
                use_kp = stage != "i" and n_kp > 0 and (k % (n_syn + n_real)) >= n_syn
                batch.append((use_kp, int(rng.integers(n_kp if use_kp else n_dense))))
                k += 1
            steps.append((stage, batch))
    return steps


def _pair_gradients(model: TinyPredictor, item: TrainingPair, stage: str, cfg: TrainConfig, extractor):
    """Loss report and parameter gradients for one pair."""
    a = np.asarray(item.pair.I_s, np.float32)[None]
    b = np.asarray(item.pair.I_t, np.float32)[None]
    h, w = a.shape[2:]
    tape = Tape()
    p, raw = model.forward(tape, a, b, trainable=True)
    g_st, g_ts, c_s, c_t = _decode(raw.value[0], h, w)
    rep = total_objective(stage, item.inputs(g_st, g_ts, c_s, c_t), cfg.weights, extractor,
                          cfg.smooth_mode, cfg.conf_grad)
    if not np.isfinite(rep.total):
        return rep, {}
    r = raw.value[0].astype(np.float64)
    g = np.concatenate([
        rep.grads["grid_st"], rep.grads["grid_ts"],
        confidence_logit_grad(r[4], rep.grads["conf_s"])[None],
        confidence_logit_grad(r[5], rep.grads["conf_t"])[None],
    ])[None].astype(np.float32)
    tape.backward(raw, g)
    return rep, {k: t.grad for k, t in p.items()}


def train_predictor(dense_pairs: list[SyntheticPair], keypoint_pairs: list[SyntheticPair] | None = None,
                    config: TrainConfig | None = None, predictor: TinyPredictor | None = None,
                    held_out: list[SyntheticPair] | None = None, checkpoint_dir=None,
                    log_path=None) -> TrainResult:
    """Run the staged recipe with ``batch_size`` pairs per optimizer step.

    Writes ``stage_<s>.wckp`` into ``checkpoint_dir`` after every stage with a
    nonzero budget and appends one JSON line per evaluation to ``log_path``.
    Raises ``NumericalError`` with the offending stage, step and loss terms on
    any non-finite loss.
    """
    cfg = config or TrainConfig()
    keypoint_pairs = keypoint_pairs or []
    if not dense_pairs:
        raise ValueError("training needs at least one dense synthetic pair")
    model = predictor or TinyPredictor(PredictorConfig(in_channels=np.asarray(dense_pairs[0].I_s).shape[0],
                                                       seed=cfg.seed))
    extractor = make_extractor(cfg.extractor, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 31])
    steps = _schedule(cfg, len(dense_pairs), len(keypoint_pairs), rng)
    opt = Adam(lr=cfg.learning_rate)
    records: list[dict] = []
    ckpts: dict[str, Path] = {}
    out_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "w") if log_path is not None else None

    def emit(rec):
        records.append(rec)
        if log_fh is not None:
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            log_fh.flush()

    def evaluate(stage, step, terms):
        rec = {"stage": stage, "step": step, "terms": terms}
        if held_out:
            ev = evaluate_held_out(model, held_out)
            rec["held_out_synthetic_dense"] = ev["synthetic_dense"]
            rec["held_out_dense_loss"] = ev["dense_loss"]
        emit(rec)

    try:
        running: dict[str, float] = {}
        for n, (stage, batch) in enumerate(steps):
            grads = {k: np.zeros_like(v) for k, v in model.params.items()}
            terms: dict[str, list[float]] = {}
            for use_kp, idx in batch:
                item = TrainingPair(keypoint_pairs[idx] if use_kp else dense_pairs[idx], keypoint_only=use_kp)
                rep, item_grads = _pair_gradients(model, item, stage, cfg, extractor)
                if not np.isfinite(rep.total):
                    raise NumericalError(f"non-finite loss at stage {stage}, step {n}: {rep.terms}", records)
                for k, v in item_grads.items():
                    grads[k] += v / len(batch)
                for k, v in rep.terms.items():
                    terms.setdefault(k, []).append(v)
            if not all(np.all(np.isfinite(v)) for v in grads.values()):
                raise NumericalError(f"non-finite gradient at stage {stage}, step {n}: {terms}", records)
            model.params = opt.step(model.params, grads)
            running = {k: float(np.mean(v)) for k, v in terms.items()}
            last_of_stage = n + 1 == len(steps) or steps[n + 1][0] != stage
            if (n + 1) % cfg.eval_every == 0 or last_of_stage:
                evaluate(stage, n + 1, dict(running))
            if last_of_stage:
                if out_dir is not None:
                    path = out_dir / f"stage_{stage}.wckp"
                    save_checkpoint(model, path, {"stage": stage, "step": n + 1})
                    ckpts[stage] = path
                log.info("stage %s finished at step %d", stage, n + 1)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(predictor=model, log=records, checkpoints=ckpts)
