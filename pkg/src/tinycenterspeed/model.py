"""The hourglass detector network, its heatmap losses and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .bev import BevConfig, double_velocity, flip_x, frame_pair, make_targets, rasterize, rotate, stack
from .decode import DecodeConfig, decode
from .domain import ReferenceLine, detection_to_global, global_to_local
from .evaluate import ErrorLog, gt_in_view

log = logging.getLogger(__name__)


class EmptyDataset(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


# --- losses ----------------------------------------------------------------

WEIGHT_FNS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "x": lambda h: h,
    "x2": lambda h: h**2,
    "x3": lambda h: h**3,
    "sqrt": np.sqrt,
    "0": np.zeros_like,
}


def _weights(h: np.ndarray, weight_fn: str) -> np.ndarray:
    # velocity and yaw targets are signed; the weight uses their magnitude
    return 1.0 + WEIGHT_FNS[weight_fn](np.abs(h))


def heatmap_loss(h: np.ndarray, h_hat: np.ndarray, weight_fn: str = "x") -> float:
    """sum over cells of (1 + f(|h|)) * (h - h_hat)^2."""
    h, h_hat = np.asarray(h, dtype=np.float64), np.asarray(h_hat, dtype=np.float64)
    if h.shape != h_hat.shape:
        raise nn.ShapeMismatch(f"{h.shape} vs {h_hat.shape}")
    return float(np.sum(_weights(h, weight_fn) * (h - h_hat) ** 2))


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.99
    weight_fn: str = "x"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.weight_fn not in WEIGHT_FNS:
            raise ValueError(f"weight_fn must be one of {sorted(WEIGHT_FNS)}")


def total_loss(target: np.ndarray, pred: np.ndarray, cfg: LossConfig = LossConfig()) -> float:
    """alpha * L_pos + (1 - alpha) * (L_vx + L_vy + L_yaw), averaged over a batch if given."""
    return total_loss_and_grad(target, pred, cfg)[0]


def total_loss_and_grad(target: np.ndarray, pred: np.ndarray, cfg: LossConfig = LossConfig()):
    target, pred = np.asarray(target, dtype=np.float64), np.asarray(pred, dtype=np.float64)
    if target.shape != pred.shape:
        raise nn.ShapeMismatch(f"{target.shape} vs {pred.shape}")
    batched = target.ndim == 4
    t = target if batched else target[None]
    p = pred if batched else pred[None]
    if t.shape[1] != 4:
        raise nn.ShapeMismatch(f"expected 4 heatmap channels, got {t.shape[1]}")
    n = t.shape[0]
    w = _weights(t, cfg.weight_fn)
    w[:, 0] *= cfg.alpha
    w[:, 1:] *= 1.0 - cfg.alpha
    diff = t - p
    loss = float(np.sum(w * diff**2)) / n
    grad = -2.0 * w * diff / n
    return loss, (grad if batched else grad[0])


# --- network ---------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    widths: tuple = (16, 32, 16)
    # 0: no skips, 1: encoder -> decoder skip, 2: also input occupancy -> output
    residuals: int = 1
    seed: int = 0


class TinyCenterSpeed:
    """Two stride-2 conv+BN+ReLU stages down, two stride-2 transposed convs up.

    Output channels are (position, v_x, v_y, yaw); only the position
    channel goes through a final ReLU.
    """

    IN_CHANNELS = 6
    OUT_CHANNELS = 4
    OCCUPANCY = [0, 3]

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        w1, w2, w3 = cfg.widths
        rng = np.random.default_rng([cfg.seed, 1])
        self.enc1 = nn.Conv2d(self.IN_CHANNELS, w1, rng, "enc1")
        self.bn1 = nn.BatchNorm2d(w1, "bn1")
        self.enc2 = nn.Conv2d(w1, w2, rng, "enc2")
        self.bn2 = nn.BatchNorm2d(w2, "bn2")
        self.dec1 = nn.ConvTranspose2d(w2, w3, rng, "dec1")
        self.dec2 = nn.ConvTranspose2d(w3, self.OUT_CHANNELS, rng, "dec2")
        self.skip1 = nn.Conv1x1(w1, w3, rng, "skip1") if cfg.residuals >= 1 else None
        self.skip2 = nn.Conv1x1(len(self.OCCUPANCY), self.OUT_CHANNELS, rng, "skip2") if cfg.residuals >= 2 else None
        self.relu1, self.relu2, self.relu3 = nn.ReLU(), nn.ReLU(), nn.ReLU()
        self._pos_mask = None

    @property
    def layers(self):
        return [layer for layer in (self.enc1, self.bn1, self.enc2, self.bn2, self.dec1, self.dec2,
                                    self.skip1, self.skip2) if layer is not None]

    def parameters(self) -> list[nn.Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def train(self, mode: bool = True):
        self.bn1.training = self.bn2.training = mode
        return self

    def eval(self):
        return self.train(False)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != self.IN_CHANNELS:
            raise nn.ShapeMismatch(f"expected (N, 6, k, k), got {x.shape}")
        e1 = self.relu1.forward(self.bn1.forward(self.enc1.forward(x)))
        e2 = self.relu2.forward(self.bn2.forward(self.enc2.forward(e1)))
        t1 = self.dec1.forward(e2)
        if self.skip1 is not None:
            t1 = t1 + self.skip1.forward(e1)
        d1 = self.relu3.forward(t1)
        out = self.dec2.forward(d1)
        if self.skip2 is not None:
            out = out + self.skip2.forward(x[:, self.OCCUPANCY])
        self._pos_mask = out[:, 0] > 0
        out[:, 0] = np.where(self._pos_mask, out[:, 0], 0.0)
        return out

    __call__ = forward

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._pos_mask is None:
            raise nn.MissingForwardCache("backward called before forward")
        dout = dout.copy()
        dout[:, 0] *= self._pos_mask
        dskip = self.skip2.backward(dout) if self.skip2 is not None else None
        dt1 = self.relu3.backward(self.dec2.backward(dout))
        de1 = self.enc2.backward(self.bn2.backward(self.relu2.backward(self.dec1.backward(dt1))))
        if self.skip1 is not None:
            de1 = de1 + self.skip1.backward(dt1)
        dx = self.enc1.backward(self.bn1.backward(self.relu1.backward(de1)))
        if dskip is not None:
            dx[:, self.OCCUPANCY] += dskip
        return dx

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # --- persistence -------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {p.name: p.data for p in self.parameters()}
        for bn in (self.bn1, self.bn2):
            state[f"{bn.name}.running_mean"] = bn.running_mean
            state[f"{bn.name}.running_var"] = bn.running_var
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for p in self.parameters():
            if state[p.name].shape != p.shape:
                raise nn.ShapeMismatch(f"{p.name}: {state[p.name].shape} vs {p.shape}")
            p.data = np.array(state[p.name], dtype=np.float64)
            p.grad = np.zeros_like(p.data)
        for bn in (self.bn1, self.bn2):
            bn.running_mean = np.array(state[f"{bn.name}.running_mean"], dtype=np.float64)
            bn.running_var = np.array(state[f"{bn.name}.running_var"], dtype=np.float64)

    def copy(self) -> "TinyCenterSpeed":
        other = TinyCenterSpeed(self.cfg)
        other.load_state_dict({k: v.copy() for k, v in self.state_dict().items()})
        return other


def save_checkpoint(model: TinyCenterSpeed, bev: BevConfig, path) -> None:
    tensors = {
        "meta.widths": np.array(model.cfg.widths, dtype=np.float64),
        "meta.residuals": np.array([model.cfg.residuals], dtype=np.float64),
        "meta.bev": np.array([bev.k, bev.p, bev.sigma_gt]),
    }
    tensors.update(model.state_dict())
    with open(path, "wb") as fh:
        nn.write_tensors(fh, tensors)


def load_checkpoint(path) -> tuple[TinyCenterSpeed, BevConfig]:
    with open(path, "rb") as fh:
        tensors = nn.read_tensors(fh)
    try:
        widths = tuple(int(v) for v in tensors.pop("meta.widths"))
        residuals = int(tensors.pop("meta.residuals")[0])
        k, p, sigma = tensors.pop("meta.bev")
    except KeyError as exc:
        raise nn.CheckpointError(f"checkpoint lacks {exc}") from None
    model = TinyCenterSpeed(ModelConfig(widths, residuals))
    model.load_state_dict(tensors)
    # meta values went through float32
    return model.eval(), BevConfig(int(k), round(float(p), 6), round(float(sigma), 6))


# --- samples ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 100
    lr: float = 5e-5
    seed: int = 0
    aug_rot: bool = True
    aug_flip: bool = True
    aug_speed: bool = True
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


def local_opps(record) -> list:
    return [global_to_local(o, record.ego) for o in record.opps]


def make_sample(seq, t: int, bev: BevConfig, rng: np.random.Generator | None = None,
                cfg: TrainConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Input (6, k, k) and target (4, k, k) for frame ``t`` of a sequence.

    With an ``rng`` and a config the augmentations are drawn in order:
    frame skip, rotation, flip.
    """
    skip = phi = False
    flip = False
    if rng is not None and cfg is not None:
        skip = cfg.aug_speed and t >= 2 and rng.random() < 0.5
        phi = rng.uniform(-math.pi / 4, math.pi / 4) if cfg.aug_rot and rng.random() < 0.5 else 0.0
        flip = cfg.aug_flip and rng.random() < 0.5
    a, b = frame_pair(len(seq), t, skip)
    prev, curr = seq[a].scan, seq[b].scan
    opps = local_opps(seq[b])
    if skip:
        opps = double_velocity(opps)
    if phi:
        prev, _ = rotate(prev, [], phi)
        curr, opps = rotate(curr, opps, phi)
    inp = stack(rasterize(prev, bev), rasterize(curr, bev))
    targets, _ = make_targets(opps, bev)
    if flip:
        inp, targets, opps = flip_x(inp, targets, opps)
    return inp, targets.as_array()


def split_train_val(sequences, val_fraction: float):
    """Contiguous split: the trailing fraction of frames becomes validation."""
    total = sum(len(s) for s in sequences)
    cut = int(round(total * (1.0 - val_fraction)))
    train, val, seen = [], [], 0
    for seq in sequences:
        if seen + len(seq) <= cut:
            train.append(seq)
        elif seen >= cut:
            val.append(seq)
        else:
            train.append(seq[: cut - seen])
            val.append(seq[cut - seen:])
        seen += len(seq)
    return [s for s in train if len(s) >= 2], [s for s in val if len(s) >= 2]


# --- training --------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_rmse_s: float = math.nan
    val_rmse_d: float = math.nan
    val_rmse_vs: float = math.nan
    val_rmse_vd: float = math.nan
    val_missed: int = 0


@dataclass
class TrainResult:
    model: TinyCenterSpeed
    metrics: list = field(default_factory=list)
    best_epoch: int = 0


def predict_batches(model: TinyCenterSpeed, inputs: np.ndarray, batch_size: int = 64) -> np.ndarray:
    model.eval()
    return np.concatenate([model.forward(inputs[i:i + batch_size]) for i in range(0, len(inputs), batch_size)])


def validate(model: TinyCenterSpeed, frames, inputs: np.ndarray, bev: BevConfig, ref: ReferenceLine,
             dcfg: DecodeConfig = DecodeConfig(), gate: float = 1.0) -> ErrorLog:
    out = predict_batches(model, inputs)
    errors = ErrorLog()
    for rec, h in zip(frames, out):
        dets = [detection_to_global(d, rec.ego) for d in decode(h, dcfg, bev)]
        errors.add_frame(dets, gt_in_view(rec, bev), ref, gate)
    return errors


def _rmse_or_nan(values) -> float:
    return float(np.sqrt(np.mean(np.square(values)))) if values else math.nan


def train(sequences, train_cfg: TrainConfig = TrainConfig(), loss_cfg: LossConfig = LossConfig(),
          bev: BevConfig = BevConfig(), ref: ReferenceLine | None = None,
          model_cfg: ModelConfig | None = None, dcfg: DecodeConfig = DecodeConfig(),
          on_epoch: Callable[[EpochMetrics], None] | None = None) -> TrainResult:
    """Minibatch Adam training with augmentations and best-validation selection.

    Validation needs ``ref`` for the Frenet metrics; without it the last
    epoch's model is returned.
    """
    sequences = [list(s) for s in sequences if len(s) >= 2]
    if not sequences:
        raise EmptyDataset("no sequence with at least two frames")
    train_seqs, val_seqs = split_train_val(sequences, train_cfg.val_fraction)
    if not train_seqs:
        raise EmptyDataset("training split is empty")
    model_cfg = model_cfg or ModelConfig(seed=train_cfg.seed)
    model = TinyCenterSpeed(model_cfg)
    opt = nn.Adam(model.parameters(), lr=train_cfg.lr)
    rng = np.random.default_rng([train_cfg.seed, 2])

    samples = [(si, t) for si, s in enumerate(train_seqs) for t in range(1, len(s))]
    val_frames = [s[t] for s in val_seqs for t in range(1, len(s))]
    val_inputs = np.stack([make_sample(s, t, bev)[0] for s in val_seqs for t in range(1, len(s))]) \
        if val_frames else None

    result = TrainResult(model)
    best_score, best_state = math.inf, None
    for epoch in range(1, train_cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(samples))
        losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            batch = [samples[i] for i in order[start:start + train_cfg.batch_size]]
            if len(batch) < 2 and len(order) > 1:
                continue  # batchnorm statistics need more than one sample
            xs, ys = zip(*(make_sample(train_seqs[si], t, bev, rng, train_cfg) for si, t in batch))
            x, y = np.stack(xs), np.stack(ys)
            pred = model.forward(x)
            loss, grad = total_loss_and_grad(y, pred, loss_cfg)
            if not math.isfinite(loss):
                norms = {p.name: float(np.linalg.norm(p.data)) for p in model.parameters()}
                raise NonFiniteLoss(f"loss {loss} at epoch {epoch}, batch {[samples[i] for i in order[start:start + 4]]}"
                                    f"..., parameter norms {norms}")
            model.zero_grad()
            model.backward(grad)
            opt.step()
            losses.append(loss)
        m = EpochMetrics(epoch, float(np.mean(losses)) if losses else math.nan)
        if val_frames and ref is not None:
            errs = validate(model, val_frames, val_inputs, bev, ref, dcfg)
            m.val_rmse_s, m.val_rmse_d = _rmse_or_nan(errs.s), _rmse_or_nan(errs.d)
            m.val_rmse_vs, m.val_rmse_vd = _rmse_or_nan(errs.vs), _rmse_or_nan(errs.vd)
            m.val_missed = errs.missed
            miss_rate = errs.missed / max(errs.gts, 1)
            score = m.val_rmse_s + m.val_rmse_d + m.val_rmse_vs + m.val_rmse_vd + 10.0 * miss_rate
            if math.isfinite(score) and score < best_score:
                best_score, best_state, result.best_epoch = score, model.copy().state_dict(), epoch
        result.metrics.append(m)
        log.info("epoch %d loss %.4f val s %.3f d %.3f vs %.3f vd %.3f missed %d", epoch, m.train_loss,
                 m.val_rmse_s, m.val_rmse_d, m.val_rmse_vs, m.val_rmse_vd, m.val_missed)
        if on_epoch:
            on_epoch(m)
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        result.best_epoch = train_cfg.epochs
    model.eval()
    return result


METRIC_COLUMNS = ["epoch", "train_loss", "val_rmse_s", "val_rmse_d", "val_rmse_vs", "val_rmse_vd"]


def write_metrics_csv(metrics: Sequence[EpochMetrics], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for m in metrics:
            w.writerow([m.epoch] + [repr(float(getattr(m, c))) for c in METRIC_COLUMNS[1:]])


# --- config file -----------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """Everything the ``train`` command can be configured with."""

    k: int = 64
    p: float = 0.1
    sigma_gt: float = 2.0
    alpha: float = 0.99
    weight_fn: str = "x"
    batch_size: int = 32
    epochs: int = 100
    lr: float = 5e-5
    seed: int = 0
    aug_rot: bool = True
    aug_flip: bool = True
    aug_speed: bool = True
    residuals: int = 1

    def bev(self) -> BevConfig:
        return BevConfig(self.k, self.p, self.sigma_gt)

    def loss(self) -> LossConfig:
        return LossConfig(self.alpha, self.weight_fn)

    def training(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.epochs, self.lr, self.seed, self.aug_rot, self.aug_flip,
                           self.aug_speed)

    def model(self) -> ModelConfig:
        return ModelConfig(residuals=self.residuals, seed=self.seed)

    def validate(self) -> "RunConfig":
        self.bev(), self.loss(), self.training()
        if self.residuals not in (0, 1, 2):
            raise ValueError("residuals must be 0, 1 or 2")
        return self

    def dumps(self) -> str:
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in asdict(self).items())


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_value(raw: str, kind):
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw)


def parse_config(text: str, base: RunConfig = RunConfig()) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: type(getattr(base, f.name)) for f in fields(RunConfig)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        try:
            updates[key] = _parse_value(raw, types[key])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return replace(base, **updates).validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text())
