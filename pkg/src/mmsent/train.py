"""Training loops and run artifacts.

Losses live here together with the two loops (branch pretraining and
fused-model training), metric evaluation helpers, loss-curve records,
and the attention heatmap export.  Optimizer mechanics are in
``optim``; metric arithmetic is in ``metrics``.

Reproducibility contract: a (seed, corpus, config) triple fully
determines every artifact.  Epoch shuffles and dropout masks draw from
generators seeded by (seed, epoch), and reported epoch losses average
the per-item values in canonical dataset order, so the curve does not
depend on batch order even at the last floating-point bit.
"""

import dataclasses
import json
import os

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DataError, DimensionError
from .layers import DenseParams, dense_forward
from .metrics import compute_metrics
from .optim import Adam
from .tensor import Tape, Tensor

LOSS_KINDS = ("xent", "mae")


def one_hot(label: int, n_classes: int) -> np.ndarray:
    if not 0 <= label < n_classes:
        raise ContractError(f"label {label} outside 0..{n_classes - 1}")
    v = np.zeros(n_classes)
    v[label] = 1.0
    return v


def cross_entropy_loss(probs: Tensor, gold: int) -> Tensor:
    """Negative log probability of the gold class."""
    if probs.ndim != 1:
        raise DimensionError(f"need a 1-D distribution, got shape {probs.shape}")
    if not 0 <= gold < probs.shape[0]:
        raise ContractError(f"gold class {gold} outside 0..{probs.shape[0] - 1}")
    picked = T.reshape(T.narrow(probs, 0, gold, 1), ())
    return T.neg(T.log(picked))


def mae_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute deviation; the subgradient at exact ties is 0."""
    target = T.as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(
            f"prediction shape {pred.shape} does not match target {target.shape}"
        )
    return T.mean(T.abs_(T.sub(pred, target)))


@dataclasses.dataclass
class TrainConfig:
    """Knobs for one training run.

    loss "xent" scores the softmax output against the gold index;
    "mae" scores it against the one-hot target.  freeze_epochs only
    matters for fused training: that many initial epochs update the
    fusion head alone before branch parameters unfreeze.
    """

    batch_size: int = 32
    epochs: int = 50
    lr: float = 1e-3
    seed: int = 0
    loss: str = "xent"
    runs: int = 3
    val_fraction: float = 0.1
    freeze_epochs: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0.0:
            raise ConfigError(f"learning rate must be nonnegative, got {self.lr}")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.runs < 1:
            raise ConfigError(f"runs must be >= 1, got {self.runs}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(
                f"validation fraction must be in (0, 1), got {self.val_fraction}"
            )
        if not 0 <= self.freeze_epochs <= self.epochs:
            raise ConfigError(
                f"freeze epochs must be in 0..{self.epochs}, got {self.freeze_epochs}"
            )


class BranchHead:
    """Linear classifier turning one branch vector into class
    probabilities; used for unimodal pretraining and evaluation."""

    def __init__(self, width: int, n_classes: int, rng):
        if n_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {n_classes}")
        self.n_classes = n_classes
        self.dense = DenseParams(width, n_classes, rng)

    def parameters(self, prefix=""):
        return self.dense.parameters(prefix + "head/")

    def forward(self, vec: Tensor) -> Tensor:
        return T.softmax(dense_forward(self.dense, vec))


def _item_loss(probs: Tensor, gold: int, kind: str) -> Tensor:
    if kind == "xent":
        return cross_entropy_loss(probs, gold)
    return mae_loss(probs, one_hot(gold, probs.shape[0]))


def _batch_mean(losses) -> Tensor:
    total = losses[0]
    for item in losses[1:]:
        total = T.add(total, item)
    return total * (1.0 / len(losses))


def _curve_line(epoch, split, losses, preds, golds, n_classes):
    report = compute_metrics(preds, golds, n_classes)
    return {
        "epoch": int(epoch),
        "split": split,
        "loss": float(np.mean(losses)),
        "accuracy": report.accuracy,
        "macro_f1": report.macro_f1,
    }


@dataclasses.dataclass
class TrainResult:
    records: list
    best_state: dict
    final_state: dict
    best_epoch: int


def _snapshot(trainable: dict, extra_state=None) -> dict:
    state = {name: t.data.copy() for name, t in trainable.items()}
    extras = extra_state() if extra_state is not None else {}
    for name, arr in extras.items():
        if name in state:
            raise ContractError(f"state name '{name}' collides with a parameter")
        state[name] = arr.copy()
    return state


def train_branch(forward_fn, trainable: dict, head: BranchHead,
                 train_items, val_items, cfg: TrainConfig,
                 extra_state=None) -> TrainResult:
    """Pretrain one branch against its own classifier head.

    forward_fn(item, mode, rng) must return the branch's 1-D utterance
    vector.  trainable maps names to the branch's weight tensors; head
    parameters join them under "head/".  extra_state, if given, is a
    zero-argument callable returning the current non-parameter arrays
    (batch-norm running statistics); it is re-read at every snapshot
    because those arrays are rebound in place of being mutated.
    Returns per-epoch curve records plus snapshots of the
    best-validation and final states.
    """
    if not train_items:
        raise DataError("training split is empty")
    params = dict(trainable)
    for name, t in head.parameters().items():
        if name in params:
            raise ContractError(f"parameter name '{name}' collides with the head")
        params[name] = t
    opt = Adam(params, lr=cfg.lr)
    records = []
    best = {"loss": np.inf, "epoch": 0, "state": _snapshot(params, extra_state)}

    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_items))
        drop_rng = np.random.default_rng([cfg.seed, epoch, 1])
        losses = np.zeros(len(train_items))
        preds = np.zeros(len(train_items), dtype=int)
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            with Tape() as tape:
                batch_losses = []
                for i in batch:
                    item = train_items[i]
                    probs = head.forward(
                        forward_fn(item, "train", drop_rng))
                    batch_losses.append(_item_loss(probs, item.gold, cfg.loss))
                    losses[i] = batch_losses[-1].item()
                    preds[i] = int(np.argmax(probs.data))
                tape.backward(_batch_mean(batch_losses))
            opt.step()
            opt.zero_grad()
        golds = [item.gold for item in train_items]
        records.append(_curve_line(epoch, "train", losses, preds, golds,
                                   head.n_classes))
        if val_items:
            val_losses, val_preds, val_golds = _eval_branch(
                forward_fn, head, val_items, cfg.loss)
            records.append(_curve_line(epoch, "val", val_losses, val_preds,
                                       val_golds, head.n_classes))
            if records[-1]["loss"] < best["loss"]:
                best = {"loss": records[-1]["loss"], "epoch": epoch,
                        "state": _snapshot(params, extra_state)}
    final_state = _snapshot(params, extra_state)
    if not val_items:
        best = {"loss": np.inf, "epoch": cfg.epochs - 1, "state": final_state}
    return TrainResult(records, best["state"], final_state, best["epoch"])


def _eval_branch(forward_fn, head, items, loss_kind):
    losses = np.zeros(len(items))
    preds = np.zeros(len(items), dtype=int)
    for i, item in enumerate(items):
        probs = head.forward(forward_fn(item, "eval", None))
        losses[i] = _item_loss(probs, item.gold, loss_kind).item()
        preds[i] = int(np.argmax(probs.data))
    return losses, preds, [item.gold for item in items]


def evaluate_branch(forward_fn, head: BranchHead, items, run_id=0):
    """Eval-mode metrics for one pretrained branch."""
    if not items:
        raise DataError("evaluation split is empty")
    _, preds, golds = _eval_branch(forward_fn, head, items, "xent")
    return compute_metrics(preds, golds, head.n_classes, run_id=run_id)


def _as_video_list(videos):
    if isinstance(videos, dict):
        return list(videos.items())
    return list(videos)


def train_fusion(model, train_videos, val_videos, cfg: TrainConfig) -> TrainResult:
    """Train the fused model over whole videos.

    Batches count videos; the loss is the mean over every utterance in
    the batch.  For the first cfg.freeze_epochs epochs only the fusion
    parameters move, then the branch parameters unfreeze (their Adam
    moments start cold at that point).
    """
    train_videos = _as_video_list(train_videos)
    val_videos = _as_video_list(val_videos)
    if not train_videos:
        raise DataError("training split is empty")
    fusion_opt = Adam(model.fusion_parameters(), lr=cfg.lr)
    branch_params = {name: t for name, t in model.parameters().items()
                     if not name.startswith("fusion/")}
    branch_opt = Adam(branch_params, lr=cfg.lr)
    n_utt = sum(len(items) for _, items in train_videos)
    offsets = np.cumsum([0] + [len(items) for _, items in train_videos])
    records = []
    best = {"loss": np.inf, "epoch": 0, "state": model.state_arrays()}
    best["state"] = {k: v.copy() for k, v in best["state"].items()}

    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_videos))
        drop_rng = np.random.default_rng([cfg.seed, epoch, 1])
        frozen = epoch < cfg.freeze_epochs
        losses = np.zeros(n_utt)
        preds = np.zeros(n_utt, dtype=int)
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            with Tape() as tape:
                batch_losses = []
                for v in batch:
                    _, items = train_videos[v]
                    outs = model.forward_video(items, mode="train", rng=drop_rng)
                    for j, (item, out) in enumerate(zip(items, outs)):
                        loss = cross_entropy_loss(out.probabilities, item.gold)
                        batch_losses.append(loss)
                        losses[offsets[v] + j] = loss.item()
                        preds[offsets[v] + j] = out.label
                tape.backward(_batch_mean(batch_losses))
            fusion_opt.step()
            if not frozen:
                branch_opt.step()
            fusion_opt.zero_grad()
            branch_opt.zero_grad()
        golds = [item.gold for _, items in train_videos for item in items]
        records.append(_curve_line(epoch, "train", losses, preds, golds,
                                   model.cfg.n_classes))
        if val_videos:
            report, val_losses = _eval_fusion(model, val_videos)
            records.append({
                "epoch": int(epoch), "split": "val",
                "loss": float(np.mean(val_losses)),
                "accuracy": report.accuracy, "macro_f1": report.macro_f1,
            })
            if records[-1]["loss"] < best["loss"]:
                best = {"loss": records[-1]["loss"], "epoch": epoch,
                        "state": {k: v.copy()
                                  for k, v in model.state_arrays().items()}}
    final_state = {k: v.copy() for k, v in model.state_arrays().items()}
    if not val_videos:
        best = {"loss": np.inf, "epoch": cfg.epochs - 1, "state": final_state}
    return TrainResult(records, best["state"], final_state, best["epoch"])


def _eval_fusion(model, videos):
    preds, golds, losses = [], [], []
    for _, items in videos:
        for item, out in zip(items, model.predict_video(items)):
            losses.append(cross_entropy_loss(out.probabilities, item.gold).item())
            preds.append(out.label)
            golds.append(item.gold)
    return compute_metrics(preds, golds, model.cfg.n_classes), np.array(losses)


def evaluate_fusion(model, videos, run_id=0):
    """Eval-mode metrics plus the per-video predictions."""
    videos = _as_video_list(videos)
    if not videos:
        raise DataError("evaluation split is empty")
    predictions = [(video, model.predict_video(items)) for video, items in videos]
    preds, golds = [], []
    for _, outs in predictions:
        for out in outs:
            preds.append(out.label)
            golds.append(out.gold)
    report = compute_metrics(preds, golds, model.cfg.n_classes, run_id=run_id)
    return report, predictions


def write_curve(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_curve(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def render_weight_block(weights) -> str:
    """Comma-joined weights at 6 decimals, forced to sum to exactly
    1.000000 by largest-remainder rounding (ties to the lowest index)."""
    w = np.asarray(weights, dtype=np.float64)
    units = np.floor(w * 1e6).astype(np.int64)
    remainders = w * 1e6 - units
    missing = int(round(1e6 - units.sum()))
    if missing > 0:
        for i in np.argsort(-remainders, kind="stable")[:missing]:
            units[i] += 1
    elif missing < 0:
        for i in np.argsort(remainders, kind="stable")[:-missing]:
            units[i] -= 1
    return ",".join(f"{u / 1e6:.6f}" for u in units)


HEATMAP_HEADER = "# utterance\tgold\tpred\taudio_attention\ttext_attention"


def export_heatmaps(model, videos, out_dir):
    """One tabular text file per video: a row per utterance holding the
    id, gold and predicted labels, and both attention weight blocks."""
    videos = _as_video_list(videos)
    if not videos:
        raise DataError("no videos to export")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for video, items in videos:
        outs = model.predict_video(items)
        path = os.path.join(out_dir, f"{video}.tsv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(HEATMAP_HEADER + "\n")
            for out in outs:
                gold = "-" if out.gold is None else str(int(out.gold))
                fh.write("\t".join((
                    out.utterance_id, gold, str(out.label),
                    render_weight_block(out.audio_weights),
                    render_weight_block(out.text_weights),
                )) + "\n")
        paths.append(path)
    return paths


def read_heatmap(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip() or line.startswith("#"):
                continue
            uid, gold, pred, audio, text = line.rstrip("\n").split("\t")
            rows.append({
                "utterance": uid,
                "gold": None if gold == "-" else int(gold),
                "pred": int(pred),
                "audio": np.array([float(x) for x in audio.split(",")]),
                "text": np.array([float(x) for x in text.split(",")]),
            })
    return rows
