"""Loss, optimizer, training loop and evaluation driver."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as tn
from .data_io import Checkpoint, check_feature_dims, save_checkpoint
from .errors import ConfigError, DataError, TrainingError
from .metrics import evaluate_split
from .model import as_tensors, dxformer_forward, init_params, predict_labels
from .tensor import Tensor

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    learning_rate: float = 0.0005
    batch_size: int = 1
    epochs: int = 10
    smooth_weight: float = 0.15
    clip: float = 4.0
    seed: int = 0
    checkpoint_every: int = 0  # 0 -> only the final checkpoint
    max_steps: int = 0  # 0 -> no cap
    workers: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.smooth_weight < 0:
            raise ConfigError(f"smooth_weight must be >= 0, got {self.smooth_weight}")
        if self.clip <= 0:
            raise ConfigError(f"clip must be > 0, got {self.clip}")
        for name in ("batch_size", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("epochs", "checkpoint_every", "max_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    @classmethod
    def preset(cls, name, **overrides):
        """``small``: lr 5e-4, batch 1. ``large``: lr 1e-3, batch 8."""
        table = {"small": dict(learning_rate=0.0005, batch_size=1), "large": dict(learning_rate=0.001, batch_size=8)}
        if name not in table:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(table)}")
        return cls(**{**table[name], **overrides})


# ---------------------------------------------------------------------------
# loss


def seg_loss(stage_logits, labels, pad_mask=None, smooth_weight=0.15, clip=4.0):
    """Sum over stages of frame cross-entropy + ``smooth_weight`` * truncated MSE.

    The smoothing term averages ``min(clip**2, (log p_t - log p_{t-1})**2)``
    over classes and consecutive real-frame pairs, with the previous frame's
    log-probabilities treated as constants.
    """
    labels = np.asarray(labels, dtype=np.int64)
    first = stage_logits[0]
    c, t = first.shape
    mask = np.ones(t, dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    if labels.shape != (t,):
        raise DataError(f"labels have shape {labels.shape}, logits imply ({t},)")
    real = labels[mask]
    if real.size == 0:
        raise DataError("no real frames to compute the loss on")
    if real.min() < 0 or real.max() >= c:
        raise DataError(f"label out of range [0, {c}): min {real.min()}, max {real.max()}")
    dtype = first.dtype
    target = np.zeros((c, t), dtype=dtype)
    idx = np.nonzero(mask)[0]
    target[labels[idx], idx] = -1.0 / idx.size
    target = Tensor(target)
    pairs = mask[1:] & mask[:-1]
    n_pairs = int(pairs.sum())
    pair_w = None
    if smooth_weight > 0 and n_pairs:
        pair_w = Tensor(np.broadcast_to(pairs.astype(dtype) / (c * n_pairs), (c, t - 1)).copy())
    total = None
    for logits in stage_logits:
        logp = tn.log_softmax(logits, axis=0)
        loss = tn.sum(tn.mul(logp, target))
        if pair_w is not None:
            diff = tn.sub(tn.narrow(logp, 1, 1, t), tn.narrow(tn.detach(logp), 1, 0, t - 1))
            tmse = tn.sum(tn.mul(tn.clamp_max(tn.mul(diff, diff), clip * clip), pair_w))
            loss = tn.add(loss, tn.scale(tmse, smooth_weight))
        total = loss if total is None else tn.add(total, loss)
    return total


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({n: np.zeros_like(p) for n, p in params.items()}, {n: np.zeros_like(p) for n, p in params.items()})


def adam_step(params, grads, state, lr):
    """Bias-corrected Adam update. Replaces the arrays in ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    c1 = 1.0 - ADAM_BETA1 ** state.step
    c2 = 1.0 - ADAM_BETA2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return params, state


# ---------------------------------------------------------------------------
# training


def _validate(samples, model_cfg):
    if not samples:
        raise DataError("training set is empty")
    d = check_feature_dims(samples)
    if d != model_cfg.input_dim:
        raise DataError(f"features have D={d} but the model expects input_dim={model_cfg.input_dim}")
    for s in samples:
        if s.labels.size and (s.labels.min() < 0 or s.labels.max() >= model_cfg.num_classes):
            raise DataError(f"{s.id}: labels outside [0, {model_cfg.num_classes})")


def sample_gradients(params, model_cfg, sample, train_cfg, rng=None):
    """Loss, per-parameter gradients and #correct frames for one video (``rng`` drives dropout)."""
    tparams = as_tensors(params, requires_grad=True)
    feats = sample.features
    if feats.dtype != next(iter(params.values())).dtype:
        feats = Tensor(feats.data, dtype=next(iter(params.values())).dtype)
    stages = dxformer_forward(feats, tparams, model_cfg, rng=rng)
    loss = seg_loss([s.logits for s in stages], sample.labels, None, train_cfg.smooth_weight, train_cfg.clip)
    tn.backward(loss)
    grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in tparams.items()}
    correct = int((predict_labels(stages) == sample.labels).sum())
    return loss.item(), grads, correct


def epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, epoch]).permutation(n)


def _train_meta(train_cfg, epoch):
    meta = {f"train.{k}": str(v) for k, v in asdict(train_cfg).items()}
    meta["epoch"] = str(epoch)
    return meta


def _checkpoint(model_cfg, params, state, train_cfg, epoch):
    extra = {}
    for n in params:
        extra[f"adam.m/{n}"] = state.m[n]
        extra[f"adam.v/{n}"] = state.v[n]
    return Checkpoint(model_cfg, dict(params), state.step, _train_meta(train_cfg, epoch), extra)


def train(samples, model_cfg, train_cfg, out_dir=None, resume=None, on_epoch=None):
    """Train from scratch (or from ``resume``, a Checkpoint) and return ``(checkpoint, epoch_logs)``.

    Gradients of a batch are computed per video (optionally on
    ``train_cfg.workers`` threads) and summed in sample-index order before
    the Adam step, so results do not depend on the worker count.
    Checkpoints go to ``out_dir/epoch{N}.dxck`` and ``out_dir/final.dxck``.
    """
    _validate(samples, model_cfg)
    if resume is not None:
        if resume.cfg != model_cfg:
            raise ConfigError("resume checkpoint was trained with a different model config")
        params = {n: np.array(p, dtype=np.float32) for n, p in resume.params.items()}
        state = OptimizerState(
            {n: np.array(resume.extra[f"adam.m/{n}"]) for n in params},
            {n: np.array(resume.extra[f"adam.v/{n}"]) for n in params},
            resume.step,
        )
        start_epoch = int(resume.meta.get("epoch", 0))
    else:
        params = init_params(model_cfg)
        state = OptimizerState.zeros_like(params)
        start_epoch = 0
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    logs = []
    bs = train_cfg.batch_size
    pool = ThreadPoolExecutor(train_cfg.workers) if train_cfg.workers > 1 else None
    epoch = start_epoch
    try:
        for epoch in range(start_epoch, train_cfg.epochs):
            if train_cfg.max_steps and state.step >= train_cfg.max_steps:
                break
            order = epoch_order(train_cfg.seed, epoch, len(samples))
            loss_sum, correct, frames, seen = 0.0, 0, 0, 0
            for lo in range(0, len(order), bs):
                if train_cfg.max_steps and state.step >= train_cfg.max_steps:
                    break
                idx = order[lo:lo + bs]
                batch = [samples[i] for i in idx]
                step = state.step

                def job(i):
                    rng = np.random.default_rng([train_cfg.seed, step, int(i)])
                    return sample_gradients(params, model_cfg, samples[i], train_cfg, rng)

                results = list(pool.map(job, idx)) if pool else [job(i) for i in idx]
                grads = {n: np.zeros_like(p) for n, p in params.items()}
                for loss, g, c in results:
                    for n in grads:
                        grads[n] += g[n]
                    loss_sum += loss
                    correct += c
                    seen += 1
                for s in batch:
                    frames += s.T
                scale = 1.0 / len(batch)
                grads = {n: g * scale for n, g in grads.items()}
                adam_step(params, grads, state, train_cfg.learning_rate)
            record = {
                "epoch": epoch + 1,
                "step": state.step,
                "loss": loss_sum / max(seen, 1),
                "train_acc": 100.0 * correct / max(frames, 1),
            }
            logs.append(record)
            log.info("epoch=%d step=%d loss=%.6f train_acc=%.2f", record["epoch"], record["step"],
                     record["loss"], record["train_acc"])
            if on_epoch is not None:
                on_epoch(record)
            if out_dir is not None and train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0:
                save_checkpoint(Path(out_dir) / f"epoch{epoch + 1}.dxck",
                                _checkpoint(model_cfg, params, state, train_cfg, epoch + 1))
    finally:
        if pool is not None:
            pool.shutdown()
    done = logs[-1]["epoch"] if logs else start_epoch
    ckpt = _checkpoint(model_cfg, params, state, train_cfg, done)
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "final.dxck", ckpt)
    return ckpt, logs


# ---------------------------------------------------------------------------
# inference / evaluation


def _check_compatible(samples, cfg):
    d = check_feature_dims(samples)
    if d is not None and d != cfg.input_dim:
        raise ConfigError(f"features have D={d} but the checkpoint expects input_dim={cfg.input_dim}")


def predict_samples(samples, ckpt):
    _check_compatible(samples, ckpt.cfg)
    params = as_tensors(ckpt.params)
    return [predict_labels(dxformer_forward(s.features, params, ckpt.cfg)) for s in samples]


def evaluate(samples, ckpt, edit_mode="per_video", ignore_label=None):
    """Final-stage predictions scored against the samples' labels."""
    _check_compatible(samples, ckpt.cfg)
    for s in samples:
        if s.labels.size and s.labels.max() >= ckpt.cfg.num_classes:
            raise ConfigError(f"{s.id}: label {s.labels.max()} outside the checkpoint's {ckpt.cfg.num_classes} classes")
    preds = predict_samples(samples, ckpt)
    return evaluate_split(zip(preds, [s.labels for s in samples]), edit_mode, ignore_label)


def train_config_from_meta(meta):
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {k[len("train."):]: v for k, v in meta.items() if k.startswith("train.")}
    return TrainConfig(**{k: types[k](v) for k, v in values.items() if k in types})
