"""Training loop: siamese batches, Adam, per-epoch checkpoints, TSV log.

Each step stacks the a-crops and b-crops of a batch into one forward pass
(both halves share convolution weights and batch-norm statistics), computes
the multi-window index-proposal loss between the two response halves, and
applies Adam.  An L2 term (on convolution kernels only) enters the gradient,
not the reported loss.

Reproducibility contract: the epoch shuffle is derived from (seed, epoch)
alone, checkpoints carry Adam moments, step counter, and batch-norm running
statistics, so resuming from epoch k replays the identical byte stream a
full run would have produced.
"""

import os
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from keynet import autodiff as ad
from keynet import checkpoint as ckpt_mod
from keynet import evaluate as eval_mod
from keynet import loss as loss_mod
from keynet import model as model_mod


class TrainingDivergedError(RuntimeError):
    """Raised when the loss becomes non-finite; carries the batch location."""

    def __init__(self, epoch, step, pair_indices, message):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.pair_indices = list(pair_indices)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 20
    l2_weight: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    val_every: int = 0
    val_top_k: int = 100
    val_eps: float = 0.4

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0 or self.lr_decay_every < 1:
            raise ValueError("learning_rate must be > 0 and lr_decay_every >= 1")

    def to_mapping(self):
        return {f.name: repr(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_mapping(cls, mapping):
        kwargs = {}
        for f in fields(cls):
            if f.name in mapping:
                kwargs[f.name] = f.type(mapping[f.name])
        return cls(**kwargs)


def learning_rate_for_epoch(base_lr, epoch, decay_factor=0.5, decay_every=20):
    """Step schedule on 1-based epochs: epochs 1..20 full rate, 21..40 halved."""
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    return base_lr * decay_factor ** ((epoch - 1) // decay_every)


def epoch_permutation(seed, epoch, n):
    """Shuffle order for one epoch, a pure function of (seed, epoch)."""
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(
            m={k: np.zeros_like(p.value) for k, p in params.items()},
            v={k: np.zeros_like(p.value) for k, p in params.items()},
            step=0,
        )


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update, in place on params; state.step increments first."""
    state.step += 1
    t = state.step
    for name, var in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        var.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(var.value.dtype)


def _stack_batch(pairs):
    images = np.concatenate(
        [np.stack([p.image_a for p in pairs]), np.stack([p.image_b for p in pairs])], axis=0
    )
    h_ab = np.stack([p.h_ab for p in pairs])
    h_ba = np.stack([p.h_ba for p in pairs])
    mask_a = np.stack([p.mask_a[0] for p in pairs])
    mask_b = np.stack([p.mask_b[0] for p in pairs])
    return images, h_ab, h_ba, mask_a, mask_b


def batch_loss_and_grads(weights, config, pairs, l2_weight=0.0, training=True,
                         update_running=False):
    """Forward + backward on one siamese batch.

    Returns (total loss float, per-window-size losses, grads dict).  The L2
    term on convolution kernels is added to the gradients only.
    """
    images, h_ab, h_ba, mask_a, mask_b = _stack_batch(pairs)
    n = len(pairs)
    # backward accumulates into grad buffers; stale gradients from earlier
    # steps must not leak into this batch
    for var in weights.params.values():
        var.zero_grad()
    with ad.Tape() as tape:
        out = model_mod.forward_batch(
            images, weights, config, training=training, update_running=update_running
        )
        b2, c, h, w = out.value.shape
        resp = ad.reshape(out, (b2, h, w))
        resp_a = ad.batch_slice(resp, 0, n)
        resp_b = ad.batch_slice(resp, n, 2 * n)
        total, report = loss_mod.msip_loss_batch(resp_a, resp_b, h_ab, h_ba, mask_a, mask_b, config)
        tape.backward(total)
    grads = {name: np.array(var.grad, copy=True) for name, var in weights.params.items()}
    if l2_weight:
        for name, var in weights.params.items():
            if name.endswith(".kernel"):
                grads[name] += l2_weight * var.value
    return float(total.value[0]), report, grads


@dataclass
class TrainResult:
    weights: object
    config: object
    train_config: TrainConfig
    history: list
    checkpoint_paths: list
    log_path: str
    final_epoch: int


def _checkpoint_extras(train_config, epoch, adam):
    extra_config = {f"train.{k}": v for k, v in train_config.to_mapping().items()}
    extra_config["train.epoch"] = str(epoch)
    extra_config["train.adam_step"] = str(adam.step)
    extra = {}
    for name, arr in adam.m.items():
        extra[f"adam.m.{name}"] = arr
    for name, arr in adam.v.items():
        extra[f"adam.v.{name}"] = arr
    return extra_config, extra


def _restore_adam(weights, data):
    adam = AdamState.for_params(weights.params)
    adam.step = int(data.extra_config.get("train.adam_step", "0"))
    for name in weights.params:
        m_key, v_key = f"adam.m.{name}", f"adam.v.{name}"
        if m_key in data.extra_tensors:
            adam.m[name] = data.extra_tensors[m_key].astype(
                weights.params[name].value.dtype, copy=True
            )
        if v_key in data.extra_tensors:
            adam.v[name] = data.extra_tensors[v_key].astype(
                weights.params[name].value.dtype, copy=True
            )
    return adam


def checkpoint_name(epoch):
    return f"epoch_{epoch:03d}.knet"


def train(dataset, out_dir, config=None, train_config=None, val_pairs=None,
          resume_from=None, init_seed=0, progress=None):
    """Run the full loop; returns a TrainResult.

    dataset: non-empty list of PairSamples.  resume_from: checkpoint path;
    the model configuration stored there wins over the config argument.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training dataset is empty")
    train_config = train_config or TrainConfig()
    os.makedirs(out_dir, exist_ok=True)

    start_epoch = 1
    if resume_from is not None:
        data = ckpt_mod.load_checkpoint(resume_from)
        weights, config = data.weights, data.config
        adam = _restore_adam(weights, data)
        start_epoch = int(data.extra_config.get("train.epoch", "0")) + 1
        stored = {
            k[len("train.") :]: v
            for k, v in data.extra_config.items()
            if k.startswith("train.") and k not in ("train.epoch", "train.adam_step")
        }
        if stored:
            resumed = TrainConfig.from_mapping(stored)
            train_config = replace(resumed, epochs=train_config.epochs)
    else:
        config = config or model_mod.KeyNetConfig()
        weights = model_mod.init_weights(config, seed=init_seed)
        adam = AdamState.for_params(weights.params)

    log_path = os.path.join(out_dir, "train_log.tsv")
    level_cols = "\t".join(f"loss_w{n}" for n in config.msip_window_sizes)
    mode = "a" if (resume_from is not None and os.path.exists(log_path)) else "w"
    history = []
    checkpoint_paths = []
    t0 = time.perf_counter()
    with open(log_path, mode, encoding="ascii") as log:
        if mode == "w":
            log.write(f"epoch\tstep\tlr\tloss\t{level_cols}\tval_repeatability\twall_time_s\n")
        for epoch in range(start_epoch, train_config.epochs + 1):
            lr = learning_rate_for_epoch(
                train_config.learning_rate,
                epoch,
                train_config.lr_decay_factor,
                train_config.lr_decay_every,
            )
            perm = epoch_permutation(train_config.seed, epoch, len(dataset))
            step = 0
            for lo in range(0, len(dataset), train_config.batch_size):
                batch_idx = perm[lo : lo + train_config.batch_size]
                batch = [dataset[i] for i in batch_idx]
                step += 1
                total, report, grads = batch_loss_and_grads(
                    weights, config, batch,
                    l2_weight=train_config.l2_weight,
                    training=True, update_running=True,
                )
                if not np.isfinite(total):
                    dump = os.path.join(out_dir, "diverged.txt")
                    with open(dump, "w", encoding="ascii") as fh:
                        fh.write(f"epoch\t{epoch}\nstep\t{step}\n")
                        fh.write("pair_indices\t" + " ".join(str(i) for i in batch_idx) + "\n")
                        fh.write("loss\t" + repr(total) + "\n")
                        for n, _lam, lv in report.per_level:
                            fh.write(f"loss_w{n}\t{lv!r}\n")
                    raise TrainingDivergedError(
                        epoch, step, batch_idx,
                        f"non-finite loss at epoch {epoch} step {step}; see {dump}",
                    )
                adam_step(
                    weights.params, grads, adam, lr,
                    train_config.beta1, train_config.beta2, train_config.adam_eps,
                )
                levels = "\t".join(f"{v:.8e}" for _n, _lam, v in report.per_level)
                wall = time.perf_counter() - t0
                log.write(
                    f"{epoch}\t{step}\t{lr:.6e}\t{total:.8e}\t{levels}\t\t{wall:.3f}\n"
                )
                history.append(
                    {"epoch": epoch, "step": step, "loss": total,
                     "per_level": [v for _n, _lam, v in report.per_level], "lr": lr}
                )
                if progress is not None:
                    progress(epoch, step, total)
            val_rep = None
            if val_pairs and train_config.val_every and epoch % train_config.val_every == 0:
                val_rep, _ = eval_mod.evaluate_pairs(
                    val_pairs, weights, config,
                    top_k=train_config.val_top_k,
                    eps_max=train_config.val_eps,
                    l_mode=True,
                )
                empty_levels = "\t".join("" for _ in config.msip_window_sizes)
                wall = time.perf_counter() - t0
                log.write(f"{epoch}\tval\t\t\t{empty_levels}\t{val_rep:.4f}\t{wall:.3f}\n")
                history.append({"epoch": epoch, "step": "val", "val_repeatability": val_rep})
            log.flush()
            extra_config, extra = _checkpoint_extras(train_config, epoch, adam)
            path = os.path.join(out_dir, checkpoint_name(epoch))
            ckpt_mod.save_checkpoint(
                weights, config, path, extra_config=extra_config, extra_tensors=extra
            )
            checkpoint_paths.append(path)
    return TrainResult(
        weights=weights,
        config=config,
        train_config=train_config,
        history=history,
        checkpoint_paths=checkpoint_paths,
        log_path=log_path,
        final_epoch=train_config.epochs,
    )
