"""Training loop, per-frame normalization, and model checkpointing.

Frames are normalized by the 99th percentile of the blurred input's magnitude;
the same scale divides the target and is re-applied at inference. Training
runs on full frames, shuffled mini-batches per epoch from a seeded Rng, and
returns the weights at the best validation loss. Gradients within a batch are
accumulated over fixed-order micro-batches, so results are bit-reproducible
for a fixed BLAS thread count.

Checkpoints are one SPDB tensor per parameter plus a JSON sidecar. Resumable
trainer state (running weights, Adam moments, shuffle Rng, best-so-far
weights) is kept separately in float64 so an interrupted run continues exactly
where an uninterrupted one would be.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from . import nn, tensors

NORM_PERCENTILE = 99.0
STATE_FILE = "train_state.npz"


class TrainingError(RuntimeError):
    pass


class NanLossError(TrainingError):
    def __init__(self, epoch, batch):
        super().__init__(f"NaN loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    micro_batch: int = 4
    norm_percentile: float = NORM_PERCENTILE


def frame_scale(inp_complex, percentile=NORM_PERCENTILE):
    """Normalization scale of one frame: the given percentile of the input
    magnitude (falls back to 1 for an all-zero frame)."""
    s = float(np.percentile(np.abs(inp_complex), percentile))
    return s if s > 0 else 1.0


def prepare_sample(inp_complex, tgt_complex, percentile=NORM_PERCENTILE):
    """Complex frame pair -> normalized 2-channel arrays plus the scale."""
    s = frame_scale(inp_complex, percentile)
    x = tensors.complex_to_channels(inp_complex) / s
    y = tensors.complex_to_channels(tgt_complex) / s
    return x, y, s


def apply_model(model, inp_complex, percentile=NORM_PERCENTILE):
    """Run inference on one complex frame, undoing the normalization."""
    s = frame_scale(inp_complex, percentile)
    x = tensors.complex_to_channels(inp_complex)[None] / s
    y = model.predict(x)[0] * s
    return tensors.channels_to_complex(y)


def _batch_pass(model, xs, ys, micro_batch):
    """Mean loss and mean gradients over one mini-batch, accumulated over
    fixed-order micro-batches to bound memory."""
    n = len(xs)
    total_loss = 0.0
    grads_acc = None
    for i in range(0, n, micro_batch):
        xb = np.stack(xs[i:i + micro_batch])
        yb = np.stack(ys[i:i + micro_batch])
        pred, cache = model.forward(xb)
        value, dpred = nn.loss_l1_gdl(pred, yb)
        _, grads = model.backward(cache, dpred)
        w = xb.shape[0] / n
        total_loss += value * xb.shape[0]
        if grads_acc is None:
            grads_acc = {k: g * w for k, g in grads.items()}
        else:
            for k, g in grads.items():
                grads_acc[k] += g * w
    return total_loss / n, grads_acc


def evaluate_loss(model, samples, micro_batch=4):
    """Mean loss over a list of (x, y) normalized channel pairs."""
    total = 0.0
    for i in range(0, len(samples), micro_batch):
        xb = np.stack([s[0] for s in samples[i:i + micro_batch]])
        yb = np.stack([s[1] for s in samples[i:i + micro_batch]])
        pred, _ = model.forward(xb)
        value, _ = nn.loss_l1_gdl(pred, yb)
        total += value * xb.shape[0]
    return total / len(samples)


def new_train_state(model, config):
    return {
        "adam": nn.AdamState(model.params(), lr=config.lr, beta1=config.beta1,
                             beta2=config.beta2, eps=config.eps),
        "rng": tensors.Rng(config.seed),
        "next_epoch": 0,
        "order": None,
        "log": [],
        "best_loss": np.inf,
        "best_params": {k: v.copy() for k, v in model.params().items()},
    }


def run_epochs(model, train_set, val_set, config, state):
    """Advance training (in place) from state["next_epoch"] to config.epochs.
    Leaves the running weights in the model; best weights live in the state."""
    if not train_set:
        raise TrainingError("empty training set")
    params = model.params()
    adam, rng = state["adam"], state["rng"]
    # the epoch permutation evolves in place across epochs, so it is part of
    # the resumable state
    if state.get("order") is None or len(state["order"]) != len(train_set):
        state["order"] = list(range(len(train_set)))
    order = state["order"]
    for epoch in range(state["next_epoch"], config.epochs):
        rng.shuffle(order)
        epoch_loss = 0.0
        n_seen = 0
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            xs = [train_set[i][0] for i in idx]
            ys = [train_set[i][1] for i in idx]
            value, grads = _batch_pass(model, xs, ys, config.micro_batch)
            if not np.isfinite(value):
                raise NanLossError(epoch, bi)
            adam.step(params, grads)
            epoch_loss += value * len(idx)
            n_seen += len(idx)
        train_loss = epoch_loss / n_seen
        val_loss = (evaluate_loss(model, val_set, config.micro_batch)
                    if val_set else train_loss)
        state["log"].append({"epoch": epoch, "train_loss": float(train_loss),
                             "val_loss": float(val_loss)})
        if val_loss < state["best_loss"]:
            state["best_loss"] = val_loss
            state["best_params"] = {k: v.copy() for k, v in params.items()}
        state["next_epoch"] = epoch + 1
    return state


def finalize_best(model, state):
    """Copy the best-validation weights into the model."""
    for k, v in model.params().items():
        v[...] = state["best_params"][k]


def train(model, train_set, val_set, config, state=None):
    """Train in place; the model ends up with the best-validation-loss weights
    (best training loss when val_set is empty). Returns (model, log)."""
    if state is None:
        state = new_train_state(model, config)
    run_epochs(model, train_set, val_set, config, state)
    finalize_best(model, state)
    return model, state["log"]


# --- checkpointing -----------------------------------------------------------

def save_checkpoint(ckpt_dir, model, meta=None, log=None):
    """Write one SPDB tensor per parameter plus a JSON sidecar with the
    architecture hyperparameters."""
    os.makedirs(ckpt_dir, exist_ok=True)
    for name, arr in model.params().items():
        tensors.save_tensor(os.path.join(ckpt_dir, f"{name}.spdb"), arr)
    sidecar = {"architecture": model.config,
               "norm_percentile": NORM_PERCENTILE,
               "meta": meta or {}}
    if log is not None:
        sidecar["log"] = log
    with open(os.path.join(ckpt_dir, "model.json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def load_checkpoint(ckpt_dir):
    """Rebuild a model from a checkpoint directory. Returns (model, sidecar).
    SPDB payloads are binary32, so weights reload up to float32 rounding."""
    with open(os.path.join(ckpt_dir, "model.json")) as fh:
        sidecar = json.load(fh)
    arch = dict(sidecar["architecture"])
    arch["kernels"] = tuple(arch["kernels"])
    model = nn.AgCnnModel(**arch)
    for name, arr in model.params().items():
        arr[...] = tensors.load_tensor(os.path.join(ckpt_dir, f"{name}.spdb"))
    return model, sidecar


def save_train_state(ckpt_dir, model, state):
    """Float64 resumable trainer state next to the checkpoint."""
    os.makedirs(ckpt_dir, exist_ok=True)
    adam = state["adam"]
    payload = {"next_epoch": np.int64(state["next_epoch"]),
               "best_loss": np.float64(state["best_loss"]),
               "rng_seed": np.uint64(state["rng"].seed),
               "rng_state_ints": np.array(state["rng"].get_state()[:5],
                                          dtype=np.uint64),
               "rng_spare": np.float64(state["rng"].get_state()[5]),
               "order": np.array(state["order"] if state.get("order") is not None
                                 else [], dtype=np.int64),
               "adam_t": np.int64(adam.t),
               "adam_hyper": np.array([adam.lr, adam.beta1, adam.beta2, adam.eps]),
               "log_json": np.frombuffer(
                   json.dumps(state["log"]).encode(), dtype=np.uint8)}
    for k, v in model.params().items():
        payload[f"param/{k}"] = v
    for k, v in adam.m.items():
        payload[f"adam_m/{k}"] = v
    for k, v in adam.v.items():
        payload[f"adam_v/{k}"] = v
    for k, v in state["best_params"].items():
        payload[f"best/{k}"] = v
    np.savez(os.path.join(ckpt_dir, STATE_FILE), **payload)


def load_train_state(ckpt_dir, model):
    """Restore model running weights and trainer state saved by
    save_train_state."""
    data = np.load(os.path.join(ckpt_dir, STATE_FILE))
    params = model.params()
    for k, v in params.items():
        v[...] = data[f"param/{k}"]
    lr, b1, b2, eps = data["adam_hyper"]
    adam = nn.AdamState(params, lr=lr, beta1=b1, beta2=b2, eps=eps)
    adam.t = int(data["adam_t"])
    for k in params:
        adam.m[k] = data[f"adam_m/{k}"].copy()
        adam.v[k] = data[f"adam_v/{k}"].copy()
    rng = tensors.Rng(int(data["rng_seed"]))
    rs = data["rng_state_ints"]
    rng.set_state((int(rs[0]), int(rs[1]), int(rs[2]), int(rs[3]),
                   int(rs[4]), float(data["rng_spare"])))
    order = data["order"].tolist() if data["order"].size else None
    return {"adam": adam, "rng": rng,
            "order": order,
            "next_epoch": int(data["next_epoch"]),
            "log": json.loads(bytes(data["log_json"]).decode()),
            "best_loss": float(data["best_loss"]),
            "best_params": {k: data[f"best/{k}"].copy() for k in params}}
