"""Two-layer graph convolutional classifier with hand-derived gradients.

Forward pass over the symmetric propagation matrix A_hat:

    H1 = relu(A_hat X W0)
    Z  = softmax(A_hat H1 W1)        (row-wise)

Synthetic OOD rows live in hidden space already: their logits are x_s W1, so
they skip both aggregations and the first layer, and only contribute gradient
to W1. The cross-entropy loss averages over the masked real rows plus every
synthetic row; a weight-decay term wd/2 (|W0|^2 + |W1|^2) enters the gradients
but is reported separately from the loss value.

A "sigmoid" head variant replaces the row softmax with independent per-class
logistic outputs and the loss with the mean per-class binary cross-entropy;
the closed-set threshold baselines train with it. backward assumes A_hat is
symmetric, which both normalizations used with this model satisfy.

Training is full-batch Adam with early stopping on validation accuracy and a
binary checkpoint format (magic CFCW).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .graph import SparseMatrix, spmm

LOG_FLOOR = 1e-12
CHECKPOINT_MAGIC = b"CFCW"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; .history holds the epochs recorded so far."""

    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class GCNParams:
    w0: np.ndarray      # (d, hidden)
    w1: np.ndarray      # (hidden, out)

    def __post_init__(self):
        if self.w0.ndim != 2 or self.w1.ndim != 2:
            raise ValueError("weights must be 2-D")
        if self.w0.shape[1] != self.w1.shape[0]:
            raise ValueError("hidden dimensions of W0 and W1 disagree")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.w0.shape[0], self.w0.shape[1], self.w1.shape[1]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    epochs: int = 200
    hidden_dim: int = 64
    early_stop_patience: int = 30
    seed: int = 0
    head: str = "softmax"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.head not in ("softmax", "sigmoid"):
            raise ValueError(f"unknown head {self.head!r}")


@dataclass(frozen=True)
class ForwardCache:
    h1: np.ndarray                 # (N, hidden), post-relu
    z_real: np.ndarray             # (N, out)
    z_synth: np.ndarray | None     # (S, out) or None


def init_params(d: int, hidden: int, out: int, seed: int) -> GCNParams:
    """Glorot-uniform initialization, U(-b, b) with b = sqrt(6 / (fan_in + fan_out))."""
    if min(d, hidden, out) < 1:
        raise ValueError("all dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    b0 = np.sqrt(6.0 / (d + hidden))
    b1 = np.sqrt(6.0 / (hidden + out))
    return GCNParams(
        w0=rng.uniform(-b0, b0, size=(d, hidden)),
        w1=rng.uniform(-b1, b1, size=(hidden, out)),
    )


def _row_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(logits: np.ndarray) -> np.ndarray:
    out = np.empty_like(logits)
    pos = logits >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-logits[pos]))
    ez = np.exp(logits[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_synth(params: GCNParams, synth, head: str):
    if synth is None:
        return
    if head != "softmax":
        raise ValueError("synthetic rows are only supported with the softmax head")
    if synth.embeddings.shape[1] != params.w0.shape[1]:
        raise ValueError("synthetic embeddings must live in the hidden space")


def forward(params: GCNParams, a_hat: SparseMatrix, x: np.ndarray,
            synth=None, head: str = "softmax") -> ForwardCache:
    """Full forward pass; synthetic rows get logits x_s W1 directly."""
    _check_synth(params, synth, head)
    if x.shape[1] != params.w0.shape[0]:
        raise ValueError("feature dimension does not match W0")
    squash = _row_softmax if head == "softmax" else _sigmoid
    h1 = np.maximum(spmm(a_hat, x @ params.w0), 0.0)
    z_real = squash(spmm(a_hat, h1) @ params.w1)
    z_synth = squash(synth.embeddings @ params.w1) if synth is not None else None
    return ForwardCache(h1=h1, z_real=z_real, z_synth=z_synth)


def hidden_states(params: GCNParams, a_hat: SparseMatrix, x: np.ndarray) -> np.ndarray:
    """H1 = relu(A_hat X W0): the representation space mixup operates in."""
    return np.maximum(spmm(a_hat, x @ params.w0), 0.0)


def _floored_log(z: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(z, LOG_FLOOR))


def loss(cache: ForwardCache, y: np.ndarray, train_ids, head: str = "softmax") -> float:
    """Softmax head: mean negative log-likelihood over the masked real rows
    plus all synthetic rows (synthetic target is the last class). Sigmoid
    head: mean per-class binary cross-entropy over the masked rows."""
    ids = list(train_ids)
    out_dim = cache.z_real.shape[1]
    synth_count = 0 if cache.z_synth is None else cache.z_synth.shape[0]
    if not ids and synth_count == 0:
        raise ValueError("loss needs at least one training row")
    for i in ids:
        if not (0 <= y[i] < out_dim):
            raise ValueError(f"node {i} has target {y[i]} outside [0, {out_dim})")
    if head == "softmax":
        total = 0.0
        if ids:
            total -= _floored_log(cache.z_real[ids, y[ids]]).sum()
        if synth_count:
            total -= _floored_log(cache.z_synth[:, -1]).sum()
        return float(total / (len(ids) + synth_count))
    if synth_count:
        raise ValueError("synthetic rows are only supported with the softmax head")
    z = cache.z_real[ids]
    onehot = np.zeros_like(z)
    onehot[np.arange(len(ids)), y[ids]] = 1.0
    bce = -(onehot * _floored_log(z) + (1.0 - onehot) * _floored_log(1.0 - z))
    return float(bce.sum() / (len(ids) * out_dim))


def backward(params: GCNParams, a_hat: SparseMatrix, x: np.ndarray,
             y: np.ndarray, train_ids, synth=None, weight_decay: float = 0.0,
             head: str = "softmax") -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of loss(...) + weight_decay/2 (|W0|^2 + |W1|^2).

    Softmax plus cross-entropy collapses to dlogits = (Z - onehot) / M on the
    masked rows; the sigmoid head gives (Z - onehot) / (M * out). From there:

        gW1 = (A_hat H1)^T dlogits + x_s^T dlogits_s
        dH1 = A_hat (dlogits W1^T)          (A_hat symmetric)
        gW0 = X^T A_hat (dH1 * [H1 > 0])

    Synthetic rows touch only gW1 because their logits never pass through W0.
    """
    _check_synth(params, synth, head)
    ids = list(train_ids)
    cache = forward(params, a_hat, x, synth, head)
    n, out_dim = cache.z_real.shape
    synth_count = 0 if cache.z_synth is None else cache.z_synth.shape[0]
    m = len(ids) + synth_count
    if m == 0:
        raise ValueError("backward needs at least one training row")

    dlogits = np.zeros((n, out_dim), dtype=np.float64)
    if ids:
        onehot = np.zeros((len(ids), out_dim), dtype=np.float64)
        onehot[np.arange(len(ids)), y[ids]] = 1.0
        denom = m if head == "softmax" else len(ids) * out_dim
        dlogits[ids] = (cache.z_real[ids] - onehot) / denom

    ah1 = spmm(a_hat, cache.h1)
    gw1 = ah1.T @ dlogits
    if synth_count:
        onehot_s = np.zeros((synth_count, out_dim), dtype=np.float64)
        onehot_s[:, -1] = 1.0
        dlogits_s = (cache.z_synth - onehot_s) / m
        gw1 += synth.embeddings.T @ dlogits_s

    dh1 = spmm(a_hat, dlogits @ params.w1.T)
    dpre1 = dh1 * (cache.h1 > 0)
    gw0 = x.T @ spmm(a_hat, dpre1)

    if weight_decay:
        gw0 = gw0 + weight_decay * params.w0
        gw1 = gw1 + weight_decay * params.w1
    return gw0, gw1


def predict(params: GCNParams, a_hat: SparseMatrix, x: np.ndarray,
            head: str = "softmax") -> np.ndarray:
    """Class probabilities for every real node."""
    return forward(params, a_hat, x, None, head).z_real


def train(a_hat: SparseMatrix, x: np.ndarray, y: np.ndarray, train_ids,
          val_ids, out_dim: int, synth=None,
          cfg: TrainConfig = TrainConfig()) -> tuple[GCNParams, list[dict]]:
    """Full-batch Adam training loop.

    y holds a class index for every node in train_ids and val_ids (other rows
    are ignored). Early stopping watches validation accuracy with the given
    patience and restores the best-scoring parameters, accuracy ties going to
    the epoch with the lower training loss; without val_ids the final
    parameters are returned. History rows record the loss and validation
    accuracy after each epoch's update. Deterministic in (inputs, cfg.seed).
    """
    train_ids = list(train_ids)
    val_ids = list(val_ids)
    if out_dim < 2:
        raise ValueError("out_dim must be >= 2")
    for i in val_ids:
        if not (0 <= y[i] < out_dim):
            raise ValueError(f"val node {i} has target {y[i]} outside [0, {out_dim})")

    params = init_params(x.shape[1], cfg.hidden_dim, out_dim, cfg.seed)
    mom = [np.zeros_like(params.w0), np.zeros_like(params.w1)]
    vel = [np.zeros_like(params.w0), np.zeros_like(params.w1)]

    history: list[dict] = []
    best_params = params
    best_val = -1.0
    best_loss = np.inf
    stale = 0

    for epoch in range(1, cfg.epochs + 1):
        grads = backward(params, a_hat, x, y, train_ids, synth,
                         cfg.weight_decay, cfg.head)
        new_w = []
        for k, (w, g) in enumerate(zip((params.w0, params.w1), grads)):
            mom[k] = ADAM_BETA1 * mom[k] + (1 - ADAM_BETA1) * g
            vel[k] = ADAM_BETA2 * vel[k] + (1 - ADAM_BETA2) * g * g
            m_hat = mom[k] / (1 - ADAM_BETA1 ** epoch)
            v_hat = vel[k] / (1 - ADAM_BETA2 ** epoch)
            new_w.append(w - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS))
        params = GCNParams(w0=new_w[0], w1=new_w[1])

        cache = forward(params, a_hat, x, synth, cfg.head)
        epoch_loss = loss(cache, y, train_ids, cfg.head)
        val_acc = None
        if val_ids:
            pred = cache.z_real[val_ids].argmax(axis=1)
            val_acc = float(np.mean(pred == y[val_ids]))
        history.append({"epoch": epoch, "loss": epoch_loss, "val_accuracy": val_acc})

        if not np.isfinite(epoch_loss):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}", history)

        if val_ids:
            if val_acc > best_val:
                best_val = val_acc
                best_loss = epoch_loss
                best_params = params
                stale = 0
            else:
                # equal accuracy with lower loss keeps the sharper epoch but
                # does not reset the patience counter
                if val_acc == best_val and epoch_loss < best_loss:
                    best_loss = epoch_loss
                    best_params = params
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break

    return (best_params if val_ids else params), history


# --------------------------------------------------------------- checkpoints

def save_checkpoint(params: GCNParams, path: str) -> None:
    d, h, out = params.dims
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<III", d, h, out))
        fh.write(params.w0.astype("<f8").tobytes(order="C"))
        fh.write(params.w1.astype("<f8").tobytes(order="C"))


def load_checkpoint(path: str) -> GCNParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic, expected {CHECKPOINT_MAGIC!r}")
    d, h, out = struct.unpack("<III", blob[4:16])
    expect = 16 + 8 * (d * h + h * out)
    if len(blob) != expect:
        raise ValueError(f"{path}: expected {expect} bytes, found {len(blob)}")
    w0 = np.frombuffer(blob, dtype="<f8", count=d * h, offset=16).reshape(d, h)
    w1 = np.frombuffer(blob, dtype="<f8", count=h * out,
                       offset=16 + 8 * d * h).reshape(h, out)
    return GCNParams(w0=np.ascontiguousarray(w0), w1=np.ascontiguousarray(w1))
