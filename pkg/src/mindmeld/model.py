"""MIND MELD network: bi-LSTM label encoder, difference predictor, embedding posterior."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DenseParams, LstmParams, Tensor
from .world import WHEEL_LIMIT

log = logging.getLogger(__name__)

HIDDEN = 32
PREDICTOR_HIDDEN = (200,)
POSTERIOR_HIDDEN = (64, 32)
EMBED_DIM = 2
WINDOW = 20
LOG_VAR_RANGE = (-6.0, 2.0)
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class MindMeldParams:
    encoder: LstmParams
    predictor: DenseParams
    posterior: DenseParams
    embed_dim: int = EMBED_DIM

    @classmethod
    def init(cls, rng: np.random.Generator, embed_dim: int = EMBED_DIM, hidden: int = HIDDEN):
        enc = LstmParams.init(1, hidden, rng)
        pred = DenseParams.init(
            [2 * hidden + embed_dim, *PREDICTOR_HIDDEN, 1], ["relu"] * len(PREDICTOR_HIDDEN) + ["linear"], rng, "f_theta"
        )
        post = DenseParams.init(
            [2 * hidden + 1, *POSTERIOR_HIDDEN, 2 * embed_dim], ["relu"] * len(POSTERIOR_HIDDEN) + ["linear"], rng, "g_phi"
        )
        return cls(enc, pred, post, embed_dim)

    @classmethod
    def zeros(cls, embed_dim: int = EMBED_DIM, hidden: int = HIDDEN):
        p = cls.init(np.random.default_rng(0), embed_dim, hidden)
        for t in p.parameters():
            t.data[...] = 0.0
        return p

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.predictor.parameters() + self.posterior.parameters()

    def groups(self) -> dict[str, list[Tensor]]:
        return {
            "encoder": self.encoder.parameters(),
            "f_theta": self.predictor.parameters(),
            "g_phi": self.posterior.parameters(),
        }

    def set_trainable(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag


class EmbeddingTable:
    """Personalised embeddings keyed by demonstrator id."""

    def __init__(self, ids: Sequence[int], vectors: np.ndarray, frozen: bool = False):
        vectors = np.asarray(vectors, dtype=float)
        if vectors.ndim != 2 or len(vectors) != len(ids):
            raise ValueError("need one embedding row per demonstrator id")
        self.ids = [int(i) for i in ids]
        self._row = {p: k for k, p in enumerate(self.ids)}
        self.weights = Tensor(vectors, requires_grad=not frozen, name="embeddings")

    @classmethod
    def from_prior(cls, ids: Sequence[int], dim: int, rng: np.random.Generator) -> "EmbeddingTable":
        return cls(ids, rng.standard_normal((len(ids), dim)))

    @property
    def frozen(self) -> bool:
        return not self.weights.requires_grad

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def __contains__(self, p: int) -> bool:
        return int(p) in self._row

    def __getitem__(self, p: int) -> np.ndarray:
        return self.weights.data[self.rows([p])[0]].copy()

    def rows(self, ids) -> np.ndarray:
        try:
            return np.array([self._row[int(p)] for p in ids], dtype=np.intp)
        except KeyError as e:
            raise KeyError(f"unknown demonstrator id {e.args[0]}") from None

    def mean(self) -> np.ndarray:
        return self.weights.data.mean(axis=0)

    def as_dict(self) -> dict[int, np.ndarray]:
        return {p: self.weights.data[k].copy() for p, k in self._row.items()}


# ---------------------------------------------------------------- windows


@dataclass
class WindowBatch:
    """A batch of labelled windows; row k is one window sample."""

    ids: np.ndarray  # (B,)
    windows: np.ndarray  # (B, L) demonstrator labels
    a_target: np.ndarray  # (B,)
    o_target: np.ndarray  # (B,)
    target_index: int

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, idx) -> "WindowBatch":
        return WindowBatch(self.ids[idx], self.windows[idx], self.a_target[idx], self.o_target[idx], self.target_index)

    @staticmethod
    def concat(batches: Sequence["WindowBatch"]) -> "WindowBatch":
        if not batches:
            raise ValueError("no windows")
        return WindowBatch(
            np.concatenate([b.ids for b in batches]),
            np.concatenate([b.windows for b in batches]),
            np.concatenate([b.a_target for b in batches]),
            np.concatenate([b.o_target for b in batches]),
            batches[0].target_index,
        )


def window_indices(n: int, length: int = WINDOW) -> np.ndarray:
    """(n, length) index grid centring each timestep, clamped at the ends."""
    half = length // 2
    return np.clip(np.arange(n)[:, None] + np.arange(-half, length - half)[None, :], 0, n - 1)


def make_windows(seq, length: int = WINDOW, stride: int = 1, offset: int = 0) -> WindowBatch:
    """Centred windows over a :class:`LabelSequence` (every ``stride``-th step)."""
    a = np.asarray(seq.a, dtype=float)
    o = np.asarray(seq.o, dtype=float)
    n = len(a)
    if n < length:
        raise ValueError(f"sequence of length {n} is shorter than the window ({length})")
    t = np.arange(offset % stride, n, stride)
    grid = window_indices(n, length)[t]
    return WindowBatch(np.full(len(t), seq.demonstrator_id), a[grid], a[t], o[t], length // 2)


# ---------------------------------------------------------------- forward / loss


@dataclass
class CorrectionOutput:
    d_pred: Tensor  # (B, 1)
    posterior_mean: Tensor  # (B, d)
    posterior_log_var: Tensor  # (B, d)
    w_hat: Tensor  # (B, d)
    w: Tensor  # (B, d) embedding rows used
    a_target: np.ndarray

    @property
    def corrected(self) -> np.ndarray:
        return np.clip(self.a_target + self.d_pred.data[:, 0], -WHEEL_LIMIT, WHEEL_LIMIT)


def encode(params: MindMeldParams, windows: np.ndarray) -> Tensor:
    return ad.forward_lstm_bidirectional(params.encoder, np.asarray(windows, dtype=float)[..., None])


def heads(params: MindMeldParams, z: Tensor, w: Tensor, noise: np.ndarray, a_target) -> CorrectionOutput:
    d_pred = ad.forward_dense(params.predictor, ad.concat([z, w], axis=1))
    stats = ad.forward_dense(params.posterior, ad.concat([z, d_pred], axis=1))
    dim = params.embed_dim
    mean = stats[:, :dim]
    log_var = ad.clamp(stats[:, dim:], *LOG_VAR_RANGE)
    w_hat = ad.sample_gaussian_reparam(mean, log_var, noise)
    return CorrectionOutput(d_pred, mean, log_var, w_hat, w, np.asarray(a_target, dtype=float))


def forward(params: MindMeldParams, table: EmbeddingTable, batch: WindowBatch, noise=None) -> CorrectionOutput:
    """Encoder -> predictor(z, w) -> posterior(z, d); ``noise`` defaults to zeros."""
    rows = table.rows(batch.ids)
    if noise is None:
        noise = np.zeros((len(batch), params.embed_dim))
    z = encode(params, batch.windows)
    w = ad.gather_rows(table.weights, rows)
    return heads(params, z, w, noise, batch.a_target)


def loss(out: CorrectionOutput, batch: WindowBatch, mi_weight: float = 1.0) -> Tensor:
    """Mean over the batch of ``mi_weight * |w_hat - w|^2 + (d - (o - a))^2``.

    ``d`` is trained toward ``o - a`` so that ``a + d`` estimates the
    ground truth. Gradients reach ``w`` through both terms.
    """
    target = (batch.o_target - batch.a_target)[:, None]
    mi_term = ad.reduce_sum(ad.square(ad.sub(out.w_hat, out.w)), axis=1)
    diff_term = ad.reduce_sum(ad.square(ad.sub(out.d_pred, target)), axis=1)
    if mi_weight != 1.0:
        mi_term = ad.mul(mi_term, mi_weight)
    return ad.reduce_mean(ad.add(mi_term, diff_term))


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    lr: float = 1e-3
    embed_lr: float = 1e-2  # embeddings move faster than network weights
    mi_weight: float = 0.1
    batch_size: int = 64
    epochs: int = 200
    patience: int = 20
    min_delta: float = 1e-4
    steps_per_epoch: int = 0  # 0: one pass over the data
    augment_scale_min: float = 1.0
    augment_scale_max: float = 1.0
    augment_flip: bool = False
    infer_lr: float = 0.01
    infer_steps: int = 300
    infer_batch: int = 512


@dataclass
class LossTrace:
    epochs: list[float] = field(default_factory=list)

    @property
    def initial(self) -> float:
        return self.epochs[0]

    @property
    def final(self) -> float:
        return self.epochs[-1]


def _epoch_batches(n: int, cfg: TrainConfig, rng: np.random.Generator):
    order = rng.permutation(n)
    batches = [order[k:k + cfg.batch_size] for k in range(0, n, cfg.batch_size)]
    if cfg.steps_per_epoch:
        batches = batches[:cfg.steps_per_epoch]
    return batches


def augment(batch: WindowBatch, cfg: TrainConfig, rng: np.random.Generator) -> WindowBatch:
    """Rescale and sign-flip each window together with its targets.

    Corruption is linear and odd in the labels, so a scaled/mirrored window
    carries the same style; this keeps the net from memorising task shapes.
    """
    if cfg.augment_scale_min == cfg.augment_scale_max == 1.0 and not cfg.augment_flip:
        return batch
    c = rng.uniform(cfg.augment_scale_min, cfg.augment_scale_max, len(batch))
    if cfg.augment_flip:
        c = c * rng.choice([-1.0, 1.0], len(batch))
    clip = lambda v: np.clip(v, -WHEEL_LIMIT, WHEEL_LIMIT)
    return WindowBatch(
        batch.ids, clip(batch.windows * c[:, None]), clip(batch.a_target * c), clip(batch.o_target * c), batch.target_index
    )


def evaluate_loss(
    params: MindMeldParams, table: EmbeddingTable, data: WindowBatch, rng: np.random.Generator, mi_weight: float = 1.0
) -> float:
    noise = rng.standard_normal((len(data), params.embed_dim))
    return float(loss(forward(params, table, data, noise), data, mi_weight).data)


def train_calibration(
    data: WindowBatch,
    cfg: TrainConfig,
    seed: int,
    ids: Sequence[int] | None = None,
    params: MindMeldParams | None = None,
    table: EmbeddingTable | None = None,
) -> tuple[MindMeldParams, EmbeddingTable, LossTrace]:
    """Jointly fit all network weights and the embedding table on ``data``."""
    rng = np.random.default_rng(seed)
    if ids is None:
        ids = sorted(set(int(p) for p in data.ids))
    missing = set(int(p) for p in ids) - set(int(p) for p in data.ids)
    if missing:
        raise ValueError(f"demonstrators without samples: {sorted(missing)}")
    if params is None:
        params = MindMeldParams.init(rng)
    if table is None:
        table = EmbeddingTable.from_prior(ids, params.embed_dim, rng)
    opt = ad.Adam(params.parameters(), lr=cfg.lr)
    opt_w = ad.Adam([table.weights], lr=cfg.embed_lr if cfg.embed_lr else cfg.lr)
    trace = LossTrace()
    best, stale = math.inf, 0
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in _epoch_batches(len(data), cfg, rng):
            batch = augment(data.take(idx), cfg, rng)
            noise = rng.standard_normal((len(idx), params.embed_dim))
            opt.zero_grad()
            opt_w.zero_grad()
            with ad.Tape() as tape:
                value = loss(forward(params, table, batch, noise), batch, cfg.mi_weight)
            if not np.isfinite(value.data):
                raise TrainingError(f"non-finite loss at epoch {epoch} (lr={cfg.lr})")
            tape.backward(value)
            opt.step()
            opt_w.step()
            total += float(value.data) * len(idx)
            count += len(idx)
        trace.epochs.append(total / count)
        log.debug("epoch %d loss %.5f", epoch, trace.epochs[-1])
        if trace.epochs[-1] < best - cfg.min_delta:
            best, stale = trace.epochs[-1], 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return params, table, trace


def infer_new_embedding(
    params: MindMeldParams,
    data: WindowBatch,
    init: np.ndarray,
    cfg: TrainConfig,
    seed: int,
    steps: int | None = None,
) -> np.ndarray:
    """Fit one demonstrator's embedding with every network weight held fixed.

    Starts from ``init`` (normally the mean training embedding).
    """
    if len(data) == 0:
        raise ValueError("no calibration samples for the new demonstrator")
    steps = cfg.infer_steps if steps is None else steps
    rng = np.random.default_rng(seed)
    w = Tensor(np.array(init, dtype=float)[None, :], requires_grad=True, name="w_new")
    if steps == 0:
        return w.data[0].copy()
    params.set_trainable(False)
    try:
        z_all = encode(params, data.windows)
        opt = ad.Adam([w], lr=cfg.infer_lr)
        for _ in range(steps):
            idx = rng.choice(len(data), size=min(cfg.infer_batch, len(data)), replace=False)
            batch = data.take(idx)
            z = Tensor(z_all.data[idx])
            noise = rng.standard_normal((len(idx), params.embed_dim))
            opt.zero_grad()
            with ad.Tape() as tape:
                wb = ad.gather_rows(w, np.zeros(len(idx), dtype=np.intp))
                value = loss(heads(params, z, wb, noise, batch.a_target), batch, cfg.mi_weight)
            if not np.isfinite(value.data):
                raise TrainingError("non-finite loss during embedding inference")
            tape.backward(value)
            opt.step()
    finally:
        params.set_trainable(True)
    return w.data[0].copy()


def correct_labels(params: MindMeldParams, w: np.ndarray, seq, length: int = WINDOW) -> np.ndarray:
    """Corrected label for every timestep of ``seq`` using embedding ``w``."""
    batch = make_windows(seq, length)
    table = EmbeddingTable([seq.demonstrator_id], np.asarray(w, dtype=float)[None, :], frozen=True)
    return forward(params, table, batch).corrected


def posterior_means(params: MindMeldParams, table: EmbeddingTable, data: WindowBatch) -> np.ndarray:
    return forward(params, table, data).posterior_mean.data


def gradient_check(seed: int = 0, batch: int = 4, length: int = WINDOW, h: float = 1e-6, per_tensor: int = 300) -> dict[str, float]:
    """Central-difference check of the full training loss on a random toy batch.

    Returns, per parameter group (plus the embedding table), the worst
    per-tensor relative error ``|g - g_fd| / (|g| + |g_fd|)``. ``per_tensor``
    > 0 checks that many random entries of each tensor instead of all of them.
    """
    rng = np.random.default_rng(seed)
    params = MindMeldParams.init(rng)
    table = EmbeddingTable.from_prior([0, 1], params.embed_dim, rng)
    data = WindowBatch(
        np.arange(batch) % 2, rng.uniform(-2, 2, (batch, length)), rng.uniform(-2, 2, batch),
        rng.uniform(-2, 2, batch), length // 2,
    )
    data.a_target = data.windows[:, length // 2].copy()
    noise = rng.standard_normal((batch, params.embed_dim))

    def value() -> float:
        return float(loss(forward(params, table, data, noise), data).data)

    tensors = {**params.groups(), "embeddings": [table.weights]}
    for group in tensors.values():
        for t in group:
            t.grad = None
    with ad.Tape() as tape:
        out = loss(forward(params, table, data, noise), data)
    tape.backward(out)
    worst = {}
    for name, group in tensors.items():
        errs = []
        for t in group:
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if per_tensor and flat.size > per_tensor:
                idx = rng.choice(flat.size, per_tensor, replace=False)
            g = t.grad.reshape(-1)[idx]
            num = np.empty(len(idx))
            for j, k in enumerate(idx):
                keep = flat[k]
                flat[k] = keep + h
                up = value()
                flat[k] = keep - h
                down = value()
                flat[k] = keep
                num[j] = (up - down) / (2 * h)
            errs.append(np.linalg.norm(g - num) / max(1e-12, np.linalg.norm(g) + np.linalg.norm(num)))
        worst[name] = float(max(errs))
    return worst


# ---------------------------------------------------------------- checkpoints


def _dense_blob(p: DenseParams) -> dict:
    return {
        "activations": p.activations,
        "weights": [w.data.tolist() for w in p.weights],
        "biases": [b.data.tolist() for b in p.biases],
    }


def _dense_from(blob: dict, prefix: str) -> DenseParams:
    return DenseParams(
        [Tensor(w, True, f"{prefix}.W{k}") for k, w in enumerate(blob["weights"])],
        [Tensor(b, True, f"{prefix}.b{k}") for k, b in enumerate(blob["biases"])],
        list(blob["activations"]),
    )


def save_checkpoint(path, params: MindMeldParams, table: EmbeddingTable | None = None) -> None:
    """JSON checkpoint; Python float repr keeps doubles exact on reload."""
    e = params.encoder
    blob = {
        "version": CHECKPOINT_VERSION,
        "embed_dim": params.embed_dim,
        "encoder": {
            "input_size": e.input_size,
            "hidden_size": e.hidden_size,
            "W_fwd": e.W_fwd.data.tolist(),
            "b_fwd": e.b_fwd.data.tolist(),
            "W_bwd": e.W_bwd.data.tolist(),
            "b_bwd": e.b_bwd.data.tolist(),
        },
        "f_theta": _dense_blob(params.predictor),
        "g_phi": _dense_blob(params.posterior),
        "embeddings": None if table is None else {
            "ids": table.ids,
            "vectors": table.weights.data.tolist(),
        },
    }
    Path(path).write_text(json.dumps(blob))


def load_checkpoint(path) -> tuple[MindMeldParams, EmbeddingTable | None]:
    blob = json.loads(Path(path).read_text())
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    e = blob["encoder"]
    enc = LstmParams(
        e["input_size"], e["hidden_size"],
        Tensor(e["W_fwd"], True, "lstm.W_fwd"), Tensor(e["b_fwd"], True, "lstm.b_fwd"),
        Tensor(e["W_bwd"], True, "lstm.W_bwd"), Tensor(e["b_bwd"], True, "lstm.b_bwd"),
    )
    params = MindMeldParams(enc, _dense_from(blob["f_theta"], "f_theta"), _dense_from(blob["g_phi"], "g_phi"), blob["embed_dim"])
    emb = blob.get("embeddings")
    table = None if emb is None else EmbeddingTable(emb["ids"], np.array(emb["vectors"], dtype=float).reshape(len(emb["ids"]), -1))
    return params, table
