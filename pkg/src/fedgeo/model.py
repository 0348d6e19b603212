"""Three-layer next-location model with hand-written backpropagation.

Layer 1 is the location embedding, layer 2 a single tanh recurrent encoder,
layer 3 the output projection onto location logits::

    h_0 = 0
    h_t = tanh(emb[l_t] @ W_xh + h_{t-1} @ W_hh + b_h)
    logits = h_T @ W_out + b_out

All parameters live in one contiguous float64 buffer; every named array is
a view into it.  The buffer order is ``emb, W_xh, W_hh, b_h, W_out, b_out``
(each C-ordered), so each layer is a contiguous slice and
``flatten_layer`` / ``flatten_all`` are plain slices of the buffer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionMismatch, EmptyDataset, InvalidLayerIndex, InvalidLocationId

N_LAYERS = 3
LAYER_PARAMS = {
    1: ("emb",),
    2: ("W_xh", "W_hh", "b_h"),
    3: ("W_out", "b_out"),
}
PARAM_ORDER = tuple(name for z in (1, 2, 3) for name in LAYER_PARAMS[z])

CHECKPOINT_MAGIC = b"FGCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class HyperParams:
    embed_dim: int = 32
    hidden_dim: int = 32
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 32
    local_epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim < 1 or self.hidden_dim < 1:
            raise ConfigError("embed_dim and hidden_dim must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.local_epochs < 1:
            raise ConfigError(f"local_epochs must be >= 1, got {self.local_epochs}")


def _shapes(n_locations: int, embed_dim: int, hidden_dim: int) -> dict[str, tuple[int, ...]]:
    L, E, H = n_locations, embed_dim, hidden_dim
    return {
        "emb": (L, E),
        "W_xh": (E, H),
        "W_hh": (H, H),
        "b_h": (H,),
        "W_out": (H, L),
        "b_out": (L,),
    }


class ModelWeights:
    """Parameter set of the model, addressable as a whole or per layer."""

    def __init__(self, n_locations: int, embed_dim: int, hidden_dim: int, buffer: Optional[np.ndarray] = None):
        self.n_locations = int(n_locations)
        self.embed_dim = int(embed_dim)
        self.hidden_dim = int(hidden_dim)
        shapes = _shapes(self.n_locations, self.embed_dim, self.hidden_dim)
        sizes = [int(np.prod(shapes[name])) for name in PARAM_ORDER]
        total = sum(sizes)
        if buffer is None:
            buffer = np.zeros(total, dtype=np.float64)
        else:
            buffer = np.ascontiguousarray(buffer, dtype=np.float64)
            if buffer.shape != (total,):
                raise DimensionMismatch(f"buffer has shape {buffer.shape}, expected ({total},)")
        self.buffer = buffer
        self._slices = {}
        offset = 0
        for name, size in zip(PARAM_ORDER, sizes):
            self._slices[name] = slice(offset, offset + size)
            setattr(self, name, buffer[offset:offset + size].reshape(shapes[name]))
            offset += size
        self._layer_slices = {
            z: slice(self._slices[names[0]].start, self._slices[names[-1]].stop)
            for z, names in LAYER_PARAMS.items()
        }

    # -- structure -------------------------------------------------------

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.n_locations, self.embed_dim, self.hidden_dim

    def like(self, buffer: np.ndarray) -> "ModelWeights":
        return ModelWeights(*self.dims, buffer=buffer)

    def copy(self) -> "ModelWeights":
        return self.like(self.buffer.copy())

    def zeros_like(self) -> "ModelWeights":
        return ModelWeights(*self.dims)

    def layer_slice(self, z: int) -> slice:
        if z not in self._layer_slices:
            raise InvalidLayerIndex(f"layer index {z} outside 1..{N_LAYERS}")
        return self._layer_slices[z]

    def layer_size(self, z: int) -> int:
        s = self.layer_slice(z)
        return s.stop - s.start

    def flatten_layer(self, z: int) -> np.ndarray:
        return self.buffer[self.layer_slice(z)].copy()

    def flatten_all(self) -> np.ndarray:
        return self.buffer.copy()

    def with_layer(self, z: int, flat: np.ndarray) -> "ModelWeights":
        """Copy of these weights with layer ``z`` replaced by ``flat``."""
        s = self.layer_slice(z)
        flat = np.asarray(flat, dtype=np.float64).ravel()
        if flat.shape[0] != s.stop - s.start:
            raise DimensionMismatch(f"layer {z} needs {s.stop - s.start} values, got {flat.shape[0]}")
        buf = self.buffer.copy()
        buf[s] = flat
        return self.like(buf)

    def same_shape(self, other: "ModelWeights") -> bool:
        return self.dims == other.dims

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.buffer)))

    def __eq__(self, other):
        if not isinstance(other, ModelWeights):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.buffer, other.buffer)

    __hash__ = None

    def __repr__(self):
        L, E, H = self.dims
        return f"ModelWeights(|L|={L}, E={E}, H={H})"

    def __getstate__(self):
        return {"dims": self.dims, "buffer": self.buffer}

    def __setstate__(self, state):
        self.__init__(*state["dims"], buffer=state["buffer"])


def flatten_layer(w: ModelWeights, z: int) -> np.ndarray:
    return w.flatten_layer(z)


def unflatten_layer(w: ModelWeights, z: int, flat: np.ndarray) -> ModelWeights:
    return w.with_layer(z, flat)


def init_weights(n_locations: int, hp: HyperParams, seed: Optional[int] = None) -> ModelWeights:
    """Uniform ``(-a, a)`` init with ``a = 1 / sqrt(fan_in)``; biases zero.

    ``fan_in`` is the leading dimension of each matrix as stored here
    (``|L|`` for the embedding, ``E`` for ``W_xh``, ``H`` for ``W_hh`` and
    ``W_out``).
    """
    rng = np.random.default_rng(hp.seed if seed is None else seed)
    w = ModelWeights(n_locations, hp.embed_dim, hp.hidden_dim)
    for name in ("emb", "W_xh", "W_hh", "W_out"):
        arr = getattr(w, name)
        a = 1.0 / np.sqrt(arr.shape[0])
        arr[...] = rng.uniform(-a, a, size=arr.shape)
    return w


# ---------------------------------------------------------------- forward / backward


def _check_ids(w: ModelWeights, windows: np.ndarray) -> None:
    if windows.size and (windows.min() < 0 or windows.max() >= w.n_locations):
        bad = windows[(windows < 0) | (windows >= w.n_locations)][0]
        raise InvalidLocationId(f"location id {bad} outside [0, {w.n_locations})")


def _as_windows(windows) -> np.ndarray:
    arr = np.asarray(windows, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] < 1:
        raise ValueError(f"windows must have shape (batch, T >= 1), got {arr.shape}")
    return arr


def _encode(w: ModelWeights, windows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hidden states for every step, shape ``(B, T+1, H)`` with ``h_0 = 0``."""
    B, T = windows.shape
    x = w.emb[windows]                       # (B, T, E)
    pre = x @ w.W_xh + w.b_h                 # input contribution for all steps
    hs = np.zeros((B, T + 1, w.hidden_dim))
    for t in range(T):
        hs[:, t + 1] = np.tanh(pre[:, t] + hs[:, t] @ w.W_hh)
    return x, hs


def forward_batch(w: ModelWeights, windows) -> np.ndarray:
    windows = _as_windows(windows)
    _check_ids(w, windows)
    _, hs = _encode(w, windows)
    return hs[:, -1] @ w.W_out + w.b_out


def forward(w: ModelWeights, window: Sequence[int]) -> np.ndarray:
    """Logits over all locations for one window."""
    return forward_batch(w, np.asarray(window, dtype=np.int64)[None, :])[0]


def hidden_states(w: ModelWeights, window: Sequence[int]) -> np.ndarray:
    """``h_1 .. h_T`` for one window, shape ``(T, H)``."""
    windows = _as_windows(np.asarray(window)[None, :])
    _check_ids(w, windows)
    return _encode(w, windows)[1][0, 1:]


def _scatter_rows(target: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """``target[idx] += rows`` with repeated indices accumulated."""
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
    target[sorted_idx[starts]] += np.add.reduceat(rows[order], starts, axis=0)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_and_grad_arrays(w: ModelWeights, windows: np.ndarray, targets: np.ndarray,
                         prox: Optional[tuple[float, ModelWeights]] = None) -> tuple[float, ModelWeights]:
    """Mean cross-entropy and its exact gradient (backprop through time).

    ``prox = (mu, anchor)`` adds ``mu / 2 * ||w - anchor||^2`` to the loss.
    """
    windows = _as_windows(windows)
    targets = np.asarray(targets, dtype=np.int64).ravel()
    if len(targets) == 0:
        raise EmptyDataset("loss needs a nonempty batch")
    if len(targets) != windows.shape[0]:
        raise DimensionMismatch("windows and targets disagree in batch size")
    _check_ids(w, windows)
    _check_ids(w, targets[None, :])
    B, T = windows.shape
    x, hs = _encode(w, windows)
    hT = hs[:, -1]
    logits = hT @ w.W_out + w.b_out
    logp = _log_softmax(logits)
    rows = np.arange(B)
    loss = float(-logp[rows, targets].mean())

    g = w.zeros_like()
    dlogits = np.exp(logp)
    dlogits[rows, targets] -= 1.0
    dlogits /= B
    g.W_out[...] = hT.T @ dlogits
    g.b_out[...] = dlogits.sum(axis=0)

    da_all = np.empty((B, T, w.hidden_dim))
    dh = dlogits @ w.W_out.T
    for t in range(T - 1, -1, -1):
        h = hs[:, t + 1]
        da = dh * (1.0 - h * h)
        da_all[:, t] = da
        dh = da @ w.W_hh.T
    da_flat = da_all.reshape(-1, w.hidden_dim)
    g.W_hh[...] = hs[:, :-1].reshape(-1, w.hidden_dim).T @ da_flat
    g.b_h[...] = da_flat.sum(axis=0)
    g.W_xh[...] = x.reshape(-1, w.embed_dim).T @ da_flat
    _scatter_rows(g.emb, windows.ravel(), da_flat @ w.W_xh.T)

    if prox is not None:
        mu, anchor = prox
        diff = w.buffer - anchor.buffer
        loss += 0.5 * mu * float(diff @ diff)
        g.buffer += mu * diff
    return loss, g


def loss_and_grad(w: ModelWeights, batch, prox: Optional[tuple[float, ModelWeights]] = None) -> tuple[float, ModelWeights]:
    """Loss/gradient for a batch given as a ``SampleSet`` or a list of ``Sample``."""
    if hasattr(batch, "windows"):
        return loss_and_grad_arrays(w, batch.windows, batch.targets, prox)
    batch = list(batch)
    if not batch:
        raise EmptyDataset("loss needs a nonempty batch")
    windows = np.array([s.window for s in batch], dtype=np.int64)
    targets = np.array([s.target for s in batch], dtype=np.int64)
    return loss_and_grad_arrays(w, windows, targets, prox)


# ---------------------------------------------------------------- training


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient."""

    def __init__(self, w: ModelWeights, lr: float, momentum: float, weight_decay: float):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = np.zeros_like(w.buffer)

    def step(self, w: ModelWeights, grad: np.ndarray) -> None:
        d = grad + self.weight_decay * w.buffer if self.weight_decay else grad
        self.velocity *= self.momentum
        self.velocity += d
        w.buffer -= self.lr * self.velocity


def train_epochs(w: ModelWeights, data, hp: HyperParams, epochs: int,
                 prox: Optional[tuple[float, ModelWeights]] = None, seed: Optional[int] = None,
                 on_epoch: Optional[Callable[[int, ModelWeights], None]] = None) -> tuple[ModelWeights, list[float]]:
    """Mini-batch SGD over ``data`` (a ``SampleSet``) for ``epochs`` epochs.

    Returns new weights and the mean data loss (cross-entropy only) of each
    epoch; the input weights are not modified.
    """
    n = len(data)
    if n == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    rng = np.random.default_rng(hp.seed if seed is None else seed)
    out = w.copy()
    opt = SGD(out, hp.learning_rate, hp.momentum, hp.weight_decay)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, hp.batch_size):
            idx = order[start:start + hp.batch_size]
            loss, g = loss_and_grad_arrays(out, data.windows[idx], data.targets[idx])
            if prox is not None:
                g.buffer += prox[0] * (out.buffer - prox[1].buffer)
            total += loss * len(idx)
            if hp.learning_rate:
                opt.step(out, g.buffer)
        losses.append(total / n)
        if on_epoch is not None:
            on_epoch(epoch, out)
    return out, losses


def train_local(w: ModelWeights, data, hp: HyperParams,
                prox: Optional[tuple[float, ModelWeights]] = None,
                seed: Optional[int] = None) -> tuple[ModelWeights, float]:
    """Client update: ``hp.local_epochs`` epochs of SGD from ``w``.

    Momentum buffers start at zero on every call.  Returns the trained
    weights and the mean cross-entropy of the final epoch.
    """
    out, losses = train_epochs(w, data, hp, hp.local_epochs, prox=prox, seed=seed)
    return out, losses[-1]


# ---------------------------------------------------------------- prediction


def topk_from_logits(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest logits per row; ties go to the smaller id."""
    logits = np.atleast_2d(logits)
    if not 1 <= k <= logits.shape[1]:
        raise ValueError(f"k must lie in [1, {logits.shape[1]}], got {k}")
    return np.argsort(-logits, axis=1, kind="stable")[:, :k]


def predict_topk(w: ModelWeights, window: Sequence[int], k: int) -> list[int]:
    return topk_from_logits(forward(w, window)[None, :], k)[0].tolist()


# ---------------------------------------------------------------- checkpoints


def checkpoint_bytes(w: ModelWeights) -> bytes:
    """Binary checkpoint, little-endian.

    Layout: ``b"FGCK"``, ``uint32`` version, ``uint64`` |L|, E, H, Z, then
    for each layer ``z = 1..Z`` a ``uint64`` length followed by that many
    ``float64`` values in ``flatten_layer`` order.
    """
    parts = [CHECKPOINT_MAGIC, struct.pack("<I4Q", CHECKPOINT_VERSION, *w.dims, N_LAYERS)]
    for z in range(1, N_LAYERS + 1):
        flat = w.flatten_layer(z)
        parts.append(struct.pack("<Q", flat.size))
        parts.append(flat.astype("<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(w: ModelWeights, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(w))


def load_checkpoint(path) -> ModelWeights:
    return checkpoint_from_bytes(Path(path).read_bytes(), str(path))


def checkpoint_from_bytes(raw: bytes, name: str = "checkpoint") -> ModelWeights:
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{name}: not a model checkpoint")
    version, L, E, H, Z = struct.unpack_from("<I4Q", raw, 4)
    if version != CHECKPOINT_VERSION or Z != N_LAYERS:
        raise ValueError(f"{name}: unsupported checkpoint version {version} / Z={Z}")
    offset = 4 + struct.calcsize("<I4Q")
    chunks = []
    for _ in range(Z):
        (n,) = struct.unpack_from("<Q", raw, offset)
        offset += 8
        chunks.append(np.frombuffer(raw, dtype="<f8", count=n, offset=offset))
        offset += 8 * n
    return ModelWeights(L, E, H, buffer=np.concatenate(chunks).astype(np.float64))

