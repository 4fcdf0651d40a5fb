"""Attention-based aspect extraction: forward pass, losses, gradients, training.

Gradients are derived by hand for the whole batched loss and checked against
central differences in the test suite.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ._anchor import anchored_penalty_grad
from .numerics import (
    l2_normalize_rows,
    make_rng,
    normalize_rows_backward,
    softmax,
    softmax_rows,
)

log = logging.getLogger(__name__)

MODEL_MAGIC = "anchored-absa/abae"
MODEL_VERSION = 1


class EmptySentenceError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class AbaeParams:
    T: np.ndarray  # k x d aspect embeddings
    M: np.ndarray  # d x d attention form
    W: np.ndarray  # k x d
    b: np.ndarray  # k

    def __post_init__(self):
        k, d = self.T.shape
        if self.M.shape != (d, d) or self.W.shape != (k, d) or self.b.shape != (k,):
            raise ValueError(
                f"inconsistent shapes T{self.T.shape} M{self.M.shape} W{self.W.shape} b{self.b.shape}"
            )

    @property
    def k(self) -> int:
        return self.T.shape[0]

    @property
    def d(self) -> int:
        return self.T.shape[1]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"T": self.T, "M": self.M, "W": self.W, "b": self.b}

    def copy(self) -> "AbaeParams":
        return AbaeParams(*(np.array(v, copy=True) for v in (self.T, self.M, self.W, self.b)))


@dataclass
class AbaeHyper:
    k: int = 14
    lam: float = 1.0
    negatives: int = 20
    epochs: int = 15
    batch_size: int = 50
    learning_rate: float = 0.001
    sigma: float = 0.1
    unit_vectors: bool = True  # normalize r_s, z_s, n_i inside the hinge
    bounded_attention: bool = True  # squash attention logits with tanh
    kmeans_restarts: int = 10
    kmeans_iters: int = 100
    init_scale: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.negatives < 1:
            raise ValueError("negatives must be >= 1")
        if self.lam < 0 or self.sigma < 0:
            raise ValueError("lam and sigma must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")


@dataclass
class ForwardTrace:
    y_s: np.ndarray
    a: np.ndarray
    z_s: np.ndarray
    p_t: np.ndarray
    r_s: np.ndarray


def _matrix(E) -> np.ndarray:
    return np.asarray(getattr(E, "vectors", E), dtype=np.float64)


def _word_vectors(ids: Sequence[int], E) -> np.ndarray:
    if len(ids) == 0:
        raise EmptySentenceError("sentence has no in-vocabulary words")
    return _matrix(E)[np.asarray(ids, dtype=np.int64)]


def sentence_average(ids: Sequence[int], E) -> np.ndarray:
    return _word_vectors(ids, E).mean(axis=0)


def attention(ids: Sequence[int], E, M: np.ndarray, bounded: bool = False) -> np.ndarray:
    X = _word_vectors(ids, E)
    y = X.mean(axis=0)
    logits = X @ (M @ y)
    return softmax(np.tanh(logits) if bounded else logits)


def weighted_embedding(ids: Sequence[int], a, E) -> np.ndarray:
    X = _word_vectors(ids, E)
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (X.shape[0],):
        raise ValueError(f"{a.shape[0]} attention weights for {X.shape[0]} words")
    return a @ X


def aspect_probs(z_s, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    z_s = np.asarray(z_s, dtype=np.float64)
    if W.shape[1] != z_s.shape[0] or b.shape != (W.shape[0],):
        raise ValueError(f"shape mismatch: W{W.shape}, z{z_s.shape}, b{b.shape}")
    return softmax(W @ z_s + b)


def reconstruct(p_t, T: np.ndarray) -> np.ndarray:
    p_t = np.asarray(p_t, dtype=np.float64)
    if p_t.shape != (T.shape[0],):
        raise ValueError(f"{p_t.shape[0]} aspect weights for {T.shape[0]} aspects")
    return T.T @ p_t


def forward(ids: Sequence[int], params: AbaeParams, E, bounded: bool = False) -> ForwardTrace:
    X = _word_vectors(ids, E)
    y = X.mean(axis=0)
    logits = X @ (params.M @ y)
    a = softmax(np.tanh(logits) if bounded else logits)
    z = a @ X
    p = softmax(params.W @ z + params.b)
    return ForwardTrace(y, a, z, p, params.T.T @ p)


def hinge_loss(r_s, z_s, negatives) -> float:
    """sum_i max(0, 1 - r.z + r.n_i) over the negatives of one sentence."""
    r_s = np.asarray(r_s, dtype=np.float64)
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    margins = 1.0 - r_s @ np.asarray(z_s, dtype=np.float64) + negatives @ r_s
    return float(np.maximum(margins, 0.0).sum())


def _ortho(T: np.ndarray) -> tuple[float, np.ndarray]:
    Tn = l2_normalize_rows(T)
    G = Tn @ Tn.T - np.eye(T.shape[0])
    U = float(np.sqrt(np.sum(G * G)))
    if U == 0.0:
        # the norm is not differentiable at 0; use the zero subgradient
        return U, np.zeros_like(T)
    g_Tn = 2.0 * (G / U) @ Tn
    return U, normalize_rows_backward(T, g_Tn)


def ortho_penalty(T: np.ndarray) -> float:
    """Frobenius norm of (T_n T_n^T - I), T_n the row-normalized aspect matrix."""
    return _ortho(np.asarray(T, dtype=np.float64))[0]


def total_loss(J: float, U: float, lam: float, K: float | None = None, sigma: float | None = None) -> float:
    if lam < 0 or (sigma is not None and sigma < 0):
        raise ValueError("loss weights must be non-negative")
    L = J + lam * U
    if K is not None and sigma:
        L += sigma * K
    return L


@dataclass
class LossParts:
    total: float
    J: float
    U: float
    K: float


def pad_batch(id_lists: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    L = max(len(ids) for ids in id_lists)
    idx = np.zeros((len(id_lists), L), dtype=np.int64)
    mask = np.zeros((len(id_lists), L))
    for i, ids in enumerate(id_lists):
        idx[i, : len(ids)] = ids
        mask[i, : len(ids)] = 1.0
    return idx, mask


def batch_loss_and_grad(
    params: AbaeParams,
    X: np.ndarray,
    mask: np.ndarray,
    neg: np.ndarray,
    lam: float,
    unit_vectors: bool = True,
    sigma: float = 0.0,
    anchor_rows: np.ndarray | None = None,
    anchor_mask: np.ndarray | None = None,
    bounded_attention: bool = False,
) -> tuple[LossParts, dict[str, np.ndarray]]:
    """Loss J + lam*U (+ sigma*K) and gradients for one padded batch.

    X: (B, L, d) word vectors with padding rows zeroed, mask: (B, L),
    neg: (B, m, d) negative-sentence averages. J is summed over the batch.
    """
    T, M, W, b = params.T, params.M, params.W, params.b
    counts = mask.sum(axis=1)
    y = X.sum(axis=1) / counts[:, None]
    u = y @ M.T
    logits = np.einsum("bld,bd->bl", X, u)
    if bounded_attention:
        logits = np.tanh(logits)
    a = softmax_rows(logits, mask)
    z = np.einsum("bl,bld->bd", a, X)
    q = z @ W.T + b
    p = softmax_rows(q)
    r = p @ T

    if unit_vectors:
        rh, zh = l2_normalize_rows(r), l2_normalize_rows(z)
        nh = neg / np.linalg.norm(neg, axis=-1, keepdims=True)
    else:
        rh, zh, nh = r, z, neg
    pos_score = np.einsum("bd,bd->b", rh, zh)
    neg_score = np.einsum("bmd,bd->bm", nh, rh)
    margins = 1.0 - pos_score[:, None] + neg_score
    active = (margins > 0).astype(np.float64)
    J = float(np.sum(margins * active))

    g_rh = np.einsum("bm,bmd->bd", active, nh) - active.sum(axis=1)[:, None] * zh
    g_zh = -active.sum(axis=1)[:, None] * rh
    if unit_vectors:
        g_r = normalize_rows_backward(r, g_rh)
        g_z = normalize_rows_backward(z, g_zh)
    else:
        g_r, g_z = g_rh, g_zh

    K = 0.0
    if sigma > 0 and anchor_rows is not None:
        K, g_r_anchor = anchored_penalty_grad(r, anchor_rows, anchor_mask)
        g_r = g_r + sigma * g_r_anchor

    U, g_T = _ortho(T)
    g_T = lam * g_T + p.T @ g_r
    g_p = g_r @ T.T
    g_q = p * (g_p - np.sum(p * g_p, axis=1, keepdims=True))
    g_W = g_q.T @ z
    g_b = g_q.sum(axis=0)
    g_z = g_z + g_q @ W
    g_a = np.einsum("bld,bd->bl", X, g_z)
    g_logits = a * (g_a - np.sum(a * g_a, axis=1, keepdims=True))
    if bounded_attention:
        g_logits = g_logits * (1.0 - logits * logits)
    g_u = np.einsum("bl,bld->bd", g_logits, X)
    g_M = g_u.T @ y

    total = total_loss(J, U, lam, K if sigma > 0 else None, sigma)
    return LossParts(total, J, U, K), {"T": g_T, "M": g_M, "W": g_W, "b": g_b}


def negative_samples(anchor_idx: Sequence[int], corpus_size: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """m uniform draws per anchor from the other corpus sentences."""
    if corpus_size < 2:
        raise ValueError("negative sampling needs at least two sentences")
    anchor_idx = np.asarray(anchor_idx, dtype=np.int64)
    draws = rng.integers(0, corpus_size - 1, size=(len(anchor_idx), m))
    return draws + (draws >= anchor_idx[:, None])


def kmeans(X: np.ndarray, k: int, restarts: int = 10, max_iter: int = 100, seed: int = 0) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; returns the lowest-inertia centroids."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < k:
        raise ValueError(f"cannot form {k} clusters from {n} points")
    rng = make_rng(seed)
    sq = np.sum(X * X, axis=1)
    best, best_inertia = None, np.inf
    for _ in range(restarts):
        C = np.empty((k, X.shape[1]))
        C[0] = X[rng.integers(n)]
        dist = np.maximum(sq - 2 * X @ C[0] + C[0] @ C[0], 0.0)
        for j in range(1, k):
            total = dist.sum()
            pick = rng.choice(n, p=dist / total) if total > 0 else rng.integers(n)
            C[j] = X[pick]
            dist = np.minimum(dist, np.maximum(sq - 2 * X @ C[j] + C[j] @ C[j], 0.0))
        labels = None
        for _ in range(max_iter):
            D = sq[:, None] - 2 * X @ C.T + np.sum(C * C, axis=1)[None, :]
            new_labels = np.argmin(D, axis=1)
            if labels is not None and np.array_equal(new_labels, labels):
                break
            labels = new_labels
            for j in range(k):
                members = labels == j
                if members.any():
                    C[j] = X[members].mean(axis=0)
        D = sq[:, None] - 2 * X @ C.T + np.sum(C * C, axis=1)[None, :]
        inertia = float(np.maximum(D.min(axis=1), 0.0).sum())
        if inertia < best_inertia:
            best, best_inertia = C.copy(), inertia
    return best


def init_params(E, hyper: AbaeHyper) -> AbaeParams:
    """k-means aspect rows over unit word vectors, identity M, small uniform W and b."""
    E = _matrix(E)
    rng = make_rng(hyper.seed)
    centroids = kmeans(
        l2_normalize_rows(E), hyper.k, hyper.kmeans_restarts, hyper.kmeans_iters, seed=int(rng.integers(2**63))
    )
    T = l2_normalize_rows(centroids)
    d = E.shape[1]
    s = hyper.init_scale
    W = rng.uniform(-s, s, size=(hyper.k, d))
    b = rng.uniform(-s, s, size=hyper.k)
    return AbaeParams(T, np.eye(d), W, b)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            p -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


@dataclass
class TrainResult:
    params: AbaeParams
    loss_history: list[float]
    component_history: list[dict[str, float]] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)


def _ids_of(s) -> tuple[int, ...]:
    return tuple(getattr(s, "token_ids", s))


def train(sentences: Sequence, E, hyper: AbaeHyper | None = None, anchors=None) -> TrainResult:
    """Mini-batch Adam on J + lam*U, plus sigma*K when ``anchors`` is given.

    ``sentences`` are encoded :class:`~anchored_absa.corpus.Sentence` objects
    (or plain id sequences). ``anchors`` needs ``rows`` (N, d) and ``mask``
    (N,) aligned with ``sentences``; its own ``sigma`` overrides
    ``hyper.sigma`` when present. Sentences without in-vocabulary words are
    skipped and reported in ``TrainResult.skipped``. E is never updated.
    """
    hyper = hyper or AbaeHyper()
    E = _matrix(E)
    all_ids = [_ids_of(s) for s in sentences]
    keep = [i for i, ids in enumerate(all_ids) if len(ids)]
    skipped = [i for i, ids in enumerate(all_ids) if not len(ids)]
    if skipped:
        log.warning("skipping %d sentences with no in-vocabulary words", len(skipped))
    ids = [all_ids[i] for i in keep]
    N = len(ids)
    if N < 2:
        raise ValueError("training needs at least two non-empty sentences")

    sigma = float(getattr(anchors, "sigma", hyper.sigma)) if anchors is not None else 0.0
    use_anchor = anchors is not None and sigma > 0
    if use_anchor:
        a_rows = np.asarray(anchors.rows, dtype=np.float64)
        a_mask = np.asarray(anchors.mask, dtype=np.float64)
        if a_rows.shape != (len(all_ids), E.shape[1]) or a_mask.shape != (len(all_ids),):
            raise ValueError("anchor rows/mask must align with the training sentences")
        a_rows, a_mask = a_rows[keep], a_mask[keep]

    params = init_params(E, hyper)
    rng = make_rng(hyper.seed + 1)
    averages = np.stack([E[np.asarray(s)].mean(axis=0) for s in ids])
    p = params.as_dict()
    opt = Adam(p, lr=hyper.learning_rate)
    history, parts_history = [], []
    for epoch in range(hyper.epochs):
        order = rng.permutation(N)
        sums = np.zeros(4)
        for bi, start in enumerate(range(0, N, hyper.batch_size)):
            batch = order[start : start + hyper.batch_size]
            idx, mask = pad_batch([ids[i] for i in batch])
            X = E[idx] * mask[:, :, None]
            neg = averages[negative_samples(batch, N, hyper.negatives, rng)]
            parts, grads = batch_loss_and_grad(
                params,
                X,
                mask,
                neg,
                hyper.lam,
                hyper.unit_vectors,
                sigma if use_anchor else 0.0,
                a_rows[batch] if use_anchor else None,
                a_mask[batch] if use_anchor else None,
                hyper.bounded_attention,
            )
            if not np.isfinite(parts.total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDivergedError(epoch + 1, bi + 1, parts.total)
            opt.step(p, grads)
            sums += (parts.total, parts.J, parts.U * len(batch), parts.K)
        history.append(float(sums[0] / N))
        parts_history.append({"J": float(sums[1] / N), "U": float(sums[2] / N), "K": float(sums[3] / N)})
        log.info("abae epoch %d/%d loss %.4f", epoch + 1, hyper.epochs, history[-1])
    return TrainResult(params, history, parts_history, skipped)


def infer(ids: Sequence[int], params: AbaeParams, E, bounded: bool = False) -> tuple[int, np.ndarray]:
    """Most probable aspect (lowest index wins ties) and the full distribution."""
    p = forward(ids, params, E, bounded).p_t
    return int(np.argmax(p)), p


def predict(sentences: Sequence, params: AbaeParams, E, bounded: bool = False) -> list[int | None]:
    """Batch inference; ``None`` for sentences with no in-vocabulary words."""
    out: list[int | None] = []
    for s in sentences:
        ids = _ids_of(s)
        out.append(infer(ids, params, E, bounded)[0] if len(ids) else None)
    return out


def top_words(T: np.ndarray, E, n: int, words: Sequence[str] | None = None) -> list[list]:
    """Per aspect row, the n vocabulary entries of highest cosine, descending.

    Returns words when ``words`` (or an EmbeddingMatrix) is available, ids otherwise.
    """
    if words is None:
        words = getattr(E, "words", None)
    mat = _matrix(E)
    if n > mat.shape[0]:
        raise ValueError(f"asked for {n} words from a vocabulary of {mat.shape[0]}")
    if n <= 0:
        return [[] for _ in range(T.shape[0])]
    sims = l2_normalize_rows(T) @ l2_normalize_rows(mat).T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :n]
    if words is None:
        return [row.tolist() for row in order]
    return [[words[i] for i in row] for row in order]


def save_model(params: AbaeParams, hyper: AbaeHyper) -> bytes:
    """Header line of JSON, then the four tensors as little-endian float64."""
    tensors = params.as_dict()
    header = {
        "format": MODEL_MAGIC,
        "version": MODEL_VERSION,
        "k": params.k,
        "d": params.d,
        "lambda": hyper.lam,
        "hyper": asdict(hyper),
        "tensors": [[name, list(t.shape)] for name, t in tensors.items()],
    }
    buf = io.BytesIO()
    buf.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
    for t in tensors.values():
        buf.write(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return buf.getvalue()


def load_model(data: bytes) -> tuple[AbaeParams, AbaeHyper]:
    nl = data.find(b"\n")
    if nl < 0:
        raise ValueError("not an ABAE model file")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (ValueError, UnicodeDecodeError):
        raise ValueError("not an ABAE model file") from None
    if header.get("format") != MODEL_MAGIC:
        raise ValueError("not an ABAE model file")
    if header.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {header.get('version')}")
    offset = nl + 1
    tensors = {}
    for name, shape in header["tensors"]:
        size = int(np.prod(shape)) * 8
        chunk = data[offset : offset + size]
        if len(chunk) != size:
            raise ValueError(f"model file truncated in tensor {name}")
        tensors[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        offset += size
    if offset != len(data):
        raise ValueError("trailing bytes after model tensors")
    return AbaeParams(**tensors), AbaeHyper(**header["hyper"])
