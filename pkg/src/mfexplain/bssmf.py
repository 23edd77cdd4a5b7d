"""Bounded simplex-structured matrix factorization.

The ratings matrix ``X`` (items x users) is approximated on its observed
entries by ``W @ H`` where every entry of ``W`` lies in ``[lo, hi]`` and every
column of ``H`` lies on the probability simplex. Each column of ``W`` is the
rating profile of a latent user type; each column of ``H`` mixes those types
into one user, so every prediction is a convex combination of in-range scores.

Fitting alternates projected-gradient steps on ``W`` (box projection) and on
the columns of ``H`` (simplex projection). Every step is accepted only under an
Armijo sufficient-decrease test, which makes the objective trajectory
non-increasing.
"""

from __future__ import annotations

import hashlib
import json
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import RatingDataset
from .errors import (
    DegenerateData,
    DimensionMismatch,
    EmptyInput,
    IndexOutOfRange,
    NonFiniteInput,
)

MAX_BACKTRACKS = 60


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------

def project_box(v, lo: float, hi: float) -> np.ndarray:
    if lo > hi:
        raise ValueError(f"empty box [{lo}, {hi}]")
    return np.clip(np.asarray(v, dtype=float), lo, hi)


def project_simplex_columns(V: np.ndarray) -> np.ndarray:
    """Euclidean projection of every column of ``V`` onto the probability simplex.

    Sort-based threshold search: with ``u`` the column sorted in decreasing
    order, the threshold is ``tau = (sum(u[:k]) - 1) / k`` for the largest
    ``k`` with ``u[k-1] > tau``, and the projection is ``max(v - tau, 0)``.
    """
    V = np.asarray(V, dtype=float)
    r = V.shape[0]
    U = -np.sort(-V, axis=0)
    css = np.cumsum(U, axis=0) - 1.0
    k = np.arange(1, r + 1, dtype=float)[:, None]
    cond = U - css / k > 0
    # cond is true on a prefix; its length is the support size
    rho = r - np.argmax(cond[::-1], axis=0)
    tau = css[rho - 1, np.arange(V.shape[1])] / rho
    out = np.maximum(V - tau, 0.0)
    # undo cancellation error in v - tau when |v| is large
    out /= out.sum(axis=0)
    # points already on the simplex (up to summation rounding) are fixed points
    feasible = (V.min(axis=0) >= 0) & (np.abs(V.sum(axis=0) - 1.0) <= 4 * r * np.finfo(float).eps)
    out[:, feasible] = V[:, feasible]
    return out


def project_simplex(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("project_simplex expects a non-empty vector")
    if not np.all(np.isfinite(v)):
        raise NonFiniteInput("simplex projection of a non-finite vector")
    return project_simplex_columns(v[:, None])[:, 0]


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FactorModel:
    W: np.ndarray
    H: np.ndarray
    lo: float = 1.0
    hi: float = 5.0
    item_ids: np.ndarray | None = None
    user_ids: np.ndarray | None = None

    def __post_init__(self):
        W = np.array(self.W, dtype=float)
        H = np.array(self.H, dtype=float)
        if W.ndim != 2 or H.ndim != 2 or W.shape[1] != H.shape[0] or W.shape[1] < 1:
            raise DimensionMismatch(f"W {W.shape} and H {H.shape} are not conformable")
        item_ids = np.arange(W.shape[0]) if self.item_ids is None else np.asarray(self.item_ids, np.int64)
        user_ids = np.arange(H.shape[1]) if self.user_ids is None else np.asarray(self.user_ids, np.int64)
        if item_ids.shape != (W.shape[0],) or user_ids.shape != (H.shape[1],):
            raise DimensionMismatch("id arrays do not match the factor shapes")
        for name, arr in (("W", W), ("H", H), ("item_ids", item_ids), ("user_ids", user_ids)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_item_pos", {int(i): k for k, i in enumerate(item_ids)})
        object.__setattr__(self, "_user_pos", {int(u): k for k, u in enumerate(user_ids)})

    @property
    def r(self) -> int:
        return self.W.shape[1]

    @property
    def n_items(self) -> int:
        return self.W.shape[0]

    @property
    def n_users(self) -> int:
        return self.H.shape[1]

    def item_index(self, item_id: int) -> int:
        try:
            return self._item_pos[int(item_id)]
        except KeyError:
            raise IndexOutOfRange(f"item {item_id} not in model") from None

    def user_index(self, user_id: int) -> int:
        try:
            return self._user_pos[int(user_id)]
        except KeyError:
            raise IndexOutOfRange(f"user {user_id} not in model") from None

    def check_invariants(self, atol: float = 1e-12) -> None:
        """Raise ``AssertionError`` if the box or simplex constraints are violated."""
        assert self.r >= 1
        assert self.W.min() >= self.lo and self.W.max() <= self.hi, "W outside bounds"
        assert self.H.min() >= 0.0, "negative mixture weight"
        assert np.abs(self.H.sum(axis=0) - 1.0).max() <= atol, "H column off the simplex"

    # -- persistence -------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "lo": self.lo,
            "hi": self.hi,
            "r": self.r,
            "W": self.W.tolist(),
            "H": self.H.T.tolist(),
            "item_ids": self.item_ids.tolist(),
            "user_ids": self.user_ids.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FactorModel":
        W = np.array(doc["W"], dtype=float).reshape(-1, doc["r"])
        H = np.array(doc["H"], dtype=float).reshape(-1, doc["r"]).T
        return cls(W, H, float(doc["lo"]), float(doc["hi"]), doc["item_ids"], doc["user_ids"])

    def dumps(self) -> str:
        # repr-based float formatting round-trips exactly
        return json.dumps(self.to_json(), separators=(",", ":")) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FactorModel":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()


@dataclass(frozen=True)
class FitConfig:
    r: int = 5
    max_outer: int = 500
    rel_tol: float = 1e-5
    seed: int = 0
    shrink: float = 0.5
    decrease: float = 1e-4
    lo: float = 1.0
    hi: float = 5.0
    inner_iters: int = 1

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("rank must be at least 1")
        if self.max_outer < 1:
            raise ValueError("max_outer must be at least 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")
        if not 0 < self.decrease < 1:
            raise ValueError("decrease constant must lie in (0, 1)")
        if self.lo > self.hi:
            raise ValueError("lo must not exceed hi")
        if self.inner_iters < 1:
            raise ValueError("inner_iters must be at least 1")


@dataclass
class FitReport:
    objective: list[float] = field(default_factory=list)
    train_rmse: float = float("nan")
    iterations: int = 0
    stop_reason: str = "cap"

    def to_json(self) -> dict:
        return {
            "objective": self.objective,
            "train_rmse": self.train_rmse,
            "iterations": self.iterations,
            "stop_reason": self.stop_reason,
        }


# ---------------------------------------------------------------------------
# objective and fitting
# ---------------------------------------------------------------------------

def _column_losses(X, M, W, H) -> np.ndarray:
    R = np.where(M, X - W @ H, 0.0)
    return 0.5 * np.einsum("ij,ij->j", R, R)


def _total(col_losses: np.ndarray) -> float:
    # one fixed summation order everywhere keeps the trajectory exactly monotone
    return float(np.sum(col_losses))


def objective(train: RatingDataset, model: FactorModel) -> float:
    """Half the sum of squared residuals over the observed entries."""
    try:
        rows = np.array([model.item_index(i) for i in train.items.tolist()], dtype=np.int64)
        cols = np.array([model.user_index(u) for u in train.users.tolist()], dtype=np.int64)
    except IndexOutOfRange as exc:
        raise DimensionMismatch(str(exc)) from None
    pred = np.einsum("kt,tk->k", model.W[rows], model.H[:, cols])
    res = train.ratings - pred
    return 0.5 * float(res @ res)


def _step_W(X, M, W, H, losses, step, cfg):
    R = np.where(M, W @ H - X, 0.0)
    G = R @ H.T
    f0 = _total(losses)
    t = step
    for _ in range(MAX_BACKTRACKS):
        Wn = np.clip(W - t * G, cfg.lo, cfg.hi)
        D = Wn - W
        slope = float(np.sum(G * D))
        if slope == 0.0:
            return W, losses, step
        new = _column_losses(X, M, Wn, H)
        if _total(new) <= f0 + cfg.decrease * slope:
            return Wn, new, t / cfg.shrink
        t *= cfg.shrink
    return W, losses, step


def _step_H(X, M, W, H, losses, steps, cfg):
    R = np.where(M, W @ H - X, 0.0)
    G = W.T @ R
    H = H.copy()
    losses = losses.copy()
    steps = steps.copy()
    t = steps.copy()
    pending = np.arange(H.shape[1])
    for _ in range(MAX_BACKTRACKS):
        if pending.size == 0:
            break
        Hp, Gp = H[:, pending], G[:, pending]
        Hn = project_simplex_columns(Hp - t[pending] * Gp)
        slope = np.einsum("ij,ij->j", Gp, Hn - Hp)
        new = _column_losses(X[:, pending], M[:, pending], W, Hn)
        ok = (new <= losses[pending] + cfg.decrease * slope) | (slope == 0.0)
        moved = ok & (slope != 0.0)
        acc = pending[moved]
        H[:, acc] = Hn[:, moved]
        losses[acc] = new[moved]
        steps[acc] = t[acc] / cfg.shrink
        t[pending[~ok]] *= cfg.shrink
        pending = pending[~ok]
    return H, losses, steps


def fit(train: RatingDataset, config: FitConfig = FitConfig(),
        item_ids: Sequence[int] | None = None, user_ids: Sequence[int] | None = None,
        callback: Callable[[int, np.ndarray, np.ndarray, float], None] | None = None,
        ) -> tuple[FactorModel, FitReport]:
    """Fit the factorization on the observed ratings of ``train``.

    ``item_ids``/``user_ids`` fix the row/column order (defaults: the sorted
    ids present in ``train``). See :func:`fit_matrix` for ``callback``.
    """
    item_ids = train.item_ids if item_ids is None else np.asarray(item_ids, np.int64)
    user_ids = train.user_ids if user_ids is None else np.asarray(user_ids, np.int64)
    X, M = train.dense(item_ids, user_ids)
    return fit_matrix(X, M, config, item_ids, user_ids, callback)


def fit_matrix(X: np.ndarray, mask: np.ndarray | None = None, config: FitConfig = FitConfig(),
               item_ids=None, user_ids=None,
               callback: Callable[[int, np.ndarray, np.ndarray, float], None] | None = None,
               ) -> tuple[FactorModel, FitReport]:
    """Fit ``X ~ W @ H`` on the entries where ``mask`` is true (all entries if ``mask`` is None).

    ``callback(iteration, W, H, objective)`` runs after initialization
    (iteration 0) and after every outer iteration.
    """
    cfg = config
    X = np.asarray(X, dtype=float)
    M = np.ones(X.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if X.ndim != 2 or M.shape != X.shape:
        raise DimensionMismatch(f"X {X.shape} and mask {M.shape} differ")
    if X.size == 0:
        raise DegenerateData("empty training set")
    if not np.all(np.isfinite(X[M])):
        raise NonFiniteInput("non-finite observed ratings")
    X = np.where(M, X, 0.0)
    if not M.any(axis=1).all():
        raise DegenerateData(f"item rows without observations: {np.flatnonzero(~M.any(axis=1))[:10].tolist()}")
    if not M.any(axis=0).all():
        raise DegenerateData(f"user columns without observations: {np.flatnonzero(~M.any(axis=0))[:10].tolist()}")

    m, n = X.shape
    rng = np.random.default_rng(cfg.seed)
    W = rng.uniform(cfg.lo, cfg.hi, size=(m, cfg.r))
    H = np.full((cfg.r, n), 1.0 / cfg.r)
    losses = _column_losses(X, M, W, H)
    # initial steps from the Lipschitz bound of the full unmasked problem
    step_W = 1.0 / max(np.linalg.norm(H, 2) ** 2, 1e-12)
    steps_H = np.full(n, 1.0 / max(np.linalg.norm(W, 2) ** 2, 1e-12))

    report = FitReport()
    f = _total(losses)
    report.objective.append(f)
    if callback is not None:
        callback(0, W, H, f)

    for it in range(1, cfg.max_outer + 1):
        for _ in range(cfg.inner_iters):
            W, losses, step_W = _step_W(X, M, W, H, losses, step_W, cfg)
        for _ in range(cfg.inner_iters):
            H, losses, steps_H = _step_H(X, M, W, H, losses, steps_H, cfg)
        f_prev, f = f, _total(losses)
        report.objective.append(f)
        report.iterations = it
        if callback is not None:
            callback(it, W, H, f)
        if f == 0.0 or (f_prev - f) <= cfg.rel_tol * f_prev:
            report.stop_reason = "tolerance"
            break

    model = FactorModel(W, H, cfg.lo, cfg.hi, item_ids, user_ids)
    report.train_rmse = float(np.sqrt(2.0 * f / M.sum()))
    return model, report


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

def convex_scores(W: np.ndarray, H: np.ndarray) -> np.ndarray:
    """``W @ H`` for simplex-column ``H``, guaranteed inside ``[W.min(), W.max()]``.

    Floating-point rounding can push a convex combination of boundary values
    one ulp past the bound. Such entries are recomputed in exact rational
    arithmetic as ``sum(h * w) / sum(h)`` and rounded once, which cannot leave
    the range spanned by ``w``.
    """
    W = np.asarray(W, dtype=float)
    H = np.asarray(H, dtype=float)
    P = W @ H
    lo = W.min(axis=1, keepdims=True)
    hi = W.max(axis=1, keepdims=True)
    rows, cols = np.nonzero((P < lo) | (P > hi))
    for i, j in zip(rows.tolist(), cols.tolist()):
        h = [Fraction(x) for x in H[:, j].tolist()]
        num = sum((Fraction(w) * x for w, x in zip(W[i].tolist(), h)), Fraction(0))
        P[i, j] = float(num / sum(h))
    return P


def predict(model: FactorModel, user: int) -> np.ndarray:
    """Scores of every item for the user at column ``user``; no clipping is applied."""
    if not 0 <= user < model.n_users:
        raise IndexOutOfRange(f"user index {user} outside 0..{model.n_users - 1}")
    return convex_scores(model.W, model.H[:, user:user + 1])[:, 0]


def predict_all(model: FactorModel) -> np.ndarray:
    """Items-by-users matrix of predicted scores."""
    return convex_scores(model.W, model.H)


def rmse(model: FactorModel, triples) -> float:
    """Root mean squared error over ``(user_id, item_id, rating)`` triples."""
    triples = list(triples)
    if not triples:
        raise EmptyInput("rmse of an empty triple list")
    arr = np.asarray(triples, dtype=float)
    rows = np.array([model.item_index(i) for i in arr[:, 1].astype(np.int64)])
    cols = np.array([model.user_index(u) for u in arr[:, 0].astype(np.int64)])
    pred = np.einsum("kt,tk->k", model.W[rows], model.H[:, cols])
    err = arr[:, 2] - pred
    return float(np.sqrt(np.mean(err * err)))


def user_type_scores(model: FactorModel, t: int) -> np.ndarray:
    if not 0 <= t < model.r:
        raise IndexOutOfRange(f"type index {t} outside 0..{model.r - 1}")
    return model.W[:, t].copy()
