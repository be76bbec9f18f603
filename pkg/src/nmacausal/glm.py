"""Small-sample regression engine.

Weighted least squares, fractional-response (quasi-binomial) logistic
regression by IRLS, the one-parameter offset logistic fluctuation used by
TMLE, and L1-penalized logistic regression by coordinate descent.

The public functions fit a single model.  The ``*_batch`` helpers fit the
same design against a stack of weight vectors at once; every bootstrap
replicate is such a weight vector (study multiplicities), so the estimators
run the whole bootstrap through one call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, logit, xlogy

__all__ = [
    "GRAD_TOL",
    "MAX_ITER",
    "ETA_CAP",
    "DesignMatrix",
    "FitResult",
    "FluctuationFit",
    "SingularDesignError",
    "FluctuationError",
    "fit_weighted_linear",
    "fit_logistic",
    "fit_fluctuation",
    "fit_lasso_logistic",
    "lasso_lambda_grid",
    "select_lasso_lambda",
    "logistic_objective",
    "logistic_gradient",
    "lasso_kkt",
]

GRAD_TOL = 1e-8
MAX_ITER = 100
ETA_CAP = 30.0
# minimum eigenvalue of the Jacobi-scaled normal matrix
_RANK_TOL = 1e-11


class SingularDesignError(np.linalg.LinAlgError):
    """Design matrix is rank deficient under the supplied weights."""

    def __init__(self, columns: Sequence[str]):
        self.columns = tuple(columns)
        super().__init__(f"rank-deficient design; dependent columns: {', '.join(self.columns)}")


class FluctuationError(ArithmeticError):
    """The one-dimensional fluctuation regression has no finite solution."""

    def __init__(self, message: str, **diagnostics):
        self.diagnostics = diagnostics
        super().__init__(f"{message} {diagnostics}" if diagnostics else message)


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    columns: tuple[str, ...]

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.ndim != 2:
            raise ValueError("design matrix must be two-dimensional")
        cols = tuple(self.columns)
        if len(cols) != vals.shape[1]:
            raise ValueError(f"{vals.shape[1]} columns but {len(cols)} names")
        if len(set(cols)) != len(cols):
            raise ValueError("column names must be unique")
        if not np.all(np.isfinite(vals)):
            raise ValueError("design matrix has non-finite entries")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "columns", cols)

    @classmethod
    def from_columns(cls, columns: Mapping[str, Sequence[float]]) -> DesignMatrix:
        return cls(np.column_stack([np.asarray(v, dtype=float) for v in columns.values()]), tuple(columns))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _as_design(X) -> DesignMatrix:
    if isinstance(X, DesignMatrix):
        return X
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    return DesignMatrix(arr, tuple(f"x{j}" for j in range(arr.shape[1])))


@dataclass(frozen=True)
class FitResult:
    coef: np.ndarray
    columns: tuple[str, ...]
    converged: bool
    iterations: int
    deviance: float
    separated: bool = False
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def coefficients(self) -> dict[str, float]:
        return dict(zip(self.columns, self.coef.tolist()))

    def linear_predictor(self, X) -> np.ndarray:
        return _as_design(X).values @ self.coef


@dataclass(frozen=True)
class FluctuationFit:
    epsilon: float
    score: float
    iterations: int


# --------------------------------------------------------------------------- linear algebra


def _solve_normal(H: np.ndarray, g: np.ndarray, pin_empty: bool):
    """Solve ``H x = g`` for a stack of symmetric PSD matrices.

    Returns ``(x, ok)``; ``ok`` is False where ``H`` is numerically singular.
    With ``pin_empty`` a column with zero diagonal (carrying no weight) is
    pinned to zero instead of making the system singular.
    """
    H = np.array(H, dtype=float, copy=True)
    g = np.array(g, dtype=float, copy=True)
    p = H.shape[-1]
    diag = np.diagonal(H, axis1=-2, axis2=-1)
    empty = diag <= 0.0
    if pin_empty and empty.any():
        idx = np.nonzero(empty)
        H[idx + (idx[-1],)] = 1.0
        g[idx] = 0.0
        diag = np.diagonal(H, axis1=-2, axis2=-1)
    scale = 1.0 / np.sqrt(np.where(diag > 0, diag, 1.0))
    Hs = H * scale[..., :, None] * scale[..., None, :]
    ok = (diag > 0).all(axis=-1) & np.isfinite(Hs).all(axis=(-2, -1))
    x = np.zeros_like(g)
    if ok.any():
        lam_min = np.full(ok.shape, -1.0)
        lam_min[ok] = np.linalg.eigvalsh(Hs[ok])[..., 0]
        ok &= lam_min > _RANK_TOL * p
    if ok.any():
        ys = np.linalg.solve(Hs[ok], (g * scale)[ok][..., None])[..., 0]
        x[ok] = ys * scale[ok]
    return x, ok


def _dependent_columns(H: np.ndarray, columns: Sequence[str]) -> list[str]:
    diag = np.diag(H)
    if np.any(diag <= 0):
        return [c for c, d in zip(columns, diag) if d <= 0]
    s = 1.0 / np.sqrt(diag)
    vals, vecs = np.linalg.eigh(H * s[:, None] * s[None, :])
    v = vecs[:, 0]
    return [c for c, comp in zip(columns, v) if abs(comp) > 1e-6]


def _wls_batch(X: np.ndarray, y: np.ndarray, w: np.ndarray, pin_empty: bool = True):
    """Weighted least squares for weight stack ``w`` (..., n); ``y`` (..., n)."""
    Xw = w[..., :, None] * X
    H = np.swapaxes(Xw, -1, -2) @ X
    g = np.einsum("...ni,...n->...i", Xw, np.broadcast_to(y, w.shape))
    return _solve_normal(H, g, pin_empty)


def fit_weighted_linear(X, y, w=None) -> FitResult:
    """Minimize ``sum_i w_i (y_i - x_i' beta)^2`` through the normal equations."""
    D = _as_design(X)
    y = np.asarray(y, dtype=float)
    n, p = D.shape
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    if not (len(y) == len(w) == n):
        raise ValueError("X, y and w must have the same number of rows")
    if n < p:
        raise ValueError(f"{n} rows cannot identify {p} coefficients")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    if not np.all(np.isfinite(y)):
        raise ValueError("response has non-finite entries")
    beta, ok = _wls_batch(D.values, y, w, pin_empty=False)
    if not ok:
        Xw = w[:, None] * D.values
        raise SingularDesignError(_dependent_columns(Xw.T @ D.values, D.columns))
    # one step of iterative refinement keeps the residual orthogonality tight
    r = y - D.values @ beta
    delta, _ = _wls_batch(D.values, r, w, pin_empty=False)
    beta = beta + delta
    rss = float(np.sum(w * (y - D.values @ beta) ** 2))
    return FitResult(beta, D.columns, True, 1, rss)


# --------------------------------------------------------------------------- logistic


def logistic_objective(beta, X, y, w, offset=None) -> float:
    """Weight-normalized quasi-binomial log-likelihood (to be maximized)."""
    X = _as_design(X).values
    eta = X @ np.asarray(beta, dtype=float) + (0.0 if offset is None else offset)
    w = np.asarray(w, dtype=float)
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))) / w.sum())


def logistic_gradient(beta, X, y, w, offset=None) -> np.ndarray:
    X = _as_design(X).values
    eta = X @ np.asarray(beta, dtype=float) + (0.0 if offset is None else offset)
    w = np.asarray(w, dtype=float)
    return X.T @ (w * (y - expit(eta))) / w.sum()


def _quasi_deviance(y, mu, w):
    dev = xlogy(y, y / mu) + xlogy(1 - y, (1 - y) / (1 - mu))
    return 2.0 * np.sum(w * dev, axis=-1)


def _loglik(eta, y, w, sw):
    return np.sum(w * (y * eta - np.logaddexp(0.0, eta)), axis=-1) / sw


def _logistic_batch(
    X: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    offset: np.ndarray | None = None,
    tol: float = GRAD_TOL,
    max_iter: int = MAX_ITER,
    pin_empty: bool = True,
):
    """Batched IRLS.  ``y``, ``w`` and ``offset`` broadcast over leading axes.

    Returns a dict with ``beta``, ``converged``, ``separated``, ``ok``,
    ``iterations`` and ``deviance`` arrays over the batch shape.
    """
    n, p = X.shape
    shape0 = np.broadcast_shapes(np.shape(y)[:-1], np.shape(w)[:-1],
                                 () if offset is None else np.shape(offset)[:-1])
    shape = shape0 or (1,)
    y = np.broadcast_to(y, shape + (n,))
    w = np.broadcast_to(w, shape + (n,))
    off = np.zeros(shape + (n,)) if offset is None else np.broadcast_to(offset, shape + (n,))
    sw = w.sum(axis=-1)
    sw_safe = np.where(sw > 0, sw, 1.0)
    beta = np.zeros(shape + (p,))
    ok = sw > 0
    active = ok.copy()
    iters = np.zeros(shape, dtype=int)

    def eta_of(b):
        return np.einsum("...p,np->...n", b, X) + off

    eta = eta_of(beta)
    ll = _loglik(eta, y, w, sw_safe)
    for _ in range(max_iter):
        mu = expit(np.clip(eta, -ETA_CAP, ETA_CAP))
        grad = np.einsum("...n,np->...p", w * (y - mu), X) / sw_safe[..., None]
        active &= np.max(np.abs(grad), axis=-1) >= tol
        if not active.any():
            break
        v = w * mu * (1.0 - mu)
        H = np.einsum("...n,ni,nj->...ij", v, X, X) / sw_safe[..., None, None]
        step, solved = _solve_normal(H, grad, pin_empty)
        ok &= solved | ~active
        active &= solved
        step = np.where(active[..., None], step, 0.0)
        iters += active
        # step halving until the quasi-likelihood does not decrease
        t = np.ones(shape)
        pending = active.copy()
        new_beta = beta.copy()
        new_eta = eta.copy()
        new_ll = ll.copy()
        for _ in range(30):
            cand = beta + t[..., None] * step
            cand_eta = eta_of(cand)
            cand_ll = _loglik(cand_eta, y, w, sw_safe)
            accept = pending & (cand_ll >= ll - 1e-15 * np.abs(ll))
            new_beta[accept] = cand[accept]
            new_eta[accept] = cand_eta[accept]
            new_ll[accept] = cand_ll[accept]
            pending &= ~accept
            if not pending.any():
                break
            t = np.where(pending, t * 0.5, t)
        # a step that cannot improve the objective means we are at the optimum
        active &= ~pending
        beta, eta, ll = new_beta, new_eta, new_ll
    mu = expit(np.clip(eta, -ETA_CAP, ETA_CAP))
    grad = np.einsum("...n,np->...p", w * (y - mu), X) / sw_safe[..., None]
    small_grad = np.max(np.abs(grad), axis=-1) < tol
    separated = np.any((np.abs(eta) >= ETA_CAP) & (w > 0), axis=-1)
    converged = ok & small_grad & ~separated
    out = {
        "beta": beta,
        "ok": ok,
        "converged": converged,
        "separated": separated,
        "iterations": iters,
        "deviance": _quasi_deviance(y, mu, w),
        "eta": eta,
    }
    if not shape0:
        out = {k: v[0] for k, v in out.items()}
    return out


def _check_response(y, w, n):
    y = np.asarray(y, dtype=float)
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    if not (len(y) == len(w) == n):
        raise ValueError("X, y and w must have the same number of rows")
    if np.any((y < 0) | (y > 1)) or not np.all(np.isfinite(y)):
        raise ValueError("logistic response must lie in [0, 1]")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    return y, w


def fit_logistic(X, y, w=None, offset=None, tol: float = GRAD_TOL, max_iter: int = MAX_ITER) -> FitResult:
    """Weighted quasi-binomial logistic regression with a fixed offset.

    ``y`` may be fractional.  Separation is not an error: the linear predictor
    is capped at +-30 and the result is returned with ``converged=False`` and
    ``separated=True``.
    """
    D = _as_design(X)
    n, _ = D.shape
    y, w = _check_response(y, w, n)
    off = None if offset is None else np.asarray(offset, dtype=float)
    res = _logistic_batch(D.values, y, w, off, tol=tol, max_iter=max_iter, pin_empty=False)
    if not res["ok"]:
        Xw = w[:, None] * D.values
        raise SingularDesignError(_dependent_columns(Xw.T @ D.values, D.columns))
    return FitResult(
        res["beta"], D.columns, bool(res["converged"]), int(res["iterations"]),
        float(res["deviance"]), bool(res["separated"]),
    )


def _loglink_batch(X, y, w, tol: float = 1e-10, max_iter: int = MAX_ITER):
    """Quasi-Poisson (log link) IRLS for weight stack ``w`` (B, n); ``y >= 0``.

    Returns ``(beta, ok, converged)``.  Columns without weighted support are
    pinned at zero.
    """
    B = w.shape[0]
    pos = np.maximum(y, 0.5 * np.min(y[y > 0]) if np.any(y > 0) else 1e-3)
    beta, ok = _wls_batch(X, np.log(pos), w)
    converged = np.zeros(B, dtype=bool)
    for _ in range(max_iter):
        eta = np.clip(beta @ X.T, -ETA_CAP, ETA_CAP)
        mu = np.exp(eta)
        z = eta + (y - mu) / mu
        new, ok_k = _wls_batch(X, z, w * mu)
        ok &= ok_k
        step = np.max(np.abs(new - beta), axis=-1)
        beta = np.where(converged[:, None], beta, new)
        converged |= step < tol * (1.0 + np.max(np.abs(beta), axis=-1))
        if converged.all():
            break
    return beta, ok, converged


# --------------------------------------------------------------------------- fluctuation


def _fluctuation_batch(y, offset, h, w, rtol: float = 1e-12, max_iter: int = 200):
    """Solve ``sum w h (y - expit(offset + eps h)) = 0`` for each batch member.

    Newton's method safeguarded by a bracket: the score is strictly
    decreasing in ``eps``, so every Newton iterate tightens one side and
    iterates that leave the bracket are replaced by bisection (or by
    expansion while one side is still open).
    """
    shape0 = np.broadcast_shapes(np.shape(y), np.shape(offset), np.shape(h), np.shape(w))[:-1]
    shape = shape0 or (1,)
    y, offset, h, w = (np.broadcast_to(a, shape + (np.shape(a)[-1],)) for a in (y, offset, h, w))
    wh = w * h
    tol = rtol * np.maximum(1.0, np.sum(np.abs(wh), axis=-1))
    eps = np.zeros(shape)
    lo = np.full(shape, -np.inf)
    hi = np.full(shape, np.inf)

    def score(e):
        mu = expit(offset + e[..., None] * h)
        return np.sum(wh * (y - mu), axis=-1), np.sum(wh * h * mu * (1 - mu), axis=-1)

    s, info = score(eps)
    done = (np.abs(s) <= tol) | (np.sum(w, axis=-1) <= 0)
    iters = np.zeros(shape, dtype=int)
    for _ in range(max_iter):
        if done.all():
            break
        lo = np.where(~done & (s > 0), eps, lo)
        hi = np.where(~done & (s < 0), eps, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = eps + s / info
            inside = np.isfinite(newton) & (newton > lo) & (newton < hi)
            width = np.maximum(1.0, np.abs(eps))
            fallback = np.where(
                np.isfinite(lo) & np.isfinite(hi), 0.5 * (lo + hi),
                np.where(np.isfinite(lo), lo + 2.0 * width, hi - 2.0 * width),
            )
        cand = np.where(inside, newton, fallback)
        eps = np.where(done, eps, cand)
        iters += ~done
        s, info = score(eps)
        narrow = (hi - lo) <= 1e-15 * (1.0 + np.abs(eps))
        done |= (np.abs(s) <= tol) | narrow
    if not shape0:
        return eps[0], s[0], iters[0], done[0]
    return eps, s, iters, done


def fit_fluctuation(y, offset_logits, clever_covariate, w=None) -> FluctuationFit:
    """No-intercept logistic regression ``logit E[y] = offset + eps * H``."""
    y = np.asarray(y, dtype=float)
    off = np.asarray(offset_logits, dtype=float)
    h = np.asarray(clever_covariate, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    if not (y.shape == off.shape == h.shape == w.shape) or y.ndim != 1:
        raise ValueError("y, offset, covariate and weights must be equal-length vectors")
    if not np.all(np.isfinite(h)) or not np.all(np.isfinite(off)):
        raise FluctuationError("non-finite offset or clever covariate")
    if np.any((y <= 0) | (y >= 1)):
        raise FluctuationError("fluctuation outcomes must lie strictly inside (0, 1)")
    eps, s, iters, done = _fluctuation_batch(y, off, h, w)
    if not (done and np.isfinite(eps)):
        raise FluctuationError("fluctuation did not converge", epsilon=float(eps), score=float(s))
    return FluctuationFit(float(eps), float(s), int(iters))


# --------------------------------------------------------------------------- lasso


def _standardize(X: np.ndarray, w: np.ndarray):
    pw = w / w.sum()
    mean = pw @ X
    sd = np.sqrt(pw @ (X - mean) ** 2)
    # constant columns (up to rounding) carry no information
    sd = np.where(sd > 1e-12 * np.maximum(1.0, np.abs(mean)), sd, 0.0)
    return mean, sd


def _lasso_cd(Z, y, w, lam, beta0=None, tol=1e-12, max_outer=200, max_inner=2000):
    """Proximal Newton with cyclic coordinate descent on standardized ``Z``.

    Minimizes ``-(1/sum w) sum w loglik + lam * sum |b_j|`` over slopes
    ``b`` and an unpenalized intercept ``b0``.  Returns ``(b0, b, iters,
    converged)``.
    """
    n, p = Z.shape
    sw = w.sum()
    pw = w / sw
    if beta0 is None:
        ybar = np.clip(pw @ y, 1e-10, 1 - 1e-10)
        b0, b = float(logit(ybar)), np.zeros(p)
    else:
        b0, b = beta0[0], beta0[1].copy()

    def objective(b0_, b_):
        eta = np.clip(b0_ + Z @ b_, -ETA_CAP, ETA_CAP)
        return -float(pw @ (y * eta - np.logaddexp(0.0, eta))) + lam * float(np.abs(b_).sum())

    obj = objective(b0, b)
    converged = False
    outer = 0
    for outer in range(1, max_outer + 1):
        eta = np.clip(b0 + Z @ b, -ETA_CAP, ETA_CAP)
        mu = expit(eta)
        v = np.maximum(mu * (1 - mu), 1e-5)
        z = eta + (y - mu) / v
        u = pw * v
        # inner weighted lasso  0.5 sum u (z - b0 - Z b)^2 + lam |b|, intercept profiled out
        su = u.sum()
        mz = (u @ Z) / su
        Zc = Z - mz
        G = Zc.T @ (u[:, None] * Zc)
        c = Zc.T @ (u * (z - (u @ z) / su))
        nb = _lasso_quadratic(G, c, lam, b, tol, max_inner)
        nb0 = float((u @ z) / su - mz @ nb)
        # backtracking on the proximal-Newton direction
        d0, d = nb0 - b0, nb - b
        t = 1.0
        for _ in range(40):
            c0, c = b0 + t * d0, b + t * d
            cobj = objective(c0, c)
            if cobj <= obj + 1e-14 * max(1.0, abs(obj)):
                break
            t *= 0.5
        change = max(abs(c0 - b0), float(np.max(np.abs(c - b))) if p else 0.0)
        gain = obj - cobj
        b0, b, obj = c0, c, cobj
        if change < 1e-11 * max(1.0, abs(b0), float(np.max(np.abs(b))) if p else 1.0):
            converged = True
            break
        if gain <= 1e-15 * max(1.0, abs(obj)):
            # objective has stalled (flat region, e.g. quasi-separation)
            converged = change < 1e-6
            break
    return b0, b, outer, converged


def _lasso_quadratic(G, c, lam, b, tol=1e-12, max_sweeps=2000):
    """Minimize ``0.5 b'Gb - c'b + lam |b|_1`` by coordinate descent.

    After each sweep the problem restricted to the current support and signs
    is solved exactly; the solution is accepted once it satisfies the KKT
    conditions, which avoids slow tails on ill-conditioned ``G``.
    """
    p = len(c)
    b = b.copy()
    diag = np.diag(G).copy()
    for _ in range(max_sweeps):
        delta = 0.0
        for j in range(p):
            if diag[j] <= 0:
                continue
            old = b[j]
            rho = c[j] - G[j] @ b + diag[j] * old
            new = math.copysign(max(abs(rho) - lam, 0.0), rho) / diag[j]
            if new != old:
                b[j] = new
                delta = max(delta, abs(new - old))
        S = b != 0
        if S.any():
            sgn = np.sign(b[S])
            try:
                bs = np.linalg.solve(G[np.ix_(S, S)], c[S] - lam * sgn)
            except np.linalg.LinAlgError:
                bs = None
            if bs is not None and np.all(np.sign(bs) == sgn):
                cand = np.zeros(p)
                cand[S] = bs
                grad = c - G @ cand
                slack = lam * (1 + 1e-10) + 1e-14 * max(1.0, float(np.max(np.abs(c))))
                if np.all(np.abs(grad[~S]) <= slack):
                    return cand
        elif np.all(np.abs(c) <= lam):
            return b
        if delta < tol * max(1.0, float(np.max(np.abs(b))) if p else 1.0):
            break
    return b


def lasso_kkt(Z, y, w, b0, b, lam) -> tuple[np.ndarray, np.ndarray]:
    """Smooth-part gradient on standardized columns and the KKT violation of each slope."""
    pw = w / w.sum()
    mu = expit(np.clip(b0 + Z @ b, -ETA_CAP, ETA_CAP))
    grad = -(Z.T @ (pw * (y - mu)))
    viol = np.where(b == 0, np.maximum(np.abs(grad) - lam, 0.0), np.abs(grad + lam * np.sign(b)))
    return grad, viol


def fit_lasso_logistic(X, y, lam: float, w=None, warm: FitResult | None = None) -> FitResult:
    """L1-penalized quasi-binomial logistic regression.

    Predictors are standardized internally (weighted mean and standard
    deviation) and the penalty applies to the standardized slopes.  An
    ``intercept`` column, if present, is the unpenalized intercept;
    otherwise one is added.  Coefficients are reported on the original scale.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    D = _as_design(X)
    n, _ = D.shape
    y, w = _check_response(y, w, n)
    cols = list(D.columns)
    vals = D.values
    if "intercept" in cols:
        k = cols.index("intercept")
        pred_idx = [j for j in range(len(cols)) if j != k]
    else:
        pred_idx = list(range(len(cols)))
        cols = ["intercept", *cols]
        k = None
    P = vals[:, pred_idx]
    mean, sd = _standardize(P, w)
    live = sd > 0
    Z = np.zeros_like(P)
    Z[:, live] = (P[:, live] - mean[live]) / sd[live]
    start = None
    if warm is not None and "z_coef" in warm.extra:
        start = (warm.extra["z_intercept"], np.asarray(warm.extra["z_coef"], dtype=float))
    b0, b, iters, converged = _lasso_cd(Z, y, w, float(lam), start)
    slopes = np.where(live, b / np.where(live, sd, 1.0), 0.0)
    intercept = b0 - float(slopes @ mean)
    coef_named = dict(zip([D.columns[j] for j in pred_idx], slopes))
    coef = np.array([intercept if c == "intercept" else coef_named[c] for c in cols])
    eta = b0 + Z @ b
    separated = bool(np.any((np.abs(eta) >= ETA_CAP) & (w > 0)))
    mu = expit(np.clip(eta, -ETA_CAP, ETA_CAP))
    return FitResult(
        coef, tuple(cols), converged and not separated, iters, float(_quasi_deviance(y, mu, w)),
        separated, extra={"lambda": float(lam), "z_intercept": b0, "z_coef": b,
                          "z_mean": mean, "z_sd": sd},
    )


def lasso_lambda_grid(X, y, w=None, n_lambda: int = 50) -> np.ndarray:
    """Decreasing log-spaced grid from the smallest all-zero penalty."""
    D = _as_design(X)
    n = D.shape[0]
    y, w = _check_response(y, w, n)
    cols = [j for j, c in enumerate(D.columns) if c != "intercept"]
    P = D.values[:, cols]
    mean, sd = _standardize(P, w)
    live = sd > 0
    pw = w / w.sum()
    Z = (P[:, live] - mean[live]) / sd[live]
    lam_max = float(np.max(np.abs(Z.T @ (pw * (y - pw @ y))))) if live.any() else 0.0
    if lam_max <= 0:
        return np.zeros(1)
    ratio = 1e-4 if n > len(cols) else 1e-2
    return lam_max * np.logspace(0.0, np.log10(ratio), n_lambda)


def select_lasso_lambda(X, y, groups, w=None, n_lambda: int = 50) -> tuple[float, np.ndarray, np.ndarray]:
    """Leave-one-group-out cross-validated deviance over the λ grid.

    Returns ``(best_lambda, grid, mean_cv_deviance)``; ties go to the larger
    penalty.
    """
    D = _as_design(X)
    n = D.shape[0]
    y, w = _check_response(y, w, n)
    groups = np.asarray(groups)
    grid = lasso_lambda_grid(D, y, w, n_lambda)
    dev = np.zeros(len(grid))
    total = 0.0
    for g in np.unique(groups):
        test = groups == g
        train = ~test & (w > 0)
        if not test.any() or w[test].sum() <= 0:
            continue
        Dt = DesignMatrix(D.values[train], D.columns)
        warm = None
        for k, lam in enumerate(grid):
            fit = fit_lasso_logistic(Dt, y[train], lam, w[train], warm=warm)
            warm = fit
            eta = np.clip(D.values[test] @ fit.coef, -ETA_CAP, ETA_CAP)
            mu = np.clip(expit(eta), 1e-12, 1 - 1e-12)
            dev[k] += float(_quasi_deviance(y[test], mu, w[test]))
        total += w[test].sum()
    mean_dev = dev / max(total, 1e-300)
    best = int(np.flatnonzero(mean_dev <= mean_dev.min() + 1e-12 * abs(mean_dev.min()))[0])
    return float(grid[best]), grid, mean_dev
