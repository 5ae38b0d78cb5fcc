"""Logit selection function for continuation into the next phase.

One observation per trial-outcome: continuation regressed on the phase II
z-score (zeroed for censored scores), censor dummies, controls, condition
and completion-year fixed effects.  Maximum likelihood via iteratively
reweighted least squares; covariance is a cluster-robust sandwich with a
small-sample factor, clustered at the condition-category level.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import chi2

from .linker import LinkResult
from .pz import Sidedness, ZKind, ZScore, impute_other_censors, transform
from .registry import OutcomeRank, Phase, Registry, SponsorClass

__all__ = [
    "SelectionDesign",
    "SelectionDesignRow",
    "SelectionModel",
    "SeparationError",
    "build_design",
    "fit_logit",
    "wald_equality",
    "predict",
    "CORE_COEFS",
]

CORE_COEFS = ("const", "z_ph2", "d1", "d2")


class SeparationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SelectionDesignRow:
    continuation: int
    z_ph2: float
    d1: int
    d2: int
    sqrt_enroll: float
    placebo: int
    mht_adjusted: int
    condition_category: str
    completion_year: str
    cluster_id: str
    trial_id: str


@dataclass
class SelectionDesign:
    """Columnar trial-outcome design; rows() yields record views."""

    y: np.ndarray
    z: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    sqrt_enroll: np.ndarray
    placebo: np.ndarray
    mht: np.ndarray
    condition: np.ndarray
    year: np.ndarray
    trial_id: np.ndarray
    kind: np.ndarray  # z-score kind code per row ("precise", "above_d1", ...)

    def __post_init__(self) -> None:
        n = len(self.y)
        for name in ("z", "d1", "d2", "sqrt_enroll", "placebo", "mht",
                     "condition", "year", "trial_id", "kind"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has wrong length")
        if np.any(self.d1 * self.d2 != 0):
            raise ValueError("d1 and d2 are mutually exclusive")
        if np.any((self.z != 0) & ((self.d1 == 1) | (self.d2 == 1))):
            raise ValueError("censored rows must carry z = 0")

    @property
    def n_obs(self) -> int:
        return len(self.y)

    @property
    def n_trials(self) -> int:
        return len(np.unique(self.trial_id))

    def rows(self):
        for i in range(self.n_obs):
            yield SelectionDesignRow(
                continuation=int(self.y[i]),
                z_ph2=float(self.z[i]),
                d1=int(self.d1[i]),
                d2=int(self.d2[i]),
                sqrt_enroll=float(self.sqrt_enroll[i]),
                placebo=int(self.placebo[i]),
                mht_adjusted=int(self.mht[i]),
                condition_category=str(self.condition[i]),
                completion_year=str(self.year[i]),
                cluster_id=str(self.condition[i]),
                trial_id=str(self.trial_id[i]),
            )

    def subset(self, idx: np.ndarray) -> "SelectionDesign":
        return SelectionDesign(
            y=self.y[idx], z=self.z[idx], d1=self.d1[idx], d2=self.d2[idx],
            sqrt_enroll=self.sqrt_enroll[idx], placebo=self.placebo[idx],
            mht=self.mht[idx], condition=self.condition[idx], year=self.year[idx],
            trial_id=self.trial_id[idx], kind=self.kind[idx],
        )


@dataclass
class SelectionModel:
    names: list[str]
    coef: np.ndarray
    vcov: np.ndarray
    converged: bool
    n_obs: int
    n_trials: int
    n_clusters: int
    log_likelihood: float
    mean_dep: float
    levels: dict = field(default_factory=dict)  # categorical -> (ref, other levels)
    dropped: list[str] = field(default_factory=list)

    @property
    def coefficients(self) -> dict[str, float]:
        return dict(zip(self.names, self.coef.tolist()))

    def se(self) -> dict[str, float]:
        return dict(zip(self.names, np.sqrt(np.diag(self.vcov)).tolist()))


# ---------------------------------------------------------------------------
# Design construction

def build_design(
    reg: Registry,
    link_results: Sequence[LinkResult],
    outcome_rank: OutcomeRank = OutcomeRank.PRIMARY,
    side: Sidedness = Sidedness.TWO_SIDED,
) -> SelectionDesign:
    """One row per industry phase II trial-outcome with a linked
    continuation label.  Censored scores enter with z = 0 and the matching
    dummy; other censors get their imputed value as the z regressor."""
    links = {r.phase2_id: r for r in link_results if r.eligible}

    trial_ids: list[str] = []
    scores: list[ZScore] = []
    meta: list[tuple] = []
    for o in reg.outcomes:
        if o.outcome_rank is not outcome_rank:
            continue
        t = reg.trials.get(o.trial_id)
        if t is None or t.phase is not Phase.PHASE2:
            continue
        if t.sponsor_class is not SponsorClass.INDUSTRY:
            continue
        res = links.get(t.trial_id)
        if res is None:
            continue
        scores.append(transform(o.raw_p, side))
        trial_ids.append(t.trial_id)
        meta.append((t, o, res))
    if not scores:
        raise ValueError("selection design is empty")

    scores = impute_other_censors(scores)

    n = len(scores)
    y = np.zeros(n)
    z = np.zeros(n)
    d1 = np.zeros(n, dtype=int)
    d2 = np.zeros(n, dtype=int)
    sqrt_enroll = np.zeros(n)
    placebo = np.zeros(n, dtype=int)
    mht = np.zeros(n, dtype=int)
    condition = np.empty(n, dtype=object)
    year = np.empty(n, dtype=object)
    kind = np.empty(n, dtype=object)
    for i, (s, (t, o, res)) in enumerate(zip(scores, meta)):
        y[i] = 1.0 if res.continued else 0.0
        if s.kind is ZKind.PRECISE:
            z[i] = s.z
        elif s.kind is ZKind.ABOVE_D1:
            d1[i] = 1
        elif s.kind is ZKind.ABOVE_D2:
            d2[i] = 1
        else:
            z[i] = s.effective_z()
        sqrt_enroll[i] = math.sqrt(t.enrollment)
        placebo[i] = int(t.placebo_comparator)
        mht[i] = int(o.mht_adjusted)
        condition[i] = t.condition_category
        year[i] = (
            str(t.completion_date.year) if t.completion_date is not None else "unknown"
        )
        kind[i] = s.kind.value
    return SelectionDesign(
        y=y, z=z, d1=d1, d2=d2, sqrt_enroll=sqrt_enroll, placebo=placebo,
        mht=mht, condition=condition, year=year,
        trial_id=np.array(trial_ids, dtype=object), kind=kind,
    )


def _dummy_levels(values: np.ndarray, fixed: tuple | None) -> tuple[str, list[str]]:
    """Reference level (most frequent) and remaining levels, or the fixed
    assignment when refitting/predicting with an existing layout."""
    if fixed is not None:
        return fixed
    vals, counts = np.unique(values.astype(str), return_counts=True)
    order = np.lexsort((vals, -counts))
    ref = vals[order[0]]
    others = sorted(v for v in vals if v != ref)
    return str(ref), [str(v) for v in others]


def build_matrix(
    design: SelectionDesign,
    levels: Mapping[str, tuple] | None = None,
    warn_unseen: bool = False,
) -> tuple[np.ndarray, list[str], dict]:
    """Design matrix with explicit fixed-effect dummies.

    ``levels`` pins the categorical layout (reference + levels) so a
    matrix for new data aligns with a fitted model; unseen levels fold
    into the reference.
    """
    fixed = levels or {}
    cond_ref, cond_levels = _dummy_levels(design.condition, fixed.get("condition"))
    year_ref, year_levels = _dummy_levels(design.year, fixed.get("year"))

    cols = [np.ones(design.n_obs), design.z, design.d1, design.d2,
            design.sqrt_enroll, design.placebo, design.mht]
    names = ["const", "z_ph2", "d1", "d2", "sqrt_enroll", "placebo", "mht_adjusted"]
    cond = design.condition.astype(str)
    year = design.year.astype(str)
    if warn_unseen:
        for label, vals, known, ref in (
            ("condition", cond, cond_levels, cond_ref),
            ("year", year, year_levels, year_ref),
        ):
            unseen = set(np.unique(vals)) - set(known) - {ref}
            if unseen:
                warnings.warn(
                    f"unseen {label} levels {sorted(unseen)} folded into "
                    f"reference {ref!r}"
                )
    for lv in cond_levels:
        cols.append((cond == lv).astype(float))
        names.append(f"cond:{lv}")
    for lv in year_levels:
        cols.append((year == lv).astype(float))
        names.append(f"year:{lv}")
    X = np.column_stack(cols)
    out_levels = {"condition": (cond_ref, cond_levels), "year": (year_ref, year_levels)}
    return X, names, out_levels


def _drop_collinear(
    X: np.ndarray, names: list[str], tol: float = 1e-8
) -> tuple[np.ndarray, list[str], list[str]]:
    """Greedy Gram-Schmidt column filter; earlier columns win, so the core
    regressors (listed first) are always retained."""
    n, k = X.shape
    Q = np.empty((n, 0))
    keep, dropped = [], []
    for j in range(k):
        col = X[:, j]
        resid = col - Q @ (Q.T @ col) if Q.shape[1] else col.copy()
        norm = np.linalg.norm(resid)
        if norm > tol * max(np.linalg.norm(col), 1.0):
            keep.append(j)
            Q = np.column_stack([Q, resid / norm])
        else:
            dropped.append(names[j])
    if dropped:
        warnings.warn(f"dropping collinear columns: {dropped}")
    return X[:, keep], [names[j] for j in keep], dropped


def _expit(eta: np.ndarray) -> np.ndarray:
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    ex = np.exp(eta[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _log_likelihood(y: np.ndarray, p: np.ndarray) -> float:
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return float(np.sum(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def fit_logit(
    design: SelectionDesign,
    cluster_by: str = "condition",
    max_iter: int = 100,
    score_tol: float = 1e-8,
    ll_tol: float = 1e-12,
    warm_start: Mapping[str, float] | None = None,
) -> SelectionModel:
    """IRLS maximum likelihood with a clustered sandwich covariance.

    Convergence when the largest score component falls below ``score_tol``
    or the relative log-likelihood change falls below ``ll_tol``.
    Clusters default to the condition category; the sandwich carries the
    G/(G-1) * (N-1)/(N-K) small-sample factor.  ``warm_start`` seeds named
    coefficients (bootstrap refits converge in a few steps).
    """
    y = design.y.astype(float)
    if len(np.unique(y)) < 2:
        raise ValueError("need both outcome classes to fit a logit")
    X_full, names_full, levels = build_matrix(design)
    X, names, dropped = _drop_collinear(X_full, names_full)
    n, k = X.shape

    if warm_start is None:
        beta = np.zeros(k)
    else:
        beta = np.array([warm_start.get(nm, 0.0) for nm in names])
    ll_old = -np.inf
    converged = False
    for _ in range(max_iter):
        eta = X @ beta
        p = _expit(eta)
        w = np.maximum(p * (1.0 - p), 1e-10)
        score = X.T @ (y - p)
        ll = _log_likelihood(y, p)
        if np.max(np.abs(score)) < score_tol:
            converged = True
            break
        if np.isfinite(ll_old) and abs(ll - ll_old) < ll_tol * (abs(ll_old) + 1e-30):
            converged = True
            break
        ll_old = ll
        XtWX = (X * w[:, None]).T @ X
        try:
            delta = np.linalg.solve(XtWX, score)
        except np.linalg.LinAlgError as exc:
            raise SeparationError(f"singular information matrix: {exc}") from exc
        # dampened step if the likelihood would not improve
        step = 1.0
        for _ in range(8):
            cand = beta + step * delta
            if _log_likelihood(y, _expit(X @ cand)) >= ll - 1e-12:
                break
            step *= 0.5
        beta = beta + step * delta

    eta = X @ beta
    p = _expit(eta)
    w = np.maximum(p * (1.0 - p), 1e-10)
    XtWX = (X * w[:, None]).T @ X
    bread = np.linalg.inv(XtWX)

    plain_se = np.sqrt(np.maximum(np.diag(bread), 0.0))
    blown = (np.abs(beta) > 15.0) & (plain_se > 5.0)
    if np.any(blown):
        bad = [names[j] for j in np.where(blown)[0]]
        raise SeparationError(
            f"complete separation suspected: runaway coefficient on {bad}"
        )

    clusters = getattr(design, cluster_by) if cluster_by != "condition" else design.condition
    clusters = clusters.astype(str)
    resid = (y - p)[:, None] * X
    meat = np.zeros((k, k))
    labels = np.unique(clusters)
    for g in labels:
        s_g = resid[clusters == g].sum(axis=0)
        meat += np.outer(s_g, s_g)
    n_clusters = len(labels)
    if n_clusters > 1:
        factor = (n_clusters / (n_clusters - 1.0)) * ((n - 1.0) / max(n - k, 1.0))
    else:
        factor = 1.0
    vcov = factor * bread @ meat @ bread
    vcov = 0.5 * (vcov + vcov.T)
    eigs = np.linalg.eigvalsh(vcov)
    if eigs.min() < -1e-8 * max(eigs.max(), 1.0):
        raise RuntimeError("clustered covariance is not positive semidefinite")

    return SelectionModel(
        names=names,
        coef=beta,
        vcov=vcov,
        converged=converged,
        n_obs=n,
        n_trials=design.n_trials,
        n_clusters=n_clusters,
        log_likelihood=_log_likelihood(y, p),
        mean_dep=float(y.mean()),
        levels=levels,
        dropped=dropped,
    )


def wald_equality(
    model_a: SelectionModel,
    model_b: SelectionModel,
    coef_names: Sequence[str] = CORE_COEFS,
) -> float:
    """P-value of the Wald test that the named coefficients are jointly
    equal across two independently fitted models."""
    if not (model_a.converged and model_b.converged):
        raise ValueError("both models must have converged")
    for name in coef_names:
        if name not in model_a.names or name not in model_b.names:
            raise ValueError(f"coefficient {name!r} missing from a model")
    ia = [model_a.names.index(c) for c in coef_names]
    ib = [model_b.names.index(c) for c in coef_names]
    diff = model_a.coef[ia] - model_b.coef[ib]
    V = model_a.vcov[np.ix_(ia, ia)] + model_b.vcov[np.ix_(ib, ib)]
    try:
        sol = np.linalg.solve(V, diff)
    except np.linalg.LinAlgError as exc:
        raise ValueError("combined covariance is singular") from exc
    stat = float(diff @ sol)
    return float(chi2.sf(stat, df=len(coef_names)))


def predict(model: SelectionModel, design: SelectionDesign) -> np.ndarray:
    """Continuation probabilities for rows sharing the design schema."""
    if not model.converged:
        raise ValueError("model did not converge")
    X, names, _ = build_matrix(design, levels=model.levels, warn_unseen=True)
    name_to_col = {nm: j for j, nm in enumerate(names)}
    cols = [name_to_col[nm] for nm in model.names]
    return _expit(X[:, cols] @ model.coef)


def predict_at_mean(
    model: SelectionModel, design: SelectionDesign, z_grid: Sequence[float]
) -> np.ndarray:
    """Predicted continuation probability as a function of the z-score,
    every other regressor held at its sample mean (censor dummies off)."""
    X, names, _ = build_matrix(design, levels=model.levels)
    cols = [names.index(nm) for nm in model.names]
    xbar = X[:, cols].mean(axis=0)
    rows = np.tile(xbar, (len(z_grid), 1))
    for special, value in (("z_ph2", np.asarray(z_grid, dtype=float)), ("d1", 0.0), ("d2", 0.0)):
        if special in model.names:
            rows[:, model.names.index(special)] = value
    return _expit(rows @ model.coef)
