"""Propensity modelling: probability of acquiring a healthy-eating partner.

Two model families share one feature codec (one-hot preferred shop plus
numeric covariates standardized with training statistics):

* logistic regression fitted by iteratively reweighted least squares with a
  small L2 ridge (the default: deterministic and auditable), and
* a random forest (200 trees, bootstrap, sqrt(d) features per split, Gini
  impurity, minimum leaf size 5) with all randomness derived from one seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from mensa.cohort import NUMERIC_COVARIATES, FocalUnit, Treatment

RIDGE_LAMBDA = 1e-6
IRLS_TOL = 1e-8
IRLS_MAX_ITER = 100
FOREST_TREES = 200
FOREST_MIN_LEAF = 5
_PROB_EPS = 1e-12


class NonConvergenceError(RuntimeError):
    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace  # max |delta coef| per iteration


@dataclass(frozen=True)
class FeatureCodec:
    """Fixed feature order shared between fit and predict."""
    shop_levels: tuple[str, ...]
    means: tuple[float, ...]
    stds: tuple[float, ...]

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(f"shop={s}" for s in self.shop_levels) + NUMERIC_COVARIATES

    def encode(self, units: Sequence[FocalUnit]) -> np.ndarray:
        n = len(units)
        shops = {s: i for i, s in enumerate(self.shop_levels)}
        X = np.zeros((n, len(self.shop_levels) + len(NUMERIC_COVARIATES)))
        for i, unit in enumerate(units):
            col = shops.get(unit.covariates.preferred_shop)
            if col is not None:  # unseen shop stays all-zeros
                X[i, col] = 1.0
            X[i, len(self.shop_levels):] = unit.covariates.numeric()
        numeric = X[:, len(self.shop_levels):]
        numeric -= np.asarray(self.means)
        numeric /= np.asarray(self.stds)
        return X


def _build_codec(units: Sequence[FocalUnit]) -> FeatureCodec:
    shops = tuple(sorted({u.covariates.preferred_shop for u in units}))
    numeric = np.array([u.covariates.numeric() for u in units])
    means = numeric.mean(axis=0)
    stds = numeric.std(axis=0)
    stds[stds == 0] = 1.0  # constant feature: center only
    return FeatureCodec(shop_levels=shops, means=tuple(means), stds=tuple(stds))


def _labels(units: Sequence[FocalUnit]) -> np.ndarray:
    return np.array([1.0 if u.treatment is Treatment.HEALTHY_PARTNER else 0.0 for u in units])


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class LogisticModel:
    codec: FeatureCodec
    coef: np.ndarray  # intercept first, then codec.feature_names order
    n_iter: int

    kind = "logistic"


@dataclass
class ForestModel:
    codec: FeatureCodec
    trees: list[dict]
    importances: np.ndarray  # mean impurity decrease per feature, normalized
    seed: int

    kind = "random_forest"


PropensityModel = Union[LogisticModel, ForestModel]


def fit(units: Sequence[FocalUnit], kind: str = "logistic", seed: int = 0,
        n_trees: int = FOREST_TREES, min_leaf: int = FOREST_MIN_LEAF) -> PropensityModel:
    units = list(units)
    y = _labels(units)
    n_pos = int(y.sum())
    if n_pos < 2 or len(y) - n_pos < 2:
        raise ValueError("need at least 2 units per treatment arm")
    codec = _build_codec(units)
    X = codec.encode(units)
    if kind == "logistic":
        coef, n_iter = _fit_irls(X, y)
        return LogisticModel(codec=codec, coef=coef, n_iter=n_iter)
    if kind == "random_forest":
        trees, importances = _fit_forest(X, y, seed=seed, n_trees=n_trees, min_leaf=min_leaf)
        return ForestModel(codec=codec, trees=trees, importances=importances, seed=seed)
    raise ValueError(f"unknown model kind {kind!r}")


def _fit_irls(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, int]:
    n, p = X.shape
    X1 = np.hstack([np.ones((n, 1)), X])
    penalty = np.full(p + 1, RIDGE_LAMBDA)
    penalty[0] = 0.0  # intercept unpenalized
    w = np.zeros(p + 1)
    trace: list[float] = []
    for it in range(1, IRLS_MAX_ITER + 1):
        mu = _sigmoid(X1 @ w)
        mu = np.clip(mu, _PROB_EPS, 1 - _PROB_EPS)
        weights = mu * (1 - mu)
        H = (X1 * weights[:, None]).T @ X1 + np.diag(penalty)
        g = X1.T @ (y - mu) - penalty * w
        try:
            delta = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            raise NonConvergenceError("singular IRLS system", trace) from None
        w = w + delta
        step = float(np.max(np.abs(delta)))
        trace.append(step)
        if step < IRLS_TOL:
            return w, it
    raise NonConvergenceError(
        f"IRLS did not converge in {IRLS_MAX_ITER} iterations", trace)


def _gini_pair(pos: np.ndarray, total: np.ndarray) -> np.ndarray:
    frac = pos / total
    return 1.0 - frac * frac - (1.0 - frac) * (1.0 - frac)


def _build_tree(X: np.ndarray, y: np.ndarray, idx: np.ndarray,
                rng: np.random.Generator, min_leaf: int,
                importance: np.ndarray, n_total: int) -> dict:
    n = len(idx)
    pos = float(y[idx].sum())
    if n < 2 * min_leaf or pos == 0 or pos == n:
        return {"leaf": pos / n, "n": n}
    p = X.shape[1]
    k = max(1, math.isqrt(p))
    features = rng.choice(p, size=k, replace=False)
    node_gini = float(_gini_pair(np.array(pos), np.array(float(n))))
    sizes = np.arange(min_leaf, n - min_leaf + 1)  # candidate left-child sizes
    best = None  # (impurity_decrease, feature, threshold)
    for f in features:
        vals = X[idx, f]
        order = np.argsort(vals, kind="stable")
        sv = vals[order]
        cum_pos = np.cumsum(y[idx][order])
        valid = sv[sizes - 1] != sv[sizes]  # a boundary between distinct values
        if not valid.any():
            continue
        left_n = sizes[valid].astype(float)
        left_pos = cum_pos[sizes[valid] - 1]
        right_n = n - left_n
        child = (left_n * _gini_pair(left_pos, left_n)
                 + right_n * _gini_pair(pos - left_pos, right_n)) / n
        decrease = node_gini - child
        j = int(np.argmax(decrease))
        if best is None or decrease[j] > best[0] + 1e-15:
            i = int(sizes[valid][j])
            best = (float(decrease[j]), int(f), 0.5 * float(sv[i - 1] + sv[i]))
    if best is None or best[0] <= 0:
        return {"leaf": pos / n, "n": n}
    decrease, f, threshold = best
    importance[f] += (n / n_total) * decrease
    left_idx = idx[X[idx, f] <= threshold]
    right_idx = idx[X[idx, f] > threshold]
    return {
        "feature": f,
        "threshold": threshold,
        "left": _build_tree(X, y, left_idx, rng, min_leaf, importance, n_total),
        "right": _build_tree(X, y, right_idx, rng, min_leaf, importance, n_total),
    }


def _fit_forest(X: np.ndarray, y: np.ndarray, seed: int, n_trees: int,
                min_leaf: int) -> tuple[list[dict], np.ndarray]:
    n, p = X.shape
    # one child seed per tree: the result does not depend on training order
    children = np.random.SeedSequence(seed).spawn(n_trees)
    trees = []
    importances = np.zeros(p)
    for child in children:
        rng = np.random.default_rng(child)
        boot = rng.integers(0, n, size=n)
        imp = np.zeros(p)
        trees.append(_build_tree(X, y, boot, rng, min_leaf, imp, n_total=n))
        importances += imp
    importances /= n_trees
    total = importances.sum()
    if total > 0:
        importances = importances / total
    return trees, importances


def _tree_predict(tree: dict, x: np.ndarray) -> float:
    node = tree
    while "leaf" not in node:
        node = node["left"] if x[node["feature"]] <= node["threshold"] else node["right"]
    return node["leaf"]


def predict_many(model: PropensityModel, units: Sequence[FocalUnit]) -> np.ndarray:
    X = model.codec.encode(list(units))
    if isinstance(model, LogisticModel):
        X1 = np.hstack([np.ones((X.shape[0], 1)), X])
        probs = _sigmoid(X1 @ model.coef)
    else:
        probs = np.array([
            float(np.mean([_tree_predict(t, x) for t in model.trees])) for x in X
        ])
    return np.clip(probs, _PROB_EPS, 1 - _PROB_EPS)


def predict(model: PropensityModel, unit: FocalUnit) -> float:
    return float(predict_many(model, [unit])[0])


def auc(scored: Iterable[tuple[float, int]]) -> float:
    """Mann-Whitney AUC: P(random positive outranks random negative), ties 0.5."""
    pairs = list(scored)
    scores = np.array([s for s, _ in pairs], dtype=float)
    labels = np.array([1 if l else 0 for _, l in pairs])
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    rank = 1
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (rank + rank + (j - i))
        rank += j - i + 1
        i = j + 1
    rank_sum_pos = float(ranks[labels == 1].sum())
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2
    return u / (n_pos * n_neg)


def feature_importance(model: PropensityModel) -> list[tuple[str, float]]:
    """Features ranked by importance, descending; ties broken by name."""
    names = model.codec.feature_names
    if isinstance(model, LogisticModel):
        values = np.abs(model.coef[1:])
    else:
        values = model.importances
    ranked = sorted(zip(names, values.tolist()), key=lambda nv: (-nv[1], nv[0]))
    return [(n, float(v)) for n, v in ranked]


def model_to_dict(model: PropensityModel) -> dict:
    base = {
        "schema": 1,
        "kind": model.kind,
        "codec": {
            "shop_levels": list(model.codec.shop_levels),
            "means": list(model.codec.means),
            "stds": list(model.codec.stds),
        },
    }
    if isinstance(model, LogisticModel):
        base["coef"] = model.coef.tolist()
        base["n_iter"] = model.n_iter
    else:
        base["trees"] = model.trees
        base["importances"] = model.importances.tolist()
        base["seed"] = model.seed
    return base


def model_from_dict(d: dict) -> PropensityModel:
    codec = FeatureCodec(
        shop_levels=tuple(d["codec"]["shop_levels"]),
        means=tuple(d["codec"]["means"]),
        stds=tuple(d["codec"]["stds"]),
    )
    if d["kind"] == "logistic":
        return LogisticModel(codec=codec, coef=np.array(d["coef"]), n_iter=int(d["n_iter"]))
    if d["kind"] == "random_forest":
        return ForestModel(codec=codec, trees=d["trees"],
                           importances=np.array(d["importances"]), seed=int(d["seed"]))
    raise ValueError(f"unknown model kind {d['kind']!r}")


def save_model(model: PropensityModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), sort_keys=True) + "\n",
                          encoding="utf-8")


def load_model(path: str | Path) -> PropensityModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
