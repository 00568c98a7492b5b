"""Top-k selection from a learned mask and downstream evaluation.

Downstream scoring uses two classifiers written here: brute-force kNN and an
ensemble of totally randomised trees (one random feature and one uniform
random threshold per node, grown until nodes are pure).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .datasets import Dataset
from .model import METHODS, TrainingConfig, fit_method
from .tensor import Rng, ShapeError, as_matrix

log = logging.getLogger(__name__)

DEFAULT_RHOS = (0.01, 0.015, 0.02, 0.025, 0.05, 0.075, 0.10)
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
CLASSIFIERS = ("knn", "ert")


@dataclass
class SelectionResult:
    ranked_indices: np.ndarray
    scores: np.ndarray
    k: int
    rho: float | None = None
    provenance: dict = field(default_factory=dict)


def rank_features(mask) -> np.ndarray:
    """All feature indices by descending score, equal scores by ascending index."""
    mask = np.asarray(mask, dtype=np.float64)
    return np.argsort(-mask, kind="stable")


def top_k(mask, k: int, rho: float | None = None, provenance: dict | None = None) -> SelectionResult:
    mask = np.asarray(mask, dtype=np.float64)
    if not 1 <= k <= mask.size:
        raise ValueError(f"k must lie in [1, {mask.size}], got {k}")
    idx = rank_features(mask)[:k]
    return SelectionResult(idx, mask[idx], k, rho, dict(provenance or {}))


def rho_to_k(rho: float, n_features: int) -> int:
    """``k = round(rho * D)`` (halves round up), clamped to [1, D]."""
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    return int(min(max(math.floor(rho * n_features + 0.5), 1), n_features))


def restrict(X, features):
    """Columns ``features`` of ``X``; nothing else is read."""
    if not hasattr(X, "shape"):
        X = np.asarray(X)
    return np.asarray(X[:, np.asarray(features, dtype=np.int64)])


def knn_classify(X_train, y_train, X_test, k_neighbors: int = 5, chunk_elems: int = 4_000_000):
    """Majority vote among the ``k_neighbors`` Euclidean-nearest training rows.

    Distance ties go to the lower training index, vote ties to the smaller label.
    """
    X_train = as_matrix(X_train)
    X_test = as_matrix(X_test)
    y_train = np.asarray(y_train, dtype=np.int64)
    n = X_train.shape[0]
    if n == 0:
        raise ValueError("knn_classify: empty training set")
    if not 1 <= k_neighbors <= n:
        raise ValueError(f"k_neighbors must lie in [1, {n}], got {k_neighbors}")
    if X_test.shape[1] != X_train.shape[1]:
        raise ShapeError("knn_classify", X_train.shape, X_test.shape)
    n_labels = int(y_train.max()) + 1
    out = np.empty(X_test.shape[0], dtype=np.int64)
    step = max(1, chunk_elems // max(1, n * X_train.shape[1]))
    for start in range(0, X_test.shape[0], step):
        block = X_test[start:start + step]
        d2 = ((block[:, None, :] - X_train[None, :, :]) ** 2).sum(axis=2)
        near = np.argsort(d2, axis=1, kind="stable")[:, :k_neighbors]
        labels = y_train[near]
        counts = np.zeros((block.shape[0], n_labels), dtype=np.int64)
        np.add.at(counts, (np.repeat(np.arange(block.shape[0]), k_neighbors), labels.reshape(-1)), 1)
        out[start:start + step] = counts.argmax(axis=1)
    return out


@dataclass
class _Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    label: np.ndarray

    def apply(self, X):
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            nd = node[active]
            go_left = X[active, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.feature[node[active]] >= 0]
        return self.label[node]


def _grow_tree(X, y, n_labels, rng: Rng, max_depth=None) -> _Tree:
    """Grow one totally randomised tree breadth-first.

    A node becomes a leaf when it is pure, when every feature is constant on
    it, or at ``max_depth``.  Otherwise it draws a feature uniformly among the
    non-constant ones and a threshold ``t`` uniformly in [min, max); rows with
    ``x <= t`` go left, so both children are non-empty.
    """
    feature, threshold, left, right, label = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        label.append(0)
        return len(feature) - 1

    samples = np.arange(X.shape[0])
    frontier = np.array([new_node()])
    starts = np.array([0])
    depth = 0
    while frontier.size:
        sizes = np.diff(np.append(starts, samples.size))
        node_of = np.repeat(np.arange(frontier.size), sizes)
        counts = np.zeros((frontier.size, n_labels), dtype=np.int64)
        np.add.at(counts, (node_of, y[samples]), 1)
        majority = counts.argmax(axis=1)
        Xs = X[samples]
        lo = np.minimum.reduceat(Xs, starts, axis=0)
        hi = np.maximum.reduceat(Xs, starts, axis=0)
        varying = hi > lo
        n_varying = varying.sum(axis=1)
        split = (counts.max(axis=1) < sizes) & (n_varying > 0)
        if max_depth is not None and depth >= max_depth:
            split[:] = False
        for j, nid in enumerate(frontier):
            label[nid] = int(majority[j])
        if not split.any():
            break
        s_nodes = np.flatnonzero(split)
        pick = np.floor(rng.random(s_nodes.size) * n_varying[s_nodes]).astype(np.int64)
        cum = np.cumsum(varying[s_nodes], axis=1)
        feat = (cum > pick[:, None]).argmax(axis=1)
        flo = lo[s_nodes, feat]
        fhi = hi[s_nodes, feat]
        thr = flo + rng.random(s_nodes.size) * (fhi - flo)
        thr = np.minimum(thr, np.nextafter(fhi, flo))
        child = np.full((frontier.size, 2), -1, dtype=np.int64)
        node_feat = np.full(frontier.size, -1, dtype=np.int64)
        node_thr = np.zeros(frontier.size)
        node_feat[s_nodes] = feat
        node_thr[s_nodes] = thr
        for j, f, t in zip(s_nodes, feat, thr):
            nid = frontier[j]
            feature[nid] = int(f)
            threshold[nid] = float(t)
            left[nid] = child[j, 0] = new_node()
            right[nid] = child[j, 1] = new_node()
        keep = split[node_of]
        samples, node_of = samples[keep], node_of[keep]
        go_right = (X[samples, node_feat[node_of]] > node_thr[node_of]).astype(np.int64)
        child_id = child[node_of, go_right]
        order = np.argsort(child_id, kind="stable")
        samples, child_id = samples[order], child_id[order]
        frontier, starts = np.unique(child_id, return_index=True)
        depth += 1
    return _Tree(np.array(feature), np.array(threshold), np.array(left), np.array(right), np.array(label))


class ExtraTrees:
    """Ensemble of totally randomised trees with majority voting."""

    def __init__(self, n_trees: int = 100, max_depth: int | None = None, rng: Rng | None = None):
        if n_trees < 1:
            raise ValueError("n_trees must be at least 1")
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.rng = Rng(0) if rng is None else rng
        self.trees = []

    def fit(self, X, y):
        X = as_matrix(X)
        y = np.asarray(y, dtype=np.int64)
        if X.shape[0] == 0:
            raise ValueError("ExtraTrees.fit: empty training set")
        self.n_labels = int(y.max()) + 1
        self.trees = [_grow_tree(X, y, self.n_labels, self.rng.derive(f"tree:{t}"), self.max_depth)
                      for t in range(self.n_trees)]
        return self

    def predict(self, X):
        X = as_matrix(X)
        votes = np.zeros((X.shape[0], self.n_labels), dtype=np.int64)
        rows = np.arange(X.shape[0])
        for tree in self.trees:
            np.add.at(votes, (rows, tree.apply(X)), 1)
        return votes.argmax(axis=1)


def ert_classify(X_train, y_train, X_test, n_trees: int = 100, rng: Rng | None = None, max_depth=None):
    return ExtraTrees(n_trees, max_depth, rng).fit(X_train, y_train).predict(X_test)


def classify(name: str, X_train, y_train, X_test, rng: Rng, knn_k: int = 5, n_trees: int = 100):
    if name == "knn":
        return knn_classify(X_train, y_train, X_test, knn_k)
    if name == "ert":
        return ert_classify(X_train, y_train, X_test, n_trees, rng)
    raise ValueError(f"unknown classifier {name!r}; expected one of {CLASSIFIERS}")


@dataclass
class RecoveryMetrics:
    informative_recall: float
    redundant_count: int
    distractor_count: int


def recovery_metrics(selection, ground_truth: dict) -> RecoveryMetrics:
    """Share of the informative features selected, and redundant / distractor counts."""
    chosen = set(np.asarray(getattr(selection, "ranked_indices", selection)).tolist())
    info = set(ground_truth["informative"].tolist())
    return RecoveryMetrics(
        len(chosen & info) / len(info),
        len(chosen & set(ground_truth["redundant"].tolist())),
        len(chosen & set(ground_truth["distractor"].tolist())),
    )


def method_ranking(method: str, train_set: Dataset, config: TrainingConfig, workers: int = 1):
    """Full feature ranking produced by ``method`` plus the scores used."""
    if method == "random":
        order = Rng(config.seed).derive("random-selection").permutation(train_set.n_features)
        scores = np.empty(train_set.n_features)
        scores[order] = np.arange(train_set.n_features, 0, -1, dtype=np.float64)
        return order, scores, None
    fit = fit_method(method, train_set, config, workers)
    return rank_features(fit.masks.m), fit.masks.m, fit.gamma


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    seeds: list = field(default_factory=list)

    def summary(self):
        """Cells keyed by (method, classifier, rho) with mean, std (ddof=1, >= 2 seeds) and raw values."""
        cells = {}
        for r in self.rows:
            cells.setdefault((r["method"], r["classifier"], r["rho"]), []).append(r)
        out = {}
        for key, rs in cells.items():
            acc = np.array([r["accuracy"] for r in rs])
            out[key] = {
                "mean": float(acc.mean()),
                "std": float(acc.std(ddof=1)) if acc.size >= 2 else None,
                "k": rs[0]["k"],
                "seeds": [r["seed"] for r in rs],
                "accuracies": acc.tolist(),
            }
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["method", "classifier", "rho", "k", "seed", "accuracy"])
            for r in self.rows:
                w.writerow([r["method"], r["classifier"], repr(r["rho"]), r["k"], r["seed"], repr(r["accuracy"])])

    def to_json(self, path):
        doc = {
            "seeds": list(self.seeds),
            "cells": [{"method": m, "classifier": c, "rho": rho, **v} for (m, c, rho), v in self.summary().items()],
            "failures": self.failures,
        }
        with open(path, "w") as f:
            json.dump(doc, f, indent=2)
            f.write("\n")


def _sweep_job(args):
    method, seed, train_set, test_set, rhos, classifiers, config, knn_k, n_trees = args
    rows, failures = [], []
    try:
        ranking, _, gamma = method_ranking(method, train_set, replace(config, seed=seed))
    except Exception as exc:  # whole job fails, sweep continues
        log.warning("method %s seed %s failed: %s", method, seed, exc)
        for rho in rhos:
            for clf in classifiers:
                failures.append(dict(method=method, classifier=clf, rho=rho, seed=seed, error=repr(exc)))
        return rows, failures
    for rho in rhos:
        k = rho_to_k(rho, train_set.n_features)
        feats = ranking[:k]
        for clf in classifiers:
            try:
                Xtr, Xte = restrict(train_set.X, feats), restrict(test_set.X, feats)
                rng = Rng(seed).derive(f"{clf}:{method}:{rho!r}")
                pred = classify(clf, Xtr, train_set.y, Xte, rng, knn_k, n_trees)
                acc = float(np.mean(pred == test_set.y))
                rows.append(dict(method=method, classifier=clf, rho=rho, k=k, seed=seed, accuracy=acc, gamma=gamma))
            except Exception as exc:
                log.warning("cell %s/%s/%s/%s failed: %s", method, clf, rho, seed, exc)
                failures.append(dict(method=method, classifier=clf, rho=rho, seed=seed, error=repr(exc)))
    return rows, failures


def evaluate_sweep(methods, train_set: Dataset, test_set: Dataset, rhos=DEFAULT_RHOS, classifiers=("knn",),
                   seeds=DEFAULT_SEEDS, config: TrainingConfig | None = None, workers: int = 1,
                   knn_k: int = 5, n_trees: int = 100) -> EvalReport:
    """Accuracy of every (method, classifier, rho, seed) cell.

    Selection is fitted on ``train_set`` only.  Each (method, seed) job is
    independent and seeded, so ``workers > 1`` gives the same report.
    """
    methods, rhos, classifiers, seeds = list(methods), list(rhos), list(classifiers), list(seeds)
    if not (methods and rhos and classifiers and seeds):
        raise ValueError("methods, rhos, classifiers and seeds must all be non-empty")
    for m in methods:
        if m not in METHODS + ("random",):
            raise ValueError(f"unknown method {m!r}")
    for c in classifiers:
        if c not in CLASSIFIERS:
            raise ValueError(f"unknown classifier {c!r}")
    config = config or TrainingConfig(gamma=None)
    jobs = [(m, s, train_set, test_set, rhos, classifiers, config, knn_k, n_trees) for m in methods for s in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]
    report = EvalReport(seeds=seeds)
    for rows, failures in results:
        report.rows.extend(rows)
        report.failures.extend(failures)
    order = {(m, c, r, s): i for i, (m, c, r, s) in enumerate(
        (m, c, r, s) for m in methods for c in classifiers for r in rhos for s in seeds)}
    report.rows.sort(key=lambda r: order[(r["method"], r["classifier"], r["rho"], r["seed"])])
    return report
