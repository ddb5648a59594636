"""Laplace input perturbation of datasets and the classical-classifier runs on them."""

from __future__ import annotations

import math

import numpy as np

from dpkit import classical
from dpkit.data import Dataset
from dpkit.errors import ConfigError
from dpkit.mechanisms import LaplaceParams, laplace_perturb
from dpkit.metrics import MetricsRecord

CLASSIFIERS = ("knn", "nbc", "svm")


def perturb_dataset(ds: Dataset, params: LaplaceParams, seed: int) -> Dataset:
    """Per-pixel Laplace noise on the normalized images; labels untouched."""
    rng = np.random.default_rng(seed)
    noisy = laplace_perturb(ds.images, params, rng)
    meta = dict(ds.meta)
    meta.update(laplace_epsilon=float(params.epsilon), laplace_sensitivity=float(params.sensitivity),
                laplace_seed=int(seed), source_provenance=ds.provenance)
    return Dataset(noisy, ds.labels.copy(), ds.split, "perturbed", ds.norm_mean, ds.norm_std, meta)


def build_classifier(kind: str, k: int = 10, kernel: str = "rbf", C_reg: float = 1.0,
                     gamma: float | None = None, degree: int = 3, coef0: float = 0.0,
                     max_iter: int = 100_000):
    if kind == "knn":
        return classical.KNNClassifier(k)
    if kind == "nbc":
        return classical.GaussianNB()
    if kind == "svm":
        spec = classical.KernelSpec(kernel, degree, gamma, coef0)
        return classical.SVMClassifier(spec, C_reg, max_iter=max_iter)
    raise ConfigError(f"unknown classifier {kind!r}; expected one of {CLASSIFIERS}")


def run_classical(model, train: Dataset, test: Dataset, experiment_id: str,
                  run: int = 0) -> MetricsRecord:
    """Fit on ``train`` and report both splits in the neural CSV schema.

    Losses are misclassification rates; ``epsilon_spent`` is the Laplace
    epsilon recorded in the training data (inf for clean data) and ``sigma``
    is 0 since no gradient noise is involved.
    """
    tr = classical.LabeledVectors.from_dataset(train)
    te = classical.LabeledVectors.from_dataset(test)
    model.fit(tr)
    r_tr = classical.evaluate(model, tr)
    r_te = classical.evaluate(model, te)
    eps = float(train.meta.get("laplace_epsilon", math.inf))
    return MetricsRecord(experiment_id, run, 1, r_tr["loss"], r_tr["accuracy"], r_te["loss"],
                         r_te["accuracy"], eps, 0.0)
