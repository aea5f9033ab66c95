"""Serialization of fitted priors: container for parameters, JSON sidecar
for kind and hyperparameters."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .container import load_sections, save_container
from .exceptions import ConfigError
from .priors import (
    GaussianWeightPrior,
    GmmWeightPrior,
    LaplaceWeightPrior,
    StudentTWeightPrior,
    WeightPrior,
)


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def save_prior(path, prior: WeightPrior) -> None:
    sections: dict[str, np.ndarray] = {}
    meta: dict = {}
    if isinstance(prior, GaussianWeightPrior):
        meta = {"kind": "gaussian", "cov_kind": prior.cov_kind}
        sections["mean"] = prior.mean_
        if prior.cov_kind == "isotropic":
            sections["cov"] = np.array([[prior.variance_]])
        elif prior.cov_kind == "diagonal":
            sections["cov"] = prior.variances_
        else:
            sections["cov"] = prior.covariance_
    elif isinstance(prior, StudentTWeightPrior):
        meta = {"kind": "student_t", "dof": prior.dof}
        sections["location"] = prior.location
        sections["scale"] = prior.scale
    elif isinstance(prior, LaplaceWeightPrior):
        meta = {"kind": "laplace", "laplace_kind": prior.kind}
        sections["location"] = prior.location_
        sections["scale"] = prior.scale_
    elif isinstance(prior, GmmWeightPrior):
        meta = {"kind": "gmm", "cov_kind": prior.cov_kind, "n_components": len(prior.components_)}
        sections["weights"] = prior.weights_
        for s, comp in enumerate(prior.components_):
            sections[f"mean_{s}"] = comp.mean_
            if prior.cov_kind == "isotropic":
                sections[f"cov_{s}"] = np.array([[comp.variance_]])
            elif prior.cov_kind == "diagonal":
                sections[f"cov_{s}"] = comp.variances_
            else:
                sections[f"cov_{s}"] = comp.covariance_
    else:
        raise ConfigError(f"cannot serialize prior of type {type(prior).__name__}")
    save_container(path, sections)
    _sidecar(path).write_text(json.dumps(meta, sort_keys=True))


def _gauss_cov(cov_kind: str, arr: np.ndarray):
    if cov_kind == "isotropic":
        return float(arr.ravel()[0])
    return arr


def load_prior(path) -> WeightPrior:
    sections = load_sections(path)
    meta = json.loads(_sidecar(path).read_text())
    kind = meta["kind"]
    if kind == "gaussian":
        return GaussianWeightPrior.from_params(
            sections["mean"], _gauss_cov(meta["cov_kind"], sections["cov"]), meta["cov_kind"]
        )
    if kind == "student_t":
        return StudentTWeightPrior(meta["dof"], sections["location"], sections["scale"])
    if kind == "laplace":
        return LaplaceWeightPrior.from_params(
            sections["location"], sections["scale"], meta["laplace_kind"]
        )
    if kind == "gmm":
        cov_kind = meta["cov_kind"]
        n = meta["n_components"]
        prior = GmmWeightPrior(n_components=n, cov_kind=cov_kind)
        prior.weights_ = sections["weights"]
        prior.components_ = [
            GaussianWeightPrior.from_params(
                sections[f"mean_{s}"], _gauss_cov(cov_kind, sections[f"cov_{s}"]), cov_kind
            )
            for s in range(n)
        ]
        return prior
    raise ConfigError(f"unknown prior kind {kind!r}")
