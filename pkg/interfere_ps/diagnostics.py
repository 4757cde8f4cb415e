"""Diagnostics for fitted propensity scores."""

import itertools
import math
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .errors import ClusterTooLargeError, DimensionMismatchError, InvalidPermutationError
from .estimands import MAX_ENUMERATION_SIZE, CpsProvider
from .study_data import Cluster, Study, TreatmentVector, all_treatment_vectors


def _smd(x: np.ndarray, z: np.ndarray, weights: np.ndarray, pooled_sd: float) -> float:
    treated, control = z == 1, z == 0
    diff = np.average(x[treated], weights=weights[treated]) - np.average(x[control], weights=weights[control])
    return float(diff / pooled_sd) if pooled_sd > 0 else 0.0


def covariate_balance(study: Study, ehat, names: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Standardized mean differences of each covariate between arms.

    The raw difference uses equal weights; the weighted one uses 1/ê for
    treated and 1/(1 - ê) for control units. Both are scaled by the pooled
    unweighted standard deviation so they are comparable.

    Args:
        study: Study with both treatment levels present.
        ehat: Marginal propensity scores in the study's stacked unit order.
        names: Covariate labels; ``x1, x2, ...`` by default.

    Returns:
        DataFrame with columns covariate, smd_raw, smd_weighted.
    """
    X, z, _ = study.stacked()
    ehat = np.asarray(ehat, dtype=float)
    if ehat.shape != z.shape:
        raise DimensionMismatchError(f"{ehat.shape[0]} scores for {len(z)} units")
    if z.min() == z.max():
        raise DimensionMismatchError("covariate balance needs both treatment levels")
    names = list(names) if names is not None else [f"x{k + 1}" for k in range(study.p)]
    ones = np.ones_like(ehat)
    ipw = np.where(z == 1, 1.0 / ehat, 1.0 / (1.0 - ehat))
    ddof = 1 if min(np.sum(z == 1), np.sum(z == 0)) > 1 else 0
    rows = []
    for k, name in enumerate(names):
        x = X[:, k]
        pooled = math.sqrt(0.5 * (x[z == 1].var(ddof=ddof) + x[z == 0].var(ddof=ddof)))
        rows.append((name, _smd(x, z, ones, pooled), _smd(x, z, ipw, pooled)))
    return pd.DataFrame(rows, columns=["covariate", "smd_raw", "smd_weighted"])


def exchangeability_gap(cluster: Cluster, cps: CpsProvider, perm: Optional[Sequence[int]] = None) -> float:
    """Largest change of the CPS when units are relabeled.

    Covariates and treatments are permuted together, so an exchangeable
    model gives the same probability for every treatment vector. Without
    ``perm`` every permutation of the cluster is tried. Providers that store
    per-unit values by position (a semiparametric fit) must offer
    ``relabeled`` so those values move with the units.

    Raises:
        ClusterTooLargeError: more than 12 units (or more than 7 without ``perm``).
        InvalidPermutationError: ``perm`` is not a permutation, or the provider
            is keyed by position and cannot be relabeled.
    """
    if getattr(cps, "positional", False) and not hasattr(cps, "relabeled"):
        raise InvalidPermutationError(f"{type(cps).__name__} is keyed by unit position and cannot be relabeled")
    n = cluster.size
    if n > MAX_ENUMERATION_SIZE or (perm is None and n > 7):
        raise ClusterTooLargeError(f"cluster {cluster.id!r} is too large to enumerate relabelings")
    if perm is None:
        perms = [list(p) for p in itertools.permutations(range(n))][1:]
    else:
        if sorted(perm) != list(range(n)):
            raise InvalidPermutationError(f"{list(perm)} is not a permutation of 0..{n - 1}")
        perms = [list(perm)]
    relabel = getattr(cps, "relabeled", None)
    relabeled = [relabel(cluster.id, p) if relabel else cps for p in perms]
    X = cluster.covariates
    gap = 0.0
    for w in all_treatment_vectors(n):
        base = cps.prob(X, TreatmentVector(cluster.id, tuple(int(v) for v in w)))
        for p, target in zip(perms, relabeled):
            moved = target.prob(X[p], TreatmentVector(cluster.id, tuple(int(v) for v in w[p])))
            gap = max(gap, abs(moved - base))
    return gap
