"""Applying a learned kernel to data.

Train mode randomizes (x, y) jointly per record through the full kernel;
apply mode first marginalizes the outcome out of the kernel (weighting by
the outcome-given-input conditional) and randomizes features only.

Randomness is counter-based: each record owns a Philox stream keyed by
(master seed, record stream id), so output is reproducible, independent
of thread scheduling or batch splits, and permuting records permutes the
output with it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .constants import MASS_ATOL, ROW_ATOL
from .distortion import DistortionBudget
from .domain import Dataset, JointPMF, Schema, cond_y_given_dx
from .errors import InvalidParamsError, MissingOutcomeError
from .optimizer import TransformKernel


@dataclass(frozen=True)
class SeedSpec:
    """Master seed plus the per-record stream derivation."""

    master_seed: int

    def stream(self, stream_id: int) -> np.random.Generator:
        key = np.array(
            [self.master_seed & 0xFFFFFFFFFFFFFFFF, stream_id & 0xFFFFFFFFFFFFFFFF],
            dtype=np.uint64,
        )
        return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class ApplyMapper:
    """Feature-only randomization p(x_hat | d, x) for unlabeled data."""

    schema: Schema
    rows: np.ndarray  # (nd, nx, nx)
    provenance: Mapping[str, object] = field(default_factory=dict)
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        nd, nx = self.schema.nd, self.schema.nx
        if rows.shape != (nd, nx, nx):
            raise InvalidParamsError(f"mapper must have shape {(nd, nx, nx)}")
        if rows.min() < 0:
            raise InvalidParamsError("mapper has negative probabilities")
        if np.abs(rows.sum(axis=2) - 1.0).max() > ROW_ATOL:
            raise InvalidParamsError("mapper rows must sum to 1")
        rows.flags.writeable = False
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "provenance", dict(self.provenance))


def derive_apply_kernel(kernel: TransformKernel, pmf: JointPMF) -> ApplyMapper:
    """Marginalize the outcome out of the kernel for apply-time use.

    p(x_hat | d, x) = sum_y p(y | x, d) sum_yh k(x_hat, yh | d, x, y).
    Input cells the data never populated fall back to the identity row
    (distortion-free) with a warning.
    """
    schema = kernel.schema
    nd, nx, ny = schema.nd, schema.nx, schema.ny
    cond, present = cond_y_given_dx(pmf)
    # per (d, x, y): kernel row marginalized over y_hat -> (nd, nx, ny, nx)
    k_x = kernel.probs.reshape(nd, nx, ny, nx, ny).sum(axis=4)
    rows = np.einsum("dxy,dxyk->dxk", cond, k_x)
    warnings = []
    for d in range(nd):
        for x in range(nx):
            if not present[d, x]:
                rows[d, x] = 0.0
                rows[d, x, x] = 1.0
                warnings.append(
                    f"no data for d={schema.d_label(d)!r} x={schema.x_label(x)!r};"
                    " identity row used"
                )
    sums = rows.sum(axis=2, keepdims=True)
    if np.abs(sums - 1.0).max() > MASS_ATOL * 1e3:
        raise InvalidParamsError("apply rows failed to marginalize cleanly")
    rows = rows / sums
    return ApplyMapper(
        schema, rows, provenance=dict(kernel.provenance), warnings=tuple(warnings)
    )


def _sample_categories(rows: np.ndarray, seed: SeedSpec,
                       stream_ids: np.ndarray) -> np.ndarray:
    """One draw per record from its probability row via its own stream."""
    cums = np.cumsum(rows, axis=1)
    out = np.empty(rows.shape[0], dtype=np.int64)
    top = rows.shape[1] - 1
    for i in range(rows.shape[0]):
        u = seed.stream(int(stream_ids[i])).random()
        out[i] = min(int(np.searchsorted(cums[i], u, side="right")), top)
    return out


def transform_train(dataset: Dataset, kernel: TransformKernel,
                    seed: int) -> Dataset:
    """Randomize a labeled dataset record-by-record through the kernel.

    Protected attributes pass through unchanged; stream ids are retained
    so a permuted input yields the correspondingly permuted output.
    """
    if not dataset.has_outcomes:
        raise MissingOutcomeError("train-mode transformation requires outcomes")
    schema = dataset.schema
    rows = kernel.probs[dataset.d, dataset.x, dataset.y]
    drawn = _sample_categories(rows, SeedSpec(seed), dataset.stream_ids)
    return Dataset(
        schema,
        dataset.d,
        drawn // schema.ny,
        drawn % schema.ny,
        stream_ids=dataset.stream_ids,
    )


def transform_apply(dataset: Dataset, mapper: ApplyMapper, seed: int) -> Dataset:
    """Randomize features of (possibly unlabeled) data; outcomes are not
    produced."""
    schema = dataset.schema
    rows = mapper.rows[dataset.d, dataset.x]
    drawn = _sample_categories(rows, SeedSpec(seed), dataset.stream_ids)
    return Dataset(
        schema,
        dataset.d,
        drawn,
        np.full(len(dataset), -1),
        stream_ids=dataset.stream_ids,
    )


@dataclass(frozen=True)
class ApplyBudget:
    """Apply-time distortion bounds per (d, x) input.

    For expected-mode budgets this is the exact apply-time guarantee; for
    thresholded budgets the same outcome-weighted average is reported per
    threshold as a bound on each exceedance probability (a derived figure,
    not one the training constraints stated directly).
    """

    mode: str
    values: Mapping[tuple[int, int], object]
    derived: bool
    note: str = ""


def apply_distortion_bound(budget: DistortionBudget, pmf: JointPMF) -> ApplyBudget:
    """Average per-outcome budgets into per-(d, x) apply-time bounds.

    c(x, d) = sum_y p(y | x, d) c(d, x, y); with outcome-independent
    budgets the training bound carries over unchanged.
    """
    schema = pmf.schema
    cond, present = cond_y_given_dx(pmf)
    shape = (schema.nd, schema.nx, schema.ny)
    values = {}
    if budget.mode == "expected":
        cgrid = budget.cell_c(shape)
        avg = (cond * cgrid).sum(axis=2)
        for d in range(schema.nd):
            for x in range(schema.nx):
                if present[d, x]:
                    values[(d, x)] = float(avg[d, x])
        return ApplyBudget("expected", values, derived=False)
    pairs = budget.cell_pairs(shape)
    for d in range(schema.nd):
        for x in range(schema.nx):
            if present[d, x]:
                values[(d, x)] = tuple(
                    (t, float((cond[d, x] * cgrid[d, x]).sum())) for t, cgrid in pairs
                )
    return ApplyBudget(
        "thresholded",
        values,
        derived=True,
        note=(
            "outcome-averaged exceedance budgets; bounds each threshold's"
            " apply-time exceedance probability"
        ),
    )
