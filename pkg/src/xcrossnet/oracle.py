"""Brute-force reference implementations used only to verify the fast paths.

Nothing here shares code with the production layers: the cross oracle
materializes the full rank-one matrix the fast path avoids, the product
oracle runs the O(N^2 K) double sum the fast path factors, gradients come
from central finite differences, and the polynomial oracle expands the
cross recursion symbolically into monomials. Loop orders deliberately
differ from the fast implementations where there is a choice.

These paths may be exponential in small bounded sizes; they are test
equipment, not production code.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import linalg
from .data import Dataset, batch_iter, stable_sigmoid
from .errors import NumericError
from .layers import CrossStack
from .metrics import auc
from .model import ParamEntry, ParamRegistry
from .optim import AdamState, adam_step, batch_loss_and_grad, _instance_logloss


# ---------------------------------------------------------------------------
# naive layer recomputations
# ---------------------------------------------------------------------------


def naive_cross_forward(d: np.ndarray, stack: CrossStack) -> np.ndarray:
    """The cross recursion with the M x M outer-product matrix materialized."""
    d = linalg.as_vec(d)
    prev = d
    segments = [d]
    for w, b in zip(stack.weights, stack.biases):
        mat = linalg.outer(d, prev)  # O(M^2) on purpose
        c = mat @ w + b
        segments.append(c)
        prev = c
    return np.concatenate(segments)


def naive_product_p2(e, theta, t: int) -> float:
    """Literal double sum  sum_i sum_j theta[t,i] theta[t,j] <e_i, e_j>."""
    e = np.asarray(e, dtype=np.float64)
    n_fields, k = e.shape
    total = 0.0
    for i in range(n_fields):
        for j in range(n_fields):
            inner = 0.0
            for kk in range(k):
                inner += e[i, kk] * e[j, kk]
            total += theta[t, i] * theta[t, j] * inner
    return total


# ---------------------------------------------------------------------------
# symbolic polynomial expansion of the cross recursion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Monomial:
    exponents: tuple[int, ...]  # per-field powers; sum is the monomial order
    coefficient: float


EXPANSION_TERM_CAP = 1 << 20


def expand_cross_polynomial(weights) -> list[Monomial]:
    """Expand prod_i <d, w_i> into monomials of degree len(weights).

    With zero biases the cross recursion's scalar chain <c_last, w_last>
    collapses to exactly this product of linear forms, so evaluating the
    returned polynomial at any d must reproduce the numeric chain.
    Enumerates all m^len(weights) field choices; guarded against blowup.
    """
    weights = [linalg.as_vec(w) for w in weights]
    m = weights[0].shape[0]
    n_forms = len(weights)
    if m ** n_forms > EXPANSION_TERM_CAP:
        raise ValueError(
            f"expansion would enumerate {m}^{n_forms} terms; refusing")
    coeffs: dict[tuple[int, ...], float] = {}
    for picks in itertools.product(range(m), repeat=n_forms):
        coeff = 1.0
        for form, j in enumerate(picks):
            coeff *= weights[form][j]
        exps = [0] * m
        for j in picks:
            exps[j] += 1
        key = tuple(exps)
        coeffs[key] = coeffs.get(key, 0.0) + coeff
    return [Monomial(exps, c) for exps, c in sorted(coeffs.items())]


def evaluate_monomials(monomials, d) -> float:
    d = linalg.as_vec(d)
    total = 0.0
    for mono in monomials:
        term = mono.coefficient
        for j, power in enumerate(mono.exponents):
            term *= d[j] ** power
        total += term
    return total


def coefficient_via_order_sums(weights, alpha) -> float:
    """The order-bookkeeping closed form for a monomial coefficient.

    Computes  sum_{k=1..m} sum_{I: count_k(I) = alpha_k} prod_i w_i[I_i]
    where I ranges over per-form field choices (tuples in {0..m-1}^n_forms)
    and count_k(I) is how often field k is chosen. This is the closed form
    written with per-field order counts rather than joint ones; see the
    oracle tests for where it matches the exact expansion (m = 1 exactly,
    m = 2 up to a factor of m) and where it diverges (m >= 3, where the
    per-field constraint admits cross-field contamination terms).
    """
    weights = [linalg.as_vec(w) for w in weights]
    m = weights[0].shape[0]
    alpha = list(alpha)
    if len(alpha) != m:
        raise ValueError(f"alpha has {len(alpha)} entries for {m} fields")
    if any(a < 0 or a != int(a) for a in alpha):
        raise ValueError(f"alpha entries must be non-negative integers: {alpha}")
    n_forms = len(weights)
    if sum(alpha) != n_forms:
        raise ValueError(
            f"|alpha| = {sum(alpha)} must equal the number of forms {n_forms}")
    if m ** n_forms > EXPANSION_TERM_CAP:
        raise ValueError(
            f"would enumerate {m}^{n_forms} choice tuples; refusing")
    total = 0.0
    for picks in itertools.product(range(m), repeat=n_forms):
        coeff = 1.0
        for form, j in enumerate(picks):
            coeff *= weights[form][j]
        counts = [0] * m
        for j in picks:
            counts[j] += 1
        for k in range(m):
            if counts[k] == alpha[k]:
                total += coeff
    return total


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def finite_diff(f, theta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences (f(theta + eps e_i) - f(theta - eps e_i)) / 2 eps."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    work = theta.copy()
    for i in range(theta.shape[0]):
        work[i] = theta[i] + eps
        f_plus = f(work)
        work[i] = theta[i] - eps
        f_minus = f(work)
        work[i] = theta[i]
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericError(f"non-finite probe at coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


# ---------------------------------------------------------------------------
# whole-model gradient check
# ---------------------------------------------------------------------------


def relative_error(analytic: float, numeric: float, floor: float = 1e-10) -> float:
    if abs(analytic) < floor and abs(numeric) < floor:
        return 0.0
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric))


def batch_logloss(model, batch) -> float:
    """Forward-only mean clamped logloss (the function finite_diff probes)."""
    total = 0.0
    for i in range(len(batch)):
        inst = batch.instance(i)
        prob, _ = model.forward(inst)
        total += _instance_logloss(prob, inst.label)
    return total / len(batch)


def relu_kink_risk(model, batch, floor: float = 1e-4) -> bool:
    """True if any MLP pre-activation sits within floor of the ReLU kink."""
    for i in range(len(batch)):
        _, cache = model.forward(batch.instance(i))
        for z in cache.mlp.pre_acts:
            if np.any(np.abs(z) < floor):
                return True
    return False


def gradcheck_point(config, seed: int, instances: int = 3,
                    param_scale: float = 0.3, logit_cap: float = 8.0,
                    max_tries: int = 50):
    """A (model, batch) pair where finite differences are trustworthy.

    The training-scale init puts late-stage gradients below what central
    differences can resolve, so the check point redraws every parameter
    uniform +-param_scale. Draws are rejected while any MLP pre-activation
    sits near the ReLU kink or any |logit| exceeds logit_cap (past ~16 the
    loss clamp makes the probed function flat while the analytic gradient
    is not).
    """
    from .model import XCrossNetModel

    model = XCrossNetModel.init(config)
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        model.registry.set_flat(
            rng.uniform(-param_scale, param_scale, model.registry.total_size()))
        dense = rng.uniform(-1.0, 1.0, (instances, config.dense_fields))
        sparse = np.column_stack(
            [rng.integers(0, v, instances) for v in config.vocab_sizes])
        labels = rng.integers(0, 2, instances).astype(np.float64)
        batch = Dataset(dense, sparse, labels)
        logits = [model.forward(batch.instance(i))[1].mlp.logit
                  for i in range(instances)]
        if max(abs(z) for z in logits) <= logit_cap and \
                not relu_kink_risk(model, batch):
            return model, batch
    raise NumericError(
        f"no well-conditioned gradcheck point found in {max_tries} draws")


def gradcheck_model(model, batch, eps: float = 1e-5, skip_floor: float = 1e-10,
                    perturb_group: str | None = None) -> dict[str, float]:
    """Max relative error per registry group: backward vs finite differences.

    The probed function is the mean logloss over the batch; the analytic
    side is the model's hand-derived backward pass. Coordinates where both
    sides are below skip_floor are treated as agreeing (embedding rows the
    batch never touches are the common case). perturb_group, when set,
    injects an offset into that group's analytic gradient so callers can
    confirm the comparison actually detects wrong gradients.
    """
    registry = model.registry
    theta0 = registry.get_flat()
    analytic_loss = batch_loss_and_grad(model, batch)
    if not math.isfinite(analytic_loss):
        raise NumericError("loss is non-finite at the gradcheck point")
    if perturb_group is not None:
        registry[perturb_group].grad += 1e-2
    analytic = registry.get_grad_flat()

    def probe(theta):
        registry.set_flat(theta)
        return batch_logloss(model, batch)

    numeric = finite_diff(probe, theta0, eps)
    registry.set_flat(theta0)

    worst: dict[str, float] = {}
    offset = 0
    for entry in registry:
        size = entry.values.size
        a = analytic[offset:offset + size]
        f = numeric[offset:offset + size]
        err = 0.0
        for j in range(size):
            err = max(err, relative_error(a[j], f[j], skip_floor))
        worst[entry.name] = err
        offset += size
    return worst


# ---------------------------------------------------------------------------
# linear baseline
# ---------------------------------------------------------------------------


def lr_baseline_auc(train: Dataset, valid: Dataset, *, epochs: int = 5,
                    lr: float = 1e-3, batch_size: int = 512, l2: float = 1e-4,
                    seed: int = 0) -> float:
    """Validation AUC of plain logistic regression on dense + one-hot sparse.

    The forward/gradient math is its own vectorized code, but the update
    reuses the production Adam step and batch iterator, so the comparison
    against the full model isolates the representation, not the optimizer.
    """
    m = train.n_dense
    vocab_sizes = [int(max(train.sparse[:, i].max(), valid.sparse[:, i].max())) + 1
                   for i in range(train.n_sparse)]
    w_dense = np.zeros(m)
    w_cats = [np.zeros(v) for v in vocab_sizes]
    bias = np.zeros(1)
    entries = [ParamEntry("w_dense", w_dense, np.zeros(m))]
    entries += [ParamEntry(f"w_cat{i}", w_cats[i], np.zeros(vocab_sizes[i]))
                for i in range(len(w_cats))]
    entries.append(ParamEntry("bias", bias, np.zeros(1)))
    registry = ParamRegistry(entries)
    state = AdamState.init(registry)

    def logits_of(ds: Dataset) -> np.ndarray:
        z = ds.dense @ w_dense + bias[0]
        for i, w_cat in enumerate(w_cats):
            z = z + w_cat[ds.sparse[:, i]]
        return z

    for epoch in range(epochs):
        for batch in batch_iter(train, batch_size, seed=(seed, epoch)):
            p = stable_sigmoid(logits_of(batch))
            g = (p - batch.labels) / len(batch)
            registry["w_dense"].grad[:] = batch.dense.T @ g
            for i in range(len(w_cats)):
                grad_cat = registry[f"w_cat{i}"].grad
                grad_cat[:] = 0.0
                np.add.at(grad_cat, batch.sparse[:, i], g)
            registry["bias"].grad[0] = g.sum()
            adam_step(registry, state, lr, l2)
    return auc(stable_sigmoid(logits_of(valid)), valid.labels)
