"""Finite-difference verification of analytic gradients.

Central differences at step 1e-5 in float64 are the independent oracle for
every registered op and for the composed loss chains.  ``run_all`` backs the
``gradcheck`` CLI command and the acceptance suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

FD_STEP = 1e-5
FIRST_ORDER_TOL = 1e-4
SECOND_ORDER_TOL = 1e-3


def numerical_grad(fn, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.copy()
    for i in range(flat.size):
        orig = flat.flat[i]
        flat.flat[i] = orig + step
        hi = fn(flat)
        flat.flat[i] = orig - step
        lo = fn(flat)
        flat.flat[i] = orig
        g.flat[i] = (hi - lo) / (2.0 * step)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)


def check_scalar_fn(build, x: np.ndarray, step: float = FD_STEP) -> float:
    """Max relative error between engine gradient and finite differences.

    ``build`` maps a leaf Tensor to a scalar loss Tensor.
    """
    leaf = ad.Tensor(x, requires_grad=True)
    loss = build(leaf)
    analytic = ad.grad(loss, [leaf])[0].data

    def value(arr):
        return build(ad.Tensor(arr)).item()

    return rel_error(analytic, numerical_grad(value, x, step))


def check_second_order(build, x: np.ndarray, rng: np.random.Generator,
                       step: float = FD_STEP) -> float:
    """FD-check the gradient of a gradient.

    phi(x) = <c, d build(x)/dx> for a fixed random c; its analytic gradient
    (one more backward pass) is compared against central differences of the
    first-order gradient.
    """
    c = rng.standard_normal(x.shape)

    def first_grad(arr):
        leaf = ad.Tensor(arr, requires_grad=True)
        return ad.grad(build(leaf), [leaf], create_graph=True)[0]

    leaf = ad.Tensor(x, requires_grad=True)
    g1 = ad.grad(build(leaf), [leaf], create_graph=True)[0]
    phi = ad.sum(ad.mul(g1, ad.Tensor(c)))
    analytic = ad.grad(phi, [leaf])[0].data

    def phi_value(arr):
        return float(np.sum(first_grad(arr).data * c))

    return rel_error(analytic, numerical_grad(phi_value, x, step))


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _probe_weights(shape) -> np.ndarray:
    """Fixed, nonzero weights; must not change between oracle evaluations."""
    n = int(np.prod(shape))
    return (np.sin(np.arange(n) * 0.7) + 0.4).reshape(shape)


def _op_cases(rng: np.random.Generator):
    """Scalar-loss builders exercising every registered op on random shapes."""
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    m = rng.standard_normal((4, 5))
    v = rng.standard_normal(6)
    pos = np.abs(rng.standard_normal((3, 4))) + 0.5
    labels = rng.integers(0, 4, size=3)
    row = rng.standard_normal(4)

    def weighted(t):
        return ad.sum(ad.mul(t, ad.Tensor(_probe_weights(t.shape))))

    cases = {
        "add": lambda x: weighted(ad.add(x, ad.Tensor(b))),
        "add_broadcast": lambda x: weighted(ad.add(x, ad.Tensor(row))),
        "sub": lambda x: weighted(ad.sub(ad.Tensor(b), x)),
        "mul": lambda x: weighted(ad.mul(x, ad.Tensor(b))),
        "scale": lambda x: weighted(ad.scale(x, 1.7)),
        "matmul": lambda x: weighted(ad.matmul(x, ad.Tensor(m))),
        "transpose": lambda x: weighted(ad.transpose(x)),
        "relu": lambda x: weighted(ad.relu(x)),
        "clamp_min": lambda x: weighted(ad.clamp_min(x, 0.1)),
        "exp": lambda x: weighted(ad.exp(x)),
        "log": lambda x: weighted(ad.log(x)),
        "sqrt": lambda x: weighted(ad.sqrt(x)),
        "reciprocal": lambda x: weighted(ad.reciprocal(x)),
        "sum_axis": lambda x: weighted(ad.sum(x, axis=1)),
        "sum_keepdims": lambda x: weighted(ad.sum(x, axis=0, keepdims=True)),
        "mean_axis": lambda x: weighted(ad.mean(x, axis=1)),
        "reshape": lambda x: weighted(ad.reshape(x, (4, 3))),
        "concat": lambda x: weighted(ad.concat([x, ad.Tensor(b)], axis=1)),
        "narrow": lambda x: weighted(ad.narrow(x, 1, 1, 2)),
        "softmax": lambda x: weighted(ad.softmax(x, axis=-1)),
        "log_softmax": lambda x: weighted(ad.log_softmax(x, axis=-1)),
        "logsumexp": lambda x: weighted(ad.logsumexp(x, axis=-1)),
        "l2_normalize": lambda x: weighted(ad.l2_normalize(x)),
        "cosine_similarity": lambda x: ad.sum(ad.cosine_similarity(x, ad.Tensor(b))),
        "cross_entropy_with_logits": lambda x: ad.cross_entropy_with_logits(x, labels),
    }
    inputs = {name: a for name in cases}
    inputs["log"] = pos
    inputs["sqrt"] = pos
    inputs["reciprocal"] = pos
    inputs["cosine_similarity"] = a + 0.3
    inputs["_vector"] = v
    return cases, inputs


def run_op_checks(seed: int = 0, rounds: int = 100, sabotage: str | None = None):
    """Gradcheck every op over ``rounds`` random draws; returns CheckResult list."""
    worst: dict[str, float] = {}
    for r in range(rounds):
        rng = np.random.default_rng((seed, r))
        cases, inputs = _op_cases(rng)
        for name, build in cases.items():
            err = check_scalar_fn(build, inputs[name])
            if sabotage == name:
                err += 1.0
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(name, err, FIRST_ORDER_TOL) for name, err in worst.items()]


def _chain_cases(rng: np.random.Generator):
    """Composed chains: cross-attention head + classifier, and the contrastive loss."""
    from . import attention, contrastive

    f, d, dk, dv, way = 3, 5, 4, 6, 3
    params = attention.init_params(np.random.default_rng(7), d, dk, dv, way)
    params.tensors["classifier_w"].data[:] = rng.standard_normal((way, dv))
    params.tensors["classifier_b"].data[:] = rng.standard_normal(way)
    frames = rng.standard_normal((f, d))
    act = rng.standard_normal(d)
    label = np.array([1])

    def attend_chain(x):
        p = {k: ad.Tensor(v.data) for k, v in params.tensors.items()}
        p["key_map"] = x
        rec = attention.attend_tensors(ad.Tensor(frames), ad.Tensor(act), p, dk)
        logits = attention.classify_tensors(rec.aggregated, p)
        return ad.cross_entropy_with_logits(ad.reshape(logits, (1, way)), label)

    z = rng.standard_normal((6, 4)) * 0.7 + 0.2

    def ntxent_chain(x):
        return contrastive.nt_xent_from_tensor(x, tau=0.3)

    return {
        "chain_attend_classify_xent": (attend_chain, params.tensors["key_map"].data.copy()),
        "chain_nt_xent": (ntxent_chain, z),
    }


def run_chain_checks(seed: int = 0, rounds: int = 20, sabotage: str | None = None):
    worst: dict[str, float] = {}
    for r in range(rounds):
        rng = np.random.default_rng((seed, 1000 + r))
        for name, (build, x) in _chain_cases(rng).items():
            err = check_scalar_fn(build, x)
            if sabotage == name:
                err += 1.0
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(name, err, FIRST_ORDER_TOL) for name, err in worst.items()]


def _double_cases(rng: np.random.Generator):
    from . import attention

    f, d, dk, dv, way = 2, 4, 3, 4, 2
    params = attention.init_params(np.random.default_rng(11), d, dk, dv, way)
    params.tensors["classifier_w"].data[:] = rng.standard_normal((way, dv))
    params.tensors["classifier_b"].data[:] = rng.standard_normal(way)
    frames = rng.standard_normal((f, d))
    act = rng.standard_normal(d)
    label = np.array([0])

    def attend_chain(x):
        p = {k: ad.Tensor(v.data) for k, v in params.tensors.items()}
        p["query_map"] = x
        rec = attention.attend_tensors(ad.Tensor(frames), ad.Tensor(act), p, dk)
        logits = attention.classify_tensors(rec.aggregated, p)
        return ad.cross_entropy_with_logits(ad.reshape(logits, (1, way)), label)

    mat = rng.standard_normal((3, 4))

    cases = {
        "double_matmul_xent": (
            lambda x: ad.cross_entropy_with_logits(ad.matmul(ad.Tensor(mat), x),
                                                   np.array([0, 1, 1])),
            rng.standard_normal((4, 3)),
        ),
        "double_l2_normalize": (
            lambda x: ad.sum(ad.mul(ad.l2_normalize(x), ad.Tensor(_probe_weights(x.shape)))),
            rng.standard_normal((2, 5)) + 0.4,
        ),
        "double_softmax": (
            lambda x: ad.sum(ad.mul(ad.softmax(x), ad.Tensor(_probe_weights(x.shape)))),
            rng.standard_normal((3, 4)),
        ),
        "double_attend_chain": (attend_chain, params.tensors["query_map"].data.copy()),
    }
    return cases


def run_double_checks(seed: int = 0, rounds: int = 20, sabotage: str | None = None):
    worst: dict[str, float] = {}
    for r in range(rounds):
        rng = np.random.default_rng((seed, 2000 + r))
        for name, (build, x) in _double_cases(rng).items():
            err = check_second_order(build, x, rng)
            if sabotage == name:
                err += 1.0
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(name, err, SECOND_ORDER_TOL) for name, err in worst.items()]


def run_all(seed: int = 0, op_rounds: int = 100, chain_rounds: int = 20,
            sabotage: str | None = None):
    results = run_op_checks(seed, op_rounds, sabotage)
    results += run_chain_checks(seed, chain_rounds, sabotage)
    results += run_double_checks(seed, chain_rounds, sabotage)
    return results
