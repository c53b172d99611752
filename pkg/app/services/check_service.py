"""Built-in oracle suites behind the ``check`` verb.

Each suite returns a :class:`CheckResult`; the worst observed error is kept
so the table shows the margin, not only the verdict.
"""
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from app.autodiff import ops
from app.autodiff.gradcheck import check_gradients
from app.autodiff.rng import Rng
from app.autodiff.tensor import ComputationGraph, Tensor, no_grad
from app.errors import UsageError
from app.models.arch import ArchConfig
from app.models.losses import LossWeights
from app.models.run import OptimizerConfig
from app.nn.agent import build_agent
from app.nn.inductive_bias import (MHSAParams, attention_discrepancy, build_selection_matrices, conv_generalized,
                                   conv_matrix_form, generalized_biases, mhsa_forward)
from app.nn.layers import LayerTrace, fc_equals_1x1_conv
from app.nn.shared import ParameterPartition
from app.nn.vit import build_vit
from app.training.bootstrap import align, bootstrap_step, compute_gradient_pair
from app.training.objectives import (combined_loss, feat_loss_layer, feat_loss_total, feat_weight_multiplier,
                                     kd_loss, mutual_loss)
from app.training.optim import Optimizer

logger = logging.getLogger(__name__)

F64 = np.float64


class CheckResult(BaseModel):
    suite: str
    passed: bool
    cases: int
    worst: float
    tolerance: float
    detail: str = ""


def _rand(rng: Rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape).astype(F64), requires_grad=True)


# -- convolution equivalence ---------------------------------------------------------

def check_conv_equivalence(seed: int = 0, draws: int = 20, tol: float = 1e-10) -> CheckResult:
    rng = Rng(seed, "conv")
    worst, cases = 0.0, 0
    for k in (1, 3, 5):
        for shape in ((1, 1), (3, 3), (4, 5), (6, 6)):
            biases = build_selection_matrices(shape, (k, k))
            for _ in range(draws):
                c_in, c_out = 3, 4
                x = rng.normal(size=(c_in,) + shape)
                kernel = rng.normal(size=(k, k, c_in, c_out))
                direct = ops.conv2d_direct(Tensor(x), Tensor(kernel), padding=k // 2).data
                tokens = Tensor(x.reshape(c_in, -1).T)
                weights = [Tensor(kernel[i // k, i % k]) for i in range(k * k)]
                matrix = conv_matrix_form(tokens, biases, weights).data
                worst = max(worst, float(np.abs(matrix - direct.reshape(c_out, -1).T).max()))
                cases += 1
    return CheckResult(suite="conv-equivalence", passed=worst <= tol, cases=cases, worst=worst, tolerance=tol)


def check_fc_1x1(seed: int = 0, instances: int = 50, tol: float = 1e-10) -> CheckResult:
    rng = Rng(seed, "fc")
    failures = 0
    for _ in range(instances):
        c_in, c_out = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        h, w = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        if not fc_equals_1x1_conv(rng.normal(size=(c_in, c_out)), rng.normal(size=c_out),
                                  rng.normal(size=(c_in, h, w)), tol):
            failures += 1
    # the comparison must notice a perturbation well above tolerance
    sensitive = not fc_equals_1x1_conv(np.eye(2), np.zeros(2), np.ones((2, 2, 2)), tol, perturb=1e-6)
    return CheckResult(suite="fc-1x1", passed=failures == 0 and sensitive, cases=instances, worst=float(failures),
                       tolerance=tol, detail="" if sensitive else "perturbation went unnoticed")


# -- attention with hard-coded selection rows ----------------------------------------------

def attention_with(x: Tensor, params: MHSAParams, attn: np.ndarray) -> Tensor:
    """MHSA output with the softmax attention replaced by the given H×n×n matrices."""
    v = ops.matmul(x, params.w_v)
    if params.b_v is not None:
        v = v + params.b_v
    heads = []
    for h in range(params.heads):
        heads.append(ops.matmul(Tensor(attn[h]), ops.slice_axis(v, h * params.head_dim,
                                                                (h + 1) * params.head_dim, axis=-1)))
    y = ops.matmul(ops.concat(heads, axis=-1), params.w_o)
    return y if params.b_o is None else y + params.b_o


def check_vanishing(seed: int = 0, tol: float = 1e-8) -> CheckResult:
    rng = Rng(seed, "vanishing")
    worst, cases = 0.0, 0
    for heads, d, shape in ((4, 16, (4, 4)), (4, 32, (3, 4)), (9, 18, (4, 4)), (9, 27, (3, 3))):
        biases = generalized_biases(heads, shape)
        dense = biases.to_dense()
        for _ in range(5):
            params = MHSAParams(heads, *(_rand(rng, d, d) for _ in range(4)),
                                b_q=_rand(rng, d), b_k=_rand(rng, d), b_v=_rand(rng, d), b_o=_rand(rng, d))
            x = _rand(rng, biases.n, d)
            mhsa = attention_with(x, params, dense).data
            conv = conv_generalized(x, biases, [params.value_output(h) for h in range(heads)],
                                    [params.value_output_bias(h) for h in range(heads)], params.b_o).data
            worst = max(worst, float(np.abs(mhsa - conv).max()))
            w_vo = [params.value_output(h) for h in range(heads)]
            for token in range(biases.n):
                err = attention_discrepancy(x, [Tensor(m) for m in dense], biases, w_vo, token).data
                worst = max(worst, float(np.abs(err).max()))
            cases += 1
    return CheckResult(suite="vanishing", passed=worst <= tol, cases=cases, worst=worst, tolerance=tol)


# -- finite differences ----------------------------------------------------------------------

def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return ops.reduce_sum(out * Tensor(weights))


def op_gradient_cases(rng: Rng) -> Dict[str, Tuple[Callable[..., Tensor], List[Tensor]]]:
    """Scalar test functions of every differentiable primitive, keyed by op name."""
    r = lambda *shape: rng.normal(size=shape)  # noqa: E731
    biases = generalized_biases(4, (3, 3))
    cases = {
        "matmul": (lambda a, b, w=r(3, 2): _weighted_sum(ops.matmul(a, b), w), [_rand(rng, 3, 4), _rand(rng, 4, 2)]),
        "mul_div": (lambda a, b, w=r(3, 4): _weighted_sum(a * b / (ops.square(b) + 1.0), w),
                    [_rand(rng, 3, 4), _rand(rng, 3, 4)]),
        "exp_log_sqrt": (lambda a, w=r(5): _weighted_sum(ops.log(ops.sqrt(ops.exp(a) + 1.0)), w), [_rand(rng, 5)]),
        "softmax": (lambda a, w=r(2, 5): _weighted_sum(ops.softmax(a, axis=-1), w), [_rand(rng, 2, 5)]),
        "log_softmax": (lambda a, w=r(2, 5): _weighted_sum(ops.log_softmax(a, axis=-1), w), [_rand(rng, 2, 5)]),
        "gelu": (lambda a, w=r(6): _weighted_sum(ops.gelu(a), w), [_rand(rng, 6)]),
        "layer_norm": (lambda a, g, b, w=r(3, 6): _weighted_sum(ops.layer_norm(a, g, b), w),
                       [_rand(rng, 3, 6), _rand(rng, 6), _rand(rng, 6)]),
        "reductions": (lambda a, w=r(3): _weighted_sum(ops.reduce_mean(a, axis=1) + ops.reduce_sum(a, axis=1), w),
                       [_rand(rng, 3, 4)]),
        "reshape_transpose": (lambda a, w=r(4, 3): _weighted_sum(ops.transpose(ops.reshape(a, (3, 4)), (1, 0)), w),
                              [_rand(rng, 2, 6)]),
        "conv2d": (lambda x, k, b, w=r(1, 3, 3, 3): _weighted_sum(ops.conv2d_direct(x, k, b, stride=2, padding=1), w),
                   [_rand(rng, 1, 2, 5, 5), _rand(rng, 3, 3, 2, 3), _rand(rng, 3)]),
        "avg_pool2d": (lambda x, w=r(1, 2, 2, 2): _weighted_sum(ops.avg_pool2d(x, 2), w), [_rand(rng, 1, 2, 4, 4)]),
        "max_pool2d": (lambda x, w=r(1, 2, 2, 2): _weighted_sum(ops.max_pool2d(x, 2), w), [_rand(rng, 1, 2, 4, 4)]),
        "generalized_conv": (lambda x, a, b, w=r(9, 4): _weighted_sum(conv_generalized(x, biases, [a, b, a, b]), w),
                             [_rand(rng, 9, 4), _rand(rng, 4, 4), _rand(rng, 4, 4)]),
        "mhsa": (lambda x, q, k, v, o, w=r(5, 4): _weighted_sum(mhsa_forward(x, MHSAParams(2, q, k, v, o))[0], w),
                 [_rand(rng, 5, 4)] + [_rand(rng, 4, 4) for _ in range(4)]),
    }
    return cases


GRADCHECK_ARCH = ArchConfig(layers=2, hidden=4, heads=2, patch=4, image_size=8, channels=1, classes=3,
                            mlp_ratio=1.0, agent_variant="base")


def objective_gradient_case(seed: int, arch: ArchConfig = GRADCHECK_ARCH,
                            weights: Optional[LossWeights] = None) -> Tuple[Callable[..., Tensor], List[Tensor]]:
    """Full combined objective of a tiny unshared ViT/agent pair in f64, checked through its small tensors.

    The distillation targets are frozen at the initial parameters so the
    differenced objective is the one the tape differentiates.
    """
    rng = Rng(seed, "objective")
    vit = build_vit(arch, rng.split("vit"), F64)
    agent = build_agent(arch, rng.split("agent"), F64)
    images = Tensor(rng.normal(size=(2, arch.channels, arch.image_size, arch.image_size)))
    labels = rng.integers(0, arch.classes, size=2)
    weights = weights or LossWeights()
    with no_grad():
        frozen = (vit(images).data.copy(), agent(images).data.copy())

    def objective(*_):
        loss, _ = combined_loss(vit.forward_traced(images), agent.forward_traced(images), labels, weights, 0.25,
                                peer_logits=frozen)
        return loss

    checked = [t for model in (vit, agent) for t in model.parameters().values() if t.size <= 48][:8]
    return objective, checked


def objective_gradient_error(seed: int, weights: Optional[LossWeights] = None) -> float:
    """Worst relative error of :func:`objective_gradient_case`, five-point differences."""
    fn, inputs = objective_gradient_case(seed, weights=weights)
    return max(check_gradients(fn, inputs, eps=1e-3, floor=1e-3, order=4))


def check_gradients_suite(seed: int = 0, instances: int = 10, tol: float = 1e-7) -> CheckResult:
    worst, cases, offender = 0.0, 0, ""
    for i in range(instances):
        rng = Rng(seed + i, "gradcheck")
        for name, (fn, inputs) in op_gradient_cases(rng).items():
            err = max(check_gradients(fn, inputs))
            if err > worst:
                worst, offender = err, name
            cases += 1
    for i in range(instances):
        err = objective_gradient_error(seed + i)
        if err > worst:
            worst, offender = err, "combined_loss"
        cases += 1
    return CheckResult(suite="gradients", passed=worst < tol, cases=cases, worst=worst, tolerance=tol,
                       detail=f"worst: {offender}" if offender else "")


# -- alignment -----------------------------------------------------------------------------------

def check_align(seed: int = 0, pairs: int = 1000, tol: float = 1e-9) -> CheckResult:
    rng = Rng(seed, "align")
    worst = 0.0
    problems = []
    for _ in range(pairs):
        dim = int(rng.integers(1, 17))
        g, ref = rng.normal(size=dim), rng.normal(size=dim)
        out = align(g, ref)
        scale = np.linalg.norm(g) * np.linalg.norm(ref) + 1e-300
        worst = max(worst, max(0.0, -float(np.dot(out, ref)) / scale))
        if np.dot(g, ref) >= 0 and not np.array_equal(out, g):
            problems.append("agreeing pair modified")
        if np.linalg.norm(out) > np.linalg.norm(g) * (1 + 1e-12):
            problems.append("norm increased")
    hand = align(np.array([-1.0, 1.0]), np.array([1.0, 0.0]))
    if not np.array_equal(hand, np.array([0.0, 1.0])):
        problems.append(f"(-1,1)|(1,0) gave {hand.tolist()}")
    return CheckResult(suite="align", passed=worst <= tol and not problems, cases=pairs + 1, worst=worst,
                       tolerance=tol, detail="; ".join(sorted(set(problems))))


# -- literal bootstrap toy -------------------------------------------------------------------------

TOY_START = {"shared": 1.0, "vit": -0.8, "agent": -1.1}


def toy_reference(steps: int, lr: float = 0.1) -> List[Tuple[float, float, float]]:
    """Closed-form SGD trajectory of L = ½(s + p_V)² + ½(s + p_A)².

    ∇_V s = s + p_V, ∇_A s = s + p_A; a conflicting agent gradient is
    projected off the ViT gradient, which in one dimension zeroes it.
    """
    s, pv, pa = TOY_START["shared"], TOY_START["vit"], TOY_START["agent"]
    out = []
    for _ in range(steps):
        gv, ga = s + pv, s + pa
        ga_aligned = 0.0 if ga * gv < 0 and gv != 0 else ga
        s, pv, pa = s - lr * 0.5 * (gv + ga_aligned), pv - lr * gv, pa - lr * ga
        out.append((s, pv, pa))
    return out


def toy_trajectory(steps: int, lr: float = 0.1) -> List[Tuple[float, float, float]]:
    """The same toy driven through the recorded graph, the two backward sweeps and the optimizer."""
    shared = np.array([TOY_START["shared"]], dtype=F64)
    s_vit = Tensor(shared, requires_grad=True, name="shared.s")
    s_agent = Tensor(shared, requires_grad=True, name="shared.s")
    p_vit = Tensor(np.array([TOY_START["vit"]]), requires_grad=True, name="p")
    p_agent = Tensor(np.array([TOY_START["agent"]]), requires_grad=True, name="p")
    partition = ParameterPartition({"s": {"vit": s_vit, "agent": s_agent}}, {"p": p_vit}, {"p": p_agent})
    optimizer = Optimizer(OptimizerConfig(mode="sgd", shared_update="aligned"))
    out = []
    for _ in range(steps):
        with ComputationGraph() as graph:
            loss = ops.reduce_sum(ops.scale(ops.square(s_vit + p_vit), 0.5)
                                  + ops.scale(ops.square(s_agent + p_agent), 0.5))
        bootstrap_step(compute_gradient_pair(partition, loss, graph), partition, optimizer, lr)
        out.append((float(shared[0]), float(p_vit.data[0]), float(p_agent.data[0])))
    return out


def check_bootstrap_toy(steps: int = 5, tol: float = 1e-12) -> CheckResult:
    got = np.array(toy_trajectory(steps))
    expected = np.array(toy_reference(steps))
    worst = float(np.abs(got - expected).max())
    first = abs(got[0, 0] - 0.99)
    return CheckResult(suite="bootstrap-toy", passed=worst <= tol and first <= tol, cases=steps,
                       worst=max(worst, first), tolerance=tol, detail=f"first shared value {got[0, 0]!r}")


# -- loss laws -----------------------------------------------------------------------------------

def check_loss_laws(seed: int = 0, tol: float = 1e-10) -> CheckResult:
    rng = Rng(seed, "loss-laws")
    problems, worst, cases = [], 0.0, 0
    for _ in range(20):
        n_a, n_v, d = int(rng.integers(2, 10)), int(rng.integers(2, 10)), int(rng.integers(1, 6))
        fa, fv = Tensor(rng.normal(size=(2, n_a, d))), Tensor(rng.normal(size=(2, n_v, d)))
        value = feat_loss_layer(fa, fv)[0].item()
        if not 0.0 <= value <= 4.0:
            problems.append(f"feature loss {value} outside [0, 4]")
        c1, c2 = float(rng.uniform(0.1, 10.0)), float(rng.uniform(0.1, 10.0))
        rescaled = feat_loss_layer(Tensor(fa.data * c1), Tensor(fv.data * c2))[0].item()
        worst = max(worst, abs(rescaled - value))
        cases += 1

    depth = 3
    trace_a = LayerTrace([Tensor(rng.normal(size=(2, 4, 3))) for _ in range(depth)], Tensor(rng.normal(size=(2, 5))))
    trace_v = LayerTrace([Tensor(rng.normal(size=(2, 4, 3))) for _ in range(depth)], Tensor(rng.normal(size=(2, 5))))
    full, per_layer, _ = feat_loss_total(trace_a, trace_v, LossWeights())
    for dropped in range(1, depth + 1):
        kept = [layer for layer in range(1, depth + 1) if layer != dropped]
        partial, _, _ = feat_loss_total(trace_a, trace_v, LossWeights(supervised_layers=kept))
        worst = max(worst, abs(full.item() - per_layer[dropped] - partial.item()))
        cases += 1

    labels = rng.integers(0, 5, size=2)
    lv, la = Tensor(rng.normal(size=(2, 5)), requires_grad=True), Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    worst = max(worst, abs(mutual_loss(lv, la, labels, 4.0).item() - mutual_loss(la, lv, labels, 4.0).item()))
    with ComputationGraph() as graph:
        mutual = mutual_loss(lv, la, labels, 4.0)
    graph.backward(mutual)
    g_mutual = lv.grad.copy()
    lv.grad = la.grad = None
    with ComputationGraph() as graph:
        student = kd_loss(lv, la.detach(), labels, 4.0)
    graph.backward(student)
    worst = max(worst, float(np.abs(g_mutual - lv.grad).max()))
    cases += 2

    if feat_weight_multiplier(0.0) != 1.0 or feat_weight_multiplier(1.0) != 0.0:
        problems.append("decay endpoints are not 1 and 0")
    if feat_weight_multiplier(0.7, "none") != 1.0:
        problems.append("no-decay multiplier is not 1")
    cases += 1
    return CheckResult(suite="loss-laws", passed=worst <= tol and not problems, cases=cases, worst=worst,
                       tolerance=tol, detail="; ".join(problems))


SUITES: Dict[str, Callable[..., CheckResult]] = {
    "conv-equivalence": check_conv_equivalence,
    "fc-1x1": check_fc_1x1,
    "vanishing": check_vanishing,
    "gradients": check_gradients_suite,
    "align": check_align,
    "bootstrap-toy": lambda seed=0: check_bootstrap_toy(),
    "loss-laws": check_loss_laws,
}


def run_checks(suites: Optional[Sequence[str]] = None, seed: int = 0) -> List[CheckResult]:
    names = list(suites) if suites else list(SUITES)
    unknown = [name for name in names if name not in SUITES]
    if unknown:
        raise UsageError(f"unknown check suite(s) {unknown}, choose from {list(SUITES)}")
    results = []
    for name in names:
        result = SUITES[name](seed=seed)
        level = logging.INFO if result.passed else logging.ERROR
        logger.log(level, f"check {name}: {'pass' if result.passed else 'FAIL'} "
                          f"(worst {result.worst:.3g}, tol {result.tolerance:g})")
        results.append(result)
    return results


def format_results(results: Sequence[CheckResult]) -> str:
    lines = [f"{'suite':<18} {'result':<6} {'cases':>6} {'worst':>11} {'tol':>8}  detail"]
    for r in results:
        lines.append(f"{r.suite:<18} {'pass' if r.passed else 'FAIL':<6} {r.cases:>6} {r.worst:>11.3g} "
                     f"{r.tolerance:>8.0e}  {r.detail}")
    return "\n".join(lines)
