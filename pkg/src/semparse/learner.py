"""Learning from denotations by maximising marginal log-likelihood on the beam."""

from __future__ import annotations

import logging
import math
import random
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from semparse.logic import LogicError, denotation_equals
from semparse.model import Model, NNParams, Params, denote
from semparse.parser import BeamConfig, parse

log = logging.getLogger(__name__)

ADAGRAD_EPS = 1e-8
# gradient entries this small are cancellation noise (features shared by every candidate)
GRAD_ZERO = 1e-12


@dataclass
class TrainConfig:
    epochs: int = 5
    step_size: float = 0.1
    optimizer: str = "sgd"
    l1: float = 0.0
    beam: BeamConfig = field(default_factory=BeamConfig)
    shuffle_seed: int = 0
    nn_units: int = 0  # 0 disables the nonlinear scorer
    step_schedule: str = "constant"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step size must be > 0")
        if self.optimizer not in ("sgd", "adagrad"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.l1 < 0:
            raise ValueError("l1 must be >= 0")
        if self.nn_units < 0:
            raise ValueError("nn_units must be >= 0")


@dataclass
class OptimizerState:
    sum_squared_grads: dict = field(default_factory=dict)
    last_l1_step: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Objective and gradient


def consistent_posterior(p, consistent):
    """Renormalise ``p`` onto the consistent derivations; None when none are."""
    if len(p) != len(consistent):
        raise ValueError("length mismatch")
    mass = sum(pk for pk, ok in zip(p, consistent) if ok)
    if mass <= 0.0:
        return None
    return [pk / mass if ok else 0.0 for pk, ok in zip(p, consistent)]


def consistency(derivations, y, context, cache=None) -> list:
    out = []
    for d in derivations:
        z = denote(d.sem, context, cache)
        out.append(not isinstance(z, LogicError) and denotation_equals(z, y))
    return out


def _scores(derivations, params: Params):
    model = Model(params)
    return np.array([model.score(d.features) for d in derivations], dtype=np.float64)


def _log_softmax(s):
    m = s.max()
    return s - m - math.log(np.exp(s - m).sum())


def example_objective(derivations, consistent, params: Params):
    """log of the model mass on consistent derivations; None without support."""
    if not derivations or not any(consistent):
        return None
    logp = _log_softmax(_scores(derivations, params))
    good = logp[np.asarray(consistent, dtype=bool)]
    m = good.max()
    return float(m + math.log(np.exp(good - m).sum()))


def example_gradient(derivations, consistent, params: Params):
    """Gradient of :func:`example_objective`: sum_d (q(d) - p(d)) phi(d).

    Returned as a :class:`Params` holding gradients for every parameter
    block; ``None`` when no derivation is consistent.
    """
    if not derivations:
        return None
    s = _scores(derivations, params)
    p = np.exp(_log_softmax(s))
    q = consistent_posterior(list(p), consistent)
    if q is None:
        return None
    coef = [float(x) for x in np.asarray(q) - p]
    grad = Params()
    nn = params.nn
    if nn is not None:
        grad.nn = NNParams([0.0] * nn.m, [{} for _ in range(nn.m)])
    for c, d in zip(coef, derivations):
        if c == 0.0:
            continue
        phi = d.features
        for k, v in phi.items():
            grad.linear[k] = grad.linear.get(k, 0.0) + c * v
        if nn is not None:
            for i in range(nn.m):
                h = math.tanh(sum(v * nn.w[i].get(k, 0.0) for k, v in phi.items()))
                grad.nn.alpha[i] += c * h
                back = c * nn.alpha[i] * (1.0 - h * h)
                if back != 0.0:
                    wi = grad.nn.w[i]
                    for k, v in phi.items():
                        wi[k] = wi.get(k, 0.0) + back * v
    grad.linear = {k: v for k, v in grad.linear.items() if abs(v) > GRAD_ZERO}
    if grad.nn is not None:
        grad.nn.w = [{k: v for k, v in w.items() if abs(v) > GRAD_ZERO} for w in grad.nn.w]
    return grad


# ---------------------------------------------------------------------------
# Optimisers (ascent: the objective is maximised)


def sgd_step(theta: dict, grad: dict, eta: float) -> dict:
    for k, g in grad.items():
        theta[k] = theta.get(k, 0.0) + eta * g
    return theta


def adagrad_step(theta: dict, grad: dict, state: OptimizerState, eta: float) -> dict:
    G = state.sum_squared_grads
    for k, g in grad.items():
        if g == 0.0:
            continue
        G[k] = G.get(k, 0.0) + g * g
        theta[k] = theta.get(k, 0.0) + eta * g / math.sqrt(G[k] + ADAGRAD_EPS)
    return theta


def soft_threshold(x: float, t: float) -> float:
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


def l1_prox(theta: dict, lam: float, step: float, keys=None) -> dict:
    """Soft-threshold weights by ``lam * step``; exact zeros are removed."""
    if lam == 0.0:
        return theta
    for k in list(theta if keys is None else keys):
        if k not in theta:
            continue
        v = soft_threshold(theta[k], lam * step)
        if v == 0.0:
            del theta[k]
        else:
            theta[k] = v
    return theta


class _Block:
    """One parameter block (a sparse dict) with its optimiser state."""

    def __init__(self, theta: dict, config: TrainConfig):
        self.theta = theta
        self.config = config
        self.state = OptimizerState()

    def _step_size(self, k) -> float:
        eta = self.config.step_size
        if self.config.optimizer == "adagrad":
            return eta / math.sqrt(self.state.sum_squared_grads.get(k, 0.0) + ADAGRAD_EPS)
        return eta

    def _catch_up(self, k, t):
        """Apply the L1 shrinkage owed for steps t' < t in which k was untouched."""
        last = self.state.last_l1_step.get(k)
        if last is not None and t - 1 - last > 0 and k in self.theta:
            l1_prox(self.theta, self.config.l1, self._step_size(k) * (t - 1 - last), [k])
        self.state.last_l1_step[k] = t - 1

    def update(self, grad: dict, t: int):
        cfg = self.config
        lam = cfg.l1
        if lam:
            for k in grad:
                self._catch_up(k, t)
        if cfg.optimizer == "adagrad":
            adagrad_step(self.theta, grad, self.state, cfg.step_size)
        else:
            sgd_step(self.theta, grad, cfg.step_size)
        if lam:
            for k in grad:
                l1_prox(self.theta, lam, self._step_size(k), [k])
                self.state.last_l1_step[k] = t

    def flush(self, t: int):
        if not self.config.l1:
            return
        for k in list(self.theta):
            self._catch_up(k, t + 1)
            self.state.last_l1_step[k] = t


# ---------------------------------------------------------------------------
# Training and evaluation


def _init_nn(m: int, seed: int) -> NNParams:
    rng = random.Random(seed)
    return NNParams([rng.uniform(-0.1, 0.1) for _ in range(m)], [{} for _ in range(m)])


def train(dataset, grammar, config: TrainConfig | None = None, params: Params | None = None):
    """Fit parameters by SGD/AdaGrad on the beam-approximated marginal likelihood.

    Returns ``(params, metrics)`` where metrics holds one dict per epoch.
    """
    config = config or TrainConfig()
    params = params if params is not None else Params()
    if config.nn_units and params.nn is None:
        params.nn = _init_nn(config.nn_units, config.shuffle_seed)
    linear = _Block(params.linear, config)
    alpha_block = w_blocks = None
    if params.nn is not None:
        alpha_block = _Block({i: a for i, a in enumerate(params.nn.alpha)}, config)
        w_blocks = [_Block(w, config) for w in params.nn.w]

    examples = list(dataset.examples)
    metrics = []
    t = 0
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = list(range(len(examples)))
        random.Random(f"{config.shuffle_seed}:{epoch}").shuffle(order)
        objective, updated, skipped, correct = 0.0, 0, 0, 0
        for idx in order:
            ex = examples[idx]
            context = dataset.contexts[ex.context_id]
            cache = {}
            model = Model(params)
            derivs = parse(ex.utterance, context, grammar,
                           model.scorer(ex.utterance, context, cache), config.beam)
            ok = consistency(derivs, ex.target, context, cache)
            if ok and ok[0]:
                correct += 1
            grad = example_gradient(derivs, ok, params)
            if grad is None:
                skipped += 1
                continue
            objective += example_objective(derivs, ok, params)
            updated += 1
            t += 1
            linear.update(grad.linear, t)
            if params.nn is not None:
                alpha_block.update({i: g for i, g in enumerate(grad.nn.alpha) if g}, t)
                for blk, gw in zip(w_blocks, grad.nn.w):
                    blk.update(gw, t)
                params.nn.alpha = [alpha_block.theta.get(i, 0.0) for i in range(params.nn.m)]
        linear.flush(t)
        if params.nn is not None:
            alpha_block.flush(t)
            for blk in w_blocks:
                blk.flush(t)
            params.nn.alpha = [alpha_block.theta.get(i, 0.0) for i in range(params.nn.m)]
        row = {
            "epoch": epoch,
            "objective": objective / updated if updated else 0.0,
            "trainAcc": correct / len(examples) if examples else 0.0,
            "skipped": skipped,
            "nonzeroWeights": params.nonzero(),
            "seconds": round(time.perf_counter() - start, 3),
        }
        log.info("epoch %d: %s", epoch, row)
        metrics.append(row)
    return params, metrics


@dataclass
class Prediction:
    example: object
    lf_text: str | None  # top logical form, None when nothing parsed
    denotation: object  # Denotation, LogicError, or None
    correct: bool
    derivation: object = None  # not carried across worker processes


def predict(example, contexts, grammar, params: Params, beam: BeamConfig | None = None):
    context = contexts[example.context_id]
    cache = {}
    derivs = parse(example.utterance, context, grammar,
                   Model(params).scorer(example.utterance, context, cache), beam)
    if not derivs:
        return Prediction(example, None, None, False)
    top = derivs[0]
    y = denote(top.sem, context, cache)
    ok = not isinstance(y, LogicError) and denotation_equals(y, example.target)
    return Prediction(example, top.lf_text, y, ok, top)


_WORKER = {}


def _worker_init(contexts, grammar, params, beam):
    _WORKER.update(contexts=contexts, grammar=grammar, params=params, beam=beam)


def _worker_predict(example):
    w = _WORKER
    pred = predict(example, w["contexts"], w["grammar"], w["params"], w["beam"])
    return pred.correct, pred.lf_text, pred.denotation


def evaluate_detailed(dataset, grammar, params: Params, beam: BeamConfig | None = None,
                      jobs: int = 1) -> list:
    if jobs > 1 and len(dataset.examples) > 1:
        with ProcessPoolExecutor(
            jobs, initializer=_worker_init,
            initargs=(dataset.contexts, grammar, params, beam),
        ) as pool:
            rows = list(pool.map(_worker_predict, dataset.examples, chunksize=8))
        return [
            Prediction(ex, text, y, ok) for ex, (ok, text, y) in zip(dataset.examples, rows)
        ]
    return [predict(ex, dataset.contexts, grammar, params, beam) for ex in dataset.examples]


def evaluate(dataset, grammar, params: Params, beam: BeamConfig | None = None,
             jobs: int = 1) -> float:
    """Fraction of examples whose top derivation executes to the target."""
    if not dataset.examples:
        return 0.0
    preds = evaluate_detailed(dataset, grammar, params, beam, jobs)
    return sum(p.correct for p in preds) / len(preds)
