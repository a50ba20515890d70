"""Full-model finite-difference check on a tiny fixed fixture."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tape
from .diffusion import build_schedule
from .graph import HeteroGraph
from .metapath import build_metapaths
from .model import ModelParams, Structure
from .seeding import rng_for
from .training import TrainConfig, batch_loss, pair_negatives, sample_real_negatives

TOLERANCE = 1e-4
FD_EPS = 1e-5
# denominators below this are treated as this; keeps cancellation noise on
# near-zero partials from dominating the relative error
ERROR_FLOOR = 1e-7


@dataclass(frozen=True)
class GroupResult:
    name: str
    max_rel_error: float
    n_coords: int
    grad_norm: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


@dataclass(frozen=True)
class GradcheckReport:
    groups: tuple
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    def lines(self) -> list[str]:
        out = [f"{g.name:<11} max_rel_err={g.max_rel_error:.3e} coords={g.n_coords} |grad|={g.grad_norm:.3e} {'ok' if g.passed else 'FAIL'}" for g in self.groups]
        out.append(f"gradcheck {'PASS' if self.passed else 'FAIL'} (tolerance {self.tolerance:g})")
        return out


def fixture_graph() -> HeteroGraph:
    """Three drugs and three genes on a 6-cycle, so every drug and gene has two meta-path neighbors."""
    edges = [(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 0)]
    return HeteroGraph(3, 3, edges)


def fixture_config(seed: int = 0, **overrides) -> TrainConfig:
    base = dict(dim=8, T=4, tau=2, batch_size=6, epochs=1, seed=seed, negatives_per_drug=1)
    base.update(overrides)
    return TrainConfig(**base).validate()


def _loss_fn(config: TrainConfig, graph: HeteroGraph):
    relations = build_metapaths(graph, config.tau, config.seed)
    structure = Structure(graph, relations)
    schedule = build_schedule(config.T, config.alpha_start, config.alpha_end)
    params = ModelParams.init(graph.n_a, graph.n_b, config.dim, rng_for(config.seed, "init"), config.slope)
    positives = graph.edges
    negatives = sample_real_negatives(graph, config.negatives_per_drug, config.seed)
    neg = negatives[pair_negatives(positives, negatives)]
    # the hard negatives are constants of the loss, so sample them once at
    # the unperturbed parameters and hold them fixed
    frozen = batch_loss(params, structure, config, schedule, positives, neg, (0, 0)).hard_negatives

    def f():
        return batch_loss(params, structure, config, schedule, positives, neg, (0, 0), frozen).total

    return params, f


def run_gradcheck(
    config: TrainConfig | None = None,
    graph: HeteroGraph | None = None,
    eps: float = FD_EPS,
    mutate: Callable[[str, np.ndarray], np.ndarray] | None = None,
) -> GradcheckReport:
    """Compare tape gradients of the full training loss with central differences.

    ``mutate(group, grad)`` may rewrite an analytic gradient before the
    comparison; it exists so tests can confirm a broken gradient is caught.
    """
    config = config or fixture_config()
    graph = graph or fixture_graph()
    params, f = _loss_fn(config, graph)
    groups = params.groups()
    flat = [t for ts in groups.values() for t in ts]
    with Tape() as tape:
        loss = f()
    grads = tape.backward(loss, flat)

    results = []
    for name, tensors in groups.items():
        worst = 0.0
        norm2 = 0.0
        count = 0
        for t in tensors:
            g = grads[t].copy()
            if mutate is not None:
                g = mutate(name, g)
            norm2 += float(np.sum(g * g))
            vals = t.values.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(vals.size):
                orig = vals[i]
                vals[i] = orig + eps
                up = f().item()
                vals[i] = orig - eps
                down = f().item()
                vals[i] = orig
                num = (up - down) / (2.0 * eps)
                err = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), ERROR_FLOOR)
                worst = max(worst, float(err))
            count += vals.size
        results.append(GroupResult(name, worst, count, float(np.sqrt(norm2))))
    return GradcheckReport(tuple(results))


def flip_sign(group: str) -> Callable[[str, np.ndarray], np.ndarray]:
    """Mutation that negates every analytic gradient of ``group``."""

    def mutate(name, g):
        return -g if name == group else g

    return mutate
