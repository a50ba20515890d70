"""Training loop, optimizer and inference scoring."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .diffusion import COMBINE_MODES, REVERSE_MEANS, NoiseSchedule, build_schedule, combine_weights, diffusion_loss, generate_negatives, sample_indices
from .errors import ConfigError
from .graph import HeteroGraph
from .metapath import build_metapaths
from .model import MARGIN_VARIANTS, ModelParams, Structure, ce_loss, embed, margin_loss, score_pair
from .seeding import rng_for

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 400
    dim: int = 128
    learning_rate: float = 0.001
    tau: int = 30
    T: int = 100
    alpha_start: float = 0.9999
    alpha_end: float = 0.98
    weights: tuple = (0.9, 0.8, 0.7, 0.6)
    epochs: int = 100
    seed: int = 0
    dropout_rate: float = 0.1
    use_diffusion: bool = True
    use_homogeneous: bool = True
    use_heterogeneous: bool = True
    neg_combine: str = "weighted"
    normalize_weights: bool = False
    margin_variant: str = "paper"
    margin: float = 1.0
    reverse_mean: str = "paper"
    slope: float = 0.2
    negatives_per_drug: int = 2
    max_bridge_members: int | None = None

    def __post_init__(self):
        self.weights = tuple(float(w) for w in self.weights)

    def validate(self) -> "TrainConfig":
        for name in ("batch_size", "dim", "tau", "T", "epochs", "negatives_per_drug"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.dim % 2:
            raise ConfigError("embedding dimension must be even (time embedding pairs sin/cos)")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout rate must lie in [0, 1)")
        if self.neg_combine not in COMBINE_MODES:
            raise ConfigError(f"neg_combine must be one of {COMBINE_MODES}")
        if self.margin_variant not in MARGIN_VARIANTS:
            raise ConfigError(f"margin_variant must be one of {MARGIN_VARIANTS}")
        if self.reverse_mean not in REVERSE_MEANS:
            raise ConfigError(f"reverse_mean must be one of {REVERSE_MEANS}")
        if self.margin < 0:
            raise ConfigError("margin must be non-negative")
        if not 0.0 < self.slope < 1.0:
            raise ConfigError("leaky-relu slope must lie in (0, 1)")
        combine_weights(self.weights, "weighted")
        build_schedule(self.T, self.alpha_start, self.alpha_end)
        sample_indices(self.T)
        return self

    def to_dict(self) -> dict:
        out = asdict(self)
        out["weights"] = list(self.weights)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class LossReport:
    l_diffusion: float
    l_ce: float
    l_margin: float
    l_total: float

    @classmethod
    def of(cls, l_diffusion: float, l_ce: float, l_margin: float) -> "LossReport":
        l_diffusion, l_ce, l_margin = float(l_diffusion), float(l_ce), float(l_margin)
        return cls(l_diffusion, l_ce, l_margin, l_diffusion + l_ce + l_margin)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)  # param name/id -> first moment
    v: dict = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], grads, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``."""
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for p in params:
        g = grads[p]
        if g.shape != p.shape:
            raise ad.DimensionError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        key = id(p)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.values)
            state.v[key] = np.zeros_like(p.values)
        v = state.v[key]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.values -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------------------
# Negatives
# ---------------------------------------------------------------------------


def sample_real_negatives(graph: HeteroGraph, per_drug: int = 2, seed: int = 0) -> np.ndarray:
    """``per_drug`` unlinked genes per drug, drawn without replacement.

    Drugs linked to every gene are skipped; drugs with fewer unlinked genes
    than ``per_drug`` contribute what they have.
    """
    out = []
    linked = graph.b_members_by_a()
    for drug in range(graph.n_a):
        free = np.setdiff1d(np.arange(graph.n_b), linked[drug], assume_unique=True)
        if free.size == 0:
            continue
        k = min(per_drug, free.size)
        pick = rng_for(seed, "real-negatives", drug).choice(free, size=k, replace=False)
        out.extend((drug, int(g)) for g in np.sort(pick))
    return np.asarray(out, dtype=np.int64).reshape(-1, 2)


def pair_negatives(positives: np.ndarray, negatives: np.ndarray) -> np.ndarray:
    """For each positive, the index of a negative of the same drug (round robin).

    Positives whose drug has no negative fall back to the global negative pool.
    """
    if len(negatives) == 0:
        raise ConfigError("no real negatives available for the cross-entropy term")
    by_drug: dict[int, list[int]] = {}
    for i, d in enumerate(negatives[:, 0]):
        by_drug.setdefault(int(d), []).append(i)
    seen: dict[int, int] = {}
    out = np.empty(len(positives), dtype=np.int64)
    for i, d in enumerate(positives[:, 0]):
        d = int(d)
        k = seen.get(d, 0)
        seen[d] = k + 1
        pool = by_drug.get(d)
        out[i] = pool[k % len(pool)] if pool else i % len(negatives)
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class BatchTerms:
    total: Tensor
    l_diffusion: Tensor
    l_ce: Tensor
    l_margin: Tensor
    hard_negatives: np.ndarray | None = None

    def report(self) -> LossReport:
        return LossReport(self.l_diffusion.item(), self.l_ce.item(), self.l_margin.item(), self.total.item())


def batch_loss(
    params: ModelParams,
    structure: Structure,
    config: TrainConfig,
    schedule: NoiseSchedule,
    positives: np.ndarray,
    negatives: np.ndarray,
    seed_labels: tuple = (),
    hard_negatives: np.ndarray | None = None,
) -> BatchTerms:
    """Forward pass and ``L_total = L_diffusion + L_CE + L_margin`` for one batch.

    ``negatives`` is aligned row-for-row with ``positives``.  Diffusion hard
    negatives enter the margin term as constants; pass ``hard_negatives`` to
    reuse a previously generated set instead of sampling.  Call inside a
    :class:`Tape` to obtain gradients.
    """
    seed = config.seed
    e_d_all, e_g_all = embed(
        params,
        structure,
        config.use_homogeneous,
        config.use_heterogeneous,
        config.dropout_rate,
        training=True,
        rng=rng_for(seed, "dropout", *seed_labels),
    )
    e_d = ad.take_rows(e_d_all, positives[:, 0])
    e_g = ad.take_rows(e_g_all, positives[:, 1])
    l_ce = ce_loss(params.mlp1, e_d, e_g, ad.take_rows(e_d_all, negatives[:, 0]), ad.take_rows(e_g_all, negatives[:, 1]))
    if config.use_diffusion:
        l_diff = diffusion_loss(params.denoiser, e_g, e_d, schedule, rng_for(seed, "diffusion-loss", *seed_labels))
        if hard_negatives is None:
            hard_negatives = generate_negatives(
                params.denoiser,
                e_d.values,
                schedule,
                config.weights,
                rng_for(seed, "diffusion-sample", *seed_labels),
                mode=config.neg_combine,
                normalize=config.normalize_weights,
                mean=config.reverse_mean,
            ).combined
        l_margin = margin_loss(params.mlp2, e_d, e_g, Tensor(hard_negatives), config.margin_variant, config.margin)
    else:
        l_diff = Tensor(0.0)
        l_margin = Tensor(0.0)
    total = l_diff + l_ce + l_margin
    return BatchTerms(total, l_diff, l_ce, l_margin, hard_negatives)


@dataclass
class TrainedModel:
    """Parameters plus the evaluation-mode embeddings used for scoring."""

    params: ModelParams
    config: TrainConfig
    final_d: np.ndarray
    final_g: np.ndarray
    a_ids: tuple
    b_ids: tuple
    drug_degree: np.ndarray
    trained: bool = True
    _neg_cache: dict = field(default_factory=dict, repr=False)

    @property
    def schedule(self) -> NoiseSchedule:
        c = self.config
        return build_schedule(c.T, c.alpha_start, c.alpha_end)

    def diffusion_negatives(self, seed: int) -> np.ndarray:
        """One blended negative per drug; row ``i`` depends only on ``seed`` and drug ``i``'s embedding."""
        if seed not in self._neg_cache:
            c = self.config
            bundle = generate_negatives(
                self.params.denoiser,
                self.final_d,
                self.schedule,
                c.weights,
                rng_for(seed, "predict-negatives"),
                mode=c.neg_combine,
                normalize=c.normalize_weights,
                mean=c.reverse_mean,
            )
            self._neg_cache[seed] = bundle.combined
        return self._neg_cache[seed]

    def score_pairs(self, pairs, seed: int = 0) -> np.ndarray:
        """``MLP2(d, g) - MLP2(d, neg_d) + MLP1(d, g)``; just ``MLP1`` without diffusion."""
        if not self.trained:
            raise ad.ContractError("model has not been trained")
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if pairs.size and (pairs[:, 0].max() >= len(self.final_d) or pairs[:, 1].max() >= len(self.final_g) or pairs.min() < 0):
            raise ad.ContractError("pair index out of range")
        e_d = self.final_d[pairs[:, 0]]
        e_g = self.final_g[pairs[:, 1]]
        s = score_pair(self.params.mlp1, e_d, e_g).values.reshape(-1)
        if self.config.use_diffusion:
            neg = self.diffusion_negatives(seed)[pairs[:, 0]]
            s2 = self.params.mlp2
            s = score_pair(s2, e_d, e_g).values.reshape(-1) - score_pair(s2, e_d, neg).values.reshape(-1) + s
        return s


def predict_score(model: TrainedModel, drug_index: int, gene_index: int, seed: int = 0) -> float:
    return float(model.score_pairs([(drug_index, gene_index)], seed)[0])


@dataclass
class TrainResult:
    model: TrainedModel
    history: list  # one LossReport per epoch
    structure: Structure


def finalize(params: ModelParams, structure: Structure, config: TrainConfig) -> TrainedModel:
    e_d, e_g = embed(params, structure, config.use_homogeneous, config.use_heterogeneous, config.dropout_rate, training=False)
    g = structure.graph
    return TrainedModel(params, config, e_d.values.copy(), e_g.values.copy(), g.a_ids, g.b_ids, g.degree_a().astype(np.float64))


def train(
    config: TrainConfig,
    graph: HeteroGraph,
    negatives: np.ndarray | None = None,
    bridges: tuple | None = None,
    callback=None,
) -> TrainResult:
    """Fit a model on the edges of ``graph``.

    ``negatives`` are the fixed real negative pairs (sampled from ``graph`` if
    omitted).  ``bridges`` optionally replaces the default meta-path bridges
    with ``(bridges_a, bridges_b)`` member lists.  ``callback(epoch, report,
    model_fn)`` is invoked after each epoch.
    """
    config.validate()
    if graph.n_edges == 0:
        raise ConfigError("cannot train on a graph without edges")
    if negatives is None:
        negatives = sample_real_negatives(graph, config.negatives_per_drug, config.seed)
    negatives = np.asarray(negatives, dtype=np.int64).reshape(-1, 2)
    seed = config.seed
    bridges_a, bridges_b = bridges if bridges is not None else (None, None)
    relations = build_metapaths(graph, config.tau, seed, bridges_a, bridges_b, config.max_bridge_members)
    structure = Structure(graph, relations)
    schedule = build_schedule(config.T, config.alpha_start, config.alpha_end)
    params = ModelParams.init(graph.n_a, graph.n_b, config.dim, rng_for(seed, "init"), config.slope)
    tensors = params.tensors()
    state = AdamState()

    positives = graph.edges
    neg_of = pair_negatives(positives, negatives)
    history = []
    for epoch in range(config.epochs):
        order = rng_for(seed, "shuffle", epoch).permutation(len(positives))
        sums = np.zeros(3)
        n_batches = 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start : start + config.batch_size]
            with Tape() as tape:
                terms = batch_loss(params, structure, config, schedule, positives[idx], negatives[neg_of[idx]], (epoch, b))
            grads = tape.backward(terms.total, tensors)
            adam_step(tensors, grads, state, config.learning_rate)
            sums += (terms.l_diffusion.item(), terms.l_ce.item(), terms.l_margin.item())
            n_batches += 1
        report = LossReport.of(*(sums / n_batches))
        history.append(report)
        log.debug("epoch %d: %s", epoch, report)
        if callback is not None:
            callback(epoch, report, lambda: finalize(params, structure, config))
    return TrainResult(finalize(params, structure, config), history, structure)
