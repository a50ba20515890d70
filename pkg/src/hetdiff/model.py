"""Parameters, forward embedding pass and the three loss terms."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .aggregation import AttentionParams, NormalizedAdjacency, build_normalized_adjacency, heterogeneous_propagate, homogeneous_aggregate
from .autodiff import Tensor
from .diffusion import DenoiserParams, _glorot
from .errors import ConfigError
from .graph import HeteroGraph
from .metapath import FlatNeighbors, MetaPathRelations, flatten

CE_FLOOR = 1e-12
MARGIN_VARIANTS = ("paper", "corrected")


@dataclass
class MLPParams:
    """Two-layer scorer: ``relu([e_d || e_g] W1 + b1) W2 + b2``."""

    w1: Tensor  # (2d, d)
    b1: Tensor  # (d,)
    w2: Tensor  # (d, 1)
    b2: Tensor  # (1,)

    def tensors(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, name: str) -> "MLPParams":
        return cls(
            Tensor(_glorot(rng, 2 * d, d), requires_grad=True, name=f"{name}.w1"),
            Tensor(np.zeros(d), requires_grad=True, name=f"{name}.b1"),
            Tensor(_glorot(rng, d, 1), requires_grad=True, name=f"{name}.w2"),
            Tensor(np.zeros(1), requires_grad=True, name=f"{name}.b2"),
        )


@dataclass
class ModelParams:
    h_d: Tensor
    h_g: Tensor
    att_d: AttentionParams
    att_g: AttentionParams
    denoiser: DenoiserParams
    mlp1: MLPParams
    mlp2: MLPParams

    @property
    def dim(self) -> int:
        return self.h_d.shape[1]

    @classmethod
    def init(cls, n_a: int, n_b: int, d: int, rng: np.random.Generator, slope: float = 0.2) -> "ModelParams":
        bound = 1.0 / np.sqrt(d)
        return cls(
            h_d=Tensor(rng.uniform(-bound, bound, (n_a, d)), requires_grad=True, name="emb.drug"),
            h_g=Tensor(rng.uniform(-bound, bound, (n_b, d)), requires_grad=True, name="emb.gene"),
            att_d=AttentionParams(Tensor(_glorot(rng, 2 * d, 1), requires_grad=True, name="att.drug"), slope),
            att_g=AttentionParams(Tensor(_glorot(rng, 2 * d, 1), requires_grad=True, name="att.gene"), slope),
            denoiser=DenoiserParams.init(d, rng),
            mlp1=MLPParams.init(d, rng, "mlp1"),
            mlp2=MLPParams.init(d, rng, "mlp2"),
        )

    def groups(self) -> dict[str, list[Tensor]]:
        return {
            "embeddings": [self.h_d, self.h_g],
            "attention": [self.att_d.a_vec, self.att_g.a_vec],
            "denoiser": self.denoiser.tensors(),
            "mlp1": self.mlp1.tensors(),
            "mlp2": self.mlp2.tensors(),
        }

    def named_tensors(self) -> dict[str, Tensor]:
        return {t.name: t for ts in self.groups().values() for t in ts}

    def tensors(self) -> list[Tensor]:
        return list(self.named_tensors().values())


@dataclass(frozen=True, eq=False)
class Structure:
    """Graph-derived constants reused by every forward pass."""

    graph: HeteroGraph
    relations: MetaPathRelations
    flat_d: FlatNeighbors = field(init=False)
    flat_g: FlatNeighbors = field(init=False)
    adjacency: NormalizedAdjacency = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "flat_d", flatten(self.relations.neighbors_a))
        object.__setattr__(self, "flat_g", flatten(self.relations.neighbors_b))
        object.__setattr__(self, "adjacency", build_normalized_adjacency(self.graph))


def embed(
    params: ModelParams,
    structure: Structure,
    use_homogeneous: bool = True,
    use_heterogeneous: bool = True,
    dropout_rate: float = 0.1,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Final drug and gene embeddings after the enabled aggregation stages."""
    h_d, h_g = params.h_d, params.h_g
    if use_homogeneous:
        h_d = homogeneous_aggregate(h_d, structure.flat_d, params.att_d)
        h_g = homogeneous_aggregate(h_g, structure.flat_g, params.att_g)
    if use_heterogeneous:
        return heterogeneous_propagate(structure.adjacency, h_d, h_g, dropout_rate, training, rng)
    return h_d, h_g


def score_pair(mlp: MLPParams, e_d, e_g) -> Tensor:
    """Scorer output, one row per pair: ``(B, 1)``."""
    e_d = e_d if isinstance(e_d, Tensor) else Tensor(np.atleast_2d(e_d))
    e_g = e_g if isinstance(e_g, Tensor) else Tensor(np.atleast_2d(e_g))
    if e_d.shape != e_g.shape or mlp.w1.shape[0] != 2 * e_d.shape[1]:
        raise ad.DimensionError(f"scorer cannot take inputs {e_d.shape} and {e_g.shape}")
    hidden = ad.relu(ad.add_bias(ad.matmul(ad.concat([e_d, e_g], axis=1), mlp.w1), mlp.b1))
    return ad.add_bias(ad.matmul(hidden, mlp.w2), mlp.b2)


def ce_loss(mlp1: MLPParams, pos_d: Tensor, pos_g: Tensor, neg_d: Tensor, neg_g: Tensor) -> Tensor:
    """``mean(-log sigma(s_pos)) + mean(-log(1 - sigma(s_neg)))`` with logs floored at 1e-12.

    For aligned batches this is the per-pair mean of the two-term cross entropy.
    """
    if pos_d.shape[0] == 0 or neg_d.shape[0] == 0:
        raise ad.ContractError("cross-entropy loss needs non-empty batches")
    pos = ad.log(ad.sigmoid(score_pair(mlp1, pos_d, pos_g)), CE_FLOOR)
    neg = ad.log(1.0 - ad.sigmoid(score_pair(mlp1, neg_d, neg_g)), CE_FLOOR)
    return -ad.mean(pos) - ad.mean(neg)


def margin_loss(mlp2: MLPParams, e_d: Tensor, e_g: Tensor, e_neg: Tensor, variant: str = "paper", margin: float = 1.0) -> Tensor:
    """Hinge between positive and diffusion-negative scores.

    ``paper``: ``mean(max(0, s_pos - s_neg))``, the hinge as originally stated.
    ``corrected``: ``mean(max(0, margin + s_neg - s_pos))``.
    """
    if e_d.shape[0] == 0:
        raise ad.ContractError("margin loss needs a non-empty batch")
    s_pos = score_pair(mlp2, e_d, e_g)
    s_neg = score_pair(mlp2, e_d, e_neg)
    if variant == "paper":
        return ad.mean(ad.relu(s_pos - s_neg))
    if variant == "corrected":
        return ad.mean(ad.relu(ad.add_scalar(s_neg - s_pos, float(margin))))
    raise ConfigError(f"unknown margin variant {variant!r}; expected one of {MARGIN_VARIANTS}")
