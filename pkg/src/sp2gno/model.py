"""Spatio-spectral graph neural operator.

Uplift ``P`` -> ``L`` blocks -> two-layer downlift ``Q``. Each block runs a
gated spatial aggregation over the kNN edges and a truncated spectral
convolution in parallel, then mixes both with an affine combiner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .embedding import LipschitzEmbedding
from .graph import Graph
from .spectral import SpectralBasis, gft, igft
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    d_a: int
    d_u: int
    dim: int
    width: int = 32
    n_blocks: int = 6
    m: int = 32
    n_anchors: int = 22
    edge_width: int = 8
    gate_width: int = 64
    q_width: int | None = None

    @property
    def d_init(self) -> int:
        return self.d_a + self.dim

    @property
    def hidden_q(self) -> int:
        return 4 * self.width if self.q_width is None else self.q_width


@dataclass
class BlockParameters:
    kernel: Tensor        # (m, d, d)
    residual_w: Tensor    # (d, d)
    residual_b: Tensor    # (d,)
    spatial_w: Tensor     # (d, d)
    gate_w1: Tensor       # (2n + e, g)
    gate_b1: Tensor       # (g,)
    gate_w2: Tensor       # (1, e)
    gate_b2: Tensor       # (e,)
    gate_w3: Tensor       # (g, 1)
    gate_b3: Tensor       # (1,)
    combine_w: Tensor     # (2d, d), rows [spatial; spectral]
    combine_b: Tensor     # (d,)


@dataclass
class ModelParameters:
    config: ModelConfig
    uplift_w: Tensor
    uplift_b: Tensor
    blocks: list[BlockParameters]
    down_w1: Tensor
    down_b1: Tensor
    down_w2: Tensor
    down_b2: Tensor

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("uplift.weight", self.uplift_w), ("uplift.bias", self.uplift_b)]
        for j, blk in enumerate(self.blocks):
            out += [(f"blocks.{j}.{f.name}", getattr(blk, f.name)) for f in fields(blk)]
        out += [("downlift.0.weight", self.down_w1), ("downlift.0.bias", self.down_b1),
                ("downlift.1.weight", self.down_w2), ("downlift.1.bias", self.down_b2)]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for name, p in self.named_parameters():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.copy()


def _param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def init_parameters(config: ModelConfig, seed: int = 0) -> ModelParameters:
    """Uniform in +-sqrt(1/fan_in) for weights, zeros for biases."""
    rng = np.random.default_rng(seed)
    d, m, n, e, g = (config.width, config.m, config.n_anchors, config.edge_width,
                     config.gate_width)

    def weight(*shape, fan_in=None):
        fan = shape[0] if fan_in is None else fan_in
        bound = math.sqrt(1.0 / fan)
        return _param(rng.uniform(-bound, bound, size=shape))

    def zeros(*shape):
        return _param(np.zeros(shape))

    uplift_w, uplift_b = weight(config.d_init, d), zeros(d)
    blocks = []
    for _ in range(config.n_blocks):
        blocks.append(BlockParameters(
            kernel=weight(m, d, d, fan_in=d),
            residual_w=weight(d, d), residual_b=zeros(d),
            spatial_w=weight(d, d),
            gate_w1=weight(2 * n + e, g), gate_b1=zeros(g),
            gate_w2=weight(1, e), gate_b2=zeros(e),
            gate_w3=weight(g, 1), gate_b3=zeros(1),
            combine_w=weight(2 * d, d), combine_b=zeros(d),
        ))
    h = config.hidden_q
    return ModelParameters(config, uplift_w, uplift_b, blocks,
                           weight(d, h), zeros(h), weight(h, config.d_u), zeros(config.d_u))


# ------------------------------------------------------------------ bundle

@dataclass(frozen=True, eq=False)
class Bundle:
    """Everything precomputed for one geometry: graph, spectral basis, embedding."""

    graph: Graph
    basis: SpectralBasis
    embedding: LipschitzEmbedding
    _canonical: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.graph.n_nodes

    def permuted(self, perm) -> "Bundle":
        """Relabel nodes (new ``i`` = old ``perm[i]``) without recomputing anything."""
        return Bundle(self.graph.permuted(perm), self.basis.permuted(perm),
                      self.embedding.permuted(perm))

    def canonical(self) -> tuple[np.ndarray, "Bundle"]:
        """Node order sorted by coordinates, and the bundle relabelled to it.

        Running the network in this order makes the output exactly
        equivariant to how the caller numbered the nodes: floating-point
        reductions over nodes always see the same summation order.
        """
        if "order" not in self._canonical:
            keys = [*self.basis.eigenvectors.T[::-1], *self.embedding.distances.T[::-1],
                    *self.graph.coordinates.T[::-1]]
            order = np.lexsort(keys)
            self._canonical["order"] = order
            self._canonical["bundle"] = self.permuted(order)
        return self._canonical["order"], self._canonical["bundle"]


# ------------------------------------------------------------------ layers

def uplift(params: ModelParameters, x) -> Tensor:
    x = T.as_tensor(x)
    if x.shape[-1] != params.uplift_w.shape[0]:
        raise ValueError(f"input width {x.shape[-1]} != {params.uplift_w.shape[0]}")
    return T.linear(x, params.uplift_w, params.uplift_b)


def compute_gates(block: BlockParameters, embedding: LipschitzEmbedding, graph: Graph) -> Tensor:
    """Per-edge gate in (0, 1) for every stored entry (u, v) of the adjacency.

    The first layer acts on ``[h_v | h_u | W2 w_uv]``; it is evaluated as
    node-level projections gathered onto the edges, which is the same
    affine map without materializing the concatenation per edge.
    """
    n = embedding.dim
    e = block.gate_w2.shape[1]
    if block.gate_w1.shape[0] != 2 * n + e:
        raise ValueError(f"embedding width {n} does not match gate input "
                         f"{block.gate_w1.shape[0]} (= 2n + {e})")
    h = Tensor(embedding.normalized())
    w1_v = block.gate_w1[:n]
    w1_u = block.gate_w1[n:2 * n]
    w1_e = block.gate_w1[2 * n:]
    # W1 [h_v | h_u | w_uv W2 + b2] + b1, with the per-node and per-edge
    # pieces evaluated separately before gathering onto edges
    from_v = T.linear(h, w1_v)
    from_u = T.linear(h, w1_u, T.linear(block.gate_b2[None, :], w1_e, block.gate_b1[None, :]))
    dist_dir = T.linear(block.gate_w2, w1_e)
    pre = (T.take_rows(from_v, graph.cols) + T.take_rows(from_u, graph.rows)
           + Tensor(graph.edge_distances[:, None]) * dist_dir)
    logits = T.linear(T.relu(pre), block.gate_w3, block.gate_b3)
    return T.sigmoid(T.reshape(logits, (graph.adjacency.nnz,)))


def spatial_branch(block: BlockParameters, graph: Graph, gamma, v) -> Tensor:
    """``out_u = sum_{v in N(u)} gamma_uv * (v_v W)``."""
    return T.spmm(graph.adjacency, T.linear(v, block.spatial_w), values=gamma)


def spectral_branch(block: BlockParameters, basis: SpectralBasis, v, activate=True,
                    residual=True) -> Tensor:
    v = T.as_tensor(v)
    if block.kernel.shape[0] != basis.m:
        raise ValueError(f"kernel has {block.kernel.shape[0]} modes, basis has {basis.m}")
    out = igft(basis, T.mode1_product(block.kernel, gft(basis, v)))
    if residual:
        out = out + T.linear(v, block.residual_w, block.residual_b)
    return T.gelu(out) if activate else out


def block_forward(block: BlockParameters, graph: Graph, basis: SpectralBasis,
                  embedding: LipschitzEmbedding, v, gamma=None) -> Tensor:
    if gamma is None:
        gamma = compute_gates(block, embedding, graph)
    spatial = spatial_branch(block, graph, gamma, v)
    spectral = spectral_branch(block, basis, v)
    return T.linear(T.concat([spatial, spectral], axis=-1), block.combine_w, block.combine_b)


def downlift(params: ModelParameters, v) -> Tensor:
    hidden = T.gelu(T.linear(v, params.down_w1, params.down_b1))
    return T.linear(hidden, params.down_w2, params.down_b2)


def forward(params: ModelParameters, bundle: Bundle, x) -> Tensor:
    """Full operator on node inputs ``[a | coords]``.

    ``x`` is [N, d_init] or a batch [B, N, d_init] sharing one geometry; the
    output has the same layout with ``d_u`` channels.
    """
    x = T.as_tensor(x)
    batched = x.ndim == 3
    n_axis = 1 if batched else 0
    if x.shape[n_axis] != bundle.n_nodes:
        raise ValueError(f"input has {x.shape[n_axis]} nodes, bundle has {bundle.n_nodes}")
    if bundle.embedding.dim != params.config.n_anchors:
        raise ValueError(f"bundle embedding width {bundle.embedding.dim} != model "
                         f"{params.config.n_anchors}")
    order, canon = bundle.canonical()
    inverse = np.empty_like(order)
    inverse[order] = np.arange(len(order))
    if batched:
        x = T.transpose(x, (1, 0, 2))  # node-major [N, B, d] inside the network
    v = uplift(params, T.take_rows(x, order))
    for block in params.blocks:
        v = block_forward(block, canon.graph, canon.basis, canon.embedding, v)
    out = T.take_rows(downlift(params, v), inverse)
    return T.transpose(out, (1, 0, 2)) if batched else out
