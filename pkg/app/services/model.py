"""
MISApp Network

Per-hop LightGCN propagation over the session graphs, attention pooling with
the last app as query, immediate intent from the last K apps, hop-level intent
attention, cross-modal gated fusion of temporal/spatial context, a
length-1 Transformer encoder/decoder and dot-product scoring against the app
embeddings. All operations run on ``app.services.autodiff`` tensors and are
batched over ``GraphBatch`` rows.

Weights are stored as (out, in) matrices and applied as ``x @ W.T``. CMGF
projection matrices stack the B head blocks row-wise: rows
``b*d/B:(b+1)*d/B`` belong to head b.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import ConfigurationError, DataError
from app.schemas.config import ModelConfig
from app.schemas.events import PredictionInstance
from app.services import autodiff as ad
from app.services.autodiff import Tensor
from app.services.session_graphs import GraphBatch, MultiHopGraphs, encode_batch

logger = logging.getLogger(__name__)

MASK_BIAS = -1e9
# Rows pinned at zero: PAD app and the "no station" category.
FROZEN_ROWS = {"app_embedding": 0, "station_embedding": 0}

Params = Dict[str, np.ndarray]
TensorParams = Dict[str, Tensor]


def _fusion_names(prefix: str, mode: str) -> Dict[str, str]:
    if mode == "cmgf":
        return {n: f"{prefix}.{n}" for n in ("w_q1", "w_k1", "w_v1", "w_q2", "w_k2", "w_v2")}
    if mode == "gated":
        return {"w_g": f"{prefix}.w_g", "b_g": f"{prefix}.b_g"}
    return {}


def fusion_sites(config: ModelConfig) -> List[str]:
    sites = []
    if config.use_temporal and config.spatial_enabled:
        sites.append("fusion.context")
    if config.use_temporal or config.spatial_enabled:
        sites.append("fusion.outer")
    return sites


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Every named parameter group with its shape, in a stable order."""
    if config.num_apps < 1:
        raise ConfigurationError("model.num_apps", "must be set from the vocabulary (>= 1)")
    d, hidden = config.dim, config.ffn_ratio * config.dim
    shapes: Dict[str, Tuple[int, ...]] = {
        "app_embedding": (config.num_apps + 1, d),
        "hour_embedding": (config.num_hours, d),
    }
    if config.spatial_enabled:
        shapes["station_embedding"] = (config.num_categories + 1, d)
    for name in ("w_q", "w_k", "w_v"):
        shapes[f"pool.{name}"] = (d, d)
    shapes["intent.w"] = (d, config.intent_window * d)
    for site in fusion_sites(config):
        for short, full in _fusion_names(site, config.fusion_mode).items():
            shapes[full] = (d,) if short == "b_g" else ((d, 2 * d) if short == "w_g" else (d, d))

    def attention(prefix: str) -> None:
        for name in ("w_q", "w_k", "w_v", "w_o"):
            shapes[f"{prefix}.{name}"] = (d, d)

    def norm(prefix: str) -> None:
        shapes[f"{prefix}.gamma"] = (d,)
        shapes[f"{prefix}.beta"] = (d,)

    def ffn(prefix: str) -> None:
        shapes[f"{prefix}.w1"] = (hidden, d)
        shapes[f"{prefix}.b1"] = (hidden,)
        shapes[f"{prefix}.w2"] = (d, hidden)
        shapes[f"{prefix}.b2"] = (d,)

    for layer in range(config.layers):
        p = f"encoder.{layer}"
        attention(f"{p}.attn")
        norm(f"{p}.ln1")
        ffn(f"{p}.ffn")
        norm(f"{p}.ln2")
    if config.use_decoder:
        for layer in range(config.layers):
            p = f"decoder.{layer}"
            attention(f"{p}.self_attn")
            norm(f"{p}.ln1")
            attention(f"{p}.cross_attn")
            norm(f"{p}.ln2")
            ffn(f"{p}.ffn")
            norm(f"{p}.ln3")
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator) -> Params:
    """
    Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for matrices and embeddings,
    ones for layer-norm gains, zeros for biases and frozen rows.
    """
    params: Params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape)
        elif name.endswith((".beta", ".b1", ".b2", ".b_g")):
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[-1])
            params[name] = rng.uniform(-bound, bound, size=shape)
    for name, row in FROZEN_ROWS.items():
        if name in params:
            params[name][row] = 0.0
    return params


def count_parameters(params: Params) -> int:
    return int(sum(p.size for p in params.values()))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = ad.matmul(x, ad.transpose(weight))
    return out if bias is None else ad.add(out, bias)


def lightgcn_propagate(adjacency: np.ndarray, embeddings: Tensor, layers: int) -> Tensor:
    """
    n^(l+1) = A_hat n^(l) with A_hat the symmetrically normalized adjacency
    (constant); the result is the mean over layers 0..L_g.

    Args:
        adjacency: [B, T, T] normalized adjacency of one hop
        embeddings: [B, T, d] layer-0 node embeddings
        layers: L_g
    """
    current, total = embeddings, embeddings
    for _ in range(layers):
        current = ad.matmul(adjacency, current)
        total = ad.add(total, current)
    return ad.scale(total, 1.0 / (layers + 1))


def attention_pool(
    nodes: Tensor,
    last_selector: np.ndarray,
    node_mask: np.ndarray,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
) -> Tuple[Tensor, Tensor]:
    """
    Scaled dot-product pooling with the last app's representation as query.

    Returns:
        (g [B, d], alpha [B, 1, T]); empty slots receive zero weight
    """
    batch, slots, dim = nodes.shape
    query = linear(ad.matmul(last_selector, nodes), w_q)
    keys = linear(nodes, w_k)
    values = linear(nodes, w_v)
    logits = ad.scale(ad.matmul(query, ad.transpose(keys)), 1.0 / math.sqrt(dim))
    bias = np.where(node_mask, 0.0, MASK_BIAS)[:, None, :]
    alpha = ad.softmax(ad.add(logits, bias), axis=-1)
    pooled = ad.matmul(alpha, values)
    return ad.reshape(pooled, (batch, dim)), alpha


def immediate_intent(one_hop_nodes: Tensor, intent_selector: np.ndarray, w_intent: Tensor) -> Tensor:
    """s = W [n1(a_{T-K+1}) || ... || n1(a_T)]; missing entries contribute zeros."""
    batch, _, dim = one_hop_nodes.shape
    k = intent_selector.shape[1]
    recent = ad.matmul(intent_selector, one_hop_nodes)
    return linear(ad.reshape(recent, (batch, k * dim)), w_intent)


def hop_attention(intent: Tensor, graph_embeddings: Sequence[Tensor]) -> Tuple[Tensor, Tensor]:
    """
    W_hop = softmax_gamma(s . g^(gamma)); g = sum_gamma W_hop g^(gamma).

    Returns:
        (weights [B, H], g [B, d])
    """
    batch, dim = intent.shape
    hops = len(graph_embeddings)
    stacked = ad.concat([ad.reshape(g, (batch, 1, dim)) for g in graph_embeddings], axis=1)
    logits = ad.reshape(ad.matmul(stacked, ad.reshape(intent, (batch, dim, 1))), (batch, hops))
    weights = ad.softmax(logits, axis=-1)
    mixed = ad.matmul(ad.reshape(weights, (batch, 1, hops)), stacked)
    return weights, ad.reshape(mixed, (batch, dim))


def embed_context(
    hours: np.ndarray,
    categories: np.ndarray,
    params: TensorParams,
    config: ModelConfig,
) -> Tuple[Optional[Tensor], Optional[Tensor]]:
    """Row lookups e_T = E_T[tau] and e_R = E_R[c(rho)] (category 0: no station)."""
    if np.any(hours < 0) or np.any(hours >= config.num_hours):
        raise DataError(f"hour index outside 0..{config.num_hours - 1}")
    e_t = ad.gather(params["hour_embedding"], hours) if config.use_temporal else None
    e_r = None
    if config.spatial_enabled:
        if np.any(categories < 0) or np.any(categories > config.num_categories):
            raise DataError(f"station category outside 1..{config.num_categories}")
        e_r = ad.gather(params["station_embedding"], categories)
    return e_t, e_r


def cmgf(x1: Tensor, x2: Tensor, params: TensorParams, prefix: str, heads: int) -> Tensor:
    """
    Cross-modal gated fusion: per head, scalar sigmoid gates from cross-modal
    query/key products modulate the other modality's values; the head outputs
    are concatenated per direction and the two directions averaged.
    """
    batch, dim = x1.shape
    dk = dim // heads

    def project(x: Tensor, name: str) -> Tensor:
        return ad.reshape(linear(x, params[f"{prefix}.{name}"]), (batch, heads, dk))

    q1, k1, v1 = project(x1, "w_q1"), project(x1, "w_k1"), project(x1, "w_v1")
    q2, k2, v2 = project(x2, "w_q2"), project(x2, "w_k2"), project(x2, "w_v2")
    gate_12 = ad.sigmoid(ad.scale(ad.dot(q1, k2), 1.0 / math.sqrt(dk)))
    gate_21 = ad.sigmoid(ad.scale(ad.dot(q2, k1), 1.0 / math.sqrt(dk)))
    a1 = ad.mul(ad.reshape(gate_12, (batch, heads, 1)), v2)
    a2 = ad.mul(ad.reshape(gate_21, (batch, heads, 1)), v1)
    return ad.scale(ad.add(ad.reshape(a1, (batch, dim)), ad.reshape(a2, (batch, dim))), 0.5)


def fuse(x1: Tensor, x2: Tensor, params: TensorParams, prefix: str, config: ModelConfig) -> Tensor:
    mode = config.fusion_mode
    if mode == "cmgf":
        return cmgf(x1, x2, params, prefix, config.fusion_heads)
    if mode == "gated":
        gate = ad.sigmoid(linear(ad.concat([x1, x2], axis=-1), params[f"{prefix}.w_g"], params[f"{prefix}.b_g"]))
        return ad.add(x2, ad.mul(gate, ad.sub(x1, x2)))
    if mode == "sum":
        return ad.add(x1, x2)
    return ad.scale(ad.add(x1, x2), 0.5)


def multi_head_attention(
    query: Tensor, memory: Tensor, params: TensorParams, prefix: str, heads: int
) -> Tuple[Tensor, Tensor]:
    """
    Standard multi-head scaled dot-product attention.

    Args:
        query: [B, nq, d]
        memory: [B, nk, d] (keys and values)

    Returns:
        (output [B, nq, d], weights [B, heads, nq, nk])
    """
    batch, nq, dim = query.shape
    nk = memory.shape[1]
    dh = dim // heads

    def split(x: Tensor, n: int, name: str) -> Tensor:
        projected = ad.reshape(linear(x, params[f"{prefix}.{name}"]), (batch, n, heads, dh))
        return ad.swapaxes(projected, 1, 2)

    q, k, v = split(query, nq, "w_q"), split(memory, nk, "w_k"), split(memory, nk, "w_v")
    weights = ad.softmax(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dh)), axis=-1)
    context = ad.reshape(ad.swapaxes(ad.matmul(weights, v), 1, 2), (batch, nq, dim))
    return linear(context, params[f"{prefix}.w_o"]), weights


def add_norm(x: Tensor, update: Tensor, params: TensorParams, prefix: str) -> Tensor:
    normed = ad.layer_norm(ad.add(x, update))
    return ad.add(ad.mul(normed, params[f"{prefix}.gamma"]), params[f"{prefix}.beta"])


def feed_forward(
    x: Tensor, params: TensorParams, prefix: str, rate: float, rng: Optional[np.random.Generator], train: bool
) -> Tensor:
    hidden = ad.gelu(linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    hidden = ad.dropout(hidden, rate, rng, train)
    return linear(hidden, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def encode(
    g: Tensor,
    e_t: Optional[Tensor],
    e_r: Optional[Tensor],
    params: TensorParams,
    config: ModelConfig,
    rng: Optional[np.random.Generator] = None,
    train: bool = False,
) -> Tuple[Tensor, Tensor]:
    """
    h = CMGF(g, CMGF(e_T, e_R)) (absent context modalities are skipped), then
    L encoder layers over the length-1 sequence [h].

    Returns:
        (h [B, d], h_enc [B, 1, d])
    """
    if e_t is not None and e_r is not None:
        h = fuse(g, fuse(e_t, e_r, params, "fusion.context", config), params, "fusion.outer", config)
    elif e_t is not None or e_r is not None:
        h = fuse(g, e_t if e_t is not None else e_r, params, "fusion.outer", config)
    else:
        h = g
    batch, dim = h.shape
    x = ad.reshape(h, (batch, 1, dim))
    for layer in range(config.layers):
        p = f"encoder.{layer}"
        attended, _ = multi_head_attention(x, x, params, f"{p}.attn", config.heads)
        x = add_norm(x, attended, params, f"{p}.ln1")
        x = add_norm(x, feed_forward(x, params, f"{p}.ffn", config.dropout, rng, train), params, f"{p}.ln2")
    return h, x


def decode(
    intent: Tensor,
    encoded: Tensor,
    params: TensorParams,
    config: ModelConfig,
    rng: Optional[np.random.Generator] = None,
    train: bool = False,
) -> Tensor:
    """
    L decoder layers: self-attention over [s], cross-attention to the encoder
    output, feed-forward; each followed by residual + layer norm.

    Returns:
        u [B, d]; the encoder output itself when the decoder is disabled
    """
    batch, dim = intent.shape
    if not config.use_decoder:
        return ad.reshape(encoded, (batch, dim))
    x = ad.reshape(intent, (batch, 1, dim))
    for layer in range(config.layers):
        p = f"decoder.{layer}"
        attended, _ = multi_head_attention(x, x, params, f"{p}.self_attn", config.heads)
        x = add_norm(x, attended, params, f"{p}.ln1")
        crossed, _ = multi_head_attention(x, encoded, params, f"{p}.cross_attn", config.heads)
        x = add_norm(x, crossed, params, f"{p}.ln2")
        x = add_norm(x, feed_forward(x, params, f"{p}.ffn", config.dropout, rng, train), params, f"{p}.ln3")
    return ad.reshape(x, (batch, dim))


def score(u: Tensor, app_embedding: Tensor) -> Tensor:
    """Logits y_i = u . e_A(a_i) over real apps; column i is app index i + 1."""
    real = ad.take(app_embedding, (slice(1, None),))
    return ad.matmul(u, ad.transpose(real))


def probabilities(logits: Tensor) -> Tensor:
    return ad.softmax(logits, axis=-1)


def loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy -log P_target over the batch."""
    targets = np.asarray(targets, dtype=np.int64)
    if np.any(targets < 1):
        raise DataError("PAD (0) is not a valid prediction target")
    if np.any(targets > logits.shape[-1]):
        raise DataError("target index outside the app vocabulary")
    picked = ad.pick(ad.log_softmax(logits, axis=-1), targets - 1)
    return ad.scale(ad.mean(picked), -1.0)


@dataclass
class ForwardTrace:
    """
    Intermediates of one instance's forward pass.

    Attributes:
        nodes: Real node apps in slot order
        node_reprs: Per hop, [n_nodes, d] LightGCN outputs
        pool_attention: Per hop, [n_nodes] pooling weights
        graph_embeddings: [H, d]
        intent: s [d]
        hop_weights: W_hop [H]
        mixed: Hop-weighted graph embedding g [d]
        fused: h [d]
        decoded: u [d]
        probabilities: [|A|]; entry i belongs to app index i + 1
    """

    nodes: List[int]
    node_reprs: List[np.ndarray]
    pool_attention: List[np.ndarray]
    graph_embeddings: np.ndarray
    intent: np.ndarray
    hop_weights: np.ndarray
    mixed: np.ndarray
    fused: np.ndarray
    decoded: np.ndarray
    probabilities: np.ndarray
    target: int = 0
    graphs: Optional[MultiHopGraphs] = None

    def prob(self, app: int) -> float:
        return float(self.probabilities[app - 1])

    @property
    def top1(self) -> int:
        return int(np.argmax(self.probabilities)) + 1

    def top_k(self, k: int = 10) -> List[Tuple[int, float]]:
        order = np.lexsort((np.arange(self.probabilities.size), -self.probabilities))[:k]
        return [(int(i) + 1, float(self.probabilities[i])) for i in order]

    def export(self, top: int = 10) -> Dict[str, object]:
        """JSON-ready document: hop weights, per-hop pooling attentions, top probabilities."""
        return {
            "nodes": self.nodes,
            "hop_weights": [float(w) for w in self.hop_weights],
            "pool_attention": [
                {str(app): float(a) for app, a in zip(self.nodes, weights)} for weights in self.pool_attention
            ],
            "top": [{"app": app, "probability": p} for app, p in self.top_k(top)],
            "target": self.target,
        }


@dataclass
class BatchTrace:
    """Batched intermediates; ``instance(i)`` slices one ForwardTrace."""

    node_ids: np.ndarray
    node_mask: np.ndarray
    node_reprs: List[np.ndarray] = field(default_factory=list)
    pool_attention: List[np.ndarray] = field(default_factory=list)
    graph_embeddings: Optional[np.ndarray] = None
    intent: Optional[np.ndarray] = None
    hop_weights: Optional[np.ndarray] = None
    mixed: Optional[np.ndarray] = None
    fused: Optional[np.ndarray] = None
    decoded: Optional[np.ndarray] = None
    probabilities: Optional[np.ndarray] = None
    targets: Optional[np.ndarray] = None
    graphs: List[MultiHopGraphs] = field(default_factory=list)

    def instance(self, i: int) -> ForwardTrace:
        mask = self.node_mask[i]
        return ForwardTrace(
            nodes=[int(a) for a in self.node_ids[i][mask]],
            node_reprs=[n[i][mask] for n in self.node_reprs],
            pool_attention=[a[i][mask] for a in self.pool_attention],
            graph_embeddings=self.graph_embeddings[i],
            intent=self.intent[i],
            hop_weights=self.hop_weights[i],
            mixed=self.mixed[i],
            fused=self.fused[i],
            decoded=self.decoded[i],
            probabilities=self.probabilities[i],
            target=int(self.targets[i]),
            graphs=self.graphs[i] if self.graphs else None,
        )

    def __len__(self) -> int:
        return int(self.node_ids.shape[0])


def forward_batch(
    batch: GraphBatch,
    params: TensorParams,
    config: ModelConfig,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[Tensor, BatchTrace]:
    """
    Full forward: propagate and pool every hop, immediate intent, hop
    attention, context fusion, encoder, decoder, scoring.

    Returns:
        (logits [B, |A|], trace)
    """
    trace = BatchTrace(node_ids=batch.node_ids, node_mask=batch.node_mask, targets=batch.targets, graphs=batch.graphs)
    embeddings = ad.dropout(ad.gather(params["app_embedding"], batch.node_ids), config.dropout, rng, train)

    graph_embeddings: List[Tensor] = []
    one_hop: Optional[Tensor] = None
    for hop in range(config.hops):
        nodes = lightgcn_propagate(batch.adjacency[:, hop], embeddings, config.gcn_layers)
        if hop == 0:
            one_hop = nodes
        pooled, alpha = attention_pool(
            nodes, batch.last_selector, batch.node_mask, params["pool.w_q"], params["pool.w_k"], params["pool.w_v"]
        )
        graph_embeddings.append(pooled)
        trace.node_reprs.append(nodes.value)
        trace.pool_attention.append(alpha.value[:, 0, :])

    intent = immediate_intent(one_hop, batch.intent_selector, params["intent.w"])
    hop_weights, mixed = hop_attention(intent, graph_embeddings)

    e_t, e_r = embed_context(batch.hours, batch.categories, params, config)
    if e_t is not None:
        e_t = ad.dropout(e_t, config.dropout, rng, train)
    if e_r is not None:
        e_r = ad.dropout(e_r, config.dropout, rng, train)
    fused, encoded = encode(mixed, e_t, e_r, params, config, rng, train)
    decoded = decode(intent, encoded, params, config, rng, train)
    logits = score(decoded, params["app_embedding"])

    trace.graph_embeddings = np.stack([g.value for g in graph_embeddings], axis=1)
    trace.intent = intent.value
    trace.hop_weights = hop_weights.value
    trace.mixed = mixed.value
    trace.fused = fused.value
    trace.decoded = decoded.value
    trace.probabilities = probabilities(Tensor(logits.value)).value
    return logits, trace


def constants(params: Params) -> TensorParams:
    return {name: Tensor(value) for name, value in params.items()}


class MISAppModel:
    """
    Inference wrapper around an immutable parameter snapshot.

    Attributes:
        config: Model hyperparameters
        params: Named float64 parameter arrays
    """

    def __init__(self, config: ModelConfig, params: Params):
        expected = parameter_shapes(config)
        for name, shape in expected.items():
            if name not in params:
                raise ConfigurationError("checkpoint", f"missing parameter {name}")
            if params[name].shape != shape:
                raise ConfigurationError("checkpoint", f"{name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = {name: params[name] for name in expected}

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "MISAppModel":
        return cls(config, init_params(config, rng))

    def encode(self, instances: Sequence[PredictionInstance]) -> GraphBatch:
        return encode_batch(instances, self.config.window, self.config.intent_window, self.config.hops)

    def run(self, batch: GraphBatch) -> BatchTrace:
        _, trace = forward_batch(batch, constants(self.params), self.config, train=False)
        return trace

    def forward(self, instance: PredictionInstance) -> ForwardTrace:
        """Inference-mode forward of a single instance."""
        return self.run(self.encode([instance])).instance(0)

    def traces(self, instances: Sequence[PredictionInstance], chunk: int = 512) -> List[ForwardTrace]:
        result: List[ForwardTrace] = []
        for start in range(0, len(instances), chunk):
            trace = self.run(self.encode(instances[start : start + chunk]))
            result.extend(trace.instance(i) for i in range(len(trace)))
        return result

    def predict_proba(self, instances: Sequence[PredictionInstance], chunk: int = 512) -> np.ndarray:
        """[N, |A|] probabilities; column i is app index i + 1."""
        parts = [
            self.run(self.encode(instances[start : start + chunk])).probabilities
            for start in range(0, len(instances), chunk)
        ]
        return np.concatenate(parts, axis=0) if parts else np.zeros((0, self.config.num_apps))
