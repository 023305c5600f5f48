"""Graph-masked transformer encoder with topic and stage heads."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .vocab import PAD_ID, EncodedGraph
from .weak_label import N_STAGES, REAL_STAGES, Stage


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 256
    n_heads: int = 4
    n_layers: int = 4
    n_topics: int = 50
    max_nodes: int = 160
    n_stages: int = N_STAGES

    def __post_init__(self):
        for name in ("d_model", "n_heads", "n_layers", "n_topics", "max_nodes", "n_stages"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    d_v = d_k

    def to_json(self) -> dict:
        return asdict(self)


def parameter_shapes(config: ModelConfig, vocab_size: int) -> dict[str, tuple]:
    d, h, dk = config.d_model, config.n_heads, config.d_k
    shapes = {"embedding": (vocab_size, d)}
    for k in range(config.n_layers):
        for i in range(h):
            for w in ("W_Q", "W_K", "W_V"):
                shapes[f"layer{k}.head{i}.{w}"] = (d, dk)
        shapes[f"layer{k}.W_O"] = (h * dk, d)
        shapes[f"layer{k}.W_FF1"] = (h * d, d)
        shapes[f"layer{k}.b_FF1"] = (h * d,)
        shapes[f"layer{k}.W_FF2"] = (d, h * d)
        shapes[f"layer{k}.b_FF2"] = (d,)
        for ln in ("ln1", "ln2"):
            shapes[f"layer{k}.{ln}.scale"] = (d,)
            shapes[f"layer{k}.{ln}.shift"] = (d,)
    shapes["W_topic"] = (config.n_topics, d)
    shapes["b_topic"] = (config.n_topics,)
    shapes["W_stage"] = (config.n_stages, config.n_topics)
    shapes["b_stage"] = (config.n_stages,)
    shapes["R"] = (d, config.n_topics)
    return shapes


def init_params(config: ModelConfig, vocab_size: int, seed: int = 0,
                dtype=np.float64) -> dict[str, Tensor]:
    """Glorot-uniform weights, zero biases, unit layer-norm scales."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config, vocab_size).items():
        if name.endswith(".scale"):
            value = np.ones(shape)
        elif len(shape) == 1:
            value = np.zeros(shape)
        else:
            fan_in, fan_out = shape if name != "embedding" else (config.d_model, config.d_model)
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(value.astype(dtype), requires_grad=True, name=name)
    return params


# batching ---------------------------------------------------------------------

@dataclass
class Batch:
    token_ids: np.ndarray  # (B, n)
    mask: np.ndarray  # (B, n, n) bool; padding nodes only see themselves
    lengths: np.ndarray
    cell_ids: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.lengths)


def collate(graphs: Sequence[EncodedGraph]) -> Batch:
    if not graphs:
        raise ValueError("cannot collate an empty batch")
    lengths = np.array([g.n_nodes for g in graphs])
    if (lengths == 0).any():
        raise ValueError("graph with zero nodes")
    width = int(lengths.max())
    ids = np.full((len(graphs), width), PAD_ID, dtype=np.int64)
    mask = np.broadcast_to(np.eye(width, dtype=bool), (len(graphs), width, width)).copy()
    for b, g in enumerate(graphs):
        n = g.n_nodes
        ids[b, :n] = g.token_ids
        mask[b, :n, :n] = g.adjacency_with_self
    return Batch(ids, mask, lengths, [g.cell_id for g in graphs])


# forward ----------------------------------------------------------------------

@dataclass
class ForwardOutput:
    nodes: Tensor
    z: Tensor
    p_topic: Tensor
    p_stage: Tensor
    attention: list = field(default_factory=list)  # [layer][head] -> (B, n, n)


def encoder_forward(params: dict[str, Tensor], batch: Batch, config: ModelConfig,
                    record_attention: bool = False):
    """Node embeddings (B, n, d_model), [CLS] readout z (B, d_model), and attention maps."""
    if batch.token_ids.shape[1] > config.max_nodes:
        raise ValueError(f"graph has {batch.token_ids.shape[1]} nodes, more than max_nodes={config.max_nodes}")
    x = ad.embedding(params["embedding"], batch.token_ids)
    scale = 1.0 / math.sqrt(config.d_k)
    maps = []
    for k in range(config.n_layers):
        heads, layer_maps = [], []
        for i in range(config.n_heads):
            q = x @ params[f"layer{k}.head{i}.W_Q"]
            key = x @ params[f"layer{k}.head{i}.W_K"]
            v = x @ params[f"layer{k}.head{i}.W_V"]
            weights = ad.softmax((q @ ad.transpose(key)) * scale, mask=batch.mask)
            if record_attention:
                layer_maps.append(weights.data)
            heads.append(weights @ v)
        attended = ad.concat(heads) @ params[f"layer{k}.W_O"]
        x = ad.layer_norm(x + attended, params[f"layer{k}.ln1.scale"], params[f"layer{k}.ln1.shift"])
        hidden = ad.relu(x @ ad.transpose(params[f"layer{k}.W_FF1"]) + params[f"layer{k}.b_FF1"])
        ff = hidden @ ad.transpose(params[f"layer{k}.W_FF2"]) + params[f"layer{k}.b_FF2"]
        x = ad.layer_norm(x + ff, params[f"layer{k}.ln2.scale"], params[f"layer{k}.ln2.shift"])
        maps.append(layer_maps)
    z = x[:, 0, :]
    return x, z, maps


def topic_head(z, W_topic, b_topic) -> Tensor:
    """Softmax over K topics of ``W_topic z + b``."""
    z, W_topic, b_topic = (ad.as_tensor(t) for t in (z, W_topic, b_topic))
    return ad.softmax(z @ ad.transpose(W_topic) + b_topic)


def stage_head(p_topic, W_stage, b_stage) -> Tensor:
    """Softmax over stages of ``W_stage p_topic + b_stage``; ``W_stage`` is (n_stages, K)."""
    p_topic, W_stage, b_stage = (ad.as_tensor(t) for t in (p_topic, W_stage, b_stage))
    return ad.softmax(p_topic @ ad.transpose(W_stage) + b_stage)


def forward(params: dict[str, Tensor], batch: Batch, config: ModelConfig,
            record_attention: bool = False) -> ForwardOutput:
    nodes, z, maps = encoder_forward(params, batch, config, record_attention)
    p_topic = topic_head(z, params["W_topic"], params["b_topic"])
    p_stage = stage_head(p_topic, params["W_stage"], params["b_stage"])
    return ForwardOutput(nodes, z, p_topic, p_stage, maps)


# prediction -------------------------------------------------------------------

def predicted_stage(p_stage) -> Stage:
    """Argmax over the five real stages; UNLABELED is never predicted."""
    p = np.asarray(p_stage)
    return REAL_STAGES[int(np.argmax(p[: len(REAL_STAGES)]))]


@dataclass
class StagePrediction:
    cell_id: str
    z: np.ndarray
    p_topic: np.ndarray
    p_stage: np.ndarray
    predicted: Stage

    def to_json(self) -> dict:
        return {
            "cell_id": self.cell_id,
            "p_stage": [float(p) for p in self.p_stage],
            "predicted": self.predicted.name,
        }


def predict_graphs(params: dict[str, Tensor], graphs: Sequence[EncodedGraph], config: ModelConfig,
                   batch_size: int = 64) -> list[StagePrediction]:
    out = []
    for start in range(0, len(graphs), batch_size):
        chunk = graphs[start:start + batch_size]
        res = forward(params, collate(chunk), config)
        for b, g in enumerate(chunk):
            p_stage = res.p_stage.data[b].copy()
            out.append(StagePrediction(
                g.cell_id, res.z.data[b].copy(), res.p_topic.data[b].copy(), p_stage,
                predicted_stage(p_stage),
            ))
    return out
