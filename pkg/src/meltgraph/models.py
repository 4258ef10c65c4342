"""Node-level predictors of melt-pool channels from laser inputs.

Every kind maps laser features X (N x 4) on a :class:`ScanGraph` to
standardised melt-pool predictions (N x C): zero or more message-passing
layers followed by one fully connected head. The autoencoder instead
reconstructs the concatenation [X, Y] through a bottleneck.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError

KINDS = ("graph_transformer", "gat", "gcn", "gin", "fc", "autoencoder")
ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh, "identity": ad.identity}


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "graph_transformer"
    in_dim: int = 4
    hidden_dim: int = 64
    out_dim: int = 4
    n_message_layers: int = 2
    n_heads: int = 4
    edge_dim: int = 8
    leaky_slope: float = 0.2
    eps_learnable: bool = True
    activation: str = "relu"
    bottleneck_dim: int = 3

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; choose from {KINDS}")
        for name in ("in_dim", "hidden_dim", "out_dim", "n_heads", "edge_dim", "bottleneck_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_message_layers < 0:
            raise ConfigError("n_message_layers must be non-negative")
        if self.kind in ("graph_transformer", "gat") and self.hidden_dim % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} must divide hidden_dim={self.hidden_dim}")
        if self.kind == "autoencoder" and self.bottleneck_dim >= self.in_dim + self.out_dim:
            raise ConfigError(f"bottleneck_dim={self.bottleneck_dim} must be below the input "
                              f"width {self.in_dim + self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        return self


@dataclass
class ModelParams:
    spec: ModelSpec
    tensors: dict[str, Tensor]
    # per-channel (mean, std) of training targets, see training.Standardizer
    standardizer: object = None
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def arrays(self):
        return {k: t.value for k, t in self.tensors.items()}

    def copy(self):
        return ModelParams(self.spec, {k: Tensor(t.value.copy(), t.requires_grad, k)
                                       for k, t in self.tensors.items()},
                           self.standardizer, dict(self.meta))


def _glorot(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(spec: ModelSpec, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights and zero biases, seeded."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    arrays = {}

    def linear(name, fan_in, fan_out, bias=True):
        arrays[f"{name}.W"] = _glorot(rng, fan_in, fan_out)
        if bias:
            arrays[f"{name}.b"] = np.zeros(fan_out)

    d = spec.hidden_dim
    if spec.kind == "autoencoder":
        width = spec.in_dim + spec.out_dim
        linear("enc0", width, d)
        linear("enc1", d, spec.bottleneck_dim)
        linear("dec0", spec.bottleneck_dim, d)
        linear("dec1", d, width)
    else:
        if spec.kind == "graph_transformer":
            arrays["edge_embed"] = _glorot(rng, 2, spec.edge_dim)
        din = spec.in_dim
        for layer in range(spec.n_message_layers):
            p = f"l{layer}"
            if spec.kind == "graph_transformer":
                for part in ("q", "k", "v", "skip"):
                    linear(f"{p}.{part}", din, d)
                linear(f"{p}.edge", spec.edge_dim, d, bias=False)
            elif spec.kind == "gat":
                linear(p, din, d)
                dh = d // spec.n_heads
                arrays[f"{p}.att_src"] = _glorot(rng, spec.n_heads, dh)
                arrays[f"{p}.att_dst"] = _glorot(rng, spec.n_heads, dh)
            elif spec.kind == "gcn":
                linear(p, din, d)
            elif spec.kind == "gin":
                linear(f"{p}.mlp0", din, d)
                linear(f"{p}.mlp1", d, d)
                arrays[f"{p}.eps"] = np.zeros(1)
            elif spec.kind == "fc":
                linear(p, din, d)
            din = d
        linear("head", din, spec.out_dim)
    tensors = {}
    for name, value in arrays.items():
        trainable = not (name.endswith(".eps") and not spec.eps_learnable)
        tensors[name] = Tensor(value, requires_grad=trainable, name=name)
    return ModelParams(spec, tensors)


# ---------------------------------------------------------------- layers


def _dense(params, name, h):
    out = ad.matmul(h, params[f"{name}.W"])
    bias = params.tensors.get(f"{name}.b")
    return out if bias is None else out + bias


def _heads(x, n_heads):
    e, width = x.shape
    return ad.reshape(x, (e, n_heads, width // n_heads))


def graph_transformer_layer(h, src, dst, edge_class, edge_emb, params, prefix, n_heads):
    """Multi-head attention with edge features in keys and values, plus a skip path.

    For destination i and in-neighbour j, per head:
    ``a_ij = softmax_j(q_i . (k_j + e_ij) / sqrt(d_head))``,
    ``h'_i = W_s h_i + sum_j a_ij (v_j + e_ij)``.
    """
    n = h.shape[0]
    q = _dense(params, f"{prefix}.q", h)
    k = _dense(params, f"{prefix}.k", h)
    v = _dense(params, f"{prefix}.v", h)
    out = _dense(params, f"{prefix}.skip", h)
    if len(src) == 0:
        return out
    # edge vectors take one value per edge class: embed the classes, not the edges
    etab = ad.matmul(edge_emb, params[f"{prefix}.edge.W"])
    return out + ad.edge_attention(q, k, v, etab, edge_class, src, dst, n_heads)


def gat_layer(h, src, dst, params, prefix, n_heads, slope):
    """Attention over in-neighbours plus the node itself.

    ``src``/``dst`` must already contain one self-loop per node.
    """
    n = h.shape[0]
    wh = ad.matmul(h, params[f"{prefix}.W"])
    heads = _heads(wh, n_heads)
    s_src = ad.tsum(heads * params[f"{prefix}.att_src"], axis=2)
    s_dst = ad.tsum(heads * params[f"{prefix}.att_dst"], axis=2)
    logits = ad.leaky_relu(ad.gather(s_dst, dst) + ad.gather(s_src, src), slope)
    alpha = ad.segment_softmax(logits, dst, n)
    msg = _heads(ad.gather(wh, src), n_heads) * ad.reshape(alpha, alpha.shape + (1,))
    out = ad.segment_sum(ad.reshape(msg, (len(src), wh.shape[1])), dst, n)
    return out + params[f"{prefix}.b"]


def gcn_layer(h, operator, params, prefix):
    """``S (H W) + b`` with S the self-looped symmetric-normalised adjacency."""
    return ad.spmm(operator, ad.matmul(h, params[f"{prefix}.W"])) + params[f"{prefix}.b"]


def gin_aggregate(h, src, dst, eps):
    """``(1 + eps) h_i + sum_{j in N(i)} h_j`` before the GIN MLP."""
    return h * (1.0 + eps) + ad.segment_sum(ad.gather(h, src), dst, h.shape[0])


def gin_layer(h, src, dst, params, prefix, act=ad.relu):
    pre = gin_aggregate(h, src, dst, params[f"{prefix}.eps"])
    return _dense(params, f"{prefix}.mlp1", act(_dense(params, f"{prefix}.mlp0", pre)))


def fc_forward(x, params, act=ad.relu):
    """Per-node MLP; no graph information enters."""
    spec = params.spec
    h = x
    for layer in range(spec.n_message_layers):
        h = act(_dense(params, f"l{layer}", h))
    return _dense(params, "head", h)


def autoencoder_forward(xy, params, act=None):
    act = act or ACTIVATIONS[params.spec.activation]
    z = _dense(params, "enc1", act(_dense(params, "enc0", xy)))
    return _dense(params, "dec1", act(_dense(params, "dec0", z)))


# ---------------------------------------------------------------- model


class GraphInputs:
    """Per-graph arrays the forward pass needs, computed once."""

    def __init__(self, graph, X=None):
        self.graph = graph
        self.X = graph.scan.X if X is None else X
        self.n = graph.n_nodes
        self.src = graph.src
        self.dst = graph.dst
        self.edge_class = graph.edge_class
        loops = np.arange(self.n)
        self.src_loop = np.concatenate([self.src, loops])
        self.dst_loop = np.concatenate([self.dst, loops])
        self._gcn = None

    @property
    def gcn_operator(self):
        if self._gcn is None:
            self._gcn = self.graph.operator(self_loops=True).matrix
        return self._gcn


def forward(params: ModelParams, inputs: GraphInputs, Y_std=None):
    """Differentiable forward pass; returns a Tensor.

    Graph kinds return N x C predictions. The autoencoder needs the
    standardised labels ``Y_std`` and returns the N x (4 + C) reconstruction.
    """
    spec = params.spec
    act = ACTIVATIONS[spec.activation]
    X = np.asarray(inputs.X, dtype=np.float64)
    if X.shape[1] != spec.in_dim:
        raise ConfigError(f"model expects {spec.in_dim} input features, graph has {X.shape[1]}")
    if spec.kind == "autoencoder":
        if Y_std is None:
            raise ConfigError("autoencoder forward needs the melt-pool labels")
        return autoencoder_forward(Tensor(np.hstack([X, Y_std])), params, act)
    if spec.kind == "fc":
        return fc_forward(Tensor(X), params, act)
    h = Tensor(X)
    edge_emb = None
    if spec.kind == "graph_transformer":
        edge_emb = ad.matmul(Tensor(np.eye(2)), params["edge_embed"])
    for layer in range(spec.n_message_layers):
        p = f"l{layer}"
        if spec.kind == "graph_transformer":
            h = graph_transformer_layer(h, inputs.src, inputs.dst, inputs.edge_class, edge_emb,
                                        params, p, spec.n_heads)
        elif spec.kind == "gat":
            h = gat_layer(h, inputs.src_loop, inputs.dst_loop, params, p, spec.n_heads,
                          spec.leaky_slope)
        elif spec.kind == "gcn":
            h = gcn_layer(h, inputs.gcn_operator, params, p)
        elif spec.kind == "gin":
            h = gin_layer(h, inputs.src, inputs.dst, params, p, act)
        h = act(h)
    return _dense(params, "head", h)


def predict(params: ModelParams, graph, X=None, Y_std=None):
    """Standardised melt-pool predictions (N x C) as a numpy array.

    For the autoencoder this is the melt-pool block of the reconstruction;
    ``Y_std`` defaults to the graph's labels standardised with the model's
    standardizer.
    """
    spec = params.spec
    inputs = graph if isinstance(graph, GraphInputs) else GraphInputs(graph, X)
    if spec.kind == "autoencoder":
        if Y_std is None:
            Y_std = params.standardizer.transform(inputs.graph.scan.Y)
        return forward(params, inputs, Y_std).value[:, spec.in_dim:]
    return forward(params, inputs).value


# ---------------------------------------------------------------- serialisation


def params_to_json(params: ModelParams) -> str:
    doc = {
        "spec": asdict(params.spec),
        "standardizer": None if params.standardizer is None else params.standardizer.to_dict(),
        "meta": params.meta,
        "arrays": {name: {"shape": list(t.shape), "data": [float(x) for x in t.value.reshape(-1)]}
                   for name, t in sorted(params.tensors.items())},
    }
    # float repr is the shortest round-tripping form, so this is bit-exact
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def params_from_json(text: str) -> ModelParams:
    from .training import Standardizer

    doc = json.loads(text)
    try:
        spec = ModelSpec(**doc["spec"]).validate()
    except TypeError as exc:
        raise ConfigError(f"bad model spec in params file: {exc}") from None
    tensors = {}
    for name, entry in doc["arrays"].items():
        value = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        trainable = not (name.endswith(".eps") and not spec.eps_learnable)
        tensors[name] = Tensor(value, requires_grad=trainable, name=name)
    std = doc.get("standardizer")
    return ModelParams(spec, tensors, None if std is None else Standardizer.from_dict(std),
                       doc.get("meta", {}))
