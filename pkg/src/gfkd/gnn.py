"""Dense GCN/GIN graph classifiers with explicit forward and backward passes.

A batch of graphs is stored as one flat node matrix (rows grouped by graph)
plus a zero-padded ``(B, n_max, n_max)`` stack of aggregation operators, so
every layer is a handful of batched matmuls.
"""
from __future__ import annotations

import copy
import io
import json
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import DatasetSplit, Graph

ARCHS = ("GCN", "GIN")
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


_backward_calls = 0


def backward_call_count() -> int:
    """Number of ``backward`` invocations since import (instrumentation)."""
    return _backward_calls


def parse_arch(spec: str) -> tuple[str, int, int]:
    """``"GCN-5-64"`` -> ``("GCN", 5, 64)``."""
    m = re.fullmatch(r"(GCN|GIN)-(\d+)-(\d+)", spec.strip(), flags=re.IGNORECASE)
    if not m or int(m.group(2)) < 1 or int(m.group(3)) < 1:
        raise ValueError(f"malformed architecture string {spec!r}; expected e.g. 'GCN-5-64'")
    return m.group(1).upper(), int(m.group(2)), int(m.group(3))


@dataclass
class ConvLayer:
    weight: np.ndarray
    bias: np.ndarray
    epsilon: float = 0.0


@dataclass
class BnLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps_num: float = 1e-5


@dataclass
class GnnModel:
    arch: str
    conv_layers: list
    bn_layers: list
    classifier_weight: np.ndarray
    classifier_bias: np.ndarray
    readout: str = "sum"
    use_bn: bool = True

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.readout not in ("sum", "mean"):
            raise ValueError(f"unknown readout {self.readout!r}")
        if len(self.conv_layers) != len(self.bn_layers):
            raise ShapeError("need one BN layer per conv layer")

    @property
    def input_dim(self) -> int:
        return self.conv_layers[0].weight.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.conv_layers[0].weight.shape[1]

    @property
    def num_layers(self) -> int:
        return len(self.conv_layers)

    @property
    def num_classes(self) -> int:
        return self.classifier_weight.shape[1]

    @property
    def tag(self) -> str:
        return f"{self.arch}-{self.num_layers}-{self.hidden_dim}"

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name; the arrays are the model's own storage."""
        p = {}
        for k, (c, b) in enumerate(zip(self.conv_layers, self.bn_layers)):
            p[f"conv{k}.weight"] = c.weight
            p[f"conv{k}.bias"] = c.bias
            if self.use_bn:
                p[f"bn{k}.gamma"] = b.gamma
                p[f"bn{k}.beta"] = b.beta
        p["cls.weight"] = self.classifier_weight
        p["cls.bias"] = self.classifier_bias
        return p

    def state(self) -> dict[str, np.ndarray]:
        """Parameters plus BN running statistics."""
        s = dict(self.parameters())
        for k, b in enumerate(self.bn_layers):
            s[f"bn{k}.gamma"] = b.gamma
            s[f"bn{k}.beta"] = b.beta
            s[f"bn{k}.running_mean"] = b.running_mean
            s[f"bn{k}.running_var"] = b.running_var
        return s

    def copy(self) -> "GnnModel":
        return copy.deepcopy(self)


def build_model(arch: str, num_layers: int, hidden_dim: int, input_dim: int, num_classes: int,
                rng: np.random.Generator, readout: str = "sum", use_bn: bool = True) -> GnnModel:
    """Glorot-uniform weights, zero biases, identity BN."""

    def glorot(fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    convs, bns = [], []
    for k in range(num_layers):
        d_in = input_dim if k == 0 else hidden_dim
        convs.append(ConvLayer(weight=glorot(d_in, hidden_dim), bias=np.zeros(hidden_dim)))
        bns.append(BnLayer(gamma=np.ones(hidden_dim), beta=np.zeros(hidden_dim),
                           running_mean=np.zeros(hidden_dim), running_var=np.ones(hidden_dim)))
    return GnnModel(arch=arch.upper(), conv_layers=convs, bn_layers=bns,
                    classifier_weight=glorot(hidden_dim, num_classes),
                    classifier_bias=np.zeros(num_classes), readout=readout, use_bn=use_bn)


def model_from_tag(tag: str, input_dim: int, num_classes: int, rng: np.random.Generator,
                   readout: str = "sum") -> GnnModel:
    arch, layers, width = parse_arch(tag)
    return build_model(arch, layers, width, input_dim, num_classes, rng, readout=readout)


class GraphBatch:
    """A batch of graphs laid out for dense batched aggregation."""

    def __init__(self, features: np.ndarray, adjacencies: Sequence[np.ndarray]):
        counts = np.array([a.shape[0] for a in adjacencies], dtype=np.int64)
        if len(counts) == 0:
            raise ShapeError("empty batch")
        if np.any(counts == 0):
            raise ShapeError("graph with 0 nodes")
        self.features = np.asarray(features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != counts.sum():
            raise ShapeError(f"features shape {self.features.shape} does not match {counts.sum()} nodes")
        self.node_counts = counts
        self.n_graphs = len(counts)
        self.n_max = int(counts.max())
        self.graph_index = np.repeat(np.arange(self.n_graphs), counts)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.position = np.arange(counts.sum()) - np.repeat(starts, counts)
        adj = np.zeros((self.n_graphs, self.n_max, self.n_max))
        for b, a in enumerate(adjacencies):
            adj[b, : a.shape[0], : a.shape[0]] = a
        self.adjacency = adj
        self._ops: dict = {}

    @classmethod
    def from_graphs(cls, graphs: Sequence[Graph]) -> "GraphBatch":
        if len(graphs) == 0:
            raise ShapeError("empty batch")
        return cls(np.concatenate([g.features for g in graphs]), [g.adjacency for g in graphs])

    @property
    def n_nodes(self) -> int:
        return len(self.graph_index)

    def operator(self, arch: str, epsilon: float = 0.0) -> np.ndarray:
        key = (arch, epsilon)
        if key not in self._ops:
            eye = np.zeros_like(self.adjacency)
            eye[self.graph_index, self.position, self.position] = 1.0
            if arch == "GCN":
                a_tilde = self.adjacency + eye
                deg = a_tilde.sum(axis=-1)
                inv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
                op = inv[:, :, None] * a_tilde * inv[:, None, :]
            else:
                op = self.adjacency + (1.0 + epsilon) * eye
            self._ops[key] = op
        return self._ops[key]

    def pad(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n_graphs, self.n_max, x.shape[1]))
        out[self.graph_index, self.position] = x
        return out

    def unpad(self, xp: np.ndarray) -> np.ndarray:
        return xp[self.graph_index, self.position]

    def aggregate(self, x: np.ndarray, arch: str, epsilon: float = 0.0) -> np.ndarray:
        return self.unpad(self.operator(arch, epsilon) @ self.pad(x))

    def aggregate_t(self, g: np.ndarray, arch: str, epsilon: float = 0.0) -> np.ndarray:
        return self.unpad(np.swapaxes(self.operator(arch, epsilon), 1, 2) @ self.pad(g))

    def pool(self, x: np.ndarray, readout: str) -> np.ndarray:
        s = self.pad(x).sum(axis=1)
        return s / self.node_counts[:, None] if readout == "mean" else s

    def pool_t(self, g: np.ndarray, readout: str) -> np.ndarray:
        if readout == "mean":
            g = g / self.node_counts[:, None]
        return g[self.graph_index]


@dataclass
class LayerTrace:
    inputs: np.ndarray
    aggregated: np.ndarray
    pre_bn: np.ndarray
    batch_mean: np.ndarray
    batch_var: np.ndarray
    normalized: np.ndarray | None
    scale: np.ndarray | None  # 1/sqrt(var + eps) actually used
    output: np.ndarray


@dataclass
class ForwardTrace:
    batch: GraphBatch
    mode: str
    arch: str
    layers: list = field(default_factory=list)
    pooled: np.ndarray | None = None
    logits: np.ndarray | None = None

    @property
    def batch_means(self) -> list:
        return [lt.batch_mean for lt in self.layers]

    @property
    def batch_vars(self) -> list:
        return [lt.batch_var for lt in self.layers]


def model_forward(model: GnnModel, graphs, mode: str = "eval") -> ForwardTrace:
    """Run the model. ``graphs`` is a GraphBatch or a sequence of Graph.

    Batch statistics of every BN input are recorded in both modes. In train
    mode they normalize and update running statistics; in eval mode the
    running statistics normalize.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    batch = graphs if isinstance(graphs, GraphBatch) else GraphBatch.from_graphs(graphs)
    if batch.features.shape[1] != model.input_dim:
        raise ShapeError(f"feature dim {batch.features.shape[1]} != model input_dim {model.input_dim}")
    trace = ForwardTrace(batch=batch, mode=mode, arch=model.arch)
    x = batch.features
    n = batch.n_nodes
    for conv, bn in zip(model.conv_layers, model.bn_layers):
        ax = batch.aggregate(x, model.arch, conv.epsilon)
        z = ax @ conv.weight + conv.bias
        mu = z.mean(axis=0)
        var = z.var(axis=0)
        xhat = scale = None
        if model.use_bn:
            if mode == "train":
                scale = 1.0 / np.sqrt(var + bn.eps_num)
                xhat = (z - mu) * scale
                unbiased = var * n / (n - 1) if n > 1 else var
                bn.running_mean[...] = (1 - bn.momentum) * bn.running_mean + bn.momentum * mu
                bn.running_var[...] = (1 - bn.momentum) * bn.running_var + bn.momentum * unbiased
            else:
                scale = 1.0 / np.sqrt(bn.running_var + bn.eps_num)
                xhat = (z - bn.running_mean) * scale
            y = bn.gamma * xhat + bn.beta
        else:
            y = z
        h = np.maximum(y, 0.0)
        trace.layers.append(LayerTrace(x, ax, z, mu, var, xhat, scale, h))
        x = h
    trace.pooled = batch.pool(x, model.readout)
    trace.logits = trace.pooled @ model.classifier_weight + model.classifier_bias
    return trace


def backward(model: GnnModel, trace: ForwardTrace, logit_grad: np.ndarray,
             stat_grads: Sequence | None = None) -> tuple[dict, np.ndarray]:
    """Reverse pass for a trace produced by ``model_forward`` on ``model``.

    ``stat_grads`` optionally holds, per layer, upstream gradients
    ``(d/d batch_mean, d/d batch_var)`` of a loss that reads the recorded
    batch statistics directly. Returns (parameter grads by name, grads on
    the stacked input node features).
    """
    global _backward_calls
    _backward_calls += 1
    if trace.arch != model.arch or len(trace.layers) != model.num_layers:
        raise ContractError("trace was not produced by this model")
    for lt, conv in zip(trace.layers, model.conv_layers):
        if lt.aggregated.shape[1] != conv.weight.shape[0] or lt.pre_bn.shape[1] != conv.weight.shape[1]:
            raise ContractError("trace shapes do not match model weights")
    logit_grad = np.asarray(logit_grad, dtype=np.float64)
    if logit_grad.shape != trace.logits.shape:
        raise ShapeError(f"logit grad shape {logit_grad.shape} != logits {trace.logits.shape}")
    if stat_grads is not None and len(stat_grads) != model.num_layers:
        raise ShapeError("need one stat-grad entry per layer")

    batch = trace.batch
    n = batch.n_nodes
    grads = {
        "cls.weight": trace.pooled.T @ logit_grad,
        "cls.bias": logit_grad.sum(axis=0),
    }
    dh = batch.pool_t(logit_grad @ model.classifier_weight.T, model.readout)
    for k in reversed(range(model.num_layers)):
        lt, conv, bn = trace.layers[k], model.conv_layers[k], model.bn_layers[k]
        dy = dh * (lt.output > 0)
        if model.use_bn:
            grads[f"bn{k}.gamma"] = (dy * lt.normalized).sum(axis=0)
            grads[f"bn{k}.beta"] = dy.sum(axis=0)
            dxhat = dy * bn.gamma
            if trace.mode == "train":
                xhat = lt.normalized
                dz = lt.scale / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            else:
                dz = dxhat * lt.scale
        else:
            dz = dy
        if stat_grads is not None and stat_grads[k] is not None:
            g_mu, g_var = stat_grads[k]
            dz = dz + g_mu / n + g_var * 2.0 * (lt.pre_bn - lt.batch_mean) / n
        grads[f"conv{k}.weight"] = lt.aggregated.T @ dz
        grads[f"conv{k}.bias"] = dz.sum(axis=0)
        dh = batch.aggregate_t(dz @ conv.weight.T, model.arch, conv.epsilon)
    return grads, dh


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy_per_graph(logits: np.ndarray, labels) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    if labels.shape != (logits.shape[0],) or np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise ShapeError("labels must be class indices, one per row")
    return -_log_softmax(logits)[np.arange(len(labels)), labels]


def cross_entropy(logits: np.ndarray, labels) -> float:
    return float(cross_entropy_per_graph(logits, labels).mean())


def cross_entropy_grad(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient on the logits."""
    per = cross_entropy_per_graph(logits, labels)
    p = np.exp(_log_softmax(np.asarray(logits, dtype=np.float64)))
    p[np.arange(len(per)), labels] -= 1.0
    return float(per.mean()), p / len(per)


class Adam:
    def __init__(self, params: dict, lr: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            if self.weight_decay:
                g = g + self.weight_decay * p
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def predict(model: GnnModel, graphs, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits for a sequence of graphs."""
    if isinstance(graphs, GraphBatch):
        return model_forward(model, graphs, "eval").logits
    out = [model_forward(model, graphs[i:i + batch_size], "eval").logits
           for i in range(0, len(graphs), batch_size)]
    return np.concatenate(out)


def accuracy(model: GnnModel, graphs: Sequence[Graph]) -> float:
    if len(graphs) == 0:
        raise ValueError("cannot evaluate on an empty set")
    pred = predict(model, graphs).argmax(axis=1)
    return float(np.mean(pred == np.array([g.label for g in graphs])))


@dataclass
class OptimizerConfig:
    lr: float = 0.01
    batch_size: int = 32
    weight_decay: float = 0.0
    schedule: str = "constant"  # or "linear": rate scaled from 1 toward 0 over the run
    recalibrate_bn: bool = True
    seed: int = 0

    def lr_at(self, epoch: int, epochs: int) -> float:
        if self.schedule == "constant":
            return self.lr
        return self.lr * (1.0 - epoch / epochs)


def train_teacher(model: GnnModel, split: DatasetSplit, epochs: int,
                  optimizer_config: OptimizerConfig | None = None) -> tuple[GnnModel, list[dict]]:
    """Minimize cross-entropy on ``split.train`` with Adam.

    Returns a trained copy (the input model is not modified) and one metrics
    row per epoch with the mean training loss and held-out accuracy.
    """
    cfg = optimizer_config or OptimizerConfig()
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    train = split.train
    metrics = []
    for epoch in range(1, epochs + 1):
        lr = cfg.lr_at(epoch - 1, epochs)
        order = rng.permutation(len(train))
        losses = []
        for s in range(0, len(train), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            if len(idx) < 2 and model.use_bn:
                continue
            graphs = [train[i] for i in idx]
            trace = model_forward(model, graphs, "train")
            loss, dlogits = cross_entropy_grad(trace.logits, [g.label for g in graphs])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            grads, _ = backward(model, trace, dlogits)
            opt.step(grads, lr=lr)
            losses.append(loss * len(idx))
        row = {"epoch": epoch, "train_loss": float(np.sum(losses) / len(train))}
        if split.test:
            row["test_acc"] = accuracy(model, split.test)
        metrics.append(row)
    if cfg.recalibrate_bn and epochs > 0:
        recalibrate_bn(model, train)
        if split.test:
            metrics[-1]["test_acc"] = accuracy(model, split.test)
    return model, metrics


def recalibrate_bn(model: GnnModel, graphs: Sequence[Graph]) -> None:
    """Replace running BN statistics with exact statistics of ``graphs`` (one full batch)."""
    saved = [bn.momentum for bn in model.bn_layers]
    for bn in model.bn_layers:
        bn.momentum = 1.0
    try:
        model_forward(model, graphs, "train")
    finally:
        for bn, m in zip(model.bn_layers, saved):
            bn.momentum = m


def save_checkpoint(model: GnnModel) -> bytes:
    header = {
        "format": "gfkd-checkpoint",
        "version": CHECKPOINT_VERSION,
        "arch": model.arch,
        "num_layers": model.num_layers,
        "input_dim": model.input_dim,
        "hidden_dim": model.hidden_dim,
        "num_classes": model.num_classes,
        "readout": model.readout,
        "use_bn": model.use_bn,
        "epsilon": [c.epsilon for c in model.conv_layers],
        "bn_momentum": [b.momentum for b in model.bn_layers],
        "bn_eps": [b.eps_num for b in model.bn_layers],
    }
    buf = io.BytesIO()
    np.savez(buf, __header__=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
             **model.state())
    return buf.getvalue()


def load_checkpoint(data: bytes, arch: str | None = None) -> GnnModel:
    """Inverse of ``save_checkpoint``. ``arch`` optionally pins the expected arch tag."""
    try:
        with np.load(io.BytesIO(data), allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
        header = json.loads(arrays.pop("__header__").tobytes().decode())
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint: {e}") from None
    if header.get("format") != "gfkd-checkpoint" or header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    if arch is not None and arch.upper() != header["arch"]:
        raise CheckpointError(f"checkpoint holds a {header['arch']} model, expected {arch.upper()}")
    L, d_in, h, k = header["num_layers"], header["input_dim"], header["hidden_dim"], header["num_classes"]
    try:
        convs, bns = [], []
        for i in range(L):
            w, b = arrays[f"conv{i}.weight"], arrays[f"conv{i}.bias"]
            if w.shape != ((d_in if i == 0 else h), h) or b.shape != (h,):
                raise CheckpointError(f"layer {i} dimensions do not match header")
            convs.append(ConvLayer(w, b, header["epsilon"][i]))
            stats = [arrays[f"bn{i}.{n}"] for n in ("gamma", "beta", "running_mean", "running_var")]
            if any(s.shape != (h,) for s in stats):
                raise CheckpointError(f"BN layer {i} dimensions do not match header")
            bns.append(BnLayer(*stats, momentum=header["bn_momentum"][i], eps_num=header["bn_eps"][i]))
        cw, cb = arrays["cls.weight"], arrays["cls.bias"]
    except KeyError as e:
        raise CheckpointError(f"missing array {e.args[0]}") from None
    if cw.shape != (h, k) or cb.shape != (k,):
        raise CheckpointError("classifier dimensions do not match header")
    return GnnModel(header["arch"], convs, bns, cw, cb, readout=header["readout"], use_bn=header["use_bn"])
