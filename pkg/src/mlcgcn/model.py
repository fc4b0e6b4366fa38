"""Multi-level connectome GCN.

The network embeds each ROI time series, runs a stack of spatio-temporal
feature extractors (a transformer pathway over transposed features plus a
trend/seasonal linear-decomposition pathway), builds one cosine-similarity
adjacency per level, encodes the baseline Pearson graph and every generated
graph with its own two-layer GCN, and classifies the concatenated per-level
readout embeddings.
"""

import json
import warnings
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ForwardError, ShapeError

CHECKPOINT_FORMAT = "mlcgcn-checkpoint-v1"


@dataclass
class ModelConfig:
    """Architecture hyperparameters. Defaults follow the reference setup."""

    series_len: int
    classes: int
    n_rois: int = 273
    embed_len: int = 64
    conv_kernels: int = 8
    kernel_size: int = 5
    hidden_size: int = 64
    levels: int = 6
    attention_heads: int = 4
    gcn_layers: int = 2
    gcn_hidden: int = 64
    readout_dim: int = 64
    dropout_rate: float = 0.2
    use_sfe: bool = True
    use_tfe: bool = True
    use_positional_encoding: bool = True
    normalize_adjacency: bool = False
    readout_mode: str = "mean"
    level_subset: Optional[tuple] = None

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.gcn_layers != 2:
            raise ConfigError("gcn_layers is fixed at 2")
        if self.embed_len > self.series_len:
            raise ConfigError(
                f"embed_len ({self.embed_len}) must not exceed series_len ({self.series_len})"
            )
        if not (self.use_sfe or self.use_tfe):
            raise ConfigError("at least one of use_sfe/use_tfe must be enabled")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.use_sfe and self.n_rois % self.attention_heads != 0:
            raise ConfigError(
                f"n_rois ({self.n_rois}) must be divisible by attention_heads "
                f"({self.attention_heads})"
            )
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        if self.readout_mode not in ("mean", "flatten"):
            raise ConfigError(f"readout_mode must be 'mean' or 'flatten', got {self.readout_mode!r}")
        if self.level_subset is not None:
            subset = tuple(sorted(set(int(v) for v in self.level_subset)))
            if not subset:
                raise ConfigError("level_subset must not be empty")
            if subset[0] < 0 or subset[-1] > self.levels:
                raise ConfigError(
                    f"level_subset entries must lie in [0, {self.levels}], got {subset}"
                )
            object.__setattr__(self, "level_subset", subset)

    @property
    def gcn_levels(self):
        """Graph levels encoded by GCNs: 0 is the Pearson graph, 1..K generated."""
        if self.level_subset is not None:
            return self.level_subset
        return tuple(range(self.levels + 1))


@dataclass
class LevelOutputs:
    """Per-level artifacts of one forward pass."""

    features: list  # K tensors [n x l]
    adjacencies: list  # K tensors [n x n]
    pearson: Tensor  # [n x n]
    embeddings: list  # one [e] vector per encoded graph level


def positional_encoding(n_tokens, dim):
    """Constant sinusoidal position table [n_tokens x dim].

    Even columns hold sin(pos / 10000^(col/dim)), odd columns the matching
    cosine. Values are bounded in [-1, 1] and never trained.
    """
    if dim < 1:
        raise ConfigError(f"positional encoding dim must be >= 1, got {dim}")
    pos = np.arange(n_tokens, dtype=np.float64)[:, None]
    even = np.arange(0, dim, 2, dtype=np.float64)
    denom = np.power(10000.0, even / dim)
    pe = np.zeros((n_tokens, dim))
    pe[:, 0::2] = np.sin(pos / denom)
    n_odd = pe[:, 1::2].shape[1]
    pe[:, 1::2] = np.cos(pos / denom[:n_odd])
    return Tensor(pe)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape):
    return Tensor(np.ones(shape), requires_grad=True)


def init_params(cfg: ModelConfig, rng) -> dict:
    """Build the full parameter dictionary for a config.

    The set of names and shapes is a pure function of the config; values are
    drawn with uniform fan-in scaling, biases start at zero.
    """
    n, L, l = cfg.n_rois, cfg.series_len, cfg.embed_len
    m, t, h = cfg.conv_kernels, cfg.kernel_size, cfg.hidden_size
    params = {}
    params["embed.kernels"] = _uniform(rng, t, (m, t))
    params["embed.bias"] = _zeros((m,))
    params["embed.w"] = _uniform(rng, m * L, (m * L, l))
    for i in range(1, cfg.levels + 1):
        if cfg.use_sfe:
            p = f"stfe{i}.sfe."
            params[p + "ln1.gain"] = _ones((n,))
            params[p + "ln1.shift"] = _zeros((n,))
            for name in ("wq", "wk", "wv", "wo"):
                params[p + name] = _uniform(rng, n, (n, n))
            params[p + "ln2.gain"] = _ones((n,))
            params[p + "ln2.shift"] = _zeros((n,))
            params[p + "ffn.w1"] = _uniform(rng, n, (n, h))
            params[p + "ffn.b1"] = _zeros((h,))
            params[p + "ffn.w2"] = _uniform(rng, h, (h, n))
            params[p + "ffn.b2"] = _zeros((n,))
            params[p + "ln_out.gain"] = _ones((n,))
            params[p + "ln_out.shift"] = _zeros((n,))
        if cfg.use_tfe:
            p = f"stfe{i}.tfe."
            params[p + "wt"] = _uniform(rng, l, (l, l))
            params[p + "ws"] = _uniform(rng, l, (l, l))
            params[p + "mlp.w1"] = _uniform(rng, l, (l, l))
            params[p + "mlp.b1"] = _zeros((l,))
            params[p + "mlp.w2"] = _uniform(rng, l, (l, l))
            params[p + "mlp.b2"] = _zeros((l,))
            params[p + "norm.gain"] = _ones((l,))
            params[p + "norm.shift"] = _zeros((l,))
        p = f"stfe{i}.fuse."
        params[p + "w1"] = _uniform(rng, l, (l, l))
        params[p + "b1"] = _zeros((l,))
        params[p + "w2"] = _uniform(rng, l, (l, l))
        params[p + "b2"] = _zeros((l,))
    for k in cfg.gcn_levels:
        params[f"gcn{k}.w0"] = _uniform(rng, n, (n, cfg.gcn_hidden))
        params[f"gcn{k}.w1"] = _uniform(rng, cfg.gcn_hidden, (cfg.gcn_hidden, cfg.gcn_hidden))
        pooled = cfg.gcn_hidden if cfg.readout_mode == "mean" else n * cfg.gcn_hidden
        params[f"readout{k}.w"] = _uniform(rng, pooled, (pooled, cfg.readout_dim))
        params[f"readout{k}.b"] = _zeros((cfg.readout_dim,))
    width = len(cfg.gcn_levels) * cfg.readout_dim
    params["head.w1"] = _uniform(rng, width, (width, h))
    params["head.b1"] = _zeros((h,))
    params["head.w2"] = _uniform(rng, h, (h, cfg.classes))
    params["head.b2"] = _zeros((cfg.classes,))
    return params


# ---------------------------------------------------------------------------
# forward operations


def pearson_connectome(x) -> Tensor:
    """Pearson correlation matrix of the rows of x [n x L].

    The result is a constant (never differentiated): symmetric with a unit
    diagonal. Zero-variance rows get zero off-diagonal entries and a warning.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if data.ndim != 2:
        raise ShapeError(f"pearson_connectome expects [n x L], got shape {data.shape}")
    n = data.shape[0]
    centered = data - data.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered * centered).sum(axis=1))
    degenerate = norms < 1e-150
    if degenerate.any():
        warnings.warn(
            f"pearson_connectome: {int(degenerate.sum())} zero-variance row(s); "
            "their correlations are set to 0",
            stacklevel=2,
        )
    safe = np.where(degenerate, 1.0, norms)
    unit = centered / safe[:, None]
    f = unit @ unit.T
    f = (f + f.T) / 2.0
    f[degenerate, :] = 0.0
    f[:, degenerate] = 0.0
    np.fill_diagonal(f, 1.0)
    return Tensor(np.clip(f, -1.0, 1.0))


def generate_adjacency(h_level: Tensor) -> Tensor:
    """Cosine-similarity graph of the per-ROI feature rows.

    Rows are L2-normalized before the dot product so entries land in [-1, 1];
    the diagonal is pinned to exactly 1 and the result is symmetrized.
    Zero-norm rows stay zero off-diagonal (warned inside the normalizer).
    """
    h = ad.l2_normalize_rows(h_level)
    a = ad.matmul(h, ad.transpose(h))
    a = ad.scale(ad.add(a, ad.transpose(a)), 0.5)
    a = ad.clamp(a, -1.0, 1.0)
    n = a.data.shape[0]
    eye = np.eye(n)
    return ad.add(ad.mul(a, Tensor(1.0 - eye)), Tensor(eye))


def embed(x, params, cfg: ModelConfig) -> Tensor:
    """Per-ROI temporal embedding [n x l]: conv, flatten, project, activate, +PE."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.shape != (cfg.n_rois, cfg.series_len):
        raise ShapeError(
            f"input series must be [{cfg.n_rois} x {cfg.series_len}], got {x.data.shape}"
        )
    conv = ad.conv1d_same(x, params["embed.kernels"], params["embed.bias"])
    flat = ad.reshape(conv, (cfg.n_rois, cfg.conv_kernels * cfg.series_len))
    z = ad.relu(ad.matmul(flat, params["embed.w"]))
    if cfg.use_positional_encoding:
        z = ad.add(z, positional_encoding(cfg.n_rois, cfg.embed_len))
    return z


def _mlp2(x, params, prefix):
    """Two-layer perceptron with a ReLU hidden layer."""
    hidden = ad.relu(ad.add(ad.matmul(x, params[prefix + "w1"]), params[prefix + "b1"]))
    return ad.add(ad.matmul(hidden, params[prefix + "w2"]), params[prefix + "b2"])


def _multi_head_attention(x, params, prefix, heads, return_weights=False):
    """Self-attention over x [tokens x d_model]; d_model must split across heads."""
    d_model = x.data.shape[1]
    d = d_model // heads
    q = ad.matmul(x, params[prefix + "wq"])
    k = ad.matmul(x, params[prefix + "wk"])
    v = ad.matmul(x, params[prefix + "wv"])
    outs = []
    weights = []
    for head in range(heads):
        lo, hi = head * d, (head + 1) * d
        qh = ad.slice_axis(q, lo, hi, axis=1)
        kh = ad.slice_axis(k, lo, hi, axis=1)
        vh = ad.slice_axis(v, lo, hi, axis=1)
        attn = ad.softmax_rows(ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(d)))
        weights.append(attn)
        outs.append(ad.matmul(attn, vh))
    merged = ad.concat(outs, axis=1) if heads > 1 else outs[0]
    out = ad.matmul(merged, params[prefix + "wo"])
    if return_weights:
        return out, weights
    return out


def sfe_forward(h_in, params, cfg: ModelConfig, level, training=False, rng=None):
    """Spatial pathway: one transformer-encoder layer over the transposed features.

    The [n x l] input is transposed to [l x n] (tokens are embedding positions,
    the model width is the ROI axis), passed through pre-norm attention and
    feed-forward sublayers plus a final layer norm, and transposed back.
    """
    if not cfg.use_sfe:
        raise ConfigError("sfe_forward called with use_sfe disabled")
    if cfg.n_rois % cfg.attention_heads != 0:
        raise ConfigError(
            f"n_rois ({cfg.n_rois}) not divisible by attention_heads ({cfg.attention_heads})"
        )
    p = f"stfe{level}.sfe."
    x = ad.transpose(h_in)  # [l x n]
    attn_in = ad.layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.shift"])
    attn = _multi_head_attention(attn_in, params, p, cfg.attention_heads)
    attn = ad.dropout(attn, cfg.dropout_rate, training, rng)
    x = ad.add(x, attn)
    ffn_in = ad.layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.shift"])
    hidden = ad.relu(ad.add(ad.matmul(ffn_in, params[p + "ffn.w1"]), params[p + "ffn.b1"]))
    ffn = ad.add(ad.matmul(hidden, params[p + "ffn.w2"]), params[p + "ffn.b2"])
    ffn = ad.dropout(ffn, cfg.dropout_rate, training, rng)
    x = ad.add(x, ffn)
    x = ad.layer_norm(x, params[p + "ln_out.gain"], params[p + "ln_out.shift"])
    return ad.transpose(x)  # back to [n x l]


def tfe_forward(h_in, params, cfg: ModelConfig, level):
    """Temporal pathway: trend/seasonal decomposition, linear maps, MLP, norm.

    The moving average (replicate-padded, window = kernel_size) gives the
    trend; the residual is the seasonal part; trend + seasonal reconstructs
    the input exactly.
    """
    if not cfg.use_tfe:
        raise ConfigError("tfe_forward called with use_tfe disabled")
    p = f"stfe{level}.tfe."
    trend = ad.avgpool1d_same(h_in, cfg.kernel_size)
    seasonal = ad.sub(h_in, trend)
    mixed = ad.add(
        ad.relu(ad.matmul(trend, params[p + "wt"])),
        ad.relu(ad.matmul(seasonal, params[p + "ws"])),
    )
    out = _mlp2(mixed, params, p + "mlp.")
    return ad.layer_norm(out, params[p + "norm.gain"], params[p + "norm.shift"])


def stfe_forward(h_in, level, params, cfg: ModelConfig, training=False, rng=None):
    """One feature-extraction level: run the enabled pathways, fuse, MLP."""
    if not (cfg.use_sfe or cfg.use_tfe):
        raise ConfigError("stfe_forward needs at least one enabled pathway")
    if not 1 <= level <= cfg.levels:
        raise ConfigError(f"level must be in [1, {cfg.levels}], got {level}")
    parts = []
    if cfg.use_tfe:
        parts.append(tfe_forward(h_in, params, cfg, level))
    if cfg.use_sfe:
        parts.append(sfe_forward(h_in, params, cfg, level, training, rng))
    fused = parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])
    return _mlp2(fused, params, f"stfe{level}.fuse.")


def gcn_forward(adj, node_feats, params, cfg: ModelConfig, level):
    """Two graph-convolution layers with added self-connections.

    A_hat = A + I (no degree normalization by default) is shared by both
    layers; node features start from the Pearson matrix.
    """
    n = cfg.n_rois
    if adj.data.shape != (n, n):
        raise ShapeError(f"adjacency must be [{n} x {n}], got {adj.data.shape}")
    a_hat = ad.add(adj, Tensor(np.eye(n)))
    if cfg.normalize_adjacency:
        # Optional symmetric scaling; degrees use |A_hat| row sums and are
        # treated as constants, so this is an escape hatch rather than the
        # differentiable renormalization trick.
        deg = np.abs(a_hat.data).sum(axis=1)
        inv_sqrt = Tensor(np.diag(1.0 / np.sqrt(np.maximum(deg, 1e-12))))
        a_hat = ad.matmul(ad.matmul(inv_sqrt, a_hat), inv_sqrt)
    h = ad.relu(ad.matmul(ad.matmul(a_hat, node_feats), params[f"gcn{level}.w0"]))
    h = ad.relu(ad.matmul(ad.matmul(a_hat, h), params[f"gcn{level}.w1"]))
    return h


def readout(gcn_out, params, cfg: ModelConfig, level):
    """Summarize node encodings into one [1 x e] row per level."""
    if cfg.readout_mode == "mean":
        pooled = ad.mean_axis(gcn_out, axis=0, keepdims=True)
    else:
        pooled = ad.reshape(gcn_out, (1, gcn_out.data.shape[0] * gcn_out.data.shape[1]))
    return ad.relu(ad.add(ad.matmul(pooled, params[f"readout{level}.w"]), params[f"readout{level}.b"]))


def _check_finite(tensor, what):
    if not np.isfinite(tensor.data).all():
        raise ForwardError(f"non-finite values in {what}")


def predict(x, params, cfg: ModelConfig, training=False, rng=None):
    """Full forward pass for one scan [n x L].

    Returns (class probabilities [c], LevelOutputs). The generated graphs of
    all K levels are produced regardless of the encoded subset so losses and
    exports can see them.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    pearson = pearson_connectome(x)
    z = embed(x, params, cfg)
    _check_finite(z, "embedding")

    features = []
    adjacencies = []
    h = z
    for level in range(1, cfg.levels + 1):
        h = stfe_forward(h, level, params, cfg, training, rng)
        _check_finite(h, f"features at level {level}")
        adj = generate_adjacency(h)
        _check_finite(adj, f"adjacency at level {level}")
        features.append(h)
        adjacencies.append(adj)

    embeddings = []
    for k in cfg.gcn_levels:
        graph = pearson if k == 0 else adjacencies[k - 1]
        encoded = gcn_forward(graph, pearson, params, cfg, k)
        embeddings.append(readout(encoded, params, cfg, k))

    stacked = ad.concat(embeddings, axis=1)
    hidden = ad.relu(ad.add(ad.matmul(stacked, params["head.w1"]), params["head.b1"]))
    hidden = ad.dropout(hidden, cfg.dropout_rate, training, rng)
    logits = ad.add(ad.matmul(hidden, params["head.w2"]), params["head.b2"])
    probs = ad.reshape(ad.softmax_rows(logits), (cfg.classes,))
    _check_finite(probs, "class probabilities")

    outputs = LevelOutputs(
        features=features,
        adjacencies=adjacencies,
        pearson=pearson,
        embeddings=[ad.reshape(e, (cfg.readout_dim,)) for e in embeddings],
    )
    return probs, outputs


class MLCGCN:
    """Config + parameters bundle with save/load and a predict shortcut."""

    def __init__(self, config: ModelConfig, rng=None, params=None):
        self.config = config
        if params is None:
            params = init_params(config, rng if rng is not None else np.random.default_rng(0))
        self.params = params

    def predict(self, x, training=False, rng=None):
        return predict(x, self.params, self.config, training=training, rng=rng)

    def param_blocks(self):
        """Named parameter tensors in a stable order."""
        return sorted(self.params.items())

    def save(self, path):
        """Write a self-describing JSON checkpoint (canonical key order).

        Floats are serialized with full round-trip precision, so reloading
        reproduces bit-identical predictions and re-saving reproduces
        identical bytes.
        """
        doc = {
            "format": CHECKPOINT_FORMAT,
            "config": _config_to_jsonable(self.config),
            "params": {
                name: {"shape": list(p.data.shape), "data": p.data.ravel().tolist()}
                for name, p in self.params.items()
            },
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"unrecognized checkpoint format in {path}")
        cfg = _config_from_jsonable(doc["config"])
        params = {}
        for name, entry in doc["params"].items():
            arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
            params[name] = Tensor(arr, requires_grad=True)
        expected = set(init_params(cfg, np.random.default_rng(0)).keys())
        if set(params.keys()) != expected:
            raise ConfigError(f"checkpoint parameter names do not match the config in {path}")
        return cls(cfg, params=params)


def _config_to_jsonable(cfg: ModelConfig) -> dict:
    doc = asdict(cfg)
    if doc["level_subset"] is not None:
        doc["level_subset"] = list(doc["level_subset"])
    return doc


def _config_from_jsonable(doc: dict) -> ModelConfig:
    doc = dict(doc)
    if doc.get("level_subset") is not None:
        doc["level_subset"] = tuple(doc["level_subset"])
    return ModelConfig(**doc)
