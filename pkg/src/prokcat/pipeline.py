"""Feature fusion, regression heads, training, prediction and checkpoints.

The fused vector is ``[h''_p | h''_c | h'_f | T_norm | T_inv_norm]`` of width
``3d + 2``.  Two heads sit on top: an MLP (the ``mlp`` head) or three scalar
projections feeding a KAN (the ``kan`` head).  In the default ``frozen`` KAN
mode an MLP model is trained first and its encoders are reused unchanged;
the pooled features are then scaled to [-1, 1] with training-set min/max so
that the KAN grid covers them.
"""
from __future__ import annotations

import base64
import copy
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from prokcat import attention as att
from prokcat import encoders as enc
from prokcat import tensor as T
from prokcat.data import KineticRecord, DatasetSplits
from prokcat.fingerprint import DEFAULT_BITS, ecfp
from prokcat.kan import BSplineGrid, KanNetwork, kan_forward
from prokcat.smiles import atom_feature_matrix, parse_smiles

CHECKPOINT_FORMAT = "prokcat-checkpoint"
CHECKPOINT_VERSION = 1
ABLATION_FLAGS = ("no_attention", "no_cnn", "no_ext_embedding", "no_enzyme", "no_substrate", "no_fingerprint")
KAN_INPUT_NAMES = ("h_p", "h_c", "h_f", "T", "T_inv")
EVAL_BATCH = 256


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class FeatureError(ValueError):
    pass


@dataclass
class ModelConfig:
    d: int = 32
    heads: int = 2
    head: str = "mlp"
    mlp_hidden: list[int] = field(default_factory=lambda: [64, 32])
    kan_widths: list[int] = field(default_factory=lambda: [5, 1])
    kan_mode: str = "frozen"
    kan_intervals: int = 5
    kan_order: int = 3
    kan_steps: int = 5
    token_width: int = enc.TOKEN_WIDTH
    ext_width: int = enc.DEFAULT_EMBED_WIDTH
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 300
    patience: int = 10
    seed: int = 0
    no_attention: bool = False
    no_cnn: bool = False
    no_ext_embedding: bool = False
    no_enzyme: bool = False
    no_substrate: bool = False
    no_fingerprint: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("d", "heads", "kan_intervals", "kan_order", "kan_steps", "token_width", "ext_width",
                     "batch_size", "epochs", "patience"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if not (isinstance(self.lr, (int, float)) and math.isfinite(self.lr) and self.lr > 0):
            raise ConfigError(f"lr must be positive, got {self.lr!r}")
        if self.head not in ("mlp", "kan"):
            raise ConfigError(f"head must be 'mlp' or 'kan', got {self.head!r}")
        if self.kan_mode not in ("frozen", "joint"):
            raise ConfigError(f"kan_mode must be 'frozen' or 'joint', got {self.kan_mode!r}")
        self.mlp_hidden = [int(w) for w in self.mlp_hidden]
        self.kan_widths = [int(w) for w in self.kan_widths]
        if any(w < 1 for w in self.mlp_hidden):
            raise ConfigError("mlp_hidden widths must be positive")
        if len(self.kan_widths) < 2 or any(w < 1 for w in self.kan_widths) or self.kan_widths[-1] != 1:
            raise ConfigError(f"kan_widths must be positive and end in 1, got {self.kan_widths}")
        if self.kan_widths[0] not in (5, self.fused_width):
            raise ConfigError(f"kan_widths must start with 5 (projected) or {self.fused_width} (3d+2)")
        for flag in ABLATION_FLAGS:
            if not isinstance(getattr(self, flag), bool):
                raise ConfigError(f"{flag} must be true or false")

    @property
    def fused_width(self) -> int:
        return 3 * self.d + 2

    @property
    def kan_projected(self) -> bool:
        return self.kan_widths[0] == 5

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def replace(self, **changes) -> "ModelConfig":
        d = self.to_dict()
        d.update(changes)
        return ModelConfig.from_dict(d)


# ---------------------------------------------------------------- featurisation

@dataclass
class Example:
    id: str
    tokens: np.ndarray
    ext: np.ndarray | None
    atoms: np.ndarray
    adjacency: np.ndarray
    fingerprint: np.ndarray
    temperature_kelvin: float
    target: float


@lru_cache(maxsize=4096)
def substrate_features(smiles: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(atom features, adjacency, fingerprint bits)`` for one SMILES, cached."""
    graph = parse_smiles(smiles)
    fp = ecfp(graph, n_bits=DEFAULT_BITS).bits.astype(np.float64)
    return atom_feature_matrix(graph), graph.adjacency_matrix(), fp


def featurize(record: KineticRecord, embeddings: dict[str, np.ndarray] | None = None) -> Example:
    try:
        tokens = enc.ProteinSequence(record.sequence).tokens()
        atoms, adj, fp = substrate_features(record.smiles)
        ext = None
        if embeddings is not None:
            ext = enc.lookup_embedding(embeddings, record.sequence)
            if ext is None:
                raise FeatureError(f"no residue embedding for sequence key {enc.sequence_key(record.sequence)}")
    except (ValueError, FeatureError) as exc:
        raise FeatureError(f"record {record.id}: {exc}") from None
    if not record.temperature_kelvin > 0:
        raise FeatureError(f"record {record.id}: nonpositive absolute temperature")
    target = math.log10(record.kcat_per_second) if record.kcat_per_second > 0 else math.nan
    return Example(record.id, tokens, ext, atoms, adj, fp, record.temperature_kelvin, target)


@dataclass
class Batch:
    tokens: np.ndarray
    p_mask: np.ndarray
    ext: np.ndarray | None
    atoms: np.ndarray
    adjacency: np.ndarray
    c_mask: np.ndarray
    fingerprint: np.ndarray
    temperature_kelvin: np.ndarray
    target: np.ndarray

    def __len__(self) -> int:
        return len(self.target)


def collate(examples: Sequence[Example], ext_width: int) -> Batch:
    """Pad to the longest sequence / molecule in the batch."""
    B = len(examples)
    L = max(len(e.tokens) for e in examples)
    N = max(len(e.atoms) for e in examples)
    tokens = np.zeros((B, L), dtype=np.intp)
    p_mask = np.zeros((B, L), dtype=bool)
    atoms = np.zeros((B, N, examples[0].atoms.shape[1]))
    adj = np.zeros((B, N, N), dtype=bool)
    c_mask = np.zeros((B, N), dtype=bool)
    have_ext = any(e.ext is not None for e in examples)
    ext = np.zeros((B, L, ext_width)) if have_ext else None
    for b, e in enumerate(examples):
        n, m = len(e.tokens), len(e.atoms)
        tokens[b, :n] = e.tokens
        p_mask[b, :n] = True
        atoms[b, :m] = e.atoms
        adj[b, :m, :m] = e.adjacency
        c_mask[b, :m] = True
        if e.ext is not None:
            if e.ext.shape[1] != ext_width:
                raise FeatureError(f"record {e.id}: embedding width {e.ext.shape[1]} != {ext_width}")
            ext[b, :n] = e.ext
    return Batch(tokens, p_mask, ext, atoms, adj, c_mask,
                 np.stack([e.fingerprint for e in examples]),
                 np.array([e.temperature_kelvin for e in examples]),
                 np.array([e.target for e in examples]))


# ---------------------------------------------------------------- normalisation

@dataclass
class NormStats:
    t_min: float
    t_max: float
    t_inv_min: float
    t_inv_max: float
    # per-feature min/max of the pooled 3d block, used by frozen heads
    feat_min: list[float] | None = None
    feat_max: list[float] | None = None
    # observed range of every KAN input over the training set
    kan_domains: list[list[float]] | None = None

    @classmethod
    def from_temperatures(cls, temps_kelvin) -> "NormStats":
        t = np.asarray(temps_kelvin, dtype=np.float64)
        if t.size == 0 or np.any(t <= 0):
            raise FeatureError("temperature statistics need positive kelvin values")
        inv = 1.0 / t
        return cls(float(t.min()), float(t.max()), float(inv.min()), float(inv.max()))


def _minmax(x, lo, hi):
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, 2.0 * (x - lo) / safe - 1.0, 0.0)


def temperature_features(t_kelvin, stats: NormStats):
    """``(T_norm, T_inv_norm, out_of_range)``; inputs outside the training range are clamped."""
    t = np.asarray(t_kelvin, dtype=np.float64)
    if np.any(~(t > 0)):
        raise FeatureError("temperature must be positive in kelvin")
    flag = (t < stats.t_min) | (t > stats.t_max)
    tc = np.clip(t, stats.t_min, stats.t_max)
    t_norm = _minmax(tc, stats.t_min, stats.t_max)
    t_inv = np.clip(1.0 / tc, stats.t_inv_min, stats.t_inv_max)
    t_inv_norm = _minmax(t_inv, stats.t_inv_min, stats.t_inv_max)
    if t.ndim == 0:
        return float(t_norm), float(t_inv_norm), bool(flag)
    return t_norm, t_inv_norm, flag


def normalize_pooled(pooled: np.ndarray, stats: NormStats) -> np.ndarray:
    return _minmax(pooled, np.asarray(stats.feat_min), np.asarray(stats.feat_max))


# ---------------------------------------------------------------- forward pass

def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, T.Tensor]:
    params = enc.init_encoder_params(rng, config.d, config.ext_width, config.token_width)
    params.update(att.init_attention_params(rng, config.d, config.heads))
    if config.head == "mlp":
        params.update(init_mlp_head(rng, config.fused_width, config.mlp_hidden))
    return params


def init_mlp_head(rng, in_width: int, hidden: Sequence[int]) -> dict[str, T.Tensor]:
    widths = [in_width, *hidden, 1]
    out = {}
    for l, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        out[f"head.w{l}"] = T.parameter(T.glorot(rng, (a, b)))
        out[f"head.b{l}"] = T.parameter(np.zeros(b))
    return out


def init_projections(rng, d: int, scale: float | None = None) -> dict[str, T.Tensor]:
    """Three d -> 1 maps; uniform(+-1/d) keeps projections of [-1,1] features inside [-1,1]."""
    s = 1.0 / d if scale is None else scale
    out = {}
    for part in ("p", "c", "f"):
        out[f"proj.{part}_w"] = T.parameter(rng.uniform(-s, s, (d, 1)))
        out[f"proj.{part}_b"] = T.parameter(np.zeros(1))
    return out


def make_kan(config: ModelConfig, rng) -> KanNetwork:
    grid = BSplineGrid(-1.0, 1.0, config.kan_intervals, config.kan_order)
    return KanNetwork(config.kan_widths, grid, rng)


def encode_pooled(params: dict[str, T.Tensor], batch: Batch, config: ModelConfig) -> T.Tensor:
    """Pooled ``[h''_p | h''_c | h'_f]`` of shape ``(B, 3d)``."""
    B = len(batch)
    d = config.d
    zeros = lambda n: T.as_tensor(np.zeros((B, n, d)))  # noqa: E731
    if config.no_enzyme:
        H_p = zeros(batch.tokens.shape[1])
    else:
        ext = None if config.no_ext_embedding else batch.ext
        H_p = enc.encode_protein(batch.tokens, ext, params, batch.p_mask, no_cnn=config.no_cnn)
    if config.no_substrate:
        H_c = zeros(batch.atoms.shape[1])
    else:
        H_c = enc.encode_substrate(batch.atoms, batch.adjacency, params, batch.c_mask)
    h_p, h_c = att.multi_head_interaction(H_p, H_c, params, batch.p_mask, batch.c_mask,
                                          disabled=config.no_attention)
    zero_vec = T.as_tensor(np.zeros((B, d)))
    pp = zero_vec if config.no_enzyme else T.mean_pool(h_p, axis=1, mask=batch.p_mask)
    pc = zero_vec if config.no_substrate else T.mean_pool(h_c, axis=1, mask=batch.c_mask)
    pf = zero_vec if config.no_fingerprint else enc.align_fingerprint(batch.fingerprint, params)
    return T.concat([pp, pc, pf], axis=-1)


def fuse(pooled: T.Tensor, t_norm, t_inv_norm) -> T.Tensor:
    t = np.stack([np.atleast_1d(t_norm), np.atleast_1d(t_inv_norm)], axis=-1)
    return T.concat([pooled, T.as_tensor(t)], axis=-1)


def predict_mlp(fused: T.Tensor, params: dict[str, T.Tensor]) -> T.Tensor:
    n = sum(1 for k in params if k.startswith("head.w"))
    h = fused
    for l in range(n):
        h = T.linear(h, params[f"head.w{l}"], params[f"head.b{l}"])
        if l < n - 1:
            h = T.relu(h)
    return T.reshape(h, h.shape[:-1])


def scalar_project(pooled: T.Tensor, params: dict[str, T.Tensor], d: int) -> T.Tensor:
    """``(B, 3d) -> (B, 3)``: one independent linear map per feature block."""
    parts = []
    for k, part in enumerate(("p", "c", "f")):
        block = _slice_cols(pooled, k * d, (k + 1) * d)
        parts.append(T.linear(block, params[f"proj.{part}_w"], params[f"proj.{part}_b"]))
    return T.concat(parts, axis=-1)


def _slice_cols(x: T.Tensor, lo: int, hi: int) -> T.Tensor:
    """Column slice as a matmul with a selector so it stays on the tape."""
    sel = np.zeros((x.shape[-1], hi - lo))
    sel[np.arange(lo, hi), np.arange(hi - lo)] = 1.0
    return T.matmul(x, T.as_tensor(sel))


def kan_inputs(pooled: T.Tensor, t_norm, t_inv_norm, params, config: ModelConfig) -> T.Tensor:
    if config.kan_projected:
        proj = scalar_project(pooled, params, config.d)
        return fuse(proj, t_norm, t_inv_norm)
    return fuse(pooled, t_norm, t_inv_norm)


def predict_kan(inputs: T.Tensor, net: KanNetwork) -> T.Tensor:
    out = kan_forward(net, inputs)
    return T.reshape(out, out.shape[:-1])


def mse_loss(pred, target) -> T.Tensor:
    pred = T.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or target.size == 0:
        raise T.ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    return T.mean(T.square(T.sub(pred, target)))


# ---------------------------------------------------------------- metrics

@dataclass
class Metrics:
    rmse: float
    pcc: float | None
    mae: float
    r2: float | None
    n: int

    def as_dict(self) -> dict:
        return {"rmse": self.rmse, "pcc": self.pcc, "mae": self.mae, "r2": self.r2, "n": self.n}


def metrics(pred, target) -> Metrics:
    """RMSE, Pearson r, MAE and R^2; ``pcc``/``r2`` are None when the target is constant."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    if p.shape != t.shape or p.size < 2:
        raise ValueError("metrics need two equal-length vectors of length >= 2")
    resid = p - t
    rmse = float(np.sqrt(np.mean(resid ** 2)))
    mae = float(np.mean(np.abs(resid)))
    tc = t - t.mean()
    ss_tot = float(tc @ tc)
    if ss_tot == 0.0:
        return Metrics(rmse, None, mae, None, p.size)
    r2 = 1.0 - float(resid @ resid) / ss_tot
    pc = p - p.mean()
    ss_p = float(pc @ pc)
    pcc = float(pc @ tc) / math.sqrt(ss_p * ss_tot) if ss_p > 0 else None
    return Metrics(rmse, pcc, mae, r2, p.size)


# ---------------------------------------------------------------- model container

@dataclass
class TrainedModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    stats: NormStats
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def frozen(self) -> bool:
        return self.stats.feat_min is not None

    def tensors(self) -> dict[str, T.Tensor]:
        return {k: T.Tensor(v) for k, v in self.params.items()}

    def kan_network(self) -> KanNetwork:
        if self.config.head != "kan":
            raise CheckpointError("model does not have a KAN head")
        net = make_kan(self.config, np.random.default_rng(0))
        net.load_parameters({k: T.Tensor(v) for k, v in self.params.items() if k.startswith("kan")})
        return net

    def param_count(self, prefix: str = "") -> int:
        return int(sum(v.size for k, v in self.params.items() if k.startswith(prefix)))


def head_forward(model_cfg: ModelConfig, params: dict[str, T.Tensor], pooled: T.Tensor, t_norm, t_inv_norm,
                 net: KanNetwork | None = None) -> T.Tensor:
    if model_cfg.head == "mlp":
        return predict_mlp(fuse(pooled, t_norm, t_inv_norm), params)
    return predict_kan(kan_inputs(pooled, t_norm, t_inv_norm, params, model_cfg), net)


def _forward_batch(model: TrainedModel, tensors, batch: Batch, net=None):
    cfg = model.config
    t_norm, t_inv_norm, flag = temperature_features(batch.temperature_kelvin, model.stats)
    pooled = encode_pooled(tensors, batch, cfg)
    if model.frozen:
        pooled = T.as_tensor(normalize_pooled(pooled.data, model.stats))
    return head_forward(cfg, tensors, pooled, t_norm, t_inv_norm, net), flag


def predict_examples(model: TrainedModel, examples: Sequence[Example], batch_size: int = EVAL_BATCH):
    if not examples:
        return np.zeros(0), np.zeros(0, dtype=bool)
    tensors = model.tensors()
    net = model.kan_network() if model.config.head == "kan" else None
    preds, flags = [], []
    with T.no_grad():
        for s in range(0, len(examples), batch_size):
            batch = collate(examples[s:s + batch_size], model.config.ext_width)
            out, flag = _forward_batch(model, tensors, batch, net)
            preds.append(out.data)
            flags.append(flag)
    return np.concatenate(preds), np.concatenate(flags)


def predict_batch(model: TrainedModel, records: Sequence[KineticRecord], embeddings=None,
                  batch_size: int = EVAL_BATCH):
    """Predicted log10 kcat and out-of-range flags for many records."""
    return predict_examples(model, [featurize(r, embeddings) for r in records], batch_size)


def predict(model: TrainedModel, record: KineticRecord, embeddings=None) -> tuple[float, bool]:
    pred, flag = predict_batch(model, [record], embeddings, batch_size=1)
    return float(pred[0]), bool(flag[0])


def evaluate(model: TrainedModel, records, embeddings=None) -> Metrics:
    examples = [featurize(r, embeddings) for r in records]
    pred, _ = predict_examples(model, examples)
    return metrics(pred, [e.target for e in examples])


# ---------------------------------------------------------------- training

def _fit(params: dict[str, T.Tensor], n_train: int, batch_loss: Callable, val_rmse: Callable,
         config: ModelConfig, log: Callable | None = None):
    """Mini-batch Adam with early stopping.  Returns (best params, history, best epoch)."""
    names = sorted(params)
    plist = [params[k] for k in names]
    state = T.AdamState.zeros_like(plist)
    rng = np.random.default_rng([config.seed, 1])
    best, best_rmse, best_epoch, wait = None, math.inf, 0, 0
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n_train)
        sq, count = 0.0, 0
        for bi, s in enumerate(range(0, n_train, config.batch_size)):
            idx = order[s:s + config.batch_size]
            T.zero_grads(plist)
            loss = batch_loss(idx)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {bi} "
                                    f"(first record index {int(idx[0])})")
            T.backward(loss)
            T.adam_step(plist, [p.grad for p in plist], state, lr=config.lr)
            sq += value * len(idx)
            count += len(idx)
        v = float(val_rmse())
        history.append({"epoch": epoch, "train_rmse": math.sqrt(sq / count), "val_rmse": v})
        if log:
            log(f"epoch {epoch:4d}  train_rmse {history[-1]['train_rmse']:.4f}  val_rmse {v:.4f}")
        if v < best_rmse:
            best_rmse, best_epoch, wait = v, epoch, 0
            best = {k: p.data.copy() for k, p in params.items()}
        else:
            wait += 1
            if wait >= config.patience:
                break
    if best is None:
        raise TrainingError("validation RMSE was never finite")
    return best, history, best_epoch


def _check_splits(splits: DatasetSplits) -> None:
    if not splits.train or not splits.validation:
        raise TrainingError("training needs nonempty train and validation splits")


def train(splits: DatasetSplits, config: ModelConfig, embeddings=None, log=None,
          base: TrainedModel | None = None) -> TrainedModel:
    """Train a model; a frozen KAN head reuses ``base`` (trained on the fly when omitted)."""
    _check_splits(splits)
    if config.head == "kan" and config.kan_mode == "frozen":
        if base is None:
            base = train(splits, config.replace(head="mlp"), embeddings, log)
        return train_frozen_head(base, splits, config, embeddings, log)
    train_ex = [featurize(r, embeddings) for r in splits.train]
    val_ex = [featurize(r, embeddings) for r in splits.validation]
    stats = NormStats.from_temperatures([e.temperature_kelvin for e in train_ex])
    rng = np.random.default_rng(config.seed)
    params = init_params(config, rng)
    net = None
    if config.head == "kan":
        if config.kan_projected:
            params.update(init_projections(rng, config.d))
        net = make_kan(config, rng)
        params.update(net.parameters())
    model = TrainedModel(config, {}, stats)

    def batch_loss(idx):
        batch = collate([train_ex[i] for i in idx], config.ext_width)
        pred, _ = _forward_batch(model, params, batch, net)
        return mse_loss(pred, batch.target)

    def val_rmse():
        model.params = {k: p.data for k, p in params.items()}
        pred, _ = predict_examples(model, val_ex)
        return math.sqrt(float(np.mean((pred - np.array([e.target for e in val_ex])) ** 2)))

    best, history, best_epoch = _fit(params, len(train_ex), batch_loss, val_rmse, config, log)
    model.params = best
    model.history = history
    model.best_epoch = best_epoch
    if config.head == "kan":
        model.stats.kan_domains = _kan_domains(model, train_ex)
    return model


def pooled_features(model: TrainedModel, examples: Sequence[Example]) -> np.ndarray:
    """Raw pooled ``(n, 3d)`` features under the encoders of ``model``."""
    tensors = model.tensors()
    out = []
    with T.no_grad():
        for s in range(0, len(examples), EVAL_BATCH):
            batch = collate(examples[s:s + EVAL_BATCH], model.config.ext_width)
            out.append(encode_pooled(tensors, batch, model.config).data)
    return np.concatenate(out) if out else np.zeros((0, 3 * model.config.d))


def train_frozen_head(base: TrainedModel, splits: DatasetSplits, config: ModelConfig, embeddings=None,
                      log=None) -> TrainedModel:
    """Train only a head (KAN or MLP) on fixed, min-max scaled features from ``base``'s encoders."""
    _check_splits(splits)
    if base.config.d != config.d:
        raise ConfigError("frozen head must share the base model's d")
    train_ex = [featurize(r, embeddings) for r in splits.train]
    val_ex = [featurize(r, embeddings) for r in splits.validation]
    # encoder settings (including ablations) come from the base model
    enc_cfg = base.config
    head_cfg = enc_cfg.replace(**{k: getattr(config, k) for k in (
        "head", "mlp_hidden", "kan_widths", "kan_mode", "kan_intervals", "kan_order", "kan_steps",
        "lr", "batch_size", "epochs", "patience", "seed")})
    raw_tr = pooled_features(base, train_ex)
    raw_va = pooled_features(base, val_ex)
    stats = copy.deepcopy(base.stats)
    stats.feat_min = raw_tr.min(axis=0).tolist()
    stats.feat_max = raw_tr.max(axis=0).tolist()
    x_tr, x_va = normalize_pooled(raw_tr, stats), normalize_pooled(raw_va, stats)
    tn_tr, tin_tr, _ = temperature_features(np.array([e.temperature_kelvin for e in train_ex]), stats)
    tn_va, tin_va, _ = temperature_features(np.array([e.temperature_kelvin for e in val_ex]), stats)
    y_tr = np.array([e.target for e in train_ex])
    y_va = np.array([e.target for e in val_ex])

    rng = np.random.default_rng(head_cfg.seed)
    net = None
    if head_cfg.head == "kan":
        params = init_projections(rng, head_cfg.d) if head_cfg.kan_projected else {}
        net = make_kan(head_cfg, rng)
        params.update(net.parameters())
    else:
        params = init_mlp_head(rng, head_cfg.fused_width, head_cfg.mlp_hidden)

    def batch_loss(idx):
        pred = head_forward(head_cfg, params, T.as_tensor(x_tr[idx]), tn_tr[idx], tin_tr[idx], net)
        return mse_loss(pred, y_tr[idx])

    def val_rmse():
        with T.no_grad():
            pred = head_forward(head_cfg, params, T.as_tensor(x_va), tn_va, tin_va, net).data
        return math.sqrt(float(np.mean((pred - y_va) ** 2)))

    best, history, best_epoch = _fit(params, len(train_ex), batch_loss, val_rmse, head_cfg, log)
    merged = {k: v for k, v in base.params.items() if not k.startswith("head.")}
    merged.update(best)
    model = TrainedModel(head_cfg, merged, stats, history, best_epoch)
    if head_cfg.head == "kan":
        model.stats.kan_domains = _kan_domains(model, train_ex)
    return model


def kan_input_matrix(model: TrainedModel, examples: Sequence[Example]) -> np.ndarray:
    """The ``(n, n_0)`` matrix actually fed to the KAN for ``examples``."""
    tensors = model.tensors()
    pooled = pooled_features(model, examples)
    if model.frozen:
        pooled = normalize_pooled(pooled, model.stats)
    t_norm, t_inv_norm, _ = temperature_features(np.array([e.temperature_kelvin for e in examples]), model.stats)
    with T.no_grad():
        return kan_inputs(T.as_tensor(pooled), t_norm, t_inv_norm, tensors, model.config).data


def _kan_domains(model: TrainedModel, examples) -> list[list[float]]:
    X = kan_input_matrix(model, examples)
    return [[float(X[:, i].min()), float(X[:, i].max())] for i in range(X.shape[1])]


def kan_input_names(config: ModelConfig) -> list[str]:
    if config.kan_projected:
        return list(KAN_INPUT_NAMES)
    d = config.d
    return ([f"h_p{i}" for i in range(d)] + [f"h_c{i}" for i in range(d)] + [f"h_f{i}" for i in range(d)]
            + ["T", "T_inv"])


def parity_mlp_config(config: ModelConfig) -> ModelConfig:
    """The linear ``3d+2 -> 1`` head used as the size-matched MLP counterpart of a [5, 1] KAN."""
    return config.replace(head="mlp", mlp_hidden=[])


def _train_one(args):
    splits, config, embeddings = args
    return train(splits, config, embeddings)


def thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("PROKCAT_THREADS", "1")))
    except ValueError:
        return 1


def train_many(splits: DatasetSplits, configs: Sequence[ModelConfig], embeddings=None,
               workers: int | None = None, log=None) -> list[TrainedModel]:
    """Independent runs, in parallel processes when ``workers`` (default PROKCAT_THREADS) > 1."""
    workers = thread_cap() if workers is None else workers
    jobs = [(splits, c, embeddings) for c in configs]
    if workers <= 1 or len(jobs) <= 1:
        out = []
        for c in configs:
            if log:
                log(f"run seed={c.seed} d={c.d}")
            out.append(train(splits, c, embeddings, log))
        return out
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_train_one, jobs))


# ---------------------------------------------------------------- checkpoints

def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"], validate=True)
    shape = tuple(int(s) for s in d["shape"])
    arr = np.frombuffer(raw, dtype="<f8")
    if arr.size != int(np.prod(shape)):
        raise CheckpointError(f"array payload has {arr.size} values, shape says {shape}")
    return arr.reshape(shape).astype(np.float64)


def save_checkpoint(model: TrainedModel, path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "stats": asdict(model.stats),
        "history": model.history,
        "best_epoch": model.best_epoch,
        "params": {k: _encode_array(v) for k, v in sorted(model.params.items())},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> TrainedModel:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc.msg})") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    try:
        config = ModelConfig.from_dict(doc["config"])
        stats = NormStats(**doc["stats"])
        params = {k: _decode_array(v) for k, v in doc["params"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    expected = set(init_shapes(config, frozen=stats.feat_min is not None))
    if set(params) != expected:
        missing, extra = sorted(expected - set(params)), sorted(set(params) - expected)
        raise CheckpointError(f"{path}: parameter set mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
    for k, shape in init_shapes(config, stats.feat_min is not None).items():
        if params[k].shape != shape:
            raise CheckpointError(f"{path}: parameter {k} has shape {params[k].shape}, expected {shape}")
    return TrainedModel(config, params, stats, list(doc.get("history", [])), int(doc.get("best_epoch", 0)))


def init_shapes(config: ModelConfig, frozen: bool = False) -> dict[str, tuple]:
    """Names and shapes of every parameter a model with ``config`` carries."""
    rng = np.random.default_rng(0)
    params = init_params(config, rng)
    if config.head == "kan":
        if config.kan_projected:
            params.update(init_projections(rng, config.d))
        params.update(make_kan(config, rng).parameters())
    return {k: v.shape for k, v in params.items()}
