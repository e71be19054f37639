"""Bidirectional self-attention encoder over encoded query sequences.

Implemented directly on numpy with handwritten reverse-mode gradients so
that parameter layout, determinism and checkpoint bytes are fully under
our control.  Heavy elementwise loops go through `dagquery.kernels`
(compiled core or numpy fallback); matrix products stay in BLAS.

Architecture: token+position embedding sum, then `num_layers` post-norm
blocks (self-attention -> residual -> layernorm -> feed-forward ->
residual -> layernorm), then an untied output projection onto the entity
id range, evaluated only at MASK slots.  Attention is fully bidirectional
in the default mode; "no_future" additionally forbids attending, within a
path, to tokens strictly closer to the path's tail than the query token.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from dagquery import kernels
from dagquery.checkpoint import CheckpointError, load_arrays, save_arrays
from dagquery.encoding import Batch, TokenSequence, aggregate_mask_distributions, collate, encode_query
from dagquery.kg import Vocabulary
from dagquery.querydag import QueryDag
from dagquery.seeding import substream

LN_EPS = 1e-5
MODES = ("bidirectional", "no_future")
CHECKPOINT_KIND = "encoder"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_entities: int
    num_layers: int = 2
    num_heads: int = 4
    hidden: int = 64
    ffn_hidden: int = 256
    max_positions: int = 64
    dropout: float = 0.1
    dtype: str = "float32"
    init_seed: int = 0

    def __post_init__(self) -> None:
        if self.hidden % self.num_heads != 0:
            raise ValueError(
                f"hidden ({self.hidden}) must be divisible by heads ({self.num_heads})"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if min(self.vocab_size, self.num_entities, self.num_layers, self.num_heads,
               self.hidden, self.ffn_hidden, self.max_positions) <= 0:
            raise ValueError("all size fields must be positive")
        if self.num_entities + 2 > self.vocab_size:
            raise ValueError("vocab_size too small for entity range plus specials")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.num_heads

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter name -> shape map (also fixes array order)."""
    d, f = config.hidden, config.ffn_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_positions, d),
    }
    for i in range(config.num_layers):
        prefix = f"layers.{i}"
        shapes[f"{prefix}.attn.wq"] = (d, d)
        shapes[f"{prefix}.attn.wk"] = (d, d)
        shapes[f"{prefix}.attn.wv"] = (d, d)
        shapes[f"{prefix}.attn.wo"] = (d, d)
        shapes[f"{prefix}.ln1.g"] = (d,)
        shapes[f"{prefix}.ln1.b"] = (d,)
        shapes[f"{prefix}.ffn.w1"] = (d, f)
        shapes[f"{prefix}.ffn.b1"] = (f,)
        shapes[f"{prefix}.ffn.w2"] = (f, d)
        shapes[f"{prefix}.ffn.b2"] = (d,)
        shapes[f"{prefix}.ln2.g"] = (d,)
        shapes[f"{prefix}.ln2.b"] = (d,)
    shapes["out.w"] = (d, config.num_entities)
    shapes["out.b"] = (config.num_entities,)
    return shapes


@dataclass
class TransformerParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]


def _truncated_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    draw = rng.normal(0.0, std, size=shape)
    return np.clip(draw, -2.0 * std, 2.0 * std).astype(dtype)


def init_params(config: ModelConfig, init_std: float = 0.02) -> TransformerParams:
    """Seeded init: truncated normal weights, unit gains, zero biases."""
    rng = substream(config.init_seed, "encoder-init")
    dtype = config.np_dtype
    arrays: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arrays[name] = np.ones(shape, dtype=dtype)
        elif leaf in ("b", "b1", "b2") or name == "out.b":
            arrays[name] = np.zeros(shape, dtype=dtype)
        else:
            arrays[name] = _truncated_normal(rng, shape, init_std, dtype)
    return TransformerParams(config=config, arrays=arrays)


def attention_mask(batch: Batch, mode: str) -> np.ndarray:
    """(B, T, T) boolean mask; True where attention is allowed.

    Padding is never attended.  In no_future mode a token may not attend,
    within its own path, to tokens with a smaller tail-first offset (those
    lie strictly between it and the tail, i.e. in its prediction future).
    Self-attention stays allowed everywhere, which also keeps softmax rows
    of padding tokens well defined.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    real = batch.pad_mask
    allowed = real[:, None, :] & real[:, :, None]
    if mode == "no_future":
        same_path = (batch.path_ids[:, :, None] == batch.path_ids[:, None, :])
        same_path &= batch.path_ids[:, :, None] >= 0
        future = batch.positions[:, None, :] < batch.positions[:, :, None]
        allowed &= ~(same_path & future)
    t = allowed.shape[-1]
    allowed |= np.eye(t, dtype=bool)[None]
    return allowed


@dataclass
class ForwardResult:
    logits: np.ndarray                 # (S, num_entities)
    attention: list[np.ndarray] | None  # per layer (B, H, T, T), pad rows zeroed
    cache: dict | None


def _split_heads(x: np.ndarray, h: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


class _Dropout:
    """Inverted dropout with seeded masks, recorded for backward."""

    def __init__(self, rate: float, rng: np.random.Generator | None, dtype) -> None:
        self.active = rate > 0.0 and rng is not None
        self.rate = rate
        self.rng = rng
        self.dtype = dtype
        self.masks: list[np.ndarray] = []

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if not self.active:
            self.masks.append(None)
            return x
        keep = (self.rng.random(x.shape) >= self.rate)
        mask = keep.astype(self.dtype) / self.dtype.type(1.0 - self.rate)
        self.masks.append(mask)
        return x * mask


def forward(
    params: TransformerParams,
    batch: Batch,
    mode: str = "bidirectional",
    train: bool = False,
    dropout_rng: np.random.Generator | None = None,
    record_attention: bool = False,
    want_cache: bool = False,
) -> ForwardResult:
    """Run the encoder; logits are produced only at the batch's MASK slots."""
    cfg = params.config
    tokens, positions = batch.tokens, batch.positions
    if tokens.size == 0:
        raise ValueError("empty batch")
    if int(tokens.max()) >= cfg.vocab_size or int(tokens.min()) < 0:
        raise ValueError("token id outside vocabulary")
    if int(positions.max()) >= cfg.max_positions or int(positions.min()) < 0:
        raise ValueError(
            f"positional id {int(positions.max())} >= max_positions {cfg.max_positions}"
        )
    if train and cfg.dropout > 0.0 and dropout_rng is None:
        raise ValueError("training with dropout requires dropout_rng")

    drop = _Dropout(cfg.dropout if train else 0.0, dropout_rng, cfg.np_dtype)
    allowed3 = attention_mask(batch, mode)
    b, t = tokens.shape
    h, dh = cfg.num_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(dh)
    allowed = np.broadcast_to(allowed3[:, None], (b, h, t, t))

    x = params["tok_emb"][tokens] + params["pos_emb"][positions]
    x = drop(x)

    cache: dict = {"x0": x, "allowed": allowed, "layers": []}
    attention: list[np.ndarray] | None = [] if record_attention else None
    real_rows = batch.pad_mask.astype(cfg.np_dtype)[:, None, :, None]

    for i in range(cfg.num_layers):
        p = f"layers.{i}"
        lc: dict = {"x_in": x}
        q = _split_heads(x @ params[f"{p}.attn.wq"], h)
        k = _split_heads(x @ params[f"{p}.attn.wk"], h)
        v = _split_heads(x @ params[f"{p}.attn.wv"], h)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        probs = kernels.masked_softmax(scores, allowed)
        if attention is not None:
            attention.append(probs * real_rows)
        probs_d = drop(probs)
        ctx = _merge_heads(probs_d @ v)
        attn_out = ctx @ params[f"{p}.attn.wo"]
        res1 = x + drop(attn_out)
        h1, xhat1, rstd1 = kernels.layer_norm(
            res1, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"], LN_EPS
        )
        f_pre = h1 @ params[f"{p}.ffn.w1"] + params[f"{p}.ffn.b1"]
        f_act = kernels.gelu(f_pre)
        ffn_out = f_act @ params[f"{p}.ffn.w2"] + params[f"{p}.ffn.b2"]
        res2 = h1 + drop(ffn_out)
        x, xhat2, rstd2 = kernels.layer_norm(
            res2, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"], LN_EPS
        )
        lc.update(
            q=q, k=k, v=v, probs=probs, probs_d=probs_d, ctx=ctx,
            xhat1=xhat1, rstd1=rstd1, h1=h1, f_pre=f_pre, f_act=f_act,
            xhat2=xhat2, rstd2=rstd2,
        )
        cache["layers"].append(lc)

    slots_b = batch.slots[:, 0]
    slots_t = batch.slots[:, 1]
    hidden_slots = x[slots_b, slots_t]
    logits = hidden_slots @ params["out.w"] + params["out.b"]
    cache.update(x_final=x, hidden_slots=hidden_slots, drop_masks=drop.masks)

    return ForwardResult(
        logits=logits,
        attention=attention,
        cache=cache if want_cache else None,
    )


def loss_masked_ce(logits: np.ndarray, labels: np.ndarray, num_entities: int) -> float:
    """Mean categorical cross-entropy over mask slots."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size != logits.shape[0]:
        raise ValueError("one label per mask slot required")
    if labels.size == 0:
        return 0.0
    if labels.min() < 0 or labels.max() >= num_entities:
        raise ValueError("gold label outside the entity range")
    losses, _ = kernels.softmax_xent(logits, labels)
    return float(np.mean(losses))


def zero_grads(params: TransformerParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.arrays.items()}


@dataclass
class LossResult:
    loss: float
    grads: dict[str, np.ndarray]
    num_slots: int

    @property
    def ok(self) -> bool:
        """False when the batch had nothing to predict."""
        return self.num_slots > 0


def loss_and_grads(
    params: TransformerParams,
    batch: Batch,
    labels: np.ndarray,
    mode: str = "bidirectional",
    train: bool = True,
    dropout_rng: np.random.Generator | None = None,
) -> LossResult:
    """Mean masked cross-entropy and exact gradients for every parameter."""
    cfg = params.config
    if batch.num_slots == 0:
        return LossResult(loss=0.0, grads=zero_grads(params), num_slots=0)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != batch.num_slots:
        raise ValueError("one label per mask slot required")
    if labels.min() < 0 or labels.max() >= cfg.num_entities:
        raise ValueError("gold label outside the entity range")

    fr = forward(
        params, batch, mode=mode, train=train,
        dropout_rng=dropout_rng, want_cache=True,
    )
    cache = fr.cache
    s = batch.num_slots
    losses, dlogits = kernels.softmax_xent(fr.logits, labels)
    loss = float(np.mean(losses))
    dlogits = dlogits / cfg.np_dtype.type(s)

    grads = {name: None for name in params.arrays}
    h, dh = cfg.num_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(dh)
    b, t = batch.tokens.shape
    d = cfg.hidden

    hidden_slots = cache["hidden_slots"]
    grads["out.w"] = hidden_slots.T @ dlogits
    grads["out.b"] = dlogits.sum(axis=0)
    dx = np.zeros_like(cache["x_final"])
    np.add.at(dx, (batch.slots[:, 0], batch.slots[:, 1]), dlogits @ params["out.w"].T)

    drop_masks = list(cache["drop_masks"])

    def drop_bwd(dy: np.ndarray) -> np.ndarray:
        mask = drop_masks.pop()
        return dy if mask is None else dy * mask

    for i in reversed(range(cfg.num_layers)):
        p = f"layers.{i}"
        lc = cache["layers"][i]
        x_in = lc["x_in"]

        dres2, dg2, db2 = kernels.layer_norm_grad(
            dx, lc["xhat2"], lc["rstd2"], params[f"{p}.ln2.g"]
        )
        grads[f"{p}.ln2.g"], grads[f"{p}.ln2.b"] = dg2, db2
        dffn_out = drop_bwd(dres2)
        f2d = lc["f_act"].reshape(-1, cfg.ffn_hidden)
        dffn2d = dffn_out.reshape(-1, d)
        grads[f"{p}.ffn.w2"] = f2d.T @ dffn2d
        grads[f"{p}.ffn.b2"] = dffn2d.sum(axis=0)
        df_act = dffn_out @ params[f"{p}.ffn.w2"].T
        df_pre = kernels.gelu_grad(lc["f_pre"], df_act)
        h2d = lc["h1"].reshape(-1, d)
        dfpre2d = df_pre.reshape(-1, cfg.ffn_hidden)
        grads[f"{p}.ffn.w1"] = h2d.T @ dfpre2d
        grads[f"{p}.ffn.b1"] = dfpre2d.sum(axis=0)
        dh1 = dres2 + df_pre @ params[f"{p}.ffn.w1"].T

        dres1, dg1, db1 = kernels.layer_norm_grad(
            dh1, lc["xhat1"], lc["rstd1"], params[f"{p}.ln1.g"]
        )
        grads[f"{p}.ln1.g"], grads[f"{p}.ln1.b"] = dg1, db1
        dattn_out = drop_bwd(dres1)
        ctx2d = lc["ctx"].reshape(-1, d)
        datt2d = dattn_out.reshape(-1, d)
        grads[f"{p}.attn.wo"] = ctx2d.T @ datt2d
        dctx = _split_heads(dattn_out @ params[f"{p}.attn.wo"].T, h)
        dprobs_d = dctx @ lc["v"].transpose(0, 1, 3, 2)
        dv = lc["probs_d"].transpose(0, 1, 3, 2) @ dctx
        dprobs = drop_bwd(dprobs_d)
        dscores = kernels.softmax_grad(lc["probs"], dprobs)
        dq = (dscores @ lc["k"]) * scale
        dk = (dscores.transpose(0, 1, 3, 2) @ lc["q"]) * scale

        x2d = x_in.reshape(-1, d)
        dq2d = _merge_heads(dq).reshape(-1, d)
        dk2d = _merge_heads(dk).reshape(-1, d)
        dv2d = _merge_heads(dv).reshape(-1, d)
        grads[f"{p}.attn.wq"] = x2d.T @ dq2d
        grads[f"{p}.attn.wk"] = x2d.T @ dk2d
        grads[f"{p}.attn.wv"] = x2d.T @ dv2d
        dx = (
            dres1
            + (dq2d @ params[f"{p}.attn.wq"].T).reshape(b, t, d)
            + (dk2d @ params[f"{p}.attn.wk"].T).reshape(b, t, d)
            + (dv2d @ params[f"{p}.attn.wv"].T).reshape(b, t, d)
        )

    dx0 = drop_bwd(dx)
    assert not drop_masks, "dropout mask stack out of balance"
    grads["tok_emb"] = np.zeros_like(params["tok_emb"])
    grads["pos_emb"] = np.zeros_like(params["pos_emb"])
    flat = dx0.reshape(-1, d)
    kernels.add_rows(grads["tok_emb"], batch.tokens.reshape(-1).astype(np.int64), flat)
    kernels.add_rows(grads["pos_emb"], batch.positions.reshape(-1).astype(np.int64), flat)

    return LossResult(loss=loss, grads=grads, num_slots=s)


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def init(cls, params: TransformerParams | dict) -> "AdamState":
        arrays = params.arrays if hasattr(params, "arrays") else params
        return cls(
            step=0,
            m={k: np.zeros_like(a) for k, a in arrays.items()},
            v={k: np.zeros_like(a) for k, a in arrays.items()},
        )


def adam_step(
    arrays: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place Adam update over every parameter array."""
    state.step += 1
    for name, param in arrays.items():
        kernels.adam_update(
            param, grads[name], state.m[name], state.v[name],
            state.step, lr, beta1, beta2, eps,
        )


def write_loss_csv(path: str | Path, rows: Sequence[tuple[int, str, float]]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "loss"])
        for epoch, split, value in rows:
            writer.writerow([epoch, split, f"{value:.6f}"])


@dataclass
class TrainResult:
    params: TransformerParams
    loss_rows: list[tuple[int, str, float]]
    epochs_run: int

    @property
    def final_train_loss(self) -> float:
        train_rows = [v for _, split, v in self.loss_rows if split == "train"]
        return train_rows[-1] if train_rows else float("nan")


def _encode_examples(
    examples, vocab: Vocabulary, max_len: int, seed: int, epoch: int | None
) -> list[TokenSequence]:
    """Encode every example; path order is shuffled per example per epoch."""
    seqs = []
    for idx, (dag, _) in enumerate(examples):
        rng = None if epoch is None else substream(seed, "path-order", epoch, idx)
        seqs.append(encode_query(dag, vocab, max_len=max_len, rng=rng))
    return seqs


def _labels_for(seqs: list[TokenSequence], examples) -> np.ndarray:
    labels = []
    for seq, (_, gold) in zip(seqs, examples):
        for _, var in seq.mask_slots:
            labels.append(gold[var])
    return np.asarray(labels, dtype=np.int64)


def train(
    params: TransformerParams,
    examples: Sequence[tuple[QueryDag, dict[int, int]]],
    vocab: Vocabulary,
    *,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
    max_len: int = 64,
    mode: str = "bidirectional",
    dev_examples: Sequence[tuple[QueryDag, dict[int, int]]] | None = None,
    out_dir: str | Path | None = None,
    stop_fn: Callable[[int, TransformerParams], bool] | None = None,
) -> TrainResult:
    """Adam training over shuffled mini-batches of encoded queries.

    Every epoch re-encodes with a fresh seeded path order per example,
    reshuffles the example order, checkpoints to out_dir/checkpoint.bin
    and appends to the in-memory loss curve (written to out_dir/loss.csv).
    """
    if not examples:
        raise ValueError("no training examples")
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch_size must be >= 1")
    state = AdamState.init(params)
    n = len(examples)
    loss_rows: list[tuple[int, str, float]] = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    dev_data = None
    if dev_examples:
        dev_seqs = _encode_examples(dev_examples, vocab, max_len, seed, epoch=None)
        dev_data = (dev_seqs, _labels_for(dev_seqs, dev_examples))

    epochs_run = 0
    for epoch in range(1, epochs + 1):
        seqs = _encode_examples(examples, vocab, max_len, seed, epoch)
        order = substream(seed, "shuffle", epoch).permutation(n)
        total, slots = 0.0, 0
        for start in range(0, n, batch_size):
            take = order[start : start + batch_size]
            batch_seqs = [seqs[i] for i in take]
            batch_examples = [examples[i] for i in take]
            batch = collate(batch_seqs)
            labels = _labels_for(batch_seqs, batch_examples)
            result = loss_and_grads(
                params, batch, labels, mode=mode, train=True,
                dropout_rng=substream(seed, "dropout", epoch, start),
            )
            if not result.ok:
                continue
            if not np.isfinite(result.loss):
                raise FloatingPointError(f"loss diverged at epoch {epoch}")
            adam_step(params.arrays, result.grads, state, lr)
            total += result.loss * result.num_slots
            slots += result.num_slots
        loss_rows.append((epoch, "train", total / max(slots, 1)))

        if dev_data is not None:
            dev_loss, dev_slots = 0.0, 0
            dev_seqs, _ = dev_data
            for start in range(0, len(dev_seqs), batch_size):
                chunk = dev_seqs[start : start + batch_size]
                chunk_examples = dev_examples[start : start + batch_size]
                fr = forward(params, collate(chunk), train=False)
                lbl = _labels_for(chunk, chunk_examples)
                dev_loss += loss_masked_ce(fr.logits, lbl, params.config.num_entities) * len(lbl)
                dev_slots += len(lbl)
            loss_rows.append((epoch, "dev", dev_loss / max(dev_slots, 1)))

        if out_path is not None:
            save_checkpoint(params, out_path / "checkpoint.bin")
            write_loss_csv(out_path / "loss.csv", loss_rows)
        epochs_run = epoch
        if stop_fn is not None and stop_fn(epoch, params):
            break

    for name, arr in params.arrays.items():
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values in parameter {name}")
    return TrainResult(params=params, loss_rows=loss_rows, epochs_run=epochs_run)


@dataclass
class QueryPrediction:
    distributions: dict[int, np.ndarray]
    rankings: dict[int, np.ndarray]
    sequence: TokenSequence
    attention: list[np.ndarray] | None


def rank_entities(scores: np.ndarray) -> np.ndarray:
    """Entity ids sorted by descending score; ties broken by ascending id."""
    ids = np.arange(scores.shape[0])
    return np.lexsort((ids, -scores))


def predict_query(
    params: TransformerParams,
    dag: QueryDag,
    vocab: Vocabulary,
    max_len: int = 64,
    mode: str = "bidirectional",
    record_attention: bool = False,
) -> QueryPrediction:
    """Aggregated per-variable entity distributions for one query.

    Paths are encoded in their fixed lexicographic order; duplicate mask
    slots of the same variable are averaged.
    """
    seq = encode_query(dag, vocab, max_len=max_len)
    batch = collate([seq])
    fr = forward(
        params, batch, mode=mode, train=False, record_attention=record_attention
    )
    probs = kernels.masked_softmax(fr.logits, np.ones(fr.logits.shape, dtype=bool))
    slot_dists = [
        (int(var), probs[i]) for i, var in enumerate(batch.slot_variables)
    ]
    distributions = aggregate_mask_distributions(slot_dists, expected_variables=dag.targets)
    rankings = {var: rank_entities(dist) for var, dist in distributions.items()}
    return QueryPrediction(
        distributions=distributions,
        rankings=rankings,
        sequence=seq,
        attention=fr.attention,
    )


def save_checkpoint(params: TransformerParams, path: str | Path) -> None:
    meta = {"kind": CHECKPOINT_KIND, "config": asdict(params.config)}
    ordered = {name: params.arrays[name] for name in param_shapes(params.config)}
    save_arrays(path, meta, ordered)


def load_checkpoint(path: str | Path) -> TransformerParams:
    meta, arrays = load_arrays(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(
            f"{path}: checkpoint kind {meta.get('kind')!r} is not {CHECKPOINT_KIND!r}"
        )
    try:
        config = ModelConfig(**meta["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config block: {exc}") from exc
    expected = param_shapes(config)
    if set(expected) != set(arrays):
        raise CheckpointError(f"{path}: parameter names do not match config")
    for name, shape in expected.items():
        if tuple(arrays[name].shape) != shape:
            raise CheckpointError(
                f"{path}: array {name} has shape {arrays[name].shape}, expected {shape}"
            )
        if arrays[name].dtype != config.np_dtype:
            raise CheckpointError(f"{path}: array {name} has wrong dtype")
    return TransformerParams(config=config, arrays=arrays)
