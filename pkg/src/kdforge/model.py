"""Bidirectional transformer encoder with MLM and task heads.

The encoder follows the post-layer-norm architecture: summed token,
position, and type embeddings pass through a layer norm and dropout, then
``num_hidden_layers`` blocks of multi-head self-attention and a GELU
feed-forward network, each with residual connection and layer norm.  The
masked-language-model head applies a dense transform with GELU and layer
norm, then decodes with the transposed token-embedding matrix (weight
tying) plus a free bias.  The classification/regression head is a single
linear map on the CLS-position hidden state; there is no pooler layer.

Backward passes are written out block by block in reverse, using the
cached op instances from the forward pass; parameter gradients accumulate
into a flat ``{name: array}`` dict keyed by the same names used in
checkpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .rng import RngCursor, RngState
from .tensor import (
    DropoutOp,
    GeluOp,
    LayerNormOp,
    MatmulOp,
    SoftmaxOp,
)

MASK_BIAS = -1e9  # additive stand-in for -inf on padded key positions


@dataclass
class ModelConfig:
    hidden_size: int = 384
    num_hidden_layers: int = 6
    num_attention_heads: int = 6
    intermediate_size: int = 3072
    vocab_size: int = 30522
    max_position_embeddings: int = 512
    type_vocab_size: int = 2
    hidden_dropout: float = 0.1
    attention_dropout: float = 0.1
    layer_norm_eps: float = 1e-12
    initializer_range: float = 0.02

    def __post_init__(self):
        extents = (
            self.hidden_size,
            self.num_attention_heads,
            self.intermediate_size,
            self.vocab_size,
            self.max_position_embeddings,
            self.type_vocab_size,
        )
        if any(e <= 0 for e in extents):
            raise ConfigError("all model extents must be positive")
        if self.num_hidden_layers < 0:
            raise ConfigError("num_hidden_layers must be >= 0")
        if self.hidden_size % self.num_attention_heads != 0:
            raise ConfigError(
                f"hidden size {self.hidden_size} not divisible by "
                f"{self.num_attention_heads} attention heads"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_attention_heads

    def to_dict(self) -> dict:
        return {
            "hidden_size": self.hidden_size,
            "num_hidden_layers": self.num_hidden_layers,
            "num_attention_heads": self.num_attention_heads,
            "intermediate_size": self.intermediate_size,
            "vocab_size": self.vocab_size,
            "max_position_embeddings": self.max_position_embeddings,
            "type_vocab_size": self.type_vocab_size,
            "hidden_dropout": self.hidden_dropout,
            "attention_dropout": self.attention_dropout,
            "layer_norm_eps": self.layer_norm_eps,
            "initializer_range": self.initializer_range,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class TaskHeadSpec:
    kind: str  # "classification" | "regression"
    num_labels: int

    def __post_init__(self):
        if self.kind not in ("classification", "regression"):
            raise ConfigError(f"unknown head kind {self.kind!r}")
        if self.kind == "regression" and self.num_labels != 1:
            raise ConfigError("regression heads have exactly one output")
        if self.num_labels < 1:
            raise ConfigError("num_labels must be >= 1")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "num_labels": self.num_labels}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskHeadSpec":
        return cls(**d)


class EncoderParams:
    """Named parameter collection; names are the stable checkpoint keys."""

    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "EncoderParams":
        return EncoderParams({k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams({k: v.astype(dtype) for k, v in self.tensors.items()})


def parameter_shapes(
    config: ModelConfig,
    mlm_head: bool = True,
    task_head: TaskHeadSpec | None = None,
) -> dict[str, tuple[int, ...]]:
    """Every parameter name with its shape, in canonical order.

    The MLM decoder weight is the token-embedding matrix (tied) and so
    never appears as a separate entry.
    """
    h = config.hidden_size
    shapes: dict[str, tuple[int, ...]] = {
        "embeddings.token.weight": (config.vocab_size, h),
        "embeddings.position.weight": (config.max_position_embeddings, h),
        "embeddings.type.weight": (config.type_vocab_size, h),
        "embeddings.ln.gain": (h,),
        "embeddings.ln.shift": (h,),
    }
    for i in range(config.num_hidden_layers):
        p = f"layer.{i}"
        for proj in ("q", "k", "v", "out"):
            shapes[f"{p}.attn.{proj}.weight"] = (h, h)
            shapes[f"{p}.attn.{proj}.bias"] = (h,)
        shapes[f"{p}.attn_ln.gain"] = (h,)
        shapes[f"{p}.attn_ln.shift"] = (h,)
        shapes[f"{p}.ffn.inner.weight"] = (h, config.intermediate_size)
        shapes[f"{p}.ffn.inner.bias"] = (config.intermediate_size,)
        shapes[f"{p}.ffn.outer.weight"] = (config.intermediate_size, h)
        shapes[f"{p}.ffn.outer.bias"] = (h,)
        shapes[f"{p}.ffn_ln.gain"] = (h,)
        shapes[f"{p}.ffn_ln.shift"] = (h,)
    if mlm_head:
        shapes["mlm.transform.weight"] = (h, h)
        shapes["mlm.transform.bias"] = (h,)
        shapes["mlm.ln.gain"] = (h,)
        shapes["mlm.ln.shift"] = (h,)
        shapes["mlm.decoder.bias"] = (config.vocab_size,)
    if task_head is not None:
        shapes["task.head.weight"] = (h, task_head.num_labels)
        shapes["task.head.bias"] = (task_head.num_labels,)
    return shapes


def init_params(
    config: ModelConfig,
    rng: RngState,
    mlm_head: bool = True,
    task_head: TaskHeadSpec | None = None,
    dtype=np.float32,
) -> EncoderParams:
    """Deterministic initialization from one rng state.

    Weight matrices and embeddings draw from Normal(0, initializer_range^2)
    clamped at two standard deviations; biases start at zero, layer-norm
    gains at one, shifts at zero.
    """
    gen = rng.generator()
    sigma = config.initializer_range
    tensors: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config, mlm_head, task_head).items():
        if name.endswith(".gain"):
            tensors[name] = np.ones(shape, dtype=dtype)
        elif name.endswith((".bias", ".shift")):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            w = gen.normal(0.0, sigma, size=shape)
            tensors[name] = np.clip(w, -2.0 * sigma, 2.0 * sigma).astype(dtype)
    return EncoderParams(tensors)


def count_parameters(params: EncoderParams) -> int:
    return sum(int(t.size) for t in params.tensors.values())


def count_parameters_for_config(
    config: ModelConfig,
    mlm_head: bool = True,
    task_head: TaskHeadSpec | None = None,
) -> int:
    shapes = parameter_shapes(config, mlm_head, task_head)
    return sum(int(np.prod(s)) for s in shapes.values())


def validate_shapes(
    params: EncoderParams,
    config: ModelConfig,
    mlm_head: bool = True,
    task_head: TaskHeadSpec | None = None,
) -> None:
    expected = parameter_shapes(config, mlm_head, task_head)
    for name, shape in expected.items():
        if name not in params:
            raise DimensionError(f"missing parameter {name}")
        actual = tuple(params[name].shape)
        if actual != shape:
            raise DimensionError(
                f"parameter {name} has shape {actual}, expected {shape}"
            )


@dataclass
class EncodedBatch:
    ids: np.ndarray  # int64 [B, L]
    attention_mask: np.ndarray  # float or int [B, L]
    type_ids: np.ndarray  # int64 [B, L]


def collate(sequences) -> EncodedBatch:
    """Stack tokenized sequences (or MLM rows) into batch arrays."""
    ids = np.array([s.ids for s in sequences], dtype=np.int64)
    mask = np.array([s.attention_mask for s in sequences], dtype=np.int64)
    if hasattr(sequences[0], "type_ids"):
        type_ids = np.array([s.type_ids for s in sequences], dtype=np.int64)
    else:
        type_ids = np.zeros_like(ids)
    return EncodedBatch(ids=ids, attention_mask=mask, type_ids=type_ids)


def _accum(grads: dict[str, np.ndarray], name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] += value
    else:
        grads[name] = value.copy() if value.base is not None else value


class _Linear:
    """y = x @ W + b over 2D inputs, accumulating parameter grads by name."""

    def __init__(self, params: EncoderParams, prefix: str):
        self.w = params[prefix + ".weight"]
        self.b = params[prefix + ".bias"]
        self.wname = prefix + ".weight"
        self.bname = prefix + ".bias"
        self.mm = MatmulOp()

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.mm.forward(x, self.w) + self.b

    def backward(self, g: np.ndarray, grads: dict[str, np.ndarray]) -> np.ndarray:
        dx, dw = self.mm.backward(g)
        _accum(grads, self.wname, dw)
        _accum(grads, self.bname, g.sum(axis=0))
        return dx


class _LayerNorm:
    def __init__(self, params: EncoderParams, prefix: str, eps: float):
        self.gain = params[prefix + ".gain"]
        self.shift = params[prefix + ".shift"]
        self.gname = prefix + ".gain"
        self.sname = prefix + ".shift"
        self.eps = eps
        self.op = LayerNormOp()

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.op.forward(x, self.gain, self.shift, self.eps)

    def backward(self, g: np.ndarray, grads: dict[str, np.ndarray]) -> np.ndarray:
        dx, dgain, dshift = self.op.backward(g)
        _accum(grads, self.gname, dgain)
        _accum(grads, self.sname, dshift)
        return dx


class _Dropout:
    def __init__(self, rate: float, cursor: RngCursor | None, training: bool):
        self.op = DropoutOp()
        self.rate = rate
        self.active = training and rate > 0.0
        self.rng = None
        if self.active:
            if cursor is None:
                raise ConfigError("training-mode dropout needs an rng")
            self.rng = cursor.next_state()  # one stream per dropout site

    def forward(self, x: np.ndarray) -> np.ndarray:
        if not self.active:
            return self.op.forward(x, self.rate, RngState(0), training=False)
        return self.op.forward(x, self.rate, self.rng, training=True)

    def backward(self, g: np.ndarray) -> np.ndarray:
        return self.op.backward(g)


class _AttentionBlock:
    """Scaled dot-product multi-head self-attention with output projection."""

    def __init__(
        self,
        params: EncoderParams,
        prefix: str,
        num_heads: int,
        attention_dropout: float,
        cursor: RngCursor | None,
        training: bool,
    ):
        self.q = _Linear(params, prefix + ".q")
        self.k = _Linear(params, prefix + ".k")
        self.v = _Linear(params, prefix + ".v")
        self.out = _Linear(params, prefix + ".out")
        self.num_heads = num_heads
        self.drop = _Dropout(attention_dropout, cursor, training)
        self.mm_qk = MatmulOp()
        self.mm_pv = MatmulOp()
        self.softmax = SoftmaxOp()

    def _split_heads(self, x2: np.ndarray, b: int, l: int) -> np.ndarray:
        d = x2.shape[-1] // self.num_heads
        return (
            x2.reshape(b, l, self.num_heads, d)
            .transpose(0, 2, 1, 3)
            .reshape(b * self.num_heads, l, d)
        )

    def _merge_heads(self, x3: np.ndarray, b: int, l: int) -> np.ndarray:
        d = x3.shape[-1]
        return (
            x3.reshape(b, self.num_heads, l, d)
            .transpose(0, 2, 1, 3)
            .reshape(b * l, self.num_heads * d)
        )

    def forward(self, x: np.ndarray, attention_mask: np.ndarray) -> np.ndarray:
        b, l, h = x.shape
        if attention_mask.shape != (b, l):
            raise DimensionError(
                f"attention mask shape {tuple(attention_mask.shape)} does not "
                f"match sequence shape {(b, l)}"
            )
        self.b, self.l = b, l
        x2 = x.reshape(b * l, h)
        q3 = self._split_heads(self.q.forward(x2), b, l)
        k3 = self._split_heads(self.k.forward(x2), b, l)
        v3 = self._split_heads(self.v.forward(x2), b, l)

        self.scale = 1.0 / math.sqrt(h // self.num_heads)
        # padded key positions get a large negative additive bias
        key_bias = (1.0 - attention_mask.astype(x.dtype)) * MASK_BIAS
        key_bias = np.repeat(key_bias, self.num_heads, axis=0)[:, None, :]
        scores = self.mm_qk.forward(q3, k3.transpose(0, 2, 1)) * self.scale + key_bias
        probs = self.softmax.forward(scores)
        probs = self.drop.forward(probs)
        ctx = self.mm_pv.forward(probs, v3)
        out2 = self.out.forward(self._merge_heads(ctx, b, l))
        return out2.reshape(b, l, h)

    def backward(self, g: np.ndarray, grads: dict[str, np.ndarray]) -> np.ndarray:
        b, l = self.b, self.l
        h = g.shape[-1]
        d_ctx2 = self.out.backward(g.reshape(b * l, h), grads)
        d_ctx = self._split_heads(d_ctx2, b, l)
        d_probs, d_v3 = self.mm_pv.backward(d_ctx)
        d_probs = self.drop.backward(d_probs)
        d_scores = self.softmax.backward(d_probs) * self.scale
        d_q3, d_k3t = self.mm_qk.backward(d_scores)
        d_k3 = d_k3t.transpose(0, 2, 1)
        dx2 = self.q.backward(self._merge_heads(d_q3, b, l), grads)
        dx2 += self.k.backward(self._merge_heads(d_k3, b, l), grads)
        dx2 += self.v.backward(self._merge_heads(d_v3, b, l), grads)
        return dx2.reshape(b, l, h)


class _FfnBlock:
    def __init__(self, params: EncoderParams, prefix: str):
        self.inner = _Linear(params, prefix + ".inner")
        self.outer = _Linear(params, prefix + ".outer")
        self.gelu = GeluOp()

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, l, h = x.shape
        self.shape = (b, l, h)
        t = self.gelu.forward(self.inner.forward(x.reshape(b * l, h)))
        return self.outer.forward(t).reshape(b, l, h)

    def backward(self, g: np.ndarray, grads: dict[str, np.ndarray]) -> np.ndarray:
        b, l, h = self.shape
        d_t = self.outer.backward(g.reshape(b * l, -1), grads)
        d_inner = self.gelu.backward(d_t)
        return self.inner.backward(d_inner, grads).reshape(b, l, h)


class EncoderRun:
    """One forward pass with everything cached for an explicit backward.

    A run is single-use: call :meth:`forward_mlm` or :meth:`forward_task`
    once, then :meth:`backward` with the gradient of the loss with respect
    to the returned logits.
    """

    def __init__(
        self,
        config: ModelConfig,
        params: EncoderParams,
        training: bool = False,
        rng: RngState | None = None,
    ):
        self.config = config
        self.params = params
        self.training = training
        self.cursor = RngCursor(rng) if (training and rng is not None) else None
        if training and rng is None and (config.hidden_dropout > 0 or config.attention_dropout > 0):
            raise ConfigError("training-mode forward with dropout needs an rng")
        self._mode = None

    # -- trunk ------------------------------------------------------------

    def _forward_trunk(self, batch: EncodedBatch) -> np.ndarray:
        cfg = self.config
        ids, mask, type_ids = batch.ids, batch.attention_mask, batch.type_ids
        b, l = ids.shape
        if l > cfg.max_position_embeddings:
            raise DimensionError(
                f"sequence length {l} exceeds max positions {cfg.max_position_embeddings}"
            )
        if ids.max(initial=0) >= cfg.vocab_size:
            raise DimensionError("token id outside the configured vocabulary")
        self.batch = batch
        p = self.params

        tok = p["embeddings.token.weight"][ids]
        pos = p["embeddings.position.weight"][:l][None, :, :]
        typ = p["embeddings.type.weight"][type_ids]
        x = tok + pos + typ

        self.emb_ln = _LayerNorm(p, "embeddings.ln", cfg.layer_norm_eps)
        self.emb_drop = _Dropout(cfg.hidden_dropout, self.cursor, self.training)
        h = self.emb_drop.forward(self.emb_ln.forward(x))

        self.layers = []
        for i in range(cfg.num_hidden_layers):
            prefix = f"layer.{i}"
            attn = _AttentionBlock(
                p,
                prefix + ".attn",
                cfg.num_attention_heads,
                cfg.attention_dropout,
                self.cursor,
                self.training,
            )
            attn_drop = _Dropout(cfg.hidden_dropout, self.cursor, self.training)
            attn_ln = _LayerNorm(p, prefix + ".attn_ln", cfg.layer_norm_eps)
            ffn = _FfnBlock(p, prefix + ".ffn")
            ffn_drop = _Dropout(cfg.hidden_dropout, self.cursor, self.training)
            ffn_ln = _LayerNorm(p, prefix + ".ffn_ln", cfg.layer_norm_eps)

            a = attn_drop.forward(attn.forward(h, mask))
            h = attn_ln.forward(h + a)
            f = ffn_drop.forward(ffn.forward(h))
            h = ffn_ln.forward(h + f)
            self.layers.append((attn, attn_drop, attn_ln, ffn, ffn_drop, ffn_ln))
        return h

    def _backward_trunk(self, g: np.ndarray, grads: dict[str, np.ndarray]) -> None:
        for attn, attn_drop, attn_ln, ffn, ffn_drop, ffn_ln in reversed(self.layers):
            d_pre = ffn_ln.backward(g, grads)
            g = d_pre + ffn.backward(ffn_drop.backward(d_pre), grads)
            d_pre = attn_ln.backward(g, grads)
            g = d_pre + attn.backward(attn_drop.backward(d_pre), grads)
        g = self.emb_ln.backward(self.emb_drop.backward(g), grads)

        ids, type_ids = self.batch.ids, self.batch.type_ids
        b, l, h = g.shape
        p = self.params
        d_tok = np.zeros_like(p["embeddings.token.weight"])
        np.add.at(d_tok, ids.reshape(-1), g.reshape(-1, h))
        _accum(grads, "embeddings.token.weight", d_tok)
        d_pos = np.zeros_like(p["embeddings.position.weight"])
        d_pos[:l] = g.sum(axis=0)
        _accum(grads, "embeddings.position.weight", d_pos)
        d_typ = np.zeros_like(p["embeddings.type.weight"])
        np.add.at(d_typ, type_ids.reshape(-1), g.reshape(-1, h))
        _accum(grads, "embeddings.type.weight", d_typ)

    # -- heads ------------------------------------------------------------

    def forward_mlm(self, batch: EncodedBatch) -> np.ndarray:
        """Logits over the vocabulary at every position, shape [B, L, V]."""
        h = self._forward_trunk(batch)
        b, l, hid = h.shape
        p = self.params
        self.mlm_transform = _Linear(p, "mlm.transform")
        self.mlm_gelu = GeluOp()
        self.mlm_ln = _LayerNorm(p, "mlm.ln", self.config.layer_norm_eps)
        t = self.mlm_gelu.forward(self.mlm_transform.forward(h.reshape(b * l, hid)))
        t = self.mlm_ln.forward(t)
        self.mlm_hidden = t
        self.mlm_decode = MatmulOp()
        logits = self.mlm_decode.forward(t, p["embeddings.token.weight"].T)
        logits = logits + p["mlm.decoder.bias"]
        self._mode = "mlm"
        self._bl = (b, l)
        return logits.reshape(b, l, self.config.vocab_size)

    def forward_task(self, batch: EncodedBatch, head: TaskHeadSpec) -> np.ndarray:
        """Head logits from the CLS position, shape [B, num_labels]."""
        h = self._forward_trunk(batch)
        self.trunk_shape = h.shape
        cls = h[:, 0, :]
        self.task_linear = _Linear(self.params, "task.head")
        logits = self.task_linear.forward(cls)
        self._mode = "task"
        return logits

    def backward(self, d_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of the loss for every parameter, keyed by name."""
        grads: dict[str, np.ndarray] = {}
        if self._mode == "mlm":
            b, l = self._bl
            v = self.config.vocab_size
            g = d_logits.reshape(b * l, v)
            _accum(grads, "mlm.decoder.bias", g.sum(axis=0))
            d_t, d_emb_t = self.mlm_decode.backward(g)
            _accum(grads, "embeddings.token.weight", d_emb_t.T)
            d_t = self.mlm_ln.backward(d_t, grads)
            d_t = self.mlm_gelu.backward(d_t)
            d_h = self.mlm_transform.backward(d_t, grads)
            self._backward_trunk(d_h.reshape(b, l, -1), grads)
        elif self._mode == "task":
            d_cls = self.task_linear.backward(d_logits, grads)
            d_h = np.zeros(self.trunk_shape, dtype=d_cls.dtype)
            d_h[:, 0, :] = d_cls
            self._backward_trunk(d_h, grads)
        else:
            raise ConfigError("backward called before a forward pass")
        return grads


# -- convenience wrappers used by tests and simple callers -----------------


def multi_head_attention(
    x: np.ndarray,
    params: EncoderParams,
    attention_mask: np.ndarray,
    num_heads: int,
    prefix: str = "layer.0.attn",
    rng: RngState | None = None,
    training: bool = False,
    attention_dropout: float = 0.0,
) -> np.ndarray:
    cursor = RngCursor(rng) if rng is not None else None
    block = _AttentionBlock(params, prefix, num_heads, attention_dropout, cursor, training)
    return block.forward(x, attention_mask)


def forward_mlm(
    batch: EncodedBatch,
    params: EncoderParams,
    config: ModelConfig,
    rng: RngState | None = None,
    training: bool = False,
) -> np.ndarray:
    return EncoderRun(config, params, training, rng).forward_mlm(batch)


def forward_task(
    batch: EncodedBatch,
    params: EncoderParams,
    config: ModelConfig,
    head: TaskHeadSpec,
    rng: RngState | None = None,
    training: bool = False,
) -> np.ndarray:
    return EncoderRun(config, params, training, rng).forward_task(batch, head)
