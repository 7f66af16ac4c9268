"""Transformer source encoder, target encoder trunk and decoder.

Post-norm layers with sinusoidal positions. The decoder's position-0 input is a
caller-supplied vector ``e`` (a domain embedding, or a mixture of them) in
place of the start-symbol embedding.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

PAD, START, EOS, UNK = 0, 1, 2, 3
NEG_INF = -1e9

METHODS = ("target_encoder", "moe", "vanilla")


class ContractError(ValueError):
    """A caller broke an operation's precondition."""


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    src_vocab_size: int = 32
    tgt_vocab_size: int = 32
    n_domains: int = 4
    dropout_enc_dec: float = 0.1
    dropout_target_enc: float = 0.0
    max_len: int = 64
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.dropout_target_enc != 0:
            raise ValueError("the target encoder must not use dropout (dropout_target_enc must be 0)")
        if not 0 <= self.dropout_enc_dec < 1:
            raise ValueError(f"dropout_enc_dec must be in [0, 1), got {self.dropout_enc_dec}")
        if self.n_domains < 1:
            raise ValueError("n_domains must be >= 1")
        if min(self.n_layers, self.d_ff, self.src_vocab_size, self.tgt_vocab_size, self.max_len) < 1:
            raise ValueError("layer count, widths, vocab sizes and max_len must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")


@dataclass
class SourceEncoding:
    Z: Tensor  # B x L x d
    mask: np.ndarray  # B x L, True on real tokens

    def select(self, rows) -> SourceEncoding:
        return SourceEncoding(Tensor(self.Z.data[rows]), self.mask[rows])


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # one stream per parameter name: adding parameters never shifts the others
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _key_bias(mask: np.ndarray, dtype) -> np.ndarray:
    return np.where(mask, 0.0, NEG_INF).astype(dtype)[:, None, None, :]


def _causal_bias(n: int, dtype) -> np.ndarray:
    return np.triu(np.full((n, n), NEG_INF, dtype=dtype), k=1)[None, None]


@dataclass
class DecoderState:
    """Incremental-decoding cache: per-layer self-attention keys/values."""

    enc: SourceEncoding
    e: np.ndarray  # B x d
    cross_kv: list[tuple[np.ndarray, np.ndarray]]
    self_kv: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    fed: np.ndarray | None = None  # tokens already fed as inputs at positions >= 1
    positions: int = 0

    @property
    def batch(self) -> int:
        return self.e.shape[0]

    def select(self, rows) -> DecoderState:
        rows = np.asarray(rows)
        return DecoderState(
            enc=self.enc.select(rows),
            e=self.e[rows],
            cross_kv=[(k[rows], v[rows]) for k, v in self.cross_kv],
            self_kv=[(k[rows], v[rows]) for k, v in self.self_kv],
            fed=None if self.fed is None else self.fed[rows],
            positions=self.positions,
        )


class Seq2Seq:
    """Parameters and forward passes for all three training methods.

    ``method`` decides which parts exist: the target encoder and score
    projection only for ``target_encoder``; domain embeddings for
    ``target_encoder`` and ``moe``.
    """

    def __init__(self, config: ModelConfig, method: str = "target_encoder", latent_input: str = "target"):
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")
        if latent_input not in ("target", "source"):
            raise ValueError(f"latent_input must be 'target' or 'source', got {latent_input!r}")
        self.config = config
        self.method = method
        self.latent_input = latent_input
        self.dtype = np.dtype(config.dtype)
        self.training = True
        self.decoder_forwards = 0
        self.dropout_rng = np.random.default_rng([config.seed, 17])
        self.params: dict[str, Tensor] = {}
        self._pe = sinusoidal_positions(config.max_len + 2, config.d_model).astype(self.dtype)
        self._build()

    # -- parameters ----------------------------------------------------------
    def _uniform(self, name: str, shape, fan_in: int) -> None:
        bound = 1.0 / math.sqrt(fan_in)
        data = _param_rng(self.config.seed, name).uniform(-bound, bound, size=shape)
        self.params[name] = Tensor(data.astype(self.dtype), requires_grad=True)

    def _const(self, name: str, shape, value: float) -> None:
        self.params[name] = Tensor(np.full(shape, value, dtype=self.dtype), requires_grad=True)

    def _linear(self, name: str, n_in: int, n_out: int) -> None:
        self._uniform(f"{name}.w", (n_in, n_out), n_in)
        self._const(f"{name}.b", (n_out,), 0.0)

    def _norm(self, name: str) -> None:
        self._const(f"{name}.g", (self.config.d_model,), 1.0)
        self._const(f"{name}.b", (self.config.d_model,), 0.0)

    def _attn_params(self, name: str) -> None:
        d = self.config.d_model
        for proj in ("q", "k", "v", "o"):
            self._linear(f"{name}.{proj}", d, d)

    def _encoder_params(self, prefix: str, vocab: int) -> None:
        c = self.config
        self._uniform(f"{prefix}.emb", (vocab, c.d_model), c.d_model)
        for i in range(c.n_layers):
            self._attn_params(f"{prefix}.{i}.attn")
            self._norm(f"{prefix}.{i}.ln1")
            self._linear(f"{prefix}.{i}.ff1", c.d_model, c.d_ff)
            self._linear(f"{prefix}.{i}.ff2", c.d_ff, c.d_model)
            self._norm(f"{prefix}.{i}.ln2")

    def _build(self) -> None:
        c = self.config
        d = c.d_model
        self._encoder_params("src", c.src_vocab_size)
        if self.method == "target_encoder":
            vocab = c.tgt_vocab_size if self.latent_input == "target" else c.src_vocab_size
            self._encoder_params("tgtenc", vocab)
            self._uniform("latent.M", (c.n_domains, d), d)
        self._uniform("dec.emb", (c.tgt_vocab_size, d), d)
        for i in range(c.n_layers):
            self._attn_params(f"dec.{i}.self")
            self._norm(f"dec.{i}.ln1")
            self._attn_params(f"dec.{i}.cross")
            self._norm(f"dec.{i}.ln2")
            self._linear(f"dec.{i}.ff1", d, c.d_ff)
            self._linear(f"dec.{i}.ff2", c.d_ff, d)
            self._norm(f"dec.{i}.ln3")
        self._linear("dec.out", d, c.tgt_vocab_size)
        # domain k draws from its own stream; the start-symbol row shares
        # domain 0's initial value so N=1 reduces exactly to a vanilla model
        bound = 1.0 / math.sqrt(d)
        cols = [_param_rng(c.seed, f"domain.{k}").uniform(-bound, bound, size=d) for k in range(c.n_domains)]
        self.params["dec.emb"].data[START] = cols[0]
        if self.method != "vanilla":
            self.params["dec.domain_emb"] = Tensor(np.stack(cols, axis=1).astype(self.dtype), requires_grad=True)

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def train(self) -> Seq2Seq:
        self.training = True
        return self

    def eval(self) -> Seq2Seq:
        self.training = False
        return self

    # -- building blocks -------------------------------------------------------
    def _lin(self, name: str, x: Tensor) -> Tensor:
        shape = x.shape
        y = x.reshape(-1, shape[-1]) @ self.params[f"{name}.w"] + self.params[f"{name}.b"]
        return y.reshape(*shape[:-1], y.shape[-1])

    def _ln(self, name: str, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _drop(self, x: Tensor, p: float) -> Tensor:
        if not self.training or p <= 0:
            return x
        return T.dropout(x, p, self.dropout_rng)

    def _split(self, x: Tensor) -> Tensor:
        B, L, d = x.shape
        H = self.config.n_heads
        return x.reshape(B, L, H, d // H).transpose(0, 2, 1, 3)

    def _merge(self, x: Tensor) -> Tensor:
        B, H, L, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, L, H * dh)

    def _attend(self, name: str, q: Tensor, k: Tensor, v: Tensor, bias) -> Tensor:
        dh = self.config.d_model // self.config.n_heads
        s = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        if bias is not None:
            s = s + bias
        a = T.softmax(s, axis=-1)
        return self._lin(f"{name}.o", self._merge(a @ v))

    def _mha(self, name: str, xq: Tensor, xkv: Tensor, bias) -> Tensor:
        q = self._split(self._lin(f"{name}.q", xq))
        k = self._split(self._lin(f"{name}.k", xkv))
        v = self._split(self._lin(f"{name}.v", xkv))
        return self._attend(name, q, k, v, bias)

    def _ffn(self, name: str, x: Tensor) -> Tensor:
        return self._lin(f"{name}.ff2", T.relu(self._lin(f"{name}.ff1", x)))

    def _embed_input(self, x: Tensor, start: int = 0) -> Tensor:
        L = x.shape[1]
        return x * math.sqrt(self.config.d_model) + self._pe[start:start + L]

    def _encoder(self, prefix: str, ids: np.ndarray, mask: np.ndarray, p_drop: float) -> Tensor:
        x = self._drop(self._embed_input(T.embedding(self.params[f"{prefix}.emb"], ids)), p_drop)
        bias = _key_bias(mask, self.dtype)
        for i in range(self.config.n_layers):
            n = f"{prefix}.{i}"
            x = self._ln(f"{n}.ln1", x + self._drop(self._mha(f"{n}.attn", x, x, bias), p_drop))
            x = self._ln(f"{n}.ln2", x + self._drop(self._ffn(n, x), p_drop))
        return x

    def _check_len(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ContractError(f"token ids must be a B x L matrix, got shape {ids.shape}")
        if ids.shape[1] == 0:
            raise ContractError("empty token sequence")
        if ids.shape[1] > self.config.max_len:
            raise ContractError(f"sequence length {ids.shape[1]} exceeds max_len={self.config.max_len}")
        return ids

    # -- public forward passes -------------------------------------------------
    def encode_source(self, tokens, mask=None) -> SourceEncoding:
        tokens = self._check_len(tokens)
        mask = tokens != PAD if mask is None else np.asarray(mask, dtype=bool)
        Z = self._encoder("src", tokens, mask, self.config.dropout_enc_dec)
        return SourceEncoding(Z, mask)

    def encode_target_latent(self, tokens) -> Tensor:
        """First last-layer state of the target encoder (B x d); never uses dropout."""
        if "tgtenc.emb" not in self.params:
            raise ContractError(f"method {self.method!r} has no target encoder")
        tokens = self._check_len(tokens)
        Z = self._encoder("tgtenc", tokens, tokens != PAD, 0.0)
        return Z[:, 0, :]

    def start_embedding(self, batch: int) -> Tensor:
        return T.embedding(self.params["dec.emb"], np.full(batch, START))

    def domain_embedding(self, k) -> Tensor:
        """Column(s) of E as a B x d tensor (``k`` an int or an index vector)."""
        E = self.params["dec.domain_emb"]
        k = np.atleast_1d(np.asarray(k))
        if k.min() < 0 or k.max() >= E.shape[1]:
            raise ContractError(f"domain index outside [0, {E.shape[1]})")
        return T.transpose(E, (1, 0))[k]

    def decode_teacher_forced(self, enc: SourceEncoding, e: Tensor | None, tgt_in) -> Tensor:
        """Logits B x L x V. Position 0 carries ``e`` (or the start embedding when None)."""
        tgt_in = self._check_len(tgt_in)
        B, L = tgt_in.shape
        d = self.config.d_model
        if e is None:
            e = T.embedding(self.params["dec.emb"], tgt_in[:, 0])
        if e.shape != (B, d):
            raise ContractError(f"domain vector must be {B} x {d}, got {e.shape}")
        self.decoder_forwards += 1
        p_drop = self.config.dropout_enc_dec
        first = e.reshape(B, 1, d)
        if L > 1:
            rest = T.embedding(self.params["dec.emb"], tgt_in[:, 1:])
            x = T.concat([first, rest], axis=1)
        else:
            x = first
        x = self._drop(self._embed_input(x), p_drop)
        self_bias = _causal_bias(L, self.dtype)
        src_bias = _key_bias(enc.mask, self.dtype)
        for i in range(self.config.n_layers):
            n = f"dec.{i}"
            x = self._ln(f"{n}.ln1", x + self._drop(self._mha(f"{n}.self", x, x, self_bias), p_drop))
            x = self._ln(f"{n}.ln2", x + self._drop(self._mha(f"{n}.cross", x, enc.Z, src_bias), p_drop))
            x = self._ln(f"{n}.ln3", x + self._drop(self._ffn(n, x), p_drop))
        return self._lin("dec.out", x)

    # -- incremental decoding --------------------------------------------------
    def start_decoding(self, enc: SourceEncoding, e) -> DecoderState:
        e = np.asarray(e.data if isinstance(e, Tensor) else e, dtype=self.dtype)
        B = enc.mask.shape[0]
        if e.shape != (B, self.config.d_model):
            raise ContractError(f"domain vector must be {B} x {self.config.d_model}, got {e.shape}")
        with T.no_grad():
            Z = Tensor(enc.Z.data)
            cross = []
            for i in range(self.config.n_layers):
                n = f"dec.{i}.cross"
                cross.append((self._split(self._lin(f"{n}.k", Z)).data, self._split(self._lin(f"{n}.v", Z)).data))
        return DecoderState(enc=enc, e=e, cross_kv=cross, fed=np.zeros((B, 0), dtype=np.int64))

    def decode_one_step(self, enc: SourceEncoding, e, prefix, state: DecoderState | None = None):
        """Next-token logits (B x V) after ``prefix`` plus the advanced state.

        Equivalent to the teacher-forced logits at the last position. The
        input state is left untouched.
        """
        prefix = np.asarray(prefix, dtype=np.int64)
        if prefix.ndim == 1:
            prefix = prefix[:, None] if prefix.size else prefix.reshape(-1, 0)
        t = prefix.shape[1]
        if state is None:
            state = self.start_decoding(enc, e)
            for j in range(t):
                _, state = self.decode_one_step(enc, e, prefix[:, :j], state)
        if state.positions != t or prefix.shape[0] != state.batch:
            raise ContractError(f"cache holds {state.positions} positions for batch {state.batch}; "
                                f"prefix has shape {prefix.shape}")
        if t > 0 and not np.array_equal(state.fed, prefix[:, :t - 1]):
            raise ContractError("prefix disagrees with the tokens already fed to the cache")
        if t >= self.config.max_len:
            raise ContractError(f"prefix length {t} exceeds max_len={self.config.max_len}")
        d = self.config.d_model
        with T.no_grad():
            if t == 0:
                x = Tensor(state.e.reshape(-1, 1, d))
            else:
                x = T.embedding(self.params["dec.emb"], prefix[:, t - 1:t])
            x = self._embed_input(x, start=t)
            src_bias = _key_bias(state.enc.mask, self.dtype)
            new_kv = []
            for i in range(self.config.n_layers):
                n = f"dec.{i}"
                k = self._split(self._lin(f"{n}.self.k", x)).data
                v = self._split(self._lin(f"{n}.self.v", x)).data
                if state.self_kv:
                    k = np.concatenate([state.self_kv[i][0], k], axis=2)
                    v = np.concatenate([state.self_kv[i][1], v], axis=2)
                new_kv.append((k, v))
                q = self._split(self._lin(f"{n}.self.q", x))
                x = self._ln(f"{n}.ln1", x + self._attend(f"{n}.self", q, Tensor(k), Tensor(v), None))
                ck, cv = state.cross_kv[i]
                q = self._split(self._lin(f"{n}.cross.q", x))
                x = self._ln(f"{n}.ln2", x + self._attend(f"{n}.cross", q, Tensor(ck), Tensor(cv), src_bias))
                x = self._ln(f"{n}.ln3", x + self._ffn(n, x))
            logits = self._lin("dec.out", x).data[:, 0, :]
        new_state = DecoderState(
            enc=state.enc, e=state.e, cross_kv=state.cross_kv, self_kv=new_kv,
            fed=prefix[:, :t], positions=t + 1,
        )
        return logits, new_state

    # -- misc ------------------------------------------------------------------
    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in arrays:
                raise KeyError(f"missing parameter {k!r}")
            if arrays[k].shape != p.shape:
                raise ValueError(f"parameter {k!r}: expected shape {p.shape}, got {arrays[k].shape}")
            p.data = np.array(arrays[k], dtype=self.dtype)
