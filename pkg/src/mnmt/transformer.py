"""Pre-layer-norm encoder-decoder transformer on top of :mod:`mnmt.tensor`.

Encoders and decoders are separate objects so that assemblies can pair any
encoder with any decoder. The decoder can record its encoder-decoder
attention while decoding; see :class:`AttentionTrace`.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad
from .tokenizer import BOS_ID, EOS_ID, PAD_ID

CKPT_MAGIC = b"MNMTCKPT1"


class LengthError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 2
    heads: int = 2
    model_dim: int = 64
    ff_dim: int = 128
    dropout: float = 0.1
    max_len: int = 64
    src_vocab: int = 1
    tgt_vocab: int = 1

    def __post_init__(self) -> None:
        for name in ("layers", "heads", "model_dim", "ff_dim", "max_len", "src_vocab", "tgt_vocab"):
            if getattr(self, name) < 1:
                raise ValueError(f"TransformerConfig.{name} must be >= 1")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    def with_vocab(self, src: int, tgt: int) -> "TransformerConfig":
        return replace(self, src_vocab=src, tgt_vocab=tgt)


PRESETS: dict[str, TransformerConfig] = {
    "desk": TransformerConfig(layers=2, heads=2, model_dim=64, ff_dim=128, dropout=0.1, max_len=64),
    "paper": TransformerConfig(layers=6, heads=8, model_dim=512, ff_dim=2048, dropout=0.3, max_len=256),
}


def sinusoid_table(max_len: int, dim: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _attn_params(rng, prefix: str, d: int) -> dict[str, np.ndarray]:
    p = {}
    for name in ("q", "k", "v"):
        p[f"{prefix}.w{name}"] = _xavier(rng, d, d)
        p[f"{prefix}.b{name}"] = np.zeros(d)
    # output projection carries no bias so the attention output decomposes
    # exactly into per-source-token vectors
    p[f"{prefix}.wo"] = _xavier(rng, d, d)
    return p


def _ln_params(prefix: str, d: int) -> dict[str, np.ndarray]:
    return {f"{prefix}.g": np.ones(d), f"{prefix}.b": np.zeros(d)}


def _ff_params(rng, prefix: str, d: int, ff: int) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.w1": _xavier(rng, d, ff),
        f"{prefix}.b1": np.zeros(ff),
        f"{prefix}.w2": _xavier(rng, ff, d),
        f"{prefix}.b2": np.zeros(d),
    }


class _Dropout:
    def __init__(self, p: float, seed: int, step: int, salt: str):
        self.p = p
        self.seed = seed
        self.step = step
        self.salt = zlib.crc32(salt.encode("utf-8"))

    def __call__(self, x: Tensor, site: int) -> Tensor:
        if self.p == 0.0:
            return x
        rng = T.dropout_rng(self.seed, (self.salt * 131 + site) & 0xFFFFFFFF, self.step)
        return T.dropout(x, self.p, rng)


class _Module:
    """Ordered parameter store shared by encoder and decoder."""

    kind = "module"

    def __init__(self, config: TransformerConfig, params: dict[str, np.ndarray], name: str):
        self.config = config
        self.name = name
        self.params: dict[str, Tensor] = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        self._pe = sinusoid_table(config.max_len, config.model_dim)

    def __getitem__(self, key: str) -> Tensor:
        return self.params[key]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if arrays[k].shape != p.shape:
                raise CheckpointError(f"{k}: checkpoint shape {arrays[k].shape} != {p.shape}")
            p.data = np.array(arrays[k], dtype=np.float64)

    # -- building blocks --------------------------------------------------
    def _embed(self, ids: np.ndarray, table: str, drop: _Dropout | None, site: int) -> Tensor:
        n = ids.shape[1]
        if n > self.config.max_len:
            raise LengthError(f"sequence of {n} tokens exceeds max_len {self.config.max_len}")
        d = self.config.model_dim
        x = T.embedding(self.params[table], ids) * math.sqrt(d) + self._pe[:n]
        return drop(x, site) if drop else x

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return T.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _linear(self, x: Tensor, w: str, b: str | None) -> Tensor:
        return T.linear(x, self.params[w], self.params[b] if b else None)

    def _attention(self, prefix: str, xq: Tensor, xkv: Tensor, invalid: np.ndarray, record: dict | None = None):
        cfg = self.config
        bsz, tq, d = xq.shape
        s = xkv.shape[1]
        h, dh = cfg.heads, cfg.head_dim
        q = self._linear(xq, f"{prefix}.wq", f"{prefix}.bq").reshape(bsz, tq, h, dh).transpose(0, 2, 1, 3)
        k = self._linear(xkv, f"{prefix}.wk", f"{prefix}.bk").reshape(bsz, s, h, dh).transpose(0, 2, 3, 1)
        v = self._linear(xkv, f"{prefix}.wv", f"{prefix}.bv").reshape(bsz, s, h, dh).transpose(0, 2, 1, 3)
        scores = (q @ k) * (1.0 / math.sqrt(dh))
        alpha = T.softmax(T.masked_fill(scores, invalid, -np.inf), axis=-1)
        ctx = (alpha @ v).transpose(0, 2, 1, 3).reshape(bsz, tq, d)
        out = T.linear(ctx, self.params[f"{prefix}.wo"])
        if record is not None:
            record["alpha"] = alpha.data
            record["out"] = out.data
        return out

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        hdn = T.relu(self._linear(x, f"{prefix}.w1", f"{prefix}.b1"))
        return self._linear(hdn, f"{prefix}.w2", f"{prefix}.b2")

    # -- checkpoints -----------------------------------------------------
    def save(self, path: str | Path, extra: dict | None = None) -> None:
        header = {
            "kind": self.kind,
            "name": self.name,
            "config": asdict(self.config),
            "params": [[k, list(p.shape)] for k, p in self.params.items()],
        }
        header.update(extra or {})
        save_checkpoint(path, header, self.state_arrays())

    @classmethod
    def load(cls, path: str | Path):
        header, arrays = load_checkpoint(path)
        if header.get("kind") != cls.kind:
            raise CheckpointError(f"{path}: holds a {header.get('kind')}, expected {cls.kind}")
        cfg = TransformerConfig(**header["config"])
        module = cls(cfg, seed=0, name=header.get("name", cls.kind))
        module.load_arrays(arrays)
        module.header = header
        return module


def save_checkpoint(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(header)
    meta["params"] = [[k, list(v.shape)] for k, v in arrays.items()]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    off = len(CKPT_MAGIC)
    (hlen,) = struct.unpack("<Q", raw[off : off + 8])
    off += 8
    header = json.loads(raw[off : off + hlen].decode("utf-8"))
    off += hlen
    arrays: dict[str, np.ndarray] = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return header, arrays


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


@dataclass
class EncoderStates:
    """Contextual vectors for a (padded) batch of source sentences."""

    states: Tensor  # (B, S, d)
    mask: np.ndarray  # (B, S) True on real tokens
    ids: np.ndarray  # (B, S)

    def sentence(self, b: int = 0) -> np.ndarray:
        n = int(self.mask[b].sum())
        return self.states.data[b, :n]


class Encoder(_Module):
    kind = "encoder"

    def __init__(self, config: TransformerConfig, seed: int = 0, name: str = "encoder"):
        rng = np.random.default_rng(seed)
        d, ff = config.model_dim, config.ff_dim
        p = {"embed": rng.normal(0.0, d**-0.5, size=(config.src_vocab, d))}
        for i in range(config.layers):
            p.update(_ln_params(f"layers.{i}.ln1", d))
            p.update(_attn_params(rng, f"layers.{i}.self_attn", d))
            p.update(_ln_params(f"layers.{i}.ln2", d))
            p.update(_ff_params(rng, f"layers.{i}.ff", d, ff))
        p.update(_ln_params("ln_out", d))
        super().__init__(config, p, name)

    def forward(self, ids: np.ndarray, mask: np.ndarray, drop: _Dropout | None = None) -> Tensor:
        invalid = ~mask[:, None, None, :]
        x = self._embed(ids, "embed", drop, 0)
        for i in range(self.config.layers):
            pre = f"layers.{i}"
            h = self._ln(x, f"{pre}.ln1")
            a = self._attention(f"{pre}.self_attn", h, h, invalid)
            x = x + (drop(a, 10 * i + 1) if drop else a)
            f = self._ffn(self._ln(x, f"{pre}.ln2"), f"{pre}.ff")
            x = x + (drop(f, 10 * i + 2) if drop else f)
        return self._ln(x, "ln_out")


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD_ID) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(s) for s in seqs)
    ids = np.full((len(seqs), n), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def encode(encoder: Encoder, source_ids: Sequence[int] | Sequence[Sequence[int]]) -> EncoderStates:
    """Eval-mode encoding of one sentence (list of ids) or a batch (list of lists)."""
    batch = [list(source_ids)] if source_ids and np.isscalar(source_ids[0]) else [list(s) for s in source_ids]
    if any(len(s) == 0 for s in batch):
        raise LengthError("cannot encode an empty source")
    ids, mask = pad_batch(batch)
    with no_grad():
        states = encoder.forward(ids, mask)
    return EncoderStates(states, mask, ids)


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


class Decoder(_Module):
    kind = "decoder"

    def __init__(self, config: TransformerConfig, seed: int = 0, name: str = "decoder"):
        rng = np.random.default_rng(seed)
        d, ff = config.model_dim, config.ff_dim
        p = {"embed": rng.normal(0.0, d**-0.5, size=(config.tgt_vocab, d))}
        for i in range(config.layers):
            p.update(_ln_params(f"layers.{i}.ln1", d))
            p.update(_attn_params(rng, f"layers.{i}.self_attn", d))
            p.update(_ln_params(f"layers.{i}.ln2", d))
            p.update(_attn_params(rng, f"layers.{i}.cross_attn", d))
            p.update(_ln_params(f"layers.{i}.ln3", d))
            p.update(_ff_params(rng, f"layers.{i}.ff", d, ff))
        p.update(_ln_params("ln_out", d))
        p["out.w"] = _xavier(rng, d, config.tgt_vocab)
        p["out.b"] = np.zeros(config.tgt_vocab)
        super().__init__(config, p, name)

    def forward(
        self,
        tgt_in: np.ndarray,
        tgt_mask: np.ndarray,
        memory: Tensor,
        src_mask: np.ndarray,
        drop: _Dropout | None = None,
        records: list | None = None,
    ) -> Tensor:
        """Logits (B, T, V). ``records`` collects per-layer cross-attention captures."""
        tq = tgt_in.shape[1]
        causal = np.triu(np.ones((tq, tq), dtype=bool), k=1)
        self_invalid = causal[None, None] | ~tgt_mask[:, None, None, :]
        cross_invalid = ~src_mask[:, None, None, :]
        x = self._embed(tgt_in, "embed", drop, 0)
        for i in range(self.config.layers):
            pre = f"layers.{i}"
            h = self._ln(x, f"{pre}.ln1")
            a = self._attention(f"{pre}.self_attn", h, h, self_invalid)
            x = x + (drop(a, 10 * i + 1) if drop else a)
            rec = {} if records is not None else None
            c = self._attention(f"{pre}.cross_attn", self._ln(x, f"{pre}.ln2"), memory, cross_invalid, rec)
            if records is not None:
                records.append(rec)
            x = x + (drop(c, 10 * i + 2) if drop else c)
            f = self._ffn(self._ln(x, f"{pre}.ln3"), f"{pre}.ff")
            x = x + (drop(f, 10 * i + 3) if drop else f)
        x = self._ln(x, "ln_out")
        return self._linear(x, "out.w", "out.b")

    def cross_attention_weights(self, layer: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(W^V, b^V, W^O) of 0-based ``layer`` (references, not copies)."""
        pre = f"layers.{layer}.cross_attn"
        return self.params[f"{pre}.wv"].data, self.params[f"{pre}.bv"].data, self.params[f"{pre}.wo"].data


# ---------------------------------------------------------------------------
# attention traces
# ---------------------------------------------------------------------------


@dataclass
class AttentionTrace:
    """Encoder-decoder attention of one decoded sentence.

    ``alphas[l, h, t, i]`` is the weight head ``h`` of decoder layer ``l``
    (0-based) puts on source position ``i`` at decoding step ``t``. Public
    methods take 1-based layer numbers.
    """

    alphas: np.ndarray  # (L, H, T, S)
    values: np.ndarray  # (S, d)
    w_v: list[np.ndarray]
    b_v: list[np.ndarray]
    w_o: list[np.ndarray]
    attn_out: np.ndarray  # (L, T, d)
    source_ids: list[int] = field(default_factory=list)
    target_ids: list[int] = field(default_factory=list)

    @property
    def num_layers(self) -> int:
        return self.alphas.shape[0]

    @property
    def heads(self) -> int:
        return self.alphas.shape[1]

    @property
    def steps(self) -> int:
        return self.alphas.shape[2]

    @property
    def src_len(self) -> int:
        return self.alphas.shape[3]

    def _check(self, layer: int, t: int | None = None) -> int:
        if not 1 <= layer <= self.num_layers:
            raise IndexError(f"layer {layer} outside 1..{self.num_layers}")
        if t is not None and not 0 <= t < self.steps:
            raise IndexError(f"step {t} outside 0..{self.steps - 1}")
        return layer - 1

    def transformed_values(self, layer: int) -> np.ndarray:
        """f_h(values_i) = (values_i W^V_h + b^V_h) W^O_h for each head: (H, S, d)."""
        li = self._check(layer)
        h = self.heads
        d = self.values.shape[1]
        dh = d // h
        wv, bv, wo = self.w_v[li], self.b_v[li], self.w_o[li]
        out = np.empty((h, self.src_len, d))
        for hi in range(h):
            sl = slice(hi * dh, (hi + 1) * dh)
            out[hi] = (self.values @ wv[:, sl] + bv[sl]) @ wo[sl, :]
        return out

    def contribution_vectors(self, layer: int, t: int) -> np.ndarray:
        """alpha_{t,i} f(values_i) summed over heads: (S, d)."""
        li = self._check(layer, t)
        fv = self.transformed_values(layer)
        return np.einsum("hi,hid->id", self.alphas[li, :, t, :], fv)

    def contribution_norms(self, layer: int) -> np.ndarray:
        """||alpha_{t,i} f(values_i)|| for every step and source position: (T, S)."""
        li = self._check(layer)
        fv = self.transformed_values(layer)
        vec = np.einsum("hti,hid->tid", self.alphas[li], fv)
        return np.linalg.norm(vec, axis=-1)


@dataclass
class TraceStep:
    alphas: np.ndarray  # (L, H, S)
    attn_out: np.ndarray  # (L, d)


def decode_step(
    decoder: Decoder, states: EncoderStates, prefix: Sequence[int], capture: bool = False
) -> tuple[np.ndarray, TraceStep | None]:
    """Next-token logits for one sentence given its decoded ``prefix`` (starting with BOS)."""
    if len(prefix) == 0 or prefix[0] != BOS_ID:
        raise LengthError("prefix must start with BOS")
    if len(prefix) > decoder.config.max_len:
        raise LengthError(f"prefix of {len(prefix)} tokens exceeds max_len {decoder.config.max_len}")
    mem = Tensor(states.states.data[:1])
    ids = np.asarray([list(prefix)], dtype=np.int64)
    records: list | None = [] if capture else None
    with no_grad():
        logits = decoder.forward(ids, np.ones_like(ids, dtype=bool), mem, states.mask[:1], records=records)
    step = None
    if capture:
        n = int(states.mask[0].sum())
        step = TraceStep(
            np.stack([r["alpha"][0, :, -1, :n] for r in records]),
            np.stack([r["out"][0, -1] for r in records]),
        )
    return logits.data[0, -1], step


def _assemble_trace(decoder: Decoder, values: np.ndarray, steps: list[TraceStep], src, tgt) -> AttentionTrace:
    L = decoder.config.layers
    weights = [decoder.cross_attention_weights(li) for li in range(L)]
    if steps:
        alphas = np.stack([s.alphas for s in steps], axis=2)
        outs = np.stack([s.attn_out for s in steps], axis=1)
    else:
        alphas = np.zeros((L, decoder.config.heads, 0, values.shape[0]))
        outs = np.zeros((L, 0, values.shape[1]))
    return AttentionTrace(
        alphas=alphas,
        values=values,
        w_v=[w[0] for w in weights],
        b_v=[w[1] for w in weights],
        w_o=[w[2] for w in weights],
        attn_out=outs,
        source_ids=list(src),
        target_ids=list(tgt),
    )


class _StepCache:
    """Per-layer keys/values so each greedy step only runs the newest position.

    Matmul, layer norm and the FFN act row by row, so this matches a full
    prefix recompute up to the rounding of the softmax denominator.
    """

    def __init__(self, decoder: Decoder, memory: np.ndarray, src_mask: np.ndarray):
        self.dec = decoder
        cfg = decoder.config
        bsz, s, d = memory.shape
        h, dh = cfg.heads, cfg.head_dim
        mem = Tensor(memory)
        self.cross_k, self.cross_v = [], []
        for i in range(cfg.layers):
            pre = f"layers.{i}.cross_attn"
            self.cross_k.append(decoder._linear(mem, f"{pre}.wk", f"{pre}.bk").reshape(bsz, s, h, dh).transpose(0, 2, 3, 1).data)
            self.cross_v.append(decoder._linear(mem, f"{pre}.wv", f"{pre}.bv").reshape(bsz, s, h, dh).transpose(0, 2, 1, 3).data)
        self.self_k: list[np.ndarray | None] = [None] * cfg.layers
        self.self_v: list[np.ndarray | None] = [None] * cfg.layers
        self.cross_invalid = ~src_mask[:, None, None, :]
        self.pos = 0

    def keep(self, rows: np.ndarray) -> None:
        for lst in (self.cross_k, self.cross_v, self.self_k, self.self_v):
            for i, arr in enumerate(lst):
                if arr is not None:
                    lst[i] = arr[rows]
        self.cross_invalid = self.cross_invalid[rows]

    def step(self, tokens: np.ndarray, records: list | None = None) -> np.ndarray:
        """Feed one token per row; return next-token logits (B, V)."""
        dec = self.dec
        cfg = dec.config
        if self.pos >= cfg.max_len:
            raise LengthError(f"prefix exceeds max_len {cfg.max_len}")
        bsz = tokens.shape[0]
        d, h, dh = cfg.model_dim, cfg.heads, cfg.head_dim
        scale = 1.0 / math.sqrt(dh)
        x = T.embedding(dec.params["embed"], tokens[:, None]) * math.sqrt(d) + dec._pe[self.pos : self.pos + 1]
        for i in range(cfg.layers):
            pre = f"layers.{i}"
            hn = dec._ln(x, f"{pre}.ln1")
            q = dec._linear(hn, f"{pre}.self_attn.wq", f"{pre}.self_attn.bq").reshape(bsz, 1, h, dh).transpose(0, 2, 1, 3)
            k = dec._linear(hn, f"{pre}.self_attn.wk", f"{pre}.self_attn.bk").reshape(bsz, 1, h, dh).transpose(0, 2, 3, 1)
            v = dec._linear(hn, f"{pre}.self_attn.wv", f"{pre}.self_attn.bv").reshape(bsz, 1, h, dh).transpose(0, 2, 1, 3)
            if self.self_k[i] is None:
                self.self_k[i], self.self_v[i] = k.data, v.data
            else:
                self.self_k[i] = np.concatenate([self.self_k[i], k.data], axis=3)
                self.self_v[i] = np.concatenate([self.self_v[i], v.data], axis=2)
            alpha = T.softmax((q @ Tensor(self.self_k[i])) * scale, axis=-1)
            ctx = (alpha @ Tensor(self.self_v[i])).transpose(0, 2, 1, 3).reshape(bsz, 1, d)
            x = x + T.linear(ctx, dec.params[f"{pre}.self_attn.wo"])
            hn = dec._ln(x, f"{pre}.ln2")
            q = dec._linear(hn, f"{pre}.cross_attn.wq", f"{pre}.cross_attn.bq").reshape(bsz, 1, h, dh).transpose(0, 2, 1, 3)
            scores = (q @ Tensor(self.cross_k[i])) * scale
            alpha = T.softmax(T.masked_fill(scores, self.cross_invalid, -np.inf), axis=-1)
            ctx = (alpha @ Tensor(self.cross_v[i])).transpose(0, 2, 1, 3).reshape(bsz, 1, d)
            c = T.linear(ctx, dec.params[f"{pre}.cross_attn.wo"])
            if records is not None:
                records.append({"alpha": alpha.data, "out": c.data})
            x = x + c
            x = x + dec._ffn(dec._ln(x, f"{pre}.ln3"), f"{pre}.ff")
        x = dec._ln(x, "ln_out")
        self.pos += 1
        return dec._linear(x, "out.w", "out.b").data[:, 0, :]


def greedy_translate_batch(
    encoder: Encoder,
    decoder: Decoder,
    sources: Sequence[Sequence[int]],
    max_len: int | None = None,
    capture: bool = False,
) -> list[tuple[list[int], AttentionTrace | None]]:
    """Greedy decoding of many sentences at once.

    Each sentence stops at EOS (not included in the output) or after
    ``max_len`` tokens; argmax ties resolve to the lowest id.
    """
    if not sources:
        return []
    limit = min(max_len or decoder.config.max_len - 1, decoder.config.max_len - 1)
    states = encode(encoder, [list(s) for s in sources])
    mem = states.states.data
    bsz = len(sources)
    outputs: list[list[int]] = [[] for _ in range(bsz)]
    per_step: list[list[TraceStep]] = [[] for _ in range(bsz)]
    src_lens = states.mask.sum(axis=1)
    active = np.arange(bsz)
    tokens = np.full(bsz, BOS_ID, dtype=np.int64)
    with no_grad():
        cache = _StepCache(decoder, mem, states.mask)
        for _ in range(limit + 1):
            records: list | None = [] if capture else None
            logits = cache.step(tokens, records)
            nxt = logits.argmax(axis=-1)
            still = np.ones(active.size, dtype=bool)
            for j, b in enumerate(active):
                tok = int(nxt[j])
                if capture:
                    n = int(src_lens[b])
                    per_step[b].append(
                        TraceStep(
                            np.stack([r["alpha"][j, :, 0, :n] for r in records]),
                            np.stack([r["out"][j, 0] for r in records]),
                        )
                    )
                if tok == EOS_ID:
                    still[j] = False
                else:
                    outputs[b].append(tok)
                    still[j] = len(outputs[b]) < limit
            if not still.any():
                break
            if not still.all():
                cache.keep(np.flatnonzero(still))
            active = active[still]
            tokens = nxt[still].astype(np.int64)
    results = []
    for b in range(bsz):
        trace = None
        if capture:
            n = int(src_lens[b])
            trace = _assemble_trace(decoder, mem[b, :n].copy(), per_step[b], sources[b], outputs[b])
        results.append((outputs[b], trace))
    return results


def greedy_translate(
    encoder: Encoder, decoder: Decoder, source_ids: Sequence[int], max_len: int | None = None
) -> tuple[list[int], AttentionTrace]:
    """Greedy decoding with a full attention trace, one decode_step at a time."""
    limit = min(max_len or decoder.config.max_len - 1, decoder.config.max_len - 1)
    states = encode(encoder, list(source_ids))
    prefix = [BOS_ID]
    out: list[int] = []
    steps: list[TraceStep] = []
    while True:
        logits, step = decode_step(decoder, states, prefix, capture=True)
        steps.append(step)
        tok = int(np.argmax(logits))
        if tok == EOS_ID:
            break
        out.append(tok)
        prefix.append(tok)
        if len(out) >= limit:
            break
    return out, _assemble_trace(decoder, states.sentence(0).copy(), steps, source_ids, out)


def beam_translate(
    encoder: Encoder, decoder: Decoder, source_ids: Sequence[int], beam: int = 4, max_len: int | None = None
) -> list[int]:
    """Beam search on summed log-probabilities (no length normalisation)."""
    limit = min(max_len or decoder.config.max_len - 1, decoder.config.max_len - 1)
    states = encode(encoder, list(source_ids))
    hyps: list[tuple[float, list[int]]] = [(0.0, [BOS_ID])]
    finished: list[tuple[float, list[int]]] = []
    for _ in range(limit + 1):
        candidates: list[tuple[float, list[int]]] = []
        for score, seq in hyps:
            logits, _ = decode_step(decoder, states, seq)
            shifted = logits - logits.max()
            logp = shifted - math.log(np.exp(shifted).sum())
            for tok in np.argsort(-logp, kind="stable")[:beam]:
                candidates.append((score + float(logp[tok]), seq + [int(tok)]))
        # stable sort: equal scores keep hypothesis order, then token id order
        candidates.sort(key=lambda c: -c[0])
        hyps = []
        for score, seq in candidates:
            if seq[-1] == EOS_ID or len(seq) - 1 >= limit:
                finished.append((score, seq))
            else:
                hyps.append((score, seq))
            if len(hyps) == beam:
                break
        if not hyps:
            break
        if finished and max(f[0] for f in finished) >= hyps[0][0]:
            break
    pool = finished or hyps
    best = max(pool, key=lambda f: f[0])
    return [t for t in best[1][1:] if t != EOS_ID]


# ---------------------------------------------------------------------------
# training loss
# ---------------------------------------------------------------------------


def seq2seq_loss(
    encoder: Encoder,
    decoder: Decoder,
    src: Sequence[Sequence[int]],
    tgt: Sequence[Sequence[int]],
    drop_seed: int | None = None,
    step: int = 0,
) -> Tensor:
    """Mean token cross-entropy of teacher-forced decoding (targets get BOS/EOS here)."""
    src_ids, src_mask = pad_batch(src)
    tin, tmask = pad_batch([[BOS_ID, *t] for t in tgt])
    tout, _ = pad_batch([[*t, EOS_ID] for t in tgt])
    p = encoder.config.dropout if drop_seed is not None else 0.0
    edrop = _Dropout(p, drop_seed or 0, step, encoder.name) if p > 0 else None
    ddrop = _Dropout(p, drop_seed or 0, step, decoder.name) if p > 0 else None
    memory = encoder.forward(src_ids, src_mask, edrop)
    logits = decoder.forward(tin, tmask, memory, src_mask, ddrop)
    return T.cross_entropy(logits, tout, ignore_index=PAD_ID)


def encoder_param_count(cfg: TransformerConfig) -> int:
    d, ff, L, V = cfg.model_dim, cfg.ff_dim, cfg.layers, cfg.src_vocab
    per_layer = 2 * d + (3 * (d * d + d) + d * d) + 2 * d + (d * ff + ff + ff * d + d)
    return V * d + L * per_layer + 2 * d


def decoder_param_count(cfg: TransformerConfig) -> int:
    d, ff, L, V = cfg.model_dim, cfg.ff_dim, cfg.layers, cfg.tgt_vocab
    attn = 3 * (d * d + d) + d * d
    per_layer = 3 * (2 * d) + 2 * attn + (d * ff + ff + ff * d + d)
    return V * d + L * per_layer + 2 * d + d * V + V
