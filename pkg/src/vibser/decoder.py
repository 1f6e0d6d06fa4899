"""Toy autoregressive transformer decoder with embedding-slot splicing.

The prompt is a fixed token template whose content and descriptor slots are
replaced by injected embedding sequences; generation is greedy and
deterministic. Optional low-rank deltas adapt the attention and feed-forward
projections while the base weights stay frozen.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .datagen import EMOTIONS
from .diffcore import Tensor

__all__ = [
    "PAD", "BOS", "EOS", "SEP", "SLOT_CONTENT", "SLOT_DESC",
    "TASK_ASR", "TASK_SER_SED",
    "Vocab", "PromptSequence", "ParsedResponse",
    "LoraDelta", "BlockParams", "DecoderParams",
    "ContextOverflowError", "CheckpointFormatError",
    "assemble_prompt", "embed_prompt", "forward_hidden", "decoder_logits",
    "decode_loss", "generate", "parse_response", "lora_apply",
    "init_decoder", "save_checkpoint", "load_checkpoint",
]

PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"
SEP = "<sep>"
SLOT_CONTENT = "<slot:content>"
SLOT_DESC = "<slot:descriptor>"
_SPECIALS = (PAD, BOS, EOS, SEP, SLOT_CONTENT, SLOT_DESC)

TASK_ASR = "asr"
TASK_SER_SED = "ser_sed"

LIT_TASK = "task:"
LIT_CONTENT = "content:"
LIT_DESC = "descriptor:"
LIT_RESPONSE = "response:"
LIT_TRANSCRIPT = "transcript:"
LIT_EMOTION = "emotion:"
_LITERALS = (LIT_TASK, TASK_ASR, TASK_SER_SED, LIT_CONTENT, LIT_DESC,
             LIT_RESPONSE, LIT_TRANSCRIPT, LIT_EMOTION)


class ContextOverflowError(ValueError):
    """Prompt (plus target) exceeds the decoder context limit."""


class CheckpointFormatError(ValueError):
    """Raised when a checkpoint file is malformed."""


class Vocab:
    """Dense token<->id maps with whitespace tokens and the special symbols."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = tuple(tokens)
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        for special in _SPECIALS:
            if special not in self._index:
                raise ValueError(f"vocabulary is missing special token {special!r}")

    @classmethod
    def build(cls, words: Iterable[str]) -> "Vocab":
        """Specials, then grammar literals and emotion labels, then the given
        corpus words sorted; order is deterministic."""
        fixed = list(_SPECIALS) + list(_LITERALS) + list(EMOTIONS)
        seen = set(fixed)
        extra = sorted(set(words) - seen)
        return cls(fixed + extra)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise ValueError(f"unknown token {token!r}") from None

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        return np.array([self.id(t) for t in tokens], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]


@dataclass
class PromptSequence:
    """Token template segments with the two embedding slots spliced in.

    segments: (head token ids, ids between the slots, tail ids); the content
    slot sits between head and mid, the descriptor slot between mid and tail.
    """

    head_ids: np.ndarray
    mid_ids: np.ndarray
    tail_ids: np.ndarray
    s_con: Tensor
    s_des: Tensor
    content_span: tuple[int, int]
    desc_span: tuple[int, int]

    @property
    def length(self) -> int:
        return (len(self.head_ids) + len(self.mid_ids) + len(self.tail_ids)
                + self.s_con.shape[0] + self.s_des.shape[0])


def assemble_prompt(vocab: Vocab, s_con: Tensor | None, s_des: Tensor | None,
                    task: str, emb_dim: int, context_limit: int = 256) -> PromptSequence:
    """Fill the fixed template "BOS task:<task> content: <slot> descriptor:
    <slot> response:"; an absent branch contributes a single all-zero vector."""
    if task not in (TASK_ASR, TASK_SER_SED):
        raise ValueError(f"unknown task {task!r}")
    if s_con is None:
        s_con = dc.zeros((1, emb_dim))
    if s_des is None:
        s_des = dc.zeros((1, emb_dim))
    for name, s in (("content", s_con), ("descriptor", s_des)):
        if s.ndim != 2 or s.shape[1] != emb_dim:
            raise ValueError(f"{name} slot must be [*, {emb_dim}], got {s.shape}")
    head = vocab.encode([BOS, LIT_TASK, task, LIT_CONTENT])
    mid = vocab.encode([LIT_DESC])
    tail = vocab.encode([LIT_RESPONSE])
    a, b = s_con.shape[0], s_des.shape[0]
    prompt = PromptSequence(
        head_ids=head, mid_ids=mid, tail_ids=tail, s_con=s_con, s_des=s_des,
        content_span=(len(head), len(head) + a),
        desc_span=(len(head) + a + len(mid), len(head) + a + len(mid) + b),
    )
    if prompt.length > context_limit:
        raise ContextOverflowError(
            f"prompt length {prompt.length} exceeds context limit {context_limit}")
    return prompt


# ---------------------------------------------------------------------------
# parameters


@dataclass
class LoraDelta:
    a: Tensor  # [r, n]
    b: Tensor  # [m, r]
    alpha: float


def lora_apply(w: Tensor, a: Tensor, b: Tensor, alpha: float) -> Tensor:
    """Effective weight W + (alpha/r) * B @ A; only A and B are meant to train."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("low-rank factors must be 2-D")
    r = a.shape[0]
    if r < 1 or b.shape[1] != r:
        raise ValueError(f"rank mismatch: A is {a.shape}, B is {b.shape}")
    if (b.shape[0], a.shape[1]) != tuple(w.shape):
        raise ValueError(f"delta shape {(b.shape[0], a.shape[1])} does not match W {w.shape}")
    return dc.add(w, dc.scale(dc.matmul(b, a), alpha / r))


_BLOCK_WEIGHTS = ("wq", "wk", "wv", "wo", "fw1", "fw2")


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    fw1: Tensor
    fb1: Tensor
    fw2: Tensor
    fb2: Tensor
    lora: dict[str, LoraDelta] = field(default_factory=dict)

    def effective(self, name: str) -> Tensor:
        w = getattr(self, name)
        delta = self.lora.get(name)
        if delta is None:
            return w
        return lora_apply(w, delta.a, delta.b, delta.alpha)


@dataclass
class DecoderParams:
    tok_emb: Tensor  # [V, E]; output projection is tied to this table
    pos_emb: Tensor  # [context, E]
    blocks: list[BlockParams]
    lnf_g: Tensor
    lnf_b: Tensor
    n_heads: int
    context_limit: int

    @property
    def emb_dim(self) -> int:
        return self.tok_emb.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.tok_emb.shape[0]

    def named(self, prefix: str = "decoder") -> dict[str, Tensor]:
        out = {f"{prefix}.tok_emb": self.tok_emb, f"{prefix}.pos_emb": self.pos_emb}
        for i, blk in enumerate(self.blocks):
            base = f"{prefix}.block{i}"
            for name in ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv",
                         "wo", "bo", "ln2_g", "ln2_b", "fw1", "fb1", "fw2", "fb2"):
                out[f"{base}.{name}"] = getattr(blk, name)
            for pname in sorted(blk.lora):
                out[f"{base}.lora.{pname}.a"] = blk.lora[pname].a
                out[f"{base}.lora.{pname}.b"] = blk.lora[pname].b
        out[f"{prefix}.lnf_g"] = self.lnf_g
        out[f"{prefix}.lnf_b"] = self.lnf_b
        return out


def init_decoder(rng: np.random.Generator, vocab_size: int, emb_dim: int = 64,
                 n_blocks: int = 2, n_heads: int = 4, context_limit: int = 256,
                 ffn_mult: int = 4, lora_rank: int = 8, lora_alpha: float = 16.0,
                 lora_targets: Sequence[str] = _BLOCK_WEIGHTS) -> DecoderParams:
    if emb_dim % n_heads:
        raise ValueError("emb_dim must be divisible by n_heads")
    unknown = set(lora_targets) - set(_BLOCK_WEIGHTS)
    if unknown:
        raise ValueError(f"unknown lora targets {sorted(unknown)}")

    def w(shape, scl=0.02):
        return dc.parameter(rng.standard_normal(shape) * scl)

    def ones(n):
        return dc.parameter(np.ones(n))

    def zeros_p(*shape):
        return dc.parameter(np.zeros(shape))

    blocks = []
    for _ in range(n_blocks):
        blk = BlockParams(
            ln1_g=ones(emb_dim), ln1_b=zeros_p(emb_dim),
            wq=w((emb_dim, emb_dim)), bq=zeros_p(emb_dim),
            wk=w((emb_dim, emb_dim)), bk=zeros_p(emb_dim),
            wv=w((emb_dim, emb_dim)), bv=zeros_p(emb_dim),
            wo=w((emb_dim, emb_dim)), bo=zeros_p(emb_dim),
            ln2_g=ones(emb_dim), ln2_b=zeros_p(emb_dim),
            fw1=w((emb_dim, ffn_mult * emb_dim)), fb1=zeros_p(ffn_mult * emb_dim),
            fw2=w((ffn_mult * emb_dim, emb_dim)), fb2=zeros_p(emb_dim),
        )
        if lora_rank > 0:
            for name in lora_targets:
                m, n = getattr(blk, name).shape
                # standard init: A random, B zero, so the delta starts at zero
                blk.lora[name] = LoraDelta(
                    a=w((lora_rank, n)), b=zeros_p(m, lora_rank), alpha=lora_alpha)
        blocks.append(blk)
    return DecoderParams(
        tok_emb=w((vocab_size, emb_dim)),
        pos_emb=w((context_limit, emb_dim)),
        blocks=blocks,
        lnf_g=ones(emb_dim), lnf_b=zeros_p(emb_dim),
        n_heads=n_heads, context_limit=context_limit,
    )


# ---------------------------------------------------------------------------
# forward


_MASK_CACHE: dict[int, Tensor] = {}


def _causal_mask(n: int) -> Tensor:
    mask = _MASK_CACHE.get(n)
    if mask is None:
        m = np.triu(np.full((n, n), -1e30), k=1)  # finite so the NaN screen stays quiet
        m.setflags(write=False)
        mask = dc.constant(m)
        _MASK_CACHE[n] = mask
    return mask


def embed_prompt(params: DecoderParams, prompt: PromptSequence) -> Tensor:
    parts = [
        dc.embedding(params.tok_emb, prompt.head_ids),
        prompt.s_con,
        dc.embedding(params.tok_emb, prompt.mid_ids),
        prompt.s_des,
        dc.embedding(params.tok_emb, prompt.tail_ids),
    ]
    return dc.concat(parts, axis=0)


def forward_hidden(params: DecoderParams, emb: Tensor) -> Tensor:
    """Causal transformer stack over an embedded [P, E] sequence."""
    p = emb.shape[0]
    if p > params.context_limit:
        raise ContextOverflowError(f"sequence length {p} exceeds context {params.context_limit}")
    h = dc.add(emb, dc.narrow(params.pos_emb, 0, 0, p))
    mask = _causal_mask(p)
    dk = params.emb_dim // params.n_heads
    inv_sqrt_dk = 1.0 / np.sqrt(dk)
    for blk in params.blocks:
        a = dc.layer_norm(h, blk.ln1_g, blk.ln1_b)
        q = dc.add(dc.matmul(a, blk.effective("wq")), blk.bq)
        k = dc.add(dc.matmul(a, blk.effective("wk")), blk.bk)
        v = dc.add(dc.matmul(a, blk.effective("wv")), blk.bv)
        heads = []
        for i in range(params.n_heads):
            qh = dc.narrow(q, 1, i * dk, dk)
            kh = dc.narrow(k, 1, i * dk, dk)
            vh = dc.narrow(v, 1, i * dk, dk)
            scores = dc.add(dc.scale(dc.matmul(qh, dc.transpose(kh)), inv_sqrt_dk), mask)
            heads.append(dc.matmul(dc.softmax(scores, axis=-1), vh))
        att = dc.matmul(dc.concat(heads, axis=1), blk.effective("wo"))
        h = dc.add(h, dc.add(att, blk.bo))
        f = dc.layer_norm(h, blk.ln2_g, blk.ln2_b)
        ff = dc.add(dc.matmul(dc.gelu(dc.add(dc.matmul(f, blk.effective("fw1")), blk.fb1)),
                              blk.effective("fw2")), blk.fb2)
        h = dc.add(h, ff)
    return dc.layer_norm(h, params.lnf_g, params.lnf_b)


def decoder_logits(params: DecoderParams, hidden: Tensor) -> Tensor:
    return dc.matmul(hidden, dc.transpose(params.tok_emb))


def decode_loss(params: DecoderParams, prompt: PromptSequence, target) -> Tensor:
    """Teacher-forced sum of per-token cross entropy over the target positions
    only; differentiable through the injected slot embeddings."""
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    m = target.shape[0]
    if m < 1:
        raise ValueError("target must contain at least one token")
    p = prompt.length
    if p + m > params.context_limit:
        raise ContextOverflowError(
            f"prompt ({p}) plus target ({m}) exceeds context {params.context_limit}")
    emb = embed_prompt(params, prompt)
    if m > 1:
        emb = dc.concat([emb, dc.embedding(params.tok_emb, target[:-1])], axis=0)
    hidden = forward_hidden(params, emb)
    logits = decoder_logits(params, dc.narrow(hidden, 0, p - 1, m))
    return dc.reduce_sum(dc.cross_entropy_rows(logits, target))


def generate(params: DecoderParams, prompt: PromptSequence, max_len: int,
             eos_id: int) -> np.ndarray:
    """Greedy argmax decoding, deterministic: the emitted sequence includes
    EOS when reached, is capped at max_len tokens, and argmax ties break
    toward the lowest token id (numpy argmax returns the first maximum)."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    generated: list[int] = []
    prompt_emb = embed_prompt(params, prompt)
    for _ in range(max_len):
        emb = prompt_emb
        if generated:
            emb = dc.concat([emb, dc.embedding(params.tok_emb, np.array(generated))], axis=0)
        hidden = forward_hidden(params, emb)
        last = dc.narrow(hidden, 0, emb.shape[0] - 1, 1)
        logits = decoder_logits(params, last).data[0]
        next_id = int(np.argmax(logits))
        generated.append(next_id)
        if next_id == int(eos_id):
            break
    return np.array(generated, dtype=np.int64)


@dataclass
class ParsedResponse:
    transcript: list[str] | None
    descriptor: list[str] | None
    emotion: str | None


def parse_response(tokens: Sequence[str]) -> ParsedResponse:
    """Total parse of "transcript: ... SEP descriptor: ... SEP emotion: <label>";
    missing or malformed fields come back absent."""
    cleaned = [t for t in tokens if t not in (PAD, BOS, EOS)]
    segments: list[list[str]] = [[]]
    for tok in cleaned:
        if tok == SEP:
            segments.append([])
        else:
            segments[-1].append(tok)
    transcript = descriptor = emotion = None
    for seg in segments:
        if not seg:
            continue
        key, rest = seg[0], seg[1:]
        if key == LIT_TRANSCRIPT and transcript is None and rest:
            transcript = rest
        elif key == LIT_DESC and descriptor is None and rest:
            descriptor = rest
        elif key == LIT_EMOTION and emotion is None and rest:
            if rest[0] in EMOTIONS:
                emotion = rest[0]
    return ParsedResponse(transcript=transcript, descriptor=descriptor, emotion=emotion)


# ---------------------------------------------------------------------------
# checkpoint format


_CKPT_MAGIC = b"SERD"
_CKPT_VERSION = 1


def save_checkpoint(path, named: Mapping[str, Tensor] | Mapping[str, np.ndarray]) -> None:
    """Versioned binary checkpoint: magic, version u32, then per-parameter
    blocks (name length u32, name bytes, rank u32, dims u32..., f32 payload)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        for name, value in named.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            arr = np.ascontiguousarray(arr, dtype="<f4")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a SERD checkpoint back into float64 arrays (values are exactly the
    stored float32s)."""
    blob = Path(path).read_bytes()
    if len(blob) < 8 or blob[:4] != _CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a SERD checkpoint")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != _CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    off = 8
    n = len(blob)
    while off < n:
        if off + 4 > n:
            raise CheckpointFormatError(f"{path}: truncated block header at offset {off}")
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        if off + name_len + 4 > n:
            raise CheckpointFormatError(f"{path}: truncated name at offset {off}")
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        if off + 4 * rank > n:
            raise CheckpointFormatError(f"{path}: truncated dims for {name!r}")
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        nbytes = 4 * count
        if off + nbytes > n:
            raise CheckpointFormatError(
                f"{path}: payload for {name!r} expects {nbytes} bytes, "
                f"only {n - off} remain")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims)
        off += nbytes
        if name in out:
            raise CheckpointFormatError(f"{path}: duplicate parameter {name!r}")
        out[name] = arr.astype(np.float64)
    return out
