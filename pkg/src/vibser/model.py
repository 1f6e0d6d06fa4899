"""Composite model: two disentanglement branches, two adapters, and the toy
decoder, with parameter naming, task losses, inference, and persistence."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .adapters import AdapterParams, adapt, init_adapter
from .datagen import Utterance
from .decoder import (
    EOS,
    LIT_DESC,
    LIT_EMOTION,
    LIT_TRANSCRIPT,
    SEP,
    TASK_ASR,
    TASK_SER_SED,
    DecoderParams,
    Vocab,
    assemble_prompt,
    decode_loss,
    generate,
    init_decoder,
    load_checkpoint,
    save_checkpoint,
)
from .diffcore import Tensor
from .disentangler import (
    BranchParams,
    branch_kl,
    encode_posterior,
    init_branch,
    sample_latent,
    weighted_sum,
)
from .metrics import MetricReport, evaluate_corpus

__all__ = ["ModelConfig", "SerModel", "build_vocab", "run_inference", "evaluate_model"]

_CKPT_NAME = "checkpoint.serd"
_META_NAME = "model_meta.json"


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 16
    hidden_width: int | None = None  # defaults to the feature dim
    downsample_k: int = 4
    emb_dim: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    context_limit: int = 256
    ffn_mult: int = 4
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_targets: tuple[str, ...] = ("wq", "wk", "wv", "wo", "fw1", "fw2")


def build_vocab(corpus: Sequence[Utterance]) -> Vocab:
    words: set[str] = set()
    for utt in corpus:
        words.update(utt.transcript)
        words.update(utt.descriptor_caption)
    return Vocab.build(words)


class SerModel:
    def __init__(self, cfg: ModelConfig, vocab: Vocab, content: BranchParams,
                 descriptor: BranchParams, adapter_con: AdapterParams,
                 adapter_des: AdapterParams, decoder: DecoderParams,
                 n_feat_layers: int, feat_dim: int):
        self.cfg = cfg
        self.vocab = vocab
        self.content = content
        self.descriptor = descriptor
        self.adapter_con = adapter_con
        self.adapter_des = adapter_des
        self.decoder = decoder
        self.n_feat_layers = n_feat_layers
        self.feat_dim = feat_dim

    @classmethod
    def build(cls, seed: int, vocab: Vocab, n_feat_layers: int, feat_dim: int,
              cfg: ModelConfig | None = None) -> "SerModel":
        cfg = cfg or ModelConfig()
        rng = np.random.default_rng(np.random.SeedSequence([seed, 21]))
        hidden = cfg.hidden_width or feat_dim
        return cls(
            cfg=cfg,
            vocab=vocab,
            content=init_branch(rng, n_feat_layers, feat_dim, hidden, cfg.latent_dim),
            descriptor=init_branch(rng, n_feat_layers, feat_dim, hidden, cfg.latent_dim),
            adapter_con=init_adapter(rng, cfg.downsample_k, cfg.latent_dim, cfg.emb_dim),
            adapter_des=init_adapter(rng, cfg.downsample_k, cfg.latent_dim, cfg.emb_dim),
            decoder=init_decoder(
                rng, len(vocab), emb_dim=cfg.emb_dim, n_blocks=cfg.n_blocks,
                n_heads=cfg.n_heads, context_limit=cfg.context_limit,
                ffn_mult=cfg.ffn_mult, lora_rank=cfg.lora_rank,
                lora_alpha=cfg.lora_alpha, lora_targets=cfg.lora_targets),
            n_feat_layers=n_feat_layers,
            feat_dim=feat_dim,
        )

    # -- parameter bookkeeping ------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.content.named("content"))
        out.update(self.descriptor.named("descriptor"))
        out.update(self.adapter_con.named("adapter_con"))
        out.update(self.adapter_des.named("adapter_des"))
        out.update(self.decoder.named("decoder"))
        return out

    def group_names(self, group: str) -> frozenset[str]:
        names = self.named_params().keys()
        if group == "content_branch":
            return frozenset(n for n in names if n.startswith("content."))
        if group == "descriptor_branch":
            return frozenset(n for n in names if n.startswith("descriptor."))
        if group == "content_adapter":
            return frozenset(n for n in names if n.startswith("adapter_con."))
        if group == "descriptor_adapter":
            return frozenset(n for n in names if n.startswith("adapter_des."))
        if group == "decoder_lora":
            return frozenset(n for n in names if n.startswith("decoder.") and ".lora." in n)
        if group == "decoder_base":
            return frozenset(n for n in names if n.startswith("decoder.") and ".lora." not in n)
        raise ValueError(f"unknown parameter group {group!r}")

    # -- forward paths ---------------------------------------------------------

    def _branch_slot(self, branch: BranchParams, adapter: AdapterParams, feats: Tensor,
                     mode: str, noise_rng: np.random.Generator | None):
        h = weighted_sum(feats, branch.layer_logits)
        post = encode_posterior(branch, h)
        if mode == "train":
            if noise_rng is None:
                raise ValueError("train mode requires a noise rng")
            noise = noise_rng.standard_normal(post.mu.shape)
            z = sample_latent(post, "train", noise)
        else:
            z = sample_latent(post, "infer")
        return adapt(adapter, z), branch_kl(post)

    def target_ids(self, task: str, utt: Utterance) -> np.ndarray:
        if task == TASK_ASR:
            tokens = [LIT_TRANSCRIPT, *utt.transcript, EOS]
        elif task == TASK_SER_SED:
            tokens = [LIT_TRANSCRIPT, *utt.transcript, SEP,
                      LIT_DESC, *utt.descriptor_caption, SEP,
                      LIT_EMOTION, utt.emotion, EOS]
        else:
            raise ValueError(f"unknown task {task!r}")
        return self.vocab.encode(tokens)

    def task_loss(self, utt: Utterance, task: str, *, mode: str = "train",
                  zero_content: bool = False, zero_descriptor: bool = False,
                  noise_rng: np.random.Generator | None = None,
                  ) -> tuple[Tensor, Tensor | None, Tensor | None]:
        """Teacher-forced decoder loss for one utterance plus the per-branch
        KL terms (None for a zeroed branch)."""
        feats = dc.constant(utt.features.astype(np.float64))
        s_con = kl_con = None
        if not zero_content:
            s_con, kl_con = self._branch_slot(self.content, self.adapter_con, feats,
                                              mode, noise_rng)
        s_des = kl_des = None
        if not zero_descriptor:
            s_des, kl_des = self._branch_slot(self.descriptor, self.adapter_des, feats,
                                              mode, noise_rng)
        prompt = assemble_prompt(self.vocab, s_con, s_des, task,
                                 emb_dim=self.cfg.emb_dim,
                                 context_limit=self.cfg.context_limit)
        loss = decode_loss(self.decoder, prompt, self.target_ids(task, utt))
        return loss, kl_con, kl_des

    def infer_response(self, utt: Utterance, *, ablate_descriptor: bool = False,
                       max_len: int = 48) -> list[str]:
        """Greedy SER-SED response for one utterance (inference latents Z=mu)."""
        feats = dc.constant(utt.features.astype(np.float64))
        s_con, _ = self._branch_slot(self.content, self.adapter_con, feats, "infer", None)
        if ablate_descriptor:
            s_des = None
        else:
            s_des, _ = self._branch_slot(self.descriptor, self.adapter_des, feats,
                                         "infer", None)
        prompt = assemble_prompt(self.vocab, s_con, s_des, TASK_SER_SED,
                                 emb_dim=self.cfg.emb_dim,
                                 context_limit=self.cfg.context_limit)
        ids = generate(self.decoder, prompt, max_len, eos_id=self.vocab.eos_id)
        return self.vocab.decode(ids)

    # -- persistence -----------------------------------------------------------

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / _CKPT_NAME, self.named_params())
        meta = {
            "format": "vibser-model",
            "version": 1,
            "vocab": list(self.vocab.tokens),
            "config": asdict(self.cfg),
            "n_feat_layers": self.n_feat_layers,
            "feat_dim": self.feat_dim,
        }
        (out / _META_NAME).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, run_dir) -> "SerModel":
        run = Path(run_dir)
        ckpt_path = run / _CKPT_NAME if run.is_dir() else run
        meta_path = ckpt_path.parent / _META_NAME
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        cfg_dict = dict(meta["config"])
        cfg_dict["lora_targets"] = tuple(cfg_dict["lora_targets"])
        cfg = ModelConfig(**cfg_dict)
        model = cls.build(0, Vocab(meta["vocab"]), meta["n_feat_layers"],
                          meta["feat_dim"], cfg)
        arrays = load_checkpoint(ckpt_path)
        params = model.named_params()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ValueError(
                f"checkpoint does not match the model structure "
                f"(missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
        for name, tensor in params.items():
            arr = arrays[name]
            if arr.shape != tensor.data.shape:
                raise ValueError(
                    f"checkpoint shape mismatch for {name!r}: "
                    f"{arr.shape} vs {tensor.data.shape}")
            tensor.data = arr
        return model


# ---------------------------------------------------------------------------
# inference over a corpus


def _worker_count() -> int:
    raw = os.environ.get("SER_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_inference(model: SerModel, corpus: Sequence[Utterance], *,
                  ablate_descriptor: bool = False, max_len: int = 48,
                  ) -> dict[str, list[str]]:
    """Generate one SER-SED response per utterance. Utterances are
    independent; SER_THREADS caps the worker pool and the result is collected
    by index, so the output is identical at any thread count."""

    def one(utt: Utterance) -> list[str]:
        return model.infer_response(utt, ablate_descriptor=ablate_descriptor, max_len=max_len)

    workers = _worker_count()
    if workers == 1:
        responses = [one(u) for u in corpus]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            responses = list(pool.map(one, corpus))
    return {utt.id: resp for utt, resp in zip(corpus, responses)}


def evaluate_model(model: SerModel, corpus: Sequence[Utterance], *,
                   ablate_descriptor: bool = False, max_len: int = 48) -> MetricReport:
    outputs = run_inference(model, corpus, ablate_descriptor=ablate_descriptor,
                            max_len=max_len)
    references = {u.id: (u.transcript, u.descriptor_caption) for u in corpus}
    labels = {u.id: u.emotion for u in corpus}
    return evaluate_corpus(outputs, references, labels)
