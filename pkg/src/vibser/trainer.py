"""Two-stage alternating fine-tuning with the variational-bottleneck objective.

Stage "ContentASR" trains the content branch, content adapter and (by
default) the decoder's low-rank deltas on transcript-only batches with the
descriptor slot zeroed; stage "DescriptorJoint" freezes the content side and
trains the descriptor branch and adapter on batches that alternate between
the joint SER-SED task and ASR. The decoder base plays the role of the
pretrained language model: it is fitted once in a warm-start phase with both
slots zeroed and stays frozen through every alternating stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .datagen import Utterance
from .decoder import TASK_ASR, TASK_SER_SED
from .diffcore import NonFiniteError, Tensor, forward_backward
from .model import ModelConfig, SerModel, build_vocab, evaluate_model

__all__ = [
    "STAGE_CONTENT_ASR",
    "STAGE_DESCRIPTOR_JOINT",
    "StageMask",
    "TrainConfig",
    "TrainingDiverged",
    "AdamW",
    "vib_loss",
    "set_stage",
    "make_schedule",
    "train",
    "sweep_beta",
    "converged_mean_kl",
]

STAGE_CONTENT_ASR = "ContentASR"
STAGE_DESCRIPTOR_JOINT = "DescriptorJoint"
_STAGE_WARMUP = "Warmup"


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


@dataclass(frozen=True)
class StageMask:
    """Trainable/frozen parameter-name partition for one training stage."""

    stage: str
    trainable: frozenset[str]
    frozen: frozenset[str]
    zero_descriptor_slot: bool

    def __post_init__(self):
        if self.trainable & self.frozen:
            raise ValueError("trainable and frozen sets overlap")


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 1e-2
    epochs_per_stage: int = 1
    cycles: int = 4
    batch_size: int = 8
    stage1_lr: float = 2e-4
    stage2_peak_lr: float = 2e-5
    warmup_frac: float = 0.03
    seed: int = 0
    task_mixing: str = "round_robin"
    # decoder warm-start (stand-in for the pretrained LM; base frozen afterwards)
    warmup_epochs: int = 2
    warmup_lr: float = 1e-3
    lora_both_stages: bool = True
    clip_norm: float = 1.0
    weight_decay: float = 0.01

    def validate(self) -> None:
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0 <= self.warmup_frac < 1):
            raise ValueError("warmup_frac must be in [0, 1)")
        if self.cycles < 1 or self.epochs_per_stage < 1:
            raise ValueError("cycles and epochs_per_stage must be >= 1")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.task_mixing != "round_robin":
            raise ValueError(f"unsupported task mixing {self.task_mixing!r}")


def vib_loss(task_loss, kl_con, kl_des, beta: float):
    """task + beta * (kl_con + kl_des); a None kl_des (descriptor branch
    inactive in ContentASR) is excluded. beta = 0 returns the task loss
    unchanged."""
    task_loss = task_loss if isinstance(task_loss, Tensor) else dc.constant(task_loss)
    if beta < 0:
        raise ValueError("beta must be >= 0")
    if beta == 0:
        return task_loss
    kl_con = kl_con if isinstance(kl_con, Tensor) else dc.constant(kl_con)
    if kl_des is None:
        reg = kl_con
    else:
        kl_des = kl_des if isinstance(kl_des, Tensor) else dc.constant(kl_des)
        reg = dc.add(kl_con, kl_des)
    return dc.add(task_loss, dc.scale(reg, beta))


def set_stage(model: SerModel, stage: str, train_lora: bool = True) -> StageMask:
    """Fig-2 style partition: the stage's own branch and adapter train (plus
    the decoder deltas when enabled); the opposing branch, its adapter, and
    the decoder base are frozen. The synthetic feature stack has no encoder
    parameters, so the 'feature encoder never trains' clause is vacuous."""
    content = model.group_names("content_branch") | model.group_names("content_adapter")
    descriptor = model.group_names("descriptor_branch") | model.group_names("descriptor_adapter")
    lora = model.group_names("decoder_lora")
    base = model.group_names("decoder_base")
    if stage == STAGE_CONTENT_ASR:
        trainable = content | (lora if train_lora else frozenset())
    elif stage == STAGE_DESCRIPTOR_JOINT:
        trainable = descriptor | lora
    else:
        raise ValueError(f"unknown stage {stage!r}")
    everything = content | descriptor | lora | base
    return StageMask(
        stage=stage,
        trainable=frozenset(trainable),
        frozen=frozenset(everything - trainable),
        zero_descriptor_slot=stage == STAGE_CONTENT_ASR,
    )


def make_schedule(stage: str, total_steps: int, config: TrainConfig) -> Callable[[int], float]:
    """Stage 1: linear warmup to a constant learning rate. Stage 2: linear
    warmup to the peak, then cosine decay to zero at total_steps. Steps beyond
    total_steps clamp to the final value."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if stage == STAGE_CONTENT_ASR:
        peak, cosine = config.stage1_lr, False
    elif stage == STAGE_DESCRIPTOR_JOINT:
        peak, cosine = config.stage2_peak_lr, True
    else:
        raise ValueError(f"unknown stage {stage!r}")
    warm = int(config.warmup_frac * total_steps) if config.warmup_frac > 0 else 0

    def lr_at(step: int) -> float:
        if step < warm:
            return peak * step / warm
        if not cosine:
            return peak
        s = min(step, total_steps)
        if total_steps == warm:
            return 0.0 if step >= total_steps else peak
        frac = (s - warm) / (total_steps - warm)
        return peak * 0.5 * (1.0 + math.cos(math.pi * frac))

    return lr_at


def _constant_warm_schedule(peak: float, total_steps: int, frac: float) -> Callable[[int], float]:
    warm = int(frac * total_steps) if frac > 0 else 0

    def lr_at(step: int) -> float:
        if step < warm:
            return peak * step / warm
        return peak

    return lr_at


class AdamW:
    """Decoupled-weight-decay adaptive moments; decay applies to matrices
    (ndim >= 2) only, so biases, layer norms, and layer logits are exempt."""

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray],
             lr: float, names: Sequence[str]) -> None:
        for name in names:
            g = grads[name]
            p = params[name]
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self._m[name] = m
                self._v[name] = np.zeros_like(p.data)
                self._t[name] = 0
            v = self._v[name]
            self._t[name] += 1
            t = self._t[name]
            m[:] = self.beta1 * m + (1 - self.beta1) * g
            v[:] = self.beta2 * v + (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            update = lr * mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                update = update + lr * self.weight_decay * p.data
            p.data = p.data - update


def _clip_global_norm(grads: dict[str, np.ndarray], names: Sequence[str],
                      max_norm: float) -> None:
    if max_norm <= 0:
        return
    total = math.sqrt(sum(float(np.sum(grads[n] ** 2)) for n in names))
    if total > max_norm:
        factor = max_norm / total
        for n in names:
            grads[n] = grads[n] * factor


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def train(config: TrainConfig, corpus: Sequence[Utterance], *,
          model_config: ModelConfig | None = None,
          on_step: Callable[[SerModel, str, int], None] | None = None,
          ) -> tuple[SerModel, list[dict]]:
    """Run the warm-start phase then `cycles` alternations of the two stages.

    Returns the trained model and the per-step training log (one dict per
    optimizer step with cycle, stage, step, task, loss, kl terms and lr).
    Deterministic for a fixed config; a non-finite loss aborts with
    TrainingDiverged carrying the offending step index.
    """
    config.validate()
    if not corpus:
        raise ValueError("corpus must be non-empty")
    shapes = {(u.features.shape[0], u.features.shape[2]) for u in corpus}
    if len(shapes) != 1:
        raise ValueError(f"corpus mixes feature geometries: {sorted(shapes)}")
    (n_layers, feat_dim), = shapes

    vocab = build_vocab(corpus)
    model = SerModel.build(config.seed, vocab, n_layers, feat_dim, model_config)
    params = model.named_params()
    optimizer = AdamW(weight_decay=config.weight_decay)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 31]))
    noise_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 32]))

    n = len(corpus)
    steps_per_epoch = -(-n // config.batch_size)
    log: list[dict] = []
    global_step = 0

    def run_batch(batch_ids, task: str, stage_name: str, cycle: int, lr: float,
                  trainable: frozenset[str], beta: float, zero_desc: bool,
                  zero_con: bool = False) -> None:
        nonlocal global_step
        batch = [corpus[int(i)] for i in batch_ids]
        holder: dict[str, float] = {}

        def graph(_params):
            total = None
            kc_vals: list[Tensor] = []
            kd_vals: list[Tensor] = []
            for utt in batch:
                loss_u, kl_con, kl_des = model.task_loss(
                    utt, task, mode="train", zero_content=zero_con,
                    zero_descriptor=zero_desc, noise_rng=noise_rng)
                if kl_con is not None:
                    kc_vals.append(kl_con)
                if kl_des is not None:
                    kd_vals.append(kl_des)
                if kl_con is None:
                    term = loss_u  # warm-start: no branch is active
                else:
                    term = vib_loss(loss_u, kl_con, kl_des, beta)
                total = term if total is None else dc.add(total, term)
            holder["kl_con"] = (sum(t.item() for t in kc_vals) / len(kc_vals)) if kc_vals else 0.0
            holder["kl_des"] = (sum(t.item() for t in kd_vals) / len(kd_vals)) if kd_vals else 0.0
            return dc.scale(total, 1.0 / len(batch))

        names = sorted(trainable)
        try:
            loss_val, grads = forward_backward(graph, params, trainable=names)
        except NonFiniteError as exc:
            raise TrainingDiverged(global_step, f"step {global_step}: {exc}") from exc
        if not math.isfinite(loss_val):
            raise TrainingDiverged(global_step)
        _clip_global_norm(grads, names, config.clip_norm)
        if lr > 0:
            optimizer.step(params, grads, lr, names)
        log.append({
            "cycle": cycle, "stage": stage_name, "step": global_step, "task": task,
            "loss": loss_val, "kl_con": holder["kl_con"], "kl_des": holder["kl_des"],
            "lr": lr,
        })
        if on_step is not None:
            on_step(model, stage_name, global_step)
        global_step += 1

    # -- warm-start: fit the decoder base as a plain LM with both slots zeroed
    if config.warmup_epochs > 0:
        base_names = frozenset(model.group_names("decoder_base"))
        total = config.warmup_epochs * steps_per_epoch
        sched = _constant_warm_schedule(config.warmup_lr, total, config.warmup_frac)
        step_in_phase = 0
        for _ in range(config.warmup_epochs):
            order = shuffle_rng.permutation(n)
            for b, batch_ids in enumerate(_batches(order, config.batch_size)):
                task = TASK_ASR if b % 2 == 0 else TASK_SER_SED
                run_batch(batch_ids, task, _STAGE_WARMUP, cycle=0,
                          lr=sched(step_in_phase), trainable=base_names,
                          beta=0.0, zero_desc=True, zero_con=True)
                step_in_phase += 1

    # -- alternating stages; each stage's schedule spans its full budget
    # across all cycles (warmup once, one cosine arc)
    stage_total = config.cycles * config.epochs_per_stage * steps_per_epoch
    schedules = {
        STAGE_CONTENT_ASR: make_schedule(STAGE_CONTENT_ASR, stage_total, config),
        STAGE_DESCRIPTOR_JOINT: make_schedule(STAGE_DESCRIPTOR_JOINT, stage_total, config),
    }
    stage_steps = {STAGE_CONTENT_ASR: 0, STAGE_DESCRIPTOR_JOINT: 0}

    for cycle in range(1, config.cycles + 1):
        for stage in (STAGE_CONTENT_ASR, STAGE_DESCRIPTOR_JOINT):
            train_lora = config.lora_both_stages or stage == STAGE_DESCRIPTOR_JOINT
            mask = set_stage(model, stage, train_lora=train_lora)
            for _ in range(config.epochs_per_stage):
                order = shuffle_rng.permutation(n)
                for b, batch_ids in enumerate(_batches(order, config.batch_size)):
                    if stage == STAGE_CONTENT_ASR:
                        task = TASK_ASR
                    else:
                        task = TASK_SER_SED if b % 2 == 0 else TASK_ASR
                    lr = schedules[stage](stage_steps[stage])
                    run_batch(batch_ids, task, stage, cycle, lr,
                              mask.trainable, config.beta,
                              zero_desc=mask.zero_descriptor_slot)
                    stage_steps[stage] += 1
    return model, log


def converged_mean_kl(log: Sequence[dict]) -> float:
    """Mean of (kl_con + kl_des) over the final cycle's DescriptorJoint steps."""
    stage2 = [row for row in log if row["stage"] == STAGE_DESCRIPTOR_JOINT]
    if not stage2:
        raise ValueError("log contains no DescriptorJoint steps")
    last_cycle = max(row["cycle"] for row in stage2)
    rows = [row for row in stage2 if row["cycle"] == last_cycle]
    return sum(row["kl_con"] + row["kl_des"] for row in rows) / len(rows)


DEFAULT_BETAS = (1.0, 1e-1, 1e-2, 1e-3, 1e-4)


def sweep_beta(config: TrainConfig, betas: Sequence[float], corpus: Sequence[Utterance], *,
               model_config: ModelConfig | None = None,
               eval_corpus: Sequence[Utterance] | None = None,
               max_response_len: int = 48) -> list[dict]:
    """Train one model per beta from the identical seed/init and report the
    converged metrics plus the mean branch KL for each."""
    if not betas:
        raise ValueError("betas must be non-empty")
    rows = []
    for beta in betas:
        cfg = replace(config, beta=float(beta))
        model, log = train(cfg, corpus, model_config=model_config)
        report = evaluate_model(model, eval_corpus if eval_corpus is not None else corpus,
                                max_len=max_response_len)
        rows.append({
            "beta": float(beta),
            "ua": report.ua,
            "wer": report.wer,
            "b4": report.b4,
            "meteor": report.meteor,
            "rouge_l": report.rouge_l,
            "cider": report.cider,
            "mean_kl": converged_mean_kl(log),
        })
    return rows
