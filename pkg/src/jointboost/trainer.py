"""Adversarial training loop for the joint classifier-discriminator.

Each iteration attacks the real batch (ascent), attacks the generated
batch (descent, with the gradual schedule and early stopping), computes
the combined CE+BCE loss on the attacked samples only, and applies one
SGD-with-momentum update. Training finishes with a full clean pass over
the real set to fix the l0 reference, which is embedded in the final
checkpoint together with the optimizer state, schedule counters, RNG
state and a config snapshot.

Parameter updates run on a single logical thread; attack gradient
evaluation inside an iteration is free to parallelize internally. Step
reports are emitted on one ordered stream (the jsonl training log).
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .attacks import AttackSpec, ScheduleState, attack_generated, attack_real, schedule_steps
from .datapipe import DataSources, ImageBatch, InMemoryData, as_batches
from .errors import ConfigurationError, DataError
from .losses import L0Reference, estimate_l0, training_loss
from .model import JointModel, ModelConfig, build_model, reinit_head


@dataclass
class TrainConfig:
    iterations: int
    batch_size: int
    learning_rate: float
    spec_real: AttackSpec
    spec_gen: AttackSpec
    schedule: ScheduleState
    momentum: float = 0.9
    weight_decay: float = 0.0
    head_init_scale: Optional[float] = None
    seed: int = 0
    checkpoint_every: int = 0
    gen_batch_size: Optional[int] = None
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")

    def snapshot(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainState:
    model: JointModel
    optimizer: torch.optim.Optimizer
    schedule: ScheduleState
    iteration: int = 0
    l0: Optional[L0Reference] = None
    # Running mean of the attacked-real discrimination loss, for diagnostics.
    running_bce_real_sum: float = 0.0
    running_bce_real_count: int = 0


@dataclass
class StepReport:
    iteration: int
    total: float
    ce_real: float
    ce_generated: float
    bce_real: float
    bce_generated: float
    schedule_steps: int
    fake_steps_taken: int
    fake_halted_at: Optional[int]
    diverged: bool = False

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def init_state(cfg: TrainConfig, num_classes: int) -> TrainState:
    """Build model + optimizer from the config with a seeded initialization."""
    torch.manual_seed(cfg.seed)
    model = build_model(cfg.model, num_classes)
    if cfg.head_init_scale is not None:
        reinit_head(model, cfg.head_init_scale)
    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=cfg.learning_rate,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    schedule = dataclasses.replace(cfg.schedule, current_iter=0)
    return TrainState(model=model, optimizer=optimizer, schedule=schedule)


def train_step(
    state: TrainState,
    real_batch: ImageBatch,
    gen_batch: ImageBatch,
    cfg: TrainConfig,
) -> tuple:
    """One adversarial training iteration; mutates and returns the state.

    On a non-finite total loss the update is skipped, the state is left
    untouched, and the report flags the divergence.
    """
    if real_batch.labels is None or gen_batch.labels is None:
        raise DataError("train_step requires labeled batches")
    state.schedule.current_iter = state.iteration

    attacked_real, _ = attack_real(state.model, real_batch, cfg.spec_real)
    attacked_gen, gen_trace = attack_generated(
        state.model, gen_batch, attacked_real, cfg.spec_gen, schedule=state.schedule
    )

    terms = training_loss(state.model, attacked_real, attacked_gen, require_attacked=True)
    report = StepReport(
        iteration=state.iteration,
        schedule_steps=schedule_steps(state.schedule),
        fake_steps_taken=gen_trace.steps_taken,
        fake_halted_at=gen_trace.halted_at,
        **terms.detached(),
    )
    if not math.isfinite(report.total):
        report.diverged = True
        return state, report

    state.optimizer.zero_grad()
    terms.total.backward()
    state.optimizer.step()

    state.running_bce_real_sum += report.bce_real * attacked_real.n
    state.running_bce_real_count += attacked_real.n
    state.iteration += 1
    state.schedule.current_iter = state.iteration
    return state, report


def train(
    cfg: TrainConfig,
    data: DataSources,
    out_dir=None,
    resume_from=None,
    log_every: int = 0,
) -> tuple:
    """Run the configured budget of training steps and fix l0.

    Returns (state, l0). When ``out_dir`` is given, writes a jsonl
    training log and the final checkpoint (plus periodic ones per
    ``checkpoint_every``). ``resume_from`` restores a checkpoint and
    continues to the configured budget, reproducing an uninterrupted run
    exactly.
    """
    loaded = data.load() if isinstance(data, DataSources) else data
    state = init_state(cfg, loaded.num_classes)
    if resume_from is not None:
        ckpt = ckpt_io.load_checkpoint(resume_from)
        restore_state(ckpt, state)

    out_dir = Path(out_dir) if out_dir is not None else None
    log_f = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_f = open(out_dir / "train_log.jsonl", "a" if resume_from else "w")

    try:
        for it in range(state.iteration, cfg.iterations):
            real = loaded.sample("real", it, cfg.batch_size, cfg.seed)
            gen = loaded.sample("generated", it, cfg.gen_batch_size or cfg.batch_size, cfg.seed)
            state, report = train_step(state, real, gen, cfg)
            if log_f is not None:
                log_f.write(report.to_json() + "\n")
            if log_every and (it + 1) % log_every == 0:
                print(
                    f"iter {report.iteration}: total={report.total:.4f} "
                    f"bce_real={report.bce_real:.4f} bce_gen={report.bce_generated:.4f} "
                    f"T={report.schedule_steps}"
                )
            if (
                out_dir is not None
                and cfg.checkpoint_every
                and (it + 1) % cfg.checkpoint_every == 0
            ):
                save_state(out_dir / "checkpoint.ckpt", state, cfg, loaded.num_classes)
    finally:
        if log_f is not None:
            log_f.close()

    # The reference level is fixed over one full clean pass of the real set,
    # never over attacked samples.
    state.l0 = estimate_l0(state.model, as_batches(loaded.real, cfg.batch_size))
    if out_dir is not None:
        save_state(out_dir / "checkpoint.ckpt", state, cfg, loaded.num_classes)
    return state, state.l0


def state_bytes(state: TrainState, cfg: TrainConfig, num_classes: int) -> bytes:
    return ckpt_io.checkpoint_bytes(
        state.model,
        state.optimizer,
        iteration=state.iteration,
        schedule=dataclasses.asdict(state.schedule),
        l0=None
        if state.l0 is None
        else {"value": state.l0.value, "sample_count": state.l0.sample_count},
        config=cfg.snapshot(),
        model_desc={
            "arch": cfg.model.arch,
            "width": cfg.model.width,
            "in_channels": cfg.model.in_channels,
            "input_dim": cfg.model.input_dim,
            "num_classes": num_classes,
        },
        torch_rng_state=torch.get_rng_state(),
    )


def save_state(path, state: TrainState, cfg: TrainConfig, num_classes: int) -> None:
    with open(path, "wb") as f:
        f.write(state_bytes(state, cfg, num_classes))


def restore_state(ckpt: ckpt_io.CheckpointData, state: TrainState) -> None:
    """Load parameters, optimizer buffers, counters and RNG from a checkpoint."""
    ckpt_io.load_model_state(ckpt, state.model)
    ckpt_io.load_optimizer_state(ckpt, state.model, state.optimizer)
    state.iteration = ckpt.iteration
    state.schedule = ScheduleState(**ckpt.header["schedule"])
    if ckpt.l0 is not None:
        state.l0 = L0Reference(ckpt.l0["value"], ckpt.l0["sample_count"])
    if "rng/torch" in ckpt.arrays:
        torch.set_rng_state(torch.from_numpy(ckpt.arrays["rng/torch"]))


def restore_model(ckpt: ckpt_io.CheckpointData) -> tuple:
    """Rebuild the checkpointed model; returns (model, l0 or None)."""
    desc = ckpt.header["model"]
    mcfg = ModelConfig(
        arch=desc["arch"],
        width=desc["width"],
        in_channels=desc["in_channels"],
        input_dim=desc.get("input_dim"),
    )
    model = build_model(mcfg, desc["num_classes"])
    ckpt_io.load_model_state(ckpt, model)
    model.eval()
    l0 = None
    if ckpt.l0 is not None:
        l0 = L0Reference(ckpt.l0["value"], ckpt.l0["sample_count"])
    return model, l0


def state_digest(state: TrainState, cfg: TrainConfig, num_classes: int) -> str:
    """Digest of the full serialized state; equal digests mean equal states."""
    import hashlib

    return hashlib.sha256(state_bytes(state, cfg, num_classes)).hexdigest()
