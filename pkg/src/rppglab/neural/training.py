"""Supervised PRN training and the two-phase joint optimisation loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from ..autodiff import Adam, Tape, cosine_anneal
from ..optics import Subject, pseudo_target
from .checkpoint import load_checkpoint, save_checkpoint
from .losses import generator_terms, loss_appearance, loss_estimator, loss_ppg
from .models import GeneratorModel, PrnModel

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Optimisation settings.  Loss weights, learning rates, Adam betas and
    batch size default to the published values; the rest are desk-scale
    choices."""

    lam: float = 1.0
    eps: float = 0.1
    lr_g: float = 1e-4
    lr_e: float = 3e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch: int = 2
    clip_len: int = 64
    size: int = 16
    epochs: int = 10
    pretrain_epochs: int = 5
    gen_pretrain_epochs: int = 3
    seed: int = 0
    prn_channels: tuple = (8, 16, 32)
    gen_base: int = 8
    gen_blocks: int = 2
    target_scale: str = "VI"

    def __post_init__(self):
        self.prn_channels = tuple(int(c) for c in self.prn_channels)
        if self.batch < 1 or self.clip_len < 8 or self.epochs < 0 or self.pretrain_epochs < 0 or self.gen_pretrain_epochs < 0:
            raise ValueError("batch >= 1, clip_len >= 8 and non-negative epochs required")
        if self.lr_g <= 0 or self.lr_e <= 0:
            raise ValueError("learning rates must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prn_channels"] = list(self.prn_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class ClipSet:
    """Fixed-length training clips.

    ``light``: ``(M, T, H, W, 3)`` source clips; ``dark``: matching pseudo
    targets or ``None``; ``pulse``: ``(M, T)``; ``subject``: owner id per clip.
    """

    light: np.ndarray
    pulse: np.ndarray
    subject: list[str]
    dark: np.ndarray | None = None

    def __post_init__(self):
        if len(self.light) != len(self.pulse) or len(self.light) != len(self.subject):
            raise ValueError("clip arrays disagree in length")
        if self.dark is not None and self.dark.shape != self.light.shape:
            raise ValueError("pseudo targets must match source clips")

    def __len__(self) -> int:
        return len(self.light)

    def select(self, idx) -> "ClipSet":
        idx = np.asarray(idx, dtype=int)
        return ClipSet(self.light[idx], self.pulse[idx], [self.subject[i] for i in idx],
                       None if self.dark is None else self.dark[idx])


def build_clips(subjects: Sequence[Subject], clip_len: int = 64, target_scale: str | None = None,
                seed: int = 0) -> ClipSet:
    """Cut each subject into non-overlapping clips; optionally attach pseudo targets.

    The pseudo target is built once per subject on the full video, so the
    shuffled residuals come from anywhere in the recording.
    """
    light, dark, pulse, owner = [], [], [], []
    for k, s in enumerate(subjects):
        frames = s.video.frames
        target = None
        if target_scale is not None:
            target = pseudo_target(s.video, target_scale, s.fitzpatrick, seed=seed * 100003 + k).frames
        for start in range(0, len(frames) - clip_len + 1, clip_len):
            light.append(frames[start:start + clip_len])
            pulse.append(s.pulse.samples[start:start + clip_len])
            owner.append(s.subject_id)
            if target is not None:
                dark.append(target[start:start + clip_len])
    if not light:
        raise ValueError(f"no subject is at least {clip_len} frames long")
    return ClipSet(np.asarray(light, dtype=np.float32), np.asarray(pulse, dtype=np.float64),
                   owner, np.asarray(dark, dtype=np.float32) if dark else None)


def epoch_batches(clips: ClipSet, batch: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded shuffle into mini-batches whose clips come from distinct subjects.

    Clips that cannot be placed in a full batch are dropped for this epoch.
    """
    if len(set(clips.subject)) < batch:
        raise ValueError(f"batch of {batch} needs at least {batch} distinct subjects")
    order = list(np.random.default_rng([seed, epoch]).permutation(len(clips)))
    batches = []
    while len(order) >= batch:
        cur = [order.pop(0)]
        for j in range(len(order)):
            if len(cur) == batch:
                break
            if clips.subject[order[j]] not in {clips.subject[i] for i in cur}:
                cur.append(order[j])
        if len(cur) < batch:
            break
        for i in cur[1:]:
            order.remove(i)
        batches.append(np.array(cur))
    return batches


@dataclass
class LogRow:
    step: int
    phase: str
    loss: float


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, snapshot: Path | None = None):
        self.snapshot = snapshot
        where = f"; snapshot written to {snapshot}" if snapshot else ""
        super().__init__(message + where)


def _step(model, opt: Adam, loss, tape: Tape, lr: float) -> None:
    for p in model.parameters():
        p.zero_grad()
    tape.backward(loss)
    opt.step(lr)


@dataclass
class TrainResult:
    generator: GeneratorModel | None
    estimator: PrnModel
    log: list[LogRow] = field(default_factory=list)


def _run_meta(kind: str, cfg: TrainConfig, epoch: int, step: int, total: int) -> dict:
    return {"kind": kind, "epoch": epoch, "step": step, "total_steps": total,
            "config": cfg.to_dict()}


class _Stage:
    """One resumable training stage over a fixed number of epochs.

    ``models`` maps a checkpoint stem to ``(model, Adam)``.  A checkpoint is
    written per model at every epoch boundary; ``resume`` restarts from the
    last completed epoch, so batches and learning rates replay exactly.
    """

    def __init__(self, name: str, cfg: TrainConfig, clips: ClipSet, epochs: int,
                 models: dict, checkpoint_dir, offset: int, shuffle_seed: int):
        self.name, self.cfg, self.clips, self.epochs = name, cfg, clips, epochs
        self.models = models
        self.dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
        self.offset = offset
        self.shuffle_seed = shuffle_seed
        self.total = sum(len(epoch_batches(clips, cfg.batch, shuffle_seed, e))
                         for e in range(epochs))
        self.step = 0

    @property
    def end(self) -> int:
        return self.offset + self.total

    def _path(self, stem: str) -> Path:
        return self.dir / f"{self.name}_{stem}.pfck"

    def restore(self) -> int:
        """Load the newest checkpoint of this stage; return its epoch (0 if none)."""
        if self.dir is None or not all(self._path(s).exists() for s in self.models):
            return 0
        epoch = None
        for stem, (model, opt) in self.models.items():
            meta, state = load_checkpoint(self._path(stem), model)
            if state is not None:
                opt.state = state
            epoch, self.step = meta["epoch"], meta["step"]
        return int(epoch)

    def save(self, epoch: int) -> None:
        if self.dir is None:
            return
        for stem, (model, opt) in self.models.items():
            save_checkpoint(self._path(stem), model,
                            _run_meta(f"{self.name}_{stem}", self.cfg, epoch, self.step, self.total),
                            opt.state)

    def snapshot(self) -> Path | None:
        if self.dir is None:
            return None
        first = None
        for stem, (model, _) in self.models.items():
            path = self.dir / f"abort_{self.name}_{stem}.pfck"
            save_checkpoint(path, model, _run_meta(f"{self.name}_{stem}", self.cfg, -1,
                                                   self.step, self.total))
            first = first or path
        return first

    def lr(self, base: float) -> float:
        return cosine_anneal(base, self.step, self.total)

    def run(self, body, resume: bool) -> list[LogRow]:
        """``body(idx, stage)`` performs one mini-batch and returns log rows."""
        start = self.restore() if resume else 0
        rows: list[LogRow] = []
        for epoch in range(start, self.epochs):
            for idx in epoch_batches(self.clips, self.cfg.batch, self.shuffle_seed, epoch):
                rows += body(idx, self)
                self.step += 1
            if rows:
                log.info("%s epoch %d: last loss %.4f", self.name, epoch, rows[-1].loss)
            self.save(epoch + 1)
        return rows

    def check(self, loss, phase: str) -> float:
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingAborted(f"non-finite {phase} loss {value} at step "
                                  f"{self.offset + self.step}", self.snapshot())
        return value


def _prn_stage(clips: ClipSet, cfg: TrainConfig, E: PrnModel, epochs: int, checkpoint_dir,
               offset: int = 0, name: str = "prn") -> _Stage:
    return _Stage(name, cfg, clips, epochs, {"est": (E, Adam(E.parameters(), cfg.beta1, cfg.beta2))},
                  checkpoint_dir, offset, cfg.seed)


def _fit_prn(stage: _Stage, E: PrnModel, resume: bool) -> list[LogRow]:
    cfg, clips = stage.cfg, stage.clips
    opt = stage.models["est"][1]
    E.train()

    def body(idx, st):
        x = clips.light[idx].astype(np.float64)
        with Tape() as tape:
            loss = loss_ppg(clips.pulse[idx], E(x))
            value = st.check(loss, "prn")
            _step(E, opt, loss, tape, st.lr(cfg.lr_e))
        return [LogRow(st.offset + st.step, "prn", value)]

    return stage.run(body, resume)


def train_prn(clips: ClipSet, cfg: TrainConfig, augmented: bool = False,
              checkpoint_dir=None, resume: bool = False, estimator: PrnModel | None = None,
              epochs: int | None = None) -> TrainResult:
    """Supervised estimator training with the Pearson loss.

    Runs ``cfg.pretrain_epochs`` epochs unless ``epochs`` is given.  With
    ``augmented`` set, this delegates to :func:`train_joint`, which pre-trains
    on the real clips first.
    """
    if augmented:
        return train_joint(clips, cfg, checkpoint_dir=checkpoint_dir, resume=resume,
                           estimator=estimator)
    E = estimator or PrnModel(cfg.prn_channels, seed=cfg.seed)
    stage = _prn_stage(clips, cfg, E, cfg.pretrain_epochs if epochs is None else epochs,
                       checkpoint_dir)
    rows = _fit_prn(stage, E, resume)
    return TrainResult(None, E, rows)


def pretrain_generator(clips: ClipSet, cfg: TrainConfig, G: GeneratorModel, checkpoint_dir=None,
                       resume: bool = False, offset: int = 0) -> tuple[list[LogRow], int]:
    """Appearance-only warm start: plain L1 between G(x) and the pseudo target.

    Returns the log rows and the global step index after the stage.
    """
    stage = _Stage("genpre", cfg, clips, cfg.gen_pretrain_epochs,
                   {"gen": (G, Adam(G.parameters(), cfg.beta1, cfg.beta2))},
                   checkpoint_dir, offset, cfg.seed + 2)
    opt = stage.models["gen"][1]
    G.train()

    def body(idx, st):
        x = clips.light[idx].astype(np.float64)
        with Tape() as tape:
            loss = loss_appearance(clips.dark[idx].astype(np.float64), G(x), 0.0)
            value = st.check(loss, "gen_l1")
            _step(G, opt, loss, tape, st.lr(cfg.lr_g))
        return [LogRow(st.offset + st.step, "gen_l1", value)]

    return stage.run(body, resume), stage.end


def train_joint(clips: ClipSet, cfg: TrainConfig, generator: GeneratorModel | None = None,
                estimator: PrnModel | None = None, checkpoint_dir=None, resume: bool = False
                ) -> TrainResult:
    """Two-phase optimisation of generator G and estimator E.

    Stages, each resumable at epoch boundaries:

    1. if no estimator is given, pre-train E on the source clips
       (``cfg.pretrain_epochs``);
    2. if no generator is given, warm-start G with plain L1 towards the
       pseudo targets (``cfg.gen_pretrain_epochs``);
    3. ``cfg.epochs`` of joint training.  Per mini-batch: update G on
       ``L_ppg(p, E(G(x))) + lam * L_A(dark, G(x))`` with E frozen, then
       update E on ``L_ppg(p, E(G(x))) + L_ppg(p, E(x))`` with the translated
       clip detached.  Each model has its own Adam state and cosine-annealed
       learning rate.
    """
    if clips.dark is None:
        raise ValueError("joint training needs pseudo-target clips (build_clips(..., target_scale=...))")
    rows: list[LogRow] = []
    offset = 0
    E = estimator
    if E is None:
        E = PrnModel(cfg.prn_channels, seed=cfg.seed)
        stage = _prn_stage(clips, cfg, E, cfg.pretrain_epochs, checkpoint_dir)
        rows += _fit_prn(stage, E, resume)
        offset = stage.end
    G = generator
    if G is None:
        G = GeneratorModel(cfg.gen_base, cfg.gen_blocks, seed=cfg.seed + 1)
        pre_rows, offset = pretrain_generator(clips, cfg, G, checkpoint_dir, resume, offset)
        rows += pre_rows
    G.train()
    E.train()
    stage = _Stage("joint", cfg, clips, cfg.epochs,
                   {"gen": (G, Adam(G.parameters(), cfg.beta1, cfg.beta2)),
                    "est": (E, Adam(E.parameters(), cfg.beta1, cfg.beta2))},
                   checkpoint_dir, offset, cfg.seed + 1)
    opt_g, opt_e = stage.models["gen"][1], stage.models["est"][1]

    def body(idx, st):
        x = clips.light[idx].astype(np.float64)
        dark = clips.dark[idx].astype(np.float64)
        p = clips.pulse[idx]
        s = st.offset + st.step
        # phase 1: generator, estimator frozen
        with Tape() as tape:
            l_g, l_ppg, l_app, i_hat = generator_terms(x, dark, p, G, E, cfg.lam, cfg.eps)
            v_g = st.check(l_g, "generator")
            _step(G, opt_g, l_g, tape, st.lr(cfg.lr_g))
        # phase 2: estimator, generator frozen (translated clip detached)
        with Tape() as tape:
            l_e = loss_estimator(x, i_hat.detach(), p, E)
            v_e = st.check(l_e, "estimator")
            _step(E, opt_e, l_e, tape, st.lr(cfg.lr_e))
        return [LogRow(s, "generator", v_g), LogRow(s, "gen_ppg", l_ppg.item()),
                LogRow(s, "gen_appearance", l_app.item()), LogRow(s, "estimator", v_e)]

    rows += stage.run(body, resume)
    return TrainResult(G, E, rows)
