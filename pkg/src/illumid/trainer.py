"""Teacher pretraining and the alternating two-stage training loop."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .augment import IlluminationConfig, derive_seed, diff_image, make_illuminated
from .data import Dataset, make_batch, pk_sample
from .losses import (
    LossWeights,
    batch_hard_triplet,
    illum_stage_loss,
    reid_stage_loss,
    smoothed_ce,
)
from .model import (
    StageEncoderSpec,
    TeacherNet,
    TwoStreamNet,
    forward_teacher,
    init_params,
    init_teacher_classifier,
    to_tensor,
    warm_start_from_teacher,
)

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "backbone", "ts", "dis", "dis_ts")
CHECKPOINT_FORMAT = "illumid-checkpoint"
CHECKPOINT_VERSION = 1

# stream tags mixed into derived seeds so independent draws never collide
_SAMPLER, _REID_TEACHER, _ILLUM_TEACHER, _TEACHER_EVAL = 11, 12, 13, 14


@dataclass
class TrainConfig:
    epoch_max: int = 240
    batch_size: int = 64
    K: int = 16
    P: int = 4
    T: int = 2
    base_lr: float = 0.00035
    weight_decay: float = 0.0005
    lr_decay_epochs: tuple[int, ...] = (40, 80, 150)
    lr_decay_factor: float = 0.1
    warmup_epochs: int = 20
    loss_weights: LossWeights = field(default_factory=LossWeights)
    variant: str = "dis_ts"
    seed: int = 0
    iters_per_epoch: int | None = None
    warm_start: bool = False
    teacher_epochs: int | None = None

    def __post_init__(self):
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if self.K * self.P != self.batch_size:
            raise ValueError(f"K*P ({self.K}*{self.P}) must equal batch_size ({self.batch_size})")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.epoch_max <= self.warmup_epochs:
            raise ValueError("epoch_max must exceed warmup_epochs")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.iters_per_epoch is not None and self.iters_per_epoch < 1:
            raise ValueError("iters_per_epoch must be positive")

    @property
    def uses_teachers(self) -> bool:
        return self.variant in ("ts", "dis_ts")

    @property
    def uses_dis(self) -> bool:
        return self.variant in ("dis", "dis_ts")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss_weights" in d:
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        return cls(**d)


def paper_preset(**overrides) -> TrainConfig:
    return replace(TrainConfig(), **overrides)


def toy_preset(**overrides) -> TrainConfig:
    """Desk-scale schedule for the procedural corpus (minutes on one CPU core)."""
    base = dict(
        epoch_max=60,
        lr_decay_epochs=(10, 20, 38),
        warmup_epochs=5,
        iters_per_epoch=24,
        base_lr=0.0035,
        teacher_epochs=40,
    )
    base.update(overrides)
    return TrainConfig(**base)


PRESETS = {"paper": paper_preset, "toy": toy_preset}


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup from base_lr/10 to base_lr, then step decay."""
    if epoch < cfg.warmup_epochs:
        if cfg.warmup_epochs == 1:
            return cfg.base_lr
        frac = epoch / (cfg.warmup_epochs - 1)
        return cfg.base_lr * (0.1 + 0.9 * frac)
    passed = sum(1 for e in cfg.lr_decay_epochs if epoch >= e)
    return cfg.base_lr * cfg.lr_decay_factor**passed


def stage_for_epoch(epoch: int, cfg: TrainConfig) -> str:
    if cfg.variant == "baseline":
        return "reid"
    return "illum" if epoch % cfg.T == 0 else "reid"


def iters_per_epoch(ds: Dataset, cfg: TrainConfig) -> int:
    if cfg.iters_per_epoch is not None:
        return cfg.iters_per_epoch
    n_train = sum(len(v) for v in ds.index_by_person.values())
    return max(1, math.ceil(n_train / cfg.batch_size))


def _make_optimizer(params, cfg: TrainConfig) -> torch.optim.Adam:
    # classic (coupled) L2 weight decay
    return torch.optim.Adam(params, lr=cfg.base_lr, weight_decay=cfg.weight_decay)


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def _sampler_rng(seed: int, tag: int, epoch: int, it: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, tag, epoch, it))


# -- teachers ------------------------------------------------------------------

def _teacher_cfg(cfg: TrainConfig, epochs: int | None) -> TrainConfig:
    epochs = epochs if epochs is not None else (cfg.teacher_epochs or cfg.epoch_max)
    if epochs < 1:
        raise ValueError("teacher epochs must be positive")
    scale = epochs / cfg.epoch_max
    return replace(
        cfg,
        epoch_max=epochs,
        warmup_epochs=min(cfg.warmup_epochs, max(1, int(round(cfg.warmup_epochs * scale))), epochs - 1),
        lr_decay_epochs=tuple(max(1, int(round(e * scale))) for e in cfg.lr_decay_epochs),
    )


def pretrain_reid_teacher(
    ds: Dataset, spec: StageEncoderSpec, cfg: TrainConfig, epochs: int | None = None
) -> TeacherNet:
    """Train a single-stream identity classifier on original images; return its frozen 3-stage prefix.

    The returned teacher carries ``train_accuracy`` (top-1 on the train split).
    """
    tcfg = _teacher_cfg(cfg, epochs)
    w = cfg.loss_weights
    net = init_teacher_classifier(spec, ds.n_person, derive_seed(cfg.seed, _REID_TEACHER))
    opt = _make_optimizer(net.parameters(), tcfg)
    n_iter = iters_per_epoch(ds, tcfg)
    net.train()
    for epoch in range(tcfg.epoch_max):
        _set_lr(opt, lr_at(epoch, tcfg))
        for it in range(n_iter):
            idx = pk_sample(ds, tcfg.K, tcfg.P, _sampler_rng(cfg.seed, _REID_TEACHER, epoch, it))
            x = to_tensor(np.stack([ds.image(i) for i in idx]))
            y = torch.tensor([ds.label_of[ds.records[i].person_id] for i in idx])
            v, logits = net(x)
            loss = w.lambda1 * smoothed_ce(logits, y, w.epsilon, ds.n_person) + w.lambda2 * batch_hard_triplet(v, y, w.margin)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()

    train_idx = [i for ids in ds.index_by_person.values() for i in ids]
    x = to_tensor(np.stack([ds.image(i) for i in train_idx]))
    y = np.array([ds.label_of[ds.records[i].person_id] for i in train_idx])
    acc = _accuracy(net, x, y)
    teacher = net.to_teacher()
    teacher.train_accuracy = acc
    log.info("reid teacher: train accuracy %.4f", acc)
    return teacher


def pretrain_illum_teacher(
    ds: Dataset, spec: StageEncoderSpec, cfg: TrainConfig, illum_cfg: IlluminationConfig, epochs: int | None = None
) -> TeacherNet:
    """Train an illumination classifier on difference images; return its frozen 3-stage prefix.

    ``train_accuracy`` is measured on every train image under every level.
    """
    if illum_cfg.n_illu < 2:
        raise ValueError("illumination teacher needs at least 2 gamma levels")
    tcfg = _teacher_cfg(cfg, epochs)
    w = cfg.loss_weights
    seed = derive_seed(cfg.seed, _ILLUM_TEACHER)
    net = init_teacher_classifier(spec, illum_cfg.n_illu, seed)
    opt = _make_optimizer(net.parameters(), tcfg)
    n_iter = iters_per_epoch(ds, tcfg)
    net.train()
    for epoch in range(tcfg.epoch_max):
        _set_lr(opt, lr_at(epoch, tcfg))
        for it in range(n_iter):
            idx = pk_sample(ds, tcfg.K, tcfg.P, _sampler_rng(cfg.seed, _ILLUM_TEACHER, epoch, it))
            batch = make_batch(ds, idx, illum_cfg, epoch, seed, step=it)
            _, logits = net(to_tensor(batch.i_diff))
            loss = smoothed_ce(logits, torch.from_numpy(batch.illum_labels), w.epsilon, illum_cfg.n_illu)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()

    train_idx = [i for ids in ds.index_by_person.values() for i in ids]
    diffs, labels = [], []
    for i in train_idx:
        origin = ds.image(i)
        for level in range(illum_cfg.n_illu):
            altered, _ = make_illuminated(origin, level, illum_cfg, derive_seed(seed, _TEACHER_EVAL, i, level))
            diffs.append(diff_image(altered, origin))
            labels.append(level)
    acc = _accuracy(net, to_tensor(np.stack(diffs)), np.array(labels))
    teacher = net.to_teacher()
    teacher.train_accuracy = acc
    log.info("illumination teacher: train accuracy %.4f", acc)
    return teacher


@torch.no_grad()
def _accuracy(net, x: torch.Tensor, y: np.ndarray, batch_size: int = 256) -> float:
    net.eval()
    preds = []
    for s in range(0, len(x), batch_size):
        _, logits = net(x[s:s + batch_size])
        preds.append(logits.argmax(1).numpy())
    net.train()
    return float((np.concatenate(preds) == y).mean())


# -- main loop -------------------------------------------------------------------

@dataclass
class TrainState:
    spec: StageEncoderSpec
    train_cfg: TrainConfig
    illum_cfg: IlluminationConfig
    n_person: int
    n_illu: int
    net: dict
    optimizer: dict
    epoch: int  # next epoch to run
    reid_teacher: dict | None = None
    illum_teacher: dict | None = None
    records: list[dict] = field(default_factory=list)


StepCallback = Callable[[int, int, str, TwoStreamNet], None]


def train_tsd(
    ds: Dataset,
    spec: StageEncoderSpec,
    teachers: dict[str, TeacherNet | None] | None,
    cfg: TrainConfig,
    illum_cfg: IlluminationConfig,
    *,
    resume: TrainState | None = None,
    checkpoint_path: str | os.PathLike | None = None,
    stop_after: int | None = None,
    on_step: StepCallback | None = None,
) -> tuple[TwoStreamNet, list[dict]]:
    """Alternate the illumination stage (``epoch % T == 0``) and the ReID stage.

    The illumination stage updates FE_S, LE_S-I and FC_Illu; the ReID stage
    updates FE_S, LE_S-R and FC_ID while FC_Illu is held fixed. The
    ``baseline`` variant runs the ReID stage every epoch. Returns the network
    and one report record per epoch. ``stop_after`` ends the run after that
    many epochs (total, including resumed ones); a checkpoint is written
    after every epoch when ``checkpoint_path`` is set.
    """
    teachers = teachers or {}
    reid_t, illum_t = teachers.get("reid"), teachers.get("illum")
    if cfg.uses_teachers and (reid_t is None or illum_t is None):
        raise ValueError(f"variant {cfg.variant!r} requires both a reid and an illumination teacher")
    if not cfg.uses_teachers and (reid_t is not None or illum_t is not None):
        raise ValueError(f"variant {cfg.variant!r} does not take teachers")
    if cfg.uses_dis and illum_cfg.n_illu < 2:
        raise ValueError("dis-classification needs at least 2 gamma levels")

    if resume is not None:
        net = TwoStreamNet(resume.spec, resume.n_person, resume.n_illu)
        net.load_state_dict(resume.net)
        opt = _make_optimizer(net.parameters(), cfg)
        opt.load_state_dict(resume.optimizer)
        start, records = resume.epoch, list(resume.records)
    else:
        net = init_params(spec, ds.n_person, illum_cfg.n_illu, cfg.seed)
        if reid_t is not None and cfg.warm_start:
            warm_start_from_teacher(net, reid_t)
        opt = _make_optimizer(net.parameters(), cfg)
        start, records = 0, []

    w = cfg.loss_weights
    n_iter = iters_per_epoch(ds, cfg)
    end = cfg.epoch_max if stop_after is None else min(cfg.epoch_max, stop_after)
    net.train()
    for epoch in range(start, end):
        stage = stage_for_epoch(epoch, cfg)
        lr = lr_at(epoch, cfg)
        _set_lr(opt, lr)
        sums: dict[str, float] = {}
        for it in range(n_iter):
            idx = pk_sample(ds, cfg.K, cfg.P, _sampler_rng(cfg.seed, _SAMPLER, epoch, it))
            batch = make_batch(ds, idx, illum_cfg, epoch, cfg.seed, step=it)
            x = to_tensor(batch.i_random)
            if stage == "illum":
                out = net(x, streams=("illum",))
                fmap_t = forward_teacher(illum_t, to_tensor(batch.i_diff)) if illum_t is not None else None
                loss, parts = illum_stage_loss(
                    out.f_i, torch.from_numpy(batch.illum_labels), out.fmap_s_i, fmap_t, w, return_parts=True
                )
            else:
                out = net(x, streams=("reid",), freeze_fc_illu_path=True, dis_path=cfg.uses_dis)
                fmap_t = forward_teacher(reid_t, to_tensor(batch.i_origin)) if reid_t is not None else None
                loss, parts = reid_stage_loss(
                    out, torch.from_numpy(batch.person_labels), fmap_t, w, use_dis=cfg.uses_dis, return_parts=True
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sums["total"] = sums.get("total", 0.0) + loss.item()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v.item()
            if on_step is not None:
                on_step(epoch, it, stage, net)
        rec = {"epoch": epoch, "stage": stage, "lr": lr, "losses": {k: v / n_iter for k, v in sums.items()}}
        records.append(rec)
        log.info("epoch %d [%s] lr=%.2e loss=%.4f", epoch, stage, lr, rec["losses"]["total"])
        if checkpoint_path is not None:
            save_checkpoint(
                make_state(net, opt, epoch + 1, cfg, illum_cfg, teachers, records), checkpoint_path
            )
    return net, records


def make_state(net, opt, epoch, cfg, illum_cfg, teachers, records) -> TrainState:
    teachers = teachers or {}
    return TrainState(
        spec=net.spec,
        train_cfg=cfg,
        illum_cfg=illum_cfg,
        n_person=net.n_person,
        n_illu=net.n_illu,
        net=net.state_dict(),
        optimizer=opt.state_dict(),
        epoch=epoch,
        reid_teacher=teachers["reid"].state_dict() if teachers.get("reid") is not None else None,
        illum_teacher=teachers["illum"].state_dict() if teachers.get("illum") is not None else None,
        records=list(records),
    )


# -- checkpoints -------------------------------------------------------------------

class CheckpointFormatError(RuntimeError):
    pass


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": state.spec.to_dict(),
        "train_cfg": state.train_cfg.to_dict(),
        "illum_cfg": state.illum_cfg.to_dict(),
        "n_person": state.n_person,
        "n_illu": state.n_illu,
        "net": state.net,
        "optimizer": state.optimizer,
        "epoch": state.epoch,
        "reid_teacher": state.reid_teacher,
        "illum_teacher": state.illum_teacher,
        "records": json.dumps(state.records),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> TrainState:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise CheckpointFormatError(
            f"{path}: not a readable {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} archive ({e})"
        ) from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        tag = payload.get("format") if isinstance(payload, dict) else type(payload).__name__
        raise CheckpointFormatError(f"{path}: format tag {tag!r}, expected {CHECKPOINT_FORMAT!r}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"{path}: checkpoint version {payload.get('version')}, this build reads v{CHECKPOINT_VERSION}"
        )
    return TrainState(
        spec=StageEncoderSpec.from_dict(payload["spec"]),
        train_cfg=TrainConfig.from_dict(payload["train_cfg"]),
        illum_cfg=IlluminationConfig.from_dict(payload["illum_cfg"]),
        n_person=payload["n_person"],
        n_illu=payload["n_illu"],
        net=payload["net"],
        optimizer=payload["optimizer"],
        epoch=payload["epoch"],
        reid_teacher=payload["reid_teacher"],
        illum_teacher=payload["illum_teacher"],
        records=json.loads(payload["records"]),
    )


def net_from_state(state: TrainState) -> TwoStreamNet:
    net = TwoStreamNet(state.spec, state.n_person, state.n_illu)
    net.load_state_dict(state.net)
    return net


def teachers_from_state(state: TrainState) -> dict[str, TeacherNet | None]:
    out: dict[str, TeacherNet | None] = {"reid": None, "illum": None}
    for kind in out:
        sd = getattr(state, f"{kind}_teacher")
        if sd is not None:
            t = TeacherNet(state.spec)
            t.load_state_dict(sd)
            out[kind] = t.freeze()
    return out


def save_teacher(teacher: TeacherNet, path: str | os.PathLike, kind: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT + "-teacher",
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "spec": teacher.spec.to_dict(),
        "state": teacher.state_dict(),
        "train_accuracy": float(getattr(teacher, "train_accuracy", float("nan"))),
    }, path)


def load_teacher(path: str | os.PathLike, kind: str | None = None) -> TeacherNet:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise CheckpointFormatError(f"{path}: unreadable teacher archive ({e})") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT + "-teacher":
        raise CheckpointFormatError(f"{path}: not a teacher checkpoint")
    if kind is not None and payload["kind"] != kind:
        raise CheckpointFormatError(f"{path}: holds a {payload['kind']} teacher, expected {kind}")
    t = TeacherNet(StageEncoderSpec.from_dict(payload["spec"]))
    t.load_state_dict(payload["state"])
    t.train_accuracy = payload["train_accuracy"]
    return t.freeze()


def write_report(records: list[dict], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


__all__ = [
    "CheckpointFormatError",
    "PRESETS",
    "TrainConfig",
    "TrainState",
    "VARIANTS",
    "iters_per_epoch",
    "load_checkpoint",
    "load_teacher",
    "lr_at",
    "make_state",
    "net_from_state",
    "paper_preset",
    "pretrain_illum_teacher",
    "pretrain_reid_teacher",
    "save_checkpoint",
    "save_teacher",
    "stage_for_epoch",
    "teachers_from_state",
    "toy_preset",
    "train_tsd",
    "write_report",
]
