"""Two-stream residual student and three-stage frozen teachers."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class StageEncoderSpec:
    """A four-stage residual encoder.

    Stages 1-2 (plus the stem) form the shared trunk, stages 3-4 are
    duplicated per stream. ``embedding_dim`` must equal the last stage width
    since the embedding is the pooled stage-4 map.
    """

    in_channels: int = 3
    stem_channels: int = 16
    stem_kernel: int = 3
    stem_stride: int = 2
    stem_pool: bool = False
    block: str = "basic"
    stage_blocks: tuple[int, int, int, int] = (1, 1, 1, 1)
    stage_widths: tuple[int, int, int, int] = (16, 32, 64, 64)
    stage_strides: tuple[int, int, int, int] = (1, 2, 2, 1)
    embedding_dim: int = 64
    batch_norm: bool = True

    def __post_init__(self):
        for name in ("stage_blocks", "stage_widths", "stage_strides"):
            val = tuple(int(v) for v in getattr(self, name))
            object.__setattr__(self, name, val)
            if len(val) != 4:
                raise ValueError(f"{name} must have exactly 4 entries, got {val}")
            if min(val) < 1:
                raise ValueError(f"{name} entries must be positive, got {val}")
        if self.block not in ("basic", "bottleneck"):
            raise ValueError(f"unknown block type {self.block!r}")
        if self.out_width(3) != self.embedding_dim:
            raise ValueError(
                f"embedding_dim {self.embedding_dim} must equal stage-4 output width {self.out_width(3)}"
            )

    def out_width(self, stage: int) -> int:
        return self.stage_widths[stage] * (4 if self.block == "bottleneck" else 1)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "StageEncoderSpec":
        return cls(**d)

    @classmethod
    def resnet50(cls, last_stride: int = 1) -> "StageEncoderSpec":
        return cls(
            stem_channels=64,
            stem_kernel=7,
            stem_stride=2,
            stem_pool=True,
            block="bottleneck",
            stage_blocks=(3, 4, 6, 3),
            stage_widths=(64, 128, 256, 512),
            stage_strides=(1, 2, 2, last_stride),
            embedding_dim=2048,
        )


def _norm(spec: StageEncoderSpec, ch: int) -> nn.Module:
    return nn.BatchNorm2d(ch) if spec.batch_norm else nn.Identity()


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, spec, in_ch, width, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, width, 3, stride, 1, bias=not spec.batch_norm)
        self.bn1 = _norm(spec, width)
        self.conv2 = nn.Conv2d(width, width, 3, 1, 1, bias=not spec.batch_norm)
        self.bn2 = _norm(spec, width)
        self.shortcut = None
        if stride != 1 or in_ch != width:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, width, 1, stride, bias=not spec.batch_norm), _norm(spec, width))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, spec, in_ch, width, stride):
        super().__init__()
        out_ch = width * 4
        bias = not spec.batch_norm
        self.conv1 = nn.Conv2d(in_ch, width, 1, bias=bias)
        self.bn1 = _norm(spec, width)
        self.conv2 = nn.Conv2d(width, width, 3, stride, 1, bias=bias)
        self.bn2 = _norm(spec, width)
        self.conv3 = nn.Conv2d(width, out_ch, 1, bias=bias)
        self.bn3 = _norm(spec, out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=bias), _norm(spec, out_ch))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


def make_stem(spec: StageEncoderSpec) -> nn.Sequential:
    layers = [
        nn.Conv2d(spec.in_channels, spec.stem_channels, spec.stem_kernel, spec.stem_stride,
                  spec.stem_kernel // 2, bias=not spec.batch_norm),
        _norm(spec, spec.stem_channels),
        nn.ReLU(inplace=True),
    ]
    if spec.stem_pool:
        layers.append(nn.MaxPool2d(3, 2, 1))
    return nn.Sequential(*layers)


def make_stage(spec: StageEncoderSpec, stage: int) -> nn.Sequential:
    block = BasicBlock if spec.block == "basic" else Bottleneck
    in_ch = spec.stem_channels if stage == 0 else spec.out_width(stage - 1)
    blocks = []
    for b in range(spec.stage_blocks[stage]):
        stride = spec.stage_strides[stage] if b == 0 else 1
        blocks.append(block(spec, in_ch, spec.stage_widths[stage], stride))
        in_ch = spec.out_width(stage)
    return nn.Sequential(*blocks)


class Trunk(nn.Module):
    """Stem + stages 1-2 (the shared former encoder)."""

    def __init__(self, spec: StageEncoderSpec):
        super().__init__()
        self.stem = make_stem(spec)
        self.stage1 = make_stage(spec, 0)
        self.stage2 = make_stage(spec, 1)

    def forward(self, x):
        return self.stage2(self.stage1(self.stem(x)))


class LatterEncoder(nn.Module):
    """Stages 3-4 of one stream; exposes the stage-3 map as a tap."""

    def __init__(self, spec: StageEncoderSpec):
        super().__init__()
        self.stage3 = make_stage(spec, 2)
        self.stage4 = make_stage(spec, 3)

    def forward(self, shared):
        fmap = self.stage3(shared)
        v = self.stage4(fmap).mean(dim=(2, 3))
        return fmap, v


@dataclass
class ForwardOutputs:
    v_r: torch.Tensor | None = None
    v_i: torch.Tensor | None = None
    f_r: torch.Tensor | None = None
    f_i: torch.Tensor | None = None
    f_dis_i: torch.Tensor | None = None
    fmap_s_r: torch.Tensor | None = None
    fmap_s_i: torch.Tensor | None = None


STREAMS = ("reid", "illum")


class TwoStreamNet(nn.Module):
    def __init__(self, spec: StageEncoderSpec, n_person: int, n_illu: int):
        super().__init__()
        self.spec = spec
        self.n_person = n_person
        self.n_illu = n_illu
        self.fe_s = Trunk(spec)
        self.le_r = LatterEncoder(spec)
        self.le_i = LatterEncoder(spec)
        self.fc_id = nn.Linear(spec.embedding_dim, n_person)
        self.fc_illu = nn.Linear(spec.embedding_dim, n_illu)

    def forward(
        self,
        images: torch.Tensor,
        freeze_fc_illu_path: bool = True,
        streams: Iterable[str] = STREAMS,
        dis_path: bool = True,
    ) -> ForwardOutputs:
        """Run the requested streams.

        ``f_dis_i`` is the illumination head applied to the ReID embedding;
        with ``freeze_fc_illu_path`` the head's weights are detached so
        gradients reach ``v_r`` but never ``fc_illu``.
        """
        streams = tuple(streams)
        unknown = set(streams) - set(STREAMS)
        if unknown:
            raise ValueError(f"unknown streams {sorted(unknown)}")
        check_input(self.spec, images)
        shared = self.fe_s(images)
        out = ForwardOutputs()
        if "reid" in streams:
            out.fmap_s_r, out.v_r = self.le_r(shared)
            out.f_r = self.fc_id(out.v_r)
            if dis_path:
                w, b = self.fc_illu.weight, self.fc_illu.bias
                if freeze_fc_illu_path:
                    w, b = w.detach(), b.detach()
                out.f_dis_i = F.linear(out.v_r, w, b)
        if "illum" in streams:
            out.fmap_s_i, out.v_i = self.le_i(shared)
            out.f_i = self.fc_illu(out.v_i)
        return out

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "fe_s": list(self.fe_s.parameters()),
            "le_r": list(self.le_r.parameters()),
            "le_i": list(self.le_i.parameters()),
            "fc_id": list(self.fc_id.parameters()),
            "fc_illu": list(self.fc_illu.parameters()),
        }


class TeacherNet(nn.Module):
    """Stem + stages 1-3; returns the stage-3 map. Frozen unless explicitly unfrozen."""

    def __init__(self, spec: StageEncoderSpec):
        super().__init__()
        self.spec = spec
        self.trunk = Trunk(spec)
        self.stage3 = make_stage(spec, 2)
        self.frozen = False

    def forward(self, images):
        return self.stage3(self.trunk(images))

    def freeze(self) -> "TeacherNet":
        self.frozen = True
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def train(self, mode: bool = True):
        # a frozen teacher always runs with inference-mode batch statistics
        return super().train(mode and not self.frozen)


class TeacherClassifier(nn.Module):
    """Full single-stream classifier used to pretrain a teacher."""

    def __init__(self, spec: StageEncoderSpec, n_classes: int):
        super().__init__()
        self.spec = spec
        self.trunk = Trunk(spec)
        self.stage3 = make_stage(spec, 2)
        self.stage4 = make_stage(spec, 3)
        self.fc = nn.Linear(spec.embedding_dim, n_classes)

    def forward(self, images):
        check_input(self.spec, images)
        v = self.stage4(self.stage3(self.trunk(images))).mean(dim=(2, 3))
        return v, self.fc(v)

    def to_teacher(self) -> TeacherNet:
        t = TeacherNet(self.spec)
        t.trunk.load_state_dict(self.trunk.state_dict())
        t.stage3.load_state_dict(self.stage3.state_dict())
        return t.freeze()


def check_input(spec: StageEncoderSpec, images: torch.Tensor) -> None:
    if images.dim() != 4 or images.shape[1] != spec.in_channels:
        raise ValueError(f"expected images of shape (B, {spec.in_channels}, H, W), got {tuple(images.shape)}")


def _init_weights(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_out = m.out_channels * m.kernel_size[0] * m.kernel_size[1]
            with torch.no_grad():
                m.weight.normal_(0.0, float(np.sqrt(2.0 / fan_out)), generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            with torch.no_grad():
                m.weight.normal_(0.0, 0.001, generator=gen)
                m.bias.zero_()


def init_params(spec: StageEncoderSpec, n_person: int, n_illu: int, seed: int) -> TwoStreamNet:
    """Deterministic initialization; both latter encoders start from the same weights."""
    net = TwoStreamNet(spec, n_person, n_illu)
    gen = torch.Generator().manual_seed(seed)
    _init_weights(net.fe_s, gen)
    _init_weights(net.le_r, gen)
    net.le_i.load_state_dict(net.le_r.state_dict())
    _init_weights(net.fc_id, gen)
    _init_weights(net.fc_illu, gen)
    return net


def init_teacher_classifier(spec: StageEncoderSpec, n_classes: int, seed: int) -> TeacherClassifier:
    net = TeacherClassifier(spec, n_classes)
    _init_weights(net, torch.Generator().manual_seed(seed))
    return net


def warm_start_from_teacher(net: TwoStreamNet, teacher: TeacherNet) -> None:
    """Copy the ReID teacher's trunk into FE_S and its stage 3 into the ReID stream."""
    net.fe_s.load_state_dict(teacher.trunk.state_dict())
    net.le_r.stage3.load_state_dict(teacher.stage3.state_dict())


@torch.no_grad()
def forward_teacher(teacher: TeacherNet, images: torch.Tensor) -> torch.Tensor:
    check_input(teacher.spec, images)
    was_training = teacher.training
    teacher.eval()
    try:
        return teacher(images)
    finally:
        teacher.train(was_training)


@torch.no_grad()
def extract_reid_features(net: TwoStreamNet, images, batch_size: int = 256) -> np.ndarray:
    """L2-normalised ReID embeddings, one row per image, as float64."""
    images = to_tensor(images)
    was_training = net.training
    net.eval()
    try:
        feats = []
        for start in range(0, len(images), batch_size):
            out = net(images[start:start + batch_size], streams=("reid",), dis_path=False)
            feats.append(out.v_r.double())
        v = torch.cat(feats) if feats else torch.zeros(0, net.spec.embedding_dim, dtype=torch.float64)
    finally:
        net.train(was_training)
    v = v / v.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return v.numpy()


def to_tensor(images) -> torch.Tensor:
    """(B, H, W, C) array -> (B, C, H, W) float32 tensor; tensors pass through unchanged."""
    if isinstance(images, torch.Tensor):
        return images
    arr = np.ascontiguousarray(np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2))
    return torch.from_numpy(arr)


__all__ = [
    "ForwardOutputs",
    "StageEncoderSpec",
    "TeacherClassifier",
    "TeacherNet",
    "TwoStreamNet",
    "extract_reid_features",
    "forward_teacher",
    "init_params",
    "init_teacher_classifier",
    "to_tensor",
    "warm_start_from_teacher",
]
