"""Multi-resolution HRNet classifier over single-channel log-mel inputs.

Layout: 3x3 stem -> stages of per-branch residual blocks followed by an
all-to-all exchange -> 1x1 fuse layer at full resolution -> GAP -> linear
-> softmax. Branch ``r`` runs at ``ceil(dim / 2**r)`` and a new branch is
spawned from the lowest one at the end of every stage but the last.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class HRNetConfig:
    in_mels: int = 64
    in_frames: int = 300
    stem_channels: int = 16
    n_stages: int = 3
    branch_channels: tuple[int, ...] = (16, 32, 64)
    blocks_per_branch: int = 1
    n_classes: int = 8
    fuse_channels: int = 64

    def __post_init__(self):
        object.__setattr__(self, "branch_channels", tuple(int(c) for c in self.branch_channels))
        bc = self.branch_channels
        if self.n_stages < 1:
            raise ValueError("n_stages must be >= 1")
        if not bc or any(c < 1 for c in bc):
            raise ValueError("branch_channels must be a non-empty list of positive ints")
        if any(b < a for a, b in zip(bc, bc[1:])):
            raise ValueError(f"branch_channels must be non-decreasing, got {list(bc)}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if min(self.stem_channels, self.fuse_channels, self.blocks_per_branch) < 1:
            raise ValueError("stem_channels, fuse_channels and blocks_per_branch must be >= 1")
        if self.in_mels < 1 or self.in_frames < 1:
            raise ValueError(f"input dims must be positive, got {self.in_mels}x{self.in_frames}")

    @property
    def n_branches(self) -> int:
        return min(self.n_stages, len(self.branch_channels))

    def branches_in_stage(self, s: int) -> int:
        return min(s + 1, len(self.branch_channels))

    def branch_dims(self, r: int) -> tuple[int, int]:
        h, w = self.in_mels, self.in_frames
        for _ in range(r):
            h, w = ad.conv_out_size(h, 3, 2, 1), ad.conv_out_size(w, 3, 2, 1)
        return h, w

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["branch_channels"] = list(self.branch_channels)
        return d


def _conv_shapes(cfg: HRNetConfig) -> list[tuple[str, tuple[int, int, int, int]]]:
    """Every conv kernel in construction order as (name, (out, in, kh, kw))."""
    bc = cfg.branch_channels
    shapes = [("stem", (cfg.stem_channels, 1, 3, 3))]
    if cfg.stem_channels != bc[0]:
        shapes.append(("stem_proj", (bc[0], cfg.stem_channels, 1, 1)))
    for s in range(cfg.n_stages):
        nb = cfg.branches_in_stage(s)
        for r in range(nb):
            for b in range(cfg.blocks_per_branch):
                for k in (1, 2):
                    shapes.append((f"s{s}.b{r}.blk{b}.conv{k}", (bc[r], bc[r], 3, 3)))
        for j in range(nb):
            for i in range(nb):
                if i > j:
                    shapes.append((f"s{s}.x{i}to{j}", (bc[j], bc[i], 1, 1)))
                elif i < j:
                    for step in range(j - i):
                        out_c = bc[j] if step == j - i - 1 else bc[i]
                        shapes.append((f"s{s}.x{i}to{j}.down{step}", (out_c, bc[i], 3, 3)))
        if cfg.branches_in_stage(s + 1) > nb and s + 1 < cfg.n_stages:
            shapes.append((f"s{s}.new{nb}", (bc[nb], bc[nb - 1], 3, 3)))
    for r in range(cfg.n_branches):
        shapes.append((f"fuse.b{r}", (cfg.fuse_channels, bc[r], 1, 1)))
    return shapes


def param_manifest(cfg: HRNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for name, shape in _conv_shapes(cfg):
        out.append((f"{name}.weight", shape))
        out.append((f"{name}.bias", (shape[0],)))
    out.append(("head.weight", (cfg.n_classes, cfg.fuse_channels)))
    out.append(("head.bias", (cfg.n_classes,)))
    return out


@dataclass
class HRNetModel:
    config: HRNetConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, v.shape) for k, v in self.params.items()]

    def param_count(self) -> int:
        return sum(v.size for v in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            a = arrays[k]
            if a.shape != t.shape:
                raise ValueError(f"parameter {k}: expected {t.shape}, got {a.shape}")
            t.data = np.array(a, dtype=np.float64)

    def __call__(self, x) -> Tensor:
        return forward(x, self)


def build(config: HRNetConfig, rng: np.random.Generator) -> HRNetModel:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    params = {}
    for name, shape in param_manifest(config):
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            data = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return HRNetModel(config, params)


def _conv(x: Tensor, p: dict[str, Tensor], name: str, stride: int = 1) -> Tensor:
    w = p[f"{name}.weight"]
    return ad.conv2d(x, w, p[f"{name}.bias"], stride=stride, padding=w.shape[2] // 2)


def hrim_forward(mel: Tensor, model: HRNetModel) -> Tensor:
    cfg = model.config
    expect = (1, cfg.in_mels, cfg.in_frames)
    if mel.data.ndim != 4 or mel.shape[1:] != expect:
        raise ad.ShapeError(f"model expects N x {' x '.join(map(str, expect))} input, got {mel.shape}")
    x = ad.relu(_conv(mel, model.params, "stem"))
    if "stem_proj.weight" in model.params:
        x = ad.relu(_conv(x, model.params, "stem_proj"))
    return x


def residual_block(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    h = ad.relu(_conv(x, params, f"{name}.conv1"))
    return ad.relu(ad.add(x, _conv(h, params, f"{name}.conv2")))


def _resize_to(x: Tensor, factor: int, dims: tuple[int, int]) -> Tensor:
    return ad.crop(ad.upsample_nearest(x, factor), *dims)


def exchange_fuse(branches: list[Tensor], params: dict[str, Tensor], stage: int, spawn: bool = False) -> list[Tensor]:
    """All-to-all exchange: output j = relu(sum_i T_ij(branch_i)).

    ``spawn`` appends a new half-resolution branch built from the lowest output.
    """
    nb = len(branches)
    for r in range(1, nb):
        h, w = branches[r - 1].shape[2:]
        expect = (ad.conv_out_size(h, 3, 2, 1), ad.conv_out_size(w, 3, 2, 1))
        if branches[r].shape[2:] != expect or branches[r].shape[0] != branches[0].shape[0]:
            raise ad.ShapeError(f"branch {r} has shape {branches[r].shape}, expected spatial {expect}")
    outs = []
    for j in range(nb):
        acc = None
        dims = branches[j].shape[2:]
        for i in range(nb):
            if i == j:
                t = branches[i]
            elif i > j:
                t = _resize_to(_conv(branches[i], params, f"s{stage}.x{i}to{j}"), 2 ** (i - j), dims)
            else:
                t = branches[i]
                for step in range(j - i):
                    t = _conv(t, params, f"s{stage}.x{i}to{j}.down{step}", stride=2)
                    if step < j - i - 1:
                        t = ad.relu(t)
            acc = t if acc is None else ad.add(acc, t)
        outs.append(ad.relu(acc))
    if spawn:
        outs.append(ad.relu(_conv(outs[-1], params, f"s{stage}.new{nb}", stride=2)))
    return outs


def fuse_layer(branches: list[Tensor], params: dict[str, Tensor]) -> Tensor:
    """Project every branch to the fuse width, bring it to full resolution, sum, ReLU.

    The 1x1 projection commutes with nearest upsampling, so it runs at each
    branch's own resolution.
    """
    dims = branches[0].shape[2:]
    acc = None
    for r, b in enumerate(branches):
        t = _resize_to(_conv(b, params, f"fuse.b{r}"), 2**r, dims)
        acc = t if acc is None else ad.add(acc, t)
    return ad.relu(acc)


def logits(f_fl: Tensor, params: dict[str, Tensor]) -> Tensor:
    return ad.linear(ad.global_avg_pool(f_fl), params["head.weight"], params["head.bias"])


def head(f_fl: Tensor, params: dict[str, Tensor]) -> Tensor:
    return ad.softmax(logits(f_fl, params))


def branch_outputs(mel: Tensor, model: HRNetModel) -> list[Tensor]:
    """Multi-resolution maps after the last stage, highest resolution first."""
    cfg, p = model.config, model.params
    branches = [hrim_forward(mel, model)]
    for s in range(cfg.n_stages):
        branches = [_blocks(b, p, s, r, cfg.blocks_per_branch) for r, b in enumerate(branches)]
        spawn = s + 1 < cfg.n_stages and cfg.branches_in_stage(s + 1) > len(branches)
        branches = exchange_fuse(branches, p, s, spawn=spawn)
    return branches


def features(mel: Tensor, model: HRNetModel) -> Tensor:
    """Fuse-layer output: N x fuse_channels x in_mels x in_frames."""
    return fuse_layer(branch_outputs(mel, model), model.params)


def _blocks(x: Tensor, p, s: int, r: int, n: int) -> Tensor:
    for b in range(n):
        x = residual_block(x, p, f"s{s}.b{r}.blk{b}")
    return x


def forward(mel, model: HRNetModel) -> Tensor:
    if not isinstance(mel, Tensor):
        mel = Tensor(mel)
    return head(features(mel, model), model.params)
