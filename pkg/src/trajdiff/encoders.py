"""Toy text and image encoders with pluggable ablation axes.

Stand-ins for pretrained encoders, trained jointly with the policy. They
keep the two ablation switches intact: patch-level vs. per-pixel visual
features, and a single text embedding vs. two concatenated ones where the
second encoder receives the task verb as a privileged token.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import BadDims, EmptyText, ShapeMismatch, TagMismatch
from .nn import Dense, fan_in_uniform_
from .simbench import tasks

MAX_TOKENS = 12


@dataclass(frozen=True)
class Instruction:
    """A templated natural-language command with its bound slot values."""

    text: str
    template_id: str
    slots: dict

    def __post_init__(self):
        if not self.text.strip():
            raise EmptyText("instruction text is empty")
        if self.template_id not in tasks.TEMPLATES:
            raise KeyError(f"unknown template {self.template_id!r}")
        object.__setattr__(self, "slots", dict(self.slots))

    @staticmethod
    def from_task(task: tasks.TaskSpec, rng) -> "Instruction":
        return Instruction(tasks.phrase_task(task, rng), task.template_id, task.slots)


@dataclass(frozen=True)
class TextEmbedding:
    values: torch.Tensor
    tag: str  # "A", "B", or "A+B"

    def __post_init__(self):
        if self.tag not in ("A", "B", "A+B"):
            raise TagMismatch(f"unknown tag {self.tag!r}")

    @property
    def dim(self) -> int:
        return self.values.shape[-1]


class TextEncoder(nn.Module):
    """Bag of learned token vectors with a positional mix.

    With `privileged_verb` set, the task verb (looked up from the template
    registry) contributes a dedicated embedding, making this encoder
    sensitive to the action even when the surface text is held fixed.
    """

    def __init__(self, d_out: int, tag: str, generator: torch.Generator,
                 privileged_verb: bool = False):
        super().__init__()
        self.tag = tag
        self.d_out = d_out
        self.privileged_verb = privileged_verb
        vocab = tasks.vocabulary()
        self.token_ids = {tok: i + 1 for i, tok in enumerate(vocab)}  # 0 = unknown
        self.token_emb = nn.Parameter(
            fan_in_uniform_(torch.empty(len(vocab) + 1, d_out), d_out, generator)
        )
        self.pos_mix = nn.Parameter(torch.ones(MAX_TOKENS))
        if privileged_verb:
            self.verb_ids = {tid: i for i, tid in enumerate(tasks.TEMPLATE_IDS)}
            self.verb_emb = nn.Parameter(
                fan_in_uniform_(torch.empty(len(self.verb_ids), d_out), d_out, generator)
            )
        self.out = Dense(d_out, d_out, generator)

    def encode(self, instr: Instruction) -> TextEmbedding:
        if not instr.text.strip():
            raise EmptyText("instruction text is empty")
        toks = tasks.tokenize(instr.text)[:MAX_TOKENS]
        ids = torch.tensor([self.token_ids.get(t, 0) for t in toks])
        vecs = self.token_emb[ids] * self.pos_mix[: len(toks)].unsqueeze(-1)
        pooled = vecs.mean(dim=0)
        if self.privileged_verb:
            pooled = pooled + self.verb_emb[self.verb_ids[instr.template_id]]
        return TextEmbedding(self.out(pooled), self.tag)

    def forward(self, instr: Instruction) -> torch.Tensor:
        return self.encode(instr).values


def encode_text_a(instr: Instruction, encoder: TextEncoder) -> TextEmbedding:
    if encoder.tag != "A":
        raise TagMismatch("encoder is not the primary text encoder")
    return encoder.encode(instr)


def encode_text_b(instr: Instruction, encoder: TextEncoder) -> TextEmbedding:
    if encoder.tag != "B" or not encoder.privileged_verb:
        raise TagMismatch("encoder is not the verb-privileged text encoder")
    return encoder.encode(instr)


def concat_text(a: TextEmbedding, b: TextEmbedding) -> TextEmbedding:
    """Fixed-order concatenation: the primary embedding first."""
    if a.tag != "A" or b.tag != "B":
        raise TagMismatch(f"expected tags A and B, got {a.tag!r} and {b.tag!r}")
    return TextEmbedding(torch.cat([a.values, b.values], dim=-1), "A+B")


def _check_image(rgb: torch.Tensor) -> torch.Tensor:
    if rgb.ndim == 3:
        rgb = rgb.unsqueeze(0)
    if rgb.ndim != 4 or rgb.shape[-1] != 3:
        raise ShapeMismatch(f"expected (H, W, 3) or (B, H, W, 3), got {tuple(rgb.shape)}")
    return rgb


class PatchImageEncoder(nn.Module):
    """One learned feature vector per PxP patch, replicated to its pixels."""

    def __init__(self, d: int = 32, patch: int = 4, generator: torch.Generator = None):
        super().__init__()
        self.d = d
        self.patch = patch
        self.proj = Dense(patch * patch * 3, d, generator)

    def forward(self, rgb: torch.Tensor) -> torch.Tensor:
        unbatched = rgb.ndim == 3
        rgb = _check_image(rgb)
        b, h, w, _ = rgb.shape
        p = self.patch
        if h % p or w % p:
            raise BadDims(f"image {h}x{w} not divisible by patch size {p}")
        tiles = rgb.reshape(b, h // p, p, w // p, p, 3).permute(0, 1, 3, 2, 4, 5)
        feats = self.proj(tiles.reshape(b, h // p, w // p, p * p * 3))
        full = feats.repeat_interleave(p, dim=1).repeat_interleave(p, dim=2)
        return full.squeeze(0) if unbatched else full


class DenseImageEncoder(nn.Module):
    """Small convolutional encoder: a distinct feature vector per pixel."""

    def __init__(self, d: int = 32, generator: torch.Generator = None):
        super().__init__()
        self.d = d
        self.conv1 = nn.Conv2d(3, d // 2, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(d // 2, d, kernel_size=3, padding=1)
        for conv in (self.conv1, self.conv2):
            fan_in = conv.in_channels * 9
            fan_in_uniform_(conv.weight, fan_in, generator)
            fan_in_uniform_(conv.bias, fan_in, generator)

    def forward(self, rgb: torch.Tensor) -> torch.Tensor:
        unbatched = rgb.ndim == 3
        rgb = _check_image(rgb)
        x = rgb.permute(0, 3, 1, 2)
        x = torch.nn.functional.gelu(self.conv1(x))
        x = self.conv2(x)
        out = x.permute(0, 2, 3, 1)
        return out.squeeze(0) if unbatched else out


def build_image_encoder(vision_mode: str, d: int, patch: int,
                        generator: torch.Generator) -> nn.Module:
    if vision_mode == "patch":
        return PatchImageEncoder(d=d, patch=patch, generator=generator)
    if vision_mode == "dense":
        return DenseImageEncoder(d=d, generator=generator)
    raise ShapeMismatch(f"unknown vision mode {vision_mode!r}")
