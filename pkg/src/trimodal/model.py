"""The full tri-modal network and batch collation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, Tensor
from .backbone import AUDIO, TEXT, VISUAL, FusedFeatures, Transformer, encode, fuse
from .config import ModelConfig
from .encoders import STACK, AudioEncoder, TextEncoder, VisualEncoder, expand_ids, stack_fbank
from .nn import Module
from .objective import PredictionHead
from .records import KIND_INPUTS, Record

TASK_MODALITIES = {
    "ASR": (False, True, False),
    "AVSR": (True, True, False),
    "VSR": (True, False, False),
}


@dataclass
class Batch:
    """Right-padded inputs.  ``text`` holds frame-level phoneme ids."""

    visual: np.ndarray | None  # (B, T, H, W)
    audio: np.ndarray | None  # (B, T, 104)
    text: np.ndarray | None  # (B, T)
    present: np.ndarray  # (B, 3)
    lengths: np.ndarray
    targets: np.ndarray | None  # (B, T), -1 on padding
    uids: list

    @property
    def size(self) -> int:
        return len(self.lengths)


def frame_text(r: Record) -> np.ndarray:
    if r.durations is None:
        raise ContractError(f"record {r.uid} has phonemes but no durations to place them on frames")
    return expand_ids(r.phonemes, r.durations)


def collate(records, modalities=None, roi: int = 16) -> Batch:
    """Pad records into one batch.  ``modalities`` (visual, audio, text) restricts which
    inputs are used; a restricted-away input is treated exactly like a missing one."""
    records = list(records)
    if not records:
        raise ContractError("cannot collate an empty batch")
    use = np.array([True, True, True]) if modalities is None else np.asarray(modalities, dtype=bool)
    present = np.zeros((len(records), 3), dtype=bool)
    lengths = np.zeros(len(records), dtype=np.int64)
    for b, r in enumerate(records):
        present[b] = [r.visual is not None, r.audio is not None, r.phonemes is not None]
        present[b] &= use
        lengths[b] = r.frames
        if not present[b].any():
            raise ContractError(f"record {r.uid} has none of the requested modalities")
    frames = int(lengths.max())
    visual = audio = text = None
    if present[:, VISUAL].any():
        visual = np.zeros((len(records), frames, roi, roi))
    if present[:, AUDIO].any():
        audio = np.zeros((len(records), frames, STACK * 26))
    if present[:, TEXT].any():
        text = np.zeros((len(records), frames), dtype=np.int64)
    targets = None
    if all(r.target is not None for r in records):
        targets = np.full((len(records), frames), -1, dtype=np.int64)
    for b, r in enumerate(records):
        n = lengths[b]
        if present[b, VISUAL]:
            visual[b, :n] = r.visual
        if present[b, AUDIO]:
            stacked = stack_fbank(r.audio)
            if len(stacked) != n:
                raise ContractError(f"record {r.uid}: {len(stacked)} audio frames for {n} frames")
            audio[b, :n] = stacked
        if present[b, TEXT]:
            ids = frame_text(r)
            if len(ids) != n:
                raise ContractError(f"record {r.uid}: durations cover {len(ids)} frames, expected {n}")
            text[b, :n] = ids
        if targets is not None:
            if len(r.target) != n:
                raise ContractError(f"record {r.uid}: target has {len(r.target)} units for {n} frames")
            targets[b, :n] = r.target
    return Batch(visual, audio, text, present, lengths, targets, [r.uid for r in records])


class TriModalModel(Module):
    def __init__(self, cfg: ModelConfig, phonemes: int, units: int, roi: int = 16):
        rng = np.random.default_rng([cfg.init_seed, 0x3D])
        self.cfg = cfg
        self.roi = roi
        width = 3 * cfg.dim
        self.visual = VisualEncoder(cfg.dim, rng, roi=roi, channels=cfg.visual_channels)
        self.audio = AudioEncoder(cfg.dim, rng)
        self.text = TextEncoder(cfg.dim, phonemes, rng)
        self.encoder = Transformer(width, cfg.layers, cfg.heads, cfg.ffn_mult * width, rng, max_len=cfg.max_len)
        self.head = PredictionHead(width, cfg.embed_dim, units, rng, tau=cfg.tau)

    def fused(self, batch: Batch) -> FusedFeatures:
        z_v = self.visual(batch.visual) if batch.visual is not None else None
        z_a = self.audio(batch.audio) if batch.audio is not None else None
        z_p = self.text(batch.text) if batch.text is not None else None
        f = fuse(z_v, z_a, z_p, lengths=batch.lengths)
        f.present = f.present & batch.present
        return f

    def contextual(self, batch: Batch) -> Tensor:
        """h_f without masking or modality dropout."""
        return encode(self.fused(batch), self.encoder)


def pooled_embeddings(model: TriModalModel, records, modalities=None, chunk: int = 32) -> np.ndarray:
    """Mean of h_f over each utterance's valid frames."""
    out = []
    records = list(records)
    for lo in range(0, len(records), chunk):
        batch = collate(records[lo : lo + chunk], modalities, model.roi)
        h = model.contextual(batch).data
        for b, n in enumerate(batch.lengths):
            out.append(h[b, :n].mean(axis=0))
    return np.array(out)


def kind_modalities(kind: str) -> tuple:
    return KIND_INPUTS[kind]
