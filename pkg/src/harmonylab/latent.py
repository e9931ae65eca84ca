from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MODALITIES = ("video", "audio", "reference")


@dataclass(frozen=True)
class Latent:
    """A modality-tagged ``[T, P]`` frame sequence."""

    modality: str
    frames: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"latent frames must be [T>=1, P], got {self.frames.shape}")

    @property
    def T(self) -> int:
        return self.frames.shape[0]


@dataclass
class CondSet:
    """Prompt / speech embeddings and an optional reference latent.

    Arrays may carry a leading batch axis.  ``ref_present`` masks the
    reference per batch row; rows with a missing reference use the model's
    learned null tokens.
    """

    prompt_emb: np.ndarray
    speech_emb: np.ndarray
    reference: np.ndarray | None = None
    ref_present: np.ndarray | None = field(default=None)

    @property
    def batched(self) -> bool:
        return self.prompt_emb.ndim == 2

    def as_batch(self) -> "CondSet":
        if self.batched:
            return self
        ref = None if self.reference is None else self.reference[None]
        mask = None if self.ref_present is None else np.atleast_1d(self.ref_present)
        return CondSet(self.prompt_emb[None], self.speech_emb[None], ref, mask)

    @staticmethod
    def stack(conds: list["CondSet"]) -> "CondSet":
        conds = [c.as_batch() for c in conds]
        prompt = np.concatenate([c.prompt_emb for c in conds])
        speech = np.concatenate([c.speech_emb for c in conds])
        if all(c.reference is None for c in conds):
            return CondSet(prompt, speech, None, None)
        shape = next(c.reference.shape[1:] for c in conds if c.reference is not None)
        refs, mask = [], []
        for c in conds:
            if c.reference is None:
                refs.append(np.zeros((c.prompt_emb.shape[0], *shape)))
                mask.append(np.zeros(c.prompt_emb.shape[0]))
            else:
                refs.append(c.reference)
                mask.append(np.ones(c.prompt_emb.shape[0]) if c.ref_present is None else c.ref_present)
        return CondSet(prompt, speech, np.concatenate(refs), np.concatenate(mask).astype(np.float64))

    def nulled(self) -> "CondSet":
        """Unconditional version: zero embeddings, no reference."""
        return CondSet(np.zeros_like(self.prompt_emb), np.zeros_like(self.speech_emb), None, None)
