"""Segmenters the adapter can host.

A segmenter turns an image into instance masks once per session.  The
stub finds one mask per color prototype present in the image, which is
deterministic and needs no weights; "sam:<checkpoint>" hosts a real
segment-anything model when that package and checkpoint are available.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from quadcd_adapter.images import COLOR_PROTOTYPES, color_mask
from quadcd_adapter.models import ModelLoadError


@dataclass(frozen=True)
class SegmentMask:
    """One instance mask: stable id plus a boolean pixel mask."""

    id: str
    mask: np.ndarray

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.mask))


class Segmenter:
    name = "segmenter"

    def segment(self, image: np.ndarray) -> tuple[SegmentMask, ...]:
        raise NotImplementedError


class StubSegmenter(Segmenter):
    """One mask per color prototype with nonzero coverage."""

    name = "stub"

    def segment(self, image: np.ndarray) -> tuple[SegmentMask, ...]:
        masks = []
        for name, proto in COLOR_PROTOTYPES.items():
            mask = color_mask(image, proto)
            if mask.any():
                masks.append(SegmentMask(id=name, mask=mask))
        return tuple(masks)


class SamSegmenter(Segmenter):
    """Automatic-mask-generation wrapper around segment-anything."""

    name = "sam"

    def __init__(self, generator):
        self._generator = generator

    @classmethod
    def load(cls, checkpoint: str, device: str) -> "SamSegmenter":
        try:
            from segment_anything import SamAutomaticMaskGenerator, sam_model_registry
        except ImportError as exc:
            raise ModelLoadError(
                f"sam segmenter needs the segment-anything package: {exc}"
            ) from None
        try:
            sam = sam_model_registry["vit_h"](checkpoint=checkpoint)
            sam.to(device)
        except Exception as exc:
            raise ModelLoadError(f"cannot load sam checkpoint {checkpoint!r}: {exc}") from None
        return cls(SamAutomaticMaskGenerator(sam))

    def segment(self, image: np.ndarray) -> tuple[SegmentMask, ...]:
        as_uint8 = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
        raw = self._generator.generate(as_uint8)
        return tuple(
            SegmentMask(id=f"sam-{i}", mask=np.asarray(entry["segmentation"], dtype=bool))
            for i, entry in enumerate(raw)
        )


def load_segmenter(identifier: str, device: str = "cpu") -> Segmenter:
    """Resolve a segmenter identifier from AdapterConfig."""
    kind, _, tail = identifier.partition(":")
    if kind == "stub":
        if tail:
            raise ModelLoadError(f"stub segmenter takes no argument, got {identifier!r}")
        return StubSegmenter()
    if kind == "sam":
        if not tail:
            raise ModelLoadError("sam segmenter identifier needs a checkpoint path")
        return SamSegmenter.load(tail, device)
    raise ModelLoadError(f"unknown segmenter identifier {identifier!r}")
