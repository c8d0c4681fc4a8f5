from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..graph_encoder import Region

SPLITS = ("train", "val", "test")


@dataclass
class SceneSample:
    id: int
    regions: list[Region]
    references: list[str]
    split: str = "train"
    image_size: tuple[float, float] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.regions:
            raise ValueError(f"sample {self.id} has no regions")
        if not self.references:
            raise ValueError(f"sample {self.id} has no reference captions")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")

    def features(self) -> np.ndarray:
        return np.stack([r.feature for r in self.regions])

    def boxes(self) -> np.ndarray:
        return np.array([r.box for r in self.regions], dtype=np.float64)
