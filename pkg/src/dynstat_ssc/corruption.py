"""Closed-form photometric corruptions at severities 1, 3 and 5."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

KINDS = ("brightness", "contrast", "dark")
SEVERITIES = (1, 3, 5)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption {self.kind!r}; expected one of {KINDS}")
        if self.severity not in SEVERITIES:
            raise ValueError(f"severity must be one of {SEVERITIES}, got {self.severity}")


def corrupt(image, spec: CorruptionSpec):
    """Apply to an array/tensor with values in [0, 1]; output stays in [0, 1]."""
    s = spec.severity
    if spec.kind == "brightness":
        out = image + 0.1 * s
    elif spec.kind == "contrast":
        out = 0.5 + (image - 0.5) * (1 - 0.12 * s)
    else:
        out = image * (1 - 0.12 * s)
    if torch.is_tensor(out):
        return out.clamp(0.0, 1.0)
    return np.clip(out, 0.0, 1.0)
