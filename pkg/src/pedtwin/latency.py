"""Per-stage latency models parameterised by measured mean and std (ms).

Samples are Gaussian truncated at zero. The underlying location and scale are
moment-matched so the *truncated* distribution keeps the configured mean and
standard deviation; otherwise stages with a large std/mean ratio (reception:
1.94 +/- 1.69 ms) would be biased upward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import optimize, stats

STAGES = ("reception", "preprocessing", "detection", "tracking", "msg_create", "msg_retrieve")

# mean, std in ms
STAGE_DEFAULTS = {
    "reception": (1.94, 1.69),
    "preprocessing": (0.108, 0.024),
    "tracking": (0.973, 0.173),
    "msg_create": (0.081, 0.021),
}
DETECTOR_LATENCY = {
    "small": (4.034, 0.084),
    "medium": (7.216, 0.086),
    "large": (11.140, 1.800),
}
NETWORK_LATENCY = {
    "ethernet": (3.21, 0.315),
    "wifi": (6.86, 1.19),
    "lte": (45.72, 15.30),
    "fiveg": (39.21, 7.12),
}
NETWORK_PROFILES = tuple(NETWORK_LATENCY)

# beyond this many std above zero truncation changes nothing measurable
_NO_TRUNCATION_Z = 8.0


def _truncated_moments(loc: float, scale: float) -> tuple[float, float]:
    a = -loc / scale
    m, v = stats.truncnorm.stats(a, np.inf, loc=loc, scale=scale, moments="mv")
    return float(m), float(math.sqrt(v))


@lru_cache(maxsize=None)
def match_truncated_normal(mean: float, std: float) -> tuple[float, float]:
    """Location/scale of a zero-truncated normal whose mean and std equal the
    targets."""
    if std == 0 or mean / std > _NO_TRUNCATION_Z:
        return mean, std
    if std >= mean:
        raise ValueError("zero-truncated normal cannot have std >= mean")

    def resid(x):
        loc, log_scale = x
        m, s = _truncated_moments(loc, math.exp(log_scale))
        return [(m - mean) / std, (s - std) / std]

    sol = optimize.root(resid, [mean, math.log(std)], method="hybr")
    loc, scale = float(sol.x[0]), float(math.exp(sol.x[1]))
    m, s = _truncated_moments(loc, scale)
    if not (sol.success and abs(m - mean) < 1e-9 * max(1, mean) + 1e-12 and abs(s - std) < 1e-9 * max(1, std) + 1e-12):
        raise ValueError(f"could not match truncated normal to ({mean}, {std})")
    return loc, scale


@dataclass(frozen=True)
class StageLatencyModel:
    stage: str
    mean: float
    std: float
    _params: tuple[float, float] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.mean < 0 or self.std < 0:
            raise ValueError(f"{self.stage}: mean and std must be >= 0")
        object.__setattr__(self, "_params", match_truncated_normal(float(self.mean), float(self.std)))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        loc, scale = self._params
        if scale == 0:
            return np.full(n, float(self.mean))
        out = rng.normal(loc, scale, n)
        bad = out < 0
        while bad.any():
            out[bad] = rng.normal(loc, scale, int(bad.sum()))
            bad = out < 0
        return out


def default_stage_models(network: str = "fiveg", detector: str = "large") -> dict[str, StageLatencyModel]:
    models = {s: StageLatencyModel(s, *v) for s, v in STAGE_DEFAULTS.items()}
    models["detection"] = StageLatencyModel("detection", *DETECTOR_LATENCY[detector])
    models["msg_retrieve"] = StageLatencyModel("msg_retrieve", *NETWORK_LATENCY[network])
    return {s: models[s] for s in STAGES}
