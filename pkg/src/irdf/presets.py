"""Named experiment set-ups: data generator, training overrides and slope grid.

None of these numbers come from a published table; they are the settings
that this package's acceptance tests were tuned and checked with.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigurationError


@dataclass(frozen=True)
class Preset:
    name: str
    data: dict
    train: dict = field(default_factory=dict)
    lams: tuple[float, ...] = ()
    oracle: dict | None = None
    warm_start: bool = False
    description: str = ""


_COMMON = {"epochs": 300, "t": 10, "n_eval": 2000, "m_eval": 2000}

PRESETS = {
    "gaussian": Preset(
        "gaussian",
        data={"kind": "gaussian", "n": 20000, "seed": 0},
        train=dict(_COMMON),
        lams=(0.6, 0.8, 1.0, 1.5, 2.0, 3.0),
        oracle={"model": "gaussian"},
        description="3-to-2 linear Gaussian observation model, squared error",
    ),
    "binary": Preset(
        "binary",
        data={"kind": "binary", "A": 1.0, "sigma": 1.0, "n": 20000, "seed": 0},
        train=dict(_COMMON, distortion="hamming"),
        lams=(2.0, 3.0, 4.0, 6.0, 8.0, 12.0),
        oracle={"model": "binary"},
        description="binary label seen through Gaussian noise, Hamming loss",
    ),
    "highdim": Preset(
        "highdim",
        data={"kind": "highdim", "n": 20000, "seed": 1, "seed_H": 0},
        train=dict(_COMMON, epochs=600, g_hidden=(128, 128), basis_dim=6),
        lams=(0.1, 0.2, 0.4, 0.8),
        oracle={"model": "gaussian"},
        description="120-to-6 sparse observation model, squared error",
    ),
    "digits": Preset(
        "digits",
        data={"kind": "digits"},
        train=dict(_COMMON, distortion="log_loss", g_hidden=(128, 128)),
        lams=(0.3, 0.6, 1.0, 2.0, 4.0),
        oracle=None,
        description="handwritten digits, label from image, logarithmic loss",
    ),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
