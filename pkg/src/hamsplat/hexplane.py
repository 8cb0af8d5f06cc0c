"""Six-plane multi-resolution spatial-temporal feature encoder.

A 4D coordinate u = (x, y, z, t), normalized to [0, 1]^4, is projected onto
the six axis pairs (xy, xz, yz, xt, yt, zt), each plane is sampled
bilinearly, and the six lookups are fused by elementwise product.  Levels at
increasing resolution are concatenated.  Plane parameters initialize near 1
so the multiplicative fusion starts with usable signal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

PLANE_AXES = (("x", "y"), ("x", "z"), ("y", "z"), ("x", "t"), ("y", "t"), ("z", "t"))
_AXIS_INDEX = {"x": 0, "y": 1, "z": 2, "t": 3}


@dataclass
class PlaneGrid:
    """One learnable 2D feature grid addressed by a (normalized) axis pair."""

    axes: tuple           # e.g. ("x", "t")
    params: ad.Tensor     # (H, W, C) leaf

    def __post_init__(self):
        h, w, _ = self.params.shape
        if h < 2 or w < 2:
            raise ValueError(f"plane resolution {h}x{w} too small for bilinear lookup")

    @property
    def name(self) -> str:
        return "".join(self.axes)


class HexPlaneEncoder:
    """Multi-resolution stack of six-plane levels with product fusion.

    ``resolutions`` are base_resolution * {1, u1, u2, ...}; all six planes of
    a level share one square resolution and ``channels`` feature channels.
    Out-of-range queries are clamped and counted in ``clamp_count``.
    """

    def __init__(self, base_resolution: int = 64, upsampling=(2, 4), channels: int = 8,
                 init_low: float = 0.9, init_high: float = 1.1, seed: int = 0):
        factors = [1] + list(upsampling)
        if any(factors[i] >= factors[i + 1] for i in range(len(factors) - 1)):
            raise ValueError(f"upsampling factors must strictly increase: {upsampling}")
        self.base_resolution = int(base_resolution)
        self.upsampling = tuple(int(u) for u in upsampling)
        self.channels = int(channels)
        self.resolutions = [self.base_resolution * f for f in factors]
        rng = np.random.default_rng(seed)
        self.levels: list[list[PlaneGrid]] = []
        for res in self.resolutions:
            planes = [PlaneGrid(axes, ad.leaf(rng.uniform(init_low, init_high,
                                                          size=(res, res, channels))))
                      for axes in PLANE_AXES]
            self.levels.append(planes)
        self.clamp_count = 0

    @property
    def out_dim(self) -> int:
        return self.channels * len(self.levels)

    def params(self) -> list[tuple[str, ad.Tensor]]:
        return [(f"l{i}.{p.name}", p.params)
                for i, planes in enumerate(self.levels) for p in planes]

    def set_param(self, name: str, tensor: ad.Tensor) -> None:
        lvl, plane_name = name.split(".")
        i = int(lvl[1:])
        for p in self.levels[i]:
            if p.name == plane_name:
                p.params = tensor
                return
        raise KeyError(name)

    def encode(self, u) -> ad.Tensor:
        """Features for a (B, 4) batch of normalized coordinates."""
        u = ad.as_tensor(u)
        if u.ndim != 2 or u.shape[1] != 4:
            raise ad.ShapeError("encode", u.shape)
        outside = np.count_nonzero((u.data < 0.0) | (u.data > 1.0))
        if outside:
            self.clamp_count += int(outside)
        uc = ad.clip(u, 0.0, 1.0)
        cols = {name: uc[:, i] for name, i in _AXIS_INDEX.items()}
        feats = []
        for planes in self.levels:
            prod = None
            for p in planes:
                h, w, _ = p.params.shape
                ga = cols[p.axes[0]] * float(h - 1)
                gb = cols[p.axes[1]] * float(w - 1)
                val = ad.bilerp(p.params, ga, gb)
                prod = val if prod is None else prod * val
            feats.append(prod)
        return ad.concat(feats, axis=1)


def tv_loss(encoder: HexPlaneEncoder) -> ad.Tensor:
    """Sum over planes of the mean squared neighbor differences.

    Horizontal and vertical difference maps are each squared and averaged,
    then combined with weight 1/2 so a constant plane scores exactly zero and
    a single checker cell scores its plain arithmetic value.
    """
    total = ad.constant(0.0)
    for planes in encoder.levels:
        for p in planes:
            g = p.params
            dh = g[:, 1:, :] - g[:, :-1, :]
            dv = g[1:, :, :] - g[:-1, :, :]
            total = total + 0.5 * (ad.mean(dh * dh) + ad.mean(dv * dv))
    return total
