"""Detector front ends sharing one interface for the evaluation harness."""

from __future__ import annotations

import numpy as np

from . import abd
from .bev import BevConfig, rasterize, stack
from .decode import DecodeConfig, decode
from .domain import Detection
from .model import TinyCenterSpeed
from .quant import QuantModel, quantized_forward


def bev_input(prev_scan, curr_scan, bev: BevConfig) -> np.ndarray:
    return stack(rasterize(prev_scan, bev), rasterize(curr_scan, bev))


class NnDetector:
    """Heatmap network (float or integer path) followed by peak decoding."""

    provides_velocity = True

    def __init__(self, net: TinyCenterSpeed | QuantModel, bev: BevConfig, dcfg: DecodeConfig = DecodeConfig()):
        self.net, self.bev, self.dcfg = net, bev, dcfg
        self.quant = isinstance(net, QuantModel)
        self.name = "TinyCenterSpeed"
        if not self.quant:
            net.eval()

    def heatmaps(self, inp: np.ndarray) -> np.ndarray:
        if self.quant:
            return quantized_forward(self.net, inp[None])[0]
        return self.net.forward(inp[None])[0]

    def prepare(self, prev, curr) -> np.ndarray:
        return bev_input(prev.scan, curr.scan, self.bev)

    def infer(self, prepared: np.ndarray) -> list[Detection]:
        return decode(self.heatmaps(prepared), self.dcfg, self.bev)


class AbdDetector:
    """Breakpoint clustering on the current scan only; no velocity."""

    name = "ABD"
    quant = None
    provides_velocity = False

    def __init__(self, cfg: abd.AbdConfig = abd.AbdConfig()):
        self.cfg = cfg

    def prepare(self, prev, curr):
        return curr.scan

    def infer(self, prepared) -> list[Detection]:
        return abd.run(prepared, self.cfg)
