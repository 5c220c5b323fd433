"""The MRF-UNet: UNet logits fused with an MRF prior (or a plain softmax head)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .meanfield import FusionConfig, FusionResult, fuse_forward
from .mrf import MRFKernel, MRFNetParams, build_mrf_net
from .tensor import Tensor
from .unet import UNetConfig, UNetParams, build_unet, param_count

MRF = Union[MRFNetParams, MRFKernel]


@dataclass
class MRFUNet:
    unet: UNetParams
    mrf: Optional[MRF] = None
    fusion: FusionConfig = field(default_factory=FusionConfig)

    @property
    def k(self) -> int:
        return self.unet.config.k

    @property
    def has_mrf(self) -> bool:
        return self.mrf is not None

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params = [(f"unet.{n}", t) for n, t in self.unet.named_parameters()]
        if self.mrf is not None:
            params += [(f"mrf.{n}", t) for n, t in self.mrf.named_parameters()]
        return params

    def forward(self, image: Tensor, mode: str = "test", rng: Optional[np.random.Generator] = None,
                n_iter: Optional[int] = None, **kwargs) -> FusionResult:
        return fuse_forward(image, self.mrf, self.fusion, mode, rng, unet=self.unet, n_iter=n_iter, **kwargs)

    def param_count(self) -> dict[str, int]:
        from .mrf import mrf_param_count

        mrf_count = mrf_param_count(self.mrf) if self.mrf is not None else 0
        return {"unet": param_count(self.unet.config), "mrf": mrf_count}


def build_model(j: int = 1, k: int = 4, seed: int = 0, use_mrf: bool = True, in_channels: int = 1,
                fusion: Optional[FusionConfig] = None) -> MRFUNet:
    unet_seq, mrf_seq = np.random.SeedSequence(seed).spawn(2)
    unet = build_unet(UNetConfig(j=j, k=k, in_channels=in_channels), int(unet_seq.generate_state(1)[0]))
    mrf = build_mrf_net(k, int(mrf_seq.generate_state(1)[0])) if use_mrf else None
    return MRFUNet(unet, mrf, fusion or FusionConfig())
