"""The full one-shot segmentation network: encoder, fusion, binary head and multi-class head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .data import IGNORE_INDEX
from .encoder import Encoder, EncoderConfig
from .fusion import BaseFusion, PyramidFusion
from .heads import ASPPClassifier
from .prototype import masked_average_pool


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    use_pff: bool = True
    aspp_rates: tuple = (1, 2, 4)
    train_classes: tuple = ()
    # full-scale mapping of the toy feature_dim (512 features + 512 prototype = 1024)
    reference_feature_dim: int = 512

    @property
    def num_multiclass(self) -> int:
        return len(self.train_classes) + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["encoder"].items()}
        d["aspp_rates"] = list(self.aspp_rates)
        d["train_classes"] = list(self.train_classes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = {k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("encoder").items()}
        return cls(
            encoder=EncoderConfig(**enc),
            aspp_rates=tuple(d.pop("aspp_rates")),
            train_classes=tuple(d.pop("train_classes")),
            **d,
        )


class OneShotSegNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config.encoder)
        c = self.encoder.feature_dim
        self.fusion = PyramidFusion(c) if config.use_pff else BaseFusion(c)
        self.binary_head = ASPPClassifier(self.fusion.out_dim, 2, config.aspp_rates)
        self.multiclass_head = ASPPClassifier(c, config.num_multiclass, config.aspp_rates)
        lut = np.full(256, IGNORE_INDEX, dtype=np.int64)
        lut[0] = 0
        for i, cls in enumerate(config.train_classes, start=1):
            lut[cls] = i
        self.register_buffer("_label_lut", torch.from_numpy(lut), persistent=False)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images)

    def prototype(self, features: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        return masked_average_pool(features, masks)

    def segment(self, features: torch.Tensor, proto: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
        """Binary foreground/background logits ``[N, 2, H, W]``."""
        return self.binary_head(self.fusion(features, proto), size)

    def multiclass(self, features: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
        return self.multiclass_head(features, size)

    def multiclass_target(self, label_map: torch.Tensor) -> torch.Tensor:
        """Map dataset class ids to head indices (train classes -> 1..n, unseen -> ignore)."""
        return self._label_lut[label_map.long()]

    def encoder_parameters(self):
        return self.encoder.parameters()

    def head_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("encoder."):
                yield p


def build_model(config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> OneShotSegNet:
    """Construct a freshly initialised network; weights depend only on ``seed``."""
    state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        model = OneShotSegNet(config)
    finally:
        torch.random.set_rng_state(state)
    return model.to(dtype)
