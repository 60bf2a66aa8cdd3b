"""The trainable encoder/decoder bundle and its checkpoint round trip."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import ndtensor as nd
from ..encoder import LinearEncoder, init_kaiming
from ..errors import FormatError
from ..layers import assign
from ..l2o import ParamNet
from ..transforms import IdentityTransform, SparseTransform


@dataclass(frozen=True)
class ModelConfig:
    N_a: int = 8
    N_t: int = 8
    M: int = 32
    hidden: int = 20
    w1: int = 32
    w2: int = 32
    N_i: int = 64
    G: int = 13
    learned_transform: bool = True

    @property
    def n(self):
        return 2 * self.N_a * self.N_t

    @classmethod
    def full_scale(cls, M=256):
        return cls(N_a=32, N_t=32, M=M, hidden=20, w1=128, w2=128, N_i=256, G=51)


_META_FIELDS = ("N_a", "N_t", "M", "hidden", "w1", "w2", "N_i", "G", "learned_transform")


class CsiL2O:
    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        self.encoder = init_kaiming(cfg.M, cfg.n, seed)
        if cfg.learned_transform:
            self.transform = SparseTransform(cfg.N_t, (cfg.w1, cfg.w2), cfg.N_i, cfg.G, seed=seed + 1)
        else:
            self.transform = IdentityTransform()
        self.net = ParamNet(hidden=cfg.hidden, seed=seed + 2)

    def parameters(self):
        return self.encoder.parameters() + self.transform.parameters() + self.net.parameters()

    def named_parameters(self):
        return {
            **self.encoder.named_parameters(),
            **self.transform.named_parameters(),
            **self.net.named_parameters(),
        }

    def parameter_arrays(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_arrays(self, arrays):
        assign(self.named_parameters(), arrays)

    def with_encoder(self, encoder):
        """Shallow copy sharing transform and ParamNet, with another encoder."""
        other = object.__new__(CsiL2O)
        other.cfg = ModelConfig(**{**asdict(self.cfg), "M": encoder.M})
        other.encoder = encoder
        other.transform = self.transform
        other.net = self.net
        return other

    def save(self, path):
        meta = np.array([float(getattr(self.cfg, f)) for f in _META_FIELDS])
        nd.save_checkpoint(path, {"meta.config": meta, **self.named_parameters()})

    @classmethod
    def load(cls, path):
        arrays = nd.load_checkpoint(path)
        if "meta.config" not in arrays:
            raise FormatError(f"{path}: checkpoint lacks meta.config")
        values = arrays.pop("meta.config")
        if values.shape != (len(_META_FIELDS),):
            raise FormatError(f"{path}: meta.config has shape {values.shape}")
        kwargs = {f: int(v) for f, v in zip(_META_FIELDS, values)}
        kwargs["learned_transform"] = bool(kwargs["learned_transform"])
        model = cls(ModelConfig(**kwargs))
        model.encoder = LinearEncoder(arrays["encoder.W"])
        model.load_arrays(arrays)
        return model
