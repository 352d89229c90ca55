import dataclasses
import json
from dataclasses import dataclass, field


@dataclass(frozen=True)
class Ablation:
    """Switches that remove one component of the model (each independent)."""

    no_oia: bool = False
    no_isa: bool = False
    no_direction: bool = False
    no_prior: bool = False
    no_penalty: bool = False
    no_count_norm: bool = False
    # factor on/off switches inside the ordered attention
    no_local: bool = False
    no_self: bool = False
    no_directional: bool = False

    @classmethod
    def from_names(cls, names):
        valid = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for name in names or ():
            key = name.replace("-", "_")
            if not key.startswith("no_"):
                key = "no_" + key
            if key not in valid:
                raise ValueError(f"unknown ablation {name!r}; choose from {sorted(valid)}")
            kwargs[key] = True
        return cls(**kwargs)

    def names(self):
        return [f.name.replace("_", "-") for f in dataclasses.fields(self) if getattr(self, f.name)]


@dataclass
class TrainConfig:
    lr: float = 4e-4
    lr_decay: float = 0.8
    patience: int = 4
    dropout: float = 0.3
    penalty: float = 2.0
    beam_width: int = 3
    d: int = 512
    k: int = 36
    n: int = 5
    gamma: int = 64
    embed_dim: int | None = None
    max_epochs: int = 20
    batch_size: int = 16
    max_len: int = 30
    min_count: int = 3
    seed: int = 0
    dtype: str = "float32"
    fuse_boxes: bool = False
    # stop as soon as the eval-mode training loss per token drops below this
    target_loss: float | None = None
    ablation: Ablation = field(default_factory=Ablation)

    @classmethod
    def desk(cls, **overrides):
        base = dict(d=32, k=6, n=5, gamma=16, min_count=1, batch_size=4, max_epochs=200)
        base.update(overrides)
        return cls(**base)

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = Ablation(**self.ablation)
        elif isinstance(self.ablation, (list, tuple)):
            self.ablation = Ablation.from_names(self.ablation)
        for name in ("d", "k", "n", "gamma", "max_epochs", "batch_size", "max_len", "min_count", "beam_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0 or self.penalty < 0 or not 0 <= self.dropout < 1:
            raise ValueError("lr and penalty must be >= 0, dropout in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["ablation"] = self.ablation.names()
        return out

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)
