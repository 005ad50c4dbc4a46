"""Run configuration: architecture sizes, training hyperparameters, data
corpus settings.

One dataclass, JSON round-trip, and a stable hash over the fields that
determine parameter shapes (used to bind checkpoints to a config).
"""

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

from .errors import InvalidInputError

# channels of each pixel-wise conditioning modality, in stacking order
EXEMPLAR_CH = 3
SKETCH_CH = 1
COLOR_CH = 3
SEMANTIC_CH = 19
ENCODER_IN_CH = EXEMPLAR_CH + SKETCH_CH + COLOR_CH + SEMANTIC_CH  # 26


def num_style_layers(resolution: int) -> int:
    """t = 2*log2(res) - 2 (10 at 64x64, 14 at 256x256)."""
    k = math.log2(resolution)
    if k != int(k) or resolution < 8:
        raise InvalidInputError(f"resolution must be a power of two >= 8, got {resolution}")
    return 2 * int(k) - 2


# conv width per feature-map resolution, sized for single-core CPU training
_CHANNEL_TABLE = {2: 128, 4: 96, 8: 64, 16: 48, 32: 24, 64: 16, 128: 12, 256: 8}


def channels_at(resolution: int) -> int:
    return _CHANNEL_TABLE[resolution]


@dataclass
class Config:
    # architecture
    resolution: int = 64
    w_dim: int = 512
    mapping_depth: int = 8
    warp_blocks: int = 4
    agg_channels: int = 16  # width of aggregated conditioning features

    # optimizer (shared across stages)
    lr: float = 0.002
    beta1: float = 0.5
    beta2: float = 0.99
    batch_size: int = 8

    # adversarial training
    r1_gamma: float = 10.0
    r1_interval: int = 16
    lambda_range: float = 1.0  # keeps generator output near [-1, 1]

    # main-training branch thresholds
    rho: float = 0.5    # P(r > rho) = random-exemplar branch
    omega: float = 0.8  # per-modality drop when q > omega

    # loss weights: main stage
    lambda_id: float = 0.1
    lambda_lpips: float = 0.5
    lambda_attr: float = 0.1
    # warp stage
    lambda_latent: float = 0.1
    # encoder stage composite
    enc_pixel: float = 1.0
    enc_lpips: float = 0.8
    enc_id: float = 0.1
    enc_delta: float = 1e-4

    # text-guided optimization
    lambda_clip: float = 0.05
    lambda_reg: float = 0.08
    text_lr: float = 0.1
    text_iters: int = 100

    # warp-triplet augmentation
    aug_scale_min: float = 0.8
    aug_scale_max: float = 1.2
    aug_jitter: float = 0.2
    aug_mask_frac: float = 0.25

    # stage lengths (desk scale; full scale ran 800k main steps at 256x256)
    bank_steps: int = 5000
    encoder_steps: int = 4000
    warp_steps: int = 3000
    main_steps: int = 20000

    # synthetic corpus
    n_faces: int = 2000
    n_identities: int = 64
    data_seed: int = 7

    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise InvalidInputError(f"rho must be in [0,1], got {self.rho}")
        if not 0.0 <= self.omega <= 1.0:
            raise InvalidInputError(f"omega must be in [0,1], got {self.omega}")
        if not 0.01 <= self.lambda_clip <= 1.0:
            raise InvalidInputError(f"lambda_clip must be in [0.01,1.0], got {self.lambda_clip}")
        num_style_layers(self.resolution)  # validates resolution

    @property
    def t(self) -> int:
        return num_style_layers(self.resolution)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Config":
        data = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str) -> "Config":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    # fields that determine parameter shapes; checkpoints refuse to load
    # under a config whose hash over these differs
    _MODEL_FIELDS = (
        "resolution", "w_dim", "mapping_depth", "warp_blocks", "agg_channels",
    )

    def model_hash(self) -> str:
        blob = json.dumps({k: getattr(self, k) for k in self._MODEL_FIELDS},
                          sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_overrides(self, **kv) -> "Config":
        bad = set(kv) - {f.name for f in dataclasses.fields(self)}
        if bad:
            raise InvalidInputError(f"unknown config keys: {sorted(bad)}")
        return dataclasses.replace(self, **kv)


def cache_dir() -> str:
    """Content-addressed cache root, FACEMUG_CACHE or ~/.cache/facemug."""
    root = os.environ.get("FACEMUG_CACHE")
    if not root:
        root = os.path.join(os.path.expanduser("~"), ".cache", "facemug")
    os.makedirs(root, exist_ok=True)
    return root
