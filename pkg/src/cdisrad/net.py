"""Volumetric residual feature extractor, fully-connected predictor and training.

The extractor is the 34-layer residual design with every 2D operation made
3D. Inputs are ``(N, C, X, Y, Z)`` with Z the slice axis. In-plane
resolution halves in the stem, the stem pool and stages 2-4; the slice axis
is only halved in stages 2 and 3 (25 -> 13 -> 7).
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cdisrad-checkpoint/1"
CLASS_WEIGHT_POLICIES = ("balanced", "none")

_STAGE_STRIDES = ((1, 1, 1), (2, 2, 2), (2, 2, 2), (2, 2, 1))


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 1
    stage_blocks: tuple[int, int, int, int] = (3, 4, 6, 3)
    base_width: int = 64
    feature_dim: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.feature_dim is None:
            object.__setattr__(self, "feature_dim", 8 * self.base_width)
        blocks = tuple(int(b) for b in self.stage_blocks)
        object.__setattr__(self, "stage_blocks", blocks)
        if len(blocks) != 4 or any(b < 1 for b in blocks):
            raise ValueError(f"stage_blocks must be 4 positive counts, got {self.stage_blocks}")
        if self.in_channels < 1 or self.base_width < 1:
            raise ValueError("in_channels and base_width must be >= 1")
        if self.feature_dim != 8 * self.base_width:
            raise ValueError(
                f"feature_dim must equal 8 * base_width = {8 * self.base_width}, got {self.feature_dim}"
            )

    @classmethod
    def miniature(cls, in_channels=1, seed=0, base_width=4):
        return cls(in_channels, (1, 1, 1, 1), base_width, seed=seed)

    @property
    def weighted_layers(self) -> int:
        # stem conv + two convs per block + the classifier-side FC layer;
        # projection shortcuts are not counted, as in the 2D original
        return 1 + 2 * sum(self.stage_blocks) + 1

    def to_dict(self):
        return {**asdict(self), "stage_blocks": list(self.stage_blocks)}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 4
    learning_rate: float = 1e-3
    class_weight: str = "balanced"
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.class_weight not in CLASS_WEIGHT_POLICIES:
            raise ValueError(f"class_weight must be one of {CLASS_WEIGHT_POLICIES}")

    def to_dict(self):
        return asdict(self)


class BasicBlock3d(nn.Module):
    def __init__(self, in_ch, out_ch, stride=(1, 1, 1)):
        super().__init__()
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm3d(out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm3d(out_ch)
        if in_ch != out_ch or tuple(stride) != (1, 1, 1):
            self.shortcut = nn.Sequential(
                nn.Conv3d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm3d(out_ch)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet3dExtractor(nn.Module):
    """Cube -> deep radiomic feature vector (post global-average-pooling)."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        w = config.base_width
        self.stem = nn.Sequential(
            nn.Conv3d(config.in_channels, w, (7, 7, 3), (2, 2, 1), (3, 3, 1), bias=False),
            nn.BatchNorm3d(w),
            nn.ReLU(inplace=True),
            nn.MaxPool3d(3, (2, 2, 1), 1),
        )
        stages = []
        in_ch = w
        for i, (n_blocks, stride) in enumerate(zip(config.stage_blocks, _STAGE_STRIDES)):
            out_ch = w * 2**i
            blocks = [BasicBlock3d(in_ch, out_ch, stride)]
            blocks += [BasicBlock3d(out_ch, out_ch) for _ in range(n_blocks - 1)]
            stages.append(nn.Sequential(*blocks))
            in_ch = out_ch
        self.stages = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool3d(1)

    @property
    def feature_dim(self):
        return self.config.feature_dim

    @property
    def weighted_layers(self):
        return self.config.weighted_layers

    def forward(self, x):
        if x.ndim != 5:
            raise ValueError(f"expected input (N, C, X, Y, Z), got shape {tuple(x.shape)}")
        if x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} channels, got {x.shape[1]}")
        x = self.stages(self.stem(x))
        return torch.flatten(self.pool(x), 1)


class Predictor(nn.Module):
    """Feature vector -> probability of the positive class."""

    def __init__(self, feature_dim, hidden=128):
        super().__init__()
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.fc1 = nn.Linear(feature_dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def logits(self, x):
        if x.ndim != 2 or x.shape[1] != self.feature_dim:
            raise ValueError(f"expected features (N, {self.feature_dim}), got shape {tuple(x.shape)}")
        return self.fc2(F.relu(self.fc1(x)))[:, 0]

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def _init_weights(module):
    for m in module.modules():
        if isinstance(m, nn.Conv3d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
        elif isinstance(m, nn.BatchNorm3d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_extractor(config: NetworkConfig | None = None) -> ResNet3dExtractor:
    config = config or NetworkConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = ResNet3dExtractor(config)
        _init_weights(model)
    return model


def build_predictor(feature_dim: int, hidden: int = 128, seed: int = 0) -> Predictor:
    if feature_dim < 1:
        raise ValueError("feature_dim must be >= 1")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed + 1)
        return Predictor(feature_dim, hidden)


def _as_batch(cube_or_array):
    data = getattr(cube_or_array, "data", cube_or_array)
    return torch.from_numpy(np.array(data, dtype=np.float32))


def extract_features(model: ResNet3dExtractor, cube) -> np.ndarray:
    """Deep radiomic feature vector (length ``feature_dim``) for one cube."""
    x = _as_batch(cube)
    if x.ndim != 4:
        raise ValueError(f"expected a (channels, X, Y, Z) cube, got shape {tuple(x.shape)}")
    if x.shape[0] != model.config.in_channels:
        raise ValueError(f"cube has {x.shape[0]} channels, model expects {model.config.in_channels}")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            feats = model(x[None].to(next(model.parameters()).dtype))[0]
    finally:
        model.train(was_training)
    return feats.double().numpy()


@dataclass(frozen=True)
class Prediction:
    label: int
    probability: float


def predict(predictor: Predictor, features, threshold: float = 0.5) -> Prediction:
    """Positive iff probability >= threshold."""
    x = torch.as_tensor(np.asarray(features), dtype=next(predictor.parameters()).dtype)
    if x.ndim == 1:
        x = x[None]
    was_training = predictor.training
    predictor.eval()
    try:
        with torch.no_grad():
            p = float(predictor(x)[0])
    finally:
        predictor.train(was_training)
    return Prediction(int(p >= threshold), p)


def class_weights(labels, policy="balanced") -> np.ndarray:
    """Per-sample loss weights; "balanced" gives each class total weight n/2."""
    labels = np.asarray(labels, dtype=int)
    if policy == "none" or len(np.unique(labels)) < 2:
        return np.ones(len(labels))
    if policy != "balanced":
        raise ValueError(f"unknown class weight policy {policy!r}")
    n = len(labels)
    counts = np.bincount(labels, minlength=2)
    return n / (2.0 * counts[labels])


def weighted_bce(logits, targets, weights):
    """Mean over the batch of weight * binary cross-entropy."""
    per_sample = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    return (weights * per_sample).mean()


@dataclass
class TrainResult:
    loss_history: list[float]
    single_class: bool = False


def train(extractor, predictor, dataset, config: TrainConfig | None = None) -> TrainResult:
    """Jointly fit extractor and predictor with class-weighted BCE (Adam).

    ``dataset`` is a list of ``(cube, label)``; with ``extractor=None`` the
    inputs are feature vectors fed straight to the predictor. Models are
    updated in place. Returns the per-epoch mean training loss.
    """
    config = config or TrainConfig()
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    labels = np.array([int(y) for _, y in dataset])
    single_class = len(np.unique(labels)) < 2
    if single_class:
        log.warning("training set has a single class (%d)", labels[0])
    modules = [m for m in (extractor, predictor) if m is not None]
    dtype = next(predictor.parameters()).dtype
    inputs = torch.stack([_as_batch(x) for x, _ in dataset]).to(dtype)
    targets = torch.as_tensor(labels, dtype=dtype)
    weights = torch.as_tensor(class_weights(labels, config.class_weight), dtype=dtype)

    history: list[float] = []
    if config.epochs == 0:
        return TrainResult(history, single_class)
    params = [p for m in modules for p in m.parameters()]
    opt = torch.optim.Adam(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(config.seed)
    for m in modules:
        m.train()
    n = len(dataset)
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            x = inputs[idx]
            feats = extractor(x) if extractor is not None else x
            loss = weighted_bce(predictor.logits(feats), targets[idx], weights[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / n)
        log.debug("epoch %d/%d loss %.6f", epoch + 1, config.epochs, history[-1])
    if extractor is not None:
        recalibrate_batchnorm(extractor, inputs, config.batch_size)
    for m in modules:
        m.eval()
    return TrainResult(history, single_class)


def recalibrate_batchnorm(model, inputs, batch_size=4):
    """Replace BatchNorm running statistics with exact averages over ``inputs``.

    With few, small batches the exponential moving averages lag far behind
    the final weights, so eval-mode outputs drift from what training saw.
    One no-grad pass with cumulative averaging fixes that.
    """
    norms = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not norms:
        return
    saved = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None
    model.train()
    with torch.no_grad():
        for start in range(0, len(inputs), batch_size):
            model(inputs[start:start + batch_size])
    for m, momentum in zip(norms, saved):
        m.momentum = momentum
    model.eval()


def state_checksum(*modules) -> str:
    """SHA-256 over every named parameter and buffer."""
    h = hashlib.sha256()
    for i, m in enumerate(modules):
        for name, t in m.state_dict().items():
            h.update(f"{i}/{name}".encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def count_parameters(module) -> int:
    return sum(p.numel() for p in module.parameters())


def save_checkpoint(path, extractor: ResNet3dExtractor, predictor: Predictor, meta=None):
    """Write config plus named weight tensors to a ``.npz`` archive."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "network": extractor.config.to_dict(),
        "predictor": {"feature_dim": predictor.feature_dim, "hidden": predictor.hidden},
        "meta": meta or {},
    }
    arrays = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for prefix, m in (("extractor", extractor), ("predictor", predictor)):
        for name, t in m.state_dict().items():
            arrays[f"{prefix}/{name}"] = t.detach().cpu().numpy()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Returns ``(extractor, predictor, meta)``."""
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(z["__header__"].tobytes())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        net_cfg = header["network"]
        extractor = ResNet3dExtractor(NetworkConfig(**{**net_cfg, "stage_blocks": tuple(net_cfg["stage_blocks"])}))
        predictor = Predictor(**header["predictor"])
        for prefix, m in (("extractor", extractor), ("predictor", predictor)):
            state = {k[len(prefix) + 1:]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith(prefix + "/")}
            m.load_state_dict(state)
    extractor.eval()
    predictor.eval()
    return extractor, predictor, header["meta"]
