"""
Slim single-scale detector: convolutional backbone -> global average pool -> Ψ with a
constant 1 appended -> two linear heads.

The classification head W_c maps Ψ to (defect, no-defect) scores; the regression head W_r
maps Ψ to the defect centre in normalized [0, 1] coordinates. There is no neck.
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from services.optim import Parameter
from services.records import DEFECT, NO_DEFECT
from services.tensor import (
    RunningStats, Tensor, add, append_constant, as_tensor, batchnorm, conv2d, get_default_dtype,
    global_avg_pool, matmul, max_pool2x2, no_grad, relu,
)
from utils.validation import ValidationError

logger = logging.getLogger(__name__)

HEAD_PREFIX = "head."
COORD_PLANES = 2

Selector = Callable[[str], bool]


class BackboneConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    widths: Tuple[int, ...] = Field((16, 32, 64), min_length=1)
    blocks_per_stage: int = Field(2, ge=1)
    block_type: Literal["plain", "residual"] = "residual"
    input_size: int = Field(64, ge=8)
    coord_channels: bool = True

    @field_validator("widths")
    @classmethod
    def _positive_widths(cls, v):
        if any(w <= 0 for w in v):
            raise ValueError(f"stage widths must be positive, got {list(v)}")
        return v

    @property
    def feature_dim(self) -> int:
        """d: last stage width plus the constant component"""
        return self.widths[-1] + 1

    @property
    def tail_prefix(self) -> str:
        return f"stage{len(self.widths)}."


PRESETS: Dict[str, BackboneConfig] = {
    "tiny": BackboneConfig(widths=(8, 16, 32), blocks_per_stage=1),
    "small": BackboneConfig(widths=(16, 32, 64), blocks_per_stage=2),
    "base": BackboneConfig(widths=(32, 64, 128), blocks_per_stage=2),
    "wide": BackboneConfig(widths=(64, 128, 256), blocks_per_stage=2),
}


def preset(name: str, **overrides) -> BackboneConfig:
    if name not in PRESETS:
        raise ValidationError(f"unknown backbone preset '{name}', choose from {sorted(PRESETS)}")
    return PRESETS[name].model_copy(update=overrides)


@dataclass
class ModelParams:
    """Backbone θ, the two heads and the batch-norm buffers, keyed by stable names"""
    config: BackboneConfig
    params: "OrderedDict[str, Parameter]"
    buffers: "OrderedDict[str, RunningStats]" = field(default_factory=OrderedDict)

    @property
    def theta(self) -> List[Parameter]:
        return [p for name, p in self.params.items() if not name.startswith(HEAD_PREFIX)]

    @property
    def W_c(self) -> Parameter:
        return self.params["head.W_c"]

    @property
    def W_r(self) -> Parameter:
        return self.params["head.W_r"]

    @property
    def d(self) -> int:
        return self.W_c.data.shape[0]

    def all_params(self) -> List[Parameter]:
        return list(self.params.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name].tensor

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        """Parameters then batch-norm buffers, in construction order"""
        arrays = OrderedDict((name, p.data) for name, p in self.params.items())
        for name, stats in self.buffers.items():
            arrays[f"{name}.running_mean"] = stats.mean
            arrays[f"{name}.running_var"] = stats.var
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        missing = [k for k in expected if k not in arrays]
        extra = [k for k in arrays if k not in expected]
        if missing or extra:
            raise ValidationError(f"checkpoint does not match model: missing {missing}, unexpected {extra}")
        for name, current in expected.items():
            if arrays[name].shape != current.shape:
                raise ValidationError(f"{name}: checkpoint shape {arrays[name].shape} != model shape {current.shape}")
        for name, p in self.params.items():
            p.tensor.data = np.array(arrays[name], dtype=p.data.dtype)
            p.reset_state()
        for name, stats in self.buffers.items():
            stats.mean[...] = arrays[f"{name}.running_mean"]
            stats.var[...] = arrays[f"{name}.running_var"]


@dataclass
class Prediction:
    scores: np.ndarray
    predicted_class: int
    center_px: Tuple[float, float]

    @property
    def defect_probability(self) -> float:
        shifted = self.scores - np.max(self.scores)
        probs = np.exp(shifted) / np.sum(np.exp(shifted))
        return float(probs[0])


def parameter_count(model: ModelParams) -> int:
    return int(sum(p.data.size for p in model.params.values()))


def _conv_weight(rng, out_ch: int, in_ch: int, k: int) -> np.ndarray:
    fan_in = in_ch * k * k
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, k, k))


def build_model(config: BackboneConfig, seed: int = 0) -> ModelParams:
    """He-initialized backbone; W_r starts by predicting the image centre"""
    rng = np.random.default_rng(seed)
    dtype = get_default_dtype()
    params: "OrderedDict[str, Parameter]" = OrderedDict()
    buffers: "OrderedDict[str, RunningStats]" = OrderedDict()

    def add_param(name, array):
        params[name] = Parameter(Tensor(np.asarray(array, dtype=dtype)), name=name)

    def add_bn(prefix, channels):
        add_param(f"{prefix}.gamma", np.ones(channels))
        add_param(f"{prefix}.beta", np.zeros(channels))
        buffers[prefix] = RunningStats.create(channels)

    def add_coord(conv, out_ch):
        if config.coord_channels:
            add_param(f"{conv}.coord_weight", _conv_weight(rng, out_ch, COORD_PLANES, 3))

    add_param("stem.conv.weight", _conv_weight(rng, config.widths[0], 1, 3))
    add_coord("stem.conv", config.widths[0])
    add_bn("stem.bn", config.widths[0])

    in_ch = config.widths[0]
    for s, width in enumerate(config.widths, start=1):
        for b in range(config.blocks_per_stage):
            prefix = f"stage{s}.block{b}"
            add_param(f"{prefix}.conv1.weight", _conv_weight(rng, width, in_ch, 3))
            if b == 0:
                add_coord(f"{prefix}.conv1", width)
            add_bn(f"{prefix}.bn1", width)
            add_param(f"{prefix}.conv2.weight", _conv_weight(rng, width, width, 3))
            add_bn(f"{prefix}.bn2", width)
            if config.block_type == "residual" and in_ch != width:
                add_param(f"{prefix}.proj.weight", _conv_weight(rng, width, in_ch, 1))
            in_ch = width

    d = config.feature_dim
    add_param("head.W_c", rng.normal(0.0, 0.01, size=(d, 2)))
    w_r = rng.normal(0.0, 0.01, size=(d, 2))
    w_r[-1, :] = 0.5
    add_param("head.W_r", w_r)

    model = ModelParams(config=config, params=params, buffers=buffers)
    logger.info(f"🧱 Built {config.block_type} backbone widths={list(config.widths)} "
                f"blocks={config.blocks_per_stage} params={parameter_count(model)}")
    return model


def coordinate_planes(n: int, height: int, width: int) -> Tensor:
    """(n, 2, H, W) constant planes: x then y, each spanning [-1, 1] across the map"""
    xs = np.linspace(-1.0, 1.0, width)
    ys = np.linspace(-1.0, 1.0, height)
    planes = np.stack([np.broadcast_to(xs[None, :], (height, width)),
                       np.broadcast_to(ys[:, None], (height, width))])
    return Tensor(np.ascontiguousarray(np.broadcast_to(planes, (n, COORD_PLANES, height, width)),
                                       dtype=get_default_dtype()))


def _conv_bn(x: Tensor, model: ModelParams, conv: str, bn: str, training: bool,
             trainable: Optional[Selector] = None, stride: int = 1) -> Tensor:
    weight = model[f"{conv}.weight"]
    pad = weight.shape[-1] // 2
    out = conv2d(x, weight, stride=stride, padding=pad)
    if f"{conv}.coord_weight" in model.params:
        n, _, h, w = x.shape
        out = add(out, conv2d(coordinate_planes(n, h, w), model[f"{conv}.coord_weight"],
                              stride=stride, padding=pad))
    # frozen layers normalize with their running statistics
    training = training and (trainable is None or trainable(f"{bn}.gamma"))
    return batchnorm(out, model[f"{bn}.gamma"], model[f"{bn}.beta"], model.buffers[bn], training)


def _block(x: Tensor, model: ModelParams, prefix: str, training: bool,
           trainable: Optional[Selector] = None) -> Tensor:
    out = relu(_conv_bn(x, model, f"{prefix}.conv1", f"{prefix}.bn1", training, trainable))
    out = _conv_bn(out, model, f"{prefix}.conv2", f"{prefix}.bn2", training, trainable)
    if model.config.block_type == "plain":
        return relu(out)
    shortcut = x
    if f"{prefix}.proj.weight" in model.params:
        shortcut = conv2d(x, model[f"{prefix}.proj.weight"])
    return relu(add(out, shortcut))


def as_batch(images, input_size: int) -> Tensor:
    """Accept (H, W), (N, H, W) or (N, 1, H, W) arrays in [0, 1]"""
    if isinstance(images, Tensor):
        array = images.data
    else:
        array = np.asarray(images, dtype=get_default_dtype())
    if array.ndim == 2:
        array = array[None, None]
    elif array.ndim == 3:
        array = array[:, None]
    if array.ndim != 4 or array.shape[1] != 1:
        raise ValidationError(f"expected grayscale image batch, got shape {array.shape}")
    if array.shape[2:] != (input_size, input_size):
        raise ValidationError(
            f"input is {array.shape[2]}x{array.shape[3]}, model expects {input_size}x{input_size}"
        )
    if array.size and (array.min() < -1e-6 or array.max() > 1 + 1e-6):
        raise ValidationError("image values must lie in [0, 1]")
    return Tensor(array)


def extract_features(images, model: ModelParams, training: bool = False,
                     trainable: Optional[Selector] = None) -> Tensor:
    """
    Ψ(I; θ) for a batch: global-average-pooled backbone output with a constant 1 appended.

    Args:
        images: image or batch matching config.input_size, values in [0, 1]
        model: parameters and buffers
        training: use batch statistics (and update running ones) in batch norm
        trainable: parameter-name predicate; batch-norm layers whose gamma it rejects stay
            in inference mode even when training

    Returns:
        (N, d) features, last column exactly 1
    """
    x = as_batch(images, model.config.input_size)
    x = max_pool2x2(relu(_conv_bn(x, model, "stem.conv", "stem.bn", training, trainable)))
    for s in range(1, len(model.config.widths) + 1):
        if s > 1:
            x = max_pool2x2(x)
        for b in range(model.config.blocks_per_stage):
            x = _block(x, model, f"stage{s}.block{b}", training, trainable)
    return append_constant(global_avg_pool(x), 1.0)


def classify(psi: Tensor, W_c: Tensor) -> Tensor:
    """(W_c)ᵀΨ row-wise: (N, d) -> (N, 2)"""
    return _head(psi, W_c, "W_c")


def localize(psi: Tensor, W_r: Tensor) -> Tensor:
    """(W_r)ᵀΨ row-wise: (N, d) -> (N, 2) normalized (x, y)"""
    return _head(psi, W_r, "W_r")


def _head(psi, weight, name: str) -> Tensor:
    psi, weight = as_tensor(psi), as_tensor(weight)
    if psi.data.ndim == 1:
        psi = psi.reshape(1, -1)
    if psi.shape[-1] != weight.shape[0]:
        raise ValidationError(f"{name} expects {weight.shape[0]} features, got {psi.shape[-1]}")
    return matmul(psi, weight)


def decide(scores: np.ndarray) -> int:
    """argmax over (defect, no-defect); a tie goes to defect"""
    return DEFECT if scores[0] >= scores[1] else NO_DEFECT


def to_pixels(normalized, size: int) -> Tuple[float, float]:
    return float(normalized[0]) * (size - 1), float(normalized[1]) * (size - 1)


def predict_batch(images, model: ModelParams) -> List[Prediction]:
    """Inference-mode predictions for a batch of images"""
    with no_grad():
        psi = extract_features(images, model, training=False)
        scores = classify(psi, model["head.W_c"]).data
        centers = localize(psi, model["head.W_r"]).data
    size = model.config.input_size
    return [
        Prediction(scores=scores[i].astype(np.float64), predicted_class=decide(scores[i]),
                   center_px=to_pixels(centers[i], size))
        for i in range(scores.shape[0])
    ]


def predict(image, model: ModelParams) -> Prediction:
    return predict_batch(np.asarray(image)[None] if np.ndim(image) == 2 else image, model)[0]


def trainable_selector(model: ModelParams, trainable: str):
    """Name predicate for the heads / heads+tail / all trainable sets"""
    if trainable == "heads":
        return lambda name: name.startswith(HEAD_PREFIX)
    if trainable == "heads+tail":
        tail = model.config.tail_prefix
        return lambda name: name.startswith(HEAD_PREFIX) or name.startswith(tail)
    if trainable == "all":
        return lambda name: True
    raise ValidationError(f"unknown trainable set '{trainable}'")


def backbone_stage_of(name: str) -> Optional[str]:
    """'stem' / 'stageN' for backbone parameter names, None for heads"""
    if name.startswith(HEAD_PREFIX):
        return None
    return name.split(".", 1)[0]
