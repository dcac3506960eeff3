"""Image encoders, heads and checkpoints.

Example:
    >>> from viprom_lab.encoder import EncoderConfig, init_encoder, freeze
    >>> checkpoint = init_encoder(EncoderConfig(embedding_dim=64), seed=0)
    >>> features = freeze(checkpoint).encode(frames)  # len(frames) × 64

Note (RU): Энкодеры изображений, головы и чекпойнты.
"""

import hashlib
import logging
import os
import pickle
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Type, Union

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.models.resnet import BasicBlock, Bottleneck, ResNet

from viprom_lab.base import VipromModel, fingerprint
from viprom_lab.dataset.sampling import frames_to_tensor
from viprom_lab.dataset.store import FrameImage
from viprom_lab.enums import Architecture, HeadKind, Stage
from viprom_lab.exceptions import (
    CheckpointError,
    ConfigError,
    FingerprintMismatchError,
    InvalidInputError,
    ShapeMismatchError,
    StageTransitionError,
)
from viprom_lab.utils import model
from viprom_lab.utils.io import PathLike
from viprom_lab.utils.seeding import make_generator, seeded
from viprom_lab.version import __version__

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1

_STAGE_ORDER = {Stage.SCRATCH: 0, Stage.CONTRASTIVE: 1, Stage.SUPERVISED: 2}


@model
class EncoderConfig(VipromModel):
    """Encoder architecture and geometry.

    Attributes:
        architecture: Backbone family.
        embedding_dim: Output feature width.
        input_hw: Expected ``(H, W)`` of input frames.
        toy: Shrink the ResNet family (stage widths start at 16 instead of 64).
        width: Base channel count of ``tiny-conv``.

    Note (RU): Конфигурация энкодера.
    """

    architecture: Architecture = Architecture.TINY_CONV
    embedding_dim: int = 64
    input_hw: Tuple[int, int] = (32, 32)
    toy: bool = True
    width: int = 16

    def __post_init__(self) -> None:
        try:
            self.architecture = Architecture(self.architecture)
        except ValueError as e:
            raise ConfigError(
                f"Unknown architecture: {self.architecture!r}", key="architecture"
            ) from e
        if int(self.embedding_dim) <= 0:
            raise ConfigError(
                f"embedding_dim must be positive, got {self.embedding_dim}", key="embedding_dim"
            )
        if len(self.input_hw) != 2 or min(self.input_hw) <= 0:
            raise ConfigError(
                f"input_hw must be two positive sizes, got {self.input_hw}", key="input_hw"
            )
        if int(self.width) <= 0:
            raise ConfigError(f"width must be positive, got {self.width}", key="width")
        self.embedding_dim = int(self.embedding_dim)
        self.input_hw = (int(self.input_hw[0]), int(self.input_hw[1]))


class TinyConv(nn.Module):
    """Four conv blocks, a fixed 4×4 spatial pool and a linear readout.

    The pooled map is flattened rather than globally averaged, so features keep
    where things are in the frame.

    Note (RU): Маленький свёрточный энкодер.
    """

    def __init__(self, embedding_dim: int, width: int = 16) -> None:
        super().__init__()
        channels = [3, width, width * 2, width * 4, width * 4]
        strides = [1, 2, 2, 2]
        self.blocks = nn.Sequential(
            *[
                nn.Sequential(
                    nn.Conv2d(channels[i], channels[i + 1], 3, stride=strides[i], padding=1),
                    nn.SiLU(),
                )
                for i in range(4)
            ]
        )
        self.pool = nn.AdaptiveAvgPool2d((4, 4))
        self.fc = nn.Linear(channels[-1] * 16, embedding_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(torch.flatten(self.pool(self.blocks(x)), 1))


_RESNET_LAYOUTS: Dict[Architecture, Tuple[Type[Union[BasicBlock, Bottleneck]], List[int]]] = {
    Architecture.RES_34: (BasicBlock, [3, 4, 6, 3]),
    Architecture.RES_50: (Bottleneck, [3, 4, 6, 3]),
    Architecture.RES_101: (Bottleneck, [3, 4, 23, 3]),
}

TOY_RESNET_WIDTH = 16


class NarrowResNet(ResNet):
    """torchvision ResNet whose stages are ``w, 2w, 4w, 8w`` channels wide instead of 64..512.

    Same depth, blocks and forward pass as the full network; only widths shrink.

    Note (RU): Узкий ResNet для игрушечного режима.
    """

    def __init__(
        self,
        block: Type[Union[BasicBlock, Bottleneck]],
        layers: List[int],
        num_classes: int,
        width: int = TOY_RESNET_WIDTH,
    ) -> None:
        nn.Module.__init__(self)
        self._norm_layer = nn.BatchNorm2d
        self.inplanes = width
        self.dilation = 1
        self.groups = 1
        self.base_width = 64
        self.conv1 = nn.Conv2d(3, width, kernel_size=7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(kernel_size=3, stride=2, padding=1)
        self.layer1 = self._make_layer(block, width, layers[0])
        self.layer2 = self._make_layer(block, width * 2, layers[1], stride=2)
        self.layer3 = self._make_layer(block, width * 4, layers[2], stride=2)
        self.layer4 = self._make_layer(block, width * 8, layers[3], stride=2)
        self.avgpool = nn.AdaptiveAvgPool2d((1, 1))
        self.fc = nn.Linear(width * 8 * block.expansion, num_classes)

        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.constant_(m.weight, 1)
                nn.init.constant_(m.bias, 0)


def build_encoder(config: EncoderConfig) -> nn.Module:
    """Instantiate the backbone of ``config`` with fresh parameters.

    Uses the global torch RNG; wrap in :func:`seeded` for reproducible init.
    """
    if config.architecture == Architecture.TINY_CONV:
        return TinyConv(config.embedding_dim, config.width)
    layout = _RESNET_LAYOUTS.get(config.architecture)
    if layout is None:
        raise ConfigError(f"Unknown architecture: {config.architecture}", key="architecture")
    block, layers = layout
    if config.toy:
        return NarrowResNet(block, layers, config.embedding_dim)
    return ResNet(block, layers, num_classes=config.embedding_dim)


def backbone_stages(module: nn.Module) -> List[nn.Module]:
    """Backbone stages from input to output, used to freeze leading layers."""
    if isinstance(module, TinyConv):
        return list(module.blocks)
    if hasattr(module, "layer4"):
        return [
            nn.ModuleList([module.conv1, module.bn1]),
            module.layer1,
            module.layer2,
            module.layer3,
            module.layer4,
        ]
    return list(module.children())


def freeze_leading(module: nn.Module, depth: int) -> None:
    """Stop gradients into the first ``depth`` backbone stages."""
    for stage in backbone_stages(module)[: max(depth, 0)]:
        stage.requires_grad_(False)


class Head(nn.Sequential):
    """Perceptron head: ``Linear`` layers with SiLU between them.

    Args:
        kind: Role of the head.
        widths: Layer widths, input first; ``[in, hidden, out]`` gives a
            two-layer perceptron.

    Note (RU): Голова-перцептрон.
    """

    def __init__(self, kind: HeadKind, widths: Sequence[int]) -> None:
        if len(widths) < 2 or any(int(w) <= 0 for w in widths):
            raise InvalidInputError(f"Head widths must be >= 2 positive sizes, got {list(widths)}")
        layers: List[nn.Module] = []
        for i, (a, b) in enumerate(zip(widths, widths[1:])):
            layers.append(nn.Linear(int(a), int(b)))
            if i < len(widths) - 2:
                layers.append(nn.SiLU())
        super().__init__(*layers)
        self.kind = HeadKind(kind)
        self.widths = [int(w) for w in widths]

    @property
    def out_features(self) -> int:
        return self.widths[-1]


def build_head(kind: HeadKind, in_dim: int, out_dim: int, hidden: Optional[int] = None) -> Head:
    """Two-layer perceptron head ``in_dim → hidden → out_dim``."""
    return Head(kind, [in_dim, hidden or max(in_dim, out_dim), out_dim])


def module_dtype(module: nn.Module) -> torch.dtype:
    """Floating point type of the module's parameters."""
    return next(module.parameters()).dtype


def parameter_hash(params: Any) -> str:
    """SHA-256 over parameter names and raw bytes, in name order.

    Args:
        params: ``nn.Module`` or state dict.
    """
    state = params.state_dict() if isinstance(params, nn.Module) else params
    digest = hashlib.sha256()
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        digest.update(name.encode("utf-8"))
        digest.update(str(tensor.dtype).encode("utf-8"))
        digest.update(str(tuple(tensor.shape)).encode("utf-8"))
        digest.update(tensor.view(-1).view(torch.uint8).numpy().tobytes())
    return digest.hexdigest()


def config_fingerprint(config: EncoderConfig, stage: Stage) -> str:
    return fingerprint({"config": config.to_dict(), "stage": Stage(stage).value})


@model
class Checkpoint(VipromModel):
    """Encoder parameters with their provenance.

    Attributes:
        params: Backbone state dict (CPU tensors).
        config: Encoder configuration.
        stage: Stage that produced the parameters.
        config_fingerprint: Hash of ``config`` and ``stage``.
        rng_state: Torch CPU RNG state captured after the stage.

    Note (RU): Чекпойнт энкодера.
    """

    params: Dict[str, torch.Tensor] = None  # type: ignore[assignment]
    config: EncoderConfig = None  # type: ignore[assignment]
    stage: Stage = Stage.SCRATCH
    config_fingerprint: str = ""
    rng_state: Optional[torch.Tensor] = None

    def __post_init__(self) -> None:
        self.stage = Stage(self.stage)
        if not self.config_fingerprint:
            self.config_fingerprint = config_fingerprint(self.config, self.stage)
        self._module: Optional[nn.Module] = None

    @property
    def params_digest(self) -> str:
        return parameter_hash(self.params)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config": self.config.to_dict(),
            "stage": self.stage.value,
            "config_fingerprint": self.config_fingerprint,
            "params_digest": self.params_digest,
        }

    def build_module(self) -> nn.Module:
        """Fresh backbone module loaded with these parameters (train mode)."""
        with seeded(0):
            module = build_encoder(self.config)
        module.load_state_dict(self.params, strict=True)
        return module

    def module(self) -> nn.Module:
        """Shared inference-mode module; never train it."""
        if self._module is None:
            module = self.build_module().eval()
            module.requires_grad_(False)
            self._module = module
        return self._module

    def advance(
        self,
        stage: Stage,
        module: nn.Module,
        rng_state: Optional[torch.Tensor] = None,
        allow_skip: bool = False,
    ) -> "Checkpoint":
        """Checkpoint of ``module`` produced by a later stage.

        Raises:
            StageTransitionError: When ``stage`` does not follow the current one
                (``scratch → supervised`` needs ``allow_skip``).

        Note (RU): Переход к следующей стадии.
        """
        stage = Stage(stage)
        step = _STAGE_ORDER[stage] - _STAGE_ORDER[self.stage]
        if step <= 0 or (step > 1 and not allow_skip):
            raise StageTransitionError(
                f"Cannot go from stage {self.stage.value} to {stage.value}"
            )
        return Checkpoint(
            params=_detach_state(module),
            config=self.config,
            stage=stage,
            rng_state=rng_state,
        )


def _detach_state(module: nn.Module) -> Dict[str, torch.Tensor]:
    return {k: v.detach().cpu().clone() for k, v in module.state_dict().items()}


def init_encoder(config: EncoderConfig, seed: int) -> Checkpoint:
    """Randomly initialized encoder (stage ``scratch``), deterministic in ``seed``.

    Note (RU): Случайная инициализация энкодера.
    """
    with seeded(seed):
        module = build_encoder(config)
        rng_state = torch.random.get_rng_state()
    return Checkpoint(
        params=_detach_state(module),
        config=config,
        stage=Stage.SCRATCH,
        rng_state=rng_state,
    )


def check_frames(config: EncoderConfig, frames: Sequence[FrameImage]) -> None:
    expected = (config.input_hw[0], config.input_hw[1], 3)
    for frame in frames:
        actual = tuple(frame.pixels.shape)
        if actual != expected:
            raise ShapeMismatchError(
                f"Frame {frame.source} does not match the encoder input",
                expected=expected,
                actual=actual,
            )


def check_batch(config: EncoderConfig, batch: torch.Tensor) -> None:
    expected = (3, config.input_hw[0], config.input_hw[1])
    if batch.dim() != 4 or tuple(batch.shape[1:]) != expected:
        raise ShapeMismatchError(
            "Batch does not match the encoder input",
            expected=(-1, *expected),
            actual=tuple(batch.shape),
        )


def encode(
    checkpoint: Checkpoint, frames: Sequence[FrameImage], train: bool = False
) -> torch.Tensor:
    """Encode frames into a ``len(frames) × embedding_dim`` matrix.

    In inference mode (default) the shared eval module is used under
    ``torch.no_grad``. With ``train=True`` a fresh train-mode module is built
    and the result carries gradients w.r.t. its parameters.

    Raises:
        ShapeMismatchError: When a frame differs from ``config.input_hw``.
    """
    check_frames(checkpoint.config, frames)
    if train:
        module = checkpoint.build_module().train()
        return module(frames_to_tensor(frames, module_dtype(module)))
    module = checkpoint.module()
    with torch.no_grad():
        return module(frames_to_tensor(frames, module_dtype(module)))


class FrozenEncoder:
    """Read-only encoder handle for downstream training.

    Its parameters have ``requires_grad`` off and the module stays in eval
    mode, so no downstream optimizer can change them.

    Note (RU): Замороженный энкодер.
    """

    def __init__(self, checkpoint: Checkpoint) -> None:
        self.checkpoint = checkpoint
        self.module = checkpoint.build_module().eval()
        self.module.requires_grad_(False)

    @property
    def config(self) -> EncoderConfig:
        return self.checkpoint.config

    @property
    def embedding_dim(self) -> int:
        return self.checkpoint.config.embedding_dim

    @property
    def fingerprint(self) -> str:
        return self.checkpoint.config_fingerprint

    def parameters(self) -> List[torch.nn.Parameter]:
        return list(self.module.parameters())

    def parameter_hash(self) -> str:
        return parameter_hash(self.module)

    def encode_tensor(self, batch: torch.Tensor) -> torch.Tensor:
        check_batch(self.config, batch)
        with torch.no_grad():
            return self.module(batch.to(module_dtype(self.module)))

    def encode(self, frames: Sequence[FrameImage]) -> torch.Tensor:
        check_frames(self.config, frames)
        return self.encode_tensor(frames_to_tensor(frames))

    def __call__(self, frames: Sequence[FrameImage]) -> torch.Tensor:
        return self.encode(frames)


def freeze(checkpoint: Checkpoint) -> FrozenEncoder:
    """Frozen handle of a checkpoint at any stage.

    Note (RU): Заморозка энкодера.
    """
    return FrozenEncoder(checkpoint)


def save_checkpoint(checkpoint: Checkpoint, path: PathLike) -> Path:
    """Write a checkpoint as one torch container with a versioned header.

    Raises:
        CheckpointError: When the file cannot be written.

    Note (RU): Сохранение чекпойнта.
    """
    target = Path(path)
    header = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "code_version": __version__,
        "stage": checkpoint.stage.value,
        "config": checkpoint.config.to_dict(),
        "fingerprint": checkpoint.config_fingerprint,
        "params_digest": checkpoint.params_digest,
    }
    payload: Dict[str, Any] = {
        "header": header,
        "params": checkpoint.params,
        "rng_state": checkpoint.rng_state,
    }
    tmp = target.with_name(f".{target.name}.tmp")
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, tmp)
        os.replace(tmp, target)
    except OSError as e:
        raise CheckpointError(f"Cannot write checkpoint {target}: {e}") from e
    logger.info(
        f"Saved {checkpoint.stage.value} checkpoint {checkpoint.config_fingerprint} to {target}"
    )
    return target


def load_checkpoint(path: PathLike) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Any checkpoint with the same schema version loads, whatever code version
    wrote it.

    Raises:
        CheckpointError: On unreadable or truncated files and schema mismatch.
        FingerprintMismatchError: When the header does not match the content.

    Note (RU): Загрузка чекпойнта.
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError, ValueError, pickle.UnpicklingError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    try:
        header = payload["header"]
        params = payload["params"]
        rng_state = payload.get("rng_state")
        schema_version = header["schema_version"]
    except (KeyError, TypeError, AttributeError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint container") from e
    if schema_version != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint schema {schema_version!r}")

    try:
        config = EncoderConfig.de_json(header["config"], strict=True)
        stage = Stage(header["stage"])
        stored_fingerprint = header["fingerprint"]
        stored_digest = header["params_digest"]
    except (KeyError, TypeError, ValueError, ConfigError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint header: {e}") from e
    if config is None:
        raise CheckpointError(f"{path}: checkpoint has no encoder config")

    computed = config_fingerprint(config, stage)
    if computed != stored_fingerprint:
        raise FingerprintMismatchError(
            f"{path}: config fingerprint mismatch", stored=stored_fingerprint, computed=computed
        )
    digest = parameter_hash(params)
    if digest != stored_digest:
        raise FingerprintMismatchError(
            f"{path}: parameter digest mismatch", stored=stored_digest, computed=digest
        )

    return Checkpoint(
        params=params,
        config=config,
        stage=stage,
        config_fingerprint=computed,
        rng_state=rng_state,
    )


def linear_probe(
    encoder: FrozenEncoder,
    train_frames: Sequence[FrameImage],
    train_labels: Sequence[int],
    test_frames: Sequence[FrameImage],
    test_labels: Sequence[int],
    epochs: int = 300,
    lr: float = 0.05,
    seed: int = 0,
) -> float:
    """Held-out accuracy of a linear classifier on frozen features.

    Features are standardized with training statistics; the classifier is
    trained full-batch with Adam.

    Note (RU): Линейный зонд на замороженных признаках.
    """
    if not train_frames or not test_frames:
        raise InvalidInputError("linear_probe needs non-empty train and test sets")
    x_train = encoder.encode(train_frames)
    x_test = encoder.encode(test_frames)
    mean = x_train.mean(0, keepdim=True)
    std = x_train.std(0, keepdim=True).clamp_min(1e-6)
    x_train = (x_train - mean) / std
    x_test = (x_test - mean) / std
    y_train = torch.as_tensor(list(train_labels), dtype=torch.long)
    y_test = torch.as_tensor(list(test_labels), dtype=torch.long)
    n_classes = int(max(y_train.max(), y_test.max())) + 1

    generator = make_generator(seed)
    readout = nn.Linear(x_train.shape[1], n_classes)
    with torch.no_grad():
        readout.weight.copy_(torch.randn(readout.weight.shape, generator=generator) * 0.01)
        readout.bias.zero_()
    optimizer = torch.optim.Adam(readout.parameters(), lr=lr)
    for _ in range(epochs):
        optimizer.zero_grad()
        F.cross_entropy(readout(x_train), y_train).backward()
        optimizer.step()
    with torch.no_grad():
        accuracy = (readout(x_test).argmax(1) == y_test).float().mean().item()
    logger.debug(f"Linear readout accuracy {accuracy:.3f} on {len(test_labels)} frames")
    return float(accuracy)
