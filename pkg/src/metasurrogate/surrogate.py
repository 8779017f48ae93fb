"""CNN surrogate: four conv blocks, flatten + config concat, three FC layers.

Block: (conv3x3 -> batchnorm -> LeakyReLU) x 2 -> maxpool 2x2. The pooled
feature map is flattened channel-last and concatenated with the 14-entry
config vector before the fully connected head, whose last layer is linear.
"""

from __future__ import annotations

import contextlib
import json
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import neuralnet as nn
from . import physics
from .errors import DataError, NumericError, UsageError
from .fileio import atomic_write

log = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


@dataclass(frozen=True)
class ArchitectureDescriptor:
    input_resolution: int = 64
    channels: tuple[int, ...] = (16, 32, 64, 128)
    config_len: int = ds.CONFIG_LEN
    fc_hidden: tuple[int, ...] = (512, 256)
    output_len: int = physics.N_FREQ

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "fc_hidden", tuple(int(c) for c in self.fc_hidden))

    @property
    def downsample(self) -> int:
        return 2 ** len(self.channels)

    @property
    def flattened_size(self) -> int:
        side = self.input_resolution // self.downsample
        return self.channels[-1] * side * side

    def validate(self) -> None:
        if self.input_resolution % self.downsample:
            raise UsageError(
                f"resolution {self.input_resolution} is not divisible by {self.downsample}"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["fc_hidden"] = list(self.fc_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureDescriptor":
        return cls(
            int(d["input_resolution"]),
            tuple(d["channels"]),
            int(d["config_len"]),
            tuple(d["fc_hidden"]),
            int(d["output_len"]),
        )


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 32
    learning_rate: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    delta: float = 3.0
    seed: int = 0
    deterministic: bool = True
    # optional early exit once both validation targets hold
    target_val_cs: float | None = None
    target_val_mse: float | None = None
    max_seconds: float | None = None
    # start the output bias at the mean training spectrum (fresh models only)
    init_output_bias: bool = True

    def validate(self) -> None:
        for name in ("epochs", "batch_size", "learning_rate", "beta1", "beta2", "delta"):
            if not getattr(self, name) > 0:
                raise UsageError(f"{name} must be positive")
        if self.delta <= 0:
            raise UsageError("Huber delta must be positive")


HISTORY_FIELDS = (
    "epoch",
    "train_huber",
    "train_mse",
    "train_mae",
    "train_cs",
    "val_huber",
    "val_mse",
    "val_mae",
    "val_cs",
    "seconds",
)


class SurrogateModel:
    def __init__(self, descriptor: ArchitectureDescriptor, seed: int = 0, dtype=np.float32):
        descriptor.validate()
        self.descriptor = descriptor
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.layers: list[tuple[str, nn.Layer]] = []
        in_ch = 1
        for b, out_ch in enumerate(descriptor.channels):
            for k in range(2):
                self.layers.append((f"block{b}.conv{k}", nn.Conv2d(in_ch, out_ch, rng, dtype)))
                self.layers.append((f"block{b}.bn{k}", nn.BatchNorm(out_ch, dtype)))
                self.layers.append((f"block{b}.act{k}", nn.LeakyReLU()))
                in_ch = out_ch
            self.layers.append((f"block{b}.pool", nn.MaxPool2d()))
        self.n_conv_layers = len(self.layers)
        widths = [descriptor.flattened_size + descriptor.config_len, *descriptor.fc_hidden]
        for k, (fan_in, fan_out) in enumerate(zip(widths, widths[1:] + [descriptor.output_len])):
            self.layers.append((f"fc{k}", nn.Linear(fan_in, fan_out, rng, dtype)))
            if k < len(descriptor.fc_hidden):
                self.layers.append((f"fc{k}.act", nn.LeakyReLU()))
        self.history: list[dict] = []
        self.train_config: TrainConfig | None = None
        self.checkpoint_epoch: int | None = None
        self.checkpoint_val_mse: float | None = None

    # -- parameter access --------------------------------------------------

    def named_params(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self.layers for k, v in layer.params.items()}

    def named_grads(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self.layers for k, v in layer.grads.items()}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self.layers for k, v in layer.buffers.items()}

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Parameters and buffers in layer order, params before buffers."""
        out = {}
        for n, layer in self.layers:
            for k, v in layer.params.items():
                out[f"{n}.{k}"] = v
            for k, v in layer.buffers.items():
                out[f"{n}.{k}"] = v
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_tensors().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in self.state_tensors().items():
            v[...] = snap[k]

    def zero_grad(self) -> None:
        for _, layer in self.layers:
            layer.zero_grad()

    @property
    def parameter_count(self) -> int:
        return sum(v.size for v in self.named_params().values())

    # -- forward / backward ----------------------------------------------

    def _prepare(self, images, configs):
        images = np.asarray(images, dtype=self.dtype)
        configs = np.asarray(configs, dtype=self.dtype)
        res = self.descriptor.input_resolution
        if images.ndim == 2:
            images = images[None]
        if images.ndim == 4 and images.shape[1] == 1:
            images = images[:, 0]
        if images.ndim != 3 or images.shape[1:] != (res, res):
            raise UsageError(f"expected images of shape (batch, {res}, {res}), got {images.shape}")
        if configs.ndim == 1:
            configs = configs[None]
        if configs.shape != (images.shape[0], self.descriptor.config_len):
            raise UsageError(
                f"expected configs of shape ({images.shape[0]}, {self.descriptor.config_len}),"
                f" got {configs.shape}"
            )
        return images[..., None], configs

    def forward(self, images, configs, train: bool = False) -> np.ndarray:
        """Normalized spectra of shape (batch, output_len)."""
        x, configs = self._prepare(images, configs)
        for name, layer in self.layers[: self.n_conv_layers]:
            x = layer.forward(x, train)
        nn.check_finite(x, "convolutional blocks")
        self._feature_shape = x.shape
        x = np.concatenate([x.reshape(x.shape[0], -1), configs], axis=1)
        for name, layer in self.layers[self.n_conv_layers :]:
            x = layer.forward(x, train)
        return nn.check_finite(x, "fully connected head")

    def backward(self, dout: np.ndarray) -> None:
        """Accumulate parameter gradients for the last train-mode forward."""
        g = dout
        for name, layer in reversed(self.layers[self.n_conv_layers :]):
            g = layer.backward(g)
        g = g[:, : self.descriptor.flattened_size].reshape(self._feature_shape)
        for name, layer in reversed(self.layers[1 : self.n_conv_layers]):
            g = layer.backward(g)
        # the image itself needs no gradient
        self.layers[0][1].backward(g, need_input_grad=False)

    def input_gradient(self, dout: np.ndarray):
        """Like :meth:`backward` but also returns (d_images, d_configs)."""
        g = dout
        for name, layer in reversed(self.layers[self.n_conv_layers :]):
            g = layer.backward(g)
        flat = self.descriptor.flattened_size
        d_cfg = g[:, flat:]
        g = g[:, :flat].reshape(self._feature_shape)
        for name, layer in reversed(self.layers[: self.n_conv_layers]):
            g = layer.backward(g)
        return g[..., 0], d_cfg

    def branch_signature(self) -> bytes:
        """Activation signs and pooling winners of the last train-mode forward.

        The network is smooth wherever this stays fixed, which is what
        finite-difference checks need.
        """
        parts = []
        for _, layer in self.layers:
            if isinstance(layer, nn.LeakyReLU):
                parts.append(np.packbits(layer._cache == 1).tobytes())
            elif isinstance(layer, nn.MaxPool2d):
                parts.extend(np.packbits(m).tobytes() for m in layer._cache[0])
        return b"".join(parts)

    def predict_normalized(self, images, configs, batch_size: int = 64) -> np.ndarray:
        images = np.asarray(images)
        configs = np.asarray(configs)
        if images.ndim == 2:
            images, configs = images[None], np.atleast_2d(configs)
        outs = [
            self.forward(images[i : i + batch_size], configs[i : i + batch_size], train=False)
            for i in range(0, images.shape[0], batch_size)
        ]
        return np.concatenate(outs, axis=0)


def build(descriptor: ArchitectureDescriptor, seed: int = 0, dtype=np.float32) -> SurrogateModel:
    return SurrogateModel(descriptor, seed, dtype)


def forward(model: SurrogateModel, images, configs, mode: str = "infer") -> np.ndarray:
    if mode not in ("train", "infer"):
        raise UsageError(f"mode must be 'train' or 'infer', got {mode!r}")
    return model.forward(images, configs, train=(mode == "train"))


# --- training ----------------------------------------------------------------


def _blas_limit(deterministic: bool):
    if not deterministic:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=1)


def evaluate(model: SurrogateModel, images, configs, targets, delta: float = 3.0) -> dict:
    pred = model.predict_normalized(images, configs)
    mse, mae, cs = nn.metrics(pred, targets)
    huber, _ = nn.huber_loss(pred.astype(np.float64), np.asarray(targets, np.float64), delta)
    return {"huber": huber, "mse": mse, "mae": mae, "cs": cs}


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        # batch norm needs two samples; a lone leftover is skipped this epoch
        if idx.size >= 2:
            yield idx


def train(
    model: SurrogateModel,
    data: ds.Dataset,
    config: TrainConfig,
    on_epoch=None,
) -> list[dict]:
    """Minibatch Huber/Adam training with per-epoch train and val metrics.

    Train metrics are accumulated from the epoch's minibatch predictions;
    validation metrics come from a full infer-mode pass. The weights with
    the lowest validation MSE are restored into ``model`` when training ends.
    """
    config.validate()
    if data.resolution != model.descriptor.input_resolution:
        raise DataError(
            f"dataset resolution {data.resolution} does not match model "
            f"resolution {model.descriptor.input_resolution}"
        )
    x_tr, c_tr, t_tr = data.subset("train")
    x_va, c_va, t_va = data.subset("val")
    if config.batch_size > x_tr.shape[0]:
        raise UsageError(
            f"batch size {config.batch_size} exceeds the {x_tr.shape[0]}-sample train split"
        )
    model.train_config = config
    if config.init_output_bias and not model.history:
        model.layers[-1][1].params["bias"][...] = t_tr.mean(axis=0, dtype=np.float64)
    optimizer = nn.Adam(config.learning_rate, config.beta1, config.beta2)
    model.optimizer = optimizer
    start_epoch = len(model.history) + 1
    best = (math.inf, None, None)
    t0 = time.perf_counter()
    with _blas_limit(config.deterministic):
        for epoch in range(start_epoch, start_epoch + config.epochs):
            rng = np.random.default_rng([config.seed, epoch])
            sums = np.zeros(4)
            count = 0
            for bi, idx in enumerate(_batches(x_tr.shape[0], config.batch_size, rng)):
                model.zero_grad()
                pred = model.forward(x_tr[idx], c_tr[idx], train=True)
                loss, grad = nn.huber_loss(pred, t_tr[idx], config.delta)
                if not math.isfinite(loss):
                    raise NumericError(
                        f"loss became {loss} at epoch {epoch}, batch {bi}; "
                        f"max |pred| = {np.nanmax(np.abs(pred)):.3g}"
                    )
                model.backward(grad)
                optimizer.step(model.named_params(), model.named_grads())
                mse, mae, cs = nn.metrics(pred, t_tr[idx])
                sums += idx.size * np.array([loss, mse, mae, cs])
                count += idx.size
            train_stats = sums / count
            val = evaluate(model, x_va, c_va, t_va, config.delta)
            row = {
                "epoch": epoch,
                "train_huber": float(train_stats[0]),
                "train_mse": float(train_stats[1]),
                "train_mae": float(train_stats[2]),
                "train_cs": float(train_stats[3]),
                "val_huber": val["huber"],
                "val_mse": val["mse"],
                "val_mae": val["mae"],
                "val_cs": val["cs"],
                "seconds": time.perf_counter() - t0,
            }
            model.history.append(row)
            if val["mse"] < best[0]:
                best = (val["mse"], epoch, model.snapshot())
            log.info(
                "epoch %d train_huber %.3e val_mse %.3e val_cs %.5f (%.0fs)",
                epoch, row["train_huber"], row["val_mse"], row["val_cs"], row["seconds"],
            )
            if on_epoch is not None:
                on_epoch(row)
            if _targets_met(config, row) or (
                config.max_seconds is not None and row["seconds"] >= config.max_seconds
            ):
                break
    if best[2] is not None:
        model.restore(best[2])
        model.checkpoint_val_mse, model.checkpoint_epoch = best[0], best[1]
    return model.history


def _targets_met(config: TrainConfig, row: dict) -> bool:
    if config.target_val_cs is None and config.target_val_mse is None:
        return False
    ok = True
    if config.target_val_cs is not None:
        ok &= row["val_cs"] >= config.target_val_cs
    if config.target_val_mse is not None:
        ok &= row["val_mse"] <= config.target_val_mse
    return bool(ok)


# --- inference ---------------------------------------------------------------


@dataclass
class Prediction:
    s11_db: np.ndarray
    absorption: np.ndarray
    bands: list = field(default_factory=list)


def predict(model: SurrogateModel, image, config, threshold_db: float = -10.0) -> Prediction:
    """Denormalized S11 (dB, clipped), absorption and sub-threshold bands."""
    t = model.predict_normalized(np.asarray(image)[None], np.asarray(config)[None])[0]
    s11 = np.clip(ds.denormalize(t.astype(np.float64)), physics.DB_FLOOR, physics.DB_CEIL)
    return Prediction(s11, physics.absorption(s11), physics.band_below_threshold(s11, threshold_db))


# --- persistence -------------------------------------------------------------


def _crc(data: bytes) -> str:
    return f"{zlib.crc32(data) & 0xFFFFFFFF:08x}"


def _pack(tensors: dict[str, np.ndarray]):
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype=_F32).tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": offset,
             "bytes": len(data), "crc32": _crc(data)}
        )
        chunks.append(data)
        offset += len(data)
    return entries, b"".join(chunks)


def _unpack(entries, blob: bytes, label: str) -> dict[str, np.ndarray]:
    out = {}
    for e in entries:
        start, size = e["offset"], e["bytes"]
        if start + size > len(blob):
            raise DataError(f"{label} is truncated at tensor {e['name']}")
        chunk = blob[start : start + size]
        if _crc(chunk) != e["crc32"]:
            raise DataError(f"checksum mismatch for tensor {e['name']} in {label}")
        out[e["name"]] = np.frombuffer(chunk, dtype=_F32).reshape(e["shape"]).copy()
    return out


def save_model(model: SurrogateModel, path, include_optimizer: bool = False) -> Path:
    """Write ``model.json`` and ``weights.f32`` (and optionally ``optimizer.f32``)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, blob = _pack(model.state_tensors())
    meta = {
        "format_version": MODEL_FORMAT_VERSION,
        "descriptor": model.descriptor.to_dict(),
        "train_config": asdict(model.train_config) if model.train_config else None,
        "history": model.history,
        "checkpoint": {"epoch": model.checkpoint_epoch, "val_mse": model.checkpoint_val_mse},
        "weights": {"file": "weights.f32", "total_bytes": len(blob), "tensors": entries},
    }
    files = {"weights.f32": blob}
    opt = getattr(model, "optimizer", None)
    if include_optimizer and opt is not None:
        state = opt.state_dict()
        tensors = {f"m.{k}": v for k, v in state["m"].items()}
        tensors.update({f"v.{k}": v for k, v in state["v"].items()})
        opt_entries, opt_blob = _pack(tensors)
        meta["optimizer"] = {
            "file": "optimizer.f32",
            "t": state["t"], "lr": state["lr"], "beta1": state["beta1"],
            "beta2": state["beta2"], "eps": state["eps"],
            "total_bytes": len(opt_blob), "tensors": opt_entries,
        }
        files["optimizer.f32"] = opt_blob
    for name, data in files.items():
        atomic_write(path / name, data)
    atomic_write(path / "model.json", (json.dumps(meta, indent=2) + "\n").encode("utf-8"))
    return path


def load_model(path, expect_resolution: int | None = None) -> SurrogateModel:
    path = Path(path)
    meta_path = path / "model.json"
    if not meta_path.is_file():
        raise DataError(f"no model.json in {path}")
    meta = json.loads(meta_path.read_text("utf-8"))
    if meta.get("format_version") != MODEL_FORMAT_VERSION:
        raise DataError(f"unsupported model format version {meta.get('format_version')}")
    descriptor = ArchitectureDescriptor.from_dict(meta["descriptor"])
    if expect_resolution is not None and descriptor.input_resolution != expect_resolution:
        raise DataError(
            f"model expects resolution {descriptor.input_resolution}, not {expect_resolution}"
        )
    blob = (path / meta["weights"]["file"]).read_bytes()
    if len(blob) != meta["weights"]["total_bytes"]:
        raise DataError("weights file size does not match model.json (truncated?)")
    tensors = _unpack(meta["weights"]["tensors"], blob, "weights.f32")
    model = SurrogateModel(descriptor)
    targets = model.state_tensors()
    if set(tensors) != set(targets):
        raise DataError("weights file does not match the architecture descriptor")
    for name, arr in targets.items():
        if arr.shape != tensors[name].shape:
            raise DataError(f"shape mismatch for {name}: {tensors[name].shape} vs {arr.shape}")
        arr[...] = tensors[name]
    if meta.get("train_config"):
        model.train_config = TrainConfig(**meta["train_config"])
    model.history = list(meta.get("history", []))
    model.checkpoint_epoch = meta.get("checkpoint", {}).get("epoch")
    model.checkpoint_val_mse = meta.get("checkpoint", {}).get("val_mse")
    opt_meta = meta.get("optimizer")
    if opt_meta:
        opt_blob = (path / opt_meta["file"]).read_bytes()
        if len(opt_blob) != opt_meta["total_bytes"]:
            raise DataError("optimizer file size does not match model.json")
        opt_tensors = _unpack(opt_meta["tensors"], opt_blob, "optimizer.f32")
        model.optimizer = nn.Adam.from_state({
            "t": opt_meta["t"], "lr": opt_meta["lr"], "beta1": opt_meta["beta1"],
            "beta2": opt_meta["beta2"], "eps": opt_meta["eps"],
            "m": {k[2:]: v for k, v in opt_tensors.items() if k.startswith("m.")},
            "v": {k[2:]: v for k, v in opt_tensors.items() if k.startswith("v.")},
        })
    return model
