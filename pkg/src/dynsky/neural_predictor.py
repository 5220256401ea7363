"""FlowNet and CloudNet: U-Nets predicting cloud motion and the next sky frame.

Both networks share one encoder/decoder layout. The encoder is a stack of
4x4 stride-2 convolutions (LeakyReLU 0.2 before all but the first, batch
norm after the intermediate ones); each decoder stage is ReLU, 3x3
convolution, bilinear 2x upsampling and batch norm, with skip connections
from the encoder stage of matching resolution.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .optical_flow import MAG_EPS, EncodedFlow
from .sky_image import SkyImage

DEFAULT_WIDTHS = (64, 128, 256, 512, 512, 512, 512, 512)
ROLES = ("flownet", "cloudnet")


class ConfigurationError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, seed: int, step: int):
        super().__init__(f"{message} (seed={seed}, step={step})")
        self.seed = seed
        self.step = step


@dataclass(frozen=True)
class UNetConfig:
    role: str = "flownet"
    in_channels: int = 3
    out_channels: int = 3
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    encoder_kernel: int = 4
    decoder_kernel: int = 3
    stride: int = 2
    leaky_slope: float = 0.2
    resolution: int = 256
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.role not in ROLES:
            raise ConfigurationError(f"unknown role {self.role!r}")
        if not self.widths:
            raise ConfigurationError("at least one encoder stage is required")
        if self.stride != 2:
            raise ConfigurationError("encoder stages must downsample by 2")
        if self.resolution % (2**self.depth) != 0:
            raise ConfigurationError(
                f"resolution {self.resolution} is not divisible by 2^{self.depth}"
            )

    @property
    def depth(self) -> int:
        return len(self.widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


def default_config(role: str, resolution: int, width_scale: float = 1.0) -> UNetConfig:
    """Standard layout for ``role``; depth shrinks below 256 px so the bottleneck stays 1x1."""
    depth = min(len(DEFAULT_WIDTHS), int(math.log2(resolution)))
    widths = tuple(max(1, int(round(w * width_scale))) for w in DEFAULT_WIDTHS[:depth])
    return UNetConfig(
        role=role,
        in_channels=3 if role == "flownet" else 6,
        widths=widths,
        resolution=resolution,
    )


class UNet(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        widths = config.widths
        depth = config.depth
        k = config.encoder_kernel
        self.encoder = nn.ModuleList()
        for i, w in enumerate(widths):
            cin = config.in_channels if i == 0 else widths[i - 1]
            layers: list[nn.Module] = []
            if i > 0:
                layers.append(nn.LeakyReLU(config.leaky_slope))
            layers.append(nn.Conv2d(cin, w, k, stride=2, padding=(k - 2) // 2))
            if 0 < i < depth - 1:
                layers.append(nn.BatchNorm2d(w, momentum=config.bn_momentum))
            self.encoder.append(nn.Sequential(*layers))

        self.decoder = nn.ModuleList()
        for j in range(depth):
            cin = widths[-1] if j == 0 else self._dec_out(j - 1) + widths[depth - 1 - j]
            cout = self._dec_out(j)
            kd = config.decoder_kernel
            layers = [
                nn.ReLU(),
                nn.Conv2d(cin, cout, kd, stride=1, padding=kd // 2),
                nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            ]
            if j < depth - 1:
                layers.append(nn.BatchNorm2d(cout, momentum=config.bn_momentum))
            self.decoder.append(nn.Sequential(*layers))

    def _dec_out(self, j: int) -> int:
        depth = self.config.depth
        return self.config.out_channels if j == depth - 1 else self.config.widths[depth - 2 - j]

    @property
    def role(self) -> str:
        return self.config.role

    @property
    def final_conv(self) -> nn.Conv2d:
        return self.decoder[-1][1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for stage in self.encoder:
            x = stage(x)
            skips.append(x)
        depth = self.config.depth
        for j, stage in enumerate(self.decoder):
            if j > 0:
                x = torch.cat([x, skips[depth - 1 - j]], dim=1)
            x = stage(x)
        return self._activate(x)

    def _activate(self, x: torch.Tensor) -> torch.Tensor:
        if self.config.role == "cloudnet":
            return torch.sigmoid(x)
        angle = torch.tanh(x[:, :2])
        # Shifted so a zero pre-activation means zero motion.
        mag = F.softplus(x[:, 2:3]) - math.log(2.0)
        return torch.cat([angle, mag], dim=1)


def build_unet(config: UNetConfig, seed: int = 0, zero_final: bool = False) -> UNet:
    """Construct a U-Net with weights drawn deterministically from ``seed``."""
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        model = UNet(config)
    finally:
        torch.random.set_rng_state(gen_state)
    if zero_final:
        with torch.no_grad():
            model.final_conv.weight.zero_()
            model.final_conv.bias.zero_()
    return model


# --- tensor conversion and inference ----------------------------------------


def image_tensor(img: SkyImage) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.pixels.transpose(2, 0, 1))).float()[None]


def flow_tensor(enc: EncodedFlow) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(enc.channels.transpose(2, 0, 1))).float()[None]


def _check_input(model: UNet, img: SkyImage, role: str) -> None:
    if model.role != role:
        raise ValueError(f"expected a {role} model, got {model.role}")
    if img.width != model.config.resolution:
        raise ValueError(
            f"image resolution {img.width} does not match model resolution {model.config.resolution}"
        )


def canonical_flow(raw: np.ndarray, valid: np.ndarray) -> EncodedFlow:
    """Clamp magnitude, zero the outside of the disc and canonicalize still pixels."""
    out = np.array(raw, dtype=np.float64)
    out[..., 2] = np.maximum(out[..., 2], 0.0)
    still = (out[..., 2] <= MAG_EPS) | ~valid
    out[still] = (0.0, 1.0, 0.0)
    return EncodedFlow(out)


@torch.no_grad()
def flownet_infer(model: UNet, img: SkyImage) -> EncodedFlow:
    _check_input(model, img, "flownet")
    model.eval()
    out = model(image_tensor(img))[0].numpy().transpose(1, 2, 0)
    return canonical_flow(out, img.valid)


@torch.no_grad()
def cloudnet_infer(model: UNet, img: SkyImage, flow: EncodedFlow) -> SkyImage:
    _check_input(model, img, "cloudnet")
    if flow.channels.shape[:2] != img.pixels.shape[:2]:
        raise ValueError("flow and image resolutions differ")
    model.eval()
    x = torch.cat([image_tensor(img), flow_tensor(flow)], dim=1)
    out = model(x)[0].double().numpy().transpose(1, 2, 0)
    out = np.clip(out, 0.0, 1.0)
    out[~img.valid] = 0.0
    return SkyImage(out, img.valid)


# --- loss -------------------------------------------------------------------


@dataclass(frozen=True)
class LossReport:
    mse: float
    cosine: float
    total: float


def composite_terms(
    pred: torch.Tensor, target: torch.Tensor, valid: torch.Tensor | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """MSE and mean ``1 - cos`` over valid pixels of ``(N, C, H, W)`` tensors."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if valid is None:
        valid = torch.ones(pred.shape[0], 1, *pred.shape[2:], dtype=pred.dtype)
    valid = valid.to(pred.dtype).expand(pred.shape[0], 1, *pred.shape[2:])
    n_pix = valid.sum().clamp_min(1.0)
    mse = (((pred - target) ** 2) * valid).sum() / (n_pix * pred.shape[1])
    dot = (pred * target).sum(dim=1, keepdim=True)
    norms = pred.norm(dim=1, keepdim=True) * target.norm(dim=1, keepdim=True)
    nonzero = norms > 1e-12
    cos = torch.where(nonzero, dot / torch.where(nonzero, norms, torch.ones_like(norms)), torch.ones_like(norms))
    cosine = ((1.0 - cos) * valid).sum() / n_pix
    return mse, cosine


def composite_loss(pred, target, lam: float = 1.0, valid=None) -> LossReport:
    """Loss report for ``(H, W, C)`` rasters; ``total = mse + lam * cosine``."""
    p = torch.as_tensor(np.asarray(pred, dtype=np.float64)).permute(2, 0, 1)[None]
    t = torch.as_tensor(np.asarray(target, dtype=np.float64)).permute(2, 0, 1)[None]
    v = None
    if valid is not None:
        v = torch.as_tensor(np.asarray(valid, dtype=np.float64))[None, None]
    mse, cosine = composite_terms(p, t, v)
    mse_f = float(mse)
    cos_f = max(float(cosine), 0.0)
    return LossReport(mse_f, cos_f, mse_f + lam * cos_f)


# --- training ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 1
    learning_rate: float = 2e-4
    cosine_weight: float = 1.0
    optimizer: str = "adam"
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.cosine_weight < 0:
            raise ConfigurationError("cosine_weight must be non-negative")
        if self.optimizer not in ("adam",):
            raise ConfigurationError(f"unsupported optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainResult:
    model: UNet
    history: list[float] = field(default_factory=list)
    mse_history: list[float] = field(default_factory=list)


def set_deterministic(flag: bool = True) -> None:
    if flag:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _fit(
    model: UNet,
    inputs: torch.Tensor,
    targets: torch.Tensor,
    valid: torch.Tensor,
    cfg: TrainConfig,
) -> TrainResult:
    set_deterministic(cfg.deterministic)
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(0.5, 0.999))
    n = inputs.shape[0]
    result = TrainResult(model)
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        order = torch.randperm(n, generator=gen)
        tot_sum = mse_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            pred = model(inputs[idx])
            mse, cosine = composite_terms(pred, targets[idx], valid[idx])
            loss = mse + cfg.cosine_weight * cosine
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}", seed=cfg.seed, step=step
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            tot_sum += float(loss.detach()) * len(idx)
            mse_sum += float(mse.detach()) * len(idx)
        result.history.append(tot_sum / n)
        result.mse_history.append(mse_sum / n)
    model.eval()
    return result


def _stack_valid(images: Sequence[SkyImage]) -> torch.Tensor:
    return torch.from_numpy(np.stack([im.valid for im in images])[:, None].astype(np.float32))


def train_flownet(
    pairs: Sequence[tuple[SkyImage, EncodedFlow]],
    cfg: TrainConfig,
    config: UNetConfig | None = None,
    model: UNet | None = None,
) -> TrainResult:
    """Fit FlowNet to (image, encoded flow) pairs; history holds per-epoch mean loss."""
    if not pairs:
        raise ValueError("no training pairs")
    res = pairs[0][0].width
    if model is None:
        model = build_unet(config or default_config("flownet", res), seed=cfg.seed)
    for img, _ in pairs:
        _check_input(model, img, "flownet")
    x = torch.cat([image_tensor(p[0]) for p in pairs])
    y = torch.cat([flow_tensor(p[1]) for p in pairs])
    return _fit(model, x, y, _stack_valid([p[0] for p in pairs]), cfg)


def train_cloudnet(
    triples: Sequence[tuple[SkyImage, EncodedFlow, SkyImage]],
    cfg: TrainConfig,
    config: UNetConfig | None = None,
    model: UNet | None = None,
) -> TrainResult:
    """Fit CloudNet to (image, FlowNet flow, next image) triples."""
    if not triples:
        raise ValueError("no training triples")
    res = triples[0][0].width
    if model is None:
        model = build_unet(config or default_config("cloudnet", res), seed=cfg.seed)
    for img, _, _ in triples:
        _check_input(model, img, "cloudnet")
    x = torch.cat([torch.cat([image_tensor(a), flow_tensor(f)], dim=1) for a, f, _ in triples])
    y = torch.cat([image_tensor(t[2]) for t in triples])
    return _fit(model, x, y, _stack_valid([t[0] for t in triples]), cfg)


# --- gradient verification --------------------------------------------------


def _probe_loss(model: UNet, x: torch.Tensor, target: torch.Tensor, lam: float) -> torch.Tensor:
    mse, cosine = composite_terms(model(x), target)
    return mse + lam * cosine


def _probe(model: UNet, seed: int):
    g = torch.Generator().manual_seed(seed)
    c = model.config
    x = torch.rand(1, c.in_channels, c.resolution, c.resolution, generator=g, dtype=torch.float64)
    target = torch.rand(1, c.out_channels, c.resolution, c.resolution, generator=g, dtype=torch.float64)
    return x, target


def finite_difference_error(
    model: UNet, param_name: str, index: int, h: float, seed: int = 0, lam: float = 1.0
) -> float:
    """|central difference - autograd| for one scalar parameter (float64, eval mode)."""
    model = model.double().eval()
    x, target = _probe(model, seed)
    param = dict(model.named_parameters())[param_name]
    model.zero_grad()
    _probe_loss(model, x, target, lam).backward()
    analytic = float(param.grad.view(-1)[index])
    with torch.no_grad():
        flat = param.view(-1)
        orig = float(flat[index])
        flat[index] = orig + h
        up = float(_probe_loss(model, x, target, lam))
        flat[index] = orig - h
        down = float(_probe_loss(model, x, target, lam))
        flat[index] = orig
    return abs((up - down) / (2 * h) - analytic)


def gradient_check(
    model: UNet,
    count: int = 100,
    h: float = 1e-3,
    seed: int = 0,
    lam: float = 1.0,
    probe: tuple[torch.Tensor, torch.Tensor] | None = None,
    atol: float = 1e-7,
) -> float:
    """Max relative error of autograd vs central differences on sampled parameters.

    Runs in float64 with batch norm using its running statistics. The
    relative error is ``|a - n| / max(|a|, |n|, atol)``.
    """
    model = model.double().eval()
    x, target = probe if probe is not None else _probe(model, seed)
    x = x.double()
    target = target.double()
    model.zero_grad()
    _probe_loss(model, x, target, lam).backward()
    params = [(n, p) for n, p in model.named_parameters()]
    sizes = np.array([p.numel() for _, p in params])
    rng = np.random.default_rng(seed)
    # Every tensor gets at least one sample, the rest spread by size.
    picks = [(k, int(rng.integers(sizes[k]))) for k in range(len(params))]
    extra = max(0, count - len(picks))
    flat_idx = rng.choice(int(sizes.sum()), size=extra, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for fi in flat_idx:
        k = int(np.searchsorted(offsets, fi, side="right") - 1)
        picks.append((k, int(fi - offsets[k])))
    worst = 0.0
    with torch.no_grad():
        for k, i in picks:
            flat = params[k][1].view(-1)
            analytic = float(params[k][1].grad.view(-1)[i])
            orig = float(flat[i])
            flat[i] = orig + h
            up = float(_probe_loss(model, x, target, lam))
            flat[i] = orig - h
            down = float(_probe_loss(model, x, target, lam))
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            denom = max(abs(analytic), abs(numeric), atol)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


# --- checkpoints ------------------------------------------------------------

_CKPT_MAGIC = b"SKCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: UNet, path: str | Path, extra: dict | None = None) -> None:
    """Versioned container: JSON config record, then named row-major float32 tensors."""
    header = json.dumps(
        {"config": model.config.to_dict(), "extra": extra or {}}, sort_keys=True
    ).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        raw = name.encode("utf-8")
        arr = tensor.detach().cpu().numpy().astype("<f4")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[UNet, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    model = UNet(UNetConfig.from_dict(header["config"]))
    state = model.state_dict()
    loaded = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        if name not in state:
            raise ValueError(f"{path}: unexpected tensor {name!r}")
        loaded[name] = torch.from_numpy(arr.copy()).to(state[name].dtype)
    missing = set(state) - set(loaded)
    if missing:
        raise ValueError(f"{path}: missing tensors {sorted(missing)}")
    model.load_state_dict(loaded)
    model.eval()
    return model, header.get("extra", {})
