"""The one-stage detector: network, configuration, inference, and checkpoints.

Salience only ever touches the training loss, so this module has no dependency
on the salience machinery at all; loading a checkpoint and running predict
performs zero salience work by construction.

Checkpoints use a self-describing container: an 8-byte length, a canonical
JSON header (configs, step, learning rate, optimizer scalars, tensor index),
then the raw little-endian float32 tensor payloads in index order. Writing the
same state twice produces identical bytes.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .anchors import AnchorConfig, AnchorSet, generate_anchors
from .geometry import Box, Detection, decode_deltas_array, nms

CHECKPOINT_FORMAT = "sbl-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DetectorConfig:
    """Detector architecture and anchor settings.

    The backbone halves resolution at the stem and at every stage, so stage i
    of the backbone produces features at stride 2**(i+1); strides must be
    drawn from those available and must divide input_size. class scores are
    initialized so every anchor starts near the prior foreground probability.
    """

    num_classes: int
    input_size: int = 512
    strides: tuple[int, ...] = (8, 16)
    base_sizes: tuple[float, ...] = (32.0, 64.0)
    aspect_ratios: tuple[float, ...] = (1.0 / 3.0, 1.0, 3.0)
    scale_multipliers: tuple[float, ...] = (2.0, 2.0 ** 0.5, 0.3)
    backbone_channels: tuple[int, ...] = (16, 32, 64, 96)
    head_channels: int = 64
    prior: float = 0.01

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be at least 1, got {self.num_classes}")
        if not 0.0 < self.prior < 1.0:
            raise ValueError(f"prior must lie strictly inside (0, 1), got {self.prior}")
        if len(self.strides) != len(self.base_sizes) or not self.strides:
            raise ValueError("strides and base_sizes must be non-empty and pair up")
        available = {2 ** (i + 1) for i in range(len(self.backbone_channels))}
        for s in self.strides:
            if s not in available:
                raise ValueError(
                    f"stride {s} has no matching backbone stage; "
                    f"available strides: {sorted(available)}"
                )
        if self.input_size <= 0 or self.input_size % max(self.strides) != 0:
            raise ValueError(
                f"input_size must be a positive multiple of the largest stride "
                f"{max(self.strides)}, got {self.input_size}"
            )

    @property
    def anchor_config(self) -> AnchorConfig:
        return AnchorConfig(
            aspect_ratios=self.aspect_ratios,
            scale_multipliers=self.scale_multipliers,
            base_sizes=self.base_sizes,
            strides=self.strides,
        )

    @property
    def anchors_per_cell(self) -> int:
        return len(self.aspect_ratios) * len(self.scale_multipliers)

    def to_dict(self) -> dict:
        payload = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in payload.items()}

    @classmethod
    def from_dict(cls, payload: dict) -> "DetectorConfig":
        tuple_fields = {"strides", "base_sizes", "aspect_ratios", "scale_multipliers", "backbone_channels"}
        kwargs = {k: tuple(v) if k in tuple_fields else v for k, v in payload.items()}
        kwargs["strides"] = tuple(int(s) for s in kwargs["strides"])
        kwargs["backbone_channels"] = tuple(int(c) for c in kwargs["backbone_channels"])
        return cls(**kwargs)


class DetectorNet(nn.Module):
    """Small anchor-based one-stage detector with a shared two-branch head.

    forward takes (B, 3, S, S) images scaled to [0, 1] (the net shifts them to
    [-1, 1] itself) and returns one (class_probs, deltas) pair per pyramid
    level, each laid out to match the anchor grid: row-major cells with the
    per-cell anchor shapes innermost.
    """

    def __init__(self, config: DetectorConfig, seed: int = 0):
        super().__init__()
        self.config = config
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self._build()

    def _build(self):
        cfg = self.config
        blocks = []
        in_ch = 3
        for out_ch in cfg.backbone_channels:
            blocks.append(
                nn.Sequential(nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1), nn.ReLU(inplace=True))
            )
            in_ch = out_ch
        self.backbone = nn.ModuleList(blocks)
        self._tap_stages = [int(math.log2(s)) - 1 for s in cfg.strides]
        self.laterals = nn.ModuleList(
            nn.Conv2d(cfg.backbone_channels[stage], cfg.head_channels, 1) for stage in self._tap_stages
        )
        self.cls_tower = nn.Sequential(
            nn.Conv2d(cfg.head_channels, cfg.head_channels, 3, padding=1), nn.ReLU(inplace=True)
        )
        self.box_tower = nn.Sequential(
            nn.Conv2d(cfg.head_channels, cfg.head_channels, 3, padding=1), nn.ReLU(inplace=True)
        )
        a = cfg.anchors_per_cell
        self.cls_out = nn.Conv2d(cfg.head_channels, a * cfg.num_classes, 3, padding=1)
        self.box_out = nn.Conv2d(cfg.head_channels, a * 4, 3, padding=1)
        # Bias so initial foreground scores sit at the configured prior.
        nn.init.constant_(self.cls_out.bias, -math.log((1.0 - cfg.prior) / cfg.prior))
        nn.init.zeros_(self.box_out.bias)

    def forward(self, x: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
            raise ValueError(
                f"expected (B, 3, {cfg.input_size}, {cfg.input_size}) input, got {tuple(x.shape)}"
            )
        x = x * 2.0 - 1.0
        stage_outputs = []
        for block in self.backbone:
            x = block(x)
            stage_outputs.append(x)
        outputs = []
        a = cfg.anchors_per_cell
        for lateral, stage in zip(self.laterals, self._tap_stages):
            feat = lateral(stage_outputs[stage])
            cls_map = self.cls_out(self.cls_tower(feat))
            box_map = self.box_out(self.box_tower(feat))
            b, _, h, w = cls_map.shape
            probs = torch.sigmoid(
                cls_map.permute(0, 2, 3, 1).reshape(b, h * w * a, cfg.num_classes)
            )
            deltas = box_map.permute(0, 2, 3, 1).reshape(b, h * w * a, 4)
            outputs.append((probs, deltas))
        return outputs


def predict(
    net: DetectorNet,
    image: np.ndarray,
    anchors: AnchorSet | None = None,
    score_threshold: float = 0.05,
    nms_threshold: float = 0.3,
    max_detections: int = 300,
) -> list[Detection]:
    """Run inference on one image and return post-NMS detections.

    image is (S, S, 3) float in [0, 1] where S is the configured input size.
    Scores above score_threshold are decoded against their anchors, clipped to
    the image, suppressed per class, and capped at max_detections.
    """
    cfg = net.config
    if not 0.0 <= score_threshold <= 1.0:
        raise ValueError(f"score_threshold outside [0, 1]: {score_threshold}")
    if not 0.0 <= nms_threshold <= 1.0:
        raise ValueError(f"nms_threshold outside [0, 1]: {nms_threshold}")
    pixels = np.asarray(image, dtype=np.float32)
    if pixels.shape != (cfg.input_size, cfg.input_size, 3):
        raise ValueError(
            f"expected ({cfg.input_size}, {cfg.input_size}, 3) image, got {pixels.shape}"
        )
    if anchors is None:
        anchors = generate_anchors(cfg.input_size, cfg.input_size, cfg.anchor_config)
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            x = torch.from_numpy(np.array(pixels, dtype=np.float32)).permute(2, 0, 1).unsqueeze(0)
            outputs = net(x)
    finally:
        net.train(was_training)
    probs = torch.cat([p for p, _ in outputs], dim=1).squeeze(0).numpy()  # (N, K)
    deltas = torch.cat([d for _, d in outputs], dim=1).squeeze(0).numpy()  # (N, 4)
    anchor_idx, class_idx = np.nonzero(probs > score_threshold)
    if anchor_idx.size == 0:
        return []
    boxes = decode_deltas_array(
        anchors.boxes[anchor_idx], deltas[anchor_idx], image_size=(cfg.input_size, cfg.input_size)
    )
    candidates = []
    for box, a_i, c_i in zip(boxes, anchor_idx, class_idx):
        if box[2] - box[0] <= 0 or box[3] - box[1] <= 0:
            continue
        candidates.append(
            Detection(box=Box.from_array(box), score=float(probs[a_i, c_i]), class_id=int(c_i))
        )
    return nms(candidates, nms_threshold)[:max_detections]


@dataclass
class Checkpoint:
    """A deserialized checkpoint: configs, counters, and tensor states."""

    detector_config: DetectorConfig
    step: int
    learning_rate: float
    model_state: dict
    optimizer_state: dict | None
    train_config: dict | None = None
    stats: dict | None = None

    def build_net(self, seed: int = 0) -> DetectorNet:
        net = DetectorNet(self.detector_config, seed=seed)
        net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.model_state.items()})
        return net


def _tensor_entries(name: str, array: np.ndarray) -> dict:
    return {"name": name, "shape": list(array.shape), "dtype": str(array.dtype)}


def save_checkpoint(
    path: str,
    net: DetectorNet,
    optimizer: torch.optim.Optimizer | None,
    step: int,
    learning_rate: float,
    train_config: dict | None = None,
    stats: dict | None = None,
) -> None:
    """Write net and optimizer state in the deterministic container format."""
    tensors: list[tuple[str, np.ndarray]] = []
    for name, tensor in net.state_dict().items():
        tensors.append((f"model.{name}", tensor.detach().numpy().astype(np.float32)))
    optimizer_header = None
    if optimizer is not None:
        state = optimizer.state_dict()
        steps = {}
        for idx in sorted(state["state"]):
            entry = state["state"][idx]
            steps[str(idx)] = float(entry["step"])
            for key in ("exp_avg", "exp_avg_sq"):
                tensors.append((f"optimizer.{idx}.{key}", entry[key].detach().numpy().astype(np.float32)))
        optimizer_header = {"param_groups": state["param_groups"], "steps": steps}
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "step": int(step),
        "learning_rate": float(learning_rate),
        "detector": net.config.to_dict(),
        "train": train_config,
        "stats": stats,
        "optimizer": optimizer_header,
        "tensors": [_tensor_entries(name, arr) for name, arr in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated checkpoint")
    (header_len,) = struct.unpack("<Q", raw[:8])
    try:
        header = json.loads(raw[8 : 8 + header_len])
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: corrupt checkpoint header: {exc}") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    offset = 8 + header_len
    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * np.dtype(entry["dtype"]).itemsize
        arr = np.frombuffer(raw[offset : offset + nbytes], dtype=entry["dtype"]).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: checkpoint payload length mismatch")
    model_state = {
        name[len("model."):]: arr for name, arr in arrays.items() if name.startswith("model.")
    }
    optimizer_state = None
    if header.get("optimizer") is not None:
        opt = header["optimizer"]
        state = {}
        for key, step_val in opt["steps"].items():
            idx = int(key)
            state[idx] = {
                "step": torch.tensor(float(step_val)),
                "exp_avg": torch.from_numpy(arrays[f"optimizer.{idx}.exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(arrays[f"optimizer.{idx}.exp_avg_sq"].copy()),
            }
        optimizer_state = {"state": state, "param_groups": opt["param_groups"]}
    return Checkpoint(
        detector_config=DetectorConfig.from_dict(header["detector"]),
        step=int(header["step"]),
        learning_rate=float(header["learning_rate"]),
        model_state=model_state,
        optimizer_state=optimizer_state,
        train_config=header.get("train"),
        stats=header.get("stats"),
    )
