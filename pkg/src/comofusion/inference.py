"""One-pass fusion of a registered pair and loading of trained stages."""
import time

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .errors import CheckpointError, ValidationError
from .imgcore import GrayImage, concat_pair, to_model_range
from .nets import ConsistencyNetwork, FusionNetwork, extract_features
from .schedule import make_schedule


def save_fusion(path, head, cfg, schedule, cm_meta, history):
    meta = {
        "stage": "fusion",
        "schedule": schedule.params(),
        "widths": list(head.widths),
        "feature_source": cfg.feature_source,
        "cm_widths": cm_meta["widths"],
        "config": cfg.to_dict(),
        "steps": len(history),
    }
    tensors = {**ckpt.prefixed(head.state_dict(), "head"),
               "history.loss": torch.tensor(history, dtype=torch.float64)}
    ckpt.save_checkpoint(path, tensors, meta)


def load_backbone(path):
    """Online-network weights of a stage-1 checkpoint plus its schedule."""
    tensors, meta = ckpt.load_checkpoint(path)
    if meta["stage"] != "cm":
        raise CheckpointError(f"{path} is a {meta['stage']!r} checkpoint, expected 'cm'")
    schedule = make_schedule(**meta["schedule"])
    net = ConsistencyNetwork(tuple(meta["widths"]), sigma_data=schedule.sigma_data)
    net.load_state_dict(ckpt.unprefixed(tensors, "theta"))
    net.requires_grad_(False).eval()
    return net, schedule, meta


def load_head(path):
    tensors, meta = ckpt.load_checkpoint(path)
    if meta["stage"] != "fusion":
        raise CheckpointError(f"{path} is a {meta['stage']!r} checkpoint, expected 'fusion'")
    head = FusionNetwork(tuple(meta["widths"]))
    head.load_state_dict(ckpt.unprefixed(tensors, "head"))
    head.eval()
    return head, meta


def fuse_pair(cm, head, ir, vis, schedule, source="encoder"):
    """Fuse one pair; returns (unit-range GrayImage, seconds spent in the forward pass).

    Sizes not divisible by 4 are reflect-padded up to the next multiple and
    the output is cropped back.
    """
    if ir.shape != vis.shape:
        raise ValidationError(f"pair size mismatch: ir {ir.shape} vs vis {vis.shape}")
    h, w = ir.shape
    x0 = torch.from_numpy(concat_pair(to_model_range(ir), to_model_range(vis)).data[None].astype(np.float32))
    ph, pw = (-h) % 4, (-w) % 4
    if ph or pw:
        if ph >= h or pw >= w:
            raise ValidationError(f"image {h}x{w} too small to reflect-pad")
        x0 = F.pad(x0, (0, pw, 0, ph), mode="reflect")
    start = time.perf_counter()
    with torch.no_grad():
        out = head(extract_features(cm, x0, schedule, source))
    elapsed = time.perf_counter() - start
    fused = (out[0, 0, :h, :w].double().numpy() + 1.0) / 2.0
    return GrayImage(np.clip(fused, 0.0, 1.0), "unit"), elapsed
