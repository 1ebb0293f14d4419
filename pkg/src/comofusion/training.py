"""Consistency training of the backbone and loss-driven training of the fusion head."""
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .errors import ValidationError
from .imgcore import GrayImage, concat_pair, list_images, load_gray, random_crop_pair, to_model_range
from .nets import ConsistencyNetwork, extract_features
from .schedule import add_noise, consistency_apply

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- configs
@dataclass
class CMTrainConfig:
    distance: object = "pseudo_huber"  # "pseudo_huber" | "l2" | callable(a, b) -> per-sample tensor
    huber_c: float = None  # None: 0.00054 * sqrt(C*H*W)
    weighting: object = "uniform"  # "uniform" | callable(t) -> weight
    ema_mu: float = 0.95
    batch_size: int = 15
    crop: int = 160
    steps: int = 1000
    lr: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 0
    widths: tuple = (16, 32, 64)

    def __post_init__(self):
        if not 0.0 <= self.ema_mu < 1.0:
            raise ValidationError(f"ema_mu must lie in [0, 1), got {self.ema_mu}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if isinstance(self.distance, str) and self.distance not in DISTANCES:
            raise ValidationError(f"unknown distance {self.distance!r}; choose from {sorted(DISTANCES)}")
        self.widths = tuple(self.widths)

    def to_dict(self):
        d = asdict(self)
        for key in ("distance", "weighting"):
            if callable(d[key]):
                d[key] = getattr(d[key], "__name__", "custom")
        d["widths"] = list(self.widths)
        return d


@dataclass
class FusionTrainConfig:
    lambda_tradeoff: float = 1.0
    epsilon_div: float = 1e-8
    batch_size: int = 15
    lr: float = 1e-4
    epochs: int = 2
    crop: int = 160
    seed: int = 0
    feature_source: str = "encoder"

    def __post_init__(self):
        if self.lambda_tradeoff < 0:
            raise ValidationError(f"lambda_tradeoff must be >= 0, got {self.lambda_tradeoff}")
        if self.epsilon_div <= 0:
            raise ValidationError(f"epsilon_div must be > 0, got {self.epsilon_div}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.feature_source not in ("encoder", "decoder"):
            raise ValidationError(f"feature_source must be encoder|decoder, got {self.feature_source!r}")

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- data
@dataclass(eq=False)
class ImagePair:
    name: str
    ir: GrayImage
    vis: GrayImage


def match_names(a_dir, b_dir):
    """Return (sorted common names, names only in a, names only in b)."""
    a, b = list_images(a_dir), list_images(b_dir)
    common = sorted(a.keys() & b.keys())
    return common, sorted(a.keys() - b.keys()), sorted(b.keys() - a.keys())


def load_pairs(ir_dir, vis_dir):
    """Load registered pairs that share a filename across the two directories."""
    common, only_ir, only_vis = match_names(ir_dir, vis_dir)
    if only_ir or only_vis:
        raise ValidationError(f"unpaired files: ir-only {only_ir}, vis-only {only_vis}")
    if not common:
        raise ValidationError(f"no image pairs found in {ir_dir} and {vis_dir}")
    pairs = []
    for name in common:
        ir = load_gray(Path(ir_dir) / name)
        vis = load_gray(Path(vis_dir) / name)
        if ir.shape != vis.shape:
            raise ValidationError(f"{name}: ir {ir.shape} and vis {vis.shape} differ in size")
        pairs.append(ImagePair(name, ir, vis))
    return pairs


def make_batch(pairs, indices, crop, rng):
    """Stack cropped (ir, vis) pairs into a float32 (B, 2, crop, crop) tensor in model range."""
    rows = []
    for k in indices:
        p = pairs[int(k)]
        ir, vis = random_crop_pair(p.ir, p.vis, crop, int(rng.integers(2**63)))
        rows.append(concat_pair(to_model_range(ir), to_model_range(vis)).data)
    return torch.from_numpy(np.stack(rows).astype(np.float32))


# ---------------------------------------------------------------- stage 1
def squared_l2(a, b):
    """Per-sample mean squared difference."""
    return ((a - b) ** 2).flatten(1).mean(1)


def pseudo_huber(a, b, c=None):
    """Per-sample sqrt(||a - b||^2 + c^2) - c."""
    if c is None:
        c = 0.00054 * math.sqrt(a[0].numel())
    return torch.sqrt(((a - b) ** 2).flatten(1).sum(1) + c * c) - c


DISTANCES = {"l2": squared_l2, "pseudo_huber": pseudo_huber}


def _distance(cfg):
    if callable(cfg.distance):
        return cfg.distance
    if cfg.distance == "pseudo_huber":
        return lambda a, b: pseudo_huber(a, b, cfg.huber_c)
    return DISTANCES[cfg.distance]


def _weights(cfg, t, like):
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (like.shape[0],))
    if callable(cfg.weighting):
        w = np.asarray([cfg.weighting(float(v)) for v in t], dtype=np.float64)
    elif cfg.weighting == "uniform":
        w = np.ones_like(t)
    else:
        raise ValidationError(f"unknown weighting {cfg.weighting!r}")
    return torch.as_tensor(w, dtype=like.dtype, device=like.device)


def consistency_loss(theta_net, ema_net, x0, schedule, i, z, cfg, denoiser=consistency_apply):
    """lambda(t_i) * d(D_theta(x_{t_{i+1}}, t_{i+1}), D_ema(x_{t_i}, t_i)), averaged over the batch.

    ``i`` is 1-based (scalar or one per batch row) and must leave room for
    i + 1. Both noised points share ``z``. The EMA branch runs without
    gradient tracking.
    """
    idx = np.asarray(i)
    if np.any(idx < 1) or np.any(idx > schedule.N - 1):
        raise ValidationError(f"index {i} outside 1..{schedule.N - 1}")
    nxt = add_noise(x0, schedule, idx + 1, z)
    cur = add_noise(x0, schedule, idx, z)
    pred = denoiser(theta_net, nxt.x_t, nxt.t, schedule)
    with torch.no_grad():
        target = denoiser(ema_net, cur.x_t, cur.t, schedule)
    d = _distance(cfg)(pred, target)
    return (_weights(cfg, cur.t, x0) * d).mean()


def ema_update(ema_net, theta_net, mu):
    """In place: p_ema <- mu * p_ema + (1 - mu) * p."""
    if not 0.0 <= mu < 1.0:
        raise ValidationError(f"mu must lie in [0, 1), got {mu}")
    ema_params = dict(ema_net.named_parameters())
    params = dict(theta_net.named_parameters())
    if ema_params.keys() != params.keys():
        raise ValidationError("parameter names differ between EMA and online networks")
    with torch.no_grad():
        for name, p in params.items():
            pe = ema_params[name]
            if pe.shape != p.shape:
                raise ValidationError(f"shape mismatch for {name}: {tuple(pe.shape)} vs {tuple(p.shape)}")
            if mu == 0.0:
                pe.copy_(p)
            else:
                pe.mul_(mu).add_(p, alpha=1.0 - mu)
        for be, b in zip(ema_net.buffers(), theta_net.buffers()):
            be.copy_(b)
    return ema_net


@dataclass(eq=False)
class CMTrainResult:
    net: ConsistencyNetwork
    ema: ConsistencyNetwork
    optimizer: torch.optim.Optimizer
    history: list = field(default_factory=list)
    rng: np.random.Generator = None

    @property
    def step(self):
        return len(self.history)


def _new_cm(cfg, schedule):
    torch.manual_seed(cfg.seed)
    net = ConsistencyNetwork(cfg.widths, sigma_data=schedule.sigma_data)
    ema = ConsistencyNetwork(cfg.widths, sigma_data=schedule.sigma_data)
    ema.load_state_dict(net.state_dict())
    ema.requires_grad_(False)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    return net, ema, opt


def save_cm(path, result, cfg, schedule):
    opt_tensors, opt_info = ckpt.pack_optimizer(result.optimizer)
    tensors = {
        **ckpt.prefixed(result.net.state_dict(), "theta"),
        **ckpt.prefixed(result.ema.state_dict(), "ema"),
        **opt_tensors,
        "history.loss": torch.tensor(result.history, dtype=torch.float64),
    }
    meta = {
        "stage": "cm",
        "schedule": schedule.params(),
        "widths": list(cfg.widths),
        "feature_source": None,
        "step": result.step,
        "rng_state": result.rng.bit_generator.state,
        "optimizer": opt_info,
        "config": cfg.to_dict(),
    }
    ckpt.save_checkpoint(path, tensors, meta)


def load_cm(path, cfg=None):
    """Rebuild a CMTrainResult from a stage-1 checkpoint.

    Returns (result, meta). ``cfg`` supplies the learning rate for the
    restored optimizer; the checkpointed config is used when omitted.
    """
    tensors, meta = ckpt.load_checkpoint(path)
    if meta["stage"] != "cm":
        raise ckpt.CheckpointError(f"{path} is a {meta['stage']!r} checkpoint, expected 'cm'")
    widths = tuple(meta["widths"])
    sigma = meta["schedule"]["sigma_data"]
    net = ConsistencyNetwork(widths, sigma_data=sigma)
    ema = ConsistencyNetwork(widths, sigma_data=sigma)
    net.load_state_dict(ckpt.unprefixed(tensors, "theta"))
    ema.load_state_dict(ckpt.unprefixed(tensors, "ema"))
    ema.requires_grad_(False)
    lr = cfg.lr if cfg is not None else meta["config"]["lr"]
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    ckpt.unpack_optimizer(opt, tensors, meta["optimizer"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    history = tensors["history.loss"].tolist()
    return CMTrainResult(net, ema, opt, history, rng), meta


def train_consistency(pairs, cfg, schedule, checkpoint_dir=None, resume=None, callback=None):
    """Run consistency training until ``cfg.steps`` total steps.

    Each step draws a batch of cropped pairs, one level index per sample
    from {1, ..., N-1} and a Gaussian ``z``, takes an Adam step on the
    online network and then moves the EMA target. ``resume`` is a
    CMTrainResult (see :func:`load_cm`) to continue from.
    """
    if not pairs:
        raise ValidationError("empty dataset")
    if resume is None:
        net, ema, opt = _new_cm(cfg, schedule)
        state = CMTrainResult(net, ema, opt, [], np.random.default_rng(cfg.seed))
    else:
        state = resume
    net, ema, opt, rng = state.net, state.ema, state.optimizer, state.rng
    net.train()
    while state.step < cfg.steps:
        idx = rng.integers(0, len(pairs), size=cfg.batch_size)
        x0 = make_batch(pairs, idx, cfg.crop, rng)
        levels = rng.integers(1, schedule.N, size=cfg.batch_size)
        z = torch.from_numpy(rng.standard_normal(x0.shape).astype(np.float32))
        loss = consistency_loss(net, ema, x0, schedule, levels, z, cfg)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        ema_update(ema, net, cfg.ema_mu)
        state.history.append(loss.item())
        step = state.step
        if callback is not None:
            callback(step, state.history[-1])
        if step % 50 == 0:
            log.info("cm step %d loss %.5f", step, state.history[-1])
        if checkpoint_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_cm(Path(checkpoint_dir) / f"cm_step{step:06d}.safetensors", state, cfg, schedule)
    return state


# ---------------------------------------------------------------- stage 2
def _tensor(x):
    if isinstance(x, GrayImage):
        x = x.data
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.array(x, dtype=np.float64))
    return x


def sobel_torch(x):
    """Replicate-padded Sobel (gx, gy) for a (..., H, W) tensor, differentiable."""
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    p = F.pad(x.reshape(-1, 1, h, w), (1, 1, 1, 1), mode="replicate")[:, 0]
    tl, tc, tr = p[:, :h, :w], p[:, :h, 1:w + 1], p[:, :h, 2:]
    ml, mr = p[:, 1:h + 1, :w], p[:, 1:h + 1, 2:]
    bl, bc, br = p[:, 2:, :w], p[:, 2:, 1:w + 1], p[:, 2:, 2:]
    gx = (tr - tl) + 2.0 * (mr - ml) + (br - bl)
    gy = (bl - tl) + 2.0 * (bc - tc) + (br - tr)
    return gx.reshape(*lead, h, w), gy.reshape(*lead, h, w)


def gradient_energy_torch(x):
    gx, gy = sobel_torch(x)
    return (gx * gx + gy * gy).mean(dim=(-2, -1))


def _safe_magnitude(gx, gy):
    sq = gx * gx + gy * gy
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def _check_shapes(*xs):
    shapes = {tuple(x.shape) for x in xs}
    if len(shapes) != 1:
        raise ValidationError(f"shape mismatch: {sorted(shapes)}")


def redundant_image(vis, ir, fused):
    """vis + ir - fused. GrayImage inputs must share a range tag and give an ndarray back."""
    if all(isinstance(x, GrayImage) for x in (vis, ir, fused)):
        if len({vis.range_tag, ir.range_tag, fused.range_tag}) != 1:
            raise ValidationError("redundant_image inputs must share one range_tag")
        _check_shapes(vis.data, ir.data, fused.data)
        return vis.data + ir.data - fused.data
    vis, ir, fused = _tensor(vis), _tensor(ir), _tensor(fused)
    _check_shapes(vis, ir, fused)
    return vis + ir - fused


def pvs_loss(vis, ir, fused, epsilon_div=1e-8):
    """g(I_r) / (g(I_f) + epsilon_div), averaged over any leading batch dims."""
    vis, ir, fused = _tensor(vis), _tensor(ir), _tensor(fused)
    g_r = gradient_energy_torch(redundant_image(vis, ir, fused))
    g_f = gradient_energy_torch(fused)
    return (g_r / (g_f + epsilon_div)).mean()


def grad_loss(vis, ir, fused):
    """Mean |mag(grad I_f) - max(mag(grad I_vis), mag(grad I_ir))|."""
    vis, ir, fused = _tensor(vis), _tensor(ir), _tensor(fused)
    _check_shapes(vis, ir, fused)
    target = torch.maximum(_safe_magnitude(*sobel_torch(vis)), _safe_magnitude(*sobel_torch(ir)))
    return (_safe_magnitude(*sobel_torch(fused)) - target).abs().mean()


def fusion_total_loss(vis, ir, fused, cfg=None):
    cfg = cfg or FusionTrainConfig()
    return pvs_loss(vis, ir, fused, cfg.epsilon_div) + cfg.lambda_tradeoff * grad_loss(vis, ir, fused)


def _unit(x):
    return (x + 1.0) / 2.0


@dataclass(eq=False)
class FusionTrainResult:
    head: torch.nn.Module
    history: list = field(default_factory=list)


def train_fusion(pairs, cm, head, cfg, schedule, callback=None):
    """Train ``head`` on features of the frozen ``cm`` for ``cfg.epochs`` epochs.

    Losses are computed on unit-range images. The backbone's parameters are
    never handed to the optimizer and receive no gradient.
    """
    if not pairs:
        raise ValidationError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    flags = [p.requires_grad for p in cm.parameters()]
    cm.requires_grad_(False)
    cm.eval()
    head.train()
    opt = torch.optim.Adam(head.parameters(), lr=cfg.lr)
    result = FusionTrainResult(head)
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(pairs))
            for start in range(0, len(order), cfg.batch_size):
                x0 = make_batch(pairs, order[start:start + cfg.batch_size], cfg.crop, rng)
                feats = extract_features(cm, x0, schedule, cfg.feature_source)
                fused = _unit(head(feats))
                ir, vis = _unit(x0[:, :1]), _unit(x0[:, 1:])
                loss = fusion_total_loss(vis, ir, fused, cfg)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                result.history.append(loss.item())
                if callback is not None:
                    callback(len(result.history), result.history[-1])
            log.info("fusion epoch %d loss %.5f", epoch + 1, result.history[-1])
    finally:
        for p, f in zip(cm.parameters(), flags):
            p.requires_grad_(f)
    return result


def fusion_stats(pairs, cm, head, schedule, source="encoder", chunk=64, epsilon_div=1e-8):
    """Mean g(I_f), mean g(I_r) and mean L_pvs over full-size pairs (unit range).

    Pairs of equal size are pushed through the networks ``chunk`` at a time.
    """
    by_shape = {}
    for p in pairs:
        by_shape.setdefault(p.ir.shape, []).append(p)
    g_f, g_r, pvs = [], [], []
    with torch.no_grad():
        for group in by_shape.values():
            for start in range(0, len(group), chunk):
                part = group[start:start + chunk]
                x0 = torch.from_numpy(np.stack([
                    concat_pair(to_model_range(p.ir), to_model_range(p.vis)).data for p in part
                ]).astype(np.float32))
                fused = _unit(head(extract_features(cm, x0, schedule, source)))[:, 0].double()
                ir = torch.from_numpy(np.stack([p.ir.data for p in part]))
                vis = torch.from_numpy(np.stack([p.vis.data for p in part]))
                gf = gradient_energy_torch(fused)
                gr = gradient_energy_torch(redundant_image(vis, ir, fused))
                g_f.extend(gf.tolist())
                g_r.extend(gr.tolist())
                pvs.extend((gr / (gf + epsilon_div)).tolist())
    return {"mean_g_fused": float(np.mean(g_f)), "mean_g_redundant": float(np.mean(g_r)),
            "mean_pvs": float(np.mean(pvs))}
