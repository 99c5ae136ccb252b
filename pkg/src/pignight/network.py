"""Toy encoder-decoder segmentation networks and their EMA teachers."""

import copy
import io
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT = "pignight-checkpoint/1"


@dataclass(frozen=True)
class ArchDescriptor:
    num_classes: int = 8
    widths: tuple = (16, 32, 64)
    decoder_width: int = 32
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.25, 0.25, 0.25)
    # "instance": per-image channel statistics; "fixed": the mean/std above
    whitening: str = "instance"

    def __post_init__(self):
        if self.whitening not in ("instance", "fixed"):
            raise ValueError(f"unknown whitening {self.whitening!r}")

    @property
    def downsample(self):
        return 2 ** len(self.widths)

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["mean"] = list(self.mean)
        d["std"] = list(self.std)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(num_classes=int(d["num_classes"]), widths=tuple(d["widths"]),
                   decoder_width=int(d["decoder_width"]), mean=tuple(d["mean"]), std=tuple(d["std"]),
                   whitening=d.get("whitening", "instance"))


class SegmentationNetwork(nn.Module):
    """Strided conv encoder, lateral 1x1 decoder with a full-resolution detail path.

    ``forward`` returns per-pixel softmax probabilities at input resolution;
    ``logits`` returns the pre-softmax scores.
    """

    def __init__(self, arch):
        super().__init__()
        self.arch = arch
        self.register_buffer("pixel_mean", torch.tensor(arch.mean).view(1, 3, 1, 1))
        self.register_buffer("pixel_std", torch.tensor(arch.std).view(1, 3, 1, 1))
        stages = []
        in_ch = 3
        for w in arch.widths:
            stages.append(nn.Sequential(
                nn.Conv2d(in_ch, w, 3, stride=2, padding=1), nn.ReLU(),
                nn.Conv2d(w, w, 3, padding=1), nn.ReLU(),
            ))
            in_ch = w
        self.encoder = nn.ModuleList(stages)
        d = arch.decoder_width
        self.decoder = nn.ModuleDict({
            "lateral": nn.ModuleList(nn.Conv2d(w, d, 1) for w in arch.widths),
            "detail": nn.Conv2d(3, d, 3, padding=1),
            "head": nn.Conv2d(d, arch.num_classes, 1),
        })

    def check_extent(self, h, w):
        f = self.arch.downsample
        if h % f or w % f:
            raise ValueError(f"input extent {h}x{w} must be divisible by {f}")

    def whiten(self, x):
        if self.arch.whitening == "instance":
            mean = x.mean(dim=(2, 3), keepdim=True)
            std = x.std(dim=(2, 3), keepdim=True)
            return (x - mean) / (std + 1e-3)
        return (x - self.pixel_mean) / self.pixel_std

    def logits(self, x):
        h, w = x.shape[-2:]
        self.check_extent(h, w)
        x = self.whiten(x)
        fused = self.decoder["detail"](x)
        feat = x
        for stage, lateral in zip(self.encoder, self.decoder["lateral"]):
            feat = stage(feat)
            fused = fused + F.interpolate(lateral(feat), size=(h, w), mode="bilinear", align_corners=False)
        return self.decoder["head"](F.relu(fused))

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)

    def param_groups(self):
        return {"encoder": list(self.encoder.parameters()), "decoder": list(self.decoder.parameters())}


def image_to_tensor(image, dtype=torch.float32):
    """``(H, W, 3)`` array or ``(N, H, W, 3)`` batch to an NCHW tensor."""
    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def forward(net, image):
    """Soft prediction ``(C, H, W)`` for one image, without gradient tracking."""
    if image.ndim != 3:
        raise ValueError(f"expected a single (H, W, 3) image, got shape {image.shape}")
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        probs = net(image_to_tensor(image, dtype))
    return probs[0].numpy()


@dataclass
class BranchPair:
    student: SegmentationNetwork
    teacher: SegmentationNetwork
    alpha: float = 0.999

    def __post_init__(self):
        if self.student.arch != self.teacher.arch:
            raise ValueError("student and teacher architectures differ")
        detach_teacher(self.teacher)


def detach_teacher(teacher):
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    return teacher


def ema_update(pair):
    """teacher <- alpha * teacher + (1 - alpha) * student, elementwise."""
    alpha = float(pair.alpha)
    with torch.no_grad():
        t_params = list(pair.teacher.parameters())
        s_params = list(pair.student.parameters())
        if len(t_params) != len(s_params):
            raise ValueError("teacher and student parameter lists differ in length")
        for t, s in zip(t_params, s_params):
            if t.shape != s.shape:
                raise ValueError(f"parameter shape mismatch {tuple(t.shape)} vs {tuple(s.shape)}")
            t.mul_(alpha).add_(s.detach(), alpha=1.0 - alpha)
        for tb, sb in zip(pair.teacher.buffers(), pair.student.buffers()):
            tb.copy_(sb)
    return pair.teacher


@dataclass
class PigModel:
    arch: ArchDescriptor
    uda: BranchPair
    nfnet: BranchPair | None = None
    seeds: dict = field(default_factory=dict)

    def pairs(self):
        out = {"uda": self.uda}
        if self.nfnet is not None:
            out["nfnet"] = self.nfnet
        return out


def build_network(arch, seed, zero_head=False, dtype=torch.float32):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        net = SegmentationNetwork(arch)
    if zero_head:
        nn.init.zeros_(net.decoder["head"].weight)
        nn.init.zeros_(net.decoder["head"].bias)
    return net.to(dtype)


def _make_pair(arch, seed, alpha, zero_head, dtype):
    student = build_network(arch, seed, zero_head, dtype)
    return BranchPair(student=student, teacher=copy.deepcopy(student), alpha=alpha)


def init_model(arch, seed=0, alpha_uda=0.999, alpha_nf=0.999, with_nfnet=True,
               zero_head=False, dtype=torch.float32):
    """Both branches share ``arch`` but draw initial weights from independent seeds."""
    uda_seed, nf_seed = (int(s) for s in np.random.SeedSequence(int(seed)).generate_state(2))
    uda = _make_pair(arch, uda_seed, alpha_uda, zero_head, dtype)
    nfnet = _make_pair(arch, nf_seed, alpha_nf, zero_head, dtype) if with_nfnet else None
    return PigModel(arch=arch, uda=uda, nfnet=nfnet, seeds={"uda": uda_seed, "nfnet": nf_seed})


def model_state(model):
    state = {"format": CHECKPOINT_FORMAT, "arch": model.arch.to_dict(), "seeds": dict(model.seeds)}
    for name, pair in model.pairs().items():
        state[f"{name}_student"] = pair.student.state_dict()
        state[f"{name}_teacher"] = pair.teacher.state_dict()
        state[f"{name}_alpha"] = pair.alpha
    return state


def model_from_state(state):
    if state.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {state.get('format')!r}")
    arch = ArchDescriptor.from_dict(state["arch"])
    dtype = state["uda_student"]["decoder.head.weight"].dtype
    model = init_model(arch, with_nfnet="nfnet_student" in state, dtype=dtype)
    for name, pair in model.pairs().items():
        pair.student.load_state_dict(state[f"{name}_student"])
        pair.teacher.load_state_dict(state[f"{name}_teacher"])
        pair.alpha = float(state[f"{name}_alpha"])
    model.seeds = dict(state.get("seeds", {}))
    return model


def save_checkpoint(path, state):
    """Write ``state`` (a dict built on :func:`model_state`) as one archive."""
    buf = io.BytesIO()
    torch.save(state, buf)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {state.get('format')!r}")
    return state


def count_parameters(net):
    return sum(p.numel() for p in net.parameters())
