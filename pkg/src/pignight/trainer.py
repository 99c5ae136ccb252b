"""Dual-branch training loop.

One step: teacher predictions on the night image, class ranking, label
fusion, class mixing for the UDA branch, prompt mixing and alternating
masks for the night branch, the weighted loss, one optimizer step per
student and EMA updates of both teachers.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from pignight import augment, config as configlib, kernels
from pignight.datamodel import (
    Domain, DomainSample, load_dataset, resize_image, resize_label, small_object_ids,
)
from pignight.fusion import FusionConfig, fuse
from pignight.losses import (
    LossWeights, augment_loss, prompt_loss, total_loss, uda_loss, valid_pixels,
)
from pignight.network import (
    ArchDescriptor, ema_update, image_to_tensor, init_model, load_checkpoint,
    model_from_state, model_state, save_checkpoint,
)
from pignight.similarity import ClassRanking, SimilarityBackend, rank_classes

log = logging.getLogger(__name__)

STREAMS = ("source", "target", "prompt", "pms", "mask", "cdm_uda", "cdm_nf")
NF_MIX_MODES = ("pms", "cdm", "none")


class TrainingAborted(RuntimeError):
    def __init__(self, iteration, stage, cause):
        super().__init__(f"training aborted at iteration {iteration} during {stage}: {cause}")
        self.iteration = iteration
        self.stage = stage


def _key(name):
    return field(default=None, metadata={"key": name})


@dataclass
class TrainConfig:
    """Training configuration; desk-scale defaults.

    Values used at benchmark scale: 40k iterations, batch 2, AdamW with
    6e-5 (encoder) / 6e-4 (decoder), EMA 0.999, k=4, r=0.7, beta=0.5.
    """

    source_dir: str | None = _key("data.source")
    target_dir: str | None = _key("data.target")
    prompt_dir: str | None = _key("data.prompt")
    eval_dir: str | None = _key("data.eval")
    eval_label_dir: str = field(default="hidden_labels", metadata={"key": "data.eval_labels"})
    num_classes: int = field(default=8, metadata={"key": "data.num_classes"})
    max_prompt: int = field(default=10, metadata={"key": "data.max_prompt"})
    resize_kernel: str = field(default="bilinear", metadata={"key": "data.resize_kernel"})
    train_size: int = field(default=0, metadata={"key": "data.train_size"})

    iterations: int = 500
    batch_size: int = 1
    seed: int = 0
    widths: tuple[int, ...] = (16, 32, 64)
    decoder_width: int = 32

    uda_optimizer: str = "adamw"
    nf_optimizer: str = "adamw"
    lr_encoder: float = 1e-3
    lr_decoder: float = 1e-2
    nf_lr_encoder: float = 1e-3
    nf_lr_decoder: float = 1e-2
    sgd_lr: float = 2.5e-3
    momentum: float = 0.9
    weight_decay: float = 0.01
    warmup_iters: int = 20

    ema_alpha_uda: float = 0.99
    ema_alpha_nf: float = 0.99

    k: int = 4
    small_classes: str = "auto"
    confidence_threshold: float = 0.968

    patch_h: int = 16
    patch_w: int = 16
    mask_ratio: float = 0.7
    beta: float = 0.5
    ams_literal: bool = False
    mask_fill: float = 0.0

    lambda_uda: float = 1.0
    lambda_prompt: float = 1.0
    lambda_augment: float = 1.0

    similarity: str = "perceptual"
    ssim_window: int = 11
    feature_seed: int = 0

    use_nfnet: bool = True
    use_prompt: bool = True
    nf_mix: str = "pms"
    use_ams: bool = True
    uda_mix: bool = True

    checkpoint_every: int = 100
    debug: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("lr_encoder", "lr_decoder", "nf_lr_encoder", "nf_lr_decoder", "sgd_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.nf_mix not in NF_MIX_MODES:
            raise ValueError(f"nf_mix must be one of {NF_MIX_MODES}")
        if not self.use_prompt and self.nf_mix != "none":
            raise ValueError("nf_mix requires prompt images; set nf_mix = none when use_prompt is false")
        for name in ("uda_optimizer", "nf_optimizer"):
            if getattr(self, name) not in ("adamw", "sgd"):
                raise ValueError(f"{name} must be adamw or sgd")

    @property
    def weights(self):
        return LossWeights(self.lambda_uda, self.lambda_prompt, self.lambda_augment)

    @property
    def schedule(self):
        return augment.AlternationSchedule(beta=self.beta, literal=self.ams_literal)

    @property
    def arch(self):
        return ArchDescriptor(num_classes=self.num_classes, widths=tuple(self.widths),
                              decoder_width=self.decoder_width)

    def backend(self):
        return SimilarityBackend(kind=self.similarity, window_size=self.ssim_window,
                                 feature_seed=self.feature_seed)

    def resolve_small_classes(self, class_names):
        spec = self.small_classes.strip().lower()
        if spec == "auto":
            return frozenset(small_object_ids(class_names))
        if spec in ("", "none"):
            return frozenset()
        out = set()
        for part in self.small_classes.split(","):
            part = part.strip()
            if part.isdigit():
                out.add(int(part))
            elif part in class_names:
                out.add(class_names.index(part))
            else:
                raise ValueError(f"unknown small-object class {part!r}")
        return frozenset(out)


def warmup_lr(t, base_lr, warmup_iters):
    """Linear warmup: ``base_lr * t / warmup_iters`` until ``warmup_iters``, then flat."""
    if warmup_iters <= 0 or t >= warmup_iters:
        return base_lr
    return base_lr * max(t, 0) / warmup_iters


# --- sampling ----------------------------------------------------------------

class CyclicSampler:
    """Shuffled passes over ``range(n)``; reshuffles when a pass is exhausted."""

    def __init__(self, n, rng):
        if n < 1:
            raise ValueError("cannot sample from an empty dataset")
        self.n = n
        self.rng = rng
        self.order = []
        self.pos = 0

    def next(self):
        if self.pos >= len(self.order):
            self.order = [int(i) for i in self.rng.permutation(self.n)]
            self.pos = 0
        i = self.order[self.pos]
        self.pos += 1
        return i

    def state(self):
        return {"order": list(self.order), "pos": self.pos}

    def load(self, state):
        self.order = list(state["order"])
        self.pos = int(state["pos"])


class SampleCache:
    """Decoded samples of one manifest, optionally resized to a square size."""

    def __init__(self, manifest, size=0, kernel="bilinear"):
        self.manifest = manifest
        self.size = size
        self.kernel = kernel
        self._cache = {}

    def __len__(self):
        return len(self.manifest)

    def get(self, i):
        if i not in self._cache:
            s = self.manifest.sample(i)
            if self.size:
                image = resize_image(s.image, (self.size, self.size), self.kernel)
                label = None if s.label is None else resize_label(s.label, (self.size, self.size))
                s = DomainSample(image=image, label=label, domain=s.domain, name=s.name)
            self._cache[i] = s
        return self._cache[i]


# --- state -------------------------------------------------------------------

def make_streams(seed):
    return {name: np.random.default_rng([int(seed), i]) for i, name in enumerate(STREAMS)}


def _optimizer(kind, net, lr_enc, lr_dec, cfg):
    groups = net.param_groups()
    if kind == "sgd":
        params = [{"params": groups["encoder"], "lr": cfg.sgd_lr, "base_lr": cfg.sgd_lr},
                  {"params": groups["decoder"], "lr": cfg.sgd_lr, "base_lr": cfg.sgd_lr}]
        return torch.optim.SGD(params, lr=cfg.sgd_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    params = [{"params": groups["encoder"], "lr": lr_enc, "base_lr": lr_enc},
              {"params": groups["decoder"], "lr": lr_dec, "base_lr": lr_dec}]
    return torch.optim.AdamW(params, lr=lr_enc, weight_decay=cfg.weight_decay)


@dataclass
class TrainState:
    config: TrainConfig
    model: object
    optimizers: dict
    streams: dict
    samplers: dict = field(default_factory=dict)
    t: int = 0
    metrics: list = field(default_factory=list)

    def rng_states(self):
        return {name: rng.bit_generator.state for name, rng in self.streams.items()}


def init_state(cfg, sampler_sizes=None):
    model = init_model(cfg.arch, seed=cfg.seed, alpha_uda=cfg.ema_alpha_uda,
                       alpha_nf=cfg.ema_alpha_nf, with_nfnet=cfg.use_nfnet)
    optimizers = {"uda": _optimizer(cfg.uda_optimizer, model.uda.student, cfg.lr_encoder, cfg.lr_decoder, cfg)}
    if model.nfnet is not None:
        optimizers["nfnet"] = _optimizer(cfg.nf_optimizer, model.nfnet.student,
                                         cfg.nf_lr_encoder, cfg.nf_lr_decoder, cfg)
    streams = make_streams(cfg.seed)
    state = TrainState(config=cfg, model=model, optimizers=optimizers, streams=streams)
    for name, n in (sampler_sizes or {}).items():
        state.samplers[name] = CyclicSampler(n, streams[name])
    return state


def state_dict(state):
    out = model_state(state.model)
    out["iteration"] = state.t
    out["optimizers"] = {name: opt.state_dict() for name, opt in state.optimizers.items()}
    out["rng"] = state.rng_states()
    out["samplers"] = {name: s.state() for name, s in state.samplers.items()}
    out["config"] = configlib.dump(state.config)
    return out


def restore_state(cfg, saved, sampler_sizes=None):
    state = init_state(cfg, sampler_sizes)
    restored = model_from_state(saved)
    if (restored.nfnet is None) != (state.model.nfnet is None):
        raise ValueError("checkpoint and config disagree on whether the night branch exists")
    state.model = restored
    for name, opt in list(state.optimizers.items()):
        pair = restored.pairs()[name]
        kind = cfg.uda_optimizer if name == "uda" else cfg.nf_optimizer
        lrs = (cfg.lr_encoder, cfg.lr_decoder) if name == "uda" else (cfg.nf_lr_encoder, cfg.nf_lr_decoder)
        new_opt = _optimizer(kind, pair.student, lrs[0], lrs[1], cfg)
        new_opt.load_state_dict(saved["optimizers"][name])
        state.optimizers[name] = new_opt
    for name, rng_state in saved["rng"].items():
        state.streams[name].bit_generator.state = rng_state
    for name, s_state in saved["samplers"].items():
        if name in state.samplers:
            state.samplers[name].load(s_state)
    state.t = int(saved["iteration"])
    return state


# --- one step ----------------------------------------------------------------

@dataclass
class StepPlan:
    """Everything a step feeds into the losses, fixed before any gradient work."""

    x_s: np.ndarray
    y_s: np.ndarray
    x_mix: np.ndarray | None
    y_mix: np.ndarray | None
    w_mix: np.ndarray | None
    x_p: np.ndarray | None
    y_p: np.ndarray | None
    x_a: np.ndarray | None
    y_a: np.ndarray | None
    w_a: np.ndarray | None
    mask_applied: bool
    topk: list
    fusion_ok: bool
    nf_pixels: int
    fused: list


def _teacher_probs(net, images):
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        return net(image_to_tensor(np.stack(images), dtype)).double().numpy()


def _check_domains(day, night, prompt):
    for s in day:
        if s.domain is not Domain.SOURCE_DAY:
            raise ValueError(f"expected SOURCE_DAY sample, got {s.domain.value}")
    for s in night:
        if s.domain is not Domain.TARGET_NIGHT:
            raise ValueError(f"expected TARGET_NIGHT sample, got {s.domain.value}")
    for s in prompt:
        if s.domain is not Domain.PROMPT_NIGHT:
            raise ValueError(f"expected PROMPT_NIGHT sample, got {s.domain.value}")


def plan_step(state, day, night, prompt, small_classes):
    """Teacher predictions, ranking, fusion and augmentation for one step."""
    cfg = state.config
    model = state.model
    streams = state.streams
    day, night, prompt = list(day), list(night), list(prompt or [])
    try:
        _check_domains(day, night, prompt)
    except ValueError as exc:
        raise TrainingAborted(state.t, "input check", exc) from exc
    nf_enabled = model.nfnet is not None
    fusion_cfg = FusionConfig(k=cfg.k if nf_enabled else 0, small_classes=small_classes,
                              confidence_threshold=cfg.confidence_threshold)
    backend = cfg.backend()
    schedule = cfg.schedule

    stage = "teacher prediction"
    x_t = [s.image for s in night]
    uda_probs = _teacher_probs(model.uda.teacher, x_t)
    nf_probs = _teacher_probs(model.nfnet.teacher, x_t) if nf_enabled else uda_probs

    fused_list, topk, fusion_ok, nf_pixels = [], [], True, 0
    x_mix, y_mix, w_mix, x_a, y_a, w_a = [], [], [], [], [], []
    mask_applied = schedule.applies(state.t) if cfg.use_ams else False
    try:
        for i, (src, tgt) in enumerate(zip(day, night)):
            stage = "class ranking"
            if fusion_cfg.k > 0:
                ranking = rank_classes(src.image, src.label, tgt.image, backend)
            else:
                ranking = ClassRanking(entries=())
            stage = "fusion"
            fused = fuse(uda_probs[i], nf_probs[i], ranking, fusion_cfg)
            fused_list.append(fused)
            topk.append(sorted(fused.selected))
            # instrumentation: pixels routed to the night branch carry its argmax
            nf_arg = np.argmax(nf_probs[i], axis=0)
            sel = fused.fusion_mask == 1
            fusion_ok &= bool(np.array_equal(fused.label[sel], nf_arg[sel]))
            nf_pixels += int(sel.sum())

            stage = "class mixing"
            if cfg.uda_mix:
                img, lab, m = augment.cross_domain_mix(src.image, src.label, tgt.image, fused.label,
                                                       streams["cdm_uda"], return_mask=True)
                x_mix.append(img)
                y_mix.append(lab)
                w_mix.append(np.where(m == 1, 1.0, fused.weight))

            if nf_enabled:
                stage = "prompt mixing"
                p = prompt[i] if prompt else None
                provenance = np.full(tgt.image.shape[:2], Domain.TARGET_NIGHT.value, dtype=object)
                if cfg.nf_mix == "pms":
                    res = augment.prompt_mixture(p.image, tgt.image, streams["pms"])
                    x_nf = res.image
                    y_nf = augment.mix_labels(p.label, fused.label, res.mask)
                    w_nf = augment.mix_weights(res.mask, fused.weight)
                    nf_source_mask = res.mask
                elif cfg.nf_mix == "cdm":
                    x_nf, y_nf, m = augment.cross_domain_mix(p.image, p.label, tgt.image, fused.label,
                                                             streams["cdm_nf"], return_mask=True)
                    w_nf = np.where(m == 1, 1.0, fused.weight)
                    nf_source_mask = m
                else:
                    x_nf, y_nf, w_nf = tgt.image, fused.label, fused.weight
                    nf_source_mask = None
                if cfg.debug:
                    if nf_source_mask is not None:
                        provenance[nf_source_mask == 1] = Domain.PROMPT_NIGHT.value
                    allowed = {Domain.TARGET_NIGHT.value, Domain.PROMPT_NIGHT.value}
                    if not set(np.unique(provenance)) <= allowed:
                        raise AssertionError("day-time pixels reached the night branch")

                stage = "alternate mask"
                spec = augment.PatchMaskSpec(cfg.patch_h, cfg.patch_w, cfg.mask_ratio,
                                             seed=int(streams["mask"].integers(0, 2**63 - 1)))
                if cfg.use_ams:
                    m_a = augment.patch_mask(x_nf.shape[0], x_nf.shape[1], spec)
                    x_nf = augment.alternate_apply(x_nf, m_a, state.t, schedule, fill=cfg.mask_fill)
                x_a.append(x_nf)
                y_a.append(y_nf)
                w_a.append(w_nf)
    except Exception as exc:
        raise TrainingAborted(state.t, stage, exc) from exc

    stack = lambda xs: np.stack(xs) if xs else None  # noqa: E731
    return StepPlan(
        x_s=np.stack([s.image for s in day]), y_s=np.stack([s.label for s in day]),
        x_mix=stack(x_mix), y_mix=stack(y_mix), w_mix=stack(w_mix),
        x_p=stack([p.image for p in prompt]) if (nf_enabled and cfg.use_prompt) else None,
        y_p=stack([p.label for p in prompt]) if (nf_enabled and cfg.use_prompt) else None,
        x_a=stack(x_a), y_a=stack(y_a), w_a=stack(w_a),
        mask_applied=bool(mask_applied and nf_enabled), topk=topk, fusion_ok=fusion_ok,
        nf_pixels=nf_pixels, fused=fused_list,
    )


def compute_losses(model, plan, weights):
    """The weighted loss of a planned step as a differentiable report."""
    dtype = next(model.uda.student.parameters()).dtype
    to_t = lambda a: image_to_tensor(a, dtype)  # noqa: E731
    mixed = None
    if plan.x_mix is not None:
        mixed = (to_t(plan.x_mix), plan.y_mix, plan.w_mix)
    l_uda = uda_loss(model.uda.student, (to_t(plan.x_s), plan.y_s), mixed)
    zero = torch.zeros((), dtype=dtype)
    l_p = zero
    l_a = zero
    if model.nfnet is not None:
        if plan.x_p is not None:
            l_p = prompt_loss(model.nfnet.student, to_t(plan.x_p), plan.y_p)
        if plan.x_a is not None:
            l_a = augment_loss(model.nfnet.student, to_t(plan.x_a), plan.y_a, plan.w_a)
    counts = {
        "source": valid_pixels(plan.y_s),
        "mixed": valid_pixels(plan.y_mix) if plan.y_mix is not None else 0,
        "prompt": valid_pixels(plan.y_p) if plan.y_p is not None else 0,
        "augment": valid_pixels(plan.y_a) if plan.y_a is not None else 0,
    }
    return total_loss(l_uda, l_p, l_a, weights, counts)


def _set_lr(opt, t, warmup):
    lr = None
    for group in opt.param_groups:
        group["lr"] = warmup_lr(t, group["base_lr"], warmup)
        lr = group["lr"] if lr is None else lr
    return lr


def train_step(state, day, night, prompt=None, small_classes=frozenset()):
    """Advance ``state`` by one iteration in place; returns the metrics row.

    ``day``, ``night`` and ``prompt`` are lists of :class:`DomainSample`
    (a single sample is accepted too).
    """
    as_list = lambda s: [s] if isinstance(s, DomainSample) else list(s or [])  # noqa: E731
    day, night, prompt = as_list(day), as_list(night), as_list(prompt)
    cfg = state.config
    model = state.model
    plan = plan_step(state, day, night, prompt, small_classes)

    try:
        report = compute_losses(model, plan, cfg.weights)
    except Exception as exc:
        raise TrainingAborted(state.t, "loss", exc) from exc
    if not math.isfinite(report.total_value):
        raise TrainingAborted(state.t, "loss", f"non-finite total loss {report.total_value}")

    for opt in state.optimizers.values():
        opt.zero_grad(set_to_none=True)
    report.total.backward()
    lr = None
    for name, opt in state.optimizers.items():
        group_lr = _set_lr(opt, state.t + 1, cfg.warmup_iters)
        if name == "uda":
            lr = group_lr
        opt.step()
    for pair in model.pairs().values():
        ema_update(pair)

    row = {"t": state.t, **report.as_dict(), "lr": lr, "mask_applied": plan.mask_applied,
           "topk": plan.topk, "fusion_ok": plan.fusion_ok, "nf_pixels": plan.nf_pixels}
    state.metrics.append(row)
    state.t += 1
    return row


# --- full run ----------------------------------------------------------------

@dataclass
class TrainData:
    source: SampleCache
    target: SampleCache
    prompt: SampleCache | None
    class_names: tuple


def load_train_data(cfg):
    if not cfg.source_dir or not cfg.target_dir:
        raise ValueError("data.source and data.target are required")
    src = load_dataset(cfg.source_dir, Domain.SOURCE_DAY, cfg.num_classes)
    tgt = load_dataset(cfg.target_dir, Domain.TARGET_NIGHT, cfg.num_classes)
    prm = None
    if cfg.use_nfnet and (cfg.use_prompt or cfg.nf_mix != "none"):
        if not cfg.prompt_dir:
            raise ValueError("data.prompt is required when the night branch uses prompt images")
        prm = load_dataset(cfg.prompt_dir, Domain.PROMPT_NIGHT, cfg.num_classes, max_prompt=cfg.max_prompt)
    size = cfg.train_size
    return TrainData(
        source=SampleCache(src, size, cfg.resize_kernel),
        target=SampleCache(tgt, size, cfg.resize_kernel),
        prompt=SampleCache(prm, size, cfg.resize_kernel) if prm is not None else None,
        class_names=src.class_names,
    )


def _sampler_sizes(data):
    sizes = {"source": len(data.source), "target": len(data.target)}
    if data.prompt is not None:
        sizes["prompt"] = len(data.prompt)
    return sizes


def draw_batch(state, data):
    """One batch per domain, each from its own shuffled cyclic stream."""
    n = state.config.batch_size
    day = [data.source.get(state.samplers["source"].next()) for _ in range(n)]
    night = [data.target.get(state.samplers["target"].next()) for _ in range(n)]
    prompt = []
    if data.prompt is not None:
        prompt = [data.prompt.get(state.samplers["prompt"].next()) for _ in range(n)]
    return day, night, prompt


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


def metrics_line(row):
    return json.dumps(row, sort_keys=True, default=_json_default)


def train(cfg, out_dir, resume_from=None, data=None, progress=None):
    """Run ``cfg.iterations`` steps, writing metrics, checkpoints and ``final.pt``.

    Returns the final :class:`TrainState`.
    """
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    torch.use_deterministic_algorithms(True)
    data = data or load_train_data(cfg)
    small = cfg.resolve_small_classes(list(data.class_names))
    sizes = _sampler_sizes(data)
    if resume_from is not None:
        state = restore_state(cfg, load_checkpoint(resume_from), sizes)
    else:
        state = init_state(cfg, sizes)
    (out / "config.resolved.txt").write_text(configlib.dump(cfg))

    metrics_path = out / "metrics.jsonl"
    kept = []
    if resume_from is not None and metrics_path.exists():
        for line in metrics_path.read_text().splitlines():
            if line.strip() and json.loads(line)["t"] < state.t:
                kept.append(line)
    with open(metrics_path, "w") as fh:
        for line in kept:
            fh.write(line + "\n")
        while state.t < cfg.iterations:
            day, night, prompt = draw_batch(state, data)
            row = train_step(state, day, night, prompt, small)
            fh.write(metrics_line(row) + "\n")
            fh.flush()
            if progress is not None:
                progress(row)
            if cfg.checkpoint_every and state.t % cfg.checkpoint_every == 0:
                save_checkpoint(out / "checkpoints" / f"ckpt_{state.t:06d}.pt", state_dict(state))
    save_checkpoint(out / "final.pt", state_dict(state))
    log.info("finished %d iterations; kernels=%s", state.t, kernels.BACKEND)
    return state

