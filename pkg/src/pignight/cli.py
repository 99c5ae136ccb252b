"""Command-line entry point: ``pignight {synth,train,eval,rank,fuse,augment,replay}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or input error.  Every
command writes ``manifest.json`` into its output directory; ``replay``
re-runs a command from that file alone.
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from pignight import __version__, augment, config as configlib, kernels
from pignight.config import ConfigError
from pignight.datamodel import (
    DatasetError, Domain, default_class_names, generate_synthetic_dataset, load_dataset,
    read_image, read_label, write_image, write_label, write_mask,
)
from pignight.evaluation import compute_iou, evaluate, format_iou_table
from pignight.fusion import FusionConfig, fuse
from pignight.network import load_checkpoint, model_from_state
from pignight.similarity import BACKENDS, SimilarityBackend, average_ranking, rank_classes
from pignight.trainer import TrainConfig, TrainingAborted, train

log = logging.getLogger("pignight")

MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


# --- helpers -----------------------------------------------------------------

def _abs(path):
    return str(Path(path).resolve()) if path is not None else None


def _write_manifest(out, command, argv, extra=None):
    record = {
        "format": "pignight-run/1",
        "version": __version__,
        "command": command,
        "argv": argv,
        "kernels": kernels.BACKEND,
    }
    record.update(extra or {})
    (Path(out) / MANIFEST).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _class_names(path, num_classes):
    if path:
        names = [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]
        if len(names) != num_classes:
            raise UsageError(f"{path} lists {len(names)} classes, expected {num_classes}")
        return names
    return list(default_class_names(num_classes))


def _backend(args):
    return SimilarityBackend(kind=args.backend, window_size=args.ssim_window, feature_seed=args.feature_seed)


def _ranking_text(ranking, names):
    lines = ["# position class_id class_name score"]
    for pos, (c, s) in enumerate(ranking.entries, start=1):
        lines.append(f"{pos} {c} {names[c]} {s:.6f}")
    return "\n".join(lines) + "\n"


def _pyplot():
    try:
        import matplotlib
    except ImportError:
        raise UsageError("--plot needs matplotlib (pip install 'artifact[plot]')") from None
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _plot_bars(path, labels, values, ylabel, title):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(labels)), 3))
    ax.bar(range(len(labels)), values, color="#4c72b0")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


# --- commands ----------------------------------------------------------------

def cmd_synth(args):
    out = Path(args.out)
    low = tuple(n.strip() for n in args.low_similarity.split(",") if n.strip())
    day, night = generate_synthetic_dataset(
        out, seed=args.seed, n_samples=args.n_samples, size=args.size,
        num_classes=args.num_classes, n_prompt=args.n_prompt, low_similarity=low,
    )
    argv = ["synth", "--seed", str(args.seed), "--n-samples", str(args.n_samples), "--size", str(args.size),
            "--num-classes", str(args.num_classes), "--n-prompt", str(args.n_prompt),
            "--low-similarity", args.low_similarity]
    _write_manifest(out, "synth", argv)
    print(f"wrote {len(day)} day pairs, {len(night)} night images, {args.n_prompt} prompt pairs to {out}")
    return 0


def _load_train_config(args):
    text = Path(args.config).read_text() if args.config else ""
    cfg = configlib.load(TrainConfig, text, args.override or (), source=args.config)
    dirs = {name: _abs(getattr(cfg, name)) for name in ("source_dir", "target_dir", "prompt_dir", "eval_dir")}
    return dataclasses.replace(cfg, **dirs)


def cmd_train(args):
    try:
        cfg = _load_train_config(args)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = configlib.dump(cfg)
    (out / "config.txt").write_text(resolved)
    argv = ["train", "--config", "config.txt"]
    _write_manifest(out, "train", argv, {
        "config": resolved,
        "seed": cfg.seed,
        "similarity": cfg.backend().identity,
        "resume": _abs(args.resume),
    })

    def progress(row):
        if args.verbose and (row["t"] % 50 == 0 or row["t"] == cfg.iterations - 1):
            log.info("t=%d total=%.4f L_UDA=%.4f L_P=%.4f L_A=%.4f", row["t"], row["total"],
                     row["L_UDA"], row["L_P"], row["L_A"])

    state = train(cfg, out, resume_from=args.resume, progress=progress)
    if args.plot:
        _plot_loss(out / "loss.png", state.metrics)
    if cfg.eval_dir:
        manifest = load_dataset(cfg.eval_dir, Domain.TARGET_NIGHT, cfg.num_classes, label_dir=cfg.eval_label_dir)
        report = compute_iou(evaluate(state.model.uda.student, manifest))
        (out / "eval.json").write_text(json.dumps(report.as_dict(list(manifest.class_names)), indent=2) + "\n")
        print(format_iou_table(report, manifest.class_names), end="")
    print(f"trained {state.t} iterations; outputs in {out}")
    return 0


def _plot_loss(path, metrics):
    plt = _pyplot()
    t = [r["t"] for r in metrics]
    fig, ax = plt.subplots(figsize=(6, 3))
    for key in ("total", "L_UDA", "L_P", "L_A"):
        ax.plot(t, [r[key] for r in metrics], label=key, linewidth=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def cmd_eval(args):
    state = load_checkpoint(args.checkpoint)
    model = model_from_state(state)
    num_classes = model.arch.num_classes
    root = Path(args.data)
    label_dir = args.labels
    if label_dir is None:
        label_dir = "hidden_labels" if (root / "hidden_labels").is_dir() else "labels"
    manifest = load_dataset(root, Domain.TARGET_NIGHT, num_classes, label_dir=label_dir)
    report = compute_iou(evaluate(model.uda.student, manifest))
    names = list(manifest.class_names)
    table = format_iou_table(report, names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.txt").write_text(table)
    (out / "eval.json").write_text(json.dumps(report.as_dict(names), indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "eval", ["eval", "--checkpoint", _abs(args.checkpoint), "--data", _abs(root),
                                  "--labels", label_dir])
    print(table, end="")
    return 0


def _read_pairs(path, night_default):
    pairs = []
    base = Path(path).parent
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise UsageError(f"{path}:{lineno}: expected 'day_image day_label [night_image]'")
        if len(parts) == 2 and night_default is None:
            raise UsageError(f"{path}:{lineno}: no night image given and --night-image unset")
        resolve = lambda p: str(p if Path(p).is_absolute() else base / p)  # noqa: E731
        night = resolve(parts[2]) if len(parts) == 3 else night_default
        pairs.append((resolve(parts[0]), resolve(parts[1]), night))
    return pairs


def cmd_rank(args):
    if args.pairs:
        pairs = _read_pairs(args.pairs, _abs(args.night_image[0]) if args.night_image else None)
    else:
        if not (args.day_image and args.day_label and args.night_image):
            raise UsageError("rank needs --day-image, --day-label and --night-image, or --pairs")
        pairs = [(args.day_image, args.day_label, n) for n in args.night_image]
    names = _class_names(args.class_names, args.num_classes)
    backend = _backend(args)
    rankings = []
    for day_img, day_lbl, night_img in pairs:
        x_s = read_image(day_img)
        y_s = read_label(day_lbl, args.num_classes)
        x_t = read_image(night_img)
        rankings.append(rank_classes(x_s, y_s, x_t, backend))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if len(rankings) == 1:
        text = _ranking_text(rankings[0], names)
        order = [names[c] for c in rankings[0].class_ids]
        values = [s for _, s in rankings[0].entries]
        ylabel = "score (higher = less similar)"
    else:
        avg = average_ranking(rankings)
        lines = ["# mean_position class_id class_name appearances"]
        for c in avg.ordered():
            lines.append(f"{avg.mean_position[c]:.4f} {c} {names[c]} {avg.count[c]}")
        text = "\n".join(lines) + "\n"
        order = [names[c] for c in avg.ordered()]
        values = [avg.mean_position[c] for c in avg.ordered()]
        ylabel = "mean rank position"
    (out / "ranking.txt").write_text(text)
    if args.plot:
        _plot_bars(out / "ranking.png", order, values, ylabel, f"class ranking ({backend.identity})")
    argv = ["rank", "--backend", args.backend, "--num-classes", str(args.num_classes),
            "--ssim-window", str(args.ssim_window), "--feature-seed", str(args.feature_seed)]
    if args.pairs:
        argv += ["--pairs", _abs(args.pairs)]
        if args.night_image:
            argv += ["--night-image", _abs(args.night_image[0])]
    else:
        argv += ["--day-image", _abs(args.day_image), "--day-label", _abs(args.day_label),
                 "--night-image", *[_abs(n) for n in args.night_image]]
    if args.class_names:
        argv += ["--class-names", _abs(args.class_names)]
    if args.plot:
        argv.append("--plot")
    _write_manifest(out, "rank", argv, {"similarity": backend.identity})
    print(text, end="")
    return 0


def _load_prediction(path):
    pred = np.load(path)
    if pred.ndim != 3:
        raise UsageError(f"{path}: soft prediction must be (C, H, W), got {pred.shape}")
    sums = pred.sum(axis=0)
    if pred.min() < 0 or not np.allclose(sums, 1.0, atol=1e-5):
        raise UsageError(f"{path}: per-pixel probabilities must be non-negative and sum to 1")
    return pred


def cmd_fuse(args):
    uda = _load_prediction(args.uda_pred)
    nf = _load_prediction(args.nf_pred)
    num_classes = uda.shape[0]
    x_s = read_image(args.day_image)
    y_s = read_label(args.day_label, num_classes)
    x_t = read_image(args.night_image)
    small = [int(c) for c in args.small.split(",") if c.strip()] if args.small else []
    cfg = FusionConfig(k=args.k, small_classes=frozenset(small), confidence_threshold=args.threshold)
    backend = _backend(args)
    ranking = rank_classes(x_s, y_s, x_t, backend)
    fused = fuse(uda, nf, ranking, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_label(out / "fused_label.png", fused.label)
    write_mask(out / "fusion_mask.png", fused.fusion_mask)
    np.save(out / "quality_weight.npy", fused.weight)
    names = list(default_class_names(num_classes))
    (out / "ranking.txt").write_text(_ranking_text(ranking, names))
    argv = ["fuse", "--uda-pred", _abs(args.uda_pred), "--nf-pred", _abs(args.nf_pred),
            "--day-image", _abs(args.day_image), "--day-label", _abs(args.day_label),
            "--night-image", _abs(args.night_image), "--k", str(args.k), "--small", args.small or "",
            "--threshold", repr(args.threshold), "--backend", args.backend,
            "--ssim-window", str(args.ssim_window), "--feature-seed", str(args.feature_seed)]
    _write_manifest(out, "fuse", argv, {"similarity": backend.identity})
    print(f"fused {int(fused.fusion_mask.sum())} night-branch pixels; selected classes {sorted(fused.selected)}")
    return 0


def cmd_augment(args):
    x_p = read_image(args.prompt_image)
    y_p = read_label(args.prompt_label)
    x_t = read_image(args.target_image)
    y_t = read_label(args.pseudo_label)
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    mixed = augment.prompt_mixture(x_p, x_t, rng)
    y_a = augment.mix_labels(y_p, y_t, mixed.mask)
    h, w = x_t.shape[:2]
    spec = augment.PatchMaskSpec(args.patch, args.patch, args.ratio, seed=args.seed)
    m_a = augment.patch_mask(h, w, spec)
    schedule = augment.AlternationSchedule(beta=args.beta, literal=args.literal)
    x_am = augment.alternate_apply(mixed.image, m_a, args.t, schedule)
    write_image(out / "pms_image.png", mixed.image)
    write_mask(out / "prompt_mask.png", mixed.mask)
    write_mask(out / "patch_mask.png", m_a)
    write_image(out / "ams_image.png", x_am)
    write_label(out / "ams_label.png", y_a)
    if args.source_image:
        if not args.source_label:
            raise UsageError("--source-image requires --source-label")
        x_s = read_image(args.source_image)
        y_s = read_label(args.source_label)
        img, lab, m = augment.cross_domain_mix(x_s, y_s, x_t, y_t, rng, return_mask=True)
        write_image(out / "cdm_image.png", img)
        write_label(out / "cdm_label.png", lab)
        write_mask(out / "cdm_mask.png", m)
    argv = ["augment", "--prompt-image", _abs(args.prompt_image), "--prompt-label", _abs(args.prompt_label),
            "--target-image", _abs(args.target_image), "--pseudo-label", _abs(args.pseudo_label),
            "--t", str(args.t), "--ratio", repr(args.ratio), "--beta", repr(args.beta),
            "--patch", str(args.patch), "--seed", str(args.seed)]
    if args.literal:
        argv.append("--literal")
    if args.source_image:
        argv += ["--source-image", _abs(args.source_image), "--source-label", _abs(args.source_label)]
    _write_manifest(out, "augment", argv, {"mask_applied": schedule.applies(args.t), "side": mixed.side})
    print(f"side={mixed.side} mask_applied={schedule.applies(args.t)} kept_fraction={m_a.mean():.3f}")
    return 0


def cmd_replay(args):
    record = json.loads(Path(args.manifest).read_text())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    argv = list(record["argv"])
    if record["command"] == "train":
        (out / "config.txt").write_text(record["config"])
        argv = ["train", "--config", str(out / "config.txt")]
        if record.get("resume"):
            argv += ["--resume", record["resume"]]
    return main(argv + ["--out", str(out)])


# --- parser ------------------------------------------------------------------

def _add_backend_args(p):
    p.add_argument("--backend", choices=BACKENDS, default="perceptual")
    p.add_argument("--ssim-window", type=int, default=11)
    p.add_argument("--feature-seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="pignight", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic day/night dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--n-samples", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--num-classes", type=int, default=8)
    p.add_argument("--n-prompt", type=int, default=10)
    p.add_argument("--low-similarity", default="sky", help="comma-separated class names")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the dual-branch training loop")
    p.add_argument("--config")
    p.add_argument("--override", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--plot", action="store_true", help="also write loss.png")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-class IoU of a checkpoint's UDA student")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="split directory with images/ and labels")
    p.add_argument("--labels", help="label directory name (default hidden_labels or labels)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rank", help="rank classes by day/night dissimilarity")
    p.add_argument("--day-image")
    p.add_argument("--day-label")
    p.add_argument("--night-image", nargs="+")
    p.add_argument("--pairs", help="list file: 'day_image day_label [night_image]' per line")
    p.add_argument("--num-classes", type=int, default=19)
    p.add_argument("--class-names")
    p.add_argument("--plot", action="store_true")
    p.add_argument("--out", required=True)
    _add_backend_args(p)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("fuse", help="fuse two soft predictions into one pseudo-label")
    p.add_argument("--uda-pred", required=True, help=".npy soft prediction (C, H, W)")
    p.add_argument("--nf-pred", required=True, help=".npy soft prediction (C, H, W)")
    p.add_argument("--day-image", required=True)
    p.add_argument("--day-label", required=True)
    p.add_argument("--night-image", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--small", default="", help="comma-separated small-object class ids")
    p.add_argument("--threshold", type=float, default=0.968)
    p.add_argument("--out", required=True)
    _add_backend_args(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("augment", help="apply prompt mixing, patch masking and class mixing")
    p.add_argument("--prompt-image", required=True)
    p.add_argument("--prompt-label", required=True)
    p.add_argument("--target-image", required=True)
    p.add_argument("--pseudo-label", required=True)
    p.add_argument("--source-image")
    p.add_argument("--source-label")
    p.add_argument("--t", type=int, default=0, help="iteration index for the mask schedule")
    p.add_argument("--ratio", type=float, default=0.7)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--literal", action="store_true", help="apply the mask by fmod(t, 1/beta) instead of alternating")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("replay", help="re-run a command from its manifest.json")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, DatasetError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
