"""Command-line entry point: ``aikd <subcommand>``.

Every subcommand reads an optional ``--config`` file of ``key = value``
lines (keys are the long option names, dashes or underscores) and lets
command-line flags override it. ``AIKD_OUTPUT_DIR`` overrides the output
directory unless ``--out`` is given explicitly.

Exit codes: 0 success, 1 internal error or failed check, 2 user/config error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .align import AlignmentTemplate, perturb_landmarks
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    ManifestError,
    load_manifest,
    load_pairs,
    load_quality_scores,
    quality_scores_csv,
    write_text_atomic,
)
from .distill import (
    DegenerateLabelsError,
    DistillConfig,
    DistillConfigError,
    distill_loss,
    epoch_stats_csv,
    normalize_labels,
    prefit_teacher,
    student_from_teacher,
    train,
)
from .evaluation import (
    ProtocolError,
    UndefinedNormalizationError,
    compare_methods,
    comparison_csv,
    edc_curve,
    edc_csv,
    embed_and_score,
    oracle_margin_qualities,
    pauc,
    read_edc_csv,
    summary_csv,
)
from .network import ArchitectureSpec, ContractError, grad_check, init_params
from .synth import SynthConfig, SynthConfigError, generate_synthetic_dataset, load_identities, write_synthetic_dataset

log = logging.getLogger("aikd")

OUTPUT_ENV = "AIKD_OUTPUT_DIR"
GRAD_TOL = 1e-4


class UserError(Exception):
    """Bad input or configuration; reported with exit code 2."""


USER_ERRORS = (
    UserError,
    ManifestError,
    CheckpointError,
    SynthConfigError,
    DistillConfigError,
    DegenerateLabelsError,
    ProtocolError,
    FileNotFoundError,
    IsADirectoryError,
)


# ---------------------------------------------------------------- config


def read_config(path) -> dict:
    """Parse a ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UserError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace, argv: list[str]) -> argparse.Namespace:
    """Fill options not given on the command line from ``--config``."""
    if not getattr(args, "config", None):
        return args
    cfg = read_config(args.config)
    by_flag = {opt: a.dest for a in parser._actions for opt in a.option_strings}
    given = {by_flag[tok.split("=", 1)[0]] for tok in argv if tok.split("=", 1)[0] in by_flag}
    actions = {a.dest: a for a in parser._actions}
    for key, raw in cfg.items():
        if key not in actions:
            raise UserError(f"{args.config}: unknown option {key!r}")
        if key in given:
            continue
        action = actions[key]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            value = raw.lower() in ("1", "true", "yes", "on")
        elif isinstance(action, argparse._AppendAction):
            value = [v.strip() for v in raw.split(",") if v.strip()]
        elif action.type is not None:
            try:
                value = action.type(raw)
            except ValueError as exc:
                raise UserError(f"{args.config}: bad value for {key}: {raw!r}") from exc
        else:
            value = raw
        setattr(args, key, value)
    return args


def output_dir(args) -> Path:
    if args.out_given:
        return Path(args.out)
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return Path(env)
    return Path(args.out)


def _template(args, width: int | None = None, height: int | None = None) -> AlignmentTemplate:
    tmpl = AlignmentTemplate.load(args.template) if args.template else AlignmentTemplate.default()
    return tmpl.resized(width or args.crop_size, height or args.crop_size)


def _require(path, what: str) -> Path:
    if not path:
        raise UserError(f"missing required option: {what}")
    p = Path(path)
    if not p.exists():
        raise UserError(f"{what} not found: {p}")
    return p


def _gray_stack(manifest) -> np.ndarray:
    imgs = manifest.load_images()
    if imgs.ndim == 4:
        # ITU-R BT.601 luma
        imgs = imgs @ np.array([0.299, 0.587, 0.114])
    return imgs


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        n_identities=args.n_identities,
        images_per_identity=args.images_per_identity,
        image_size=args.image_size,
        sigma_min=args.sigma_min,
        sigma_max=args.sigma_max,
        noise_std=args.noise_std,
        pairs_per_class=args.pairs_per_class,
    )
    ds = generate_synthetic_dataset(cfg, args.seed, split=args.split)
    out = output_dir(args)
    write_synthetic_dataset(ds, out)
    print(f"wrote {len(ds.manifest)} images, {len(ds.pairs)} pairs to {out}")
    return 0


def _identity_labels(args, manifest) -> np.ndarray:
    if args.identities:
        return load_identities(_require(args.identities, "identities file"), manifest)
    if args.pairs:
        from scipy.sparse import coo_matrix
        from scipy.sparse.csgraph import connected_components

        pairs = load_pairs(_require(args.pairs, "pairs file"), manifest)
        a, b = pairs.index_a[pairs.mated], pairs.index_b[pairs.mated]
        n = len(manifest)
        graph = coo_matrix((np.ones(len(a)), (a, b)), shape=(n, n))
        return connected_components(graph, directed=False)[1]
    raise UserError("teacher pre-fit needs --identities or --pairs (or set --prefit-epochs 0)")


def cmd_distill(args) -> int:
    manifest = load_manifest(_require(args.manifest, "manifest"))
    if not manifest.labeled:
        missing = next(r.image_path for r in manifest.records if r.quality is None)
        raise UserError(f"manifest has unlabeled records (first: {missing}); distillation needs labels")
    norm = None
    if args.normalize_labels:
        manifest, norm = normalize_labels(manifest)
    images = _gray_stack(manifest)
    template = _template(args)
    spec = ArchitectureSpec(input_shape=(template.width, template.height, 1))

    if args.teacher:
        teacher = load_checkpoint(_require(args.teacher, "teacher checkpoint")).params.freeze()
        if teacher.spec.input_dim != spec.input_dim:
            raise UserError("teacher checkpoint does not match the crop size")
        spec = teacher.spec
    elif args.prefit_epochs > 0:
        ids = _identity_labels(args, manifest)
        teacher = prefit_teacher(spec, images, manifest.landmarks, ids, template, args.seed,
                                 epochs=args.prefit_epochs, augment_p=args.prefit_augment)
    else:
        teacher = init_params(spec, args.seed).freeze()

    config = DistillConfig(p=args.p, lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                           swa_warmup=args.swa_warmup, seed=args.seed, template=template,
                           integer_perturbation=args.integer_perturbation)
    student = student_from_teacher(teacher, args.seed)
    res = train(teacher, student, manifest, config, images=images)

    meta = {
        "label_normalization": None if norm is None else {"min": norm[0], "max": norm[1]},
        "template": {"width": template.width, "height": template.height,
                     "points": template.points.tolist()},
        "distill": {"p": args.p, "lr": args.lr, "epochs": args.epochs, "batch_size": args.batch_size,
                    "swa_warmup": args.swa_warmup, "integer_perturbation": args.integer_perturbation},
    }
    out = output_dir(args)
    opt = {"name": "sgd", "lr": args.lr, "steps": sum(-(-s.seen // args.batch_size) for s in res.stats)}
    save_checkpoint(Checkpoint(teacher, args.seed, {}, None, {**meta, "role": "teacher"}), out / "teacher.aikd")
    save_checkpoint(Checkpoint(res.student, args.seed, opt, res.swa_state, {**meta, "role": "student_final"}),
                    out / "student_final.aikd")
    save_checkpoint(Checkpoint(res.swa_student, args.seed, opt, None, {**meta, "role": "student_swa"}),
                    out / "student_swa.aikd")
    write_text_atomic(out / "epoch_stats.csv", epoch_stats_csv(res.stats))
    last = res.stats[-1]
    print(f"trained {args.epochs} epoch(s); final mean objective {last.mean_obj:.6f}; outputs in {out}")
    return 0


def _alignment_modes(specs: list[str], manifest, seed: int):
    """Yield ``(tag, landmarks)`` per requested alignment mode."""
    for spec in specs:
        if spec == "proper":
            yield "proper", manifest.landmarks
        elif spec.startswith("perturbed"):
            _, _, val = spec.partition(":")
            try:
                p = float(val) if val else 3.0
            except ValueError as exc:
                raise UserError(f"bad alignment mode {spec!r}") from exc
            if p < 0:
                raise UserError("perturbation radius must be non-negative")
            gen = rngmod.stream(seed, "eval")
            yield f"perturbed{p:g}", np.stack([perturb_landmarks(k, p, gen) for k in manifest.landmarks])
        else:
            other = load_manifest(_require(spec, "landmarks manifest"))
            table = {r.image_path: r.landmarks for r in other.records}
            try:
                lms = np.stack([table[r.image_path] for r in manifest.records])
            except KeyError as exc:
                raise UserError(f"{spec}: no landmarks for image {exc.args[0]}") from exc
            yield Path(spec).stem, lms


def _quality_sources(specs: list[str], manifest):
    for spec in specs:
        if spec in ("model", "oracle"):
            yield spec, None
        else:
            name, sep, path = spec.partition("=")
            if not sep:
                name, path = Path(spec).stem, spec
            try:
                yield name, load_quality_scores(_require(path, "quality CSV"), manifest)
            except ManifestError as exc:
                raise UserError(str(exc)) from exc


def _eval_template(args, ckpt: Checkpoint) -> AlignmentTemplate:
    t = ckpt.metadata.get("template")
    if t and not args.template:
        return AlignmentTemplate(np.array(t["points"]), t["width"], t["height"])
    w, h, _ = ckpt.spec.input_shape
    return _template(args, w, h)


def cmd_evaluate(args) -> int:
    manifest = load_manifest(_require(args.manifest, "manifest"))
    pairs = load_pairs(_require(args.pairs, "pairs file"), manifest)
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    fr = load_checkpoint(_require(args.fr_checkpoint, "FR checkpoint")) if args.fr_checkpoint else ckpt
    template = _eval_template(args, fr)
    images = _gray_stack(manifest)
    sources = list(_quality_sources(args.quality or ["model"], manifest))
    out = output_dir(args)
    for mode, landmarks in _alignment_modes(args.alignment or ["proper"], manifest, args.seed):
        scoring = embed_and_score(fr.params, manifest, pairs, template, images=images, landmarks=landmarks)
        for name, qual in sources:
            if name == "oracle":
                qual = oracle_margin_qualities(pairs, scoring.pair_scores, len(manifest))
            elif qual is None:
                qual = scoring.qualities if fr is ckpt else embed_and_score(
                    ckpt.params, manifest, pairs, template, images=images, landmarks=landmarks).qualities
                write_text_atomic(out / f"qualities_{name}_{mode}.csv", quality_scores_csv(manifest, qual))
            curve = edc_curve(qual, pairs, scoring.pair_scores, args.fmr, args.grid_step, args.r_max)
            try:
                report = pauc(curve)
            except UndefinedNormalizationError as exc:
                log.warning("%s", exc)
                report = None
            write_text_atomic(out / f"edc_{name}_{mode}.csv", edc_csv(curve))
            write_text_atomic(out / f"summary_{name}_{mode}.csv", summary_csv(curve, report))
            norm = "undefined" if report is None else f"{report.normalized:.4f}"
            print(f"{name:>12s} {mode:>12s}  fnmr0={curve.fnmr0:.4f}  pAUC_norm={norm}")
    return 0


def cmd_compare(args) -> int:
    manifest = load_manifest(_require(args.manifest, "manifest"))
    pairs = load_pairs(_require(args.pairs, "pairs file"), manifest)
    fr = load_checkpoint(_require(args.fr_checkpoint, "FR checkpoint"))
    template = _eval_template(args, fr)
    if not args.qualities:
        raise UserError("compare needs at least one quality CSV")
    (mode, landmarks), = _alignment_modes([args.alignment], manifest, args.seed)
    scoring = embed_and_score(fr.params, manifest, pairs, template, images=_gray_stack(manifest),
                              landmarks=landmarks)
    methods = list(_quality_sources(args.qualities, manifest))
    results = compare_methods(methods, pairs, scoring.pair_scores, args.fmr, args.r_max, args.grid_step)
    table = comparison_csv(results)
    write_text_atomic(output_dir(args) / f"comparison_{mode}.csv", table)
    sys.stdout.write(table)
    return 0


def cmd_grad_check(args) -> int:
    spec = ArchitectureSpec(input_shape=(4, 4, 1), backbone=(8, 6, 4), head=(5, 1))
    worst = 0.0
    for draw in range(args.draws):
        gen = rngmod.stream(args.seed + draw, "gradcheck")
        model = init_params(spec, args.seed + draw)
        for b in model.biases:
            b[:] = gen.uniform(-0.1, 0.1, size=b.shape)
        x = gen.uniform(-1.0, 1.0, size=(3, spec.input_dim))
        e_t = gen.normal(size=(3, spec.embedding_dim))
        q = gen.uniform(0.0, 1.0, size=3)

        def loss_fn(m, _sample, x=x, e_t=e_t, q=q):
            loss, grads = distill_loss(m, x, e_t, q)
            if args.inject_bug:
                grads[0] = grads[0].copy()
                grads[0].flat[0] *= 2.0
            return loss, grads

        err = grad_check(model, None, loss_fn, eps=args.eps)
        worst = max(worst, err)
        print(f"draw {draw:3d}  max_rel_err {err:.3e}  {'ok' if err < GRAD_TOL else 'FAIL'}")
    verdict = worst < GRAD_TOL
    print(f"worst {worst:.3e} -> {'PASS' if verdict else 'FAIL'} (tolerance {GRAD_TOL:g})")
    return 0 if verdict else 1


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "aikd"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for path in args.curves:
        x, y = read_edc_csv(_require(path, "EDC CSV"))
        ax.plot(x, y, label=Path(path).stem)
    ax.set_xlabel("discard rate")
    ax.set_ylabel("FNMR")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    out = Path(args.output) if args.output else output_dir(args) / "edc.svg"
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(f".{out.name}.tmp")
    fig.savefig(tmp, format="svg", metadata={"Date": None})
    plt.close(fig)
    os.replace(tmp, out)
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser, out_default: str = "out") -> None:
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=out_default, help=f"output directory (env {OUTPUT_ENV} overrides the default)")


def _eval_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest")
    p.add_argument("--pairs")
    p.add_argument("--template", help="template file: 'W,H' line then five 'x,y' rows")
    p.add_argument("--crop-size", type=int, default=32)
    p.add_argument("--fmr", type=float, default=1e-3)
    p.add_argument("--r-max", type=float, default=0.3)
    p.add_argument("--grid-step", type=float, default=0.01)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aikd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic face-like dataset")
    _common(p, "synth")
    d = SynthConfig()
    p.add_argument("--n-identities", type=int, default=d.n_identities)
    p.add_argument("--images-per-identity", type=int, default=d.images_per_identity)
    p.add_argument("--image-size", type=int, default=d.image_size)
    p.add_argument("--sigma-min", type=float, default=d.sigma_min)
    p.add_argument("--sigma-max", type=float, default=d.sigma_max)
    p.add_argument("--noise-std", type=float, default=d.noise_std)
    p.add_argument("--pairs-per-class", type=int, default=None)
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("distill", help="train a student by alignment-invariant distillation")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--pairs", help="pairs file; mated components give identities for teacher pre-fit")
    p.add_argument("--identities", help="CSV with image_path,identity columns for teacher pre-fit")
    p.add_argument("--template")
    p.add_argument("--crop-size", type=int, default=32)
    p.add_argument("--teacher", help="existing teacher checkpoint (skips pre-fit)")
    dc = DistillConfig()
    p.add_argument("--p", type=float, default=dc.p)
    p.add_argument("--lr", type=float, default=dc.lr)
    p.add_argument("--epochs", type=int, default=dc.epochs)
    p.add_argument("--batch-size", type=int, default=dc.batch_size)
    p.add_argument("--swa-warmup", type=float, default=dc.swa_warmup)
    p.add_argument("--integer-perturbation", action="store_true")
    p.add_argument("--prefit-epochs", type=int, default=20)
    p.add_argument("--prefit-augment", type=float, default=3.0)
    p.add_argument("--no-normalize-labels", dest="normalize_labels", action="store_false")
    p.set_defaults(func=cmd_distill, normalize_labels=True)

    p = sub.add_parser("evaluate", help="EDC curves and pAUC for quality sources x alignment modes")
    _common(p)
    _eval_opts(p)
    p.add_argument("--checkpoint", help="quality model checkpoint")
    p.add_argument("--fr-checkpoint", help="checkpoint whose embeddings score the pairs (default: --checkpoint)")
    p.add_argument("--quality", action="append",
                   help="'model', 'oracle' (lowest mated score per image) or [name=]path to an image_path,score CSV; repeatable")
    p.add_argument("--alignment", action="append",
                   help="'proper', 'perturbed:P', or a manifest CSV with external landmarks; repeatable")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="rank quality methods by normalized pAUC")
    _common(p)
    _eval_opts(p)
    p.add_argument("--fr-checkpoint")
    p.add_argument("--alignment", default="proper")
    p.add_argument("qualities", nargs="*", help="[name=]path quality CSVs")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("grad-check", help="finite-difference check of the distillation gradient")
    _common(p)
    p.add_argument("--draws", type=int, default=50)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--inject-bug", action="store_true", help="corrupt one gradient entry (self-test)")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("plot", help="render EDC CSVs as an SVG")
    _common(p)
    p.add_argument("curves", nargs="+")
    p.add_argument("--output", help="SVG path (default: <out>/edc.svg)")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code in (0, None) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.out_given = any(t == "--out" or t.startswith("--out=") for t in argv)
    try:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        args = apply_config(sub, args, argv)
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
