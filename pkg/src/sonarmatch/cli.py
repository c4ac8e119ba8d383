"""Command-line entry point: ``sonarmatch <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Reports go to stdout as JSON; human-readable progress goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import KEYS, ConfigError, RunConfig, format_config, load_config, parse_value
from .detect import detect_combined, detect_pair
from .errors import SonarMatchError
from .experiment import run_experiment, write_history_csv, write_matches_csv
from .imagecore import AffineTransform, GrayImage, IntensityCurve, load_pgm, save_pgm
from .match import match_images, render_overlay
from .net import TINY_ARCH, SiameseModel, grad_check, load_model, save_model
from .patches import Patch, SamplePair, build_dataset, load_dataset, save_dataset
from .synth import SurveyConfig, gen_seafloor, make_survey_pair, random_survey_transform
from .train import evaluate_model, pretrain, train_model

log = logging.getLogger("sonarmatch")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# helpers


def parse_align(tokens: Sequence[str]) -> AffineTransform:
    """``identity``, six coefficients ``a b tx c d ty`` (spaces or commas), or a truth JSON path."""
    joined = " ".join(tokens).replace(",", " ").split()
    if joined == ["identity"]:
        return AffineTransform.identity()
    if len(joined) == 1 and joined[0].endswith(".json"):
        with open(joined[0]) as fh:
            return AffineTransform(*json.load(fh)["transform"])
    try:
        coeffs = [float(v) for v in joined]
    except ValueError:
        raise UsageError(f"--align expects 'identity', six numbers or a truth .json, got {' '.join(tokens)!r}")
    if len(coeffs) != 6:
        raise UsageError(f"--align expects six coefficients, got {len(coeffs)}")
    return AffineTransform(*coeffs)


def render_keypoints(img: GrayImage, points) -> GrayImage:
    """Copy of ``img`` with a small white cross at each keypoint."""
    out = img.data.copy()
    h, w = out.shape
    for kp in points:
        cx, cy = math.floor(kp.x + 0.5), math.floor(kp.y + 0.5)
        for dx, dy in ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1), (2, 0), (-2, 0), (0, 2), (0, -2)):
            if 0 <= cx + dx < w and 0 <= cy + dy < h:
                out[cy + dy, cx + dx] = 1.0
    return GrayImage(out)


def _dump_json(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _synth_pair(rc: RunConfig):
    floor_seed, render_seed, geo_seed = (int(s) for s in np.random.SeedSequence(rc["seed"]).generate_state(3))
    base = gen_seafloor(floor_seed, rc["size"], rc["size"])
    t = random_survey_transform(np.random.default_rng(geo_seed), rc["size"], rc["size"], rc["max_rotation"],
                                rc["max_shift"])
    cfg = SurveyConfig(seed=render_seed, width=rc["size"], height=rc["size"], transform=t,
                       curve_a=IntensityCurve.gamma(rc["gamma_a"]), curve_b=IntensityCurve.gamma(rc["gamma_b"]),
                       speckle_strength=rc["speckle"], shading_direction=rc["shading"],
                       noise_sigma=rc["noise_sigma"])
    a, b, t = make_survey_pair(base, cfg)
    return a, b, t, cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, rc: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    a, b, t, cfg = _synth_pair(rc)
    save_pgm(a, out / "a.pgm")
    save_pgm(b, out / "b.pgm")
    with open(out / "truth.json", "w") as fh:
        json.dump({"transform": list(t.coefficients), "config": cfg.to_dict()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _err(f"wrote {out}/a.pgm, b.pgm, truth.json")
    return EXIT_OK


def cmd_detect(args, rc: RunConfig) -> int:
    img = load_pgm(args.image)
    kps = detect_combined(img, rc.dog(), rc.fast(), rc["dedup_radius"])
    with open(args.out, "w") as fh:
        for kp in kps:
            fh.write(f"{kp.x:.4f} {kp.y:.4f} {kp.scale:.4f} {kp.response:.6f} {kp.source}\n")
    if args.overlay:
        save_pgm(render_keypoints(img, kps), args.overlay)
    _err(f"{len(kps)} keypoints")
    return EXIT_OK


def cmd_build_dataset(args, rc: RunConfig) -> int:
    img_a, img_b = load_pgm(args.image_a), load_pgm(args.image_b)
    t = parse_align(args.align)
    mc = rc.match()
    fa, fb = detect_pair(img_a, img_b, t, mc.dog, mc.fast, mc.dedup_radius, mc.margin)
    cap = rc["max_correspondences"]
    if args.all_correspondences is False and len(fa) > cap:
        keep = np.sort(np.random.default_rng(rc["seed"]).choice(len(fa), cap, replace=False))
        fa, fb = [fa[k] for k in keep], [fb[k] for k in keep]
    pairs = build_dataset(img_a, img_b, fa, fb, rc.half, rc.half, rc["seed"], rc["hard_negatives"])
    save_dataset(pairs, args.out)
    _err(f"{len(pairs)} samples from {len(fa)} correspondences -> {args.out}")
    return EXIT_OK


def _initial_model(args, rc: RunConfig) -> SiameseModel:
    if getattr(args, "init_model", None):
        return load_model(args.init_model)
    return SiameseModel.init(rc.arch(), rc["seed"])


def cmd_train(args, rc: RunConfig) -> int:
    data = load_dataset(args.dataset)
    model, history = train_model(_initial_model(args, rc), data, rc.train())
    save_model(model, args.out)
    write_history_csv(history, args.history)
    last = history[-1] if history else None
    if last is not None:
        _err(f"epoch {last.epoch}: loss {last.loss:.4f} val_acc {last.val_acc:.3f}")
    return EXIT_OK


def cmd_pretrain(args, rc: RunConfig) -> int:
    images = [load_pgm(p) for p in args.images]
    model = pretrain(_initial_model(args, rc), images, rc.train(), rc.half, rc.half, args.pairs_per_image)
    save_model(model, args.out)
    _err(f"pretrained model -> {args.out}")
    return EXIT_OK


def cmd_match(args, rc: RunConfig) -> int:
    img_a, img_b = load_pgm(args.image_a), load_pgm(args.image_b)
    t = parse_align(args.align)
    model = load_model(args.model)
    results = match_images(img_a, img_b, t, model, rc.match())
    if args.matches:
        write_matches_csv(results, args.matches)
    if args.overlay:
        save_pgm(render_overlay(img_a, img_b, results), args.overlay)
    accepted = sum(m.accepted for m in results)
    _dump_json({"candidates": len(results), "accepted": accepted, "inliers": sum(m.inlier for m in results)})
    return EXIT_OK


def cmd_eval(args, rc: RunConfig) -> int:
    report = evaluate_model(load_model(args.model), load_dataset(args.dataset), rc["threshold"])
    _dump_json(report.to_dict())
    return EXIT_OK


def gradcheck_batch(seed: int, side: int = 8) -> list[SamplePair]:
    """Four pairs of random ``side x side`` patches, two labelled 1 and two labelled 0."""
    rng = np.random.default_rng(seed)
    return [SamplePair(Patch(rng.random((side, side))), Patch(rng.random((side, side))), label)
            for label in (1, 0, 1, 0)]


def cmd_gradcheck(args, rc: RunConfig) -> int:
    model = SiameseModel.init(TINY_ARCH, rc["seed"], bias_scale=0.1)
    report = grad_check(model, gradcheck_batch(rc["seed"]), rc.loss(), args.step, args.tol)
    for layer, err in report.errors.items():
        _err(f"{layer:8s} max rel err {err:.3e}  {'ok' if report.layer_passed(layer) else 'FAIL'}")
    _dump_json(report.to_dict())
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_experiment(args, rc: RunConfig) -> int:
    summary = run_experiment(rc.experiment(), args.out)
    _dump_json(summary)
    return EXIT_OK


def cmd_config(args, rc: RunConfig) -> int:
    sys.stdout.write(format_config(rc))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, keys: Sequence[str]) -> None:
    p.add_argument("--config", metavar="FILE", help="key = value config file (flags override it)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    for key in keys:
        p.add_argument("--" + key.replace("_", "-"), dest=key, metavar=key.upper(), default=None,
                       help=KEYS[key].help)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sonarmatch", description="Learned patch matching for side-scan sonar image pairs.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    survey_keys = ["seed", "size", "gamma_a", "gamma_b", "speckle", "shading", "noise_sigma", "max_rotation",
                   "max_shift"]
    detector_keys = ["dog_octaves", "dog_scales", "dog_sigma", "dog_contrast", "dog_edge", "fast_threshold",
                     "fast_arc", "fast_nms_radius", "dedup_radius"]
    train_keys = ["seed", "epochs", "batch_size", "lr", "lr_schedule", "validation_fraction", "loss_lambda",
                  "loss_margin", "aug_noise", "aug_rotation", "aug_translation", "channels", "embed_dim",
                  "head_hidden"]

    p = sub.add_parser("synth", help="render a synthetic survey pair")
    _common(p, survey_keys)
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("detect", help="DoG + FAST keypoints of one image")
    _common(p, detector_keys)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="keypoint list: x y scale response source")
    p.add_argument("--overlay", help="PGM with keypoints marked")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("build-dataset", help="labelled patch pairs from an aligned image pair")
    _common(p, ["seed", "patch_size", "max_correspondences", "hard_negatives"] + detector_keys)
    p.add_argument("--image-a", required=True)
    p.add_argument("--image-b", required=True)
    p.add_argument("--align", required=True, nargs="+", help="identity | a b tx c d ty | truth.json")
    p.add_argument("--out", required=True, help="SMP1 dataset file")
    p.add_argument("--all-correspondences", action="store_true", help="ignore max_correspondences")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="train a model on an SMP1 dataset")
    _common(p, train_keys)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default="model.smdl")
    p.add_argument("--history", default="history.csv", help="CSV epoch,loss,val_acc")
    p.add_argument("--init-model", help="start from this model instead of a fresh one")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pretrain", help="self-supervised pretraining on waterfall images")
    _common(p, train_keys + ["patch_size"])
    p.add_argument("--images", required=True, nargs="+")
    p.add_argument("--out", default="pretrained.smdl")
    p.add_argument("--pairs-per-image", type=int, default=256)
    p.add_argument("--init-model")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("match", help="match an aligned image pair with a trained model")
    _common(p, ["seed", "threshold", "patch_size", "ransac_iterations", "inlier_tolerance", "min_inliers"]
            + detector_keys)
    p.add_argument("--image-a", required=True)
    p.add_argument("--image-b", required=True)
    p.add_argument("--align", required=True, nargs="+", help="identity | a b tx c d ty | truth.json")
    p.add_argument("--model", required=True)
    p.add_argument("--overlay", help="side-by-side PGM with match lines")
    p.add_argument("--matches", help="CSV xa,ya,xb,yb,score,accepted,inlier")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="score a model on an SMP1 dataset (JSON to stdout)")
    _common(p, ["threshold"])
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the tiny model (exit 3 on failure)")
    _common(p, ["seed", "loss_lambda", "loss_margin"])
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("experiment", help="full synthetic pipeline; writes summary.json and artifacts")
    _common(p, ["seed", "pairs", "train_pairs", "size", "patch_size", "epochs", "max_correspondences",
                "threshold", "d_ratio"])
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("config", help="print the resolved configuration")
    _common(p, [])
    p.set_defaults(func=cmd_config)
    return parser


def _resolve(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = parse_value(key.strip(), value)
    for key in KEYS:
        raw = getattr(args, key, None)
        if raw is not None:
            overrides[key] = parse_value(key, raw)
    return load_config(args.config, overrides)


def run_command(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = _resolve(args)
        return args.func(args, rc)
    except (ConfigError, UsageError) as exc:
        _err(f"sonarmatch {args.command}: {exc}")
        return EXIT_USAGE
    except FloatingPointError as exc:
        _err(f"sonarmatch {args.command}: numeric failure: {exc}")
        return EXIT_NUMERIC
    except (SonarMatchError, ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        _err(f"sonarmatch {args.command}: {exc}")
        return EXIT_DATA


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
