"""Synthetic end-to-end run: survey pairs, training, held-out evaluation and matching."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .detect import DoGParams, FastParams, detect_pair
from .imagecore import AffineTransform, GrayImage, IntensityCurve, save_pgm
from .match import (MatchConfig, MatchResult, baseline_ratio_match, inlier_rate, match_images, render_overlay)
from .net import ArchConfig, SiameseModel, save_model
from .patches import AugmentConfig, SamplePair, build_dataset
from .synth import SurveyConfig, gen_seafloor, make_survey_pair, random_survey_transform
from .train import EpochStats, TrainConfig, evaluate_model, train_model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 42
    n_pairs: int = 20
    n_train: int = 16
    size: int = 256
    gamma_a: float = 0.7
    gamma_b: float = 1.6
    speckle: float = 0.3
    noise_sigma: float = 0.0
    shading: str = "left"
    max_rotation: float = 8.0
    max_shift: float = 12.0
    patch_size: int = 32
    max_correspondences: int = 64
    threshold: float = 0.5
    d_ratio: float = 0.85
    inlier_tolerance: float = 2.0
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        augment=AugmentConfig(noise_sigma=0.02, max_rotation=8.0, max_translation=1.0)))
    dog: DoGParams = field(default_factory=DoGParams)
    fast: FastParams = field(default_factory=FastParams)

    def __post_init__(self):
        if not 0 < self.n_train < self.n_pairs:
            raise ValueError("need 0 < n_train < n_pairs so that some pairs are held out")
        if self.patch_size % 2 or self.patch_size < 8:
            raise ValueError("patch_size must be even and >= 8")

    @property
    def half(self) -> int:
        return self.patch_size // 2

    def match_config(self) -> MatchConfig:
        return MatchConfig(m=self.half, n=self.half, threshold=self.threshold,
                           inlier_tolerance=self.inlier_tolerance, seed=self.seed, dog=self.dog, fast=self.fast)


@dataclass
class SurveyPair:
    index: int
    img_a: GrayImage
    img_b: GrayImage
    truth: AffineTransform


def survey_pairs(cfg: ExperimentConfig) -> list[SurveyPair]:
    """Deterministic set of rendered pairs; every pair draws from its own seeded stream."""
    ss = np.random.SeedSequence(cfg.seed)
    out = []
    for i, child in enumerate(ss.spawn(cfg.n_pairs)):
        floor_seed, render_seed, geo_seed = (int(s) for s in child.generate_state(3))
        base = gen_seafloor(floor_seed, cfg.size, cfg.size)
        t = random_survey_transform(np.random.default_rng(geo_seed), cfg.size, cfg.size,
                                    cfg.max_rotation, cfg.max_shift)
        sc = SurveyConfig(seed=render_seed, width=cfg.size, height=cfg.size, transform=t,
                          curve_a=IntensityCurve.gamma(cfg.gamma_a), curve_b=IntensityCurve.gamma(cfg.gamma_b),
                          speckle_strength=cfg.speckle, shading_direction=cfg.shading,
                          noise_sigma=cfg.noise_sigma)
        a, b, t = make_survey_pair(base, sc)
        out.append(SurveyPair(i, a, b, t))
    return out


def pair_dataset(pairs: Sequence[SurveyPair], cfg: ExperimentConfig, seed: int) -> list[SamplePair]:
    """Labelled patch pairs from fused correspondences, capped per survey pair."""
    mc = cfg.match_config()
    rng = np.random.default_rng(seed)
    data: list[SamplePair] = []
    for p in pairs:
        fa, fb = detect_pair(p.img_a, p.img_b, p.truth, cfg.dog, cfg.fast, mc.dedup_radius, mc.margin)
        if len(fa) > cfg.max_correspondences:
            keep = np.sort(rng.choice(len(fa), cfg.max_correspondences, replace=False))
            fa, fb = [fa[k] for k in keep], [fb[k] for k in keep]
        data += build_dataset(p.img_a, p.img_b, fa, fb, cfg.half, cfg.half, int(rng.integers(2 ** 31)))
    return data


def _pooled_rate(per_pair: list[list[MatchResult]], truths: list[AffineTransform], tol: float) -> dict:
    accepted = sum(sum(m.accepted for m in ms) for ms in per_pair)
    inliers = sum(round(inlier_rate(ms, t, tol) * sum(m.accepted for m in ms)) for ms, t in zip(per_pair, truths))
    return {"accepted": int(accepted), "truth_inliers": int(inliers),
            "inlier_rate": inliers / accepted if accepted else 0.0,
            "per_pair": [inlier_rate(ms, t, tol) for ms, t in zip(per_pair, truths)]}


def write_matches_csv(matches: Sequence[MatchResult], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["xa", "ya", "xb", "yb", "score", "accepted", "inlier"])
        for m in matches:
            w.writerow([f"{m.kp_a.x:.4f}", f"{m.kp_a.y:.4f}", f"{m.kp_b.x:.4f}", f"{m.kp_b.y:.4f}",
                        f"{m.score:.6f}", int(m.accepted), int(m.inlier)])


def write_history_csv(history: Sequence[EpochStats], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_acc"])
        for h in history:
            w.writerow([h.epoch, f"{h.loss:.6f}", f"{h.val_acc:.6f}"])


def run_experiment(cfg: ExperimentConfig, out_dir: str | os.PathLike | None = None) -> dict:
    """Train on the first ``n_train`` pairs, then score the rest with the model and the baseline.

    The summary holds only deterministic quantities; wall-clock time is logged, not written.
    """
    started = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    pairs = survey_pairs(cfg)
    train_pairs, held = pairs[:cfg.n_train], pairs[cfg.n_train:]
    train_data = pair_dataset(train_pairs, cfg, cfg.seed)
    test_data = pair_dataset(held, cfg, cfg.seed + 1)
    log.info("dataset: %d training and %d held-out samples", len(train_data), len(test_data))

    model = SiameseModel.init(cfg.arch, cfg.seed)
    tcfg = TrainConfig(**{**asdict_shallow(cfg.train), "seed": cfg.seed})
    model, history = train_model(model, train_data, tcfg)
    report = evaluate_model(model, test_data, cfg.threshold)

    mc = cfg.match_config()
    model_matches = [match_images(p.img_a, p.img_b, p.truth, model, mc) for p in held]
    base_matches = [baseline_ratio_match(p.img_a, p.img_b, mc, cfg.d_ratio) for p in held]
    truths = [p.truth for p in held]
    model_stats = _pooled_rate(model_matches, truths, cfg.inlier_tolerance)
    base_stats = _pooled_rate(base_matches, truths, cfg.inlier_tolerance)
    candidates = sum(len(ms) for ms in model_matches)
    model_stats["candidates"] = candidates
    model_stats["acceptance_rate"] = model_stats["accepted"] / candidates if candidates else 0.0

    summary = {
        "seed": cfg.seed,
        "train_samples": len(train_data),
        "heldout_samples": len(test_data),
        "final_train_loss": history[-1].loss if history else None,
        "heldout": report.to_dict(),
        "model_matching": model_stats,
        "baseline_matching": base_stats,
        "inlier_gap": model_stats["inlier_rate"] - base_stats["inlier_rate"],
    }
    if out is not None:
        save_model(model, out / "model.smdl")
        write_history_csv(history, out / "train_log.csv")
        for p, mm, bm in zip(held, model_matches, base_matches):
            write_matches_csv(mm, out / f"matches_{p.index:02d}.csv")
            write_matches_csv(bm, out / f"baseline_{p.index:02d}.csv")
            save_pgm(render_overlay(p.img_a, p.img_b, mm), out / f"overlay_{p.index:02d}.pgm")
        with open(out / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    log.info("experiment seed %d finished in %.1f s", cfg.seed, time.perf_counter() - started)
    return summary


def asdict_shallow(obj) -> dict:
    return {k: getattr(obj, k) for k in obj.__dataclass_fields__}
