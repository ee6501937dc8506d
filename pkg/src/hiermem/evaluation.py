"""Metrics, ablation runner and 2-d projection of read vectors.

Scores are per-frame probabilities of the tampered class; a frame is
called tampered when its score reaches the threshold.  Error rates follow
the presentation-attack convention: the attack error rate is the fraction
of tampered frames called genuine, the bona-fide error rate the fraction
of genuine frames called tampered.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import Episode, FAKE, REAL
from .memory import FeatureGrid
from .model import AblationFlags, HmnModel, init_hmn
from .numerics import Tensor
from .training import (Adam, DiscriminatorParams, LossFlags, TrainConfig,
                       init_discriminator, train_epoch)

log = logging.getLogger(__name__)

ABLATION_VARIANTS = (
    "full", "no-beta", "no-alpha", "no-gamma",
    "no-beta-alpha", "no-beta-gamma", "no-alpha-gamma", "no-beta-alpha-gamma",
    "no-gan", "no-eta", "no-gan-eta",
)


@dataclass
class ScoreSet:
    """Per-frame tampered-class scores with episode ids and true labels."""

    episode_ids: np.ndarray
    labels: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.episode_ids = np.asarray(self.episode_ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not (len(self.episode_ids) == len(self.labels) == len(self.scores)):
            raise ValueError("episode_ids, labels and scores must align")
        if np.any(self.scores < 0) or np.any(self.scores > 1):
            raise ValueError("scores must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.scores)


@dataclass
class MetricsReport:
    """One evaluation row; rates are percentages."""

    variant: str
    frame_acc: float
    video_acc: float
    eer: float
    apcer: float
    bpcer: float
    mse_future: float
    threshold_at_eer: float

    def as_dict(self) -> dict:
        return dict(variant=self.variant, frame_acc=self.frame_acc,
                    video_acc=self.video_acc, eer=self.eer, apcer=self.apcer,
                    bpcer=self.bpcer, mse_future=self.mse_future,
                    threshold_at_eer=self.threshold_at_eer)

    CSV_HEADER = "variant,frame_acc,video_acc,eer,apcer,bpcer,mse_future,threshold_at_eer"

    def csv_row(self) -> str:
        return "%s,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g" % (
            self.variant, self.frame_acc, self.video_acc, self.eer,
            self.apcer, self.bpcer, self.mse_future, self.threshold_at_eer)


def frame_accuracy(scores: ScoreSet, threshold: float = 0.5) -> float:
    """Percent of frames whose thresholded score matches the label."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    predicted = scores.scores >= threshold
    actual = scores.labels == FAKE
    return 100.0 * float((predicted == actual).mean())


def video_accuracy(scores: ScoreSet, threshold: float = 0.5) -> float:
    """Majority vote of thresholded frame predictions per episode; ties
    count as tampered."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    predicted = scores.scores >= threshold
    correct = 0
    ids = np.unique(scores.episode_ids)
    for ep in ids:
        mask = scores.episode_ids == ep
        votes_fake = int(predicted[mask].sum())
        votes_real = int((~predicted[mask]).sum())
        verdict = FAKE if votes_fake >= votes_real else REAL
        if verdict == scores.labels[mask][0]:
            correct += 1
    return 100.0 * correct / len(ids)


def apcer_bpcer(scores: ScoreSet, threshold: float) -> tuple[float, float]:
    """(attack error %, bona-fide error %) at a fixed threshold."""
    fake = scores.labels == FAKE
    real = ~fake
    if not fake.any() or not real.any():
        raise ValueError("both classes must be present")
    predicted_fake = scores.scores >= threshold
    apcer = 100.0 * float((~predicted_fake[fake]).mean())
    bpcer = 100.0 * float(predicted_fake[real].mean())
    return apcer, bpcer


def eer(scores: ScoreSet) -> tuple[float, float]:
    """Sweep all distinct scores as thresholds and return
    ((far + frr) / 2 as a percent, threshold) where |far - frr| is least.

    far is the fraction of tampered frames scored below the threshold,
    frr the fraction of genuine frames scored at or above it.
    """
    fake = scores.labels == FAKE
    real = ~fake
    if not fake.any() or not real.any():
        raise ValueError("both classes must be present to compute an equal error "
                         "rate; the evaluated split has only one label")
    best = None
    for threshold in np.unique(scores.scores):
        far = float((scores.scores[fake] < threshold).mean())
        frr = float((scores.scores[real] >= threshold).mean())
        gap = abs(far - frr)
        if best is None or gap < best[0]:
            best = (gap, (far + frr) / 2.0, float(threshold))
    return 100.0 * best[1], best[2]


def future_mse(pred_grids: list[np.ndarray], true_grids: list[np.ndarray]) -> float:
    """Mean squared entry-wise error over a list of grid pairs."""
    if len(pred_grids) != len(true_grids) or not pred_grids:
        raise ValueError("need equal, non-empty grid lists")
    total = 0.0
    count = 0
    for p, t in zip(pred_grids, true_grids):
        p = np.asarray(p)
        t = np.asarray(t)
        if p.shape != t.shape:
            raise ValueError("grid shapes differ")
        total += float(((p - t) ** 2).sum())
        count += p.size
    return total / count


def pca_project2d(vectors: list[np.ndarray], tol: float = 1e-9,
                  max_iters: int = 10_000) -> list[tuple[float, float]]:
    """Project onto the top-2 principal directions found by power
    iteration with deflation.  Degenerate (zero-variance) input yields all
    zeros with a warning."""
    if len(vectors) < 3:
        raise ValueError("need at least 3 vectors")
    x = np.stack([np.asarray(v, dtype=np.float64) for v in vectors])
    x = x - x.mean(axis=0)
    cov = (x.T @ x) / (len(vectors) - 1)
    if float(np.abs(cov).max()) < 1e-300:
        warnings.warn("degenerate input: all vectors identical; returning zeros")
        return [(0.0, 0.0) for _ in vectors]

    def orthogonal_to(v1):
        # deterministic unit vector orthogonal to v1
        basis = np.zeros_like(v1)
        basis[int(np.argmin(np.abs(v1)))] = 1.0
        out = basis - (basis @ v1) * v1
        return out / np.linalg.norm(out)

    def top_direction(mat, ortho=None):
        v = np.ones(mat.shape[0]) / np.sqrt(mat.shape[0])
        if ortho is not None:
            v = v - (v @ ortho) * ortho
            n = np.linalg.norm(v)
            v = orthogonal_to(ortho) if n < 1e-12 else v / n
        for _ in range(max_iters):
            nxt = mat @ v
            if ortho is not None:
                nxt = nxt - (nxt @ ortho) * ortho
            norm = np.linalg.norm(nxt)
            if norm < 1e-300:
                # no variance left along the allowed subspace
                return (orthogonal_to(ortho) if ortho is not None else v), 0.0
            nxt = nxt / norm
            if np.linalg.norm(nxt - v) < tol or np.linalg.norm(nxt + v) < tol:
                v = nxt
                break
            v = nxt
        lam = float(v @ (mat @ v))
        return v, lam

    v1, l1 = top_direction(cov)
    deflated = cov - l1 * np.outer(v1, v1)
    v2, _ = top_direction(deflated, ortho=v1)
    return [(float(row @ v1), float(row @ v2)) for row in x]


# -- model scoring ---------------------------------------------------------------


def score_episodes(model, episodes: list[Episode],
                   flags: AblationFlags | None = None,
                   ) -> tuple[ScoreSet, float, list[np.ndarray]]:
    """Run the model over episodes (no training, deterministic noise) and
    collect per-frame tampered-class scores, the future-grid MSE, and the
    per-frame read vectors."""
    ids, labels, scores = [], [], []
    preds, trues = [], []
    reads = []
    for ep in episodes:
        state = model.new_state()
        for t, grid in enumerate(ep.frames):
            out, state = model.step(state, grid, noise=None, flags=flags)
            ids.append(ep.episode_id)
            labels.append(ep.labels[t])
            scores.append(float(out.y_hat.data[FAKE]))
            preds.append(out.eta_hat.data.T.copy())
            trues.append(ep.futures[t].patches)
            reads.append(out.r.data.copy())
    score_set = ScoreSet(np.array(ids), np.array(labels), np.array(scores))
    return score_set, future_mse(preds, trues), reads


def evaluate_model(model, episodes: list[Episode], variant: str = "full",
                   threshold: float = 0.5, flags: AblationFlags | None = None,
                   ) -> MetricsReport:
    scores, mse_val, _ = score_episodes(model, episodes, flags=flags)
    eer_val, eer_thr = eer(scores)
    ap, bp = apcer_bpcer(scores, threshold)
    return MetricsReport(
        variant=variant,
        frame_acc=frame_accuracy(scores, threshold),
        video_acc=video_accuracy(scores, threshold),
        eer=eer_val, apcer=ap, bpcer=bp,
        mse_future=mse_val, threshold_at_eer=eer_thr,
    )


# -- ablations --------------------------------------------------------------------


def variant_flags(variant: str) -> LossFlags:
    """Translate a variant name into loss/attention switches."""
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}; "
                         f"choose from {', '.join(ABLATION_VARIANTS)}")
    removed = set() if variant == "full" else set(variant[len("no-"):].split("-"))
    att = AblationFlags(
        use_beta="beta" not in removed,
        use_alpha="alpha" not in removed,
        use_gamma="gamma" not in removed,
    )
    return LossFlags(use_gan="gan" not in removed, use_eta="eta" not in removed,
                     attention=att)


def run_ablation(variant: str, cfg: TrainConfig, episodes: list[Episode],
                 split_ratios: tuple[float, float, float] = (0.7, 0.15, 0.15),
                 ) -> MetricsReport:
    """Train one variant under the configured seed and report test metrics."""
    from .data import split

    flags = variant_flags(variant)
    train_eps, _, test_eps = split(episodes, split_ratios, cfg.seed)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed)))
    model = HmnModel(init_hmn(rng, cfg.model_config()))
    disc = init_discriminator(rng, cfg.model_config()) if (flags.use_gan and flags.use_eta) else None
    g_opt = Adam(model.named_tensors(), cfg.learning_rate)
    d_opt = Adam(disc.named_tensors(), cfg.learning_rate) if disc is not None else None
    done = 0
    while done < cfg.steps:
        trace = train_epoch(model, disc, train_eps, cfg, rng, flags=flags,
                            max_steps=cfg.steps - done, g_opt=g_opt, d_opt=d_opt,
                            start_step=done)
        done += len(trace.rows)
    report = evaluate_model(model, test_eps, variant=variant, flags=flags.attention)
    log.info("ablation %s: %s", variant, report.as_dict())
    return report


def reports_to_csv(reports: list[MetricsReport], path) -> None:
    with open(path, "w") as fh:
        fh.write(MetricsReport.CSV_HEADER + "\n")
        for r in reports:
            fh.write(r.csv_row() + "\n")


def reports_to_json(reports: list[MetricsReport], path) -> None:
    with open(path, "w") as fh:
        json.dump([r.as_dict() for r in reports], fh, indent=2)
        fh.write("\n")
