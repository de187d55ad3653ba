#!/usr/bin/env python3
"""
Street Height Estimation - Acceptance Validation Script
Runs the synthetic-oracle acceptance checks at full volume and reports per criterion
"""

import argparse
import filecmp
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

REPO_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO_ROOT))

from street_height.calibration import (  # noqa: E402
    CornerObservation,
    bearing_to,
    calibrate_two_corners,
)
from street_height.candidates import CORNER_CLASSES  # noqa: E402
from street_height.cli import main as cli_main  # noqa: E402
from street_height.config import PipelineConfig, TrainingConfig  # noqa: E402
from street_height.edgemap import EdgeMap, LineSegment, line_pixels  # noqa: E402
from street_height.embedding import (  # noqa: E402
    EmbeddingNet,
    embed_batch,
    fit_head,
    gradient_check,
    hard_triplet_probabilities,
    sample_rows,
    scale_patches,
    train,
)
from street_height.geometry import CameraPose  # noqa: E402
from street_height.logging_config import configure_logging  # noqa: E402
from street_height.pipeline import SceneInputs, run_pipeline, run_tall_building  # noqa: E402
from street_height.ranking import (  # noqa: E402
    DecisionMatrix,
    entropy_weights,
    minmax_scale,
    refine_roofline,
    score_matrix,
)
from street_height.rectify import Homography, PointCorrespondence, estimate_homography  # noqa: E402
from street_height.scene import (  # noqa: E402
    CORNER_NEGATIVE,
    generate_patch_dataset,
    random_scene_spec,
    read_patch_set,
    render,
    tall_building_spec,
    unoccluded_buildings,
)


class PipelineValidator:
    def __init__(self, scenes: int = 100, noise_scenes: int = 50, trials: int = 1000,
                 with_training: bool = False):
        self.scenes = scenes
        self.noise_scenes = noise_scenes
        self.trials = trials
        self.with_training = with_training
        self.results = {}

    def print_header(self, title):
        """Print formatted header"""
        print(f"\n{'='*60}")
        print(f"🔍 {title}")
        print(f"{'='*60}")

    def print_status(self, message, status='INFO'):
        """Print formatted status message"""
        icons = {'SUCCESS': '✅', 'ERROR': '❌', 'WARNING': '⚠️', 'INFO': 'ℹ️'}
        icon = icons.get(status, 'ℹ️')
        print(f"{icon} {message}")

    def record(self, name, passed, message):
        self.results[name] = passed
        self.print_status(message, 'SUCCESS' if passed else 'ERROR')

    def validate_calibration(self):
        self.print_header("Calibration Exactness")
        rng = np.random.default_rng(1)
        start = time.time()
        worst = 0.0
        done = 0
        while done < self.trials:
            pose = CameraPose(tuple(rng.uniform(-100, 100, 2)), rng.uniform(-math.pi, math.pi))
            corners = []
            for _ in range(2):
                depth, bearing = rng.uniform(5, 80), rng.uniform(-1.2, 1.2)
                lateral = depth * math.tan(bearing)
                f, r = pose.forward, pose.right
                corners.append((pose.position[0] + depth * f[0] + lateral * r[0],
                                pose.position[1] + depth * f[1] + lateral * r[1]))
            b1, b2 = bearing_to(pose, corners[0]), bearing_to(pose, corners[1])
            if abs(math.tan(b1) - math.tan(b2)) < 0.05:
                continue
            computed = calibrate_two_corners(CornerObservation(corners[0], b1), CornerObservation(corners[1], b2),
                                             pose.heading)
            worst = max(worst, math.hypot(computed[0] - pose.position[0], computed[1] - pose.position[1]))
            done += 1
        elapsed = time.time() - start
        self.record('calibration', worst < 1e-9 and elapsed < 1.0,
                    f"{self.trials} poses: worst error {worst:.2e} m in {elapsed:.2f} s")

    def validate_end_to_end(self):
        self.print_header("End-to-End Synthetic Accuracy")
        config = PipelineConfig()
        start = time.time()
        hits = total = 0
        for seed in range(self.scenes):
            rendered = render(random_scene_spec(seed))
            report = run_pipeline(SceneInputs.from_rendered(rendered), config)
            for building_id in unoccluded_buildings(rendered):
                estimate = report.estimate(building_id)
                total += 1
                if estimate is not None and estimate.abs_error is not None and estimate.abs_error <= 0.25:
                    hits += 1
        elapsed = time.time() - start
        share = hits / total if total else 0.0
        self.record('end_to_end', share >= 0.95,
                    f"{hits}/{total} unoccluded buildings within 0.25 m ({share:.1%}) in {elapsed:.1f} s")
        if elapsed >= 60:
            self.print_status(f"runtime {elapsed:.1f} s exceeds 60 s", 'WARNING')

    @staticmethod
    def _unoccluded_errors(rendered, report):
        errors = []
        for building_id in unoccluded_buildings(rendered):
            estimate = report.estimate(building_id)
            error = estimate.abs_error if estimate is not None else None
            # a building the run could not measure counts as infinitely wrong
            errors.append(math.inf if error is None else error)
        return errors

    def validate_gps_gate(self):
        self.print_header("GPS-Noise Calibration Gate")
        calibrated = PipelineConfig()
        uncalibrated = calibrated.with_overrides(calibration_threshold_m=1e-9)
        with_cal, without_cal = [], []
        rule_ok = True
        for seed in range(self.noise_scenes):
            rendered = render(random_scene_spec(seed, gps_noise_sigma=1.5))
            inputs = SceneInputs.from_rendered(rendered)
            report = run_pipeline(inputs, calibrated)
            cal = report.calibration
            if cal.displacement is not None and cal.displacement >= 3.0:
                rule_ok &= cal.position == inputs.pose.position and not cal.accepted
            if not cal.accepted:
                continue
            baseline = run_pipeline(inputs, uncalibrated)
            with_cal += self._unoccluded_errors(rendered, report)
            without_cal += self._unoccluded_errors(rendered, baseline)
        self.record('gps_fallback', rule_ok, "3 m fallback applied on every over-threshold calibration")
        if not with_cal or not without_cal:
            self.record('gps_gate', False, "no accepted calibrations to compare")
            return
        m_cal, m_raw = float(np.median(with_cal)), float(np.median(without_cal))
        if math.isinf(m_raw):
            reduction = 1.0 if math.isfinite(m_cal) else 0.0
        else:
            reduction = 1.0 - m_cal / m_raw if m_raw > 0 else 0.0
        self.record('gps_gate', reduction >= 0.30,
                    f"median error {m_raw:.3f} m -> {m_cal:.3f} m ({reduction:.0%} reduction)")

    def validate_homography(self):
        self.print_header("Homography Estimation")
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(self.trials):
            scale = np.array([[1, 1, 50], [1, 1, 50], [1e-4, 1e-4, 0]])
            truth = Homography(np.eye(3) + rng.normal(0, 0.05, (3, 3)) * scale)
            source = rng.uniform(0, 640, (6, 2))
            target = truth.apply(source)
            pairs = [PointCorrespondence(tuple(s), tuple(t)) for s, t in zip(source, target)]
            worst = max(worst, float(np.max(np.abs(estimate_homography(pairs).vector - truth.vector))))
        self.record('homography', worst <= 1e-9, f"{self.trials} homographies: worst parameter error {worst:.2e}")

        rendered = render(tall_building_spec())
        report = run_tall_building(SceneInputs.from_rendered(rendered), PipelineConfig())
        estimate = report.estimate("tower")
        error = estimate.abs_error if estimate is not None else None
        self.record('tall_building', error is not None and error <= 0.5,
                    f"25 degree tower: height error {error if error is not None else 'n/a'} m")

    def validate_ranking(self):
        self.print_header("Entropy Ranking")
        rng = np.random.default_rng(6)
        worst_sum = 0.0
        dominance_ok = True
        for _ in range(10_000):
            m, n = rng.integers(2, 8), rng.integers(1, 6)
            polarity = tuple(bool(p) for p in rng.integers(0, 2, n))
            matrix = DecisionMatrix(rng.uniform(0, 100, (m, n)), polarity)
            worst_sum = max(worst_sum, abs(entropy_weights(minmax_scale(matrix)).weights.sum() - 1.0))
            values = matrix.values.copy()
            better = np.array([1.0 if p else -1.0 for p in polarity]) * rng.uniform(0, 5, n)
            values[0] = values[1] + better
            scores = score_matrix(DecisionMatrix(values, polarity))
            dominance_ok &= scores[0] >= scores[1] - 1e-12
        self.record('entropy_weights', worst_sum <= 1e-9, f"weights sum to 1 within {worst_sum:.1e}")
        self.record('dominance', bool(dominance_ok), "no dominated candidate outranks its dominator")

    def validate_sampler(self):
        self.print_header("Hard Triplet Sampler")
        rng = np.random.default_rng(7)
        e_t, e_p = rng.normal(size=8), rng.normal(size=8)
        negatives = rng.normal(size=(5, 8))
        probs = hard_triplet_probabilities(e_t / np.linalg.norm(e_t), e_p / np.linalg.norm(e_p),
                                           negatives / np.linalg.norm(negatives, axis=1, keepdims=True))
        draws = sample_rows(rng, np.tile(probs, (1_000_000, 1)))
        frequencies = np.bincount(draws, minlength=len(probs)) / len(draws)
        gap = float(np.max(np.abs(frequencies - probs)))
        self.record('sampler', abs(probs.sum() - 1) <= 1e-9 and gap <= 0.01,
                    f"probabilities sum {probs.sum():.12f}, worst frequency gap {gap:.4f}")

    def validate_refinement(self):
        self.print_header("Occluded Roofline Refinement")
        rng = np.random.default_rng(8)
        recovered = 0
        masked_ok = True
        for _ in range(100):
            row = int(rng.integers(100, 500))
            p0, p1 = (int(rng.integers(40, 120)), row), (int(rng.integers(400, 600)), row + int(rng.integers(-40, 41)))
            pixels = line_pixels(p0, p1)
            canvas = np.zeros((640, 640))
            canvas[pixels[:, 1], pixels[:, 0]] = 255
            trees = np.zeros((640, 640), dtype=bool)
            third = len(pixels) // 3
            hidden = pixels[third:2 * third]
            trees[hidden[:, 1], hidden[:, 0]] = True
            canvas[hidden[:, 1], hidden[:, 0]] = 0
            edge_map = EdgeMap(canvas)
            candidate = type("Candidate", (), {"segment": LineSegment(p0, p1, len(pixels), 0.0)})()
            none = np.zeros_like(trees)
            if abs(refine_roofline(candidate, none, trees, edge_map).lam - len(pixels)) <= 2:
                recovered += 1
            blocked = refine_roofline(candidate, np.ones_like(trees), trees, edge_map)
            masked_ok &= blocked.lam == 0 and blocked.omega == 0
        self.record('refinement', recovered >= 90, f"{recovered}/100 tree-hidden rooflines recovered")
        self.record('full_mask', bool(masked_ok), "fully masked candidates yield lambda = omega = 0")

    def validate_training(self):
        self.print_header("Embedding Training")
        net = EmbeddingNet(16).double()
        patches = np.random.default_rng(9).uniform(0, 1, (6, 28, 28))
        error = gradient_check(net, patches)
        self.record('gradient_check', error <= 1e-4, f"gradient check relative error {error:.2e}")
        if not self.with_training:
            self.print_status("full training run skipped (use --with-training)", 'INFO')
            return
        with tempfile.TemporaryDirectory() as tmp:
            specs = [random_scene_spec(seed, n_trees=2) for seed in range(60)]
            generate_patch_dataset(specs, tmp)
            train_x, train_y = read_patch_set(Path(tmp) / "train")
            test_x, test_y = read_patch_set(Path(tmp) / "test")
        train_y, test_y = np.asarray(train_y), np.asarray(test_y)
        known = np.isin(train_y, CORNER_CLASSES)
        result = train(TrainingConfig(), scale_patches(train_x[known]), train_y[known].tolist(),
                       unlabeled=scale_patches(train_x[train_y == CORNER_NEGATIVE]))
        head = fit_head(embed_batch(result.net, scale_patches(train_x[known])), train_y[known].tolist())
        test_known = np.isin(test_y, CORNER_CLASSES)
        embeddings = embed_batch(result.net, scale_patches(test_x))
        closed = np.asarray(head.classes)[head.decide(embeddings[test_known])[0]]
        accuracy = float(np.mean(closed == test_y[test_known]))
        rejected = float(np.mean(np.asarray(head.predict(embeddings[test_y == CORNER_NEGATIVE])) == "reject"))
        trace = result.moving_average(100)
        self.record('closed_set', accuracy >= 0.90, f"closed-set accuracy {accuracy:.1%}")
        self.record('rejection', rejected >= 0.80, f"negative rejection {rejected:.1%}")
        self.record('loss_trace', bool(trace[-1] < trace[0]), f"moving-average loss {trace[0]:.3f} -> {trace[-1]:.3f}")

    def validate_determinism(self):
        self.print_header("Determinism")
        demo = REPO_ROOT / "config" / "demo_scene.json"
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            for run in ("a", "b"):
                cli_main(["gen", "--seed", "7", "--scenes", "1", "--out", str(tmp / run / "gen")])
                cli_main(["estimate", "--scene", str(demo), "--oracle-classifier", "--out", str(tmp / run / "est")])
            match, mismatch, errors = filecmp.cmpfiles(
                tmp / "a", tmp / "b",
                ["gen/scene/scene.json", "gen/scene/edge_map.pgm", "gen/dataset/train/manifest.tsv",
                 "est/report.json", "est/overlay.ppm"],
                shallow=False,
            )
        self.record('determinism', not mismatch and not errors, f"{len(match)} output files byte-identical")

    def generate_validation_report(self):
        self.print_header("Validation Summary")
        passed = sum(1 for ok in self.results.values() if ok)
        total = len(self.results)
        for name, ok in self.results.items():
            self.print_status(name, 'SUCCESS' if ok else 'ERROR')
        self.print_status(f"{passed}/{total} checks passed", 'SUCCESS' if passed == total else 'WARNING')
        return passed == total

    def run_full_validation(self):
        steps = [
            ("Calibration", self.validate_calibration),
            ("End-to-end", self.validate_end_to_end),
            ("GPS gate", self.validate_gps_gate),
            ("Homography", self.validate_homography),
            ("Ranking", self.validate_ranking),
            ("Sampler", self.validate_sampler),
            ("Refinement", self.validate_refinement),
            ("Training", self.validate_training),
            ("Determinism", self.validate_determinism),
        ]
        for step_name, step_function in steps:
            try:
                step_function()
            except Exception as e:
                self.results[step_name] = False
                self.print_status(f"{step_name} validation failed with exception: {str(e)}", 'ERROR')
        return self.generate_validation_report()


def main():
    parser = argparse.ArgumentParser(description='Validate the street height pipeline against synthetic oracles')
    parser.add_argument('--scenes', type=int, default=100, help='Scenes for the end-to-end check')
    parser.add_argument('--noise-scenes', type=int, default=50, help='Scenes for the GPS-noise check')
    parser.add_argument('--trials', type=int, default=1000, help='Trials for calibration and homography checks')
    parser.add_argument('--with-training', action='store_true', help='Include the full embedding training run')
    parser.add_argument('--log-level', default='WARNING', help='Pipeline log level')
    args = parser.parse_args()

    configure_logging(args.log_level)
    validator = PipelineValidator(args.scenes, args.noise_scenes, args.trials, args.with_training)
    if validator.run_full_validation():
        print("\n🎉 Pipeline validation completed successfully!")
        sys.exit(0)
    print("\n❌ Pipeline validation failed. Please review the issues above.")
    sys.exit(1)


if __name__ == "__main__":
    main()
