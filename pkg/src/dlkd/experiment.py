"""Three-arm comparison: enhanced teacher, distilled student, plain baseline.

For each seed the harness trains the teacher, caches its logits on the
training split, trains the student and the baseline, and evaluates all three
on the held-out split. Per-seed artifacts land in ``out/seed-<s>/``; the
report is rewritten after every finished seed so partial results survive a
failure.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dlkd import data as D
from dlkd.config import RunConfig, format_config, load_config
from dlkd.errors import ExperimentError
from dlkd.metrics import VARIANTS, MetricsRecord, evaluate
from dlkd.model import save_model
from dlkd.train import cache_teacher_logits, train_baseline, train_student, train_teacher

log = logging.getLogger(__name__)

ROW_LABELS = {
    "baseline": "baseline (raw input, no KD)",
    "teacher": "teacher (enhanced input)",
    "student": "student (raw input, KD)",
}


@dataclass
class ExperimentReport:
    provenance: dict
    records: dict = field(default_factory=dict)  # seed -> {variant: MetricsRecord}

    def seeds(self):
        return sorted(self.records)

    def top1(self, variant):
        return np.array([self.records[s][variant].top1 for s in self.seeds()])

    def top5(self, variant):
        return np.array([self.records[s][variant].top5 for s in self.seeds()])

    def mean(self, variant, metric="top1"):
        return float(getattr(self, metric)(variant).mean())

    def std(self, variant, metric="top1"):
        """Sample standard deviation across seeds (0 for a single seed)."""
        values = getattr(self, metric)(variant)
        return float(values.std(ddof=1)) if len(values) > 1 else 0.0

    def delta(self, variant, other, metric="top1"):
        return self.mean(variant, metric) - self.mean(other, metric)

    def deltas(self):
        return {
            "student-baseline": self.delta("student", "baseline"),
            "student-teacher": self.delta("student", "teacher"),
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["seed", "variant", "top1", "top5", "n"])
            for seed in self.seeds():
                for variant in VARIANTS:
                    r = self.records[seed][variant]
                    writer.writerow([seed, variant, repr(r.top1), repr(r.top5), r.n])
            for variant in VARIANTS:
                writer.writerow(["mean", variant, repr(self.mean(variant)), repr(self.mean(variant, "top5")), ""])
                writer.writerow(["std", variant, repr(self.std(variant)), repr(self.std(variant, "top5")), ""])
            for name in ("student-baseline", "student-teacher"):
                a, b = name.split("-")
                writer.writerow(["delta", name, repr(self.delta(a, b)), repr(self.delta(a, b, "top5")), ""])

    def table(self):
        seeds = self.seeds()
        header = f"{'model':<30}" + "".join(f"  seed {s:<4}" for s in seeds) + "  top-1 mean±std   top-5 mean"
        lines = [f"dataset: {self.provenance.get('dataset', '?')}", header, "-" * len(header)]
        for variant in VARIANTS:
            cells = "".join(f"  {100 * self.records[s][variant].top1:9.2f}" for s in seeds)
            lines.append(
                f"{ROW_LABELS[variant]:<30}{cells}  {100 * self.mean(variant):6.2f} ± {100 * self.std(variant):5.2f}"
                f"   {100 * self.mean(variant, 'top5'):6.2f}"
            )
        lines.append("-" * len(header))
        for name, value in self.deltas().items():
            lines.append(f"{'delta ' + name.replace('-', ' - '):<30}  {100 * value:+.2f} points (top-1)")
        return "\n".join(lines) + "\n"

    def write(self, out_dir):
        out_dir = Path(out_dir)
        self.write_csv(out_dir / "report.csv")
        (out_dir / "report.txt").write_text(self.table())


def run_seed(train, test, config, seed, seed_dir=None):
    """All three arms for one seed; returns {variant: MetricsRecord}."""
    cfg = config.for_seed(seed)
    if seed_dir is not None:
        seed_dir = Path(seed_dir)
        seed_dir.mkdir(parents=True, exist_ok=True)
    arm = "teacher"
    try:
        teacher, run = train_teacher(train, cfg)
        results = {"teacher": evaluate(teacher, test, cfg.enhance, "teacher", seed)}
        _save(seed_dir, "teacher", teacher, run)

        arm = "cache-logits"
        store = cache_teacher_logits(teacher, cfg.enhance, train)
        if seed_dir is not None:
            store.save(seed_dir / "teacher.logits")

        arm = "student"
        student, run = train_student(train, store, cfg)
        results["student"] = evaluate(student, test, None, "student", seed)
        _save(seed_dir, "student", student, run)

        arm = "baseline"
        baseline, run = train_baseline(train, cfg)
        results["baseline"] = evaluate(baseline, test, None, "baseline", seed)
        _save(seed_dir, "baseline", baseline, run)
    except Exception as exc:
        raise ExperimentError(f"{arm} arm failed for seed {seed}: {exc}", arm=arm, seed=seed, cause=exc) from exc
    log.info("seed %d: teacher %.3f student %.3f baseline %.3f", seed,
             results["teacher"].top1, results["student"].top1, results["baseline"].top1)
    return results


def _save(seed_dir, name, model, run):
    if seed_dir is None:
        return
    save_model(model, seed_dir / f"{name}.ckpt")
    run.write_csv(seed_dir / f"{name}.csv")


def _provenance(dataset, config, n_train, n_test):
    params = dict(dataset.params)
    name = params.get("name") or "generated " + " ".join(f"{k}={v}" for k, v in sorted(params.items()))
    return {"dataset": name, "params": params, "n_train": n_train, "n_test": n_test,
            "config": format_config(config)}


def run_experiment(config, out_dir=None, workers=None):
    """Run every seed in ``config`` (a RunConfig or a path to a config file)."""
    base_dir = None
    if not isinstance(config, RunConfig):
        base_dir = Path(config).parent
        config = load_config(config)
    workers = config.workers if workers is None else workers
    dataset = config.data.load(base_dir)
    train, test = D.split(dataset, config.data.train_fraction, config.data.split_seed)
    report = ExperimentReport(_provenance(dataset, config, len(train), len(test)))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(report.provenance["config"])

    def seed_dir(seed):
        return None if out_dir is None else out_dir / f"seed-{seed}"

    def finish(seed, results):
        report.records[seed] = results
        if out_dir is not None:
            report.write(out_dir)

    if workers <= 1 or len(config.seeds) == 1:
        for seed in config.seeds:
            finish(seed, run_seed(train, test, config, seed, seed_dir(seed)))
        return report

    with ProcessPoolExecutor(max_workers=min(workers, len(config.seeds))) as pool:
        futures = {seed: pool.submit(run_seed, train, test, config, seed, seed_dir(seed)) for seed in config.seeds}
        failure = None
        for seed, future in futures.items():
            try:
                finish(seed, future.result())
            except ExperimentError as exc:
                failure = failure or exc
        if failure is not None:
            raise failure
    return report


def read_report(path):
    """Per-seed records back from ``report.csv`` (summary rows are recomputed, not read)."""
    records = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["seed"] in ("mean", "std", "delta"):
                continue
            seed = int(row["seed"])
            records.setdefault(seed, {})[row["variant"]] = MetricsRecord(
                row["variant"], float(row["top1"]), float(row["top5"]), int(row["n"]), seed
            )
    return ExperimentReport({}, records)
