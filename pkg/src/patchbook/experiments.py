"""Scratch-vs-pretrained and ablation-grid comparisons on synthetic faces."""

from __future__ import annotations

import json
import logging
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

from .core import RunConfig
from .data import generate_synthetic, stack_images
from .evaluate import ProbeSettings, run_probe
from .pretrain import AblationSpec, run_pretraining

log = logging.getLogger(__name__)


@dataclass
class ExperimentSetup:
    """Data sizes and probe settings shared by every arm of a comparison.

    Seed ``s`` uses pretraining images ``(1000 + s)``, probe-train ``(2000 + s)`` and
    probe-test ``(3000 + s)`` generator streams, so arms see identical data.
    """

    config: RunConfig = field(default_factory=lambda: RunConfig(epochs=8, batch_size=4, lr=1e-3))
    n_pretrain: int = 200
    n_probe_train: int = 64
    n_probe_test: int = 200
    noise: float = 0.2
    lighting: float = 0.3
    probe: ProbeSettings = field(default_factory=lambda: ProbeSettings(steps=300, lr=3e-3, weight_decay=0.1, hidden=8))
    tasks: tuple = ("alignment",)

    def faces(self, count: int, stream: int):
        return generate_synthetic(count, stream, self.config.image_size, self.config.channels,
                                  noise=self.noise, lighting=self.lighting)


def _probe(checkpoint, setup: ExperimentSetup, seed: int, config: RunConfig) -> dict:
    train = setup.faces(setup.n_probe_train, 2000 + seed)
    test = setup.faces(setup.n_probe_test, 3000 + seed)
    settings = ProbeSettings(**{**asdict(setup.probe), "seed": seed})
    out = {}
    for task in setup.tasks:
        report = run_probe(checkpoint, task, "frozen", train, test, settings, config=config)
        if task == "alignment":
            out["nme_diag"] = report["nme_diag"]
            out["nme_inter_ocular"] = report["nme_inter_ocular"]
        else:
            out["f1_mean"] = report["f1_mean"]
    return out


def pretrain_arm(setup: ExperimentSetup, ablation: AblationSpec, seed: int, out_dir: Union[str, Path]):
    config = setup.config.replace(seed=seed)
    images = stack_images(setup.faces(setup.n_pretrain, 1000 + seed))
    return run_pretraining(config, ablation, images, out_dir, checkpoint_every_epoch=False)


def scratch_vs_pretrained(setup: ExperimentSetup, seeds: Sequence[int], work_dir: Union[str, Path]) -> dict:
    """Frozen-probe metrics of a random encoder and a pretrained one, per seed."""
    rows = []
    for seed in seeds:
        result = pretrain_arm(setup, AblationSpec(), seed, Path(work_dir) / f"seed{seed}")
        config = setup.config.replace(seed=seed)
        scratch = _probe(None, setup, seed, config)
        pretrained = _probe(result.checkpoint, setup, seed, config)
        row = {"seed": seed, "scratch": scratch, "pretrained": pretrained}
        if "nme_diag" in scratch:
            row["nme_rel_gain"] = 1.0 - pretrained["nme_diag"] / scratch["nme_diag"]
        rows.append(row)
        log.info("seed %d: %s", seed, row)
    summary = {"rows": rows}
    if rows and "nme_rel_gain" in rows[0]:
        summary["median_nme_rel_gain"] = statistics.median(r["nme_rel_gain"] for r in rows)
    return summary


TABLE7_ARMS = {
    "1xK tokens": AblationSpec("single_token"),
    "3xK tokens + random selection": AblationSpec("random", n_override=3),
    "5xK tokens + random selection": AblationSpec("random", n_override=5),
    "3xK tokens + belief predictor": AblationSpec("belief", n_override=3),
    "5xK tokens + belief predictor": AblationSpec("belief", n_override=5),
    "3xK belief, without incubation": AblationSpec("belief", n_override=3, incubation_enabled=False),
}

PRESETS = {
    "table7-mini": dict(arms=list(TABLE7_ARMS), seeds=(0, 1, 2), tasks=("alignment", "parsing")),
    "table7-smoke": dict(arms=list(TABLE7_ARMS), seeds=(0,), tasks=("alignment",), epochs=2, n_pretrain=32,
                         n_probe_test=32, probe_steps=50),
}


def run_ablation(setup: ExperimentSetup, arms: Sequence[str], seeds: Sequence[int],
                 work_dir: Union[str, Path]) -> list[dict]:
    """One row per arm with per-seed metrics and their medians."""
    rows = []
    for arm in arms:
        ablation = TABLE7_ARMS[arm]
        per_seed = []
        for seed in seeds:
            result = pretrain_arm(setup, AblationSpec(**asdict(ablation)), seed,
                                  Path(work_dir) / arm.replace(" ", "_").replace(",", "") / f"seed{seed}")
            metrics = _probe(result.checkpoint, setup, seed, setup.config.replace(seed=seed))
            metrics["final_mse"] = result.epoch_mse[-1]
            per_seed.append(metrics)
        row = {"arm": arm, "ablation": asdict(ablation), "per_seed": per_seed}
        for key in per_seed[0]:
            row[key] = statistics.median(m[key] for m in per_seed)
        rows.append(row)
        log.info("arm %s: %s", arm, {k: v for k, v in row.items() if k != "per_seed"})
    return rows


def setup_from_preset(name: str, config: Optional[RunConfig] = None) -> tuple[ExperimentSetup, list, tuple]:
    preset = dict(PRESETS[name])
    setup = ExperimentSetup(tasks=preset.pop("tasks"))
    if config is not None:
        setup.config = config
    if "epochs" in preset:
        setup.config = setup.config.replace(epochs=preset.pop("epochs"))
    if "n_pretrain" in preset:
        setup.n_pretrain = preset.pop("n_pretrain")
    if "n_probe_test" in preset:
        setup.n_probe_test = preset.pop("n_probe_test")
    if "probe_steps" in preset:
        setup.probe.steps = preset.pop("probe_steps")
    return setup, preset["arms"], tuple(preset["seeds"])


def format_table(rows: Sequence[dict]) -> str:
    keys = [k for k in ("f1_mean", "nme_diag", "final_mse") if k in rows[0]]
    lines = ["arm".ljust(34) + "".join(k.rjust(12) for k in keys)]
    for row in rows:
        lines.append(row["arm"].ljust(34) + "".join(f"{row[k]:12.4f}" for k in keys))
    return "\n".join(lines)
