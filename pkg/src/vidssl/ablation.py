"""Predefined experiment grids and the row-by-row runner.

Four grids cover the standard sweeps: augmentation/pretext combinations
(table1, 11 rows), joint-objective component toggles under BYOL (table2,
16 rows), the four contrastive frameworks x pretext combinations (table3,
16 rows), and overlap candidate-set size with the overlap task alone
(table4, 6 rows).  Every row trains with a short budget on one shared
dataset and records a linear-probe accuracy; failures are recorded per row
without aborting the grid.
"""

from __future__ import annotations

import csv
import os
import traceback
from dataclasses import dataclass

from .config import ExperimentConfig, override_config, validate_config
from .errors import ConfigError
from .evaluate import EvalConfig, linear_probe
from .synthdata import DatasetSpec, make_dataset, split_dataset
from .training import TrainConfig, pretrain

CANDIDATE_SETS: dict[int, tuple[float, ...]] = {
    2: (0.5, 1.0),
    3: (0.33, 0.66, 0.99),
    4: (0.25, 0.5, 0.75, 1.0),
    5: (0.2, 0.4, 0.6, 0.8, 1.0),
    6: (0.166, 0.332, 0.498, 0.664, 0.83, 1.0),
    7: (0.143, 0.286, 0.429, 0.572, 0.715, 0.858, 1.0),
}


@dataclass(frozen=True)
class AblationRow:
    label: str
    overrides: dict
    display: dict  # flag columns shown in the CSV, in grid column order


@dataclass(frozen=True)
class AblationGrid:
    name: str
    columns: tuple[str, ...]
    rows: tuple[AblationRow, ...]

    def validate(self) -> None:
        labels = [r.label for r in self.rows]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate row labels in grid {self.name}")


def _onoff(flag: bool) -> str:
    return "on" if flag else "off"


def _pretext_weights(pb: bool, rot: bool, stor: bool) -> dict:
    return {
        "weights.lambda_pcls": 1.0 if pb else 0.0,
        "weights.lambda_rcls": 1.0 if rot else 0.0,
        "weights.lambda_ocls": 1.0 if stor else 0.0,
    }


def table1_grid() -> AblationGrid:
    """Augmentation on/off crossed with single-task prediction heads."""
    # (pb_aug, rot_aug, pb_pred, rot_pred, stor_pred)
    pattern = [
        (False, False, False, False, False),
        (True, False, False, False, False),
        (False, True, False, False, False),
        (True, True, False, False, False),
        (True, False, True, False, False),
        (True, True, True, False, False),
        (False, True, False, True, False),
        (True, True, False, True, False),
        (False, False, False, False, True),
        (True, False, False, False, True),
        (True, True, False, False, True),
    ]
    rows = []
    for i, (pb_a, rot_a, pb_p, rot_p, stor_p) in enumerate(pattern, start=1):
        overrides = {
            "weights.lambda_ctr": 0.0,
            **_pretext_weights(pb_p, rot_p, stor_p),
            "augment.enable_playback": pb_a,
            "augment.enable_rotation": rot_a,
            "augment.enable_stor": stor_p,
        }
        display = {
            "base": "on",
            "pb_aug": _onoff(pb_a),
            "rot_aug": _onoff(rot_a),
            "pb_pred": _onoff(pb_p),
            "rot_pred": _onoff(rot_p),
            "stor_pred": _onoff(stor_p),
        }
        rows.append(AblationRow(f"exp{i}", overrides, display))
    return AblationGrid("table1", tuple(rows[0].display), tuple(rows))


def table2_grid() -> AblationGrid:
    """Contrastive/pretext component toggles, BYOL as the framework."""
    # (contrastive, pb_pred, rot_pred, stor_pred)
    pattern = [
        (False, False, False, False),
        (True, False, False, False),
        (False, True, False, False),
        (False, False, True, False),
        (False, False, False, True),
        (False, True, True, False),
        (False, True, False, True),
        (False, False, True, True),
        (True, True, False, False),
        (True, False, True, False),
        (True, False, False, True),
        (False, True, True, True),
        (True, True, True, False),
        (True, True, False, True),
        (True, False, True, True),
        (True, True, True, True),
    ]
    rows = []
    for i, (contr, pb, rot, stor) in enumerate(pattern, start=1):
        overrides = {
            "framework.framework": "byol",
            "weights.lambda_ctr": 0.1 if contr else 0.0,
            **_pretext_weights(pb, rot, stor),
            "augment.enable_playback": True,
            "augment.enable_rotation": True,
            "augment.enable_stor": True,
        }
        display = {
            "contrastive": _onoff(contr),
            "pb_pred": _onoff(pb),
            "rot_pred": _onoff(rot),
            "stor_pred": _onoff(stor),
        }
        rows.append(AblationRow(f"exp{i}", overrides, display))
    return AblationGrid("table2", tuple(rows[0].display), tuple(rows))


def table3_grid() -> AblationGrid:
    """Each framework crossed with cumulative pretext-task combinations."""
    combos = [(False, False, False), (True, False, False), (True, True, False), (True, True, True)]
    rows = []
    for framework in ("simclr", "moco", "byol", "simsiam"):
        for j, (pb, rot, stor) in enumerate(combos, start=1):
            overrides = {
                "framework.framework": framework,
                "weights.lambda_ctr": 0.1,
                **_pretext_weights(pb, rot, stor),
                "augment.enable_playback": True,
                "augment.enable_rotation": True,
                "augment.enable_stor": True,
            }
            display = {
                "framework": framework,
                "pb_pred": _onoff(pb),
                "rot_pred": _onoff(rot),
                "stor_pred": _onoff(stor),
            }
            rows.append(AblationRow(f"{framework}_{j}", overrides, display))
    return AblationGrid("table3", ("framework", "pb_pred", "rot_pred", "stor_pred"), tuple(rows))


def table4_grid() -> AblationGrid:
    """Overlap candidate-set size, overlap prediction as the only objective."""
    rows = []
    for n, rates in CANDIDATE_SETS.items():
        overrides = {
            "augment.spatial_rates": list(rates),
            "augment.temporal_rates": list(rates),
            "augment.enable_playback": False,
            "augment.enable_rotation": False,
            "augment.enable_stor": True,
            "weights.lambda_ctr": 0.0,
            "weights.lambda_pcls": 0.0,
            "weights.lambda_rcls": 0.0,
            "weights.lambda_ocls": 1.0,
        }
        rows.append(AblationRow(f"candidates{n}", overrides, {"num_candidates": str(n)}))
    return AblationGrid("table4", ("num_candidates",), tuple(rows))


def default_ablation_config() -> ExperimentConfig:
    """Small per-row budget: a grid should take minutes, not hours."""
    return validate_config(
        ExperimentConfig(
            dataset=DatasetSpec(videos_per_class=8),
            train=TrainConfig(steps=12, batch_size=8),
            eval=EvalConfig(probe_epochs=10),
            output_dir="runs/ablation",
        )
    )


GRID_BUILDERS = {
    "table1": table1_grid,
    "table2": table2_grid,
    "table3": table3_grid,
    "table4": table4_grid,
}


def get_grid(name: str) -> AblationGrid:
    if name not in GRID_BUILDERS:
        raise ConfigError(f"unknown grid {name!r}, expected one of {sorted(GRID_BUILDERS)}")
    grid = GRID_BUILDERS[name]()
    grid.validate()
    return grid


def run_ablation(grid: AblationGrid, base_cfg: ExperimentConfig, out_dir: str) -> str:
    """Run every row on one shared dataset; returns the CSV path."""
    os.makedirs(out_dir, exist_ok=True)
    dataset = make_dataset(base_cfg.dataset, base_cfg.augment.clip_length)
    train, test = split_dataset(dataset, base_cfg.dataset)

    results = []
    for row in grid.rows:
        record = {"row": row.label, **row.display, "probe_acc": "", "status": "ok"}
        try:
            cfg = override_config(base_cfg, row.overrides)
            row_dir = os.path.join(out_dir, row.label)
            model, _, _, _ = pretrain(
                train, cfg.augment, cfg.model, cfg.framework, cfg.weights, cfg.train, row_dir
            )
            acc = linear_probe(model, train, test, cfg.dataset.num_classes, cfg.eval, cfg.train.seed)
            record["probe_acc"] = f"{acc:.4f}"
        except Exception as err:  # keep the grid going; the row records its failure
            record["status"] = f"error: {type(err).__name__}: {err}"
            traceback.print_exc()
        results.append(record)

    csv_path = os.path.join(out_dir, f"ablation_{grid.name}.csv")
    fieldnames = ["row", *grid.columns, "probe_acc", "status"]
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(results)
    return csv_path
