"""The topology × head × upsampling grid behind the results table.

Each of the 12 topology/head configurations is trained with and without
upsampling (24 runs) and scored by UAR on dev and test. The CSV has one row
per configuration and the columns ``dev/test × w/o, w/ upsampling``.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, replace
from typing import Callable

from hsattn.audio import FeatureConfig
from hsattn.corpus import CorpusManifest
from hsattn.evaluation import evaluate, percent
from hsattn.models import ModelConfig
from hsattn.training import TrainConfig, train

TOPOLOGIES = ("cnn", "lstm", "gru")
GRID_HEADS = ("flatten", "maxpool", "attention_softmax", "attention_sigmoid")
ROW_NAMES = {
    "flatten": "Flattening",
    "last_time_stamp": "Last-time stamp",
    "maxpool": "Max-pooling",
    "attention_softmax": "Attention-softmax",
    "attention_sigmoid": "Attention-sigmoid",
}
GRID_COLUMNS = ("topology", "head", "dev_wo_upsampling", "test_wo_upsampling", "dev_w_upsampling", "test_w_upsampling")


@dataclass
class GridCell:
    topology: str
    head: str
    upsample: bool
    dev_uar: float
    test_uar: float


def grid_configs(base: ModelConfig) -> list[ModelConfig]:
    return [replace(base, topology=t, head=h) for t, h in itertools.product(TOPOLOGIES, GRID_HEADS)]


def run_grid(
    manifest: CorpusManifest,
    base_model: ModelConfig,
    base_train: TrainConfig,
    features=None,
    feature_config: FeatureConfig | None = None,
    log: Callable[[str], None] = print,
) -> list[GridCell]:
    cells = []
    for mc in grid_configs(base_model):
        for up in (False, True):
            tc = replace(base_train, upsample=up)
            result = train(tc, mc, manifest, features, feature_config)
            dev = evaluate(result.checkpoint, manifest, "dev", features)
            test = evaluate(result.checkpoint, manifest, "test", features)
            cells.append(GridCell(mc.topology, mc.head, up, dev.uar, test.uar))
            log(f"{mc.topology:4s} {mc.head:18s} upsample={up!s:5s} dev {percent(dev.uar)} test {percent(test.uar)}")
    return cells


def write_grid_csv(path, cells: list[GridCell]) -> None:
    table: dict[tuple[str, str], dict[bool, GridCell]] = {}
    for c in cells:
        table.setdefault((c.topology, c.head), {})[c.upsample] = c
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_COLUMNS)
        for (topo, head), runs in table.items():
            row = [topo, ROW_NAMES[head]]
            for up in (False, True):
                cell = runs.get(up)
                row += [percent(cell.dev_uar), percent(cell.test_uar)] if cell else ["", ""]
            w.writerow(row)
