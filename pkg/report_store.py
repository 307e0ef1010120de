# report_store.py - JSON helpers, results CSV and the validated run report

import csv
import json
import os
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict

from defaults import RESULTS_COLUMNS

REPORT_FILE = "report.json"
REPORT_SCHEMA_FILE = "report.schema.json"
RESULTS_FILE = "results.csv"
MANIFEST_FILE = "manifest.json"
SWEEP_FILE = "sweep.json"


def load_json_file(filepath, default=None):
    if not os.path.exists(filepath):
        return default or {}
    with open(filepath, "r", encoding="utf-8") as f:
        return json.load(f)


def save_json_file(filepath, data):
    directory = os.path.dirname(filepath)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(filepath, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)


class MethodResult(BaseModel):
    model_config = ConfigDict(extra="forbid")

    clean_acc: float
    pgd_acc: float
    roa_acc: float
    passes_per_step: Optional[int]
    steps: int
    total_passes: int
    forward_passes: Dict[str, int]
    backward_passes: Dict[str, int]
    predicted_cost: str
    cost_verified: bool
    epoch_losses: List[float]


class CostRow(BaseModel):
    method: str
    training_cost: str
    coefficient: int
    ratio_to_abnn: float


class Report(BaseModel):
    """Contents of report.json"""
    model_config = ConfigDict(extra="forbid")

    name: str
    seed: int
    task: str
    t_max: int
    methods: Dict[str, MethodResult]
    cost_table: List[CostRow]
    oudefend_replay_verified: bool
    all_costs_verified: bool
    substitute_digest_before: str
    substitute_digest_after: str
    substitute_unchanged: bool
    abnn_pgd_acc_target_only: float
    bn_stat_shift: Dict[str, Dict[str, float]]
    attack_summaries: Dict[str, Dict[str, float]]


def save_report(out_dir: str, report: Dict) -> str:
    """Validate against the report model, then write report.json and its schema"""
    validated = Report.model_validate(report)
    path = os.path.join(out_dir, REPORT_FILE)
    save_json_file(path, validated.model_dump())
    save_json_file(os.path.join(out_dir, REPORT_SCHEMA_FILE), Report.model_json_schema())
    return path


def format_metric(value) -> str:
    return f"{value:.6f}" if isinstance(value, float) else str(value)


def write_results_csv(path: str, rows: List[Dict]):
    """Fixed column order: method, clean_acc, pgd_acc, roa_acc, passes_per_step"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=RESULTS_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({column: format_metric(row[column]) for column in RESULTS_COLUMNS})


def read_results_csv(path: str) -> List[Dict[str, str]]:
    with open(path, "r", newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))
