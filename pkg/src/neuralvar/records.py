"""Append-only metric records with CSV/JSONL emission."""

import csv
import json
from dataclasses import asdict, dataclass

CSV_HEADER = ["run_id", "seed", "kind", "index", "metric", "value", "timestamp"]


@dataclass
class MetricRecord:
    run_id: str
    seed: int
    kind: str
    index: int  # step / epoch / task, depending on the experiment
    metric: str
    value: float
    timestamp: float


def emit_records(records, fmt, path):
    if not records:
        raise ValueError("no records to emit")
    if fmt == "csv":
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(CSV_HEADER)
            for r in records:
                w.writerow([r.run_id, r.seed, r.kind, r.index, r.metric,
                            repr(r.value), repr(r.timestamp)])
    elif fmt == "jsonl":
        with open(path, "w") as f:
            for r in records:
                f.write(json.dumps(asdict(r)) + "\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")


def load_records(path):
    """Inverse of emit_records; the format is inferred from the content."""
    records = []
    with open(path) as f:
        first = f.readline()
        f.seek(0)
        if first.startswith("{"):
            for line in f:
                records.append(MetricRecord(**json.loads(line)))
        else:
            reader = csv.DictReader(f)
            for row in reader:
                records.append(MetricRecord(
                    run_id=row["run_id"], seed=int(row["seed"]), kind=row["kind"],
                    index=int(row["index"]), metric=row["metric"],
                    value=float(row["value"]), timestamp=float(row["timestamp"]),
                ))
    return records
