import csv
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Union

from pydantic import ValidationError

from app.errors import MetricsParseError
from app.models.run import RunSummary, TrainRecord

logger = logging.getLogger(__name__)

BASE_COLUMNS = ["kind", "epoch", "step", "lr", "feat_weight_multiplier", "feat_total", "mutual", "ce_vit",
                "ce_agent", "total", "train_acc_vit", "train_acc_agent", "val_acc_vit", "val_acc_agent"]
TIMING_COLUMNS = ["kind", "epoch", "step", "wall_clock"]


def metrics_header(layers: int) -> List[str]:
    return BASE_COLUMNS + [f"feat_l{layer}" for layer in range(1, layers + 1)]


def _fmt(value: Optional[float]) -> str:
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


class MetricsWriter:
    """Append TrainRecords to metrics.csv and their wall-clock stamps to timing.csv."""

    def __init__(self, run_dir: Path, layers: int, append: bool = False):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.layers = layers
        self.header = metrics_header(layers)
        self.metrics_path = self.run_dir / "metrics.csv"
        self.timing_path = self.run_dir / "timing.csv"
        mode = "a" if append and self.metrics_path.exists() else "w"
        self._metrics = open(self.metrics_path, mode, newline="", encoding="utf-8")
        self._timing = open(self.timing_path, mode, newline="", encoding="utf-8")
        self._mw = csv.writer(self._metrics, lineterminator="\n")
        self._tw = csv.writer(self._timing, lineterminator="\n")
        if mode == "w":
            self._mw.writerow(self.header)
            self._tw.writerow(TIMING_COLUMNS)

    def write(self, record: TrainRecord, wall_clock: float) -> None:
        row = [record.kind, str(record.epoch), str(record.step)]
        for column in BASE_COLUMNS[3:]:
            row.append(_fmt(getattr(record, column)))
        for layer in range(1, self.layers + 1):
            row.append(_fmt(record.feat_per_layer.get(layer)))
        self._mw.writerow(row)
        self._tw.writerow([record.kind, record.epoch, record.step, f"{wall_clock:.3f}"])
        self._metrics.flush()
        self._timing.flush()

    def close(self) -> None:
        self._metrics.close()
        self._timing.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False


def _truncate_file(path: Path, epoch: int, step: int) -> int:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return 0
    kept = [rows[0]]
    for row in rows[1:]:
        if not row:
            continue
        at = (int(row[1]), int(row[2]))
        if at[0] < epoch or (at[0] == epoch and at[1] <= step):
            kept.append(row)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(kept)
    return len(rows) - len(kept)


def truncate_metrics(run_dir: Union[str, Path], epoch: int, step: int) -> int:
    """Drop rows of metrics.csv and timing.csv written after (epoch, step); returns the metrics rows dropped."""
    run_dir = Path(run_dir)
    dropped = 0
    for name in ("metrics.csv", "timing.csv"):
        path = run_dir / name
        if path.exists():
            removed = _truncate_file(path, epoch, step)
            if name == "metrics.csv":
                dropped = removed
    if dropped:
        logger.warning(f"Dropped {dropped} metrics rows written after epoch {epoch}, step {step}")
    return dropped


def _parse_float(text: str, column: str, path: str, line: int) -> Optional[float]:
    if text == "":
        return None
    try:
        value = float(text)
    except ValueError:
        raise MetricsParseError(path, line, f"column '{column}' is not a number: {text!r}")
    if math.isnan(value):
        raise MetricsParseError(path, line, f"column '{column}' is NaN")
    return value


def read_metrics(path: Union[str, Path]) -> List[TrainRecord]:
    """Parse and validate metrics.csv; malformed rows raise MetricsParseError with the line number."""
    path = str(path)
    records: List[TrainRecord] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MetricsParseError(path, 1, "empty file")
        if header[:len(BASE_COLUMNS)] != BASE_COLUMNS:
            raise MetricsParseError(path, 1, f"unexpected header {header[:len(BASE_COLUMNS)]}")
        layer_columns = header[len(BASE_COLUMNS):]
        previous = (-1, -1)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise MetricsParseError(path, line, f"expected {len(header)} fields, got {len(row)}")
            values: Dict[str, object] = {"kind": row[0]}
            for column, text in zip(BASE_COLUMNS[1:], row[1:len(BASE_COLUMNS)]):
                value = _parse_float(text, column, path, line)
                if column in ("epoch", "step"):
                    if value is None or value != int(value):
                        raise MetricsParseError(path, line, f"column '{column}' must be an integer")
                    value = int(value)
                if value is not None:
                    values[column] = value
            per_layer = {}
            for column, text in zip(layer_columns, row[len(BASE_COLUMNS):]):
                value = _parse_float(text, column, path, line)
                if value is not None:
                    per_layer[int(column[len("feat_l"):])] = value
            values["feat_per_layer"] = per_layer
            try:
                record = TrainRecord(**values)
            except ValidationError as e:
                raise MetricsParseError(path, line, f"invalid record: {e.errors()[0]['msg']}")
            key = (record.epoch, record.step)
            if key < previous:
                raise MetricsParseError(path, line, f"(epoch, step) {key} goes back from {previous}")
            previous = key
            records.append(record)
    return records


def write_summary(path: Union[str, Path], summary: RunSummary) -> None:
    lines = []
    for key, value in summary.model_dump().items():
        if isinstance(value, list):
            value = ",".join(value)
        lines.append(f"{key} = {'' if value is None else value}")
    lines.append(f"params_total = {summary.params_total}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_summary(path: Union[str, Path]) -> RunSummary:
    fields: Dict[str, object] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        key, _, value = line.partition(" = ")
        if key == "params_total" or not key:
            continue
        if key == "toggles":
            fields[key] = [t for t in value.split(",") if t]
        elif value != "":
            fields[key] = value
    return RunSummary(**fields)


def final_and_best(records: List[TrainRecord]) -> Dict[str, Optional[float]]:
    """Final and best epoch-level validation accuracy per network."""
    epochs = [r for r in records if r.kind in ("init", "epoch")]
    out: Dict[str, Optional[float]] = {}
    for net in ("vit", "agent"):
        values = [(getattr(r, f"val_acc_{net}"), r.epoch) for r in epochs if getattr(r, f"val_acc_{net}") is not None]
        out[f"final_val_acc_{net}"] = values[-1][0] if values else None
        out[f"best_val_acc_{net}"] = max(v for v, _ in values) if values else None
    return out
