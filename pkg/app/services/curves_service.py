import logging
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from app.errors import UsageError  # noqa: E402
from app.services.metrics_service import read_metrics  # noqa: E402

logger = logging.getLogger(__name__)


def find_metrics(paths: Sequence[Union[str, Path]]) -> List[Path]:
    """metrics.csv files named directly or found below the given directories."""
    found: List[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            found.extend(sorted(p.rglob("metrics.csv")))
        elif p.is_file():
            found.append(p)
        else:
            raise UsageError(f"{p} does not exist")
    if not found:
        raise UsageError(f"no metrics.csv under {', '.join(str(p) for p in paths) or '(nothing)'}")
    return found


def accuracy_table(files: Sequence[Path]) -> pd.DataFrame:
    """Long table (run, network, epoch, val_acc) of every epoch-level validation row."""
    rows = []
    for path in files:
        run = path.parent.name
        for record in read_metrics(path):
            if record.kind == "step":
                continue
            for network in ("vit", "agent"):
                value = getattr(record, f"val_acc_{network}")
                if value is not None:
                    rows.append({"run": run, "network": network, "epoch": record.epoch, "val_acc": value})
    return pd.DataFrame(rows, columns=["run", "network", "epoch", "val_acc"])


def export_curves(paths: Sequence[Union[str, Path]], out_dir: Union[str, Path],
                  title: str = "Validation accuracy") -> Tuple[Path, Path]:
    """Merged CSV (epoch × run/network) and an SVG line chart of validation accuracy."""
    files = find_metrics(paths)
    table = accuracy_table(files)
    if table.empty:
        raise UsageError("metrics files hold no validation rows")
    table["series"] = table["run"] + "/" + table["network"]
    merged = table.pivot_table(index="epoch", columns="series", values="val_acc", aggfunc="last").sort_index()
    merged.columns.name = None

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "curves.csv"
    merged.to_csv(csv_path)

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for series in merged.columns:
        column = merged[series].dropna()
        ax.plot(column.index, column.values * 100.0, marker="o", markersize=2.5, linewidth=1.4, label=series)
    ax.set_xlabel("epoch")
    ax.set_ylabel("top-1 accuracy (%)")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    svg_path = out_dir / "curves.svg"
    fig.savefig(svg_path, format="svg")
    plt.close(fig)
    logger.info(f"Curves of {len(merged.columns)} series from {len(files)} runs written to {svg_path}")
    return csv_path, svg_path
