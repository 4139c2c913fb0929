"""CSV logs: per-epoch training history, sweep summaries and energy-to-target tables."""
from __future__ import annotations

import csv
import io

from .cost import energy_to_accuracy

HISTORY_HEADER = ["epoch", "layer_id", "bitwidth", "gavg_ema", "train_loss",
                  "test_acc", "energy_norm", "mem_norm", "lr"]
SWEEP_HEADER = ["t_min", "final_acc", "energy_norm", "mem_norm", "status"]
UNREACHED = "unreached"
AGGREGATE = -1


def fmt(x) -> str:
    # repr of a Python float is the shortest exact round-trip form
    return "" if x is None else repr(float(x))


def history_rows(history):
    """Per epoch: one row per layer, then one aggregate row with ``layer_id = -1``."""
    for r in history:
        for i, (k, g) in enumerate(zip(r.bitwidths, r.gavg)):
            yield [str(r.epoch), str(i), str(k), fmt(g), "", "", "", "", ""]
        yield [str(r.epoch), str(AGGREGATE), "", "", fmt(r.train_loss), fmt(r.test_acc),
               fmt(r.energy_norm), fmt(r.mem_norm), fmt(r.lr)]


def _write(f, header, rows):
    w = csv.writer(f, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)


def history_csv(history) -> str:
    buf = io.StringIO()
    _write(buf, HISTORY_HEADER, history_rows(history))
    return buf.getvalue()


def write_history(path, history):
    with open(path, "w", newline="") as f:
        f.write(history_csv(history))


def read_history(path) -> list:
    """Aggregate rows of a history CSV as ``(epoch, test_acc, energy_norm)`` tuples."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != HISTORY_HEADER:
            raise ValueError(f"{path}: not a training history CSV")
        return [(int(row[0]), float(row[5]), float(row[6]))
                for row in reader if int(row[1]) == AGGREGATE]


def write_sweep(path, rows):
    with open(path, "w", newline="") as f:
        _write(f, SWEEP_HEADER, ([fmt(t), fmt(a), fmt(e), fmt(m), s] for t, a, e, m, s in rows))


def count_inversions(values) -> int:
    """Adjacent decreases in a sequence that ought to be non-decreasing."""
    return sum(b < a for a, b in zip(values, values[1:]))


def default_targets(histories, span=0.02, steps=5):
    best = max(acc for h in histories for _, acc, _ in h)
    return [round(best - span + i * span / (steps - 1), 6) for i in range(steps)]


def compare_table(named_histories, targets):
    """Rows of ``[target, energy_run1, energy_run2, ...]``; ``unreached`` where a run never gets there."""
    rows = []
    for t in targets:
        row = [fmt(t)]
        for _, h in named_histories:
            e = energy_to_accuracy([acc for _, acc, _ in h], [en for _, _, en in h], t)
            row.append(UNREACHED if e is None else fmt(e))
        rows.append(row)
    return ["target_acc"] + [name for name, _ in named_histories], rows


def table_csv(header, rows) -> str:
    buf = io.StringIO()
    _write(buf, header, rows)
    return buf.getvalue()
