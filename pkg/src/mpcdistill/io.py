"""File formats: dataset CSV + JSON sidecar, training and evaluation reports.

CSV files open with a ``# format=<name> version=<v>`` line; JSON documents
carry ``format`` and ``version`` keys. Readers reject other formats and
unknown major versions. Floats are written as their shortest round-trip
decimal so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import json
import re

import numpy as np

from .datagen import Dataset
from .errors import FormatError
from .learner import LabelScheme, quantize_labels

VERSION = "1.0"
DATASET_CSV = "mpcdistill.dataset"
DATASET_META = "mpcdistill.dataset-meta"
TIMING = "mpcdistill.timing"
TRAIN_REPORT = "mpcdistill.train-report"
EVAL_CSV = "mpcdistill.eval-rows"
EVAL_REPORT = "mpcdistill.eval-report"

_HEADER_RE = re.compile(r"^# format=(\S+) version=(\S+)\s*$")


def _num(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _check_version(path, fmt_found, version_found, expected) -> None:
    if fmt_found != expected:
        raise FormatError(f"{path}: expected format {expected!r}, found {fmt_found!r}")
    if str(version_found).split(".")[0] != VERSION.split(".")[0]:
        raise FormatError(f"{path}: unsupported {expected} version {version_found!r}")


def check_format(path, doc: dict, accepted) -> str:
    """Return the document's format tag if it is one of ``accepted``."""
    fmt = doc.get("format")
    if fmt not in accepted:
        raise FormatError(f"{path}: unrecognized format {fmt!r}")
    _check_version(path, fmt, doc.get("version"), fmt)
    return fmt


def write_json(doc: dict, path, fmt: str) -> None:
    with open(path, "w") as fh:
        json.dump({"format": fmt, "version": VERSION, **doc}, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_json(path, fmt: str | None = None) -> dict:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if fmt is not None:
        _check_version(path, doc.get("format"), doc.get("version"), fmt)
    return doc


def _write_csv(path, fmt: str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# format={fmt} version={VERSION}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _read_csv(path, fmt: str) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        first = fh.readline()
        match = _HEADER_RE.match(first)
        if not match:
            raise FormatError(f"{path}: line 1: missing '# format=... version=...' header")
        _check_version(path, match.group(1), match.group(2), fmt)
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: line 2: missing column header") from None
        rows = list(reader)
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise FormatError(f"{path}: line {i + 3}: expected {len(header)} fields, got {len(row)}")
    return header, rows


def _float_rows(path, rows) -> np.ndarray:
    try:
        return np.array(rows, dtype=float)
    except ValueError:
        for i, row in enumerate(rows):
            try:
                [float(v) for v in row]
            except ValueError as exc:
                raise FormatError(f"{path}: line {i + 3}: {exc}") from None
        raise


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


def dataset_header(M: int) -> list[str]:
    return ["q_index", "k"] + [f"y_{j}" for j in range(M + 1)] + ["u_value", "label"]


def write_dataset(ds: Dataset, csv_path, meta_path=None, timing_path=None) -> None:
    """Write samples to CSV; solver diagnostics to the sidecar, wall times to ``timing_path``.

    Column ``y_j`` holds the measurement ``j`` steps before the window end.
    """
    rows = (
        [_num(ds.q_index[i]), _num(ds.k[i])] + [_num(v) for v in ds.windows[i]]
        + [_num(ds.u_values[i]), _num(ds.labels[i])]
        for i in range(len(ds))
    )
    _write_csv(csv_path, DATASET_CSV, dataset_header(ds.M), rows)
    deterministic = {k: v for k, v in ds.config.items() if k != "extraction_time"}
    if meta_path is not None:
        scenarios = [{k: v for k, v in s.items() if k != "wall_time"} for s in ds.scenarios]
        write_json({"config": deterministic, "scenarios": scenarios}, meta_path, DATASET_META)
    if timing_path is not None:
        write_json({
            "solve_times": [s.get("wall_time") for s in ds.scenarios],
            "extraction_time": ds.config.get("extraction_time"),
        }, timing_path, TIMING)


def read_dataset(csv_path, meta_path=None, scheme: LabelScheme | None = None) -> Dataset:
    header, rows = _read_csv(csv_path, DATASET_CSV)
    M = len(header) - 5
    if M < 0 or header != dataset_header(M):
        raise FormatError(f"{csv_path}: line 2: unexpected dataset columns {header}")
    arr = _float_rows(csv_path, rows).reshape(-1, len(header))
    config, scenarios = {}, []
    if meta_path is not None:
        meta = read_json(meta_path, DATASET_META)
        config, scenarios = meta["config"], meta["scenarios"]
        if config.get("M") not in (None, M):
            raise FormatError(f"{csv_path}: window length {M + 1} disagrees with sidecar M={config['M']}")
    ds = Dataset(
        windows=arr[:, 2:3 + M].copy(),
        u_values=arr[:, 3 + M].copy(),
        labels=arr[:, 4 + M].astype(np.int64),
        q_index=arr[:, 0].astype(np.int64),
        k=arr[:, 1].astype(np.int64),
        config=config,
        scenarios=scenarios,
    )
    if scheme is not None and len(ds) and not np.array_equal(quantize_labels(ds.u_values, scheme), ds.labels):
        raise FormatError(f"{csv_path}: labels disagree with the configured label scheme")
    return ds


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def write_eval_report(report, csv_path, json_path) -> None:
    names = report.policy_names
    header = ["index", "ok", "x0_1", "x0_2", "x0_3", "w_1", "w_2", "w_3", "J_ideal"] + [f"J_{n}" for n in names]
    rows = []
    for r in report.rows:
        vals = [_num(r["index"]), "1" if r.get("ok") else "0"] + [_num(v) for v in r["x0"]] + [_num(v) for v in r["w"]]
        if r.get("ok"):
            vals += [_num(r["J_ideal"])] + [_num(r[f"J_{n}"]) for n in names]
        else:
            vals += [""] * (1 + len(names))
        rows.append(vals)
    _write_csv(csv_path, EVAL_CSV, header, rows)
    write_json({"aggregates": report.aggregates, "config": report.config,
                "diagnostics": report.diagnostics}, json_path, EVAL_REPORT)


def read_eval_rows(csv_path) -> list[dict]:
    header, rows = _read_csv(csv_path, EVAL_CSV)
    out = []
    for row in rows:
        rec = dict(zip(header, row))
        out.append({k: (float(v) if v not in ("",) else None) for k, v in rec.items()})
    return out


# ---------------------------------------------------------------------------
# plot-ready tables
# ---------------------------------------------------------------------------


def histogram_rows(values, edges, label: str) -> list[list[str]]:
    counts, _ = np.histogram(values, bins=edges)
    return [[label, _num(edges[i]), _num(edges[i + 1]), _num(int(c))] for i, c in enumerate(counts)]


def parameter_ratio_table(meta: dict, w_nominal) -> tuple[list[str], list[list[str]]]:
    w = np.array([s["w"] for s in meta["scenarios"]], dtype=float).reshape(-1, 3)
    ratios = w / np.asarray(w_nominal, dtype=float)
    edges = np.round(np.linspace(0.0, 2.0, 41), 10)
    rows = []
    for i in range(3):
        rows += histogram_rows(ratios[:, i], edges, f"w{i + 1}")
    return ["parameter", "bin_lo", "bin_hi", "count"], rows


def control_histogram_table(u_values, u_min: float, u_max: float) -> tuple[list[str], list[list[str]]]:
    edges = np.linspace(u_min, u_max, 41)
    return ["series", "bin_lo", "bin_hi", "count"], histogram_rows(np.asarray(u_values, dtype=float), edges, "u")


def confusion_table(train_report: dict) -> tuple[list[str], list[list[str]]]:
    rows = []
    for m, parts in sorted(train_report["variants"].items(), key=lambda kv: int(kv[0])):
        for split in ("train", "test"):
            counts = parts[split]["counts"]
            for t in range(3):
                for p in range(3):
                    rows.append([str(m), split, str(t + 1), str(p + 1), str(counts[t][p])])
    return ["m", "split", "true_label", "predicted_label", "count"], rows


def cost_comparison_table(eval_report: dict) -> tuple[list[str], list[list[str]]]:
    agg = eval_report["aggregates"]
    adv = agg.get("recovered_advantage", {})
    rows = [["ideal", _num(agg["mean_J_ideal"]), ""]]
    for name in eval_report["config"]["policies"]:
        ra = adv.get(name)
        rows.append([name, _num(agg[f"mean_J_{name}"]), "" if ra is None else _num(ra)])
    return ["policy", "mean_cost", "recovered_advantage"], rows


def solve_time_table(timing: dict) -> tuple[list[str], list[list[str]]]:
    times = np.sort([t for t in timing["solve_times"] if t is not None])
    n = len(times)
    return ["solve_time", "cumulative_fraction"], [[_num(t), _num((i + 1) / n)] for i, t in enumerate(times)]


def write_table(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
