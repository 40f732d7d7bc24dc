"""Independent recount of ``results.csv`` from ``trace.ndjson``.

Deliberately shares no code with :mod:`.metrics` or :mod:`.sweep`: plain
dictionaries, explicit loops, and its own formatting.
"""
from __future__ import annotations

import json
import math


def _f(x):
    return "" if x is None else "%.6f" % x


def _ci(values):
    n = len(values)
    m = math.fsum(values) / n
    if n < 2:
        return m, 0.0
    ss = math.fsum((v - m) * (v - m) for v in values)
    return m, 1.96 * math.sqrt(ss / (n - 1)) / math.sqrt(n)


def recount(trace_path, exit_ids) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    with open(trace_path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                key = (rec["kind"], rec["level"], rec["profile"], rec["mode"])
                groups.setdefault(key, []).append(rec)
    rows = []
    for (kind, level, profile, mode), recs in groups.items():
        n = len(recs)
        hit = [1.0 if r["pred"] == r["label"] else 0.0 for r in recs]
        local = [0.0 if r["offloaded"] else 1.0 for r in recs]
        acc, acc_ci = _ci(hit)
        ond, ond_ci = _ci(local)
        lat, lat_ci = _ci([r["latency"]["total_ms"] for r in recs])
        clf, _ = _ci([r["latency"]["classifier_ms"] for r in recs])
        row = {"kind": kind, "level": str(level), "profile": profile, "mode": mode, "n": str(n),
               "accuracy": _f(acc), "accuracy_ci95": _f(acc_ci), "on_device": _f(ond), "on_device_ci95": _f(ond_ci)}
        for e in exit_ids:
            at = [r for r in recs if r["exit_id"] == e and r["exit"] != "fallback"]
            good = 0
            for r in at:
                if r["pred"] == r["label"]:
                    good += 1
            row["exit%d_n" % e] = str(len(at))
            row["exit%d_accuracy" % e] = _f(good / len(at)) if at else ""
        row["fallback_n"] = str(sum(1 for r in recs if r["exit"] == "fallback"))
        row["latency_ms"] = _f(lat)
        row["latency_ms_ci95"] = _f(lat_ci)
        row["classifier_ms"] = _f(clf)
        want = "pristine" if int(level) == 0 else kind
        row["kind_match"] = _f(sum(1 for r in recs if r["selected"] == want) / n)
        rows.append(row)
    return rows


def compare(csv_rows: list[dict], recounted: list[dict]) -> list[str]:
    """Human-readable list of disagreements; empty means exact agreement."""
    problems = []
    if len(csv_rows) != len(recounted):
        problems.append(f"row count {len(csv_rows)} != {len(recounted)}")
    for i, (a, b) in enumerate(zip(csv_rows, recounted)):
        for key in sorted(set(a) | set(b)):
            if a.get(key) != b.get(key):
                problems.append(f"row {i} {key}: csv {a.get(key)!r} vs recount {b.get(key)!r}")
    return problems
