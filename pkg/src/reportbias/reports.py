"""CSV/JSON report writers. Floats in CSV use 17 significant digits."""

import csv
import json
import math
import os
import re

import numpy as np

from . import plotting


def fmt(value):
    if value is None:
        return "NA"
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "NA" if math.isnan(value) else format(float(value), ".17g")
    return str(value)


def jsonable(obj):
    """Convert numpy values and NaN to plain JSON types."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return None if math.isnan(obj) else float(obj)
    return obj


def write_json(obj, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(columns, path):
    """Write a column dict (name -> equal-length list) as CSV."""
    names = list(columns)
    rows = zip(*(columns[n] for n in names))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_bias_report(bias, names, out_dir, config_echo, prefix="gen"):
    os.makedirs(out_dir, exist_ok=True)
    cols = {"concept": names, "support": bias["support"].tolist(),
            "r01_union": bias["union"].tolist(),
            "r01_per_reference": bias["per_reference"].tolist()}
    write_csv(cols, os.path.join(out_dir, f"{prefix}_bias.csv"))
    write_json({"config": config_echo, "undefined": bias["undefined"], "bias": cols},
               os.path.join(out_dir, f"{prefix}_summary.json"))
    plotting.bias_figure(names, bias["union"], bias["per_reference"],
                         os.path.join(out_dir, f"{prefix}_bias.png"))


def write_eval_report(result, out_dir, config_echo):
    os.makedirs(out_dir, exist_ok=True)
    write_csv(result["per_concept"], os.path.join(out_dir, "metrics.csv"))
    summary = dict(result["summary"])
    merged = summary.get("merged")
    if merged:
        write_csv({"group": merged["names"], "ap_v": merged["ap_v"], "ap_h": merged["ap_h"]},
                  os.path.join(out_dir, "merged.csv"))
    write_json({"config": config_echo, "summary": summary},
               os.path.join(out_dir, "summary.json"))
    plotting.ap_figure(result["per_concept"], os.path.join(out_dir, "ap.png"))


def safe_name(name):
    return re.sub(r"[^A-Za-z0-9_.-]", "_", str(name))


def write_diagnostics(names, histograms, out_dir, config_echo):
    os.makedirs(out_dir, exist_ok=True)
    reps = {"concept": [], "quantile": [], "image_id": [], "h_lower": [], "h_upper": []}
    truncated = []
    for name, hist in zip(names, histograms):
        bins = hist.counts.shape[0]
        cols = {"v_bin": [], "h_bin": [], "count": []}
        for i in range(bins):
            for j in range(bins):
                cols["v_bin"].append(i)
                cols["h_bin"].append(j)
                cols["count"].append(int(hist.counts[i, j]))
        write_csv(cols, os.path.join(out_dir, f"hist_{safe_name(name)}.csv"))
        for q, img in enumerate(hist.representatives):
            reps["concept"].append(name)
            reps["quantile"].append(q)
            reps["image_id"].append(img)
            reps["h_lower"].append(float(hist.boundaries[q]))
            reps["h_upper"].append(float(hist.boundaries[q + 1]))
        if hist.truncated:
            truncated.append(name)
    write_csv(reps, os.path.join(out_dir, "representatives.csv"))
    write_json({"config": config_echo, "truncated": truncated},
               os.path.join(out_dir, "diagnose.json"))
    plotting.histogram_grid(names, histograms, os.path.join(out_dir, "decoupling.png"))
