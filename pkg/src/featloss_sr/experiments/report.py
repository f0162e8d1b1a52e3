"""Report files: metrics.csv, report.json, qc.json, spectrum.csv and PNG slice dumps.

Everything written here is a pure function of its inputs; no timestamps or host
details are recorded, so identical runs give identical bytes.
"""
import csv
import io
import json
import math
import os

import numpy as np

from ..metrics import mean_fsum

METRIC_COLUMNS = ("model", "tap_set", "b_value", "slice", "mae", "mse", "psnr", "ssim",
                  "case", "volume", "factor")
SPECTRUM_COLUMNS = ("model", "tap_set", "factor", "stride", "ratio")
SCORES = ("mae", "mse", "psnr", "ssim")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def csv_text(rows, columns):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def read_metrics_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            for k in SCORES + ("b_value",):
                r[k] = float(r[k])
            for k in ("slice", "volume", "factor"):
                if k in r:
                    r[k] = int(r[k])
            rows.append(r)
    return rows


def aggregate(rows):
    """Mean and sample sd of every score per (model, factor, b-value), in first-seen order."""
    groups = {}
    for r in rows:
        groups.setdefault((r["model"], r["tap_set"], r["factor"], r["b_value"]), []).append(r)
    out = []
    for (model, taps, factor, b), items in groups.items():
        entry = {"model": model, "tap_set": taps, "factor": factor, "b_value": b, "n": len(items)}
        for s in SCORES:
            vals = [it[s] for it in items]
            finite = [v for v in vals if math.isfinite(v)]
            entry[s] = mean_fsum(vals)
            entry[s + "_sd"] = float(np.std(finite, ddof=1)) if len(finite) > 1 else 0.0
        out.append(entry)
    return out


def _clean(obj):
    """Make floats JSON-safe (inf/nan become strings) and tuples lists."""
    if isinstance(obj, float):
        if math.isfinite(obj):
            return obj
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def json_text(obj):
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def write_text(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def write_png(image, path, window=None):
    """8-bit grayscale dump; ``window`` = (lo, hi), default image min/max.  Writes a JSON sidecar."""
    from PIL import Image

    image = np.asarray(image, dtype=np.float64)
    lo, hi = window if window is not None else (float(image.min()), float(image.max()))
    scaled = np.zeros_like(image) if hi <= lo else np.clip((image - lo) / (hi - lo), 0, 1)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(path)
    write_text(os.path.splitext(path)[0] + ".json", json_text({"window": [lo, hi], "shape": list(image.shape)}))
