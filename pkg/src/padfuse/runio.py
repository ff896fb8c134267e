"""Run files, manifests, tracking driver, CSV/summary serialization.

A tracked run is a JSON-lines file: a manifest header followed by one line
per tracked frame (estimate plus solver report).  Manifests pin everything
needed to reproduce the run byte-for-byte: the scenario config hash, seed,
mode, estimator config, and the input path.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .estimator import EstimatorConfig, Measurements, Tracker
from .handmodel import load_hand
from .liegroup import Pose
from .metrics import TooFewSamples, add_s, wilcoxon_signed_rank
from .simulate import ScenarioConfig, SequenceData, build_object_model
from .solver import SolveReport


def config_hash(cfg: ScenarioConfig) -> str:
    blob = json.dumps(cfg.to_json(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def object_label(cfg: ScenarioConfig) -> str:
    sh = cfg.object_shape
    kind = sh["shape"]
    dims = [f"{v:g}" for k, v in sorted(sh.items()) if k != "shape"
            for v in (v if isinstance(v, (list, tuple)) else [v])]
    return kind + "_" + "x".join(dims)


@dataclass(frozen=True)
class RunManifest:
    scenario_hash: str
    seed: int
    object: str
    mode: str
    estimator: dict
    sequence_path: str
    cadence: str = "vision"

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_json(obj: dict) -> "RunManifest":
        return RunManifest(**obj)


@dataclass(frozen=True)
class RunFrame:
    t: float
    estimate: Pose
    report: dict | None = None

    def to_json(self) -> dict:
        return {"t": self.t, "estimate": self.estimate.to_json(),
                "report": self.report}

    @staticmethod
    def from_json(obj: dict) -> "RunFrame":
        return RunFrame(t=obj["t"], estimate=Pose.from_json(obj["estimate"]),
                        report=obj.get("report"))


def track_sequence(seq: SequenceData, est_cfg: EstimatorConfig,
                   cadence: str = "vision") -> list:
    """Run the tracker over a sequence; returns RunFrames.

    cadence "vision" steps once per vision frame (the tracking rate);
    "tactile" steps on every record.
    """
    if cadence not in ("vision", "tactile"):
        raise ValueError(f"unknown cadence {cadence!r}")
    hand = load_hand(seq.config.hand)
    model = build_object_model(seq.config)
    tracker = Tracker(hand, model, est_cfg)
    frames = []
    records = seq.vision_records() if cadence == "vision" else seq.records
    for rec in records:
        est, report = tracker.step(Measurements(
            timestamp=rec.t, contacts=rec.contacts, joints=rec.q,
            visual_pose=rec.zeta, hand_base=rec.hand_base))
        frames.append(RunFrame(t=rec.t, estimate=est,
                               report=report.to_json() if report else None))
    return frames


def run_manifest(seq: SequenceData, est_cfg: EstimatorConfig,
                 sequence_path: str, cadence: str = "vision") -> RunManifest:
    return RunManifest(scenario_hash=config_hash(seq.config),
                       seed=seq.config.seed,
                       object=object_label(seq.config),
                       mode=est_cfg.mode,
                       estimator=est_cfg.to_json(),
                       sequence_path=str(sequence_path),
                       cadence=cadence)


def save_run(path, manifest: RunManifest, frames) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"type": "run", "manifest": manifest.to_json()}))
        fh.write("\n")
        for frame in frames:
            fh.write(json.dumps(frame.to_json()))
            fh.write("\n")


def load_run(path):
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("type") != "run":
            raise ValueError("not a run file")
        manifest = RunManifest.from_json(header["manifest"])
        frames = [RunFrame.from_json(json.loads(line)) for line in fh if line.strip()]
    return manifest, frames


def _resolve_sequence(manifest: RunManifest, run_path) -> SequenceData:
    p = manifest.sequence_path
    if not os.path.isabs(p):
        candidate = os.path.join(os.path.dirname(os.path.abspath(run_path)), p)
        if os.path.exists(candidate) and not os.path.exists(p):
            p = candidate
    return SequenceData.load(p)


def evaluate_runs(run_paths, out_dir, window=None, average_per_object=False,
                  points: int | None = None) -> dict:
    """ADD-S evaluation of tracked runs: CSV, summary JSON, SVG plots.

    CSV columns: object, run, t, mode, add_s.  The summary reports pooled
    medians and IQRs per mode and Wilcoxon p-values between modes on
    per-run medians (matched by scenario), optionally averaging runs per
    object first.
    """
    from .plots import svg_box, svg_timeseries

    os.makedirs(out_dir, exist_ok=True)
    rows = []           # (object, run_id, t, mode, add_s)
    models = {}
    spacing = []
    for rp in run_paths:
        manifest, frames = load_run(rp)
        seq = _resolve_sequence(manifest, rp)
        key = config_hash(seq.config)
        if key not in models:
            model = build_object_model(seq.config)
            if points is not None and points < model.surface_points.shape[0]:
                model = type(model)(sdf=model.sdf,
                                    surface_points=model.surface_points[:points])
            models[key] = model
            pts = models[key].surface_points
            d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
            np.fill_diagonal(d, np.inf)
            spacing.append(float(d.min(axis=1).mean()))
        model = models[key]
        gt = {round(r.t, 9): r.gt for r in seq.records}
        run_id = f"{manifest.object}-seed{manifest.seed}"
        for frame in frames:
            truth = gt.get(round(frame.t, 9))
            if truth is None:
                continue
            if window is not None and not (window[0] <= frame.t < window[1]):
                continue
            rows.append((manifest.object, run_id, frame.t, manifest.mode,
                         add_s(frame.estimate, truth, model)))

    csv_path = os.path.join(out_dir, "add_s.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["object", "run", "t", "mode", "add_s"])
        for row in rows:
            writer.writerow([row[0], row[1], repr(row[2]), row[3], repr(row[4])])

    summary = _summarize(rows, window, average_per_object)
    summary["adds_sampling"] = {"points": int(points) if points else None,
                                "mean_nn_spacing": max(spacing) if spacing else None}
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")

    series = _time_series(rows)
    svg_timeseries(os.path.join(out_dir, "add_s_timeseries.svg"), series,
                   title="ADD-S over time (median, IQR band)", ylabel="ADD-S [m]")
    dist = {mode: [r[4] for r in rows if r[3] == mode] for mode in summary["modes"]}
    svg_box(os.path.join(out_dir, "add_s_box.svg"), dist,
            title="ADD-S distribution per mode", ylabel="ADD-S [m]")
    return summary


def _summarize(rows, window, average_per_object) -> dict:
    modes = sorted({r[3] for r in rows})
    summary = {"window": list(window) if window else None,
               "average_per_object": bool(average_per_object),
               "modes": {}, "p_values": {}, "per_run_medians": {}}
    per_run = {}
    for mode in modes:
        vals = np.array([r[4] for r in rows if r[3] == mode])
        q1, q2, q3 = np.percentile(vals, [25, 50, 75])
        summary["modes"][mode] = {"median": float(q2),
                                  "iqr": [float(q1), float(q3)],
                                  "n_frames": int(vals.size)}
        medians = {}
        for obj, run_id in sorted({(r[0], r[1]) for r in rows if r[3] == mode}):
            rv = [r[4] for r in rows if r[3] == mode and r[1] == run_id]
            medians[run_id] = float(np.median(rv))
        per_run[mode] = medians
        summary["per_run_medians"][mode] = medians
    for i, ma in enumerate(modes):
        for mb in modes[i + 1:]:
            pair = f"{ma}_vs_{mb}"
            a, b = _matched(per_run[ma], per_run[mb], average_per_object)
            if a is None:
                summary["p_values"][pair] = None
                continue
            try:
                res = wilcoxon_signed_rank(a, b)
                summary["p_values"][pair] = None if res.all_zero else float(res.p_value)
            except TooFewSamples:
                summary["p_values"][pair] = None
    return summary


def _matched(med_a: dict, med_b: dict, average_per_object: bool):
    keys = sorted(set(med_a) & set(med_b))
    if not keys:
        return None, None
    a = np.array([med_a[k] for k in keys])
    b = np.array([med_b[k] for k in keys])
    if average_per_object:
        objs = sorted({k.rsplit("-seed", 1)[0] for k in keys})
        a = np.array([np.mean([med_a[k] for k in keys
                               if k.rsplit("-seed", 1)[0] == o]) for o in objs])
        b = np.array([np.mean([med_b[k] for k in keys
                               if k.rsplit("-seed", 1)[0] == o]) for o in objs])
    return a, b


def _time_series(rows):
    """Per mode: sorted (t, median, q1, q3) across runs at each timestamp."""
    series = {}
    for mode in sorted({r[3] for r in rows}):
        by_t = {}
        for r in rows:
            if r[3] == mode:
                by_t.setdefault(round(r[2], 9), []).append(r[4])
        pts = []
        for t in sorted(by_t):
            q1, q2, q3 = np.percentile(by_t[t], [25, 50, 75])
            pts.append((t, float(q2), float(q1), float(q3)))
        series[mode] = pts
    return series
