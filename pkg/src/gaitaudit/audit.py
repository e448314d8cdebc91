"""Sensor Importance Maps from per-trial attention, and laterality-bias flags."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import bootstrap, group_rows
from .model import SENSORS, AttentionRecord


@dataclass
class SensorImportanceMap:
    task: str
    n_trials: int
    mean: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    sensors: tuple[str, ...] = SENSORS
    unit: str = "trial"
    n_bootstrap: int = 1000

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.ci_low = np.asarray(self.ci_low, dtype=np.float64)
        self.ci_high = np.asarray(self.ci_high, dtype=np.float64)

    def index(self, sensor: str) -> int:
        return self.sensors.index(sensor)

    def to_dict(self) -> dict:
        return {
            s: {"mean": float(self.mean[i]), "ci_low": float(self.ci_low[i]), "ci_high": float(self.ci_high[i])}
            for i, s in enumerate(self.sensors)
        }


@dataclass
class BiasFlag:
    pair: tuple[str, str]
    sensor: str  # the neglected sensor
    partner: str
    rule: str
    severity: str  # info | warning | critical
    neglected_mean: float
    neglected_ci_high: float
    partner_mean: float
    rationale: str = field(default="")

    def to_dict(self) -> dict:
        return {
            "pair": list(self.pair),
            "sensor": self.sensor,
            "partner": self.partner,
            "rule": self.rule,
            "severity": self.severity,
            "evidence": {
                "neglected_mean": self.neglected_mean,
                "neglected_ci_high": self.neglected_ci_high,
                "partner_mean": self.partner_mean,
            },
            "rationale": self.rationale,
        }


def aggregate_attention(
    records: Sequence[AttentionRecord] | np.ndarray,
    n_bootstrap: int = 1000,
    seed: int = 0,
    task: str = "",
    level: float = 0.95,
    unit: str = "trial",
    patient_ids: Sequence[str] | None = None,
) -> SensorImportanceMap:
    """Mean attention per sensor with a percentile bootstrap CI.

    unit="patient" averages within patient first and resamples patients.
    """
    alphas = np.asarray([r.alpha for r in records] if not isinstance(records, np.ndarray) else records,
                        dtype=np.float64)
    if alphas.ndim != 2 or len(alphas) == 0:
        raise ValueError("aggregate_attention needs at least one attention record")
    n_trials = len(alphas)
    if unit == "patient":
        if patient_ids is None or len(patient_ids) != n_trials:
            raise ValueError("patient-level aggregation needs one patient id per record")
        alphas = np.stack([alphas[g].mean(axis=0) for g in group_rows(patient_ids)])
    elif unit != "trial":
        raise ValueError(f"unknown aggregation unit {unit!r}")
    mean = alphas.mean(axis=0)
    _, lo, hi = bootstrap(lambda idx: alphas[idx].mean(axis=0), len(alphas), n_bootstrap, seed, level)
    return SensorImportanceMap(task, n_trials, mean, lo, hi, unit=unit, n_bootstrap=n_bootstrap)


def flag_laterality_bias(
    imap: SensorImportanceMap,
    bilateral_pairs: Sequence[tuple[str, str]] = (("LF", "RF"),),
    neglect_threshold: float = 0.05,
    dominance_threshold: float = 0.50,
) -> list[BiasFlag]:
    """Flag bilateral pairs where one side is ignored.

    critical: neglected ci_high < neglect_threshold and partner mean > dominance_threshold
    warning:  neglected ci_high < neglect_threshold only
    info:     neglected mean < neglect_threshold but its CI reaches the threshold
    """
    flags = []
    for a, b in bilateral_pairs:
        if a not in imap.sensors or b not in imap.sensors:
            raise ValueError(f"pair ({a}, {b}) references a sensor not in the map")
        for neglected, partner in ((a, b), (b, a)):
            i, j = imap.index(neglected), imap.index(partner)
            m, hi, pm = float(imap.mean[i]), float(imap.ci_high[i]), float(imap.mean[j])
            if hi < neglect_threshold:
                if pm > dominance_threshold:
                    severity, rule = "critical", "neglect+dominance"
                    why = (f"{neglected} attention CI upper bound {hi:.4f} < {neglect_threshold} while "
                           f"{partner} mean {pm:.4f} > {dominance_threshold}: possible laterality confound")
                else:
                    severity, rule = "warning", "neglect"
                    why = (f"{neglected} attention CI upper bound {hi:.4f} < {neglect_threshold}; "
                           f"{partner} mean {pm:.4f} does not exceed {dominance_threshold}")
            elif m < neglect_threshold:
                severity, rule = "info", "uncertain-neglect"
                why = (f"{neglected} mean attention {m:.4f} < {neglect_threshold} but CI upper bound "
                       f"{hi:.4f} reaches the threshold")
            else:
                continue
            flags.append(BiasFlag((a, b), neglected, partner, rule, severity, m, hi, pm, why))
    return flags


# ---------------------------------------------------------------- report

_W, _H = 480, 320
_LEFT, _BOTTOM, _TOP = 60, 270, 30


def _num(v: float) -> str:
    return format(v, ".3f")


def render_svg(imap: SensorImportanceMap, flags: Sequence[BiasFlag]) -> str:
    flagged = {f.sensor: f.severity for f in flags}
    plot_h = _BOTTOM - _TOP
    slot = (_W - _LEFT - 20) / len(imap.sensors)
    bar_w = slot * 0.6

    def y_of(v: float) -> float:
        return _BOTTOM - max(0.0, min(1.0, v)) * plot_h

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<title>Sensor importance: {imap.task}</title>',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<line class="axis" x1="{_LEFT}" y1="{_BOTTOM}" x2="{_W - 10}" y2="{_BOTTOM}" stroke="black"/>',
        f'<line class="axis" x1="{_LEFT}" y1="{_TOP}" x2="{_LEFT}" y2="{_BOTTOM}" stroke="black"/>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = _num(y_of(tick))
        out.append(f'<text x="{_LEFT - 8}" y="{y}" font-size="11" text-anchor="end">{tick:.2f}</text>')
    for i, s in enumerate(imap.sensors):
        cx = _LEFT + slot * (i + 0.5)
        m, lo, hi = float(imap.mean[i]), float(imap.ci_low[i]), float(imap.ci_high[i])
        sev = flagged.get(s)
        fill = {"critical": "#d62728", "warning": "#ff7f0e", "info": "#bcbd22"}.get(sev, "#1f77b4")
        out.append(
            f'<rect class="bar" data-sensor="{s}" data-mean="{m!r}" x="{_num(cx - bar_w / 2)}" '
            f'y="{_num(y_of(m))}" width="{_num(bar_w)}" height="{_num(_BOTTOM - y_of(m))}" fill="{fill}"/>'
        )
        out.append(
            f'<line class="errorbar" data-sensor="{s}" data-ci-low="{lo!r}" data-ci-high="{hi!r}" '
            f'x1="{_num(cx)}" y1="{_num(y_of(lo))}" x2="{_num(cx)}" y2="{_num(y_of(hi))}" stroke="black"/>'
        )
        out.append(f'<text x="{_num(cx)}" y="{_BOTTOM + 18}" font-size="13" text-anchor="middle">{s}</text>')
        if sev is not None:
            out.append(
                f'<text class="flag" data-sensor="{s}" data-severity="{sev}" x="{_num(cx)}" '
                f'y="{_num(y_of(max(m, hi)) - 8)}" font-size="16" text-anchor="middle" fill="{fill}">!</text>'
            )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def report_dict(imap: SensorImportanceMap, flags: Sequence[BiasFlag], metrics: dict | None) -> dict:
    return {
        "task": imap.task,
        "n_trials": imap.n_trials,
        "importance": imap.to_dict(),
        "importance_meta": {"unit": imap.unit, "n_bootstrap": imap.n_bootstrap, "ci_method": "percentile"},
        "flags": [f.to_dict() for f in flags],
        "metrics": metrics or {},
    }


def render_report(imap: SensorImportanceMap, flags: Sequence[BiasFlag], metrics: dict | None, out_dir) -> dict:
    """Write audit.json and importance.svg into ``out_dir``; returns the JSON dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rep = report_dict(imap, flags, metrics)
    (out_dir / "audit.json").write_text(json.dumps(rep, indent=2) + "\n", encoding="utf-8")
    (out_dir / "importance.svg").write_text(render_svg(imap, flags), encoding="utf-8")
    return rep
