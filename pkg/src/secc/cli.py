"""Command-line entry point: seeded runs, the ablation ladder and SVG plots.

Config files are flat ``key=value`` text with dotted sections, e.g.::

    task.classes_known=6
    train.lr=0.01
    eval.threshold=0.5
    seeds=0,1,2
    out_dir=runs/demo

Exit codes: 0 success, 2 invalid config or input file, 3 training aborted on
a non-finite loss.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import math
import sys
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .datagen import AugConfig, GeneratorSpec, ShiftSpec, ValidationError, make_open_set_task
from .eval import MetricsReport, Mode, evaluate_model, project_2d
from .losses import LossBreakdown
from .trainer import (AUTO, NonFiniteLoss, TrainConfig, ablation_configs, history_csv, read_history_csv,
                      train)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_INVALID, EXIT_NONFINITE = 0, 2, 3
REQUIRED = ("train.lr", "train.epochs", "seeds")
ABLATION_ROWS = ("SE", "+CE", "+KL", "SE-CC")
ABLATION_DIRS = {"SE": "se", "+CE": "se_ce", "+KL": "se_ce_kl", "SE-CC": "se_cc"}
SUMMARY_METRICS = ("os", "os_star", "knwn", "mean", "overall", "os_macro")


class ConfigError(ValidationError):
    pass


@dataclass
class EvalSettings:
    mode: Optional[str] = None
    threshold: float = 0.5
    report_os_macro: bool = True


@dataclass
class ExperimentConfig:
    task: GeneratorSpec
    train: TrainConfig
    eval: EvalSettings
    seeds: tuple
    out_dir: Path


# ---------------------------------------------------------------- parsing

def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s: str) -> tuple:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _opt(conv):
    def f(s):
        return None if s.strip().lower() in ("none", "auto", "") else conv(s)
    return f


TASK_KEYS = {
    "d": int, "classes_known": int, "classes_unk_src": int, "classes_unk_tgt": int,
    "samples_per_class": int, "class_sep": float, "blob_std": float, "unknown_ratio": _opt(float),
    "layout": str, "spread": float,
    "rotation_angle": float, "translation": _floats, "noise_std": float,
}
SHIFT_KEYS = ("rotation_angle", "translation", "noise_std")
AUG_KEYS = {"aug.noise_std": float, "aug.flip_prob": float, "aug.scale_jitter": float}
EVAL_KEYS = {"mode": _opt(str), "threshold": float, "report_os_macro": _bool}


def _train_converters() -> dict:
    conv = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name == "aug":
            continue
        default = f.default
        if f.name == "K":
            conv[f.name] = lambda s: AUTO if s.strip().lower() == AUTO else int(s)
        elif f.name == "hidden_widths":
            conv[f.name] = _ints
        elif f.name == "unknown_source_present":
            conv[f.name] = _opt(_bool)
        elif f.name == "eval_mode":
            conv[f.name] = _opt(str)
        elif isinstance(default, bool):
            conv[f.name] = _bool
        elif isinstance(default, int):
            conv[f.name] = int
        elif isinstance(default, float):
            conv[f.name] = float
        else:
            conv[f.name] = str
    return conv


TRAIN_KEYS = _train_converters()


def parse_config_text(text: str) -> dict:
    """Raw ``key -> value string`` map; later duplicates are an error."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key}")
        out[key] = value
    return out


def _convert(key, conv, value):
    try:
        return conv(value)
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {value!r} ({e})") from None


def build_config(raw: dict, seeds_override: Optional[tuple] = None,
                 out_override: Optional[str] = None) -> ExperimentConfig:
    for key in REQUIRED:
        if key not in raw and not (key == "seeds" and seeds_override):
            raise ConfigError(f"missing required key {key}")
    task_kw, shift_kw, train_kw, aug_kw, eval_kw = {}, {}, {}, {}, {}
    seeds, out_dir = None, "out"
    for key, value in raw.items():
        section, _, name = key.partition(".")
        if key == "seeds":
            seeds = _convert(key, _ints, value)
        elif key == "out_dir":
            out_dir = value
        elif section == "task" and name in TASK_KEYS:
            v = _convert(key, TASK_KEYS[name], value)
            (shift_kw if name in SHIFT_KEYS else task_kw)[name] = v
        elif section == "train" and name in AUG_KEYS:
            aug_kw[name[4:]] = _convert(key, AUG_KEYS[name], value)
        elif section == "train" and name in TRAIN_KEYS:
            train_kw[name] = _convert(key, TRAIN_KEYS[name], value)
        elif section == "eval" and name in EVAL_KEYS:
            eval_kw[name] = _convert(key, EVAL_KEYS[name], value)
        else:
            raise ConfigError(f"unknown key {key}")

    if seeds_override is not None:
        seeds = tuple(seeds_override)
    if not seeds:
        raise ConfigError("seeds must be nonempty")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")

    d = task_kw.get("d", GeneratorSpec.d)
    shift_kw.setdefault("translation", (0.0,) * d)
    try:
        task = GeneratorSpec(**task_kw, shift=ShiftSpec(**shift_kw))
        task.validate()
    except ValidationError as e:
        raise ConfigError(f"task: {e}") from None

    ev = EvalSettings(**eval_kw)
    if ev.mode is not None:
        try:
            Mode(ev.mode)
        except ValueError:
            raise ConfigError(f"eval.mode: unknown mode {ev.mode!r}") from None
    if "eval_mode" not in train_kw:
        train_kw["eval_mode"] = ev.mode
    train_kw.setdefault("threshold", ev.threshold)
    cfg = TrainConfig(**train_kw, aug=AugConfig(**{**dataclasses.asdict(TrainConfig.aug), **aug_kw}))
    try:
        cfg.validate()
    except ValidationError as e:
        msg = str(e)
        raise ConfigError(msg if msg.startswith("train.") else f"train.aug: {msg}") from None
    out = Path(out_override) if out_override is not None else Path(out_dir)
    return ExperimentConfig(task, cfg, ev, seeds, out)


def resolve_config_path(name: str) -> Path:
    """A filesystem path, or the bare name of a bundled config."""
    p = Path(name)
    if p.is_file():
        return p
    bundled = resources.files("secc") / "configs"
    for cand in (name, f"{name}.cfg"):
        q = bundled / cand
        if q.is_file():
            return Path(str(q))
    raise ConfigError(f"config file not found: {name}")


def load_config(name: str, seeds_override=None, out_override=None) -> ExperimentConfig:
    path = resolve_config_path(name)
    return build_config(parse_config_text(path.read_text()), seeds_override, out_override)


# ---------------------------------------------------------------- artifacts

def _fmt(v) -> str:
    return "nan" if isinstance(v, float) and math.isnan(v) else format(v, ".17g")


def projection_csv(preds, true_labels, proj) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "true_label", "pred_label", "px", "py"])
    for i, (t, p, (x, y)) in enumerate(zip(true_labels, preds, proj)):
        w.writerow([i, int(t), int(p), _fmt(float(x)), _fmt(float(y))])
    return buf.getvalue()


def read_projection_csv(path) -> tuple:
    """(true_labels, pred_labels, xy) arrays."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as e:
        raise ValidationError(f"cannot read {path}: {e}") from None
    if not rows or rows[0] != ["id", "true_label", "pred_label", "px", "py"]:
        raise ValidationError(f"{path}: bad projection header")
    t, p, xy = [], [], []
    for n, r in enumerate(rows[1:], 2):
        if not r:
            continue
        if len(r) != 5:
            raise ValidationError(f"{path}:{n}: expected 5 fields")
        try:
            t.append(int(r[1]))
            p.append(int(r[2]))
            xy.append((float(r[3]), float(r[4])))
        except ValueError:
            raise ValidationError(f"{path}:{n}: malformed value") from None
    return np.array(t, dtype=np.int64), np.array(p, dtype=np.int64), np.array(xy, dtype=float).reshape(-1, 2)


def summary_csv(reports: list, include_os_macro: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "median", "min", "max"])
    for m in SUMMARY_METRICS:
        if m == "os_macro" and not include_os_macro:
            continue
        v = np.array([getattr(r, m) for r in reports], dtype=float)
        w.writerow([m, _fmt(float(np.median(v))), _fmt(float(v.min())), _fmt(float(v.max()))])
    return buf.getvalue()


def ablation_csv(rows: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "Knwn", "Mean", "Overall"])
    for name in ABLATION_ROWS:
        reps = rows[name]
        med = [float(np.median([getattr(r, k) for r in reps])) for k in ("knwn", "mean", "overall")]
        w.writerow([name] + [_fmt(v) for v in med])
    return buf.getvalue()


def read_ablation_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["config", "Knwn", "Mean", "Overall"]:
        raise ValidationError(f"{path}: bad ablation header")
    return {r[0]: dict(zip(("knwn", "mean", "overall"), map(float, r[1:]))) for r in rows[1:] if r}


# ---------------------------------------------------------------- svg

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")
W, H, PAD = 480, 360, 40


def _c(v: float) -> str:
    return f"{v:.2f}"


def _scale(vals, lo_px, hi_px):
    vals = np.asarray(vals, dtype=float)
    if vals.size == 0:
        return vals, (0.0, 1.0)
    lo, hi = float(vals.min()), float(vals.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    return lo_px + (vals - lo) / (hi - lo) * (hi_px - lo_px), (lo, hi)


def _svg_frame(title: str, body: list, xr, yr) -> str:
    head = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
            f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
            f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
            f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
            f'<text x="{W / 2:.0f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
            f'<text x="{PAD}" y="{H - PAD + 15}" font-size="10">{xr[0]:.3g}</text>',
            f'<text x="{W - PAD}" y="{H - PAD + 15}" font-size="10" text-anchor="end">{xr[1]:.3g}</text>',
            f'<text x="{PAD - 4}" y="{H - PAD}" font-size="10" text-anchor="end">{yr[0]:.3g}</text>',
            f'<text x="{PAD - 4}" y="{PAD + 8}" font-size="10" text-anchor="end">{yr[1]:.3g}</text>']
    return "\n".join(head + body + ["</svg>"]) + "\n"


def loss_curve_svg(history) -> str:
    cols = LossBreakdown.columns()
    steps = [h.step for h in history]
    values = {c: [getattr(h.losses, c) for h in history] for c in cols}
    finite = [v for c in cols for v in values[c] if math.isfinite(v)]
    xs, xr = _scale(steps, PAD, W - PAD)
    _, yr = _scale(finite, H - PAD, PAD)
    body = []
    if len(steps):
        for i, c in enumerate(cols):
            ys = H - PAD - (np.asarray(values[c]) - yr[0]) / (yr[1] - yr[0]) * (H - 2 * PAD)
            pts = " ".join(f"{_c(x)},{_c(y)}" for x, y in zip(xs, ys))
            body.append(f'<polyline fill="none" stroke="{PALETTE[i % len(PALETTE)]}" points="{pts}">'
                        f'<title>{c}</title></polyline>')
    for i, c in enumerate(cols):
        body.append(f'<text x="{W - PAD + 2}" y="{PAD + 12 * i}" font-size="9" '
                    f'fill="{PALETTE[i % len(PALETTE)]}">{c}</text>')
    return _svg_frame("losses", body, xr, yr)


def scatter_svg(true_labels, pred_labels, xy, unknown_id: Optional[int] = None) -> str:
    """One marker per row, colored by true label; unknown-class rows drawn as crosses."""
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    xs, xr = _scale(xy[:, 0], PAD, W - PAD)
    ys, yr = _scale(xy[:, 1], H - PAD, PAD)
    if unknown_id is None and len(true_labels):
        unknown_id = int(max(true_labels))
    body = []
    for x, y, t, p in zip(xs, ys, true_labels, pred_labels):
        col = PALETTE[int(t) % len(PALETTE)]
        tip = f"<title>true {int(t)} pred {int(p)}</title>"
        if int(t) == unknown_id:
            d = f"M{_c(x - 3)},{_c(y - 3)}L{_c(x + 3)},{_c(y + 3)}M{_c(x - 3)},{_c(y + 3)}L{_c(x + 3)},{_c(y - 3)}"
            body.append(f'<path class="marker unknown" d="{d}" stroke="black" stroke-width="1.2">{tip}</path>')
        else:
            body.append(f'<circle class="marker" cx="{_c(x)}" cy="{_c(y)}" r="2.5" fill="{col}">{tip}</circle>')
    return _svg_frame("projection", body, xr, yr)


# ---------------------------------------------------------------- commands

def _run_one(exp: ExperimentConfig, cfg: TrainConfig, seed: int, out: Path):
    task = make_open_set_task(exp.task, seed)
    ck = out / "checkpoints" if cfg.checkpoint_interval > 0 else None
    state, report = train(task, replace(cfg, seed=seed), checkpoint_dir=ck)
    _, preds, pooled = evaluate_model(state.student, task.target_features, task.reveal_target_labels(),
                                      task.partition, None if cfg.eval_mode is None else Mode(cfg.eval_mode),
                                      cfg.threshold)
    truth = task.partition.eval_label(task.reveal_target_labels())
    proj = project_2d(pooled)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "metrics.csv")
    (out / "history.csv").write_text(history_csv(state.history))
    (out / "projection.csv").write_text(projection_csv(preds, truth, proj))
    (out / "projection.svg").write_text(scatter_svg(truth, preds, proj, task.partition.unknown_id))
    return report


def cmd_run(exp: ExperimentConfig) -> int:
    reports = []
    for seed in exp.seeds:
        reports.append(_run_one(exp, exp.train, seed, exp.out_dir / f"seed_{seed}"))
    (exp.out_dir / "summary.csv").write_text(summary_csv(reports, exp.eval.report_os_macro))
    return EXIT_OK


def cmd_ablate(exp: ExperimentConfig) -> int:
    rows = {n: [] for n in ABLATION_ROWS}
    for seed in exp.seeds:
        for name, cfg in ablation_configs(exp.train).items():
            rows[name].append(_run_one(exp, cfg, seed, exp.out_dir / f"seed_{seed}" / ABLATION_DIRS[name]))
    exp.out_dir.mkdir(parents=True, exist_ok=True)
    (exp.out_dir / "ablation.csv").write_text(ablation_csv(rows))
    return EXIT_OK


def cmd_plot(history_path, projection_path, out_dir: Optional[str]) -> int:
    try:
        history = read_history_csv(history_path)
    except (OSError, ValueError, StopIteration) as e:
        raise ValidationError(f"{history_path}: malformed history ({e})") from None
    t, p, xy = read_projection_csv(projection_path)
    out = Path(out_dir) if out_dir is not None else Path(history_path).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "loss_curves.svg").write_text(loss_curve_svg(history))
    (out / "scatter.svg").write_text(scatter_svg(t, p, xy))
    return EXIT_OK


def _seed_list(s: str) -> tuple:
    try:
        return _ints(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="secc", description="Cluster-guided self-ensembling experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("run", "ablate"):
        sp = sub.add_parser(name)
        sp.add_argument("config", help="config file or bundled config name")
        sp.add_argument("--out", default=None, help="output directory (overrides out_dir)")
        sp.add_argument("--seeds", type=_seed_list, default=None, help="comma-separated seeds")
    sp = sub.add_parser("plot")
    sp.add_argument("history")
    sp.add_argument("projection")
    sp.add_argument("--out", default=None)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "plot":
            return cmd_plot(args.history, args.projection, args.out)
        exp = load_config(args.config, args.seeds, args.out)
        return cmd_run(exp) if args.command == "run" else cmd_ablate(exp)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except NonFiniteLoss as e:
        print(f"error: training aborted: {e}", file=sys.stderr)
        return EXIT_NONFINITE


if __name__ == "__main__":
    sys.exit(main())
