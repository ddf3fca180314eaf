"""Training loop, evaluation and ablation runner."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint, config as config_mod
from .config import RunConfig
from .losses import LossBreakdown, corr_matrix, total_loss
from .metrics import frame_weighted_mean, norm_precision, precision, success_auc
from .model import BBox, SiamTracker, Tracker, crop
from .nn import SGD
from .rng import stream
from .synthgen import SyntheticSequence, make_suite, split_suite
from .tensor import NonFiniteError, Tensor, no_grad

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "total", "l_cfgb", "l_norm", "l_dcfg")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


def _fmt(v: float) -> str:
    return repr(float(v))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: SiamTracker
    log_rows: list[dict]
    checkpoints: list[Path] = field(default_factory=list)


def sample_batch(seqs: Sequence[SyntheticSequence], cfg: RunConfig, rng: np.random.Generator):
    """Random (template, search) crop pairs and the gt box in search-crop coordinates."""
    tc = cfg.tracker
    zs, xs, gts = [], [], []
    for _ in range(cfg.batch_size):
        seq = seqs[int(rng.integers(len(seqs)))]
        n = len(seq)
        a = int(rng.integers(n))
        b = int(np.clip(a + rng.integers(-cfg.max_gap, cfg.max_gap + 1), 0, n - 1))
        ga, gb = seq.gt[a], seq.gt[b]
        z, _, _ = crop(seq.frames[a], ga.cx, ga.cy, tc.template_size)
        dx, dy = rng.integers(-cfg.search_shift, cfg.search_shift + 1, size=2)
        x, x0, y0 = crop(seq.frames[b], gb.cx + dx, gb.cy + dy, tc.search_size)
        zs.append(z)
        xs.append(x)
        gts.append(BBox(gb.cx - x0, gb.cy - y0, gb.w, gb.h))
    return np.stack(zs)[:, None], np.stack(xs)[:, None], gts


def build_model(cfg: RunConfig) -> SiamTracker:
    return SiamTracker(cfg.tracker, seed=cfg.seed)


def loss_step(model: SiamTracker, cfg: RunConfig, z: np.ndarray, x: np.ndarray, gts, step: int) -> LossBreakdown:
    n = cfg.tracker.dccfg.n_groups
    out = model.forward_train(Tensor(z), Tensor(x), mask_group_index=step % n if n else 0)
    return total_loss(out.groups, out.norm, out.f_s, gts, cfg.tracker, cfg.loss)


def _clip_gradients(params, max_norm: float) -> float:
    sq = sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None)
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def train(cfg: RunConfig, run_dir: Path | None = None, train_seqs=None, fixed_batch=None) -> TrainResult:
    """SGD on the total objective. Deterministic given ``cfg``.

    ``fixed_batch`` (z, x, gts) replaces sampling, for overfit checks.
    """
    if train_seqs is None and fixed_batch is None:
        _, train_seqs = split_suite(make_suite(cfg.suite_seed))
    model = build_model(cfg)
    model.train()
    params = model.parameters()
    opt = SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    rng = stream(cfg.seed, "train-sampler")
    rows: list[dict] = []
    ckpts: list[Path] = []
    log_fh = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(config_mod.dumps(cfg))
        log_fh = open(run_dir / "train_log.csv", "w", newline="")
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
    try:
        for step in range(cfg.steps):
            z, x, gts = fixed_batch if fixed_batch is not None else sample_batch(train_seqs, cfg, rng)
            try:
                lb = loss_step(model, cfg, z, x, gts, step)
                opt.zero_grad()
                lb.total.backward()
            except NonFiniteError as exc:
                dump = {"step": step, "error": str(exc), "config": config_mod.to_dict(cfg),
                        "rng_state": rng.bit_generator.state}
                if run_dir is not None:
                    (run_dir / "divergence.json").write_text(json.dumps(dump, indent=2, default=str))
                raise DivergenceError(f"non-finite values at step {step}: {exc}", dump) from exc
            _clip_gradients(params, cfg.grad_clip)
            opt.step()
            row = {"step": step, **lb.values()}
            rows.append(row)
            if log_fh is not None:
                writer.writerow([step] + [_fmt(row[c]) for c in LOG_COLUMNS[1:]])
            if run_dir is not None and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
                ckpts.append(save_model(model, cfg, run_dir / "checkpoints" / f"step_{step + 1:06d}"))
        if run_dir is not None:
            ckpts.append(save_model(model, cfg, run_dir / "checkpoints" / "final"))
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    return TrainResult(model, rows, ckpts)


def save_model(model: SiamTracker, cfg: RunConfig, stem: Path) -> Path:
    return checkpoint.save(stem, model.state_dict(), config_mod.to_dict(cfg))


def load_model(path) -> tuple[SiamTracker, RunConfig]:
    state, cfg_dict = checkpoint.load(path)
    cfg = config_mod.from_dict(cfg_dict)
    model = build_model(cfg)
    try:
        model.load_state_dict(state)
    except ValueError as exc:
        raise checkpoint.CheckpointError(f"incompatible checkpoint: {exc}") from exc
    model.eval()
    return model, cfg


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class SequenceResult:
    name: str
    attributes: list[str]
    frames: int
    precision: float
    norm_precision: float
    success: float
    diversity: float
    track: list[tuple[int, float, float, float, float, float]] = field(repr=False, default_factory=list)


@dataclass
class EvalReport:
    sequences: list[SequenceResult]
    aggregate: dict[str, float]
    by_attribute: dict[str, dict[str, float]]

    def to_json(self) -> str:
        d = {
            "aggregate": self.aggregate,
            "by_attribute": self.by_attribute,
            "sequences": [{k: v for k, v in dataclasses.asdict(s).items() if k != "track"} for s in self.sequences],
        }
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scope", "name", "frames", "precision", "norm_precision", "success", "diversity"])
        for s in self.sequences:
            w.writerow(["sequence", s.name, s.frames, _fmt(s.precision), _fmt(s.norm_precision),
                        _fmt(s.success), _fmt(s.diversity)])
        for attr, m in sorted(self.by_attribute.items()):
            w.writerow(["attribute", attr, int(m["frames"]), _fmt(m["precision"]), _fmt(m["norm_precision"]),
                        _fmt(m["success"]), _fmt(m["diversity"])])
        a = self.aggregate
        w.writerow(["aggregate", "ALL", int(a["frames"]), _fmt(a["precision"]), _fmt(a["norm_precision"]),
                    _fmt(a["success"]), _fmt(a["diversity"])])
        return buf.getvalue()


def mean_offdiag_abs(maps: np.ndarray, eps: float = 1e-8) -> float:
    """Mean |Pearson correlation| over distinct group pairs; ``maps`` is [..., N, H, W]."""
    n = maps.shape[-3]
    if n < 2:
        return 0.0
    with no_grad():
        c = corr_matrix([Tensor(maps[..., k:k + 1, :, :]) for k in range(n)], eps).data
    off = ~np.eye(n, dtype=bool)
    return float(np.abs(c[..., off]).mean())


def run_sequence(model: SiamTracker, seq: SyntheticSequence, threshold: float,
                 probe_groups: int, eps: float) -> SequenceResult:
    tracker = Tracker(model)
    tracker.init(seq.frames[0], seq.gt[0])
    preds = [seq.gt[0]]
    track = [(0, seq.gt[0].cx, seq.gt[0].cy, seq.gt[0].w, seq.gt[0].h, 1.0)]
    for t in range(1, len(seq)):
        box, score = tracker.step(seq.frames[t])
        preds.append(box)
        track.append((t, box.cx, box.cy, box.w, box.h, score))
    ts = model.cfg.template_size
    crops = np.stack([crop(seq.frames[t], g.cx, g.cy, ts)[0] for t, g in enumerate(seq.gt)])[:, None]
    with no_grad():
        maps = model.diversity_maps(Tensor(crops), probe_groups)
    return SequenceResult(seq.name, sorted(seq.attributes), len(seq), precision(preds, seq.gt, threshold),
                          norm_precision(preds, seq.gt), success_auc(preds, seq.gt),
                          mean_offdiag_abs(maps, eps), track)


def _pool(results: Sequence[SequenceResult]) -> dict[str, float]:
    frames = [r.frames for r in results]
    return {
        "frames": float(sum(frames)),
        "sequences": float(len(results)),
        "precision": frame_weighted_mean([r.precision for r in results], frames),
        "norm_precision": frame_weighted_mean([r.norm_precision for r in results], frames),
        "success": frame_weighted_mean([r.success for r in results], frames),
        "diversity": frame_weighted_mean([r.diversity for r in results], frames),
    }


def evaluate(model_or_path, suite: Sequence[SyntheticSequence] | None = None, run_cfg: RunConfig | None = None,
             out_dir: Path | None = None) -> EvalReport:
    """Track every evaluation sequence from its frame-0 box and score it."""
    if isinstance(model_or_path, (str, Path)):
        model, ckpt_cfg = load_model(model_or_path)
        run_cfg = run_cfg or ckpt_cfg
    else:
        model = model_or_path
        run_cfg = run_cfg or RunConfig(tracker=model.cfg)
    model.eval()
    if suite is None:
        suite, _ = split_suite(make_suite(run_cfg.suite_seed))
    results = [run_sequence(model, s, run_cfg.precision_threshold, run_cfg.probe_groups,
                            run_cfg.loss.eps_corr) for s in suite]
    attrs = sorted({a for r in results for a in r.attributes})
    by_attr = {a: _pool([r for r in results if a in r.attributes]) for a in attrs}
    clean = [r for r in results if not {"DI", "OCC"} & set(r.attributes)]
    if clean:
        by_attr["CLEAN"] = _pool(clean)
    report = EvalReport(results, _pool(results), by_attr)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "eval_report.json").write_text(report.to_json())
        (out_dir / "eval_report.csv").write_text(report.to_csv())
        tdir = out_dir / "tracks"
        tdir.mkdir(exist_ok=True)
        for r in results:
            with open(tdir / f"{r.name}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["frame_index", "cx", "cy", "w", "h", "score"])
                for row in r.track:
                    w.writerow([row[0]] + [_fmt(v) for v in row[1:]])
    return report


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

AXES = ("components", "dcfg_loss", "dccfg", "N", "g")
N_VALUES = (0, 1, 2, 4, 8, 16)
G_VALUES = (1, 2, 4, 8)
ABLATION_COLUMNS = ("variant", "seed", "precision", "norm_precision", "success",
                    "precision_DI", "precision_CLEAN", "diversity")


def variants_for(base: RunConfig, axis: str) -> list[tuple[str, RunConfig]]:
    def with_(**kw) -> RunConfig:
        d = config_mod.to_dict(base)
        for key, val in kw.items():
            node = d
            parts = key.split("__")
            for p in parts[:-1]:
                node = node[p]
            node[parts[-1]] = val
        return config_mod.from_dict(d)

    if axis == "components":
        return [
            ("baseline", with_(tracker__use_dccfg=False, loss__use_dcfg_loss=False)),
            ("dccfg", with_(tracker__use_dccfg=True, loss__use_dcfg_loss=False)),
            ("dccfg+loss", with_(tracker__use_dccfg=True, loss__use_dcfg_loss=True)),
        ]
    if axis == "dcfg_loss":
        return [("loss_off", with_(loss__use_dcfg_loss=False)), ("loss_on", with_(loss__use_dcfg_loss=True))]
    if axis == "dccfg":
        return [("dccfg_off", with_(tracker__use_dccfg=False)), ("dccfg_on", with_(tracker__use_dccfg=True))]
    if axis == "N":
        return [(f"N={n}", with_(tracker__dccfg__n_groups=n)) for n in N_VALUES]
    if axis == "g":
        return [(f"g={g}", with_(tracker__dccfg__groups=g)) for g in G_VALUES]
    raise ValueError(f"unknown ablation axis {axis!r}; choose from {AXES}")


def _metrics_row(report: EvalReport) -> dict[str, float]:
    a = report.aggregate
    di = report.by_attribute.get("DI", {})
    clean = report.by_attribute.get("CLEAN", {})
    return {"precision": a["precision"], "norm_precision": a["norm_precision"], "success": a["success"],
            "precision_DI": di.get("precision", float("nan")),
            "precision_CLEAN": clean.get("precision", float("nan")), "diversity": a["diversity"]}


@dataclass
class AblationResult:
    axis: str
    rows: list[dict]

    def variants(self) -> list[str]:
        return list(dict.fromkeys(r["variant"] for r in self.rows))

    def metric(self, variant: str, name: str) -> list[float]:
        return [r[name] for r in self.rows if r["variant"] == variant]

    def summary(self) -> list[dict]:
        out = []
        for v in self.variants():
            rows = [r for r in self.rows if r["variant"] == v]
            d = {"variant": v, "seed": "mean"}
            for c in ABLATION_COLUMNS[2:]:
                d[c] = float(np.mean([r[c] for r in rows]))
            out.append(d)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in self.rows + self.summary():
            w.writerow([r["variant"], r["seed"]] + [_fmt(r[c]) for c in ABLATION_COLUMNS[2:]])
        return buf.getvalue()

    def to_text(self) -> str:
        cells = [list(ABLATION_COLUMNS)]
        for r in self.rows + self.summary():
            cells.append([str(r["variant"]), str(r["seed"])] + [f"{r[c]:.4f}" for c in ABLATION_COLUMNS[2:]])
        widths = [max(len(row[i]) for row in cells) for i in range(len(ABLATION_COLUMNS))]
        return "\n".join("  ".join(v.rjust(wd) for v, wd in zip(row, widths)) for row in cells) + "\n"


def ablate(base: RunConfig, axis: str, seeds: Sequence[int] = (0, 1, 2), out_dir: Path | None = None,
           eval_suite=None, train_seqs=None) -> AblationResult:
    """Train and evaluate every variant of ``axis`` under each seed (paired across variants)."""
    if eval_suite is None or train_seqs is None:
        ev, tr = split_suite(make_suite(base.suite_seed))
        eval_suite = ev if eval_suite is None else eval_suite
        train_seqs = tr if train_seqs is None else train_seqs
    rows = []
    for name, vcfg in variants_for(base, axis):
        for seed in seeds:
            cfg = dataclasses.replace(vcfg, seed=int(seed))
            log.info("ablation %s: variant %s seed %d", axis, name, seed)
            res = train(cfg, train_seqs=train_seqs)
            report = evaluate(res.model, eval_suite, cfg)
            rows.append({"variant": name, "seed": int(seed), **_metrics_row(report)})
    result = AblationResult(axis, rows)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"ablation_{axis}.csv").write_text(result.to_csv())
        (out_dir / f"ablation_{axis}.txt").write_text(result.to_text())
        if axis == "N":
            from .plots import line_plot_svg

            summ = result.summary()
            xs = [int(r["variant"].split("=")[1]) for r in summ]
            (out_dir / "plots").mkdir(exist_ok=True)
            for metric in ("precision", "success", "diversity"):
                svg = line_plot_svg(xs, [r[metric] for r in summ], "feature groups N", metric)
                (out_dir / "plots" / f"N_vs_{metric}.svg").write_text(svg)
    return result
