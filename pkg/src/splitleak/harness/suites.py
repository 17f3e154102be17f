"""Experiment orchestration.

Each suite turns an :class:`ExperimentConfig` into result files under the
output directory and a manifest that hashes them. Random streams derive
from the experiment seed by position, never from wall-clock state:

* ``seed/(1, cell, sample)`` feeds the defense of one sample in one cell;
* ``seed/(2, sample)`` initializes the attack on one sample, the same in
  every cell so cells differ only by the defense or split point.

Wall-clock timings live in ``timings.csv``; ``results.csv`` and the
summaries hold only deterministic quantities so reruns compare bitwise.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .. import __version__
from ..attack import actinv_batch
from ..core import Rng
from ..defense import DefenseContext, DefenseSpec, apply_defense
from ..metrics import mean_std, next_token_comparison, score
from ..model import Tokenizer, init_model, load_checkpoint, toy_train
from .config import ExperimentConfig
from .corpus import load_corpus
from .io import RESULT_COLUMNS, write_csv, write_manifest

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("defense", "defense_param", "q1", "n", "n_errors", "precision_mean",
                   "precision_std", "recall_mean", "recall_std", "rouge_l_mean", "rouge_l_std",
                   "rouge_l_se", "distance_mean")
TIMING_COLUMNS = ("sample_id", "defense", "defense_param", "q1", "attack_seconds",
                  "defense_seconds")


@dataclass
class Workspace:
    cfg: ExperimentConfig
    model: object
    tokenizer: Tokenizer
    prompts: list          # token-id lists
    texts: list

    @property
    def rng(self) -> Rng:
        return Rng(self.cfg.seed)


def prepare(cfg: ExperimentConfig) -> Workspace:
    """Load the corpus, build the tokenizer and the model the suites share."""
    texts = load_corpus(cfg.corpus)
    if not texts:
        raise ValueError("corpus is empty")
    meta = {}
    if cfg.checkpoint:
        model, meta = load_checkpoint(cfg.checkpoint, return_metadata=True)
    else:
        model = init_model(cfg.model)
    if "tokenizer" in meta:
        tok = Tokenizer.from_dict(meta["tokenizer"])
    else:
        tok = Tokenizer.build(texts, model.config.vocab_size)
    if cfg.train_steps:
        model, _ = toy_train(model, [tok.encode(t) for t in texts], cfg.train_steps,
                             seed=cfg.seed)
    model = model.with_split(cfg.model.split_point) if not cfg.checkpoint else model
    chosen = [t for t in texts if tok.encode(t)][:cfg.prompts]
    prompts = [tok.encode(t)[:cfg.max_len] for t in chosen]
    return Workspace(cfg=cfg, model=model, tokenizer=tok, prompts=prompts, texts=chosen)


# ------------------------------------------------------------------ core pipeline


def _defend_all(model, prompts, spec: DefenseSpec, rng_of, workers: int):
    """Defended cut-layer activations for every prompt: list of (h | Exception, seconds)."""
    def one(i):
        ids = prompts[i]
        try:
            h0 = model.embed(ids).data
            h = model.client_forward(h0).data
            t0 = time.perf_counter()
            out = apply_defense(h, spec, DefenseContext(model.client_forward, h0), rng=rng_of(i))
            return out, time.perf_counter() - t0
        except Exception as exc:  # recorded as an error row, never aborts the suite
            log.warning("sample %d failed under %s: %s", i, spec.label, exc)
            return exc, 0.0

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, range(len(prompts))))
    return [one(i) for i in range(len(prompts))]


def run_cell(model, prompts, spec: DefenseSpec, q1: int, attack_cfg, rng: Rng,
             cell: int, workers: int = 1) -> tuple:
    """Defend, attack and score every prompt for one (defense, Q1) cell."""
    mq = model.with_split(q1)
    defended = _defend_all(mq, prompts, spec, lambda i: rng.derive(1, cell, i), workers)
    ok = [i for i, (h, _) in enumerate(defended) if not isinstance(h, Exception)]
    results = {}
    if ok:
        try:
            out = actinv_batch(mq.client_forward, mq.embedding, [defended[i][0] for i in ok],
                               attack_cfg, [rng.derive(2, i) for i in ok])
            results = dict(zip(ok, out))
        except Exception as exc:
            log.warning("attack failed for %s at q1=%d: %s", spec.label, q1, exc)
            for i in ok:
                defended[i] = (exc, defended[i][1])
    rows, times = [], []
    for i, ids in enumerate(prompts):
        base = {"sample_id": i, "defense": spec.kind, "defense_param": spec.strength, "q1": q1}
        h, dsec = defended[i]
        if i in results and not isinstance(h, Exception):
            r = results[i]
            s = score(r.tokens, ids)
            rows.append({**base, "precision": s.precision, "recall": s.recall,
                         "rouge_l": s.rouge_l, "distance": r.distance, "error": ""})
            times.append({**base, "attack_seconds": r.wall_time, "defense_seconds": dsec})
        else:
            err = h if isinstance(h, Exception) else RuntimeError("attack produced no result")
            rows.append({**base, "precision": math.nan, "recall": math.nan,
                         "rouge_l": math.nan, "distance": math.nan,
                         "error": f"{type(err).__name__}: {err}"})
            times.append({**base, "attack_seconds": math.nan, "defense_seconds": dsec})
    return rows, times


def attack_rouge(model, prompts, spec: DefenseSpec, attack_cfg, rng: Rng) -> list:
    """Per-prompt ROUGE-L of the attack against ``model`` under ``spec``."""
    rows, _ = run_cell(model, prompts, spec, model.config.split_point, attack_cfg, rng, 0)
    return [r["rouge_l"] for r in rows if not r["error"]]


def summarize(rows) -> list:
    """Mean and spread per (defense, param, q1) cell, in first-seen order."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["defense"], float(r["defense_param"]), int(r["q1"])), []).append(r)
    out = []
    for (kind, param, q1), rs in groups.items():
        good = [r for r in rs if not r["error"]]
        row = {"defense": kind, "defense_param": param, "q1": q1, "n": len(good),
               "n_errors": len(rs) - len(good)}
        for key in ("precision", "recall", "rouge_l"):
            m, sd, se = mean_std([float(r[key]) for r in good])
            row[f"{key}_mean"], row[f"{key}_std"] = m, sd
            if key == "rouge_l":
                row["rouge_l_se"] = se
        row["distance_mean"] = mean_std([float(r["distance"]) for r in good])[0]
        out.append(row)
    return out


def _finish(cfg: ExperimentConfig, out_dir: Path, written: list, extra_seeds: Optional[dict] = None,
            timings: Optional[dict] = None) -> Path:
    seeds = {"experiment": cfg.seed, "from_env": cfg.seed_from_env,
             "defense_stream": "seed/(1, cell, sample)", "attack_stream": "seed/(2, sample)"}
    seeds.update(extra_seeds or {})
    return write_manifest(out_dir, cfg.resolved(), written, seeds, timings or {}, __version__)


def _out(cfg: ExperimentConfig, sub: Optional[str] = None) -> Path:
    p = Path(cfg.output_dir) / sub if sub else Path(cfg.output_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _run_cells(ws: Workspace, cells: list, out_dir: Path) -> dict:
    rows, times, walls = [], [], {}
    for c, (spec, q1) in enumerate(cells):
        t0 = time.perf_counter()
        r, t = run_cell(ws.model, ws.prompts, spec, q1, ws.cfg.attack, ws.rng, c,
                        ws.cfg.workers)
        walls[f"{spec.label}/q1={q1}"] = time.perf_counter() - t0
        log.info("cell %s q1=%d done in %.1fs", spec.label, q1, walls[f"{spec.label}/q1={q1}"])
        rows += r
        times += t
    summary = summarize(rows)
    files = [write_csv(out_dir / "results.csv", RESULT_COLUMNS[:8] + ("error",), rows),
             write_csv(out_dir / "summary.csv", SUMMARY_COLUMNS, summary),
             write_csv(out_dir / "timings.csv", TIMING_COLUMNS, times)]
    return {"rows": rows, "summary": summary, "files": files, "walls": walls}


@dataclass
class SuiteResult:
    out_dir: Path
    summary: list
    rows: list
    manifest: Path
    extra: dict

    @property
    def n_errors(self) -> int:
        return sum(1 for r in self.rows if r.get("error"))


def run_attack_suite(cfg: ExperimentConfig, ws: Optional[Workspace] = None) -> SuiteResult:
    ws = ws or prepare(cfg)
    out = _out(cfg, "attack")
    cells = [(cfg.defense(d), cfg.model.split_point) for d in cfg.defenses]
    res = _run_cells(ws, cells, out)
    man = _finish(cfg, out, res["files"], timings=res["walls"])
    return SuiteResult(out, res["summary"], res["rows"], man, {})


FRONTIER_COLUMNS = ("defense", "defense_param", "level", "rouge_l_mean", "recall_mean",
                    "agreement", "kl_divergence")


def grid_specs(cfg: ExperimentConfig) -> list:
    specs = [(DefenseSpec(), 0)]
    for kind in cfg.grid_kinds:
        specs += [(cfg.level_spec(kind, lv), lv) for lv in cfg.levels]
    return specs


def utility_for(ws: Workspace, spec: DefenseSpec, rng: Rng, cell: int) -> tuple:
    """Next-token agreement and KL between clean and defended server outputs."""
    m = ws.model
    agree, kls = [], []
    for i, ids in enumerate(ws.prompts):
        h0 = m.embed(ids).data
        h = m.client_forward(h0).data
        hd = apply_defense(h, spec, DefenseContext(m.client_forward, h0), rng=rng.derive(1, cell, i))
        a, k = next_token_comparison(m.server_forward(h).data, m.server_forward(hd).data)
        agree.append(a)
        kls.append(k)
    return float(np.mean(agree)), float(np.mean(kls))


def run_defense_grid(cfg: ExperimentConfig, ws: Optional[Workspace] = None) -> SuiteResult:
    ws = ws or prepare(cfg)
    out = _out(cfg, "defense_grid")
    specs = grid_specs(cfg)
    res = _run_cells(ws, [(s, cfg.model.split_point) for s, _ in specs], out)
    frontier = []
    for c, ((spec, lv), summ) in enumerate(zip(specs, res["summary"])):
        # the defended activations seen by the server are the ones the attack saw
        agree, kl = utility_for(ws, spec, ws.rng, c)
        frontier.append({"defense": spec.kind, "defense_param": spec.strength, "level": lv,
                         "rouge_l_mean": summ["rouge_l_mean"], "recall_mean": summ["recall_mean"],
                         "agreement": agree, "kl_divergence": kl})
    files = res["files"] + [write_csv(out / "frontier.csv", FRONTIER_COLUMNS, frontier)]
    man = _finish(cfg, out, files, timings=res["walls"])
    return SuiteResult(out, res["summary"], res["rows"], man, {"frontier": frontier})


def run_q1_ablation(cfg: ExperimentConfig, ws: Optional[Workspace] = None) -> SuiteResult:
    ws = ws or prepare(cfg)
    out = _out(cfg, "q1_ablation")
    spec = cfg.defense(cfg.q1_defense)
    res = _run_cells(ws, [(spec, q) for q in cfg.q1_list], out)
    man = _finish(cfg, out, res["files"], timings=res["walls"])
    return SuiteResult(out, res["summary"], res["rows"], man, {})


PAF_COLUMNS = ("layer", "mean_paf", "std_err", "max_paf", "spectral_norm", "eig_min",
               "eig_max", "best_sampled_gain", "n_inputs", "n_draws", "degenerate")


def _paf_inputs(ws: Workspace) -> list:
    return [ws.model.embed(p).data for p in ws.prompts[:ws.cfg.paf_inputs]]


def run_paf_study(cfg: ExperimentConfig, ws: Optional[Workspace] = None) -> SuiteResult:
    from ..sensitivity import paf_estimate
    ws = ws or prepare(cfg)
    out = _out(cfg, "paf")
    inputs = _paf_inputs(ws)
    reports = [paf_estimate(ws.model, layer, inputs, draws=cfg.paf_draws, rng=ws.rng.derive(3, j))
               for j, layer in enumerate(ws.model.client_layers())]
    rows = [r.row() for r in reports]
    files = [write_csv(out / "paf.csv", PAF_COLUMNS, rows)]
    man = _finish(cfg, out, files, extra_seeds={"paf_stream": "seed/(3, layer)"})
    return SuiteResult(out, rows, rows, man, {"reports": reports})


BYPASS_COLUMNS = ("layer", "paf", "rouge_l", "rouge_l_se")


def run_bypass_study(cfg: ExperimentConfig, ws: Optional[Workspace] = None) -> SuiteResult:
    from ..sensitivity import bypass_study
    import json
    ws = ws or prepare(cfg)
    out = _out(cfg, "bypass")
    study = bypass_study(ws.model, ws.model.client_layers(), ws.prompts, cfg.attack,
                         cfg.defense(cfg.bypass_defense), ws.rng.derive(4),
                         paf_inputs=cfg.paf_inputs, draws=cfg.paf_draws)
    rows = study.table()
    files = [write_csv(out / "bypass.csv", BYPASS_COLUMNS, rows)]
    stats = out / "bypass_stats.json"
    stats.write_text(json.dumps({"pearson_r": study.pearson_r, "degenerate": study.degenerate,
                                 "layers": len(rows),
                                 "ffn_bypass": "rectangular projections drop the whole "
                                               "feed-forward branch"}, indent=2) + "\n")
    files.append(stats)
    man = _finish(cfg, out, files, extra_seeds={"bypass_stream": "seed/(4, ...)"})
    return SuiteResult(out, rows, rows, man, {"study": study})


# ------------------------------------------------------------------ timing

TIMING_TABLE_COLUMNS = ("defense", "protected_ratio", "trials", "seconds_mean", "seconds_std",
                        "seconds_per_1k_tokens_mean", "seconds_per_1k_tokens_std")


def protected_rows(L: int, ratio: float) -> tuple:
    """``round(ratio·L)`` evenly spread token positions."""
    k = int(round(ratio * L))
    if k == 0:
        return ()
    return tuple(sorted({int(round(x)) for x in np.linspace(0, L - 1, k)}))


def _time_defense(ws: Workspace, spec: DefenseSpec, trials: int, rng: Rng) -> list:
    secs = []
    for t in range(trials):
        ids = ws.prompts[t % len(ws.prompts)]
        h0 = ws.model.embed(ids).data
        h = ws.model.client_forward(h0).data
        ctx = DefenseContext(ws.model.client_forward, h0)
        t0 = time.perf_counter()
        apply_defense(h, spec, ctx, rng=rng.derive(t))
        secs.append(time.perf_counter() - t0)
    return secs


def _long_prompts(ws: Workspace, n: int) -> Workspace:
    """Prompts padded to the configured max length so row fractions are meaningful."""
    L = ws.cfg.max_len
    rng = ws.rng.derive(5)
    V = ws.model.config.vocab_size
    prompts = [list(rng.derive(i).integers(2, V, size=L)) for i in range(n)]
    return Workspace(ws.cfg, ws.model, ws.tokenizer, prompts, ws.texts)


def run_timing(cfg: ExperimentConfig, ws: Optional[Workspace] = None) -> SuiteResult:
    import json
    ws = ws or prepare(cfg)
    out = _out(cfg, "timing")
    lw = _long_prompts(ws, cfg.timing_trials)
    L = cfg.max_len
    rows = []
    for k, kind in enumerate(cfg.timing_kinds):
        spec = cfg.level_spec(kind, 3) if kind != "none" else DefenseSpec()
        secs = _time_defense(lw, spec, cfg.timing_trials, ws.rng.derive(6, k))
        rows.append(_timing_row(kind, 1.0, secs, L))
    sel = {}
    base = cfg.level_spec("pripert-l0", 3)
    for r in (0.0,) + tuple(cfg.timing_ratios):
        spec = DefenseSpec(**{**base.as_dict(), "protected": protected_rows(L, r)})
        secs = _time_defense(lw, spec, cfg.timing_trials, ws.rng.derive(7))
        sel[r] = secs
        rows.append(_timing_row("pripert-l0/selective", r, secs, L))
    fit = fit_linear([r for r in sel if r > 0], [float(np.mean(sel[r])) for r in sel if r > 0])
    files = [write_csv(out / "timing.csv", TIMING_TABLE_COLUMNS, rows)]
    fit_path = out / "timing_fit.json"
    fit_path.write_text(json.dumps(fit, indent=2) + "\n")
    files.append(fit_path)
    man = _finish(cfg, out, files)
    return SuiteResult(out, rows, rows, man, {"fit": fit, "selective": sel})


def _timing_row(kind, ratio, secs, L) -> dict:
    m, sd, _ = mean_std(secs)
    return {"defense": kind, "protected_ratio": ratio, "trials": len(secs), "seconds_mean": m,
            "seconds_std": sd, "seconds_per_1k_tokens_mean": m * 1000.0 / L,
            "seconds_per_1k_tokens_std": sd * 1000.0 / L}


def fit_linear(xs, ys) -> dict:
    """Least-squares ``a + b·x`` with residuals."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    b, a = np.polyfit(x, y, 1)
    resid = y - (a + b * x)
    return {"a": float(a), "b": float(b), "x": x.tolist(), "y": y.tolist(),
            "residuals": resid.tolist(),
            "max_abs_residual": float(np.abs(resid).max()) if resid.size else 0.0}
