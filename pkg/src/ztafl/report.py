"""Plot-ready CSVs (and PNG renderings) from one run directory or a sweep directory."""
from __future__ import annotations

import csv
import json
import logging
import os
import warnings
from collections import defaultdict
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import InvalidInputError  # noqa: E402

logger = logging.getLogger(__name__)

REPORT_DIR = "report"
CONVERGENCE_NOTE = "convergence_round = first round with val_acc >= 0.95 x final val_acc (artifact definition)"
FILES = ("accuracy_vs_beta.csv", "accuracy_vs_eps.csv", "convergence.csv", "stability_curves.csv")


@dataclass
class Report:
    out_dir: str
    files: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.warnings)


def _read(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _write(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _f(x) -> str:
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else f"{float(x):.6f}"


def find_runs(path) -> list:
    """``path`` itself if it is a run directory, else its run subdirectories (sorted)."""
    if os.path.isfile(os.path.join(path, "config.json")):
        return [path]
    if not os.path.isdir(path):
        raise InvalidInputError(f"{path} is not a directory")
    subs = sorted(os.path.join(path, d) for d in os.listdir(path)
                  if d != REPORT_DIR and os.path.isfile(os.path.join(path, d, "config.json")))
    if not subs:
        raise InvalidInputError(f"no run directories under {path}")
    return subs


class _Run:
    def __init__(self, path, notes):
        self.path = path
        self.label = os.path.basename(os.path.normpath(path))
        with open(os.path.join(path, "config.json"), encoding="utf-8") as fh:
            cfg = json.load(fh)
        self.rule = cfg["aggregation"]["rule"]
        self.attack = cfg["attack"]["kind"]
        self.beta = float(cfg["attack"]["beta"])
        self.seed = int(cfg["seed"])
        self.rounds = int(cfg["rounds"])
        self.tables = {}
        for name in ("metrics", "robustness", "filter", "roles"):
            p = os.path.join(path, f"{name}.csv")
            if os.path.isfile(p):
                self.tables[name] = _read(p)
            else:
                notes.append(f"{self.label}: missing {name}.csv")
        m = self.tables.get("metrics")
        if m is not None and len(m) < self.rounds:
            notes.append(f"{self.label}: only {len(m)} of {self.rounds} rounds recorded")

    def get(self, name):
        return self.tables.get(name)


def _convergence(vals, frac=0.95) -> int:
    target = frac * vals[-1]
    return next(i + 1 for i, v in enumerate(vals) if v >= target)


def emit_report(run_dir, out_dir=None, plots: bool = True) -> Report:
    """Write the four figure-family CSVs under ``<run_dir>/report`` (idempotent).

    Missing inputs give a partial report: the affected tables are written with whatever
    rows are available and a ``RuntimeWarning`` is raised for each gap.
    """
    notes: list = []
    runs = [_Run(p, notes) for p in find_runs(run_dir)]
    out = out_dir or os.path.join(run_dir, REPORT_DIR)
    os.makedirs(out, exist_ok=True)
    rep = Report(out)

    # accuracy vs beta: final test accuracy per (rule, attack, beta), mean and population std over seeds
    groups = defaultdict(list)
    for r in runs:
        m = r.get("metrics")
        if m:
            groups[(r.rule, r.attack, r.beta)].append(float(m[-1]["test_acc"]))
    beta_rows = [[rule, attack, f"{beta:g}", len(v), _f(np.mean(v)), _f(np.std(v))]
                 for (rule, attack, beta), v in sorted(groups.items())]
    _write(os.path.join(out, FILES[0]), ["rule", "attack", "beta", "n_runs", "test_acc_mean", "test_acc_std"],
           beta_rows)

    eps_rows = []
    for r in runs:
        for row in r.get("robustness") or []:
            eps_rows.append([r.label, r.rule, r.seed, row["eps"], row["fgsm_acc"], row["pgd_acc"]])
    _write(os.path.join(out, FILES[1]), ["run", "rule", "seed", "eps", "fgsm_acc", "pgd_acc"], eps_rows)

    conv_rows = []
    for r in runs:
        m = r.get("metrics")
        if not m:
            continue
        vals = [float(x["val_acc"]) for x in m]
        cr = _convergence(vals)
        for x in m:
            conv_rows.append([r.label, r.rule, r.seed, x["round"], x["val_acc"], x["test_acc"], cr])
    _write(os.path.join(out, FILES[2]),
           ["run", "rule", "seed", "round", "val_acc", "test_acc", "convergence_round"], conv_rows)

    stab_rows = []
    for r in runs:
        roles = {row["agent"]: row["role"] for row in (r.get("roles") or [])}
        for row in r.get("filter") or []:
            if row["s_i"] == "":
                continue
            role = roles.get(row["agent"])
            honest = "" if role is None else int(role == "honest")
            stab_rows.append([r.label, row["round"], row["agent"], row["s_i"], honest])
    _write(os.path.join(out, FILES[3]), ["run", "round", "agent", "s_i", "honest_flag"], stab_rows)
    rep.files = [os.path.join(out, f) for f in FILES]

    with open(os.path.join(out, "notes.json"), "w", encoding="utf-8") as fh:
        json.dump({"runs": [r.label for r in runs], "convergence": CONVERGENCE_NOTE, "gaps": notes},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    if plots:
        rep.files += _plots(out, beta_rows, eps_rows, conv_rows, stab_rows)
    for n in notes:
        logger.warning("partial report: %s", n)
        warnings.warn(f"partial report: {n}", RuntimeWarning, stacklevel=2)
    rep.warnings = notes
    return rep


def _save(fig, path) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def _plots(out, beta_rows, eps_rows, conv_rows, stab_rows) -> list:
    paths = []

    fig, ax = plt.subplots(figsize=(5, 3.5))
    series = defaultdict(list)
    for rule, attack, beta, _, mean, std in beta_rows:
        series[(rule, attack)].append((float(beta), float(mean), float(std)))
    for (rule, attack), pts in sorted(series.items()):
        b, m, s = zip(*sorted(pts))
        ax.errorbar(b, m, yerr=s, marker="o", capsize=3, label=f"{rule} / {attack}")
    ax.set_xlabel("compromised fraction beta")
    ax.set_ylabel("final test accuracy")
    if series:
        ax.legend(fontsize=7)
    paths.append(_save(fig, os.path.join(out, "accuracy_vs_beta.png")))

    fig, ax = plt.subplots(figsize=(5, 3.5))
    by_rule = defaultdict(lambda: defaultdict(lambda: ([], [])))
    for _, rule, _, eps, f, p in eps_rows:
        by_rule[rule][float(eps)][0].append(float(f))
        by_rule[rule][float(eps)][1].append(float(p))
    for rule, d in sorted(by_rule.items()):
        e = sorted(d)
        ax.plot(e, [np.mean(d[x][0]) for x in e], marker="o", label=f"{rule} FGSM")
        ax.plot(e, [np.mean(d[x][1]) for x in e], marker="s", ls="--", label=f"{rule} PGD-10")
    ax.set_xlabel("epsilon")
    ax.set_ylabel("robust accuracy")
    if by_rule:
        ax.legend(fontsize=7)
    paths.append(_save(fig, os.path.join(out, "accuracy_vs_eps.png")))

    fig, ax = plt.subplots(figsize=(5, 3.5))
    curves = defaultdict(list)
    for run, _, _, rnd, val, _, _ in conv_rows:
        curves[run].append((int(rnd), float(val)))
    for run, pts in sorted(curves.items()):
        r, v = zip(*pts)
        ax.plot(r, v, lw=1, label=run)
    ax.set_xlabel("round")
    ax.set_ylabel("validation accuracy")
    ax.set_title("convergence: first round >= 95% of final", fontsize=8)
    if 0 < len(curves) <= 10:
        ax.legend(fontsize=6)
    paths.append(_save(fig, os.path.join(out, "convergence.png")))

    fig, ax = plt.subplots(figsize=(5, 3.5))
    agg = defaultdict(list)
    for _, rnd, _, s, honest in stab_rows:
        agg[(honest, int(rnd))].append(float(s))
    for flag, label in ((1, "honest"), (0, "compromised"), ("", "unknown")):
        rounds = sorted(r for f, r in agg if f == flag)
        if rounds:
            mean = [np.mean(agg[(flag, r)]) for r in rounds]
            ax.plot(rounds, mean, marker=".", label=f"{label} (mean s_i)")
    ax.set_xlabel("round")
    ax.set_ylabel("stability score s_i")
    if agg:
        ax.legend(fontsize=7)
    paths.append(_save(fig, os.path.join(out, "stability_curves.png")))
    return paths
