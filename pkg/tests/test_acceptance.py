"""The thirteen acceptance criteria, one test each, at their stated tolerances.

Experiment-backed criteria read 5-seed runs from the on-disk cache in
``acceptance_runs.py`` (computed on first use). Every test records one PASS/FAIL line,
which is echoed in the terminal summary.
"""
import filecmp
import os
import random

import numpy as np
import pytest

import acceptance_runs as AR
from conftest import ACCEPTANCE_LINES
from ztafl import config as C
from ztafl.aggregation import (
    ClientUpdate,
    gm_objective,
    krum_select,
    shap_weighted_aggregate,
    trimmed_mean,
    weiszfeld,
)
from ztafl.attestation import (
    AgentIdentity,
    AttestationToken,
    ReferenceRegistry,
    TrustDb,
    issue_token,
    key_from_seed,
    verify_token,
)
from ztafl.attribution import StabilityScore, exact_shapley, mc_shapley, path_attribution
from ztafl.model import MlpModel, ParamVector, dequantize, evaluate, local_train, loss_and_grad, quantize
from ztafl.simulation import Simulation, run_experiment


def record(n, ok, detail):
    line = f"C{n} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def mean(xs):
    return float(np.mean(list(xs)))


# -- 1. gradients -----------------------------------------------------------------------
def test_c01_gradient_correctness():
    worst = 0.0
    for i in range(20):
        r = np.random.default_rng(100 + i)
        dims = (int(r.integers(3, 9)), int(r.integers(4, 10)), int(r.integers(3, 8)), int(r.integers(2, 5)))
        m = MlpModel.init(dims, seed=i)
        m = m.with_params(m.params.values + r.normal(0, 0.2, len(m.params)))
        X, y = r.random((5, dims[0])), r.integers(0, dims[-1], 5)
        _, g = loss_and_grad(m, X, y)
        v, h = m.params.values, 1e-6
        fd = np.empty_like(v)
        for j in range(v.size):
            e = np.zeros_like(v)
            e[j] = h
            fd[j] = (loss_and_grad(m.with_params(v + e), X, y)[0] - loss_and_grad(m.with_params(v - e), X, y)[0]) / (2 * h)
        rel = np.abs(g.values - fd) / np.maximum(np.abs(g.values) + np.abs(fd), 1e-8)
        worst = max(worst, float(rel.max()))
    ok = worst < 1e-4
    record(1, ok, f"max relative error {worst:.2e} over 20 instances (< 1e-4)")
    assert ok


# -- 2. Shapley oracles -------------------------------------------------------------------
def test_c02_shapley_oracle_equivalence():
    mc_err, eff, comp = 0.0, 0.0, 0.0
    for i in range(10):
        r = np.random.default_rng(200 + i)
        d = int(r.integers(3, 9))
        m = MlpModel.init((d, 10, 3), seed=i)
        m = m.with_params(m.params.values + r.normal(0, 0.3, len(m.params)))
        x, bg, t = r.random(d), r.random((6, d)), int(r.integers(0, 3))
        ex = exact_shapley(m, x, bg, t).phi
        mc = mc_shapley(m, x, bg, n_perms=2000, seed=i, target=t).phi
        mc_err = max(mc_err, float(np.abs(mc - ex).max() / (ex.max() - ex.min())))
        fx, fb = m.score(x[None], t)[0], m.score(bg, t)
        eff = max(eff, abs(ex.sum() - (fx - fb.mean())))
        pa = path_attribution(m, x, bg, 32, t).phi
        # each background path telescopes to f(x) - f(b_j); normalize by their mean size
        comp = max(comp, abs(pa.sum() - (fx - fb.mean())) / np.mean(np.abs(fx - fb)))
    ok = mc_err < 0.05 and eff < 1e-9 and comp < 0.02
    record(2, ok, f"mc vs exact {mc_err:.4f} x range (< 0.05); efficiency residual {eff:.1e} (< 1e-9); "
                  f"path completeness {100 * comp:.2f}% (< 2%)")
    assert ok


# -- 3. aggregator oracles ----------------------------------------------------------------
def _ups(X):
    return [ClientUpdate(i, ParamVector(x), 1) for i, x in enumerate(X)]


def test_c03_aggregator_oracles():
    r = np.random.default_rng(3)
    krum_bad = 0
    for _ in range(200):
        n = int(r.integers(5, 11))
        f = int(r.integers(0, (n - 3) // 2 + 1))
        X = r.normal(size=(n, 3))
        scores = []
        for i in range(n):
            ds = sorted(float(np.sum((X[i] - X[j]) ** 2)) for j in range(n) if j != i)
            scores.append(sum(ds[: n - f - 2]))
        krum_bad += krum_select(_ups(X), f).agent_id != int(np.argmin(scores))
    tm_err = 0.0
    for _ in range(50):
        n, d = int(r.integers(3, 12)), int(r.integers(1, 5))
        X = r.normal(size=(n, d))
        k = int(np.floor(0.2 * n))
        want = [sum(sorted(X[:, j])[k:n - k]) / (n - 2 * k) for j in range(d)]
        tm_err = max(tm_err, float(np.abs(trimmed_mean(_ups(X), 0.2).values - want).max()))
    gm_gap = -np.inf
    for _ in range(100):
        P = r.normal(size=(int(r.integers(1, 12)), int(r.integers(1, 6)))) * 3
        ref = min([gm_objective(P.mean(0), P)] + [gm_objective(p, P) for p in P])
        gm_gap = max(gm_gap, weiszfeld(P).objective - ref)
    ok = krum_bad == 0 and tm_err < 1e-12 and gm_gap <= 1e-6
    record(3, ok, f"krum mismatches {krum_bad}/200; trimmed-mean max error {tm_err:.1e}; "
                  f"geomed objective - min(inputs, mean) = {gm_gap:.2e} (<= 1e-6)")
    assert ok


# -- 4. attestation conformance -----------------------------------------------------------
def _nonces(seed):
    rr = random.Random(seed)
    return lambda n: rr.getrandbits(8 * n).to_bytes(n, "big")


def test_c04_attestation_conformance():
    dt = 60_000
    mfr = key_from_seed("acceptance-mfr")
    reg = ReferenceRegistry(mfr.public_key(), dt)
    agents = [AgentIdentity.create(f"agent-{i}", b"fw-1", f"acc:{i}", _nonces(i)) for i in range(20)]
    for a in agents:
        reg.register(a.agent_id, a.public_key, a.pcr_state)
    db = TrustDb()
    quarantined = agents[19]
    db.penalize(quarantined.agent_id, "setup")
    rogue = [AgentIdentity.create(a.agent_id, b"fw-evil", f"rogue:{i}", _nonces(1000 + i))
             for i, a in enumerate(agents)]
    wrong_pcr = [AgentIdentity.create(a.agent_id, b"fw-1", f"acc:{i}", _nonces(2000 + i)) for i, a in enumerate(agents)]
    for w in wrong_pcr:
        w.pcr_state = bytes(32)
    ghost = AgentIdentity.create("ghost", b"fw-1", "ghost", _nonces(9))
    rng = random.Random(4)
    kinds = ["forged", "tampered", "replayed", "stale", "wrong-pcr", "quarantined", "unknown"]
    false_accept = {k: 0 for k in kinds}
    false_reject = 0
    honest = 0
    now = 0
    n_adv = 0
    while n_adv < 100_000:
        now += 1000
        i = rng.randrange(19)
        a = agents[i]
        kind = kinds[n_adv % len(kinds)]
        if kind == "forged":
            tok = issue_token(rogue[i], now)
        elif kind == "tampered":
            raw = bytearray(issue_token(a, now).to_bytes())
            raw[rng.randrange(len(raw))] ^= 1 << rng.randrange(8)
            tok = AttestationToken.from_bytes(bytes(raw))
        elif kind == "replayed":
            tok = issue_token(a, now)
            v = verify_token(tok, reg, db, now)
            honest += 1
            false_reject += not v.accepted
            now += rng.randrange(1, dt)
        elif kind == "stale":
            tok = issue_token(a, now)
            now += dt + 1 + rng.randrange(dt)
        elif kind == "wrong-pcr":
            tok = issue_token(wrong_pcr[i], now)
        elif kind == "quarantined":
            tok = issue_token(quarantined, now)
        else:
            tok = issue_token(ghost, now)
        v = verify_token(tok, reg, db, now)
        false_accept[kind] += v.accepted
        n_adv += 1
        if n_adv % 10 == 0:
            v = verify_token(issue_token(a, now), reg, db, now)
            honest += 1
            false_reject += not v.accepted

    # trust policy trajectory
    t = TrustDb()
    traj = [t.tau("x")]
    t.success("x", True)
    traj.append(t.tau("x"))
    t.penalize("x")
    traj.append(t.tau("x"))
    q_state = t.state("x")
    steps = [t.quarantine_step("x", True) for _ in range(5)]
    policy_ok = (traj == pytest.approx([0.7, 0.72, 0.36]) and q_state == "quarantined"
                 and steps == ["quarantined"] * 4 + ["active"] and t.tau("x") == 0.65)
    fa = sum(false_accept.values())
    ok = fa == 0 and false_reject == 0 and policy_ok
    record(4, ok, f"{fa} false acceptances over {n_adv} adversarial tokens; {false_reject} false rejections "
                  f"over {honest} honest tokens; trust trajectory {'matches' if policy_ok else 'differs'} "
                  f"(0.7 -> 0.72 -> x0.5 -> quarantine -> 5 valid -> 0.65)")
    assert ok


# -- 5. Byzantine trend -------------------------------------------------------------------
@pytest.mark.slow
def test_c05_byzantine_trend():
    z_c, z_f = mean(r.test_acc for r in AR.family("ztafl_clean")), mean(r.test_acc for r in AR.family("ztafl_label_flip"))
    f_c, f_f = mean(r.test_acc for r in AR.family("fedavg_clean")), mean(r.test_acc for r in AR.family("fedavg_label_flip"))
    z_drop, f_drop, gap = 100 * (z_c - z_f), 100 * (f_c - f_f), 100 * (z_f - f_f)
    ok = z_drop <= 5 and f_drop >= 15 and gap >= 10
    record(5, ok, f"ZTA-FL drop {z_drop:.1f} pts (<= 5), FedAvg drop {f_drop:.1f} pts (>= 15), "
                  f"ZTA-FL - FedAvg under attack {gap:.1f} pts (>= 10) [clean {100 * z_c:.1f}/{100 * f_c:.1f}]")
    assert ok


# -- 6. filter quality --------------------------------------------------------------------
def _rates(run):
    bad = run.compromised()
    rows = [r for r in run.filter if r["s_i"] != ""]
    att = [r for r in rows if int(r["agent"]) in bad]
    hon = [r for r in rows if int(r["agent"]) not in bad]
    flagged = lambda rs: sum(r["reason"] == "stability-below-threshold" for r in rs) / max(len(rs), 1)
    return flagged(att), flagged(hon)


@pytest.mark.slow
def test_c06_filter_quality():
    det = {}
    for a in (1, 3, 5):
        rates = [_rates(r) for r in AR.family(f"grad_scale_a{a}")]
        det[a] = (mean(t for t, _ in rates), mean(f for _, f in rates))
    tpr, fpr = det[5]
    mono = det[1][0] <= det[3][0] <= det[5][0]
    ok = tpr >= 0.8 and fpr <= 0.1 and mono
    record(6, ok, f"alpha=5 TPR {tpr:.3f} (>= 0.8), honest FPR {fpr:.3f} (<= 0.1); detection over alpha 1/3/5 "
                  f"{det[1][0]:.3f}/{det[3][0]:.3f}/{det[5][0]:.3f} ({'monotone' if mono else 'not monotone'})")
    assert ok


# -- 7. backdoor trend --------------------------------------------------------------------
@pytest.mark.slow
def test_c07_backdoor_trend():
    z = AR.family("ztafl_backdoor")
    f = AR.family("fedavg_backdoor")
    z_asr, f_asr = mean(r.asr for r in z), mean(r.asr for r in f)
    loss = 100 * (mean(r.test_acc for r in AR.family("ztafl_clean")) - mean(r.test_acc for r in z))
    ok = z_asr <= f_asr / 3 and loss <= 3
    record(7, ok, f"ASR ZTA-FL {100 * z_asr:.1f}% vs FedAvg {100 * f_asr:.1f}% (need <= 1/3 = {100 * f_asr / 3:.1f}%); "
                  f"clean-accuracy loss {loss:.1f} pts (<= 3)")
    assert ok


# -- 8. adversarial training --------------------------------------------------------------
@pytest.mark.slow
def test_c08_adversarial_training_trend():
    adv, plain = AR.family("ztafl_clean"), AR.family("ztafl_clean_noadv")
    gain = 100 * (mean(r.fgsm_at(0.1) for r in adv) - mean(r.fgsm_at(0.1) for r in plain))
    eps = [0.0, 0.05, 0.1, 0.15, 0.2]
    curve = [mean(r.fgsm_at(e) for r in adv) for e in eps]
    mono = all(b <= a for a, b in zip(curve, curve[1:]))
    ok = gain >= 10 and mono
    record(8, ok, f"FGSM eps=0.1 robust accuracy gain {gain:.1f} pts (>= 10); mean curve "
                  f"{'/'.join(f'{100 * c:.1f}' for c in curve)} ({'monotone' if mono else 'not monotone'})")
    assert ok


# -- 9. adaptive attack -------------------------------------------------------------------
@pytest.mark.slow
def test_c09_adaptive_attack_trend():
    clean = {r.summary["seed"]: r.test_acc for r in AR.family("ztafl_clean")}
    con = {r.summary["seed"]: r for r in AR.family("constrained")}
    unc = {r.summary["seed"]: r for r in AR.family("unconstrained")}
    d_con = [clean[s] - con[s].test_acc for s in AR.SEEDS]
    d_unc = [clean[s] - unc[s].test_acc for s in AR.SEEDS]
    rows = [a for r in con.values() for a in r.attacks if a["phi_drift"] != ""]
    viol = sum(float(a["phi_drift"]) >= float(a["constraint_tau"]) for a in rows)
    ok = mean(d_con) < mean(d_unc) and viol == 0 and len(rows) > 0
    record(9, ok, f"mean paired degradation constrained {100 * mean(d_con):.1f} pts < unconstrained "
                  f"{100 * mean(d_unc):.1f} pts; {viol} drift violations over {len(rows)} constrained updates")
    assert ok


# -- 10. slow poisoning -------------------------------------------------------------------
@pytest.mark.slow
def test_c10_slow_poisoning_trend():
    alarm, flag = [], []
    for run in AR.family("slow_poison"):
        never = len(run.metrics) + 1
        for r in run.roles:
            if r["role"] != "slow_poison":
                continue
            alarm.append(int(r["drift_first_alarm"]) if r["drift_first_alarm"] else never)
            hits = [int(f["round"]) for f in run.filter
                    if f["agent"] == r["agent"] and f["reason"] == "stability-below-threshold"]
            flag.append(min(hits) if hits else never)
    ok = mean(alarm) <= 25 and mean(alarm) < mean(flag)
    record(10, ok, f"mean drift first alarm round {mean(alarm):.1f} (<= 25) vs per-round filter first flag "
                   f"{mean(flag):.1f} over {len(alarm)} poisoner-runs (never = rounds + 1)")
    assert ok


# -- 11. quantization ---------------------------------------------------------------------
@pytest.mark.slow
def test_c11_quantization():
    ratios = [(8 + n + 16) / (8 + 4 * n) for n in (10_000, 12_345, 100_000, 1_000_000)]
    r = np.random.default_rng(11)
    worst = 0.0
    for _ in range(10_000):
        v = r.normal(0, 10 ** r.uniform(-4, 1), int(r.integers(1, 64)))
        q = quantize(ParamVector(v))
        err = np.abs(dequantize(q).values - v).max()
        worst = max(worst, err / q.scale if q.scale > 0 else (0.0 if err == 0 else np.inf))
    wire = quantize(ParamVector(r.normal(size=10_000)))
    wire_ok = len(wire.to_wire()) == wire.wire_bytes() == 8 + 10_000 + 16
    delta = 100 * abs(mean(x.test_acc for x in AR.family("ztafl_clean"))
                      - mean(x.test_acc for x in AR.family("ztafl_clean_noquant")))
    ok = max(ratios) <= 0.265 and worst <= 0.5 + 1e-9 and wire_ok and delta <= 1
    record(11, ok, f"payload ratio <= {max(ratios):.4f} for n >= 1e4 (<= 0.265); round-trip max error "
                   f"{worst:.3f} x scale over 1e4 vectors (<= 0.5); accuracy delta on/off {delta:.2f} pts (<= 1)")
    assert ok


# -- 12. rollback guarantee ---------------------------------------------------------------
@pytest.mark.slow
def test_c12_rollback_guarantee(small_data):
    tr, va, _ = small_data
    base = local_train(MlpModel.init((tr.n_features, 16, tr.n_classes), seed=2), tr, 3, 64, 1, 0.01)
    acc = evaluate(base, va).accuracy
    r = np.random.default_rng(12)
    ups = [ClientUpdate(i, ParamVector(r.normal(0, 5.0, len(base.params)), base.layer_dims), 50, 0.5, True,
                        StabilityScore(0.5, i)) for i in range(6)]
    out = shap_weighted_aggregate(ups, None, base, acc, va)
    fn_ok = out.rolled_back and out.new_params.equals(base.params)

    # a whole round where every admitted agent is an attacker
    sim = Simulation(C.preset("clean", rounds=5))
    for _ in range(3):
        sim.run_round()
    before, prev = sim.model.params.values.copy(), sim.prev_val_acc
    target = int(np.argmin(np.bincount(sim.val.y)))

    def takeover(s, agent, delta):
        # push every input to the rarest class
        v = -s.model.params.values.copy()
        v[-s.train.n_classes + target] += 100.0
        return ParamVector(v, delta.shape_tag)

    sim.update_hook = takeover
    rec = sim.run_round()
    sim_ok = rec.rolled_back and np.array_equal(sim.model.params.values, before) and rec.val_acc == prev

    # and across every cached run of the stability rule
    worst = np.inf
    for name in ("ztafl_clean", "ztafl_label_flip", "ztafl_backdoor", "constrained", "unconstrained", "slow_poison"):
        for run in AR.family(name):
            v = [float(m["val_acc"]) for m in run.metrics]
            worst = min(worst, min(b - 0.8 * a for a, b in zip(v, v[1:])))
    ok = fn_ok and sim_ok and worst >= -1e-6
    record(12, ok, f"function-level revert {'bit-exact' if fn_ok else 'FAILED'}; all-attacker round "
                   f"{'reverted bit-exact' if sim_ok else 'not reverted'} (prev val {prev:.3f}); min over cached runs "
                   f"of val_t - 0.8 val_(t-1) = {worst:.4f} (>= 0, CSV rounding 1e-6)")
    assert ok


# -- 13. determinism ----------------------------------------------------------------------
@pytest.mark.slow
def test_c13_determinism(tmp_path):
    cfg = C.preset("label_flip", seed=42)
    a = run_experiment(cfg, str(tmp_path / "a"), robustness=False)
    b = run_experiment(cfg, str(tmp_path / "b"), robustness=False)
    same = {f: filecmp.cmp(os.path.join(a.run_dir, f), os.path.join(b.run_dir, f), shallow=False)
            for f in ("metrics.csv", "filter.csv", "audit.csv")}
    ok = all(same.values())
    record(13, ok, "two fresh label_flip runs: " + ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}"
                                                          for k, v in same.items()))
    assert ok
