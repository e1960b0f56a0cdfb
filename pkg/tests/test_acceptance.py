"""Acceptance gate: the claims this package exists to support, end to end.

Each test prints one "criterion NN name: PASS/FAIL" line on the terminal
(bypassing capture) and then asserts, so a full run shows eleven verdict
lines regardless of reporter options.  Criteria marked with wall-clock
budgets include the elapsed time in the verdict.
"""

import subprocess
import time

import numpy as np

from plastinet import autodiff as ad
from plastinet.autodiff import Tensor
from plastinet.config import parse_config_text
from plastinet.datasynth import SynthSpec, generate
from plastinet.experiment import ablation_sweep
from plastinet.growth import (
    DropinPlan,
    apply_freeze,
    dropin,
    lora_wrap,
    param_count,
    prune,
)
from plastinet.layers import build_model, eval_leaves
from plastinet.metrics import (
    ScoreSet,
    compute_eer,
    eer_bruteforce,
    gradcam,
    gradcam_bruteforce,
    measure_backward_time,
)
from plastinet.params import ParamStore
from plastinet.plasticity import PlasticityConfig, run_plasticity
from plastinet.training import (
    batch_for_model,
    cross_entropy_graph,
    make_optimizer,
    score_examples,
    train_stage,
)

from conftest import init_store, set_param


def verdict(capsys, num, name, ok, detail=""):
    with capsys.disabled():
        tail = f"  [{detail}]" if detail else ""
        print(f"criterion {num:02d} {name}: {'PASS' if ok else 'FAIL'}{tail}")
    assert ok, f"criterion {num:02d} {name}: {detail}"


TOY_CNN = [
    {"type": "conv2d", "out_channels": 4, "kernel": 3, "stride": 2, "padding": 1},
    {"type": "conv2d", "out_channels": 8, "kernel": 3, "stride": 2, "padding": 1},
    {"type": "flatten"},
    {"type": "dense", "out_dim": 16, "activation": "relu"},
]


def _family_models():
    return {
        "dense": (lambda: build_model(
            [{"type": "dense", "out_dim": 4, "activation": "relu"}], (2, 3)), (2, 3)),
        "conv2d": (lambda: build_model(
            [{"type": "conv2d", "out_channels": 2, "kernel": 3, "stride": 2,
              "padding": 1},
             {"type": "flatten"}], (4, 5)), (4, 5)),
        "gru": (lambda: build_model(
            [{"type": "gru", "hidden_dim": 3}], (3, 4)), (3, 4)),
        "attention": (lambda: build_model(
            [{"type": "dense", "out_dim": 4, "activation": "tanh"},
             {"type": "attention", "num_heads": 2, "head_dim": 2, "ff_dim": 4},
             {"type": "mean_pool_time"}], (3, 4)), (3, 4)),
    }


def test_c01_gradient_correctness(capsys):
    """Analytic gradients match central differences on every layer family."""
    t0 = time.perf_counter()
    worst = 0.0
    families = _family_models()
    for fam, (make, shape) in {**families, "lora": families["dense"]}.items():
        for i in range(20):
            model = make()
            store = init_store(model, seed=i)
            if fam == "lora":
                lora_wrap(model, store, rank=2, rng=np.random.default_rng([7, i]))
            rng = np.random.default_rng([100, i])
            xb = batch_for_model(model, rng.normal(size=(3, *shape)))
            onehot = np.eye(2)[rng.integers(0, 2, size=3)]
            err = ad.finite_diff_check(cross_entropy_graph(model), store,
                                       inputs=[xb, onehot])
            worst = max(worst, err)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-5 and elapsed < 60.0
    verdict(capsys, 1, "gradient-correctness", ok,
            f"max rel err {worst:.2e}, {elapsed:.1f}s")


def test_c02_zero_sigma_preservation(capsys):
    """Dropin with init_sigma=0 leaves all outputs unchanged to 1e-12."""
    t0 = time.perf_counter()
    cases = {
        "dense": [{"type": "dense", "out_dim": 5, "activation": "relu"}],
        "conv2d": [{"type": "conv2d", "out_channels": 3, "kernel": 3, "stride": 2,
                    "padding": 1}, {"type": "flatten"}],
        "gru": [{"type": "gru", "hidden_dim": 4}],
        "attention": [{"type": "dense", "out_dim": 4, "activation": "tanh"},
                      {"type": "attention", "num_heads": 2, "head_dim": 2,
                       "ff_dim": 4, "scale_mode": "original"},
                      {"type": "mean_pool_time"}],
    }
    worst = 0.0
    for f, (fam, layers) in enumerate(cases.items()):
        model = build_model(layers, (4, 6))
        store = init_store(model, seed=f)
        xb = batch_for_model(model, np.random.default_rng([2, f]).normal(size=(100, 4, 6)))
        before = model.forward(eval_leaves(store), Tensor(xb)).data.copy()
        plan = DropinPlan(model.expandable_indices(), ratio=1.0, init_sigma=0.0)
        dropin(model, store, plan, rng=np.random.default_rng([3, f]))
        after = model.forward(eval_leaves(store), Tensor(xb)).data
        worst = max(worst, float(np.abs(after - before).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 30.0
    verdict(capsys, 2, "zero-sigma-preservation", ok,
            f"max abs dev {worst:.2e}, {elapsed:.1f}s")


def test_c03_frozen_immutability(capsys):
    """50 optimizer steps never touch a frozen original parameter."""
    t0 = time.perf_counter()
    model = build_model([
        {"type": "conv2d", "out_channels": 3, "kernel": 3, "stride": 2, "padding": 1},
        {"type": "flatten"},
        {"type": "dense", "out_dim": 6, "activation": "relu"},
    ], (8, 12))
    store = init_store(model, seed=0)
    originals = {pid: store.get(pid).copy() for pid in store.entries}
    dropin(model, store, DropinPlan([0, 2], ratio=1.0, init_sigma=0.1,
                                    freeze_original=True),
           rng=np.random.default_rng(1))

    rng = np.random.default_rng(42)
    x = rng.normal(size=(64, 8, 12))
    y = rng.integers(0, 2, size=64)
    xb = batch_for_model(model, x)
    graph = cross_entropy_graph(model)
    opt = make_optimizer("adam", 1e-2)
    for step in range(50):
        idx = rng.permutation(64)[:16]
        ad.forward(graph, [xb[idx], np.eye(2)[y[idx]]], store)
        opt.step(store, ad.backward(graph, store))

    intact = all(np.array_equal(store.get(pid), arr) for pid, arr in originals.items())
    moved = any(store.get(pid).size and store.get(pid).any()
                for pid in store.trainable)
    elapsed = time.perf_counter() - t0
    ok = intact and moved and elapsed < 30.0
    verdict(capsys, 3, "frozen-immutability", ok,
            f"originals intact={intact}, new params trained={moved}, {elapsed:.1f}s")


def test_c04_prune_restoration(capsys):
    """Pruning returns the exact original parameter budget and shapes."""
    t0 = time.perf_counter()

    def fresh():
        model = build_model([
            {"type": "conv2d", "out_channels": 3, "kernel": 3, "stride": 2,
             "padding": 1},
            {"type": "flatten"},
            {"type": "dense", "out_dim": 6, "activation": "relu"},
        ], (8, 12))
        return model, init_store(model, seed=4)

    model, store = fresh()
    base_count = param_count(store)
    base_shapes = {pid: store.get(pid).shape for pid in store.entries}

    # grow, train a little, prune: counts and shapes must return exactly
    ledger = dropin(model, store, DropinPlan([0, 2], ratio=1.0, init_sigma=0.1),
                    rng=np.random.default_rng(5))
    rng = np.random.default_rng(42)
    x, y = rng.normal(size=(32, 8, 12)), rng.integers(0, 2, size=32)
    xb = batch_for_model(model, x)
    graph = cross_entropy_graph(model)
    opt = make_optimizer("sgd", 1e-2)
    for _ in range(5):
        ad.forward(graph, [xb, np.eye(2)[y]], store)
        opt.step(store, ad.backward(graph, store))
    prune(model, store, ledger)
    trained_ok = (param_count(store) == base_count
                  and {p: store.get(p).shape for p in store.entries} == base_shapes)

    # grow then prune with no training in between: values are bit-exact
    model2, store2 = fresh()
    base_values = {pid: store2.get(pid).copy() for pid in store2.entries}
    ledger2 = dropin(model2, store2, DropinPlan([0, 2], ratio=1.0, init_sigma=0.1),
                     rng=np.random.default_rng(5))
    prune(model2, store2, ledger2)
    untrained_ok = (set(store2.entries) == set(base_values)
                    and all(np.array_equal(store2.get(p), v)
                            for p, v in base_values.items()))

    elapsed = time.perf_counter() - t0
    ok = trained_ok and untrained_ok and elapsed < 30.0
    verdict(capsys, 4, "prune-restoration", ok,
            f"trained counts/shapes={trained_ok}, untrained bit-exact={untrained_ok}, "
            f"{elapsed:.1f}s")


def test_c05_parameter_count_law(capsys):
    """Doubling width doubles dense counts (40 to 80) and triples GRU gates
    (18 to 54)."""
    model = build_model([{"type": "dense", "out_dim": 8, "activation": "relu"}], (2, 2))
    store = init_store(model)
    dense_before = param_count(store, ids=model.layers[0].param_ids())
    dropin(model, store, DropinPlan([0], ratio=1.0), rng=np.random.default_rng(0))
    dense_after = param_count(store, ids=model.layers[0].param_ids())

    gmodel = build_model([{"type": "gru", "hidden_dim": 3}], (2, 5))
    gstore = init_store(gmodel)
    gru = gmodel.layers[0]
    gates_before = [gru.gate_param_count(gstore, g) for g in ("z", "r", "h")]
    dropin(gmodel, gstore, DropinPlan([0], ratio=1.0), rng=np.random.default_rng(0))
    gates_after = [gru.gate_param_count(gstore, g) for g in ("z", "r", "h")]

    ok = (dense_before, dense_after) == (40, 80) \
        and gates_before == [18, 18, 18] and gates_after == [54, 54, 54]
    verdict(capsys, 5, "parameter-count-law", ok,
            f"dense {dense_before}->{dense_after}, gates {gates_before}->{gates_after}")


def test_c06_eer_oracle_agreement(capsys):
    """Vectorized EER equals the O(n^2) loop oracle on 1000 random score
    sets (ties included) and is invariant under increasing transforms."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(42)
    worst = 0.0
    sets = []
    for _ in range(1000):
        nb, ns = int(rng.integers(2, 50)), int(rng.integers(2, 50))
        bona = rng.normal(0.0, 1.0, nb)
        spoof = rng.normal(rng.uniform(0.0, 2.0), 1.0, ns)
        if rng.random() < 0.5:
            k = int(rng.integers(1, min(nb, ns)))
            spoof[:k] = bona[:k]
        s = ScoreSet(bona, spoof)
        sets.append(s)
        worst = max(worst, abs(compute_eer(s) - eer_bruteforce(s)))
    tworst = 0.0
    for s in sets[:100]:
        base = compute_eer(s)
        for f in (np.exp, lambda v: 5.0 * v - 2.0):
            tworst = max(tworst, abs(compute_eer(ScoreSet(f(s.bona), f(s.spoof))) - base))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and tworst <= 1e-9 and elapsed < 60.0
    verdict(capsys, 6, "eer-oracle-agreement", ok,
            f"max dev {worst:.2e}, transform dev {tworst:.2e}, {elapsed:.1f}s")


def test_c07_frozen_cost_reduction(capsys):
    """Freezing originals shrinks the trainable set (hard) and the measured
    backward+step time in at least 4 of 5 repeats (soft)."""
    t0 = time.perf_counter()

    def grown(policy):
        model = build_model(TOY_CNN, (16, 40))
        store = init_store(model, seed=0)
        base_total = param_count(store)
        ledger = dropin(model, store, DropinPlan([1], ratio=0.5, init_sigma=0.05),
                        rng=np.random.default_rng(2))
        apply_freeze(store, ledger, policy=policy)
        return model, store, ledger, base_total

    fmodel, fstore, ledger, base_total = grown("frozen")
    umodel, ustore, _, _ = grown("unfrozen")
    frozen_trainable = param_count(fstore, trainable_only=True)
    hard = (frozen_trainable == ledger.added_param_elements(fstore)
            and frozen_trainable < base_total)

    rng = np.random.default_rng(42)
    x = rng.normal(size=(64, 16, 40))
    y = rng.integers(0, 2, size=64)
    wins = 0
    for _ in range(5):
        tf = measure_backward_time(fmodel, fstore, x, y, iters=10, warmup=3)
        tu = measure_backward_time(umodel, ustore, x, y, iters=10, warmup=3)
        wins += tf <= tu
    elapsed = time.perf_counter() - t0
    ok = hard and wins >= 4 and elapsed < 120.0
    verdict(capsys, 7, "frozen-cost-reduction", ok,
            f"trainable {frozen_trainable}/{base_total}, timing wins {wins}/5, "
            f"{elapsed:.1f}s")


def test_c08_plasticity_trend(capsys):
    """Grow-train-prune matches or beats the equal-budget baseline on at
    least 3 of 5 seeds at delta=0.5."""
    t0 = time.perf_counter()
    spec = SynthSpec(n_train=2000, n_dev=500, n_test=500, delta=0.5, noise=0.3,
                     seed=42)
    splits = generate(spec)
    train = (splits["train"].x, splits["train"].y)
    dev = (splits["dev"].x, splits["dev"].y)
    losing = []
    pairs = []
    for seed in range(5):
        bmodel = build_model(TOY_CNN, (16, 40))
        bstore = ParamStore()
        bmodel.init_params(bstore, np.random.default_rng([seed, 0]))
        res = train_stage(bmodel, bstore, train, dev, epochs=15, batch_size=32,
                          lr=1e-3, optimizer="adam",
                          rng=np.random.default_rng([seed, 7]))
        if res.best_values is not None:
            bstore.restore(res.best_values)
        scores = score_examples(bmodel, bstore, splits["test"].x)
        base_eer = compute_eer(ScoreSet.from_labels(scores, splits["test"].y))

        pmodel = build_model(TOY_CNN, (16, 40))
        pstore = ParamStore()
        pmodel.init_params(pstore, np.random.default_rng([seed, 0]))
        cfg = PlasticityConfig(stage_epochs=5, growth_ratio=1.0, layer_count=1,
                               lr=1e-3, batch_size=32, optimizer="adam", seed=seed)
        _, _, report = run_plasticity(pmodel, pstore, splits, cfg)
        pairs.append((seed, base_eer, report.test_eer))
        if report.test_eer > base_eer + 1e-12:
            losing.append(seed)

    elapsed = time.perf_counter() - t0
    wins = 5 - len(losing)
    # ties only count as evidence when the runs actually learned the task
    learned = max(p for _, _, p in pairs) <= 0.05
    ok = wins >= 3 and learned and elapsed < 600.0
    detail = ", ".join(f"s{s}: base {100 * b:.2f}% vs plast {100 * p:.2f}%"
                       for s, b, p in pairs)
    verdict(capsys, 8, "plasticity-trend", ok,
            f"wins {wins}/5, losing seeds {losing}, {elapsed:.0f}s; {detail}")


def test_c09_cli_determinism(capsys, tmp_path):
    """Two CLI runs with the same seed emit byte-identical report rows once
    the timing column is excluded."""
    t0 = time.perf_counter()
    cfg = tmp_path / "exp.yaml"
    cfg.write_text(
        "experiment:\n  seed: 42\n"
        "data:\n  n_train: 200\n  n_dev: 80\n  n_test: 80\n"
        "  freq_bins: 8\n  time_frames: 16\n"
        "train:\n  epochs: 2\n"
        "strategy:\n  name: dropin_frozen\n  stage_epochs: 1\n"
        "timing:\n  iters: 4\n  warmup: 1\n")

    def run(tag):
        proc = subprocess.run(
            ["plastinet", "run", "--config", str(cfg), "--outdir",
             str(tmp_path / tag)],
            capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        rows = [line.split(",") for line in proc.stdout.strip().split("\n")]
        csv_rows = [line.split(",") for line in
                    (tmp_path / tag / "report.csv").read_text().strip().split("\n")]
        return rows, csv_rows

    (out_a, csv_a), (out_b, csv_b) = run("a"), run("b")

    def drop_timing(rows):
        return [",".join(r[:4] + r[5:]) for r in rows]

    stdout_same = drop_timing(out_a) == drop_timing(out_b)
    csv_same = drop_timing(csv_a) == drop_timing(csv_b)
    timed = all(float(r[4]) > 0.0 for r in (out_a[1], out_b[1]))
    elapsed = time.perf_counter() - t0
    ok = stdout_same and csv_same and timed and elapsed < 300.0
    verdict(capsys, 9, "cli-determinism", ok,
            f"stdout match={stdout_same}, csv match={csv_same}, {elapsed:.1f}s")


def test_c10_ablation_coverage(capsys, tmp_path):
    """Sweeping a four-expandable-layer model yields four EER entries under
    identical budgets."""
    t0 = time.perf_counter()
    cfg = parse_config_text(
        "experiment:\n  seed: 42\n"
        "data:\n  n_train: 120\n  n_dev: 60\n  n_test: 60\n"
        "  freq_bins: 8\n  time_frames: 16\n"
        "model:\n  layers:\n"
        "  - {type: conv2d, out_channels: 3, kernel: 3, stride: 2, padding: 1}\n"
        "  - {type: conv2d, out_channels: 6, kernel: 3, stride: 2, padding: 1}\n"
        "  - {type: flatten}\n"
        "  - {type: dense, out_dim: 12, activation: relu}\n"
        "  - {type: dense, out_dim: 8, activation: relu}\n"
        "train:\n  epochs: 2\n"
        "strategy:\n  name: dropin_unfrozen\n  stage_epochs: 1\n"
        "timing:\n  enabled: false\n")
    result = ablation_sweep(cfg, workdir=tmp_path)
    entries = result.entries
    all_ok = all(e.ok for e in entries)
    eers = [e.report.test_eer for e in entries if e.ok]
    budgets = {e.report.total_epochs for e in entries if e.ok}
    elapsed = time.perf_counter() - t0
    ok = (len(entries) == 4 and all_ok and len(budgets) == 1
          and all(0.0 <= v <= 1.0 for v in eers) and elapsed < 600.0)
    verdict(capsys, 10, "ablation-coverage", ok,
            f"{len(entries)} entries (ok={all_ok}), layers "
            f"{[e.layer_index for e in entries]}, budgets {sorted(budgets)}, "
            f"{elapsed:.0f}s")


def test_c11_gradcam_oracle(capsys):
    """Heatmaps agree with the loop oracle to 1e-10, live in [0, 1], and a
    gradient-free target yields the all-zero map."""
    t0 = time.perf_counter()
    model = build_model([
        {"type": "conv2d", "out_channels": 3, "kernel": 3, "stride": 1, "padding": 1},
        {"type": "conv2d", "out_channels": 4, "kernel": 3, "stride": 2, "padding": 1},
        {"type": "flatten"},
        {"type": "dense", "out_dim": 6, "activation": "relu"},
    ], (6, 8))
    store = init_store(model, seed=2)
    x = np.random.default_rng(42).normal(size=(5, 1, 6, 8))
    cams = gradcam(model, store, x, layer_index=1, target_class=1)

    xt = Tensor(x, requires_grad=True)
    logits, captured = model.forward_with_capture(eval_leaves(store), xt, {1})
    ad.backprop(ad.sum_all(ad.slice_axis(logits, 1, 1, 2)))
    oracle = gradcam_bruteforce(captured[1].data, captured[1].grad)
    dev = float(np.abs(cams - oracle).max())
    in_range = bool(np.all(cams >= 0.0) and np.all(cams <= 1.0))

    set_param(store, "head.w.br0", np.zeros_like(store.get("head.w.br0")))
    flat = gradcam(model, store, x, layer_index=1, target_class=1)
    zero_ok = not flat.any()

    elapsed = time.perf_counter() - t0
    ok = dev <= 1e-10 and in_range and zero_ok and elapsed < 30.0
    verdict(capsys, 11, "gradcam-oracle", ok,
            f"oracle dev {dev:.2e}, range ok={in_range}, zero-grad zero={zero_ok}, "
            f"{elapsed:.1f}s")
