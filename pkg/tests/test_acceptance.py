"""Acceptance scoreboard: one test and one printed verdict per criterion.

Every test prints a single `[PASS]`/`[FAIL]` line (visible in plain pytest
output) and then asserts the same condition, so the scoreboard and the exit
status cannot disagree.  Tolerances and runtime budgets are pinned here and
nowhere else.
"""

import time

import numpy as np
import pytest

from batchaug.augment import Identity, enumerate_space, parse_transform
from batchaug.cli import main
from batchaug.dataio import gen_synthetic
from batchaug.diagnostics import correlation_study, grad_norm_study
from batchaug.distsim import assign_seeds, equivalence_report
from batchaug.dynamics import (boundary_bisect, random_problem, rate_bound,
                               second_moment_form, simulate,
                               simulate_ensemble, spectral_stats,
                               tightness_construct)
from batchaug.model import batch_grad, forward, loss_softmax_xent, make_model
from batchaug.optim import (StepDecay, TrainConfig, ba_step,
                            ba_step_accumulate, init_opt_state, sgd_step,
                            train)
from batchaug.rng import RngStream


def _verdict(capsys, num, name, ok, detail):
    tag = "PASS" if ok else "FAIL"
    with capsys.disabled():
        print(f"\n[{tag}] criterion {num:2d} ({name}): {detail}")


def _rel_gap(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - b)) / scale)


@pytest.fixture(scope="module")
def small_sets():
    train_ds = gen_synthetic(class_count=10, n_per_class=100,
                             height=12, width=12, seed=0)
    val_ds = gen_synthetic(class_count=10, n_per_class=20,
                           height=12, width=12, seed=1)
    return train_ds, val_ds


def _train_small(train_ds, val_ds, spec_text, epochs, sampler_seed,
                 augment_seed, init_seed, replicas=2):
    cfg = TrainConfig(base_lr=0.08, batch_size=32, epochs=epochs,
                      replicas=replicas, momentum=0.9, weight_decay=5e-4,
                      schedule=StepDecay(milestones=()), ghost_size=16,
                      transform=parse_transform(spec_text),
                      sampler_seed=sampler_seed, augment_seed=augment_seed,
                      init_seed=init_seed)
    model = make_model("cnn:6,12", train_ds.images.shape[1:],
                       train_ds.class_count, seed=init_seed, ghost_size=16)
    if epochs:
        train(model, train_ds, val_ds, cfg, mode="ba")
    return model


class TestQuadraticDynamics:
    def test_c01_stable_step_always_converges(self, capsys):
        t0 = time.time()
        draw = np.random.default_rng(2024)
        fracs = (0.1, 0.3, 0.5, 0.7, 0.9)
        total = 0
        converged = 0
        for i in range(200):
            d = int(draw.integers(2, 17))
            b = int(2 ** draw.integers(0, 5))
            k = int(draw.integers(2, min(8, 64 // b) + 1))
            p = random_problem(dim=d, n_samples=b * k, batch_size=b,
                               rank=d, seed=3000 + i)
            stats = spectral_stats(p)
            assert stats.lam_max > 0
            w0 = RngStream(3000 + i).split("w0").normal((d,))
            for frac in fracs:
                eta = frac * 2.0 / stats.lam_max
                res = simulate(p, eta, w0, t_steps=100000,
                               stream=RngStream(3000 + i).split(
                                   "sim", str(frac)),
                               stats=stats)
                total += 1
                converged += res.verdict == "converged"
        took = time.time() - t0
        ok = converged == total == 1000 and took < 60.0
        _verdict(capsys, 1, "stable-step convergence", ok,
                 f"{converged}/{total} trajectories converged with "
                 f"max-eig margin, {took:.1f}s (budget 60s)")
        assert converged == total == 1000
        assert took < 60.0

    def test_c02_boundary_sits_at_two_over_max_eig(self, capsys):
        t0 = time.time()
        worst = 0.0
        for j in range(20):
            dim = 2 + (j % 6)
            lam = 0.8 + 0.37 * j
            p = tightness_construct(dim=dim, batch_size=2, n_samples=8,
                                    lam=lam, seed=4000 + j)
            stats = spectral_stats(p)
            target = 2.0 / stats.lam_max
            w0 = RngStream(4000 + j).split("w0").normal((dim,))
            est = boundary_bisect(p, w0, 0.5 * target, 1.5 * target,
                                  rounds=10, seed=4000 + j,
                                  t_steps=100000, stats=stats)
            worst = max(worst, abs(est - target) / target)
        took = time.time() - t0
        ok = worst <= 0.005 and took < 60.0
        _verdict(capsys, 2, "instability boundary location", ok,
                 f"worst relative offset {worst:.2e} over 20 instances "
                 f"(allowed 5.0e-03), {took:.1f}s (budget 60s)")
        assert worst <= 0.005
        assert took < 60.0

    def test_c03_one_step_energy_matches_monte_carlo(self, capsys):
        t0 = time.time()
        worst = 0.0
        for j in range(20):
            dim = 2 + (j % 5)
            p = random_problem(dim=dim, n_samples=16, batch_size=4,
                               rank=dim, seed=5000 + j)
            stats = spectral_stats(p)
            w = RngStream(5000 + j).split("state").normal((dim,))
            eta = (0.15 + 0.04 * j) * 2.0 / stats.lam_max
            closed = second_moment_form(p, eta, w, stats=stats)
            assert closed > 0
            stepped = np.empty(p.num_batches)
            for k in range(p.num_batches):
                wk = w - eta * (stats.per_batch[k] @ w)
                stepped[k] = wk @ wk
            draws = RngStream(6000 + j).split("mc").randint(
                100000, 0, p.num_batches)
            mc = float(np.mean(stepped[draws]))
            worst = max(worst, abs(mc - closed) / closed)
        took = time.time() - t0
        ok = worst <= 0.01 and took < 60.0
        _verdict(capsys, 3, "one-step second moment vs MC", ok,
                 f"worst relative gap {worst:.2e} over 20 states x 1e5 "
                 f"draws (allowed 1.0e-02), {took:.1f}s (budget 60s)")
        assert worst <= 0.01
        assert took < 60.0

    def test_c04_ensemble_energy_never_beats_rate_bound(self, capsys):
        t0 = time.time()
        worst = 0.0
        for i in range(20):
            d = 2 + (i % 8)
            p = random_problem(dim=d, n_samples=4 * d, batch_size=d,
                               rank=d, seed=1000 + i)
            stats = spectral_stats(p)
            eta = 1.0 / stats.lam_max
            w0 = RngStream(i).split("w0").normal((d,))
            ens = simulate_ensemble(p, eta, w0, t_steps=200,
                                    n_trajectories=10000,
                                    stream=RngStream(i).split("ens"),
                                    stats=stats)
            bounds = np.array([rate_bound(p, eta, t, w0, stats=stats)
                               for t in range(201)])
            live = bounds > 0
            assert np.all(ens["mean_sq_proj"][~live] <= 1e-18)
            ratio = float(np.max(ens["mean_sq_proj"][live] / bounds[live]))
            worst = max(worst, ratio)
        took = time.time() - t0
        ok = worst <= 1.01 and took < 120.0
        _verdict(capsys, 4, "projected-energy rate bound", ok,
                 f"worst empirical/bound ratio {worst:.6f} over 20 problems "
                 f"x 1e4 trajectories (allowed 1.01), {took:.1f}s "
                 f"(budget 120s)")
        assert worst <= 1.01
        assert took < 120.0


def _fd_loss(model, images, labels, mode):
    logits, _ = forward(model, images, mode=mode)
    loss, _ = loss_softmax_xent(logits, labels)
    return loss


def _fd_worst_rel(model, images, labels, coords, mode, h=1e-5):
    _, bp = batch_grad(model, images, labels, mode=mode)
    base = model.flat_view().copy()
    worst = 0.0
    for c in coords:
        pert = base.copy()
        pert[c] = base[c] + h
        model.set_flat(pert)
        up = _fd_loss(model, images, labels, mode)
        pert[c] = base[c] - h
        model.set_flat(pert)
        down = _fd_loss(model, images, labels, mode)
        fd = (up - down) / (2.0 * h)
        worst = max(worst, abs(fd - bp[c]) / max(abs(fd), abs(bp[c])))
    model.set_flat(base)
    return worst


def _top_coords_by_layer(model, images, labels, mode, per_type=20):
    _, bp = batch_grad(model, images, labels, mode=mode)
    groups = {}
    for i, _name, sl in model.flat_slices():
        kind = type(model.layers[i]).__name__
        groups.setdefault(kind, []).extend(range(sl.start, sl.stop))
    picked = {}
    for kind, idxs in groups.items():
        idxs = np.array(idxs)
        order = np.argsort(-np.abs(bp[idxs]))
        picked[kind] = idxs[order[:per_type]]
    return picked


class TestExactEquivalences:
    def test_c05_backprop_matches_central_differences(self, capsys,
                                                      small_sets):
        t0 = time.time()
        ds, _ = small_sets
        images = ds.images[:8]
        labels = ds.labels[:8]

        conv_model = make_model("cnn:4,6", ds.images.shape[1:],
                                ds.class_count, seed=11, ghost_size=8)
        picked = _top_coords_by_layer(conv_model, images, labels, "train")
        results = {}
        for kind in ("Conv2d", "GhostBatchNorm", "Linear"):
            coords = picked[kind]
            assert len(coords) >= 20
            results[kind] = _fd_worst_rel(conv_model, images, labels,
                                          coords, "train")

        drop_model = make_model("mlp:24", ds.images.shape[1:],
                                ds.class_count, seed=12, dropout=0.3)
        # the hidden linear sits upstream of the dropout layer, so its FD
        # check exercises the eval-mode dropout backward path
        hidden_w = next(sl for i, name, sl in drop_model.flat_slices()
                        if type(drop_model.layers[i]).__name__ == "Linear"
                        and name == "w")
        _, bp = batch_grad(drop_model, images, labels, mode="eval")
        candidates = np.arange(hidden_w.start, hidden_w.stop)
        order = np.argsort(-np.abs(bp[candidates]))
        coords = candidates[order[:20]]
        assert len(coords) >= 20
        results["DropoutEval"] = _fd_worst_rel(drop_model, images, labels,
                                               coords, "eval")

        took = time.time() - t0
        worst = max(results.values())
        ok = worst <= 1e-6 and took < 60.0
        detail = ", ".join(f"{k}={v:.1e}" for k, v in results.items())
        _verdict(capsys, 5, "backprop vs finite differences", ok,
                 f"worst relative error per layer kind: {detail} "
                 f"(allowed 1e-06), {took:.1f}s (budget 60s)")
        assert worst <= 1e-6
        assert took < 60.0

    def test_c06_identity_replicas_reduce_to_plain_sgd(self, capsys,
                                                       small_sets):
        t0 = time.time()
        ds, _ = small_sets
        images = ds.images[:16]
        labels = ds.labels[:16]
        gaps = {}
        for m in (1, 2, 8):
            cfg = TrainConfig(base_lr=0.05, batch_size=16, epochs=1,
                              replicas=m, momentum=0.9, weight_decay=5e-4,
                              schedule=StepDecay(milestones=()),
                              ghost_size=16, transform=Identity())
            plain = make_model("mlp:32", ds.images.shape[1:],
                               ds.class_count, seed=21)
            _, grad = batch_grad(plain, images, labels, mode="train")
            sgd_step(plain, grad, init_opt_state(plain), 0.05, cfg)

            rep = make_model("mlp:32", ds.images.shape[1:],
                             ds.class_count, seed=21)
            ba_step(rep, images, labels, m, RngStream(7).split("aug"),
                    init_opt_state(rep), 0.05, cfg)
            gaps[m] = _rel_gap(plain.flat_view(), rep.flat_view())
        took = time.time() - t0
        worst = max(gaps.values())
        ok = worst <= 1e-12
        detail = ", ".join(f"M={m}: {v:.1e}" for m, v in gaps.items())
        _verdict(capsys, 6, "identity replicas equal plain step", ok,
                 f"relative parameter gap {detail} (allowed 1e-12), "
                 f"{took:.1f}s")
        assert worst <= 1e-12

    def test_c07_accumulated_replicas_match_joint_batch(self, capsys,
                                                        small_sets):
        t0 = time.time()
        ds, _ = small_sets
        images = ds.images[:16]
        labels = ds.labels[:16]
        gaps = {}
        for m in (2, 4):
            cfg = TrainConfig(base_lr=0.05, batch_size=16, epochs=1,
                              replicas=m, momentum=0.9, weight_decay=5e-4,
                              schedule=StepDecay(milestones=()),
                              ghost_size=16,
                              transform=parse_transform(
                                  "padcrop:2,hflip:0.5"))
            joint = make_model("cnn:6", ds.images.shape[1:],
                               ds.class_count, seed=31, ghost_size=16)
            ba_step(joint, images, labels, m, RngStream(31).split("aug"),
                    init_opt_state(joint), 0.05, cfg)

            accum = make_model("cnn:6", ds.images.shape[1:],
                               ds.class_count, seed=31, ghost_size=16)
            ba_step_accumulate(accum, images, labels, m,
                               RngStream(31).split("aug"),
                               init_opt_state(accum), 0.05, cfg)
            gaps[m] = _rel_gap(joint.flat_view(), accum.flat_view())
        took = time.time() - t0
        worst = max(gaps.values())
        ok = worst <= 1e-12
        detail = ", ".join(f"M={m}: {v:.1e}" for m, v in gaps.items())
        _verdict(capsys, 7, "gradient accumulation equivalence", ok,
                 f"relative parameter gap {detail} (allowed 1e-12), "
                 f"{took:.1f}s")
        assert worst <= 1e-12

    def test_c08_cluster_matches_monolithic_bitwise(self, capsys):
        t0 = time.time()
        ds = gen_synthetic(class_count=10, n_per_class=50,
                           height=12, width=12, seed=3)
        configs = assign_seeds(worker_count=8, replicas=4, base_seed=90,
                               local_batch=16)
        cfg = TrainConfig(base_lr=0.05, batch_size=16, epochs=1,
                          replicas=1, momentum=0.9, weight_decay=5e-4,
                          schedule=StepDecay(milestones=()), ghost_size=16,
                          transform=parse_transform("padcrop:2,hflip:0.5"))
        report = equivalence_report(ds, configs, "cnn:6", model_seed=8,
                                    train_cfg=cfg, steps=50)
        took = time.time() - t0
        ok = report["bit_exact"] and took < 120.0
        _verdict(capsys, 8, "distributed bitwise equivalence", ok,
                 f"8 workers x 4 replicas x 50 steps, bit_exact="
                 f"{report['bit_exact']}, first divergence "
                 f"{report['first_divergence_step']}, final checksum "
                 f"{report['final_checksum']}, {took:.1f}s (budget 120s)")
        assert report["bit_exact"] is True
        assert report["first_divergence_step"] is None
        assert took < 120.0

    def test_c09_transform_space_cardinality(self, capsys):
        count = enumerate_space(parse_transform("padcrop:4,hflip:0.5"),
                                (1, 32, 32))
        ok = count == 162
        _verdict(capsys, 9, "transform-space count", ok,
                 f"pad-4 crop x flip on 32x32 enumerates {count} "
                 f"(required 162)")
        assert count == 162


class TestMeasurementStudies:
    def test_c10_correlation_ordering_partially_trained(self, capsys,
                                                        small_sets):
        t0 = time.time()
        ds, val = small_sets
        transform = parse_transform("cutout:6")
        ordered = 0
        rows = []
        for seed in range(5):
            model = _train_small(ds, val, "cutout:6", epochs=4,
                                 sampler_seed=seed, augment_seed=seed + 100,
                                 init_seed=seed + 200)
            rep = correlation_study(model, ds, transform, pair_count=100,
                                    stream=RngStream(seed).split("c"),
                                    state_tag="partial")
            m = rep.medians
            rows.append(m)
            ordered += (m["same_augmented"] > m["same_class"]
                        > m["cross_class"])
        took = time.time() - t0
        mid = rows[2]
        ok = ordered >= 4 and took < 600.0
        _verdict(capsys, 10, "gradient correlation ordering", ok,
                 f"{ordered}/5 seeds ordered augmented>same-class>cross "
                 f"(need >=4); seed-2 medians {mid['same_augmented']:.2f}"
                 f" > {mid['same_class']:.2f} > {mid['cross_class']:.2f}, "
                 f"{took:.0f}s (budget 600s)")
        assert ordered >= 4
        assert took < 600.0

    def test_c11_replica_count_shrinks_gradient_norm(self, capsys,
                                                     small_sets):
        t0 = time.time()
        ds, val = small_sets
        transform = parse_transform("padcrop:2,hflip:0.5")
        decreasing = 0
        for i in range(10):
            model = _train_small(ds, val, "padcrop:2,hflip:0.5",
                                 epochs=i % 4, sampler_seed=i,
                                 augment_seed=i + 100, init_seed=500 + i)
            trace = grad_norm_study(model, ds, transform,
                                    m_list=(1, 2, 4, 8), repeats=200,
                                    stream=RngStream(1000 + i).split("g"),
                                    batch_size=8)
            med = trace.medians()
            vals = [med[m] for m in (1, 2, 4, 8)]
            decreasing += all(a > b for a, b in zip(vals, vals[1:]))
        took = time.time() - t0
        ok = decreasing >= 9 and took < 600.0
        _verdict(capsys, 11, "replica averaging shrinks gradient norm", ok,
                 f"{decreasing}/10 states with medians strictly decreasing "
                 f"over M=1,2,4,8 (need >=9), {took:.0f}s (budget 600s)")
        assert decreasing >= 9
        assert took < 600.0


class TestEndToEnd:
    def test_c12_replicas_do_not_hurt_validation_error(self, capsys):
        t0 = time.time()
        train_ds = gen_synthetic(class_count=10, n_per_class=500,
                                 height=12, width=12, seed=0)
        val_ds = gen_synthetic(class_count=10, n_per_class=100,
                               height=12, width=12, seed=1)
        transform = parse_transform("padcrop:2,hflip:0.5")
        finals = {}
        for mode, m in (("plain", 1), ("ba", 4)):
            errs = []
            for seed in range(5):
                cfg = TrainConfig(base_lr=0.08, batch_size=32, epochs=20,
                                  replicas=m, momentum=0.9,
                                  weight_decay=5e-4,
                                  schedule=StepDecay(milestones=(10, 15)),
                                  ghost_size=16, transform=transform,
                                  sampler_seed=seed,
                                  augment_seed=seed + 100,
                                  init_seed=seed + 200)
                model = make_model("cnn:6,12", train_ds.images.shape[1:],
                                   train_ds.class_count, seed=seed + 200,
                                   ghost_size=16)
                report = train(model, train_ds, val_ds, cfg, mode=mode)
                errs.append(report.final_val_err)
            finals[mode] = float(np.mean(errs))
        took = time.time() - t0
        margin_pp = (finals["plain"] - finals["ba"]) * 100.0
        ok = finals["ba"] <= finals["plain"] + 0.002 and took < 1800.0
        _verdict(capsys, 12, "replica training generalizes no worse", ok,
                 f"mean final val err: plain {finals['plain']*100:.2f}%, "
                 f"4 replicas {finals['ba']*100:.2f}% "
                 f"(margin {margin_pp:+.2f}pp, allowed slack 0.20pp), "
                 f"identical LR schedule and epochs, {took:.0f}s "
                 f"(budget 1800s)")
        assert finals["ba"] <= finals["plain"] + 0.002
        assert took < 1800.0

    def test_c13_throughput_grows_with_batch_size(self, capsys, tmp_path):
        t0 = time.time()
        cfg_path = tmp_path / "throughput.cfg"
        cfg_path.write_text(
            "[dataset]\n"
            "kind = synthetic\n"
            "classes = 10\n"
            "per_class = 50\n"
            "val_per_class = 10\n"
            "height = 12\n"
            "width = 12\n"
            "[model]\n"
            "text = cnn:6,12\n"
            "[train]\n"
            "batch_size = 32\n"
            "ghost_size = 16\n"
            "[diagnostics]\n"
            "throughput_max_batch = 32\n"
            "throughput_repeats = 3\n")
        out = tmp_path / "out"
        rc = main(["throughput", "--config", str(cfg_path),
                   "--out", str(out)])
        assert rc == 0
        per_batch = {}
        lines = (out / "throughput.csv").read_text().strip().splitlines()
        assert lines[0] == "batch,med_imgs_per_sec,std"
        for line in lines[1:]:
            b, med, _std = line.split(",")
            per_batch[int(b)] = float(med)
        took = time.time() - t0
        ok = per_batch[32] > per_batch[1] and took < 300.0
        _verdict(capsys, 13, "throughput grows with batch size", ok,
                 f"per-image rate {per_batch[1]:.0f}/s at batch 1 vs "
                 f"{per_batch[32]:.0f}/s at batch 32 (reported, shape "
                 f"asserted), {took:.0f}s (budget 300s)")
        assert per_batch[32] > per_batch[1]
        assert took < 300.0
