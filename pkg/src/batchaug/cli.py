"""Experiment front end.

    batchaug <train|dynamics|correlate|throughput|distsim>
             [--config FILE] [--out DIR] [--seed N]
             [--override section.key=value]...

Exit codes: 0 success, 2 configuration problem, 3 training diverged,
4 distributed/monolithic equivalence failure.

Every run writes its CSV tables, PNG figures, and a run_manifest.json
holding the fully resolved configuration (the manifest minus timestamps
pins the run: equal manifests give byte-equal tables).

`BATCHAUG_THREADS`, when set, caps the numeric libraries' thread pools;
it must take effect before the first numpy import, which is why this
module defers all heavy imports into main().
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "VECLIB_MAXIMUM_THREADS",
                "NUMEXPR_NUM_THREADS")

COMMANDS = ("train", "dynamics", "correlate", "throughput", "distsim")


def _cap_threads():
    cap = os.environ.get("BATCHAUG_THREADS")
    if cap:
        for var in _THREAD_VARS:
            os.environ.setdefault(var, cap)


def _parse_args(argv):
    parser = argparse.ArgumentParser(
        prog="batchaug",
        description="batch-augmentation training and analysis runner")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", default=None,
                        help="config file; defaults apply when omitted")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the command's primary seeds")
    parser.add_argument("--override", action="append", default=[],
                        metavar="section.key=value",
                        help="set one config value; repeatable")
    return parser.parse_args(argv)


def _apply_seed(cfg, command, seed):
    if command in ("train", "correlate", "throughput"):
        cfg["train"]["sampler_seed"] = seed
        cfg["train"]["augment_seed"] = seed + 1
        cfg["train"]["init_seed"] = seed + 2
    elif command == "dynamics":
        cfg["dynamics"]["seed"] = seed
    elif command == "distsim":
        cfg["distsim"]["base_seed"] = seed


def _utc_now():
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _write_manifest(out, command, cfg, seed, resolved, outputs, started):
    from . import __version__
    manifest = {
        "command": command,
        "code_version": __version__,
        "seed_override": seed,
        "config": cfg,
        "resolved": resolved,
        "outputs": outputs,
        "started_utc": started,
        "finished_utc": _utc_now(),
    }
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def _write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _datasets(cfg):
    from .dataio import gen_synthetic, load_idx
    from .errors import ConfigError
    d = cfg["dataset"]
    if d["kind"] == "synthetic":
        train = gen_synthetic(d["classes"], d["per_class"], d["height"],
                              d["width"], d["channels"], d["seed"])
        val = gen_synthetic(d["classes"], d["val_per_class"], d["height"],
                            d["width"], d["channels"], d["seed"] + 1)
        return train, val
    for key in ("images_path", "labels_path", "val_images_path",
                "val_labels_path"):
        if not d[key]:
            raise ConfigError(f"idx dataset needs dataset.{key}")
    return (load_idx(d["images_path"], d["labels_path"]),
            load_idx(d["val_images_path"], d["val_labels_path"]))


def _build_model(cfg, dataset, train_cfg):
    from .model import make_model
    return make_model(cfg["model"]["text"], dataset.images.shape[1:],
                      dataset.class_count, seed=train_cfg.init_seed,
                      ghost_size=train_cfg.ghost_size,
                      dropout=cfg["model"]["dropout"])


def cmd_train(cfg, out, seed):
    from .config import build_train_config
    from .figures import save_train_curves
    from .optim import regime_adaptation, train
    started = _utc_now()
    train_ds, val_ds = _datasets(cfg)
    tc = build_train_config(cfg)
    mode = cfg["train"]["mode"]
    model = _build_model(cfg, train_ds, tc)
    report = train(model, train_ds, val_ds, tc, mode=mode,
                   step_rows=cfg["train"]["step_rows"])
    effective = regime_adaptation(tc, tc.replicas) if mode == "ra" else tc
    report.save_csv(out / "train_report.csv")
    save_train_curves(report, out / "train_curves.png")
    resolved = {"mode": mode, "batch_size": effective.batch_size,
                "epochs": effective.epochs, "replicas": effective.replicas,
                "final_val_err": report.final_val_err,
                "wall_time_seconds": report.wall_time}
    _write_manifest(out, "train", cfg, seed, resolved,
                    ["train_report.csv", "train_curves.png"], started)
    return 0


def cmd_dynamics(cfg, out, seed):
    import numpy as np

    from .dynamics import (boundary_bisect, random_problem, simulate,
                           spectral_stats, tightness_construct,
                           trajectory_csv_rows, verdict_summary)
    from .rng import RngStream
    started = _utc_now()
    d = cfg["dynamics"]
    points = []
    violations = 0
    trajectories = []
    for i in range(d["problems"]):
        p = random_problem(d["dim"], d["n_samples"], d["batch_size"],
                           d["rank"], seed=d["seed"] + i)
        stats = spectral_stats(p)
        w0 = RngStream(d["seed"] + i).split("w0").normal((d["dim"],))
        for frac in d["eta_fractions"]:
            eta = frac * 2.0 / stats.lam_max
            res = simulate(p, eta, w0, t_steps=d["t_steps"],
                           stream=RngStream(d["seed"] + i).split("sim",
                                                                 repr(frac)),
                           stats=stats)
            point = verdict_summary(eta, stats, res)
            points.append(point)
            if point["predicted"] == "stable" and \
                    point["observed"] == "diverged":
                violations += 1
            if len(trajectories) < d["trajectory_trials"]:
                trajectories.append(res)

    tightness = []
    for j in range(d["tightness_pairs"]):
        dim = 2 + (j % 6)
        lam = d["tightness_lam"] * (1.0 + 0.5 * j)
        p = tightness_construct(dim=dim, batch_size=2, n_samples=8,
                                lam=lam, seed=d["seed"] + j)
        stats = spectral_stats(p)
        w0 = RngStream(d["seed"] + j).split("w0").normal((dim,))
        eta_c = 2.0 / lam
        found = boundary_bisect(p, w0, 0.5 * eta_c, 1.5 * eta_c,
                                seed=d["seed"] + j, stats=stats)
        tightness.append({"dim": dim, "lam": lam, "boundary": found,
                          "rel_error": abs(found - eta_c) / eta_c})

    verdicts = {"points": points, "sufficiency_violations": violations,
                "tightness": tightness}
    (out / "dynamics_verdicts.json").write_text(
        json.dumps(verdicts, indent=2) + "\n", encoding="utf-8")
    rows = ["trial,t,norm,proj_norm"]
    for trial, res in enumerate(trajectories):
        thin = max(1, len(res.norms) // 500)
        rows.extend(trajectory_csv_rows(trial, res, thin=thin))
    _write_lines(out / "dynamics_trajectories.csv", rows)
    from .figures import save_trajectory_figure
    save_trajectory_figure(trajectories, out / "dynamics_norms.png")
    resolved = {"points": len(points),
                "sufficiency_violations": violations,
                "max_tightness_rel_error":
                    max((t["rel_error"] for t in tightness), default=0.0)}
    _write_manifest(out, "dynamics", cfg, seed, resolved,
                    ["dynamics_verdicts.json", "dynamics_trajectories.csv",
                     "dynamics_norms.png"], started)
    return 0


def cmd_correlate(cfg, out, seed):
    from .config import build_train_config
    from .diagnostics import (assumption_check, correlation_csv_rows,
                              correlation_study, grad_norm_csv_rows,
                              grad_norm_study)
    from .figures import save_correlation_figure, save_grad_norm_figure
    from .optim import train
    from .rng import RngStream
    started = _utc_now()
    train_ds, val_ds = _datasets(cfg)
    tc = build_train_config(cfg)
    diag = cfg["diagnostics"]
    epochs_for = {"init": 0, "partial": diag["partial_epochs"],
                  "converged": diag["converged_epochs"]}
    reports = []
    summary = {}
    outputs = []
    for tag in diag["states"]:
        model = _build_model(cfg, train_ds, tc)
        if epochs_for[tag] > 0:
            from dataclasses import replace
            state_tc = replace(tc, epochs=epochs_for[tag])
            train(model, train_ds, val_ds, state_tc,
                  mode=cfg["train"]["mode"])
        stream = RngStream(tc.augment_seed).split("correlate", tag)
        rep = correlation_study(model, train_ds, tc.transform,
                                pair_count=diag["pairs"], stream=stream,
                                state_tag=tag)
        lhs, rhs, holds = assumption_check(
            model, train_ds, tc.transform, pair_count=diag["pairs"],
            stream=RngStream(tc.augment_seed).split("assumption", tag))
        reports.append(rep)
        summary[tag] = {"medians": rep.medians, "mads": rep.mads,
                        "assumption_lhs": lhs, "assumption_rhs": rhs,
                        "assumption_holds": holds}
        name = f"correlations_{tag}.csv"
        _write_lines(out / name, correlation_csv_rows(rep))
        outputs.append(name)
    (out / "correlation_summary.json").write_text(
        json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    save_correlation_figure(reports, out / "correlation_medians.png")
    outputs += ["correlation_summary.json", "correlation_medians.png"]
    # replica-count study at the last requested state; medians land in the
    # CSV's summary rows
    trace = grad_norm_study(model, train_ds, tc.transform,
                            m_list=diag["m_list"], repeats=diag["repeats"],
                            stream=RngStream(tc.augment_seed).split(
                                "gradnorm"),
                            batch_size=diag["batch_size"])
    _write_lines(out / "grad_norm.csv", grad_norm_csv_rows(trace))
    save_grad_norm_figure(trace, out / "grad_norm.png")
    outputs += ["grad_norm.csv", "grad_norm.png"]
    _write_manifest(out, "correlate", cfg, seed, summary, outputs, started)
    return 0


def cmd_throughput(cfg, out, seed):
    import numpy as np

    from .config import build_train_config
    from .figures import save_throughput_figure
    from .model import batch_grad, make_model
    started = _utc_now()
    train_ds, _ = _datasets(cfg)
    tc = build_train_config(cfg)
    diag = cfg["diagnostics"]
    batches = []
    b = 1
    while b <= diag["throughput_max_batch"]:
        batches.append(b)
        b *= 2
    rows = []
    for b in batches:
        ghost = min(tc.ghost_size, b)
        model = make_model(cfg["model"]["text"], train_ds.images.shape[1:],
                           train_ds.class_count, seed=tc.init_seed,
                           ghost_size=ghost,
                           dropout=cfg["model"]["dropout"])
        images = train_ds.images[:b]
        labels = train_ds.labels[:b]
        batch_grad(model, images, labels, mode="train")  # warm caches
        rates = []
        for _ in range(diag["throughput_repeats"]):
            t0 = time.perf_counter()
            batch_grad(model, images, labels, mode="train")
            rates.append(b / (time.perf_counter() - t0))
        rows.append((b, float(np.median(rates)), float(np.std(rates))))
    lines = ["batch,med_imgs_per_sec,std"]
    lines += [f"{b},{med:.12g},{std:.12g}" for b, med, std in rows]
    _write_lines(out / "throughput.csv", lines)
    save_throughput_figure(rows, out / "throughput.png")
    resolved = {"batches": batches,
                "med_imgs_per_sec": {str(b): med for b, med, _ in rows}}
    _write_manifest(out, "throughput", cfg, seed, resolved,
                    ["throughput.csv", "throughput.png"], started)
    return 0


def cmd_distsim(cfg, out, seed):
    from .config import build_train_config
    from .distsim import assign_seeds, distsim_csv_rows, equivalence_report
    from .errors import EquivalenceFailure
    from .figures import save_distsim_figure
    from .optim import StepDecay, TrainConfig
    started = _utc_now()
    train_ds, _ = _datasets(cfg)
    tc = build_train_config(cfg)
    ds = cfg["distsim"]
    configs = assign_seeds(ds["workers"], ds["replicas"], ds["base_seed"],
                           ds["local_batch"])
    dist_tc = TrainConfig(
        base_lr=tc.base_lr, batch_size=ds["local_batch"], epochs=1,
        replicas=1, momentum=tc.momentum, weight_decay=tc.weight_decay,
        schedule=StepDecay(milestones=()), ghost_size=ds["local_batch"],
        transform=tc.transform, with_replacement=tc.with_replacement)
    t0 = time.perf_counter()
    rep = equivalence_report(train_ds, configs, cfg["model"]["text"],
                             tc.init_seed, dist_tc, ds["steps"])
    wall = time.perf_counter() - t0
    _write_lines(out / "distsim_steps.csv", distsim_csv_rows(rep["rows"]))
    save_distsim_figure(rep["rows"], out / "distsim_norms.png")
    verdict = {"bit_exact": rep["bit_exact"],
               "first_divergence_step": rep["first_divergence_step"],
               "steps": ds["steps"], "workers": ds["workers"],
               "replicas": ds["replicas"],
               "final_checksum": rep["final_checksum"],
               "mean_step_seconds": wall / (2 * ds["steps"])}
    (out / "distsim_verdict.json").write_text(
        json.dumps(verdict, indent=2) + "\n", encoding="utf-8")
    _write_manifest(out, "distsim", cfg, seed, verdict,
                    ["distsim_steps.csv", "distsim_verdict.json",
                     "distsim_norms.png"], started)
    if not rep["bit_exact"]:
        raise EquivalenceFailure(
            f"parameters diverged at step {rep['first_divergence_step']}")
    return 0


_COMMANDS = {"train": cmd_train, "dynamics": cmd_dynamics,
             "correlate": cmd_correlate, "throughput": cmd_throughput,
             "distsim": cmd_distsim}


def main(argv=None) -> int:
    _cap_threads()
    args = _parse_args(argv)
    from .config import apply_override, default_config, load_config
    from .errors import (ConfigError, EquivalenceFailure, IdxFormatError,
                         TrainingDiverged)
    try:
        cfg = load_config(args.config) if args.config else default_config()
        for spec in args.override:
            apply_override(cfg, spec)
        if args.seed is not None:
            _apply_seed(cfg, args.command, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](cfg, out, args.seed)
    except (ConfigError, IdxFormatError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    except EquivalenceFailure as exc:
        print(f"equivalence failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
