"""Command line front end.

Subcommands cover the whole workflow: synthesize a labeled scene,
meta-train on it, detect or adapt on a target scene, score a map
against truth labels, sweep one configuration field, and audit
gradients. Every command that writes into an --out-dir also writes
config.resolved, the exact configuration the run used.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 validation
error (bad configuration values, malformed files, degenerate data).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields

import numpy as np

from . import __version__
from . import autodiff as ad
from .config import RunConfig, _read_lines, load_config
from .encoders import prior_encode, rectify_prototype
from .figures import render_map, render_roc, render_separability
from .hsio import (SynthConfig, ValidationError, load_cube, load_map,
                   load_prior, normalize_bands, random_prior, sample_episode,
                   save_cube, save_map, save_pgm, save_prior, synth_scene)
from .metatrain import (TrainConfig, class_mean_priors, meta_train_run,
                        single_episode_loss)
from .pipeline import (ModelSpec, cosine_baseline_map, embed_batch,
                       embed_batch_full, init_param_store, scene_forward)
from .report import evaluate_map, export_report, separability_stats
from .tta import (cosine_scores, normalize_map, select_pseudo_labels,
                  tta_adapt)

__all__ = ["main"]

ENV_SEED = "SPECDETECT_SEED"


# -- configuration plumbing ---------------------------------------------------

def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("configuration overrides")
    for f in fields(RunConfig):
        group.add_argument("--" + f.name.replace("_", "-"), dest=f.name,
                           metavar="V", default=None)
    parser.add_argument("--config", metavar="FILE", default=None,
                        help="key = value configuration file")


def _resolve(args) -> RunConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)
                 if getattr(args, f.name, None) is not None}
    cfg = load_config(args.config, overrides)
    if "seed" not in overrides and os.environ.get(ENV_SEED):
        file_keys = ({k for k, _ in _read_lines(args.config, 0)}
                     if args.config else set())
        if "seed" not in file_keys:
            cfg.set_field("seed", os.environ[ENV_SEED])
    cfg.validate()
    return cfg


def _out_dir(args) -> str:
    os.makedirs(args.out_dir, exist_ok=True)
    return args.out_dir


def _echo_config(cfg: RunConfig, out: str) -> None:
    cfg.to_file(os.path.join(out, "config.resolved"))


def _load_scene(path):
    cube, labels = load_cube(path)
    return cube, labels


def _need_labels(labels, what: str):
    if labels is None:
        raise ValidationError(f"scene file carries no label plane; "
                              f"{what} needs labels")
    return labels


def _target_id(cfg: RunConfig) -> int | None:
    return cfg.target_class if cfg.target_class > 0 else None


def _check_shapes(store: ad.ParamStore, spec: ModelSpec) -> None:
    """Loaded checkpoint must structurally match the configured model."""
    ref = init_param_store(spec, 0)
    missing = sorted(set(ref.names()) - set(store.names()))
    extra = sorted(set(store.names()) - set(ref.names()))
    if missing or extra:
        raise ValidationError(
            f"checkpoint does not match the configured model "
            f"(missing {missing[:3]}, unexpected {extra[:3]})")
    for name in ref.names():
        want, got = ref.value(name).shape, store.value(name).shape
        if want != got:
            raise ValidationError(
                f"checkpoint entry {name} has shape {got}, "
                f"configuration implies {want}")


def _prototype(prior_vec: np.ndarray, store: ad.ParamStore, spec: ModelSpec,
               blend: float) -> np.ndarray:
    """Rectified target prototype when no labeled pixels exist: the prior
    spectrum tiled into a uniform patch stands in for support samples."""
    s = spec.patch_size
    tile = np.tile(np.asarray(prior_vec, dtype=np.float32)[None, None, None, :],
                   (1, s, s, 1))
    support_mean = embed_batch(tile, store, spec).data[0]
    e_prior = prior_encode(np.asarray(prior_vec, dtype=np.float64), store).data
    return rectify_prototype(support_mean, e_prior, blend).p_c


def _load_prior_vec(path, cube) -> np.ndarray:
    return load_prior(path, cube.bands, cube.wavelengths).t_prior


# -- subcommands --------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    prior = random_prior(cfg.bands, seed=cfg.seed)
    cube, labels, mask = synth_scene(cfg.synth_cfg(), [prior])
    save_cube(cube, os.path.join(out, "scene.sphc"), labels=labels)
    save_prior(prior, os.path.join(out, "prior.txt"))
    _echo_config(cfg, out)
    target = cfg.background_classes + 1
    print(f"scene.sphc: {cube.height}x{cube.width}x{cube.bands}, "
          f"{cfg.background_classes} background classes, "
          f"{int(mask.sum())} implant pixels (class {target})")
    print(f"prior.txt: {cfg.bands} bands")
    return 0


def cmd_meta_train(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    cube, labels = _load_scene(args.scene)
    _need_labels(labels, "meta-training")
    cube, _ = normalize_bands(cube)
    spec = cfg.model_spec(cube.bands)
    store = init_param_store(spec, cfg.seed)
    priors = {}
    if args.prior:
        tid = _target_id(cfg)
        if tid is None:
            raise ValidationError("--prior needs --target-class to say "
                                  "which class it describes")
        priors[tid] = _load_prior_vec(args.prior, cube)
    trace = meta_train_run(cube, labels, cfg.train_cfg(), store, spec,
                           priors=priors,
                           trace_path=os.path.join(out, "trace.csv"))
    store.save(os.path.join(out, "checkpoint.spdm"))
    _echo_config(cfg, out)
    if trace:
        print(f"meta-train: {len(trace)} iterations, "
              f"loss_total {trace[0]['loss_total']:.6f} -> "
              f"{trace[-1]['loss_total']:.6f}")
    print(f"wrote checkpoint.spdm and trace.csv to {out}")
    return 0


def cmd_detect(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    cube, _ = _load_scene(args.scene)
    if args.baseline:
        if not args.prior:
            raise ValidationError("--baseline needs --prior")
        scores = cosine_baseline_map(cube, _load_prior_vec(args.prior, cube))
        mode = "cosine baseline"
    else:
        if not args.checkpoint:
            raise ValidationError("detect needs --checkpoint "
                                  "(or --baseline with --prior)")
        cube, _ = normalize_bands(cube)
        spec = cfg.model_spec(cube.bands)
        store = ad.ParamStore.load(args.checkpoint)
        _check_shapes(store, spec)
        raw = scene_forward(cube, store, spec, want_prob=True,
                            chunk=cfg.chunk, threads=cfg.threads)["prob"]
        scores = normalize_map(raw)
        mode = "detection head"
    save_map(scores, os.path.join(out, "map.sphm"))
    save_pgm(scores, os.path.join(out, "map.pgm"))
    _echo_config(cfg, out)
    print(f"detect ({mode}): map.sphm and map.pgm written to {out}")
    return 0


def cmd_adapt(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    cube, _ = _load_scene(args.scene)
    cube, _ = normalize_bands(cube)
    spec = cfg.model_spec(cube.bands)
    store = ad.ParamStore.load(args.checkpoint)
    _check_shapes(store, spec)
    prior_vec = _load_prior_vec(args.prior, cube)
    proto = _prototype(prior_vec, store, spec, cfg.support_blend)
    scores, diag = tta_adapt(cube, proto, store, spec, cfg.tta_cfg())
    save_map(scores, os.path.join(out, "map.sphm"))
    save_pgm(scores, os.path.join(out, "map.pgm"))
    store.save(os.path.join(out, "adapted.spdm"))
    with open(os.path.join(out, "diag.json"), "w", encoding="utf-8") as fh:
        json.dump({"pseudo_counts": [list(c) for c in diag["pseudo_counts"]],
                   "loss_wbce": diag["loss_wbce"],
                   "loss_self": diag["loss_self"],
                   "loss_total": diag["loss_total"]}, fh, indent=2)
        fh.write("\n")
    _echo_config(cfg, out)
    n_pos, n_neg = diag["pseudo_counts"][-1]
    print(f"adapt: {cfg.tta_iterations} iterations, final pseudo-sets "
          f"|pos|={n_pos} |neg|={n_neg}")
    print(f"wrote map.sphm, map.pgm, adapted.spdm, diag.json to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    scores = load_map(args.map)
    _, labels = _load_scene(args.scene)
    _need_labels(labels, "evaluation")
    tid = _target_id(cfg)
    report = evaluate_map(scores, labels, grid=cfg.grid, target_id=tid)
    sep = separability_stats(scores, labels, target_id=tid)
    export_report(report, os.path.join(out, "report.csv"),
                  os.path.join(out, "report.json"), separability=sep)
    render_roc(report, os.path.join(out, "roc.png"))
    render_separability(sep[0], sep[1], os.path.join(out, "separability.png"))
    render_map(scores, os.path.join(out, "map.png"),
               truth=labels.labels == tid)
    _echo_config(cfg, out)
    snpr = "inf" if report.snpr_infinite else f"{report.auc_snpr:.5f}"
    print(f"eval: AUC(Pf,Pd)={report.auc_pf_pd:.5f} "
          f"AUC(tau,Pd)={report.auc_tau_pd:.5f} "
          f"AUC(tau,Pf)={report.auc_tau_pf:.5f} "
          f"OA={report.auc_oa:.5f} SNPR={snpr}")
    print(f"wrote report.csv, report.json, and figures to {out}")
    return 0


def cmd_sweep(args) -> int:
    base = _resolve(args)
    out = _out_dir(args)
    field_names = {f.name for f in fields(RunConfig)}
    if args.field not in field_names:
        raise ValidationError(f"unknown configuration key {args.field!r}")
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ValidationError("--values is empty")
    if args.train_each and not args.train_scene:
        raise ValidationError("--train-each needs --train-scene")
    if not args.train_each and not args.checkpoint:
        raise ValidationError("sweep needs --checkpoint (or --train-each "
                              "with --train-scene)")

    cube, labels = _load_scene(args.scene)
    _need_labels(labels, "the sweep evaluation")
    tid = _target_id(base)
    if tid is None:
        raise ValidationError("sweep needs --target-class for evaluation")
    cube, _ = normalize_bands(cube)
    prior_vec = _load_prior_vec(args.prior, cube)

    rows = []
    for value in values:
        cfg = load_config(args.config, {
            **{f.name: getattr(args, f.name) for f in fields(RunConfig)
               if getattr(args, f.name, None) is not None},
            args.field: value})
        cfg.validate()
        spec = cfg.model_spec(cube.bands)
        if args.train_each:
            tr_cube, tr_labels = _load_scene(args.train_scene)
            _need_labels(tr_labels, "meta-training")
            tr_cube, _ = normalize_bands(tr_cube)
            store = init_param_store(spec, cfg.seed)
            meta_train_run(tr_cube, tr_labels, cfg.train_cfg(), store, spec)
        else:
            store = ad.ParamStore.load(args.checkpoint)
            _check_shapes(store, spec)
        proto = _prototype(prior_vec, store, spec, cfg.support_blend)
        scores, _ = tta_adapt(cube, proto, store, spec, cfg.tta_cfg())
        rep = evaluate_map(scores, labels, grid=cfg.grid, target_id=tid)
        rows.append((value, rep))
        snpr = "inf" if rep.snpr_infinite else f"{rep.auc_snpr:.5f}"
        print(f"{args.field}={value}: AUC(Pf,Pd)={rep.auc_pf_pd:.5f} "
              f"OA={rep.auc_oa:.5f} SNPR={snpr}")

    with open(os.path.join(out, "sweep.csv"), "w", encoding="utf-8") as fh:
        fh.write("field,value,auc_pf_pd,auc_tau_pd,auc_tau_pf,"
                 "auc_oa,auc_snpr,snpr_infinite\n")
        for value, rep in rows:
            snpr = "" if rep.snpr_infinite else f"{rep.auc_snpr:.9f}"
            fh.write(f"{args.field},{value},{rep.auc_pf_pd:.9f},"
                     f"{rep.auc_tau_pd:.9f},{rep.auc_tau_pf:.9f},"
                     f"{rep.auc_oa:.9f},{snpr},"
                     f"{str(rep.snpr_infinite).lower()}\n")
    _echo_config(base, out)
    print(f"wrote sweep.csv ({len(rows)} rows) to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    """Finite-difference audit of the full training objective at toy size."""
    scfg = SynthConfig(height=24, width=24, bands=16, background_classes=2,
                       implant_count=12, seed=args.seed)
    prior = random_prior(16, seed=args.seed)
    cube, labels, _ = synth_scene(scfg, [prior])
    spec = ModelSpec(bands=16, patch_size=3, descr_dim=16, adapter_dim=16,
                     embed_dim=16, state_dim=8, heads=2, blocks=1,
                     prior_hidden=16, n_way=3)
    store = init_param_store(spec, args.seed)
    tcfg = TrainConfig(n_way=3, k_shot=1, query_count=4)
    ep = sample_episode(cube, labels, 3, 1, 12, seed=args.seed + 1,
                        patch_size=3)
    t_prior = class_mean_priors(cube, labels)[int(ep.class_ids[1])]

    # pin the pseudo-label selection at the base point
    emb, _ = embed_batch_full(np.concatenate([ep.support_values,
                                              ep.query_values]), store, spec)
    sup_idx = np.flatnonzero(ep.support_labels == 1)
    proto = (tcfg.support_blend * emb.data[sup_idx].mean(axis=0)
             + (1 - tcfg.support_blend)
             * prior_encode(t_prior, store).data)
    n_sup = ep.support_values.shape[0]
    sets = select_pseudo_labels(cosine_scores(emb.data[n_sup:], proto),
                                tcfg.pseudo_q_pos, tcfg.pseudo_q_neg)

    def fn(s):
        return single_episode_loss(ep, 1, t_prior, s, spec, tcfg,
                                   pseudo_sets=sets)

    namespaces = sorted({n.split("/", 1)[0] for n in store.names()})
    failed = False
    for ns in namespaces:
        err = ad.finite_difference_check(
            fn, store, h=args.h, coords_per_namespace=args.coords,
            include=ns + "/", seed=args.seed)
        status = "PASS" if err < args.tol else "FAIL"
        if err >= args.tol:
            failed = True
        print(f"{ns:10s} max_rel_err {err:.3e}  {status}")
    print("gradcheck " + ("FAILED" if failed else "passed")
          + f" (tolerance {args.tol:g})")
    return 1 if failed else 0


def cmd_version(args) -> int:
    print(f"specdetect {__version__}")
    return 0


# -- parser -------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="specdetect",
        description="Few-shot hyperspectral target detection: synthesize "
                    "scenes, meta-train, adapt at test time, and score "
                    "detection maps.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, out_dir=True):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(func=func)
        if out_dir:
            sp.add_argument("--out-dir", required=True, metavar="DIR")
        return sp

    sp = add("synth", cmd_synth, "generate a labeled synthetic scene")
    _add_config_flags(sp)

    sp = add("meta-train", cmd_meta_train, "episodic training on a "
             "labeled scene")
    sp.add_argument("--scene", required=True, metavar="SPHC")
    sp.add_argument("--prior", metavar="FILE",
                    help="library spectrum for --target-class")
    _add_config_flags(sp)

    sp = add("detect", cmd_detect, "score a scene without adaptation")
    sp.add_argument("--scene", required=True, metavar="SPHC")
    sp.add_argument("--checkpoint", metavar="SPDM")
    sp.add_argument("--prior", metavar="FILE")
    sp.add_argument("--baseline", action="store_true",
                    help="plain cosine similarity against --prior")
    _add_config_flags(sp)

    sp = add("adapt", cmd_adapt, "test-time adaptation on a target scene")
    sp.add_argument("--scene", required=True, metavar="SPHC")
    sp.add_argument("--checkpoint", required=True, metavar="SPDM")
    sp.add_argument("--prior", required=True, metavar="FILE")
    _add_config_flags(sp)

    sp = add("eval", cmd_eval, "score a detection map against labels")
    sp.add_argument("--map", required=True, metavar="SPHM")
    sp.add_argument("--scene", required=True, metavar="SPHC",
                    help="scene whose label plane is the truth")
    _add_config_flags(sp)

    sp = add("sweep", cmd_sweep, "repeat adapt+eval over one field")
    sp.add_argument("--field", required=True, metavar="KEY")
    sp.add_argument("--values", required=True, metavar="V1,V2,...")
    sp.add_argument("--scene", required=True, metavar="SPHC")
    sp.add_argument("--checkpoint", metavar="SPDM")
    sp.add_argument("--prior", required=True, metavar="FILE")
    sp.add_argument("--train-each", action="store_true",
                    help="meta-train per value instead of reusing "
                         "--checkpoint")
    sp.add_argument("--train-scene", metavar="SPHC")
    _add_config_flags(sp)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference gradient audit",
             out_dir=False)
    sp.add_argument("--h", type=float, default=1e-5, metavar="STEP")
    sp.add_argument("--coords", type=int, default=50, metavar="N")
    sp.add_argument("--tol", type=float, default=1e-4, metavar="TOL")
    sp.add_argument("--seed", type=int,
                    default=int(os.environ.get(ENV_SEED, "0")), metavar="S")

    add("version", cmd_version, "print the package version", out_dir=False)
    return p


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ad.GraphError, ad.NonFiniteError, ad.StaleGradientsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
