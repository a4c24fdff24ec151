"""Command-line entry points: generate, pretrain, metatrain, evaluate, gradcheck.

Every command is reproducible from (config, seed): primary outputs are
byte-identical across reruns; wall-clock timestamps live only in the
``run_meta.json`` sidecar.  Exit codes: 0 success, 1 verification failure,
2 config error, 3 IO error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import contrastive, gradcheck, metalearn, mining, streams, synthvid
from .config import ConfigError
from .kernels import BACKEND

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_IO = 3


def _dataset_spec(cfg: dict) -> synthvid.DatasetSpec:
    return synthvid.DatasetSpec(
        appearance_classes=cfg["dataset.appearance_classes"],
        motion_classes=cfg["dataset.motion_classes"],
        train_classes=cfg["dataset.train_classes"],
        novel_classes=cfg["dataset.novel_classes"],
        videos_per_train_class=cfg["dataset.videos_per_train_class"],
        videos_per_novel_class=cfg["dataset.videos_per_novel_class"],
        frames=cfg["dataset.frames"],
        height=cfg["dataset.height"],
        width=cfg["dataset.width"],
        noise_std=cfg["dataset.noise_std"],
        flicker_rate=cfg["dataset.flicker_rate"],
        flicker_strength=cfg["dataset.flicker_strength"],
        appearance_mode=cfg["dataset.appearance_mode"],
        seed=cfg["run.seed"],
        train_class_ids=cfg["dataset.train_class_ids"] or None,
        novel_class_ids=cfg["dataset.novel_class_ids"] or None,
    )


def _sampler(cfg: dict) -> contrastive.ViewSampler:
    ap_res = (cfg["sampling.appearance_res"],) * 2
    act_res = (cfg["sampling.action_res"],) * 2
    aug = synthvid.AugmentationConfig(
        crop_scale_range=(cfg["augment.crop_scale_min"], cfg["augment.crop_scale_max"]),
        hflip_prob=cfg["augment.hflip_prob"],
        jitter_strength=cfg["augment.jitter_strength"],
        grayscale_prob=cfg["augment.grayscale_prob"],
        blur_kernel=cfg["augment.blur_kernel"],
    )
    return contrastive.ViewSampler(
        appearance_scheme=synthvid.parse_scheme(cfg["sampling.appearance_scheme"], ap_res),
        action_scheme=synthvid.parse_scheme(cfg["sampling.action_scheme"], act_res),
        aug=aug,
        share_spatial=cfg["augment.share_spatial_across_streams"],
    )


def _store(cfg: dict) -> contrastive.VideoStore:
    data_dir = cfg["data.dir"]
    if not data_dir:
        raise ConfigError("data.dir must point at a dataset directory")
    manifest = synthvid.load_manifest(data_dir)
    return contrastive.VideoStore(data_dir, manifest)


def _view_dims(cfg: dict) -> tuple[int, int]:
    sampler = _sampler(cfg)
    ap = sampler.appearance_scheme
    act = sampler.action_scheme
    ap_in = 3 * ap.resolution[0] * ap.resolution[1]
    act_in = act.total_frames * 3 * act.resolution[0] * act.resolution[1]
    return ap_in, act_in


def _mining_cfg(cfg: dict) -> mining.MiningConfig:
    return mining.MiningConfig(
        n=cfg["mining.n"], batch=cfg["mining.batch"],
        exploration_fraction=cfg["mining.exploration_fraction"],
        way=cfg["episode.way"], shots=cfg["episode.shots"],
        queries=cfg["episode.queries"],
    )


def _meta_cfg(cfg: dict) -> metalearn.MetaConfig:
    return metalearn.MetaConfig(
        alpha=cfg["meta.alpha"], beta=cfg["meta.beta"],
        episodes_per_iter=cfg["meta.episodes_per_iter"],
        iterations=cfg["meta.iterations"], inner_steps=cfg["meta.inner_steps"],
        order=cfg["meta.order"], anneal_floor=cfg["meta.anneal_floor"],
        fast=cfg["meta.fast"],
    )


def _protocol(cfg: dict) -> metalearn.TestProtocol:
    return metalearn.TestProtocol(
        finetune_lr=cfg["test.finetune_lr"],
        finetune_epochs=cfg["test.finetune_epochs"],
        episodes=cfg["test.episodes"], way=cfg["test.way"], shot=cfg["test.shot"],
    )


def _workers() -> int:
    raw = os.environ.get("MUVFS_THREADS", "1")
    try:
        return max(1, min(int(raw), os.cpu_count() or 1))
    except ValueError:
        return 1


def _prepare_out(out: str | None) -> Path:
    if not out:
        raise ConfigError("--out DIR is required for this command")
    out_dir = Path(out)
    if not out_dir.parent.exists():
        raise OSError(f"parent of output directory does not exist: {out_dir.parent}")
    out_dir.mkdir(exist_ok=True)
    return out_dir


def _sidecar(out_dir: Path, command: str, cfg: dict) -> None:
    meta = {"command": command, "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "config_digest": cfgmod.config_digest(cfg), "seed": cfg["run.seed"],
            "kernel_backend": BACKEND}
    (out_dir / "run_meta.json").write_text(
        json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_csv_cell(row[c]) for c in columns))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def cmd_generate(cfg: dict, out: str | None) -> int:
    out_dir = _prepare_out(out)
    spec = _dataset_spec(cfg)
    try:
        manifest = synthvid.generate_dataset(spec, out_dir)
    except synthvid.DatasetError as exc:
        # bad generation parameters are config errors, not IO
        raise ConfigError(str(exc)) from exc
    _sidecar(out_dir, "generate", cfg)
    print(f"generated {len(manifest.records)} videos into {out_dir}")
    return EXIT_OK


def cmd_pretrain(cfg: dict, out: str | None) -> int:
    out_dir = _prepare_out(out)
    store = _store(cfg)
    sampler = _sampler(cfg)
    ap_in, act_in = _view_dims(cfg)
    rng = np.random.default_rng(np.random.SeedSequence((cfg["run.seed"], 0x111717)))
    model = streams.build_model(
        rng, ap_in, act_in, hidden=cfg["streams.hidden_dim"],
        embed_dim=cfg["streams.embed_dim"], proj_hidden=cfg["streams.proj_hidden"],
        proj_dim=cfg["streams.proj_dim"], joint_head=cfg["contrastive.joint_loss"])
    pcfg = contrastive.PretrainConfig(
        tau=cfg["contrastive.tau"], batch_size=cfg["contrastive.batch_size"],
        epochs=cfg["contrastive.epochs"], peak_lr=cfg["contrastive.peak_lr"],
        final_lr=cfg["contrastive.final_lr"],
        warmup_epochs=cfg["contrastive.warmup_epochs"],
        momentum=cfg["contrastive.momentum"],
        use_joint=cfg["contrastive.joint_loss"], use_skl=cfg["contrastive.skl_loss"],
        share_spatial=cfg["augment.share_spatial_across_streams"],
        seed=cfg["run.seed"])
    log = contrastive.pretrain(store, model, sampler, pcfg)
    columns = ["epoch", "loss_ap", "loss_act"]
    if pcfg.use_joint:
        columns.append("loss_joint")
    if pcfg.use_skl:
        columns.append("loss_skl")
    columns.append("lr")
    _write_csv(out_dir / "pretrain_log.csv", log, columns)
    streams.save_checkpoint(out_dir / "checkpoint", model.named_params(),
                            meta={"embed_dim": cfg["streams.embed_dim"],
                                  "appearance_in": ap_in, "action_in": act_in})
    _sidecar(out_dir, "pretrain", cfg)
    print(f"pretrained {pcfg.epochs} epochs; checkpoint in {out_dir / 'checkpoint'}")
    return EXIT_OK


def _load_encoders(cfg: dict):
    enc_dir = cfg["paths.encoders"]
    if not enc_dir:
        raise ConfigError("paths.encoders must point at a pretraining checkpoint")
    model, meta = streams.model_from_checkpoint(Path(enc_dir))
    return model, meta


def cmd_metatrain(cfg: dict, out: str | None) -> int:
    out_dir = _prepare_out(out)
    store = _store(cfg)
    model, _ = _load_encoders(cfg)
    embedder = mining.Embedder(store, model, _sampler(cfg))
    rng = np.random.default_rng(np.random.SeedSequence((cfg["run.seed"], 0x3E7A)))
    head = metalearn.init_head(rng, cfg["head.kind"], cfg["streams.embed_dim"],
                               cfg["episode.way"], d_k=cfg["head.d_k"],
                               d_v=cfg["head.d_v"],
                               classifier_bias=cfg["head.classifier_bias"])
    mcfg = _meta_cfg(cfg)
    state = metalearn.new_state(head, mcfg)
    result = metalearn.meta_train(state, embedder, _mining_cfg(cfg), mcfg, rng,
                                  mine=cfg["mining.enabled"],
                                  collect_pools=cfg["mining.dump_pools"])
    if cfg["mining.dump_pools"]:
        log, pools = result
        (out_dir / "pools.json").write_text(
            json.dumps(pools, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    else:
        log = result
    _write_csv(out_dir / "metatrain_log.csv", log,
               ["iteration", "query_loss", "query_acc", "lr"])
    streams.save_checkpoint(out_dir / "meta_checkpoint", head.tensors,
                            meta={"head": head.kind, "way": head.way,
                                  "d_k": head.d_k, "embed_dim": cfg["streams.embed_dim"]})
    _sidecar(out_dir, "metatrain", cfg)
    print(f"meta-trained {mcfg.iterations} iterations; checkpoint in "
          f"{out_dir / 'meta_checkpoint'}")
    return EXIT_OK


def _load_head(cfg: dict) -> metalearn.MetaHead:
    meta_dir = cfg["paths.meta"]
    if not meta_dir:
        raise ConfigError("paths.meta must point at a meta checkpoint")
    params, meta = streams.load_checkpoint(Path(meta_dir))
    from .autodiff import Tensor

    tensors = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    return metalearn.MetaHead(meta.get("head", "attn"), tensors,
                              int(meta.get("way", 5)), int(meta.get("d_k", 0)))


def cmd_evaluate(cfg: dict, out: str | None) -> int:
    out_dir = _prepare_out(out)
    store = _store(cfg)
    model, _ = _load_encoders(cfg)
    embedder = mining.Embedder(store, model, _sampler(cfg))
    head = _load_head(cfg)
    protocol = _protocol(cfg)
    learner = cfg["evaluate.learner"]
    if learner not in metalearn.LEARNERS:
        raise ConfigError(f"evaluate.learner must be one of {metalearn.LEARNERS}")
    if learner == "protonet" and protocol.finetune_epochs:
        print("warning: learner=protonet ignores test.finetune_epochs", file=sys.stderr)
    ways = list(cfg["evaluate.way_list"]) or [protocol.way]
    digest = cfgmod.config_digest(cfg)
    seed = cfg["run.seed"]
    workers = _workers()
    reports = []
    for way in ways:
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5A3D, way)))
        episodes = mining.sample_test_episodes(store.manifest, way, protocol.shot,
                                               protocol.episodes, rng)
        accs, reinit = metalearn.meta_test(head, episodes, protocol, embedder, seed,
                                           learner=learner,
                                           scale_init=cfg["baselinepp.scale"],
                                           workers=workers)
        mean, half = metalearn.accuracy_ci(accs)
        report = metalearn.EvalReport(way, protocol.shot, len(episodes), mean, half,
                                      learner, seed, digest, reinit)
        reports.append(report)
        print(f"way {way}: {report.display}")
    (out_dir / "eval_report.json").write_text(
        json.dumps({"reports": [r.to_dict() for r in reports]},
                   indent=1, sort_keys=True) + "\n", encoding="utf-8")
    _write_csv(out_dir / "eval_report.csv",
               [r.to_dict() for r in reports],
               ["way", "shot", "episodes", "mean_acc", "ci95", "learner", "seed",
                "config_digest"])
    _sidecar(out_dir, "evaluate", cfg)
    return EXIT_OK


def cmd_gradcheck(cfg: dict, out: str | None, sabotage: str | None = None) -> int:
    results = gradcheck.run_all(seed=cfg["run.seed"], sabotage=sabotage)
    width = max(len(r.name) for r in results)
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max_rel_err={r.max_rel_err:.3e}  "
              f"tol={r.tol:.0e}  {status}")
    if out:
        out_dir = _prepare_out(out)
        payload = [{"name": r.name, "max_rel_err": r.max_rel_err, "tol": r.tol,
                    "passed": r.passed} for r in results]
        (out_dir / "gradcheck.json").write_text(
            json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        _sidecar(out_dir, "gradcheck", cfg)
    if failed:
        print(f"gradcheck: {len(failed)} failing op(s): "
              f"{', '.join(r.name for r in failed)}", file=sys.stderr)
        return EXIT_VERIFY
    print(f"gradcheck: all {len(results)} checks passed")
    return EXIT_OK


_COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "metatrain": cmd_metatrain,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="muvfs")
    parser.add_argument("command", choices=list(_COMMANDS) + ["gradcheck"])
    parser.add_argument("--config", default=None, help="path to a run config file")
    parser.add_argument("--seed", type=int, default=None, help="override run.seed")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--sabotage", default=None, help=argparse.SUPPRESS)
    args = parser.parse_args(argv)
    try:
        cfg = cfgmod.load_config(args.config) if args.config else cfgmod.default_config()
        if args.seed is not None:
            cfg["run.seed"] = args.seed
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args.out, args.sabotage)
        return _COMMANDS[args.command](cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, synthvid.DatasetError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (contrastive.TrainingError, metalearn.MetaError, mining.MiningError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
