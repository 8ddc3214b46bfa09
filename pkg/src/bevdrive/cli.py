"""Operator entry point: train / eval / seg-train / export-masks / gradcheck / bench.

Exit codes: 0 success, 1 gradcheck failure or unexpected error, 2 invalid
configuration, 3 training aborted on non-finite values, 4 checkpoint format
version mismatch.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import bev as bev_mod
from . import checkpoint as ckpt_mod
from . import config as config_mod
from . import evaluation, geometry, policy, segdecoder
from .errors import BevDriveError, ConfigError, TrainingError
from .simworld import Action, DrivingWorld

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_NAN = 3
EXIT_VERSION = 4


def _load_config(path, seed_override=None) -> config_mod.RunConfig:
    cfg = config_mod.load_config(path)
    if seed_override is not None:
        cfg.run.seed = int(seed_override)
    return cfg


def build_rig(cfg: config_mod.RunConfig, rig_kind: str) -> geometry.CameraRig:
    return geometry.CameraRig.build(
        rig_kind, cfg.sim.image_width, cfg.sim.image_height,
        mount_height=cfg.sim.camera_height, pitch_deg=cfg.sim.camera_pitch_deg)


def build_net(cfg: config_mod.RunConfig, agent_name: str, seed: int) -> policy.PolicyNet:
    if agent_name not in config_mod.AGENTS:
        raise ConfigError(f"unknown agent {agent_name!r}; choose from {sorted(config_mod.AGENTS)}")
    rig_kind, extractor = config_mod.AGENTS[agent_name]
    rig = build_rig(cfg, rig_kind)
    return policy.PolicyNet(extractor, cfg.bev.bev_config(), rig, seed=seed)


def make_env_factory(cfg: config_mod.RunConfig, agent_name: str):
    rig_kind, _ = config_mod.AGENTS[agent_name]
    sim_params = cfg.sim.sim_params(rig_kind=rig_kind)
    return lambda: DrivingWorld(sim_params)


def _meta_block(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def _meta_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")


def policy_checkpoint_writer(config_hash: bytes, agent_name: str):
    def write(path, store: ad.ParamStore, env_steps: int, updates: int):
        arrays = store.state_arrays()
        arrays["meta/agent"] = _meta_block(agent_name)
        arrays["meta/env_steps"] = np.asarray(env_steps, np.int64)
        arrays["meta/updates"] = np.asarray(updates, np.int64)
        ckpt_mod.save_checkpoint(path, arrays, config_hash)
    return write


def load_policy_checkpoint(path, cfg: config_mod.RunConfig, expected_hash=None):
    arrays, chash = ckpt_mod.load_checkpoint(path, expected_config_hash=expected_hash)
    agent_name = _meta_text(arrays.pop("meta/agent"))
    env_steps = int(arrays.pop("meta/env_steps"))
    updates = int(arrays.pop("meta/updates"))
    net = build_net(cfg, agent_name, seed=cfg.run.seed)
    net.store.load_state_arrays(arrays)
    return net, agent_name, env_steps, updates, chash


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.seed)
    agent_name = args.agent
    if agent_name not in config_mod.AGENTS:
        raise ConfigError(f"unknown agent {agent_name!r}")
    seed = cfg.run.seed
    run_dir = Path(args.run_dir) if args.run_dir else \
        Path(cfg.run.output_dir) / f"train_{agent_name}_seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    config_mod.save_config(cfg, run_dir / "config.yaml")
    chash = config_mod.config_hash(cfg)

    start_steps = start_updates = 0
    net = build_net(cfg, agent_name, seed=seed)
    if args.resume:
        loaded, resumed_agent, start_steps, start_updates, _ = \
            load_policy_checkpoint(args.resume, cfg, expected_hash=chash)
        if resumed_agent != agent_name:
            raise ConfigError(f"checkpoint holds agent {resumed_agent!r}, not {agent_name!r}")
        net = loaded

    env_factory = make_env_factory(cfg, agent_name)
    writer = policy_checkpoint_writer(chash, agent_name)

    def log_hook(record):
        print(f"update {record['update']:>5}  steps {record['env_steps']:>8}  "
              f"return {record['mean_return']:>9.2f}  kl {record['kl']:.4f}", flush=True)

    result = policy.train(
        env_factory, net, cfg.ppo.ppo_config(), run_dir,
        map_id=cfg.sim.map_id, congestion=cfg.sim.congestion,
        workers=cfg.run.workers, seed=seed, checkpoint_writer=writer,
        start_steps=start_steps, start_updates=start_updates,
        log_hook=log_hook if args.verbose else None)
    print(f"trained {result.env_steps} env steps -> {result.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args.config, args.seed)
    net, agent_name, _steps, _updates, _ = load_policy_checkpoint(args.checkpoint, cfg)
    maps = [int(m) for m in args.maps.split(",")] if args.maps else list(cfg.eval.maps)
    congestions = args.congestion.split(",") if args.congestion else list(cfg.eval.congestion)
    episodes = args.episodes or cfg.eval.episodes
    scenarios = [evaluation.ScenarioSpec(map_id=m, congestion=c, episodes=episodes,
                                         seed_base=cfg.eval.seed_base)
                 for m in maps for c in congestions]
    agents = {agent_name: evaluation.PolicyAgent(net)}
    records = evaluation.evaluate(agents, scenarios, make_env_factory(cfg, agent_name))
    csv_text = evaluation.to_csv(records)
    out = Path(args.out)
    out.write_text(csv_text)
    for rec in records:
        if rec.map_id == "avg":
            print(f"{rec.agent} [{rec.congestion}] avg: collision {rec.collision_rate:.3f}  "
                  f"similarity {rec.similarity:.3f}  timesteps {rec.timesteps:.2f}  "
                  f"waypoint_dist {rec.waypoint_distance:.2f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_seg_train(args) -> int:
    cfg = _load_config(args.config, args.seed)
    store = ad.ParamStore()
    rig = build_rig(cfg, "surround6x60")
    block = bev_mod.SCBlock(cfg.bev.bev_config(), rig, store, prefix="bev",
                            rng=np.random.default_rng([cfg.run.seed, 0]))
    if args.checkpoint:
        arrays, _ = ckpt_mod.load_checkpoint(args.checkpoint)
        bev_params = {k: v for k, v in arrays.items()
                      if k.startswith("param/bev/")}
        store.load_state_arrays(bev_params)
    decoder = segdecoder.SegDecoder(cfg.bev.context_channels, store,
                                    rng=np.random.default_rng([cfg.run.seed, 9]))
    env = DrivingWorld(cfg.sim.sim_params(rig_kind="surround6x60"))
    samples = segdecoder.collect_dataset(
        env, cfg.bev.bev_config().grid_spec(), cfg.seg.frames, seed=cfg.run.seed,
        map_ids=[cfg.sim.map_id], congestion=cfg.sim.congestion,
        frame_stride=cfg.seg.frame_stride)
    report = segdecoder.train_decoder(
        samples, decoder, block, frozen_extractor=(args.mode == "frozen"),
        epochs=cfg.seg.epochs, learning_rate=cfg.seg.learning_rate,
        batch_size=cfg.seg.batch_size, val_fraction=cfg.seg.val_fraction,
        seed=cfg.run.seed)
    arrays = store.state_arrays()
    arrays["meta/agent"] = _meta_block(f"seg-{args.mode}")
    arrays["meta/env_steps"] = np.asarray(0, np.int64)
    arrays["meta/updates"] = np.asarray(0, np.int64)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt_mod.save_checkpoint(out, arrays, config_mod.config_hash(cfg))
    summary = {"mode": args.mode, "train_losses": report.train_losses,
               "val_losses": report.val_losses, "vehicle_iou": report.vehicle_iou,
               "road_iou": report.road_iou, "background_iou": report.background_iou}
    out.with_suffix(".json").write_text(json.dumps(summary, indent=2))
    print(f"seg {args.mode}: val loss {report.val_losses[-1]:.4f}, "
          f"vehicle IoU {report.vehicle_iou:.3f} -> {out}")
    return EXIT_OK


def cmd_export_masks(args) -> int:
    cfg = _load_config(args.config, args.seed)
    net, agent_name, _s, _u, _ = load_policy_checkpoint(args.checkpoint, cfg)
    seg_arrays, _ = ckpt_mod.load_checkpoint(args.seg_checkpoint)
    store = ad.ParamStore()
    rig = build_rig(cfg, "surround6x60")
    block = bev_mod.SCBlock(cfg.bev.bev_config(), rig, store, prefix="bev",
                            rng=np.random.default_rng(0))
    decoder = segdecoder.SegDecoder(cfg.bev.context_channels, store,
                                    rng=np.random.default_rng(1))
    store.load_state_arrays({k: v for k, v in seg_arrays.items() if k.startswith("param/")})

    env = DrivingWorld(cfg.sim.sim_params(rig_kind="surround6x60"))
    grid_spec = cfg.bev.bev_config().grid_spec()
    rng = np.random.default_rng([cfg.run.seed, 31])
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    agent = evaluation.PolicyAgent(net) if agent_name in config_mod.AGENTS \
        else evaluation.RandomAgent(cfg.run.seed)
    manifest = []
    frame = 0
    episode = 0
    while frame < args.frames:
        agent.reset()
        obs = env.reset(cfg.run.seed + 7000 + episode, cfg.sim.map_id, cfg.sim.congestion)
        episode += 1
        snap_at = sorted(rng.integers(1, 120, size=4).tolist())
        step = 0
        while not env.done and frame < args.frames:
            obs, _r, _d, _i = env.step(agent.act(obs))
            step += 1
            if step in snap_at:
                gt = env.ground_truth_bev_mask(grid_spec)
                _latent, grid = block.forward_batch(ad.Tensor(obs.images[None]))
                pred = np.argmax(decoder.forward(grid).data[0], axis=0).astype(np.uint8)
                path = out_dir / f"mask_{frame:03d}.ppm"
                segdecoder.export_mask_image(pred, gt, path)
                manifest.append({"file": path.name, "episode": episode - 1, "step": step,
                                 "vehicle_iou": segdecoder.iou(pred, gt, 2)})
                frame += 1
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {frame} mask pairs to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck suite
# ---------------------------------------------------------------------------

def _tiny_sc_block():
    cfg = bev_mod.BevConfig(num_depth_bins=2, depth_near=2.0, depth_far=8.0,
                            x_extent=16.0, y_extent=16.0, cell_size=1.0,
                            context_channels=3, latent_dim=4)
    intr = geometry.CameraIntrinsics.from_fov(16, 16, 60.0)
    cams = tuple((intr, geometry.camera_pose(yaw, 10.0, np.array([0.0, 0.0, 1.6])))
                 for yaw in (0.0, 180.0))
    rig = geometry.CameraRig(cameras=cams, rig_kind=geometry.RigKind.FRONT_3X60)
    store = ad.ParamStore()
    return bev_mod.SCBlock(cfg, rig, store, rng=np.random.default_rng(11), dtype=np.float64)


def gradcheck_suite():
    """(name, fn, shapes, seed) for every differentiable op plus the tiny
    end-to-end SC block."""
    idx = np.array([0, 2, 2, 5, -1, 3, 0])
    onehot = np.zeros((4, 3, 2)); onehot[np.arange(4), [0, 2, 1, 0], :] = 1.0
    gru_shapes = [(3, 5), (3, 4)] + [(5, 4), (4, 4), (4,)] * 3

    def gru_fn(x, h, wz, uz, bz, wr, ur, br, wn, un, bn):
        return ad.gru_cell(x, h, ad.GruParams(wz, uz, bz, wr, ur, br, wn, un, bn))

    block = _tiny_sc_block()

    suite = [
        ("add", lambda a, b: ad.add(a, b), [(3, 4), (4,)], 1),
        ("sub", lambda a, b: ad.sub(a, b), [(3, 4), (3, 4)], 2),
        ("mul", lambda a, b: ad.mul(a, b), [(3, 4), (3, 1)], 3),
        ("neg", ad.neg, [(5,)], 4),
        ("exp", ad.exp, [(3, 3)], 5),
        ("relu", ad.relu, [(4, 4)], 6),
        ("tanh", ad.tanh, [(4, 4)], 7),
        ("sigmoid", ad.sigmoid, [(4, 4)], 8),
        ("softmax", lambda a: ad.softmax(a, axis=1), [(3, 5)], 9),
        ("minimum", lambda a, b: ad.minimum(a, b), [(4, 4), (4, 4)], 10),
        ("clip", lambda a: ad.clip(a, -0.5, 0.5), [(4, 4)], 11),
        ("reshape", lambda a: ad.reshape(a, (2, 6)), [(3, 4)], 12),
        ("transpose", lambda a: ad.transpose(a, (1, 0, 2)), [(2, 3, 4)], 13),
        ("concat", lambda a, b: ad.concat([a, b], axis=1), [(2, 3), (2, 2)], 14),
        ("sum", lambda a: ad.tsum(a, axis=1), [(3, 4)], 15),
        ("mean", lambda a: ad.tmean(a, axis=0), [(3, 4)], 16),
        ("matmul", lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)], 17),
        ("dense", lambda x, w, b: ad.dense(x, w, b), [(4, 4), (4, 3), (3,)], 18),
        ("conv2d", lambda x, k, b: ad.conv2d(x, k, b, stride=1, pad=1),
         [(1, 4, 6, 6), (8, 4, 3, 3), (8,)], 19),
        ("conv2d_strided", lambda x, k, b: ad.conv2d(x, k, b, stride=2, pad=1),
         [(2, 3, 6, 6), (4, 3, 3, 3), (4,)], 20),
        ("scatter_add", lambda v: ad.scatter_add(v, idx, 6), [(7, 3)], 21),
        ("scatter_add_sorted", lambda v: ad.scatter_add(v, idx, 6, sorted_accumulation=True),
         [(7, 3)], 22),
        ("gather_rows", lambda v: ad.gather_rows(v, np.array([2, 0, 1, 1])), [(3, 4)], 23),
        ("upsample2x", ad.upsample2x, [(1, 2, 3, 3)], 24),
        ("cross_entropy_logits", lambda lg: ad.cross_entropy_logits(lg, onehot, axis=1),
         [(4, 3, 2)], 25),
        ("gaussian_log_prob", lambda x, m, s: ad.gaussian_log_prob(x, m, s),
         [(4, 2), (4, 2), (4, 2)], 26),
        ("gru_cell", gru_fn, gru_shapes, 27),
        ("sc_block_end_to_end",
         lambda img: block.forward_batch(ad.reshape(img, (1, 2, 3, 16, 16)))[0],
         [(2 * 3 * 16 * 16,)], 28),
    ]
    return suite


def run_gradcheck(tol: float = 1e-5, report_fn=print) -> bool:
    ok = True
    for name, fn, shapes, seed in gradcheck_suite():
        rep = ad.gradcheck(fn, shapes, seed=seed)
        status = "PASS" if rep.max_rel_err < tol else "FAIL"
        ok &= status == "PASS"
        report_fn(f"{status}  {name:<24} max rel err {rep.max_rel_err:.3e}")
    return ok


def cmd_gradcheck(args) -> int:
    t0 = time.time()
    ok = run_gradcheck()
    print(f"gradcheck {'passed' if ok else 'FAILED'} in {time.time() - t0:.1f}s")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else [10000, 20000, 40000, 80000]
    reps = args.reps
    rng = np.random.default_rng(0)
    lines = ["name,size,median_seconds,throughput_per_second"]
    cells = 6400
    for n in sizes:
        vals = rng.standard_normal((n, 32)).astype(np.float32)
        idx = rng.integers(0, cells, n)
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            ad.scatter_add(ad.Tensor(vals), idx, cells)
            times.append(time.perf_counter() - t0)
        med = float(np.median(times))
        lines.append(f"splat_scatter_add,{n},{med:.6f},{n / med:.0f}")
    cfg = bev_mod.BevConfig()
    rig = geometry.CameraRig.build("surround6x60", 176, 64)
    store = ad.ParamStore()
    block = bev_mod.SCBlock(cfg, rig, store, rng=rng)
    for batch in (1, 4):
        images = ad.Tensor(rng.standard_normal((batch, 6, 3, 64, 176)).astype(np.float32))
        block.forward_batch(images)
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            block.forward_batch(images)
            times.append(time.perf_counter() - t0)
        med = float(np.median(times))
        lines.append(f"sc_block_forward,{batch},{med:.6f},{batch / med:.2f}")
    output = "\n".join(lines) + "\n"
    print(output, end="")
    if args.out:
        Path(args.out).write_text(output)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bevdrive",
                                     description="BEV-based deep-RL driving stack")
    parser.add_argument("--seed", type=int, default=None, help="override run.seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an agent with PPO")
    p.add_argument("--config", required=True)
    p.add_argument("--agent", required=True, choices=sorted(config_mod.AGENTS))
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--run-dir", default=None)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint over scenarios")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--maps", default=None, help="comma list, e.g. 1,3,5")
    p.add_argument("--congestion", default=None, help="comma list of low,high")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--out", default="metrics.csv")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("seg-train", help="train the segmentation decoder")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", default=None, help="policy checkpoint for the extractor")
    p.add_argument("--mode", choices=("frozen", "finetune"), default="finetune")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_seg_train)

    p = sub.add_parser("export-masks", help="export gt/prediction mask pixmaps")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seg-checkpoint", required=True)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_export_masks)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="scatter-add and SC block timings")
    p.add_argument("--sizes", default=None, help="comma list of point counts")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ckpt_mod.CheckpointVersionError as exc:
        print(f"checkpoint version error: {exc}", file=sys.stderr)
        return EXIT_VERSION
    except TrainingError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_NAN
    except BevDriveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
