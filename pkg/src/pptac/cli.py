"""Command-line entry point for the full pipeline.

Subcommands: calibrate, render, synth, train, simulate, evaluate, check.
Every run writes a manifest with its config hash; artifacts embed the
same hash so downstream stages can refuse mismatched inputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import config as cfg
from . import contact
from . import kinematics as kin
from . import policy as pol
from . import report
from . import sensor as sn
from . import simulator as sim
from . import state
from . import synthesis as sy
from . import terrain as tr


def _base_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pptac",
        description="Tactile-feedback grasping pipeline for thin sheets")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file with per-module blocks")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help=f"output directory (default ${cfg.ENV_DATA_DIR})")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--preset", choices=("desk", "paper"), default="desk")

    p = sub.add_parser("calibrate", help="synthesize captures and calibrate a sensor")
    common(p)

    p = sub.add_parser("render", help="render synthetic tactile captures")
    common(p)
    p.add_argument("--presses", type=int, default=3)

    p = sub.add_parser("synth", help="synthesize the grasp-motion dataset")
    common(p)
    p.add_argument("--n", type=int, default=10, help="accepted episodes to produce")
    p.add_argument("--binary", action="store_true", help="packed binary dataset")

    p = sub.add_parser("train", help="train the diffusion policy")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("simulate", help="run one closed-loop grasp episode")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--terrain", default="plane", choices=tr.PRESET_NAMES)
    p.add_argument("--layers", type=int, default=1)

    p = sub.add_parser("evaluate", help="run the terrain x sheet experiment matrix")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", help="verify the model was trained on this dataset")
    p.add_argument("--episodes", type=int, default=20, help="seeds per cell")
    p.add_argument("--force", action="store_true",
                   help="run even if dataset/model hashes mismatch")

    p = sub.add_parser("check", help="run the invariant battery")
    common(p)
    return parser


def _load_blocks(args) -> dict:
    return cfg.load_config_file(args.config) if args.config else {}


def _hash_for(args, blocks: dict, keys: tuple) -> str:
    payload = {k: getattr(args, k, None) for k in keys}
    payload["blocks"] = blocks
    payload["preset"] = args.preset
    return cfg.config_hash(payload)


# -- subcommands -----------------------------------------------------------------


def cmd_calibrate(args) -> int:
    blocks = _load_blocks(args)
    out = cfg.data_dir(args.out)
    model = sn.CameraModel.default()
    dataset, images = sn.synthesize_calibration_captures(model)
    solved = sn.solve_extrinsics(dataset, model.intrinsics)
    projection = sn.build_reference_projection(solved)
    mapping = sn.calibrate_depth_mapping(dataset.ball_image, dataset.ball_radius,
                                         solved, projection)
    solved.depth_mapping = mapping
    chash = _hash_for(args, blocks, ("seed",))
    solved.save(out / "camera.json", config_hash=chash)
    sn.write_pgm(out / "reference.pgm", images["reference"])
    sn.write_pgm(out / "ball.pgm", images["ball"])
    err = sn.reprojection_error(solved, dataset)
    cfg.write_manifest(out, "calibrate", chash, args.seed,
                       {"reprojection_px": err, "captures": dataset.n_captures})
    print(f"calibrated from {dataset.n_captures} captures; "
          f"mean reprojection {err:.3f} px -> {out / 'camera.json'}")
    return 0


def cmd_render(args) -> int:
    blocks = _load_blocks(args)
    out = cfg.data_dir(args.out)
    rng = np.random.default_rng(args.seed)
    model = sn.CameraModel.default()
    projection = sn.build_reference_projection(model)
    sn.write_pgm(out / "reference.pgm", sn.reference_image(model))
    chash = _hash_for(args, blocks, ("seed", "presses"))
    for i in range(args.presses):
        direction = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 1.0])
        press = sn.PressSpec(direction, rng.uniform(4e-4, 1.8e-3),
                             rng.uniform(0.002, 0.005))
        image, truth = sn.render_tactile(model, projection, [press], return_truth=True)
        sn.write_pgm(out / f"press_{i:02d}.pgm", image)
        sn.write_depth_map(out / f"press_{i:02d}.depth", truth)
    cfg.write_manifest(out, "render", chash, args.seed, {"presses": args.presses})
    print(f"rendered {args.presses} captures -> {out}")
    return 0


def cmd_synth(args) -> int:
    blocks = _load_blocks(args)
    out = cfg.data_dir(args.out)
    config = sy.SynthesisConfig(n_samples=args.n, seed=args.seed, threads=args.threads)
    cfg.apply_overrides(config, blocks.get("synthesis", {}), "synthesis")
    chash = _hash_for(args, blocks, ("seed", "n", "binary"))
    name = "dataset.bin" if args.binary else "dataset.ndjson"
    stats = sy.synthesize_dataset(config, out / name, binary=args.binary,
                                  config_hash=chash)
    cfg.write_manifest(out, "synth", chash, args.seed, stats)
    print(f"accepted {stats['accepted']}/{stats['attempted']} episodes -> {out / name}")
    print(f"dataset sha256 {sy.file_digest(out / name)}")
    return 0


def cmd_train(args) -> int:
    blocks = _load_blocks(args)
    out = cfg.data_dir(args.out)
    frames, depths, meta = sy.load_dataset(args.dataset)
    config = pol.DiffusionConfig.paper() if args.preset == "paper" \
        else pol.DiffusionConfig.desk()
    config.seed = args.seed
    if args.steps is not None:
        config.train_steps = args.steps
    cfg.apply_overrides(config, blocks.get("policy", {}), "policy")
    chash = _hash_for(args, blocks, ("seed", "steps"))
    model, history = pol.train(frames, depths, config,
                               out_dir=out,
                               dataset_hash=sy.file_digest(args.dataset),
                               config_hash=chash)
    report.render_training_curve(out / "training_curve.svg", history)
    cfg.write_manifest(out, "train", chash, args.seed,
                       {"final_loss": history["loss"][-1],
                        "steps": config.train_steps})
    print(f"trained {config.train_steps} steps; final loss {history['loss'][-1]:.4e} "
          f"-> {out / 'model.ptck'}")
    return 0


def cmd_simulate(args) -> int:
    blocks = _load_blocks(args)
    out = cfg.data_dir(args.out)
    model = kin.HandModel.load()
    policy = _load_policy(args.model)
    sheet = sim.SheetModel(layers=args.layers)
    sim_config = sim.SimConfig(seed=args.seed)
    cfg.apply_overrides(sim_config, blocks.get("simulator", {}), "simulator")
    terrain = tr.Terrain.preset_field(args.terrain, seed=args.seed)
    chash = _hash_for(args, blocks, ("seed", "terrain", "layers"))

    claw = sy.grasp_reference_pose(model)
    rng = np.random.default_rng(args.seed)
    wrist = contact.hover_start(model, terrain, claw.q[0], rng)
    contact_state = contact.establish_contact(model, terrain, claw.q[0], wrist)
    contact.write_event_log(out / "contact_events.csv", contact_state)

    result = sim.run_episode(model, policy, terrain, sheet, sim_config, seed=args.seed)
    payload = {
        "terrain": args.terrain,
        "layers": args.layers,
        "seed": args.seed,
        "success": result.success,
        "slip_count": result.slip_count,
        "frames": result.frames,
        "failure": result.failure,
        "config_hash": chash,
    }
    (out / "episode.json").write_text(json.dumps(payload, indent=2))
    cfg.write_manifest(out, "simulate", chash, args.seed, payload)
    print(f"episode: success={result.success} slips={result.slip_count} "
          f"frames={result.frames} failure={result.failure}")
    return 0


def _load_policy(path) -> pol.DiffusionModel:
    if not Path(path).exists():
        print(f"error: model checkpoint not found: {path}", file=sys.stderr)
        raise SystemExit(2)
    return pol.DiffusionModel.load(path)


def cmd_evaluate(args) -> int:
    blocks = _load_blocks(args)
    out = cfg.data_dir(args.out)
    policy = _load_policy(args.model)
    if args.dataset:
        digest = sy.file_digest(args.dataset)
        trained_on = policy.meta.get("dataset_hash", "")
        if trained_on and digest != trained_on and not args.force:
            print("error: model was trained on a different dataset "
                  f"({trained_on[:12]} != {digest[:12]}); use --force to override",
                  file=sys.stderr)
            return 2
    model = kin.HandModel.load()
    sim_config = sim.SimConfig(seed=args.seed)
    cfg.apply_overrides(sim_config, blocks.get("simulator", {}), "simulator")
    chash = _hash_for(args, blocks, ("seed", "episodes"))

    rows = sim.evaluate(model, policy, sim_config, seeds=args.episodes)
    report.write_report_csv(out / "report.csv", rows, config_hash=chash)
    report.render_success_chart(out / "report.svg", rows)
    sweep = sim.stiffness_sweep(model, policy, sim_config, seeds=args.episodes)
    report.render_stiffness_chart(out / "stiffness.svg", sweep)
    (out / "stiffness.json").write_text(json.dumps(sweep, indent=2))
    cfg.write_manifest(out, "evaluate", chash, args.seed,
                       {"cells": len(rows), "sweep": sweep})
    print(f"evaluated {len(rows)} episodes -> {out / 'report.csv'}")
    for row in sweep:
        print(f"  layers={row['layers']}: success {row['success_rate']:.0%}, "
              f"mean slips {row['mean_slips']:.1f}")
    return 0


# -- invariant battery ----------------------------------------------------------------


def cmd_check(args) -> int:
    """Fast invariant battery; prints one line per check, exit 1 on failure."""
    import tempfile

    from . import autodiff as ad
    from . import checkpoint

    failures = 0

    def check(name, fn):
        nonlocal failures
        try:
            fn()
            print(f"PASS {name}")
        except Exception as exc:
            failures += 1
            print(f"FAIL {name}: {exc}")

    def state_layout():
        state.assert_layout()
        assert state.STATE_DIM == 152

    def autodiff_gradients():
        rng = np.random.default_rng(0)
        for _ in range(3):
            w = ad.parameter(rng.normal(size=(6, 6)))
            x = ad.tensor(rng.normal(size=(6, 6)))
            y = ad.tensor(rng.normal(size=(6, 6)))
            loss = ad.mse(ad.tanh(ad.matmul(w, x)), y)
            ad.backward(loss)
            fd = ad.finite_difference_gradient(
                lambda t: ad.mse(ad.tanh(ad.matmul(t, x)), y), [w])[0]
            scale = max(np.abs(fd).max(), 1e-9)
            assert np.abs(w.grad - fd).max() / scale < 1e-4

    def fk_jacobian():
        model = kin.HandModel.load()
        rng = np.random.default_rng(1)
        for _ in range(3):
            frame = np.concatenate([
                rng.uniform(-0.3, 0.8, 16), kin.IDENTITY_ROT6 + 0.1 * rng.normal(size=6),
                [rng.uniform(0.1, 0.2)]])
            assert kin.jacobian_check(model, frame) < 1e-4

    def rotation_norm():
        rng = np.random.default_rng(2)
        from .autodiff import Tensor
        r = kin.rot6_to_matrix(Tensor(rng.normal(size=(20, 6)))).data
        assert max(np.abs(m.T @ m - np.eye(3)).max() for m in r) < 1e-10

    def schedule():
        s = pol.NoiseSchedule(pol.DiffusionConfig())
        assert s.alpha_bar[0] == 1.0 and (np.diff(s.alpha_bar) < 0).all()

    def slip_boundary():
        slips, prob = sn.slip_oracle(0.8, 1.0, 0.8)
        assert not slips and abs(prob - 0.75) < 1e-9
        assert sn.contact_force(0.002, 100.0) == 2 * sn.contact_force(0.001, 100.0)

    def terrain_checks():
        a = tr.Terrain.generate(3)
        b = tr.Terrain.generate(3)
        assert np.array_equal(a.control_heights, b.control_heights)
        assert np.allclose(a.heights_at(tr.CONTROL_S), a.control_heights)

    def rodrigues_identity():
        assert np.allclose(contact.rodrigues([0, 0, 1], 0.0), np.eye(3))
        r = contact.rodrigues([0, 0, 1], np.pi / 2)
        assert np.allclose(r @ [1, 0, 0], [0, 1, 0], atol=1e-12)

    def checkpoint_round_trip():
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "t.ptck"
            arr = {"a": np.arange(6.0).reshape(2, 3)}
            checkpoint.save(path, arr, meta={"k": 1})
            back, meta = checkpoint.load(path)
            assert meta == {"k": 1} and np.array_equal(back["a"], arr["a"])

    def buckle_geometry():
        height, theta = sim.buckle_arc(0.07, 0.08)
        assert height > 0
        assert abs(sim.arc_length_of(0.07, theta) - 0.08) < 1e-6

    check("state-layout-152", state_layout)
    check("autodiff-finite-difference", autodiff_gradients)
    check("fk-jacobian", fk_jacobian)
    check("rotation-orthonormal", rotation_norm)
    check("noise-schedule", schedule)
    check("slip-and-force-model", slip_boundary)
    check("terrain-determinism", terrain_checks)
    check("rodrigues", rodrigues_identity)
    check("checkpoint-round-trip", checkpoint_round_trip)
    check("buckle-arc-conservation", buckle_geometry)

    print(f"{10 - failures}/10 checks passed")
    return 1 if failures else 0


COMMANDS = {
    "calibrate": cmd_calibrate,
    "render": cmd_render,
    "synth": cmd_synth,
    "train": cmd_train,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "check": cmd_check,
}


def main(argv=None) -> int:
    args = _base_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except cfg.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
