"""Command-line entry point: every stage of the pipeline plus evaluation and tools.

Exit codes: 0 success, 2 config error, 3 IO error, 4 numerical failure,
5 every candidate rejected. Failures print one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .errors import (AllCandidatesRejected, ConfigError, DegenerateMesh, EmptyCandidate, EmptyConstraint,
                     IncompatibleLattice, IsoOutOfRange, LengthMismatch, NonFiniteLoss, NonWatertight,
                     ParseError, RetargetError, SchemaVersionMismatch, TrackTooShort)

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_REJECTED = 2, 3, 4, 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message, "argv")


def _common(p):
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--seed", type=int, help="seed for every random choice (overrides the config)")
    p.add_argument("--jobs", type=int, help="parallel workers (default: available cores)")


def build_parser():
    ap = _Parser(prog="collab-retarget", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sdf = sub.add_parser("sdf", help="signed distance grids").add_subparsers(dest="action", required=True,
                                                                           parser_class=_Parser)
    p = sdf.add_parser("build", help="SDF grid of a watertight OBJ mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--resolution", type=int)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("morph", help="intermediate shapes between two meshes")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--out", required=True, help="directory: morph.npz plus one OBJ per shape")
    _common(p)

    con = sub.add_parser("contacts", help="contact candidates").add_subparsers(dest="action", required=True,
                                                                              parser_class=_Parser)
    p = con.add_parser("extract", help="candidate pool from source motions on the source mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--motion", required=True, nargs="+")
    p.add_argument("--out", required=True)
    _common(p)
    p = con.add_parser("transfer", help="carry one candidate through a morph sequence")
    p.add_argument("--morph", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    _common(p)

    ret = sub.add_parser("retarget", help="retargeting stages").add_subparsers(dest="action", required=True,
                                                                              parser_class=_Parser)
    p = ret.add_parser("object", help="object track for a target shape")
    p.add_argument("--motion", required=True)
    p.add_argument("--target", help="target OBJ (its SDF is built at the configured resolution)")
    p.add_argument("--morph", help="morph archive; its final grid and target mesh are used")
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="loss trace CSV")
    _common(p)
    p = ret.add_parser("human", help="agent poses for a target track and contact constraint")
    p.add_argument("--motion", required=True)
    p.add_argument("--track", required=True)
    p.add_argument("--constraint", required=True)
    p.add_argument("--mesh", required=True, help="source mesh, for the contact frames")
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="loss trace CSV")
    _common(p)

    disc = sub.add_parser("disc", help="pose ranking discriminator").add_subparsers(dest="action", required=True,
                                                                                  parser_class=_Parser)
    p = disc.add_parser("gen-pairs", help="training pairs")
    p.add_argument("--mesh", required=True)
    p.add_argument("--motion", nargs="*", default=[], help="pose bank; toy scenes when omitted")
    p.add_argument("--count", type=int)
    p.add_argument("--mode", choices=("synthetic", "retarget"), default="synthetic")
    p.add_argument("--out", required=True)
    _common(p)
    p = disc.add_parser("train", help="train a ranker on generated pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--holdout", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="training loss CSV")
    _common(p)
    p = disc.add_parser("score", help="score motions")
    p.add_argument("--model", required=True)
    p.add_argument("--motion", required=True, nargs="+")
    p.add_argument("--out")
    _common(p)

    p = sub.add_parser("select", help="beam search over contact candidates for one source and target")
    p.add_argument("--source-mesh", required=True)
    p.add_argument("--morph", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--motion", required=True)
    p.add_argument("--track", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--source-id", help="defaults to the motion file stem")
    p.add_argument("--target-id", help="defaults to the target mesh stem recorded in the morph archive name")
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("pipeline", help="end-to-end retargeting of sources onto targets")
    p.add_argument("--source-mesh")
    p.add_argument("--target", nargs="+")
    p.add_argument("--motion", nargs="*")
    p.add_argument("--model")
    p.add_argument("--out")
    _common(p)

    p = sub.add_parser("metrics", help="evaluate a motion against a reference")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--gt-mesh")
    p.add_argument("--out", help="report JSON; a CSV is written next to it")
    _common(p)

    p = sub.add_parser("humanoid", help="retarget one agent onto the humanoid chain")
    p.add_argument("--motion", required=True)
    p.add_argument("--agent", type=int, choices=(0, 1), default=0)
    p.add_argument("--chain")
    p.add_argument("--pairs")
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("toy-scene", help="scripted two-agent interaction with a box")
    p.add_argument("--kind", choices=("carry", "handover"), required=True)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("fixtures", help="regenerate the bundled fixtures")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    _common(p)
    return ap


# ---------------------------------------------------------------- helpers


def _stem(path):
    name = Path(path).name
    for ext in (".m4d.json", ".json", ".obj", ".npz"):
        if name.endswith(ext):
            return name[: -len(ext)]
    return Path(path).stem


def _settings(args):
    cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("must be >= 0", "--seed")
        cfg.seed = args.seed
    if args.jobs is not None:
        if args.jobs < 1:
            raise ConfigError("must be >= 1", "--jobs")
        cfg.jobs = args.jobs
    elif not args.config:
        cfg.jobs = os.cpu_count() or 1
    return cfg


def _write_json(obj, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh)


def _read_json(path):
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: invalid JSON: {e.msg}", line=e.lineno) from None


def _track_to_dict(track):
    return {"rotations": track.rotations.tolist(), "translations": track.translations.tolist()}


def _read_track(path):
    from .motion import ObjectTrack
    d = _read_json(path)
    try:
        return ObjectTrack(np.array(d["rotations"], dtype=float), np.array(d["translations"], dtype=float))
    except (KeyError, ValueError) as e:
        raise ParseError(f"bad object track: {e}", field="rotations") from None


def _read_pool(path):
    from .morph import ContactCandidate
    d = _read_json(path)
    if not isinstance(d, dict) or "candidates" not in d:
        raise ParseError("pool file needs a 'candidates' list", field="candidates")
    return [ContactCandidate.from_dict(c) for c in d["candidates"]]


# ---------------------------------------------------------------- commands


def cmd_sdf_build(args, cfg):
    from .geometry import compute_sdf, read_obj, write_sdf
    grid = compute_sdf(read_obj(args.mesh), padding=cfg.padding, resolution=args.resolution or cfg.resolution)
    write_sdf(grid, args.out)
    return {"dims": list(grid.dims), "spacing": grid.spacing}


def cmd_morph(args, cfg):
    from .geometry import read_obj, write_obj
    from .morph import build_morph_sequence, save_morph
    steps = cfg.morph_steps if args.steps is None else args.steps
    ms = build_morph_sequence(read_obj(args.source), read_obj(args.target), steps,
                              args.resolution or cfg.resolution, padding=cfg.padding)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_morph(ms, out / "morph.npz")
    for k, m in enumerate(ms.meshes):
        write_obj(m, out / f"shape_{k:02d}.obj")
    return {"shapes": len(ms.meshes), "weights": ms.weights}


def cmd_contacts_extract(args, cfg):
    from .contacts import build_pool
    from .geometry import read_obj
    from .motion import read_motion
    seqs = [read_motion(p) for p in args.motion]
    pool = build_pool(seqs, read_obj(args.mesh), [_stem(p) for p in args.motion])
    _write_json({"candidates": [c.to_dict() for c in pool]}, args.out)
    return {"candidates": len(pool)}


def cmd_contacts_transfer(args, cfg):
    from .morph import load_morph, transfer_contacts
    pool = _read_pool(args.pool)
    if not 0 <= args.index < len(pool):
        raise ConfigError(f"index out of range (pool has {len(pool)})", "--index")
    con = transfer_contacts(pool[args.index], load_morph(args.morph))
    _write_json(con.to_dict(), args.out)
    return {"points": [len(h) for h in con.hands]}


def _target_for_object(args, cfg):
    from .geometry import compute_sdf, read_obj
    from .morph import load_morph
    if args.morph:
        ms = load_morph(args.morph)
        return ms.grids[-1], ms.target if ms.target is not None else ms.meshes[-1]
    if not args.target:
        raise ConfigError("one of --target or --morph is required", "--target")
    mesh = read_obj(args.target)
    return compute_sdf(mesh, padding=cfg.padding, resolution=cfg.resolution), mesh


def cmd_retarget_object(args, cfg):
    from .motion import read_motion
    from .retarget import retarget_object_motion
    grid, mesh = _target_for_object(args, cfg)
    track, res = retarget_object_motion(read_motion(args.motion).object, grid, mesh, cfg.weights,
                                        cfg.object_optim, return_result=True)
    _write_json(_track_to_dict(track), args.out)
    if args.trace:
        res.to_csv(args.trace)
    return {"frames": len(track), "final_loss": float(np.sum(res.final_loss))}


def cmd_retarget_human(args, cfg):
    from .contacts import contact_masks
    from .geometry import read_obj
    from .morph import read_constraint
    from .motion import read_motion, write_motion
    from .retarget import retarget_human_motion
    seq = read_motion(args.motion)
    track = _read_track(args.track)
    masks = contact_masks(seq, read_obj(args.mesh))
    agents, res = retarget_human_motion(seq, track, read_constraint(args.constraint), masks, w=cfg.weights,
                                        cfg=cfg.human_optim, return_result=True)
    write_motion(seq.with_(object=track, agents=agents, contacts=None), args.out)
    if args.trace:
        res.to_csv(args.trace)
    return {"frames": len(seq), "final_loss": float(np.sum(res.final_loss))}


def cmd_disc_gen_pairs(args, cfg):
    from .body import ArticulatedBody
    from .contacts import contact_masks, sequence_candidate
    from .discriminator import make_negatives, sequence_features, synthetic_pairs
    from .fixtures import pose_bank
    from .geometry import read_obj
    from .morph import ContactConstraint
    from .motion import read_motion
    mesh = read_obj(args.mesh)
    seqs = [read_motion(p) for p in args.motion]
    count = cfg.disc_pairs if args.count is None else args.count
    if args.mode == "synthetic":
        if seqs:
            bank = np.concatenate([a.theta for s in seqs for a in s.agents])
            body = seqs[0].bodies[0]
        else:
            bank, body = pose_bank(mesh)
        pos, neg, deltas = synthetic_pairs(body, bank, count, cfg.noise, seed=cfg.seed)
    else:
        if not seqs:
            raise ConfigError("retarget mode needs --motion", "--motion")
        rng = np.random.default_rng(cfg.seed)
        pos, neg, deltas = [], [], []
        per = max(1, -(-count // len(seqs)))
        for seq in seqs:
            masks = contact_masks(seq, mesh)
            cand = sequence_candidate(seq, mesh)
            con = ContactConstraint(tuple(mesh.vertices[h] for h in cand.hands))
            seeds = rng.integers(0, 2 ** 32, size=per).tolist()
            outs, ds = make_negatives(seq, con, masks, cfg.noise, seeds, cfg.weights, cfg.human_optim)
            fp = sequence_features(seq)                   # (2, N, 63)
            for agents, d in zip(outs, ds):
                fn = sequence_features(seq.with_(agents=agents))
                pos.append(fp.reshape(-1, 63))
                neg.append(fn.reshape(-1, 63))
                deltas.append(np.repeat(np.asarray(d)[None], fp.shape[0] * fp.shape[1], axis=0))
        pos, neg, deltas = (np.concatenate(a)[:count] for a in (pos, neg, deltas))
        del ArticulatedBody
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "wb") as fh:
        np.savez(fh, pos=pos, neg=neg, delta=deltas)
    return {"pairs": int(len(pos))}


def cmd_disc_train(args, cfg):
    from .discriminator import ranking_accuracy, save_model, split, train
    try:
        with np.load(args.pairs) as z:
            pos, neg, deltas = z["pos"], z["neg"], z["delta"]
    except (KeyError, ValueError) as e:
        raise ParseError(f"bad pairs archive: {e}") from None
    if not 0 <= args.holdout < 1:
        raise ConfigError("must lie in [0, 1)", "--holdout")
    tr, te = split(len(pos), 1 - args.holdout, seed=cfg.seed)
    epochs = cfg.disc_epochs if args.epochs is None else args.epochs
    res = train(pos[tr], neg[tr], deltas[tr], lr=cfg.disc_lr, epochs=epochs, batch_size=cfg.disc_batch,
                seed=cfg.seed, layers=cfg.layers, activation=cfg.activation)
    save_model(res.model, args.out)
    if args.trace:
        with open(args.trace, "w") as fh:
            fh.write("epoch,loss\n")
            fh.writelines(f"{k},{v!r}\n" for k, v in enumerate(res.trace.tolist()))
    out = {"final_loss": float(res.trace[-1])}
    if len(te):
        out["holdout_accuracy"] = ranking_accuracy(res.model, pos[te], neg[te])
    return out


def cmd_disc_score(args, cfg):
    from .discriminator import load_model, score_sequence
    from .motion import read_motion
    model = load_model(args.model)
    scores = {p: score_sequence(model, read_motion(p)) for p in args.motion}
    if args.out:
        _write_json(scores, args.out)
    return {"scores": scores}


def cmd_select(args, cfg):
    from .contacts import contact_masks
    from .discriminator import load_model
    from .geometry import read_obj
    from .morph import load_morph
    from .motion import read_motion, write_motion
    from .selection import dump_manifest, select_for_source
    mesh = read_obj(args.source_mesh)
    seq = read_motion(args.motion)
    ms = load_morph(args.morph)
    sid = args.source_id or _stem(args.motion)
    tid = args.target_id or _stem(Path(args.morph).parent if Path(args.morph).name == "morph.npz" else args.morph)
    res = select_for_source(seq, sid, _read_pool(args.pool), ms, _read_track(args.track), ms.grids[-1],
                            load_model(args.model), contact_masks(seq, mesh), cfg.pipeline(), tid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    motion = res.best.motion.with_(object_id=tid)
    write_motion(motion, out / f"{sid}__{tid}.m4d.json")
    (out / f"{sid}__{tid}.select.json").write_text(
        dump_manifest({"source": sid, "target": tid, "seed": cfg.seed, **res.to_dict()}))
    return {"best_score": res.best.score, "history": res.history}


def cmd_pipeline(args, cfg):
    from .discriminator import load_model
    from .geometry import read_obj
    from .motion import read_motion, write_motion
    from .selection import dump_manifest, run_pipeline
    paths = cfg.paths
    src_mesh = args.source_mesh or paths.get("source_mesh")
    targets = args.target or paths.get("targets")
    motions = args.motion if args.motion is not None else paths.get("sources", [])
    model_path = args.model or paths.get("model")
    out = args.out or paths.get("out")
    for name, val in (("source_mesh", src_mesh), ("targets", targets), ("model", model_path), ("out", out)):
        if not val:
            raise ConfigError("required (flag or [paths] entry)", f"paths.{name}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    sources = [(_stem(p), read_motion(p)) for p in motions]
    tmeshes = [(_stem(p), read_obj(p)) for p in targets]
    res = run_pipeline(read_obj(src_mesh), tmeshes, sources, load_model(model_path), cfg.pipeline(),
                       jobs=cfg.jobs)
    written = []
    for sid, tid, motion in res.outputs:
        if motion is not None:
            name = f"{sid}__{tid}.m4d.json"
            write_motion(motion, out / name)
            written.append(name)
    (out / "manifest.json").write_text(dump_manifest(res.manifest))
    failed = [r for r in res.manifest["runs"] if r["status"] != "ok"]
    if failed and len(failed) == len(res.manifest["runs"]):
        if all("AllCandidatesRejected" in r["error"] for r in failed):
            raise AllCandidatesRejected("every run rejected all of its candidates")
        raise NonFiniteLoss(-1) if all("NonFiniteLoss" in r["error"] for r in failed) else RetargetError(
            "; ".join(r["error"] for r in failed))
    return {"outputs": written, "failed": len(failed)}


def cmd_metrics(args, cfg):
    from .geometry import read_obj
    from .metrics import evaluate
    from .motion import read_motion
    rep = evaluate(read_motion(args.pred), read_motion(args.gt), read_obj(args.mesh),
                   read_obj(args.gt_mesh) if args.gt_mesh else None)
    if args.out:
        rep.write_json(args.out)
        rep.write_csv(str(Path(args.out).with_suffix(".csv")))
    return rep.to_dict()


def cmd_humanoid(args, cfg):
    from .humanoid import HumanoidChain, JointPairMap, retarget_humanoid
    from .motion import read_motion
    seq = read_motion(args.motion)
    chain_path = args.chain or cfg.humanoid_chain
    chain = HumanoidChain.read(chain_path) if chain_path else HumanoidChain.default()
    pairs_path = args.pairs or cfg.humanoid_pairs
    pairs = (JointPairMap.from_names(_read_json(pairs_path)["pairs"], chain) if pairs_path
             else JointPairMap.default(chain))
    traj = retarget_humanoid(seq.agents[args.agent], seq.bodies[args.agent], chain, pairs, cfg.humanoid_optim,
                             cfg.w_pairs, cfg.w_temporal, fps=seq.fps)
    if not chain.within_limits(traj.q):
        raise RetargetError("humanoid trajectory left the joint limits")
    traj.write(args.out)
    return {"frames": len(traj), "dof": chain.dof}


def cmd_toy_scene(args, cfg):
    from .geometry import read_obj
    from .motion import generate_toy_scene, write_motion
    seq = generate_toy_scene(args.kind, args.frames, read_obj(args.mesh), seed=cfg.seed)
    write_motion(seq, args.out)
    return {"frames": len(seq), "contact_frames": int(seq.contacts.any(axis=1).sum())}


def cmd_fixtures(args, cfg):
    from .fixtures import build_fixtures
    out = build_fixtures(args.out, epochs=args.epochs, log=lambda m: print(m, file=sys.stderr))
    return {"out": str(out)}


COMMANDS = {
    ("sdf", "build"): cmd_sdf_build,
    ("morph", None): cmd_morph,
    ("contacts", "extract"): cmd_contacts_extract,
    ("contacts", "transfer"): cmd_contacts_transfer,
    ("retarget", "object"): cmd_retarget_object,
    ("retarget", "human"): cmd_retarget_human,
    ("disc", "gen-pairs"): cmd_disc_gen_pairs,
    ("disc", "train"): cmd_disc_train,
    ("disc", "score"): cmd_disc_score,
    ("select", None): cmd_select,
    ("pipeline", None): cmd_pipeline,
    ("metrics", None): cmd_metrics,
    ("humanoid", None): cmd_humanoid,
    ("toy-scene", None): cmd_toy_scene,
    ("fixtures", None): cmd_fixtures,
}

_IO = (ParseError, SchemaVersionMismatch, OSError, json.JSONDecodeError)
_NUMERIC = (NonFiniteLoss, NonWatertight, DegenerateMesh, IsoOutOfRange, IncompatibleLattice, EmptyCandidate,
            EmptyConstraint, TrackTooShort, LengthMismatch, RetargetError, ValueError, FloatingPointError)


def exit_code(exc):
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, AllCandidatesRejected):
        return EXIT_REJECTED
    if isinstance(exc, _IO):
        return EXIT_IO
    return EXIT_NUMERIC


def _error_json(exc):
    d = {"error": type(exc).__name__, "message": str(exc), "exit_code": exit_code(exc)}
    for attr in ("path", "field", "line", "iteration"):
        val = getattr(exc, attr, None)
        if val is not None:
            d[attr] = val
    if isinstance(exc, OSError) and exc.filename:
        d["path"] = str(exc.filename)
    return d


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        cfg = _settings(args)
        import torch
        torch.set_num_threads(1)
        result = COMMANDS[(args.command, getattr(args, "action", None))](args, cfg)
        print(json.dumps(result, default=str))
        return 0
    except (ConfigError,) + _IO + _NUMERIC as exc:
        print(json.dumps(_error_json(exc)), file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
