"""Penetration filtering, beam-search contact selection and the end-to-end pipeline."""
from __future__ import annotations

import hashlib
import json
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import contacts as C
from .body import surface_capsules
from .discriminator import score_sequence
from .errors import AllCandidatesRejected, EmptyCandidate, RetargetError
from .geometry import compute_sdf
from .morph import build_morph_sequence, transfer_contacts
from .retarget import HUMAN_OPTIM, OBJECT_OPTIM, LossWeights, retarget_human_motion, retarget_object_motion

PENETRATION_VOLUME = 1e-4     # m^3 per frame
PENETRATION_RATIO = 0.025     # fraction of flagged frames tolerated
BEAM_WIDTH = 4
BEAM_ITERATIONS = 3
INITIAL_SAMPLE = 8
MANIFEST_FORMAT = "collab-retarget-manifest/1"


# ---------------------------------------------------------------- penetration


def penetration_volume(caps, grid, rotation=None, translation=None):
    """Volume of object-interior grid cells whose centres lie inside any capsule.

    ``caps`` are capsules of one frame (any number, world frame); the grid lives in
    the object frame, placed in the world by ``rotation`` (3x3) and ``translation``.
    """
    a = np.asarray(caps.a, dtype=float).reshape(-1, 3)
    b = np.asarray(caps.b, dtype=float).reshape(-1, 3)
    r = np.resize(np.asarray(caps.radius, dtype=float), len(a))
    if rotation is not None:
        t = np.zeros(3) if translation is None else np.asarray(translation, dtype=float)
        a = (a - t) @ rotation
        b = (b - t) @ rotation
    h = grid.spacing
    dims = np.array(grid.dims)
    hits = []
    for k in range(len(a)):
        lo = np.minimum(a[k], b[k]) - r[k]
        hi = np.maximum(a[k], b[k]) + r[k]
        i0 = np.maximum(np.ceil((lo - grid.origin) / h).astype(int), 0)
        i1 = np.minimum(np.floor((hi - grid.origin) / h).astype(int), dims - 1)
        if (i1 < i0).any():
            continue
        sub = grid.values[i0[0]:i1[0] + 1, i0[1]:i1[1] + 1, i0[2]:i1[2] + 1]
        ii = np.argwhere(sub < 0) + i0
        if not len(ii):
            continue
        p = grid.origin + ii * h
        ab = b[k] - a[k]
        s = np.clip((p - a[k]) @ ab / max(ab @ ab, 1e-300), 0.0, 1.0)
        d = np.linalg.norm(p - (a[k] + s[:, None] * ab), axis=1)
        ii = ii[d < r[k]]
        hits.append(np.ravel_multi_index(ii.T, grid.dims))
    if not hits:
        return 0.0
    return len(np.unique(np.concatenate(hits))) * h ** 3


def frame_volumes(seq, grid):
    """Penetration volume of both agents with the object, per frame: (N,)."""
    caps = [surface_capsules(b, a) for b, a in zip(seq.bodies, seq.agents)]
    rot = seq.object.matrices()
    out = np.zeros(len(seq))
    for i in range(len(seq)):
        both = type(caps[0])(np.concatenate([c.a[i] for c in caps]),
                             np.concatenate([c.b[i] for c in caps]),
                             np.concatenate([c.radius for c in caps]))
        out[i] = penetration_volume(both, grid, rot[i], seq.object.translations[i])
    return out


@dataclass
class FilterResult:
    keep: bool
    ratio: float
    flagged: int
    volumes: np.ndarray = field(repr=False, default=None)


def filter_volumes(volumes, volume_threshold=PENETRATION_VOLUME, ratio_threshold=PENETRATION_RATIO):
    """A frame is flagged when its volume exceeds the threshold; keep if few enough are."""
    v = np.asarray(volumes, dtype=float)
    flagged = int((v > volume_threshold).sum())
    ratio = flagged / len(v) if len(v) else 0.0
    return FilterResult(ratio <= ratio_threshold, ratio, flagged, v)


def filter_candidate(seq, grid, volume_threshold=PENETRATION_VOLUME, ratio_threshold=PENETRATION_RATIO):
    """Penetration filter of a motion against the object SDF; the motion carries the object track."""
    return filter_volumes(frame_volumes(seq, grid), volume_threshold, ratio_threshold)


# ---------------------------------------------------------------- beam search


@dataclass
class Evaluation:
    index: int                  # evaluation order, used to break score ties
    candidate: object
    constraint: object = None
    motion: object = None
    score: float = None
    filter: FilterResult = None
    status: str = "pending"     # kept | penetration | empty

    @property
    def alive(self):
        return self.status == "kept"

    def summary(self):
        d = {
            "index": self.index,
            "provenance": self.candidate.provenance,
            "region_sizes": [len(h) for h in self.candidate.hands],
            "candidate_sha256": _sha(json.dumps(self.candidate.to_dict()["hands"]).encode()),
            "status": self.status,
            "score": self.score,
        }
        if self.filter is not None:
            d["flagged_frames"] = self.filter.flagged
            d["flagged_ratio"] = self.filter.ratio
            d["max_volume"] = float(self.filter.volumes.max()) if len(self.filter.volumes) else 0.0
        return d


@dataclass
class BeamResult:
    best: Evaluation
    history: list               # best score after each iteration (None while nothing survives)
    evaluations: list
    beam: list

    def to_dict(self):
        return {
            "history": self.history,
            "best_index": self.best.index if self.best is not None else None,
            "beam": [e.index for e in self.beam],
            "candidates": [e.summary() for e in self.evaluations],
        }


@dataclass
class SearchContext:
    """Everything needed to turn a candidate into a scored, filtered motion."""
    source: object              # MotionSequence
    morph: object               # MorphSequence
    target_track: object        # ObjectTrack
    target_grid: object         # SdfGrid of the target in its object frame
    model: object
    masks: np.ndarray           # (N, 4) source contact flags
    weights: LossWeights = LossWeights()
    optim: object = HUMAN_OPTIM
    batch: int = 12


def _active(cand, masks):
    return any(len(h) and masks[:, k].any() for k, h in enumerate(cand.hands))


def evaluate(cands, ctx, start=0):
    """Transfer, retarget (batched), filter and score each candidate."""
    evals = [Evaluation(start + i, c) for i, c in enumerate(cands)]
    todo = []
    for e in evals:
        if e.candidate.is_empty() or not _active(e.candidate, ctx.masks):
            e.status = "empty"
            continue
        try:
            e.constraint = transfer_contacts(e.candidate, ctx.morph)
        except EmptyCandidate:
            e.status = "empty"
            continue
        todo.append(e)
    for s in range(0, len(todo), ctx.batch):
        chunk = todo[s:s + ctx.batch]
        outs = retarget_human_motion(ctx.source, [ctx.target_track] * len(chunk),
                                     [e.constraint for e in chunk], ctx.masks,
                                     w=ctx.weights, cfg=ctx.optim)
        for e, agents in zip(chunk, outs):
            e.motion = ctx.source.with_(object=ctx.target_track, agents=agents, contacts=None,
                                        meta=dict(ctx.source.meta, candidate=e.candidate.provenance))
            e.filter = filter_candidate(e.motion, ctx.target_grid)
            if e.filter.keep:
                e.score = score_sequence(ctx.model, e.motion)
                e.status = "kept"
            else:
                e.status = "penetration"
    return evals


def _rank(evals):
    return sorted((e for e in evals if e.alive), key=lambda e: (-e.score, e.index))


def initial_sample(pool, size, rng, prefer=None):
    """Indices of the first candidates to try: ``prefer`` (if given) then a seeded sample."""
    size = min(len(pool), size)
    first = [i for i in ([] if prefer is None else prefer) if 0 <= i < len(pool)][:size]
    rest = [i for i in rng.permutation(len(pool)).tolist() if i not in first]
    return first + rest[:size - len(first)]


def neighbours(beam, pool, neighbors, seen):
    """Dilated and contracted regions of every beam member, then the closest unseen pool candidate."""
    out = []
    for e in beam:
        for c in (C.dilate(e.candidate, neighbors), C.contract(e.candidate, neighbors)):
            if c.key() not in seen:
                seen.add(c.key())
                out.append(c)
    if beam:
        best = beam[0].candidate
        scored = [(C.mean_iou(best, c), -i) for i, c in enumerate(pool) if c.key() not in seen]
        if scored:
            _, neg_i = max(scored)
            c = pool[-neg_i]
            c = type(c)(c.hands, dict(c.provenance, edit="swap"))
            seen.add(c.key())
            out.append(c)
    return out


def beam_search_select(pool, ctx, beam_width=BEAM_WIDTH, iterations=BEAM_ITERATIONS,
                       sample_size=INITIAL_SAMPLE, seed=0, prefer=None, neighbors=None, log=None):
    """Keep-best-B refinement of contact candidates; iteration 0 scores an initial sample."""
    if not pool:
        raise ValueError("candidate pool is empty")
    rng = np.random.default_rng(seed)
    src_mesh = ctx.morph.source if ctx.morph.source is not None else ctx.morph.meshes[0]
    neighbors = C.ring_neighbors(src_mesh) if neighbors is None else neighbors
    picks = initial_sample(pool, sample_size, rng, prefer)
    seen = {pool[i].key() for i in picks}
    evals = evaluate([pool[i] for i in picks], ctx)
    beam = _rank(evals)[:beam_width]
    history = [beam[0].score if beam else None]
    if log:
        log(0, len(evals), history[-1])
    for it in range(1, iterations):
        if beam:
            cands = neighbours(beam, pool, neighbors, seen)
        else:
            # nothing survived yet: keep drawing fresh pool candidates
            fresh = [i for i in rng.permutation(len(pool)).tolist() if pool[i].key() not in seen][:sample_size]
            seen.update(pool[i].key() for i in fresh)
            cands = [pool[i] for i in fresh]
        new = evaluate(cands, ctx, start=len(evals))
        evals.extend(new)
        # elitism: the previous beam competes with the new candidates
        beam = _rank(beam + new)[:beam_width]
        history.append(beam[0].score if beam else None)
        if log:
            log(it, len(new), history[-1])
    if not beam:
        raise AllCandidatesRejected(f"all {len(evals)} candidates failed the penetration filter")
    return BeamResult(beam[0], history, evals, beam)


# ---------------------------------------------------------------- pipeline


@dataclass(frozen=True)
class PipelineConfig:
    beam_width: int = BEAM_WIDTH
    iterations: int = BEAM_ITERATIONS
    initial_sample: int = INITIAL_SAMPLE
    morph_steps: int = 4
    sdf_resolution: int = 64
    padding: float = None
    weights: LossWeights = LossWeights()
    object_optim: object = OBJECT_OPTIM
    human_optim: object = HUMAN_OPTIM
    seed: int = 0

    def to_dict(self):
        return asdict(self)


def _sha(data):
    return hashlib.sha256(data).hexdigest()


def mesh_digest(mesh):
    return _sha(np.ascontiguousarray(mesh.vertices, "<f8").tobytes()
                + np.ascontiguousarray(mesh.faces, "<i8").tobytes())


def sequence_digest(seq):
    parts = [seq.object.rotations, seq.object.translations]
    for a in seq.agents:
        parts += [a.theta, a.root_orient, a.root_transl]
    return _sha(b"".join(np.ascontiguousarray(p, "<f8").tobytes() for p in parts))


def _clean(obj, digits=12):
    """Round floats so manifests do not depend on the last bits of a platform's arithmetic."""
    if isinstance(obj, float):
        return float(f"{obj:.{digits}g}") if np.isfinite(obj) else None
    if isinstance(obj, (np.floating, np.integer)):
        return _clean(obj.item(), digits)
    if isinstance(obj, dict):
        return {str(k): _clean(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v, digits) for v in obj]
    return obj


def dump_manifest(manifest):
    return json.dumps(_clean(manifest), sort_keys=True, indent=1) + "\n"


def run_seed(seed, target_id, source_id):
    """Seed of one (source, target) search, derived from the ids so stages can be rerun alone."""
    return [int(seed), zlib.crc32(str(target_id).encode()), zlib.crc32(str(source_id).encode())]


def select_for_source(source, source_id, pool, morph, target_track, target_grid, model, masks,
                      cfg=PipelineConfig(), target_id="target", neighbors=None, log=None):
    """Beam search for one (source, target) pair; the source's own contacts are tried first."""
    ctx = SearchContext(source, morph, target_track, target_grid, model, masks, cfg.weights, cfg.human_optim)
    prefer = [i for i, c in enumerate(pool)
              if c.provenance.get("sequence") == source_id and c.provenance.get("kind") == "sequence"]
    rng_seed = run_seed(cfg.seed, target_id, source_id)
    return beam_search_select(pool, ctx, cfg.beam_width, cfg.iterations, cfg.initial_sample,
                              seed=rng_seed, prefer=prefer, neighbors=neighbors, log=log)


@dataclass
class PipelineResult:
    outputs: list               # (source_id, target_id, MotionSequence or None)
    manifest: dict
    beams: dict = field(default_factory=dict)


def _run_one(args):
    (src, sid, pool, morph, track, grid, model, masks, cfg, tid, neighbors) = args
    try:
        res = select_for_source(src, sid, pool, morph, track, grid, model, masks, cfg, tid, neighbors)
        return res, None
    except RetargetError as e:
        return None, f"{type(e).__name__}: {e}"


def run_pipeline(source_mesh, targets, sources, model, cfg=PipelineConfig(), jobs=1, log=None):
    """Retarget every source sequence onto every target shape.

    ``targets`` and ``sources`` are lists of (id, mesh) and (id, MotionSequence).
    Failures are recorded per run and do not stop the batch.
    """
    manifest = {
        "format": MANIFEST_FORMAT,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "config_sha256": _sha(json.dumps(_clean(cfg.to_dict()), sort_keys=True).encode()),
        "inputs": {
            "source_mesh": mesh_digest(source_mesh),
            "targets": {tid: mesh_digest(m) for tid, m in targets},
            "sources": {sid: sequence_digest(s) for sid, s in sources},
        },
        "runs": [],
    }
    outputs, beams = [], {}
    if not sources or not targets:
        return PipelineResult(outputs, manifest, beams)
    src_grid = compute_sdf(source_mesh, padding=cfg.padding, resolution=cfg.sdf_resolution)
    ids = [sid for sid, _ in sources]
    seqs = [s for _, s in sources]
    pool = C.build_pool(seqs, source_mesh, ids)
    masks = [C.contact_masks(s, source_mesh) for s in seqs]
    neighbors = C.ring_neighbors(source_mesh)
    manifest["pool"] = [dict(c.provenance, region_sizes=[len(h) for h in c.hands]) for c in pool]
    jobs_args, keys = [], []
    for tid, tmesh in targets:
        morph = build_morph_sequence(source_mesh, tmesh, cfg.morph_steps, cfg.sdf_resolution,
                                     padding=cfg.padding,
                                     source_sdf=src_grid)
        tgrid = morph.grids[-1]
        for si, (sid, seq) in enumerate(sources):
            track = retarget_object_motion(seq.object, tgrid, tmesh, cfg.weights, cfg.object_optim)
            jobs_args.append((seq, sid, pool, morph, track, tgrid, model, masks[si], cfg, tid, neighbors))
            keys.append((sid, tid))
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_one, jobs_args))
    else:
        results = []
        for k, a in zip(keys, jobs_args):
            results.append(_run_one(a))
            if log:
                log(k, results[-1][1])
    for (sid, tid), (res, err) in zip(keys, results):
        run = {"source": sid, "target": tid}
        if res is None:
            run.update(status="failed", error=err)
            outputs.append((sid, tid, None))
        else:
            run.update(status="ok", **res.to_dict())
            motion = res.best.motion.with_(object_id=tid)
            outputs.append((sid, tid, motion))
            beams[(sid, tid)] = res
            run["output_sha256"] = sequence_digest(motion)
        manifest["runs"].append(run)
    return PipelineResult(outputs, manifest, beams)
