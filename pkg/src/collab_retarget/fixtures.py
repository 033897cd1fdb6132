"""Bundled toy fixtures: box meshes, scripted source motions and a trained ranker.

``build_fixtures`` regenerates every file deterministically; the shipped copies
live in ``data/fixtures`` inside the package.
"""
from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .discriminator import load_model, save_model, split, synthetic_pairs, train
from .geometry import read_obj, write_obj
from .motion import generate_toy_scene, read_motion, write_motion
from .shapes import box_mesh

SOURCE_SIZE = (0.4, 0.6, 0.3)
MESH_SPACING = 0.01
TARGETS = {
    "box_s12": (1.2, 1.2, 1.2),
    "box_s13": (1.3, 1.3, 1.3),
    "box_wide13": (1.3, 1.0, 1.0),   # wider between the hands
}
SOURCES = {"carry": ("carry", 30, 0), "handover": ("handover", 30, 1)}
LONG_SOURCE = ("carry60", ("carry", 60, 0))
BANK_SEEDS = (0, 1, 2, 3)
MODEL_PAIRS = 10000


def fixture_dir():
    return Path(str(resources.files("collab_retarget").joinpath("data/fixtures")))


def fixture_path(name):
    return fixture_dir() / name


def source_mesh():
    return box_mesh(SOURCE_SIZE, spacing=MESH_SPACING)


def target_mesh(name):
    return box_mesh(np.multiply(SOURCE_SIZE, TARGETS[name]), spacing=MESH_SPACING)


def load_source_mesh():
    return read_obj(fixture_path("box_source.obj"))


def load_targets():
    return [(name, read_obj(fixture_path(f"{name}.obj"))) for name in TARGETS]


def load_sources():
    return [(name, read_motion(fixture_path(f"{name}.m4d.json"))) for name in SOURCES]


def load_ranker():
    return load_model(fixture_path("ranker.rnk"))


def pose_bank(mesh, frames=30):
    """Joint rotations of both agents over toy scenes of both kinds: (M, 21, 3)."""
    thetas = []
    for kind in ("carry", "handover"):
        for s in BANK_SEEDS:
            seq = generate_toy_scene(kind, frames, mesh, seed=s)
            thetas += [a.theta for a in seq.agents]
    return np.concatenate(thetas), seq.bodies[0]


def ranker_pairs(mesh, n=MODEL_PAIRS, seed=0):
    bank, body = pose_bank(mesh)
    return synthetic_pairs(body, bank, n, seed=seed)


def build_fixtures(out=None, epochs=None, log=print):
    """Write every fixture into ``out`` (default: the package fixture directory)."""
    out = fixture_dir() if out is None else Path(out)
    out.mkdir(parents=True, exist_ok=True)
    src = source_mesh()
    write_obj(src, out / "box_source.obj")
    for name in TARGETS:
        write_obj(target_mesh(name), out / f"{name}.obj")
    for name, (kind, frames, seed) in list(SOURCES.items()) + [LONG_SOURCE]:
        write_motion(generate_toy_scene(kind, frames, src, seed=seed), out / f"{name}.m4d.json")
    pos, neg, deltas = ranker_pairs(src)
    tr, te = split(len(pos))
    kw = {} if epochs is None else {"epochs": epochs}
    res = train(pos[tr], neg[tr], deltas[tr], log=lambda e, l: log(f"epoch {e}: loss {l:.3g}"), **kw)
    save_model(res.model, out / "ranker.rnk")
    acc = float(np.mean(res.model.score_features(pos[te]) > res.model.score_features(neg[te])))
    log(f"held-out ranking accuracy {acc:.4f}")
    return out
