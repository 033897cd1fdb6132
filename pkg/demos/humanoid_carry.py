"""Map agent 0 of the bundled carry scene onto the 19-DoF humanoid chain.

    python demos/humanoid_carry.py [out.h4d.json]
"""
import sys
from pathlib import Path

import numpy as np
import torch

from collab_retarget.fixtures import load_sources
from collab_retarget.humanoid import HumanoidChain, JointPairMap, chain_fk, retarget_humanoid

torch.set_num_threads(1)
seq = dict(load_sources())["carry"]
chain = HumanoidChain.default()
pairs = JointPairMap.default(chain)
traj = retarget_humanoid(seq.agents[0], seq.bodies[0], chain, pairs, fps=seq.fps)

human = seq.joints()[0]                                   # (N, J, 3)
robot = chain_fk(chain, traj.q, traj.root_orient, traj.root_transl)
err = np.linalg.norm(robot[:, pairs.robot] - human[:, pairs.human], axis=-1)
print(f"{len(traj)} frames, {chain.dof} joints, within limits: {chain.within_limits(traj.q)}")
print(f"paired keypoint error: mean {err.mean() * 100:.1f} cm, max {err.max() * 100:.1f} cm")
out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/carry_humanoid.h4d.json")
out.parent.mkdir(parents=True, exist_ok=True)
traj.write(out)
