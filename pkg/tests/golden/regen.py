"""Rewrite the golden files.  Run only when an intentional change alters them:

    python tests/golden/regen.py
"""

import json
from pathlib import Path

import numpy as np

from smtnav.autodiff import ParamStore
from smtnav.embedding import EmbeddingConfig, Embedder, embed_observation
from smtnav.env import DynamicsConfig, generate_floorplan
from smtnav.env.dynamics import AgentState, render_observation

HERE = Path(__file__).parent


def golden_embedding_inputs():
    cfg = EmbeddingConfig(d_x=32)
    store = ParamStore()
    Embedder.init_params(cfg, store, np.random.default_rng(2024))
    plan = generate_floorplan(7)
    dyn = DynamicsConfig()
    obs = golden_observation(plan, dyn)
    return Embedder(cfg, store), obs


def golden_observation(plan=None, dyn=None):
    plan = plan or generate_floorplan(7)
    dyn = dyn or DynamicsConfig()
    cells = np.argwhere(plan.grid == 0)
    i, j = cells[len(cells) // 2]
    s = AgentState((i + 0.5) * plan.cell_size, (j + 0.5) * plan.cell_size, 0.3, step=4)
    return render_observation(s, plan, dyn, 1, np.random.default_rng(99))


def hexes(a):
    return [float(x).hex() for x in np.ravel(a)]


def main():
    emb, obs = golden_embedding_inputs()
    frame = np.array([obs.pose[0] - 1.0, obs.pose[1] + 0.5, -0.7])
    vec = embed_observation(obs, frame, emb, now=9).value
    (HERE / "embedding.json").write_text(json.dumps({"vector": hexes(vec)}, indent=1) + "\n")
    o = golden_observation()
    (HERE / "observation.json").write_text(json.dumps({
        "depth": hexes(o.depth), "valid": o.valid.tolist(), "labels": o.labels.tolist(),
        "pose": hexes(o.pose), "prev_action": o.prev_action, "t": o.t}, indent=1) + "\n")


if __name__ == "__main__":
    main()
