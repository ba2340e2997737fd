"""The eleven acceptance criteria at their stated tolerances.

A summary line per criterion is printed at the end of the pytest run.  The
toy-scale learning criterion trains real policies for about 90 minutes on one
core; deselect it with ``-m "not slow"`` for a quick pass.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest
import yaml
from scipy.optimize import Bounds, LinearConstraint, milp

from smtnav import autodiff as ad
from smtnav.attention import att_block, att_fact, decode, encode, init_attention_params
from smtnav.autodiff import ParamStore, Tensor
from smtnav.cli import EXIT_OK, main
from smtnav.embedding import EmbeddingConfig, Embedder
from smtnav.env import (
    GO_FORWARD,
    TURN_LEFT,
    TURN_RIGHT,
    AgentState,
    DynamicsConfig,
    NavEnv,
    generate_floorplan,
    open_hall,
    step,
)
from smtnav.memory import covering_radius, fps_indices
from smtnav.policy import PolicyConfig, PolicyNetwork
from smtnav.tasks import TaskConfig, closed_form_reward, metrics
from smtnav.training import (
    TrainConfig,
    evaluate,
    mean_reward,
    pretrain_embeddings,
    random_policy,
    run_episode,
    split_plans,
    train,
)

from conftest import check_store_grads
from test_policy import fill, make_net, make_obs


def criterion(num, title):
    return pytest.mark.criterion(num, title)


def weighted_sum(out: Tensor, seed: int = 0) -> Tensor:
    w = np.random.default_rng(seed).normal(size=out.shape)
    return ad.sum_all(ad.mul(out, Tensor(w)))


# ---------------------------------------------------------------------------
# 1. gradient integrity
# ---------------------------------------------------------------------------


def _layer_cases():
    rng = np.random.default_rng(1)
    s = ParamStore()
    x = s.add("x", rng.normal(size=(5, 6)))
    y = s.add("y", rng.normal(size=(7, 6)))
    w = s.add("w", rng.normal(size=(6, 4)))
    b = s.add("b", rng.normal(size=(1, 4)))
    g = s.add("g", rng.normal(size=(1, 6)))
    gb = s.add("gb", rng.normal(size=(1, 6)))
    r = s.add("r", rng.uniform(0.2, 1.0, size=(5, 6)) * rng.choice([-1, 1], size=(5, 6)))
    h = s.add("h", rng.choice([-1, 1], size=(4, 3)) * rng.uniform(0.1, 3.0, size=(4, 3)))
    off = np.array([0, 2, 5])
    yoff = np.array([0, 3, 7])
    pa = init_attention_params(s, "a", 6, 6, 6, 2, rng)
    pi = init_attention_params(s, "i", 6, 6, 6, 2, rng)
    po = init_attention_params(s, "o", 6, 6, 6, 2, rng)
    for n in s.names():
        if ".ln" in n or n.endswith("ff_b"):
            s[n].value = s[n].value + 0.3 * rng.normal(size=s[n].shape)
    ec = EmbeddingConfig(d_x=8, num_rays=6)
    es = ParamStore()
    Embedder.init_params(ec, es, rng)
    emb = Embedder(ec, es)
    feats = rng.uniform(0, 1, size=(4, emb.cfg.image_features))
    poses = rng.normal(size=(4, 3))
    cases = {
        "matmul": (lambda: ad.matmul(x, w), s, ["x", "w"]),
        "linear": (lambda: ad.linear(x, w, b), s, ["x", "w", "b"]),
        "relu": (lambda: ad.relu(r), s, ["r"]),
        "softmax": (lambda: ad.softmax_rows(x), s, ["x"]),
        "layer_norm": (lambda: ad.layer_norm(x, g, gb), s, ["x", "g", "gb"]),
        "segment_max": (lambda: ad.segment_max(x, off), s, ["x"]),
        "huber": (lambda: ad.huber(h), s, ["h"]),
        "att_block": (lambda: att_block(x, y, pa, off, yoff), s, None),
        "encode": (lambda: encode(y, pa, yoff), s, ["y"] + [n for n in s if n.startswith("a.")]),
        "decode": (lambda: decode(ad.take_rows(x, [1, 4]), y, pa, yoff), s,
                   ["x", "y"] + [n for n in s if n.startswith("a.")]),
        "att_fact": (lambda: att_fact(y, x, pi, po, yoff, off), s,
                     ["x", "y"] + [n for n in s if n[:2] in ("i.", "o.")]),
        "embedding": (lambda: emb.embed_many(feats, poses, [0, 1, 2, 0], [0, 1, 2, 3],
                                             poses[-1], 3), es, None),
    }
    return cases


@criterion(1, "gradient integrity")
@pytest.mark.parametrize("layer", list(_layer_cases()))
def test_criterion_01_layers(layer, record_property):
    fn, store, names = _layer_cases()[layer]
    err = check_store_grads(lambda: weighted_sum(fn()), store, names)
    record_property("detail", f"{layer} {err:.1e}")
    assert err < 1e-4


@criterion(1, "gradient integrity")
@pytest.mark.parametrize("size", [1, 3, 16])
def test_criterion_01_full_smt(size, record_property):
    rng = np.random.default_rng(size)
    net = make_net()
    obs = [make_obs(rng, t) for t in range(size)]
    img, poses, acts, steps = fill(net, obs).raw()

    def loss():
        mem = net.embedder.embed_many(img, poses, acts, steps, obs[-1].pose, size - 1)
        return weighted_sum(net.q_values(mem, np.array([0, mem.rows])))

    t0 = time.perf_counter()
    err = check_store_grads(loss, net.store, max_entries=6, rng=rng)
    record_property("detail", f"smt |M|={size} {err:.1e} in {time.perf_counter() - t0:.1f}s")
    assert err < 1e-4


# ---------------------------------------------------------------------------
# 2. attention algebra
# ---------------------------------------------------------------------------


@criterion(2, "attention algebra")
def test_criterion_02(record_property):
    rng = np.random.default_rng(2)
    worst_sum = worst_enc = worst_dec = 0.0
    for _ in range(100):
        n, d = int(rng.integers(2, 33)), 8
        s = ParamStore()
        p = init_attention_params(s, "p", d, d, d, 2, rng)
        m = rng.normal(size=(n, d))
        q = rng.normal(size=(1, d))
        worst_sum = max(worst_sum, np.max(np.abs(
            ad.softmax_rows(Tensor(rng.normal(size=(4, n)) * 5)).value.sum(axis=1) - 1)))
        perm = rng.permutation(n)
        with ad.no_grad():
            e, ep = encode(Tensor(m), p).value, encode(Tensor(m[perm]), p).value
            c, cp = decode(Tensor(q), Tensor(m), p).value, decode(Tensor(q), Tensor(m[perm]), p).value
        worst_enc = max(worst_enc, np.max(np.abs(e[perm] - ep)))
        worst_dec = max(worst_dec, np.max(np.abs(c - cp)))
    record_property("detail", f"sum {worst_sum:.1e}, enc {worst_enc:.1e}, dec {worst_dec:.1e}")
    assert worst_sum <= 1e-12 and worst_enc <= 1e-10 and worst_dec <= 1e-10


@criterion(2, "attention algebra")
def test_criterion_02_policy_permutation():
    rng = np.random.default_rng(22)
    net = make_net(temporal="none", capacity=64)
    for _ in range(100):
        n = int(rng.integers(2, 33))
        obs = [make_obs(rng, t) for t in range(n)]
        order = list(rng.permutation(n - 1)) + [n - 1]
        shuffled = [type(obs[0])(obs[i].depth, obs[i].valid, obs[i].labels, obs[i].pose,
                                 obs[i].prev_action, t) for t, i in enumerate(order)]
        a = net.forward(obs[-1], fill(net, obs)).probs
        b = net.forward(shuffled[-1], fill(net, shuffled)).probs
        assert np.max(np.abs(a - b)) <= 1e-10


# ---------------------------------------------------------------------------
# 3. memory-size-1 identity
# ---------------------------------------------------------------------------


@criterion(3, "memory-size-1 identity")
@pytest.mark.parametrize("profile", ["default", "desk"])
def test_criterion_03(profile, record_property):
    rng = np.random.default_rng(3)
    net = PolicyNetwork(PolicyConfig.from_profile(profile, capacity=1), rng=rng)
    obs = [make_obs(rng, t) for t in range(5)]
    m = fill(net, obs)
    base = net.forward(obs[-1], m).probs
    worst = 0.0
    for _ in range(10):
        for name in ("enc.wu", "enc.wk", "dec.wu", "dec.wk"):
            p = net.store[name]
            p.value = p.value + rng.normal(size=p.shape)
        worst = max(worst, np.max(np.abs(net.forward(obs[-1], m).probs - base)))
    record_property("detail", f"{profile} {worst:.1e}")
    assert worst <= 1e-10


# ---------------------------------------------------------------------------
# 4. factorization complexity
# ---------------------------------------------------------------------------


def _best_time(fn, repeats=7):
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return min(out)


@criterion(4, "factorization complexity")
def test_criterion_04(record_property):
    rng = np.random.default_rng(4)
    d, heads = 16, 2
    s = ParamStore()
    pe = init_attention_params(s, "e", d, d, d, heads, rng)
    pi = init_attention_params(s, "i", d, d, d, heads, rng)
    po = init_attention_params(s, "o", d, d, d, heads, rng)
    sizes = [128, 256, 512, 1024, 2048]
    t_enc, t_fact = [], []
    with ad.no_grad():
        for n in sizes:
            m = Tensor(rng.normal(size=(n, d)))
            c = Tensor(m.value[fps_indices(m.value, 32, n - 1)])
            t_enc.append(_best_time(lambda: encode(m, pe)))
            t_fact.append(_best_time(lambda: att_fact(m, c, pi, po)))
    slope_enc = np.polyfit(np.log(sizes), np.log(t_enc), 1)[0]
    slope_fact = np.polyfit(np.log(sizes), np.log(t_fact), 1)[0]
    record_property("detail", f"att_fact slope {slope_fact:.2f}, encode slope {slope_enc:.2f}")
    assert slope_fact <= 1.2 and slope_enc >= 1.8


# ---------------------------------------------------------------------------
# 5. FPS quality
# ---------------------------------------------------------------------------


def optimal_k_center_radius(x: np.ndarray, k: int) -> float:
    """Smallest pairwise distance r such that k points cover all within r (exact, via MILP)."""
    d = np.sqrt(((x[:, None] - x[None]) ** 2).sum(-1))
    radii = np.unique(d)
    n = len(x)

    def feasible(r):
        cover = (d <= r).astype(float)
        res = milp(np.ones(n), constraints=[LinearConstraint(cover, lb=1), 
                                            LinearConstraint(np.ones((1, n)), ub=k)],
                   integrality=np.ones(n), bounds=Bounds(0, 1))
        return res.status == 0

    lo, hi = 0, len(radii) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if feasible(radii[mid]):
            hi = mid
        else:
            lo = mid + 1
    return float(radii[lo])


def test_k_center_oracle_matches_enumeration():
    rng = np.random.default_rng(50)
    for _ in range(20):
        x = rng.normal(size=(int(rng.integers(3, 10)), 2))
        k = int(rng.integers(1, 4))
        brute = min(covering_radius(x, list(c)) for c in itertools.combinations(range(len(x)), k))
        assert optimal_k_center_radius(x, k) == pytest.approx(brute, abs=1e-12)


@criterion(5, "FPS 2-approximation")
def test_criterion_05(record_property):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 65))
        k = int(rng.integers(1, min(8, n) + 1))
        x = rng.normal(size=(n, int(rng.integers(1, 5))))
        opt = optimal_k_center_radius(x, k)
        got = covering_radius(x, fps_indices(x, k, n - 1))
        ratio = got / opt if opt > 0 else 1.0
        worst = max(worst, ratio)
        assert got <= 2 * opt + 1e-12
    record_property("detail", f"worst ratio {worst:.3f}")


# ---------------------------------------------------------------------------
# 6. frame invariance
# ---------------------------------------------------------------------------


@criterion(6, "frame invariance")
@pytest.mark.parametrize("mode", ["exp", "sin", "none"])
def test_criterion_06(mode, record_property):
    rng = np.random.default_rng(6)
    cfg = EmbeddingConfig(d_x=8, temporal_mode=mode)
    store = ParamStore()
    Embedder.init_params(cfg, store, rng)
    emb = Embedder(cfg, store)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        poses = np.column_stack([rng.uniform(-20, 20, size=(n, 2)), rng.uniform(-4, 4, n)])
        steps = np.sort(rng.choice(500, size=n, replace=False))
        frame = poses[int(rng.integers(n))]
        a, tx, ty = rng.uniform(-np.pi, np.pi), *rng.uniform(-50, 50, 2)
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])

        def move(p):
            p = np.atleast_2d(p)
            return np.column_stack([p[:, :2] @ rot.T + [tx, ty], p[:, 2] + a])

        f0 = emb.pose_features(poses, frame, steps, int(steps[-1]))
        f1 = emb.pose_features(move(poses), move(frame)[0], steps, int(steps[-1]))
        worst = max(worst, np.max(np.abs(f0 - f1)))
    record_property("detail", f"{mode} {worst:.1e}")
    assert worst <= 1e-9


# ---------------------------------------------------------------------------
# 7. dynamics calibration
# ---------------------------------------------------------------------------


@criterion(7, "dynamics calibration")
def test_criterion_07(record_property):
    quiet = DynamicsConfig(wheel_noise_std=0.0, depth_noise_std=0.0)
    hall = open_hall(10.0, 10.0)
    rng = np.random.default_rng(7)
    for theta in np.linspace(-np.pi, np.pi, 17)[:-1]:
        s0 = AgentState(5.0, 5.0, float(theta))
        s1, _ = step(s0, GO_FORWARD, hall, quiet, rng)
        assert math.hypot(s1.x - s0.x, s1.y - s0.y) == pytest.approx(0.25, abs=1e-15)
        for a, sign in ((TURN_LEFT, 1), (TURN_RIGHT, -1)):
            s2, _ = step(s0, a, hall, quiet, rng)
            turn = (s2.theta - s0.theta + np.pi) % (2 * np.pi) - np.pi
            assert turn == pytest.approx(sign * math.pi / 4, abs=1e-15)
    s1, _ = step(AgentState(5.0, 5.0, 0.0), GO_FORWARD, hall, quiet, rng)
    assert (s1.x, s1.y, s1.theta) == (5.25, 5.0, 0.0)

    collisions = 0
    for seed in range(10):
        plan = generate_floorplan(seed)
        env = NavEnv(plan, DynamicsConfig(), np.random.default_rng(seed))
        env.reset()
        before = env.state
        for _ in range(1000):
            a = int(rng.choice(3, p=[0.6, 0.2, 0.2]))
            _, hit = env.step(a)
            s = env.state
            assert plan.is_free_point(s.x, s.y)
            if hit:
                collisions += 1
                assert (s.x, s.y, s.theta) == (before.x, before.y, before.theta)
            before = s
    record_property("detail", f"10k steps, {collisions} reverted collisions")
    assert collisions > 0


# ---------------------------------------------------------------------------
# 8. reward accounting
# ---------------------------------------------------------------------------


@criterion(8, "reward accounting")
@pytest.mark.parametrize("task", ["roaming", "coverage", "search"])
def test_criterion_08(task, record_property):
    cfg = TrainConfig(task=TaskConfig(kind=task, horizon=100),
                      policy=PolicyConfig.from_profile("desk", kind="random"))
    net = random_policy(cfg)
    plans = [generate_floorplan(s) for s in range(10)]
    total = 0.0
    for e in range(1000):
        tr = run_episode(net, plans[e % 10], e % 10, cfg, 8, e, 1.0)
        m = metrics(tr, cfg.task)
        assert m["reward"] == closed_form_reward(m, cfg.task), e
        total += m["reward"]
    record_property("detail", f"{task} mean {total / 1000:.2f}")


# ---------------------------------------------------------------------------
# 9. toy-scale learning
# ---------------------------------------------------------------------------

TOY_PRETRAIN_ITERATIONS = 2000
TOY_TRAIN_ITERATIONS = {"roaming": 2000, "coverage": 3000, "search": 5000}
TOY_EVAL_SEED = 20_000
TOY_SEEDS = (0, 1, 2)


def toy_config(task: str, kind: str, seed: int, iterations: int) -> TrainConfig:
    return TrainConfig(task=TaskConfig(kind=task, horizon=100),
                       policy=PolicyConfig.from_profile("desk", kind=kind),
                       plan_seeds=list(range(10)), initial_episodes=200, buffer_capacity=1000,
                       refresh_interval=50, target_sync_interval=250, validate_interval=500,
                       max_iterations=iterations, patience=100, seed=seed)


def toy_scores(task: str, kinds: tuple) -> dict:
    """Held-out reward of each policy kind, averaged over seeds.

    Each trained policy's best-validation parameters are re-evaluated on the
    validation plans with episode seeds unused during training.
    """
    scores = {k: [] for k in ("random",) + kinds}
    for seed in TOY_SEEDS:
        base = toy_config(task, "smt", seed, TOY_PRETRAIN_ITERATIONS)
        _, val = split_plans(base)
        scores["random"].append(mean_reward(evaluate(random_policy(base), val, base,
                                                     base_seed=TOY_EVAL_SEED)))
        pre = pretrain_embeddings(base)
        for kind in kinds:
            cfg = toy_config(task, kind, seed, TOY_TRAIN_ITERATIONS[task])
            res = train(cfg, init_store=pre)
            net = PolicyNetwork(cfg.policy, res.store)
            scores[kind].append(mean_reward(evaluate(net, val, cfg, base_seed=TOY_EVAL_SEED)))
    return {k: float(np.mean(v)) for k, v in scores.items()}


@pytest.mark.slow
@criterion(9, "toy-scale learning")
@pytest.mark.parametrize("task", ["roaming", "coverage", "search"])
def test_criterion_09(task, record_property):
    kinds = ("smt", "sm_pool") if task == "coverage" else ("smt",)
    t0 = time.perf_counter()
    s = toy_scores(task, kinds)
    record_property("detail", f"{task} " + " ".join(f"{k}={v:.1f}" for k, v in s.items())
                    + f" ({time.perf_counter() - t0:.0f}s)")
    assert s["smt"] >= 2 * s["random"]
    if task == "coverage":
        assert s["smt"] >= s["sm_pool"]


# ---------------------------------------------------------------------------
# 10 and 11. ablation harnesses and determinism (through the CLI)
# ---------------------------------------------------------------------------

TINY = {
    "profile": "desk",
    "seeds": [0],
    "task": {"kind": "coverage", "horizon": 15},
    "policy": {"d_x": 16, "d_k": 16, "heads": 2, "q_hidden": 16, "capacity": 10,
               "num_centers": 4},
    "train": {"plan_seeds": [0, 1, 2], "validation_fraction": 0.34, "batch_size": 8,
              "initial_episodes": 4, "buffer_capacity": 20, "refresh_interval": 5,
              "target_sync_interval": 5, "validate_interval": 5, "validation_episodes": 2,
              "max_iterations": 10, "pretrain_iterations": 5},
    "eval": {"episodes": 3},
    "ablation": {"noise_stds": [0.0, 0.5, 1.0]},
}


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    cfg = root / "cfg.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    assert main(["train", "--config", str(cfg), "--out", str(root / "train")]) == EXIT_OK
    return root, cfg, root / "train" / "seed_0" / "best.ckpt"


def _csv(path):
    lines = path.read_text().splitlines()
    head = lines[0].split(",")
    return [dict(zip(head, ln.split(","))) for ln in lines[1:]]


@criterion(10, "ablation harnesses")
def test_criterion_10_centers(tiny, record_property):
    root, cfg, _ = tiny
    assert main(["ablate", "centers", "--config", str(cfg), "--out", str(root / "c")]) == EXIT_OK
    rows = _csv(root / "c" / "centers.csv")
    assert [r["centers"] for r in rows] == ["fps", "window", "static"]
    for r in rows:
        for t in ("roaming", "coverage", "search"):
            float(r[t])
    record_property("detail", "centers 3x3")


@criterion(10, "ablation harnesses")
def test_criterion_10_noise_sweep(tiny):
    root, cfg, ckpt = tiny
    assert main(["ablate", "noise_sweep", "--config", str(cfg), "--checkpoint", str(ckpt),
                 "--out", str(root / "n")]) == EXIT_OK
    rows = _csv(root / "n" / "noise_sweep.csv")
    clean_cfg = dict(TINY, dynamics={"wheel_noise_std": 0.0})
    (root / "clean.yaml").write_text(yaml.safe_dump(clean_cfg))
    assert main(["eval", "--config", str(root / "clean.yaml"), "--checkpoint", str(ckpt),
                 "--out", str(root / "clean")]) == EXIT_OK
    clean = _csv(root / "clean" / "summary.csv")[0]
    zero = [r for r in rows if float(r["noise_std"]) == 0.0]
    assert len(zero) == 2
    for r in zero:
        for k in ("reward", "distance", "collisions", "covered_cells", "found_classes", "ratio"):
            assert r[k] == clean[k]


@criterion(10, "ablation harnesses")
def test_criterion_10_temporal(tiny):
    root, cfg, _ = tiny
    assert main(["ablate", "temporal_embedding", "--config", str(cfg),
                 "--out", str(root / "t")]) == EXIT_OK
    rows = _csv(root / "t" / "temporal_embedding.csv")
    assert [(r["temporal_mode"], float(r["noise_std"])) for r in rows] == [
        (m, s) for m in ("exp", "sin", "none") for s in (0.0, 0.5, 1.0)]


@criterion(11, "determinism")
@pytest.mark.parametrize("command", ["train", "eval", "export-trajectories", "ablate"])
def test_criterion_11(command, tiny, tmp_path):
    root, cfg, ckpt = tiny
    if command == "ablate":
        cfg = tmp_path / "ablate.yaml"
        cfg.write_text(yaml.safe_dump(dict(TINY, ablation={"capacities": [2, 5]})))
    head = {"train": ["train"], "eval": ["eval", "--checkpoint", str(ckpt)],
            "export-trajectories": ["export-trajectories", "--checkpoint", str(ckpt)],
            "ablate": ["ablate", "memory_capacity"]}[command]
    outs = []
    for i in range(2):
        out = tmp_path / str(i)
        assert main(head + ["--config", str(cfg), "--out", str(out)]) == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        outs.append({name: (out / name).read_bytes() for name in manifest["artifacts"]})
    assert outs[0] and outs[0] == outs[1]
