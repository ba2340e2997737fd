"""Q-network policies over the scene memory: SMT, SMT+factorization, pooling, reactive, random."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import (
    attention_params_from_store,
    att_fact,
    decode,
    encode,
    init_attention_params,
)
from .autodiff import ParamStore, Tensor
from .embedding import NUM_ACTIONS, EmbeddingConfig, Embedder, Observation, embed_observation
from .errors import ConfigurationError, ContractError
from .memory import SceneMemory, fps_indices

POLICY_KINDS = ("smt", "smt_fact", "sm_pool", "reactive", "random")
CENTER_KINDS = ("fps", "window", "static")
MEMORY_KINDS = ("smt", "smt_fact", "sm_pool")

PROFILES = {
    "default": {"d_x": 128, "d_k": 128, "heads": 8, "q_hidden": 128},
    "desk": {"d_x": 64, "d_k": 64, "heads": 4, "q_hidden": 64},
}


@dataclass
class PolicyConfig:
    kind: str = "smt"
    center_kind: str = "fps"
    num_centers: int = 100
    capacity: int = 500
    temperature: float = 1.0
    d_x: int = 128
    d_k: int = 128
    heads: int = 8
    q_hidden: int = 128
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)

    @classmethod
    def from_profile(cls, profile: str = "default", **overrides) -> "PolicyConfig":
        try:
            dims = dict(PROFILES[profile])
        except KeyError:
            raise ConfigurationError(f"unknown profile {profile!r}; have {sorted(PROFILES)}")
        emb = overrides.pop("embedding", None) or EmbeddingConfig()
        dims.update(overrides)
        emb.d_x = dims["d_x"]
        return cls(embedding=emb, **dims)

    def validate(self) -> None:
        if self.kind not in POLICY_KINDS:
            raise ConfigurationError(f"policy kind must be one of {POLICY_KINDS}")
        if self.center_kind not in CENTER_KINDS:
            raise ConfigurationError(f"center kind must be one of {CENTER_KINDS}")
        if self.kind == "smt_fact" and self.num_centers < 1:
            raise ConfigurationError("smt_fact needs at least one center")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        if self.capacity < 1:
            raise ConfigurationError("memory capacity must be at least 1")
        if self.embedding.d_x != self.d_x:
            raise ConfigurationError(
                f"embedding width {self.embedding.d_x} differs from model width {self.d_x}")
        if self.d_k % self.heads or self.d_x % self.heads:
            raise ConfigurationError("d_k and d_x must be divisible by heads")
        self.embedding.validate()


@dataclass
class ActionDistribution:
    probs: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)


def softmax_distribution(q, temperature: float = 1.0) -> ActionDistribution:
    q = np.asarray(q, dtype=np.float64)
    z = q / temperature
    e = np.exp(z - z.max())
    return ActionDistribution(e / e.sum(), q)


def sample_action(d: ActionDistribution, rng: np.random.Generator) -> int:
    """Inverse-CDF draw; consumes exactly one uniform from ``rng``."""
    u = rng.random()
    cdf = np.cumsum(d.probs)
    for a in range(len(cdf) - 1):
        if u < cdf[a]:
            return a
    return len(cdf) - 1


def greedy_action(d: ActionDistribution) -> int:
    return int(np.argmax(d.q))


class PolicyNetwork:
    """Parameter bundle plus the batched Q computation for one policy kind."""

    def __init__(self, cfg: PolicyConfig, store: ParamStore | None = None,
                 rng: np.random.Generator | None = None):
        cfg.validate()
        self.cfg = cfg
        if store is None:
            store = ParamStore()
            self.init_params(cfg, store, rng or np.random.default_rng(0))
        self.store = store
        self.embedder = Embedder(cfg.embedding, store) if cfg.kind != "random" else None
        h = cfg.heads
        if cfg.kind == "smt":
            self.enc = attention_params_from_store(store, "enc", h)
        if cfg.kind == "smt_fact":
            self.fact_in = attention_params_from_store(store, "fact_in", h)
            self.fact_out = attention_params_from_store(store, "fact_out", h)
        if cfg.kind in ("smt", "smt_fact"):
            self.dec = attention_params_from_store(store, "dec", h)

    @staticmethod
    def init_params(cfg: PolicyConfig, store: ParamStore, rng: np.random.Generator) -> None:
        cfg.validate()
        if cfg.kind == "random":
            return
        Embedder.init_params(cfg.embedding, store, rng)
        d, dk, h = cfg.d_x, cfg.d_k, cfg.heads
        if cfg.kind == "smt":
            init_attention_params(store, "enc", d, d, dk, h, rng)
        if cfg.kind == "smt_fact":
            init_attention_params(store, "fact_in", d, d, dk, h, rng)
            init_attention_params(store, "fact_out", d, d, dk, h, rng)
            if cfg.center_kind == "static":
                store.add("centers.static", rng.normal(0.0, 0.1, size=(cfg.num_centers, d)))
        if cfg.kind in ("smt", "smt_fact"):
            init_attention_params(store, "dec", d, d, dk, h, rng)
        q_in = 2 * d if cfg.kind == "sm_pool" else d
        store.add("q.fc1_w", rng.normal(0.0, q_in ** -0.5, size=(q_in, cfg.q_hidden)))
        store.add("q.fc1_b", np.zeros((1, cfg.q_hidden)))
        store.add("q.fc2_w", rng.normal(0.0, cfg.q_hidden ** -0.5, size=(cfg.q_hidden, NUM_ACTIONS)))
        store.add("q.fc2_b", np.zeros((1, NUM_ACTIONS)))

    @property
    def uses_memory(self) -> bool:
        return self.cfg.kind in MEMORY_KINDS

    # -- centers for the factorized encoder ------------------------------

    def centers(self, mem: Tensor, offsets: np.ndarray) -> tuple[Tensor, np.ndarray]:
        k = self.cfg.num_centers
        kind = self.cfg.center_kind
        idx, c_off = [], [0]
        if kind == "static":
            static = self.store["centers.static"]
            nseg = len(offsets) - 1
            rows = np.tile(np.arange(static.rows), nseg)
            c_off = np.arange(nseg + 1, dtype=np.int64) * static.rows
            return ad.take_rows(static, rows), c_off
        vals = mem.value
        for b in range(len(offsets) - 1):
            lo, hi = int(offsets[b]), int(offsets[b + 1])
            kk = min(k, hi - lo)
            if kind == "fps":
                sel = fps_indices(vals[lo:hi], kk, hi - lo - 1) + lo
            else:
                sel = np.arange(hi - kk, hi)
            idx.append(sel)
            c_off.append(c_off[-1] + kk)
        return ad.take_rows(mem, np.concatenate(idx)), np.asarray(c_off, dtype=np.int64)

    # -- Q values -------------------------------------------------------

    def q_head(self, x: Tensor) -> Tensor:
        s = self.store
        h = ad.relu(ad.linear(x, s["q.fc1_w"], s["q.fc1_b"]))
        return ad.linear(h, s["q.fc2_w"], s["q.fc2_b"])

    def q_values(self, mem: Tensor, offsets) -> Tensor:
        """Q rows for a batch of memories stacked in ``mem``.

        Each segment's last row is the current observation's embedding and
        serves as the decoder query.
        """
        offsets = np.asarray(offsets, dtype=np.int64)
        if np.any(np.diff(offsets) < 1):
            raise ContractError("every memory in the batch must hold at least one element")
        query = ad.take_rows(mem, offsets[1:] - 1)
        kind = self.cfg.kind
        if kind == "reactive":
            return self.q_head(query)
        if kind == "sm_pool":
            return self.q_head(ad.concat_cols(ad.segment_max(mem, offsets), query))
        if kind == "smt":
            ctx = encode(mem, self.enc, offsets)
        else:
            centers, c_off = self.centers(mem, offsets)
            ctx = att_fact(mem, centers, self.fact_in, self.fact_out, offsets, c_off)
        return self.q_head(decode(query, ctx, self.dec, offsets))

    def memory_matrix(self, o: Observation, memory: SceneMemory | None) -> Tensor:
        if self.uses_memory:
            if memory is None or len(memory) == 0:
                raise ContractError(f"{self.cfg.kind} policy needs a non-empty memory")
            return memory.materialize(o.pose, self.embedder, o.t)
        return embed_observation(o, o.pose, self.embedder, o.t)

    def forward(self, o: Observation, memory: SceneMemory | None,
                temperature: float | None = None) -> ActionDistribution:
        t = self.cfg.temperature if temperature is None else temperature
        if self.cfg.kind == "random":
            return ActionDistribution(np.full(NUM_ACTIONS, 1.0 / NUM_ACTIONS),
                                      np.zeros(NUM_ACTIONS))
        with ad.no_grad():
            mem = self.memory_matrix(o, memory)
            q = self.q_values(mem, np.array([0, mem.rows], dtype=np.int64))
        return softmax_distribution(q.value[0], t)


def forward(o: Observation, memory: SceneMemory | None, net: PolicyNetwork,
            temperature: float | None = None) -> ActionDistribution:
    return net.forward(o, memory, temperature)
