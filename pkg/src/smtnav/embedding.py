"""Observation embedding: sensor, pose and previous-action encoders.

``psi(o) = FC([phi_I(rays), phi_p(pose), phi_a(prev_action)])``.  The ray
and action encoders depend only on the stored observation; the pose encoder
sees the pose re-expressed in the current agent frame and is the only part
recomputed when a memory is re-read from a new pose.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import ConfigurationError

NUM_ACTIONS = 3
NONE_ACTION = 3  # previous-action token at t = 0
MODALITIES = ("depth", "semantic", "pose", "action")
TEMPORAL_MODES = ("exp", "sin", "none")


@dataclass(frozen=True)
class Observation:
    """Sensor tuple of one time step.

    ``labels`` holds the semantic channel of each ray (0 = none); the one-hot
    matrix is derived from it.
    """

    depth: np.ndarray
    valid: np.ndarray
    labels: np.ndarray
    pose: np.ndarray
    prev_action: int
    t: int
    num_channels: int = 8

    @property
    def num_rays(self) -> int:
        return self.depth.shape[0]

    @property
    def semantic(self) -> np.ndarray:
        out = np.zeros((self.num_rays, self.num_channels))
        out[np.arange(self.num_rays), self.labels] = 1.0
        return out


@dataclass
class EmbeddingConfig:
    num_rays: int = 30
    num_channels: int = 8          # none, wall, six target classes
    depth_range: float = 5.0
    image_hidden: int = 64
    image_width: int = 64
    pose_width: int = 16
    action_width: int = 16
    d_x: int = 128
    pose_scale: float = 5.0        # lambda
    temporal_mode: str = "exp"
    temporal_tau: float = 100.0    # steps
    temporal_reference: str = "age"  # or "absolute"
    sin_period: float = 10.0       # steps per radian of the sinusoidal pair
    dropped: tuple = ()            # modalities zero-masked at the input

    def validate(self) -> None:
        if self.temporal_mode not in TEMPORAL_MODES:
            raise ConfigurationError(f"temporal_mode must be one of {TEMPORAL_MODES}")
        if self.temporal_reference not in ("age", "absolute"):
            raise ConfigurationError("temporal_reference must be 'age' or 'absolute'")
        if self.pose_scale <= 0 or self.temporal_tau <= 0 or self.sin_period <= 0:
            raise ConfigurationError("pose_scale, temporal_tau and sin_period must be positive")
        bad = set(self.dropped) - set(MODALITIES)
        if bad:
            raise ConfigurationError(f"unknown modalities {sorted(bad)}")

    @property
    def image_features(self) -> int:
        return self.num_rays * (2 + self.num_channels)

    @property
    def pose_features(self) -> int:
        return 6 if self.temporal_mode == "sin" else 5


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


def temporal_term(age, mode: str, tau: float, sin_period: float = 10.0) -> np.ndarray:
    age = np.asarray(age, dtype=np.float64)
    if mode == "exp":
        return np.exp(-age / tau)[..., None]
    if mode == "sin":
        return np.stack([np.sin(age / sin_period), np.cos(age / sin_period)], axis=-1)
    return np.ones(age.shape + (1,))


def normalize_pose(p_world, frame, age, mode: str = "exp", lam: float = 5.0,
                   tau: float = 100.0, sin_period: float = 10.0) -> np.ndarray:
    """Pose in the frame's coordinates as ``(x/lam, y/lam, cos, sin, temporal...)``.

    Accepts a single pose ``(3,)`` or a stack ``(n, 3)`` with matching ages.
    """
    p = np.asarray(p_world, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    f = np.asarray(frame, dtype=np.float64)
    dx = p[:, 0] - f[0]
    dy = p[:, 1] - f[1]
    c, s = np.cos(f[2]), np.sin(f[2])
    rel_x = c * dx + s * dy
    rel_y = -s * dx + c * dy
    rel_t = p[:, 2] - f[2]
    ages = np.broadcast_to(np.asarray(age, dtype=np.float64), (p.shape[0],))
    out = np.concatenate([
        np.stack([rel_x / lam, rel_y / lam, np.cos(rel_t), np.sin(rel_t)], axis=1),
        temporal_term(ages, mode, tau, sin_period),
    ], axis=1)
    return out[0] if single else out


def image_features(o: Observation, depth_range: float = 5.0) -> np.ndarray:
    return np.concatenate([o.depth / depth_range, o.valid.astype(np.float64),
                           o.semantic.ravel()])


def action_onehot(a) -> np.ndarray:
    a = np.atleast_1d(np.asarray(a, dtype=np.int64))
    out = np.zeros((a.shape[0], NUM_ACTIONS + 1))
    out[np.arange(a.shape[0]), a] = 1.0
    return out


class Embedder:
    """Embedding networks bound to parameters in a ``ParamStore`` (prefix ``emb.``)."""

    PREFIX = "emb."

    def __init__(self, cfg: EmbeddingConfig, store: ParamStore):
        cfg.validate()
        self.cfg = cfg
        self.store = store
        names = ("img_w1", "img_b1", "img_w2", "img_b2", "pose_w", "pose_b",
                 "act_w", "act_b", "fc_w", "fc_b")
        for n in names:
            if self.PREFIX + n not in store:
                raise ConfigurationError(f"parameter store lacks {self.PREFIX + n}")
        if store[self.PREFIX + "img_w1"].rows != cfg.image_features:
            raise ConfigurationError(
                f"ray encoder expects {store[self.PREFIX + 'img_w1'].rows} inputs, "
                f"config gives {cfg.image_features} ({cfg.num_rays} rays)")
        if store[self.PREFIX + "pose_w"].rows != cfg.pose_features:
            raise ConfigurationError("pose encoder width does not match the temporal mode")

    @staticmethod
    def init_params(cfg: EmbeddingConfig, store: ParamStore, rng: np.random.Generator) -> None:
        cfg.validate()
        p = Embedder.PREFIX

        def w(name, shape):
            store.add(p + name, rng.normal(0.0, shape[0] ** -0.5, size=shape))

        def b(name, n):
            store.add(p + name, np.zeros((1, n)))

        w("img_w1", (cfg.image_features, cfg.image_hidden))
        b("img_b1", cfg.image_hidden)
        w("img_w2", (cfg.image_hidden, cfg.image_width))
        b("img_b2", cfg.image_width)
        w("pose_w", (cfg.pose_features, cfg.pose_width))
        b("pose_b", cfg.pose_width)
        w("act_w", (NUM_ACTIONS + 1, cfg.action_width))
        b("act_b", cfg.action_width)
        w("fc_w", (cfg.image_width + cfg.pose_width + cfg.action_width, cfg.d_x))
        b("fc_b", cfg.d_x)

    def __getattr__(self, item):
        if item.startswith("_"):
            raise AttributeError(item)
        return self.store[self.PREFIX + item]

    @property
    def param_names(self) -> list[str]:
        return [n for n in self.store.names() if n.startswith(self.PREFIX)]

    @property
    def frozen(self) -> bool:
        return not any(self.store.is_trainable(n) for n in self.param_names)

    def fingerprint(self) -> str:
        h = hashlib.sha1()
        for n in self.param_names:
            h.update(n.encode())
            h.update(self.store[n].value.tobytes())
        return h.hexdigest()

    # -- modality encoders ---------------------------------------------

    def _mask(self, feats: np.ndarray) -> np.ndarray:
        d = self.cfg.dropped
        if "depth" not in d and "semantic" not in d:
            return feats
        feats = feats.copy()
        r = self.cfg.num_rays
        if "depth" in d:
            feats[:, :2 * r] = 0.0
        if "semantic" in d:
            feats[:, 2 * r:] = 0.0
        return feats

    def encode_image(self, feats) -> Tensor:
        x = Tensor(self._mask(np.atleast_2d(feats)))
        h = ad.relu(ad.linear(x, self.img_w1, self.img_b1))
        return ad.relu(ad.linear(h, self.img_w2, self.img_b2))

    def encode_pose(self, pose_feats) -> Tensor:
        x = np.atleast_2d(pose_feats)
        if "pose" in self.cfg.dropped:
            x = np.zeros_like(x)
        return ad.relu(ad.linear(Tensor(x), self.pose_w, self.pose_b))

    def encode_action(self, actions) -> Tensor:
        x = action_onehot(actions)
        if "action" in self.cfg.dropped:
            x = np.zeros_like(x)
        return ad.relu(ad.linear(Tensor(x), self.act_w, self.act_b))

    def combine(self, img: Tensor, pose: Tensor, act: Tensor) -> Tensor:
        return ad.linear(ad.concat_cols(img, pose, act), self.fc_w, self.fc_b)

    def pose_features(self, poses, frame, steps, now) -> np.ndarray:
        c = self.cfg
        steps = np.asarray(steps, dtype=np.float64)
        ref = now - steps if c.temporal_reference == "age" else steps
        return normalize_pose(np.atleast_2d(poses), frame, ref, c.temporal_mode,
                              c.pose_scale, c.temporal_tau, c.sin_period)

    def embed_many(self, img_feats, poses, actions, steps, frame, now) -> Tensor:
        """Full ``psi`` rows for stacked raw observation parts."""
        pf = self.pose_features(poses, frame, steps, now)
        return self.combine(self.encode_image(img_feats), self.encode_pose(pf),
                            self.encode_action(actions))


def embed_observation(o: Observation, frame, emb: Embedder, now: int | None = None) -> Tensor:
    """``psi(o)`` as a ``1 x d_x`` tensor, with the pose taken relative to ``frame``."""
    if o.num_rays != emb.cfg.num_rays or o.num_channels != emb.cfg.num_channels:
        raise ConfigurationError(
            f"observation has {o.num_rays} rays x {o.num_channels} channels, "
            f"embedder expects {emb.cfg.num_rays} x {emb.cfg.num_channels}")
    now = o.t if now is None else now
    feats = image_features(o, emb.cfg.depth_range)[None, :]
    return emb.embed_many(feats, o.pose[None, :], [o.prev_action], [o.t], frame, now)

