"""Synthetic feature-sequence episodes and the FGR1 record format.

The generator stands in for an upstream CNN feature extractor: each
episode is a smooth, strictly non-negative patch-feature trajectory built
from per-patch sinusoids on top of an identity signature.  Tampered
episodes either splice patch regions from a second identity or re-draw
the sinusoid phases every frame, which breaks temporal coherence while
each individual frame stays plausible.

Files use the FGR1 layout: 4-byte magic, u32 version, u32 patches,
u32 features, u32 delta, then per episode u32 id, u32 frame count,
u8 label, and two f32 little-endian blocks (frames, futures).  Values are
stored as f32 and widened to f64 in memory.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .memory import FeatureGrid

MAGIC = b"FGR1"
VERSION = 1

REAL, FAKE = 0, 1
TAMPER_MODES = ("patch-splice", "temporal-break")


@dataclass
class Episode:
    """One video's ordered frame records.

    labels are constant within an episode; futures[t] is the grid of the
    same process `delta` frames after frames[t].
    """

    episode_id: int
    frames: list[FeatureGrid]
    labels: list[int]
    futures: list[FeatureGrid]
    source: str = "synth"

    def __post_init__(self):
        if not (len(self.frames) == len(self.labels) == len(self.futures)):
            raise ValueError("frames, labels and futures must have equal length")
        if len(set(self.labels)) > 1:
            raise ValueError("labels must be constant within an episode")

    @property
    def label(self) -> int:
        return self.labels[0]

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class SynthWorld:
    """Latent process parameters for one synthetic identity pairing.

    identity_scale sets how strongly the per-episode identity shifts the
    baseline relative to the shared expression dynamics; smaller values
    make episodes more alike and the tamper signal easier to isolate.
    """

    num_patches: int
    feature_dim: int
    identity_dim: int = 8
    identity_scale: float = 1.0
    noise_width: float = 0.05
    tamper_mode: str = "temporal-break"

    def __post_init__(self):
        if self.tamper_mode not in TAMPER_MODES:
            raise ValueError(f"unknown tamper mode {self.tamper_mode!r}")
        if min(self.num_patches, self.feature_dim, self.identity_dim) <= 0:
            raise ValueError("world dimensions must be positive")
        if self.noise_width < 0 or self.identity_scale < 0:
            raise ValueError("noise width and identity scale must be non-negative")


@dataclass
class _Process:
    """Per-patch sinusoid schedule over an identity baseline."""

    base: np.ndarray    # (patches, features) from the identity latent
    amp: np.ndarray     # (patches, features)
    omega: np.ndarray   # (patches,)
    phase: np.ndarray   # (patches,)

    def grid(self, t: float, rng: np.random.Generator | None, noise_width: float,
             phase: np.ndarray | None = None) -> np.ndarray:
        ph = self.phase if phase is None else phase
        wave = np.sin(self.omega[:, None] * t + ph[:, None])
        arg = self.base + self.amp * wave
        if rng is not None and noise_width > 0:
            arg = arg + rng.normal(0.0, noise_width, size=arg.shape)
        return np.logaddexp(0.0, arg)  # softplus keeps every entry positive

    def step_bound(self, stride: float = 1.0) -> float:
        """Upper bound on ||grid(t+stride) - grid(t)|| with zero noise;
        softplus is 1-Lipschitz and |sin(w(t+s)+p) - sin(wt+p)| <= min(2, w s)."""
        per_patch = np.minimum(2.0, np.abs(self.omega) * stride)
        return float(np.sqrt(((self.amp * per_patch[:, None]) ** 2).sum()))


def _draw_process(world: SynthWorld, rng: np.random.Generator) -> _Process:
    identity = rng.normal(0.0, 1.0, size=world.identity_dim)
    mix = rng.normal(0.0, 1.0 / np.sqrt(world.identity_dim),
                     size=(world.num_patches, world.feature_dim, world.identity_dim))
    base = world.identity_scale * (mix @ identity)
    amp = rng.uniform(0.5, 1.5, size=(world.num_patches, world.feature_dim))
    omega = rng.uniform(0.05, 0.3, size=world.num_patches)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=world.num_patches)
    return _Process(base=base, amp=amp, omega=omega, phase=phase)


def synth_episode(world: SynthWorld, length: int, delta: int, seed: int,
                  fake: bool = False, stride: int = 1, episode_id: int = 0) -> Episode:
    """Generate one episode of `length` frames with future pairs at +delta.

    Real episodes follow one smooth process; tampered episodes either
    splice a random patch subset from a second identity (patch-splice) or
    re-draw all phases each frame (temporal-break).
    """
    if length <= delta or delta < 1:
        raise ValueError("episode length must exceed delta >= 1")
    if stride < 1:
        raise ValueError("stride must be positive")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    proc = _draw_process(world, rng)
    tag = "synth:real"

    splice_mask = None
    proc_b = None
    if fake and world.tamper_mode == "patch-splice":
        proc_b = _draw_process(world, rng)
        splice_mask = np.zeros(world.num_patches, dtype=bool)
        chosen = rng.choice(world.num_patches, size=max(1, world.num_patches // 2),
                            replace=False)
        splice_mask[chosen] = True
        tag = "synth:patch-splice"
    elif fake and world.tamper_mode == "temporal-break":
        tag = "synth:temporal-break"

    total = length * stride + delta + 1
    grids = np.empty((total, world.num_patches, world.feature_dim))
    for t in range(total):
        if fake and world.tamper_mode == "temporal-break":
            phase = rng.uniform(0.0, 2.0 * np.pi, size=world.num_patches)
            grids[t] = proc.grid(float(t), rng, world.noise_width, phase=phase)
        elif fake and world.tamper_mode == "patch-splice":
            own = proc.grid(float(t), rng, world.noise_width)
            other = proc_b.grid(float(t), rng, world.noise_width)
            own[splice_mask] = other[splice_mask]
            grids[t] = own
        else:
            grids[t] = proc.grid(float(t), rng, world.noise_width)

    frames, futures = [], []
    for j in range(length):
        t = j * stride
        frames.append(FeatureGrid(grids[t].copy()))
        futures.append(FeatureGrid(grids[t + delta].copy()))
    label = FAKE if fake else REAL
    return Episode(episode_id=episode_id, frames=frames, labels=[label] * length,
                   futures=futures, source=tag)


def generate_dataset(world: SynthWorld, episodes: int, length: int, delta: int,
                     seed: int, stride: int = 1, fake_fraction: float = 0.5,
                     ) -> list[Episode]:
    """Balanced list of episodes; even indices real, odd tampered by default."""
    if episodes <= 0:
        raise ValueError("need at least one episode")
    n_fake = int(round(episodes * fake_fraction))
    flags = [i % 2 == 1 for i in range(episodes)]
    if sum(flags) != n_fake:
        flags = [i < n_fake for i in range(episodes)]
    seeds = np.random.SeedSequence(seed).generate_state(episodes)
    return [synth_episode(world, length, delta, int(seeds[i]), fake=flags[i],
                          stride=stride, episode_id=i)
            for i in range(episodes)]


# -- FGR1 files -----------------------------------------------------------------


def write_records(path, episodes: list[Episode], delta: int | None = None) -> int:
    """Write episodes to an FGR1 file; returns the episode count."""
    if episodes:
        k = episodes[0].frames[0].num_patches
        d = episodes[0].frames[0].feature_dim
    else:
        k = d = 0
    delta = 0 if delta is None else int(delta)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IIII", VERSION, k, d, delta))
    for ep in episodes:
        frames = np.stack([g.patches for g in ep.frames]).astype("<f4")
        futures = np.stack([g.patches for g in ep.futures]).astype("<f4")
        if frames.shape[1:] != (k, d):
            raise ValueError(f"episode {ep.episode_id} grid shape {frames.shape[1:]} "
                             f"does not match header ({k}, {d})")
        buf.write(struct.pack("<IIB", ep.episode_id, len(ep), ep.label))
        buf.write(frames.tobytes())
        buf.write(futures.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())
    return len(episodes)


def read_header(path) -> dict:
    """Header of an FGR1 file: version, num_patches, feature_dim, delta."""
    with open(path, "rb") as fh:
        raw = fh.read(20)
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an FGR1 file (bad magic)")
    if len(raw) != 20:
        raise ValueError(f"{path}: truncated header")
    version, k, d, delta = struct.unpack("<IIII", raw[4:])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    return {"version": version, "num_patches": k, "feature_dim": d, "delta": delta}


def read_records(path) -> list[Episode]:
    """Read all episodes from an FGR1 file."""
    header = read_header(path)
    k, d = header["num_patches"], header["feature_dim"]
    with open(path, "rb") as fh:
        raw = fh.read()
    view = io.BytesIO(raw)
    view.read(20)

    episodes: list[Episode] = []
    while True:
        block = view.read(9)
        if not block:
            break
        if len(block) != 9:
            raise ValueError(f"{path}: truncated episode header")
        ep_id, length, label = struct.unpack("<IIB", block)
        count = length * k * d
        payload = view.read(2 * 4 * count)
        if len(payload) != 2 * 4 * count:
            raise ValueError(f"{path}: truncated episode payload (id {ep_id})")
        arr = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        frames_arr = arr[:count].reshape(length, k, d)
        futures_arr = arr[count:].reshape(length, k, d)
        episodes.append(Episode(
            episode_id=ep_id,
            frames=[FeatureGrid(frames_arr[t].copy()) for t in range(length)],
            labels=[int(label)] * length,
            futures=[FeatureGrid(futures_arr[t].copy()) for t in range(length)],
            source=f"file:{path}",
        ))
    return episodes


def split(episodes: list[Episode], ratios: tuple[float, float, float], seed: int,
          ) -> tuple[list[Episode], list[Episode], list[Episode]]:
    """Shuffle by seed and split at episode granularity.

    Validation and test sizes are floored; the remainder goes to train.
    Raises if a positive ratio would receive zero episodes.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must sum to 1")
    if any(r < 0 for r in ratios):
        raise ValueError("ratios must be non-negative")
    n = len(episodes)
    n_val = int(n * ratios[1])
    n_test = int(n * ratios[2])
    n_train = n - n_val - n_test
    for size, ratio, name in ((n_train, ratios[0], "train"), (n_val, ratios[1], "val"),
                              (n_test, ratios[2], "test")):
        if ratio > 0 and size == 0:
            raise ValueError(f"too few episodes for a non-empty {name} split")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    order = rng.permutation(n)
    shuffled = [episodes[i] for i in order]
    return (shuffled[:n_train],
            shuffled[n_train:n_train + n_val],
            shuffled[n_train + n_val:])
