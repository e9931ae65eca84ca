"""Synthetic paired video/audio latents with known alignment, and the sync oracle.

A clip is driven by one event track on a fine timeline of ``T_c`` ticks.  The
video latent carries the track, average-pooled onto ``T_v`` frames, along a
unit direction ``u_v`` on top of a per-class bias; the audio latent does the
same on ``T_a`` frames along ``u_a``.  Because the mixing is known, the track
can be read back from any latent by projection, and alignment between a
video and an audio latent is measured by cross-correlating the read-back
tracks.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, fields
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ShapeError, TooManyEvents
from .latent import CondSet, Latent
from .rng import Rng, derive_seed


@dataclass(frozen=True)
class GenParams:
    T_v: int = 16
    T_a: int = 24
    T_c: int = 48
    P_v: int = 12
    P_a: int = 8
    K: int = 5
    sigma_obs: float = 0.05
    smooth_w: int = 2
    n_classes: int = 4
    T_r: int = 6
    d_c: int = 16
    table_seed: int = 0

    def __post_init__(self):
        if self.T_c % self.T_v or self.T_c % self.T_a:
            raise ValueError(f"T_c={self.T_c} must be a multiple of T_v={self.T_v} and T_a={self.T_a}")
        if self.sigma_obs < 0:
            raise ValueError("sigma_obs must be non-negative")
        if self.T_r > self.T_a:
            raise ValueError("reference length cannot exceed T_a")

    @cached_property
    def _table(self) -> dict[str, np.ndarray]:
        rng = Rng(derive_seed(self.table_seed, "gen-table"))
        u_v = rng.normal(self.P_v)
        u_a = rng.normal(self.P_a)
        n = self.n_classes
        return {
            "u_v": u_v / np.linalg.norm(u_v),
            "u_a": u_a / np.linalg.norm(u_a),
            "video_bias": rng.normal((n, self.P_v)),
            "audio_bias": rng.normal((n, self.P_a)),
            "prompt_emb": rng.normal((n, self.d_c)),
            "speech_emb": rng.normal((n, self.d_c)),
        }

    @property
    def u_v(self) -> np.ndarray:
        return self._table["u_v"]

    @property
    def u_a(self) -> np.ndarray:
        return self._table["u_a"]

    def class_entry(self, class_id: int) -> dict[str, np.ndarray]:
        if not 0 <= class_id < self.n_classes:
            raise ValueError(f"class_id {class_id} outside [0, {self.n_classes})")
        t = self._table
        return {k: t[k][class_id] for k in ("video_bias", "audio_bias", "prompt_emb", "speech_emb")}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown gen_params keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ClipPair:
    video: Latent
    audio: Latent
    conds: CondSet
    truth: np.ndarray
    class_id: int


@dataclass(frozen=True)
class SyncReport:
    score: float
    lag: int
    valid: bool


def triangle_kernel(w: int) -> np.ndarray:
    k = np.arange(-w, w + 1)
    return (w + 1 - np.abs(k)) / (w + 1)


def gen_event_track(rng: Rng, params: GenParams, K: int | None = None) -> np.ndarray:
    """Impulses at ``K`` distinct ticks, amplitudes ``|N(0,1)| + 0.5``, triangle-smoothed."""
    K = params.K if K is None else K
    if K > params.T_c:
        raise TooManyEvents(f"K={K} exceeds T_c={params.T_c}")
    if K < 0:
        raise ValueError("K must be non-negative")
    x = np.zeros(params.T_c)
    if K == 0:
        return x
    ticks = rng.choice(params.T_c, K)
    x[ticks] = np.abs(rng.normal(K)) + 0.5
    if params.smooth_w == 0:
        return x
    return np.convolve(x, triangle_kernel(params.smooth_w), mode="same")


def pool(track: np.ndarray, T: int) -> np.ndarray:
    """Average ``track`` over ``T`` equal spans."""
    return track.reshape(T, -1).mean(axis=1)


def _render(track, u, bias, T, sigma, rng) -> np.ndarray:
    frames = pool(track, T)[:, None] * u[None, :] + bias[None, :]
    if sigma > 0:
        frames = frames + sigma * rng.normal((T, u.shape[0]))
    return frames


def render_pair(track: np.ndarray, params: GenParams, class_id: int, rng: Rng, sigma: float | None = None) -> ClipPair:
    sigma = params.sigma_obs if sigma is None else sigma
    entry = params.class_entry(class_id)
    video = _render(track, params.u_v, entry["video_bias"], params.T_v, sigma, rng)
    audio = _render(track, params.u_a, entry["audio_bias"], params.T_a, sigma, rng)
    sibling = gen_event_track(rng, params)
    ref = _render(sibling, params.u_a, entry["audio_bias"], params.T_a, sigma, rng)[: params.T_r]
    conds = CondSet(entry["prompt_emb"].copy(), entry["speech_emb"].copy(), ref)
    return ClipPair(Latent("video", video), Latent("audio", audio), conds, track, class_id)


def gen_clip(params: GenParams, class_id: int, seed: int) -> ClipPair:
    rng = Rng(seed)
    return render_pair(gen_event_track(rng, params), params, class_id, rng)


def make_dataset(params: GenParams, n: int, seed: int) -> list[ClipPair]:
    """``n`` clips, classes cycled, clip ``i`` seeded by ``derive_seed(seed, i)``."""
    return [gen_clip(params, i % params.n_classes, derive_seed(seed, i)) for i in range(n)]


def silent_audio_latent(params: GenParams, class_id: int) -> Latent:
    bias = params.class_entry(class_id)["audio_bias"]
    return Latent("audio", np.tile(bias, (params.T_a, 1)))


def static_video_latent(ref_frame: np.ndarray, T_v: int) -> Latent:
    if T_v < 1:
        raise ValueError("T_v must be >= 1")
    return Latent("video", np.tile(np.asarray(ref_frame, dtype=np.float64), (T_v, 1)))


def recover_track(latent, params: GenParams, modality: str | None = None) -> np.ndarray:
    """Project mean-removed frames on the modality's mixing direction."""
    if isinstance(latent, Latent):
        modality = modality or latent.modality
        frames = latent.frames
    else:
        frames = np.asarray(latent)
    if modality == "video":
        T, u = params.T_v, params.u_v
    elif modality == "audio":
        T, u = params.T_a, params.u_a
    else:
        raise ValueError(f"cannot recover a track from modality {modality!r}")
    if frames.shape != (T, u.shape[0]):
        raise ShapeError(f"{modality} latent has shape {frames.shape}, expected {(T, u.shape[0])}")
    return (frames - frames.mean(axis=0)) @ u


def ncc_peak(v: np.ndarray, a: np.ndarray, max_lag: int) -> tuple[float, int]:
    """Peak of the globally normalised cross-correlation of equal-length tracks.

    ``score(l) = sum_t v[t] * a[t + l] / (|v| |a|)``, so a negative lag means
    ``a`` leads ``v``.  Ties go to the smallest ``|l|``, then the negative lag.
    """
    n = v.shape[0]
    denom = np.sqrt(np.dot(v, v) * np.dot(a, a))
    best = None
    for lag in range(-max_lag, max_lag + 1):
        if lag >= 0:
            s = np.dot(v[: n - lag], a[lag:]) / denom
        else:
            s = np.dot(v[-lag:], a[: n + lag]) / denom
        key = (s, -abs(lag), -lag)
        if best is None or key > best[0]:
            best = (key, float(s), lag)
    return best[1], best[2]


def sync_from_tracks(rv: np.ndarray, ra: np.ndarray, params: GenParams) -> SyncReport:
    if rv.std() < 1e-6 or ra.std() < 1e-6:
        return SyncReport(0.0, 0, False)
    v = np.repeat(rv - rv.mean(), params.T_c // rv.shape[0])
    a = np.repeat(ra - ra.mean(), params.T_c // ra.shape[0])
    score, lag = ncc_peak(v, a, params.T_c // 4)
    return SyncReport(score, lag, True)


def sync_score(video, audio, params: GenParams) -> SyncReport:
    return sync_from_tracks(recover_track(video, params, "video"), recover_track(audio, params, "audio"), params)


# ---- dataset files -----------------------------------------------------------

TENSOR_ORDER = ("video", "audio", "reference", "prompt_emb", "speech_emb", "truth", "class_id")


def _clip_arrays(c: ClipPair) -> list[np.ndarray]:
    return [
        c.video.frames,
        c.audio.frames,
        c.conds.reference,
        c.conds.prompt_emb,
        c.conds.speech_emb,
        c.truth,
        np.array([c.class_id], dtype=np.float64),
    ]


def dump_dataset(clips: list[ClipPair], params: GenParams, path, extra: dict | None = None) -> None:
    """Write ``u32 header_len | JSON header | float32 LE tensors`` clip by clip."""
    p = params
    shapes = {
        "video": [p.T_v, p.P_v],
        "audio": [p.T_a, p.P_a],
        "reference": [p.T_r, p.P_a],
        "prompt_emb": [p.d_c],
        "speech_emb": [p.d_c],
        "truth": [p.T_c],
        "class_id": [1],
    }
    header = {
        "gen_params": p.to_dict(),
        "n_clips": len(clips),
        "tensor_order": list(TENSOR_ORDER),
        "shapes": shapes,
        "dtype": "<f4",
    }
    if extra:
        header["extra"] = extra
    hb = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    for c in clips:
        for arr in _clip_arrays(c):
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_dataset(path) -> tuple[list[ClipPair], GenParams, dict]:
    raw = Path(path).read_bytes()
    (hl,) = struct.unpack_from("<I", raw, 0)
    header = json.loads(raw[4 : 4 + hl])
    params = GenParams.from_dict(header["gen_params"])
    shapes = header["shapes"]
    sizes = [int(np.prod(shapes[k])) for k in TENSOR_ORDER]
    flat = np.frombuffer(raw, dtype="<f4", offset=4 + hl).astype(np.float64)
    per = sum(sizes)
    if flat.size != per * header["n_clips"]:
        raise ValueError(f"dataset payload has {flat.size} values, expected {per * header['n_clips']}")
    clips = []
    for i in range(header["n_clips"]):
        off = i * per
        parts = {}
        for k, n in zip(TENSOR_ORDER, sizes):
            parts[k] = flat[off : off + n].reshape(shapes[k])
            off += n
        conds = CondSet(parts["prompt_emb"], parts["speech_emb"], parts["reference"])
        clips.append(
            ClipPair(
                Latent("video", parts["video"]),
                Latent("audio", parts["audio"]),
                conds,
                parts["truth"],
                int(parts["class_id"][0]),
            )
        )
    return clips, params, header
