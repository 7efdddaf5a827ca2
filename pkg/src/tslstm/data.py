"""Datasets: on-disk manifest + feature files, split helpers and a synthetic
"event world" whose videos have real sub-shot structure.

Feature file layout (little-endian)::

    offset  size        field
    0       4           magic b"TSLF"
    4       4           u32 version (1)
    8       4           u32 d_v
    12      4           u32 n_v
    16      4*d_v*n_v   float32 values, frame-major: frame 0's d_v values,
                        then frame 1's, ...
"""

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, LoadError
from .tensor import DTYPE

MAGIC = b"TSLF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")

SPLITS = ("train", "val", "test")

# reference protocols: (total, train, val)
SPLIT_SCHEMES = {
    "msvd": (1970, 1200, 100),
    "msrvtt": (10000, 6513, 497),
}


@dataclass
class VideoSample:
    id: str
    features: np.ndarray  # (d_v, n_v)
    captions: List[str]


@dataclass
class Dataset:
    name: str
    feature_dim: int
    samples: Dict[str, VideoSample]
    splits: Dict[str, List[str]]

    def split(self, name: str) -> List[VideoSample]:
        return [self.samples[i] for i in self.splits.get(name, [])]

    def captions(self, split: str) -> Dict[str, List[str]]:
        return {s.id: s.captions for s in self.split(split)}


def split_sizes(n: int, scheme: str = "msvd") -> Tuple[int, int, int]:
    """Train/val/test counts scaled from a reference protocol.

    >>> split_sizes(1970)
    (1200, 100, 670)
    """
    if scheme not in SPLIT_SCHEMES:
        raise ConfigError(f"unknown split scheme {scheme!r}")
    total, tr, va = SPLIT_SCHEMES[scheme]
    n_train = round(n * tr / total)
    n_val = round(n * va / total)
    return n_train, n_val, n - n_train - n_val


# --- feature files -----------------------------------------------------------

def write_features(path, features: np.ndarray) -> None:
    features = np.asarray(features)
    d_v, n_v = features.shape
    payload = np.ascontiguousarray(features.T, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, d_v, n_v))
        fh.write(payload)


def read_features(path) -> np.ndarray:
    """Read a feature file into a float64 ``(d_v, n_v)`` matrix."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"{path}: cannot read feature file ({exc.strerror})") from exc
    if len(raw) < _HEADER.size:
        raise LoadError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, d_v, n_v = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise LoadError(f"{path}: bad magic {magic!r} at offset 0")
    if version != FORMAT_VERSION:
        raise LoadError(f"{path}: unsupported version {version} at offset 4")
    if n_v < 1 or d_v < 1:
        raise LoadError(f"{path}: empty feature matrix d_v={d_v} n_v={n_v} at offset 8")
    expected = _HEADER.size + 4 * d_v * n_v
    if len(raw) != expected:
        raise LoadError(f"{path}: expected {expected} bytes, found {len(raw)}")
    vals = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).astype(DTYPE)
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        raise LoadError(f"{path}: non-finite value at byte offset {_HEADER.size + 4 * int(bad[0])}")
    return vals.reshape(n_v, d_v).T.copy()


# --- manifest ----------------------------------------------------------------

def save_dataset(ds: Dataset, directory, features_dir: str = "features") -> Path:
    """Write ``manifest.json`` plus one feature file per video; returns the manifest path."""
    directory = Path(directory)
    (directory / features_dir).mkdir(parents=True, exist_ok=True)
    for s in ds.samples.values():
        write_features(directory / features_dir / f"{s.id}.tslf", s.features)
    manifest = {
        "name": ds.name,
        "feature_dim": ds.feature_dim,
        "features_dir": features_dir,
        "splits": {k: list(v) for k, v in ds.splits.items()},
        "captions": {s.id: list(s.captions) for s in ds.samples.values()},
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return path


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise LoadError(f"{manifest_path}: cannot read manifest ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"{manifest_path}: malformed JSON at offset {exc.pos}") from exc
    for key in ("feature_dim", "splits", "captions", "features_dir"):
        if key not in manifest:
            raise LoadError(f"{manifest_path}: manifest lacks {key!r}")
    d_v = int(manifest["feature_dim"])
    feat_dir = manifest_path.parent / manifest["features_dir"]
    samples = {}
    for split, ids in manifest["splits"].items():
        if split not in SPLITS:
            raise LoadError(f"{manifest_path}: unknown split {split!r}")
        for vid in ids:
            if vid in samples:
                continue
            caps = manifest["captions"].get(vid)
            if not caps:
                raise LoadError(f"{manifest_path}: video {vid!r} has no captions")
            feats = read_features(feat_dir / f"{vid}.tslf")
            if feats.shape[0] != d_v:
                raise LoadError(f"{feat_dir / (vid + '.tslf')}: feature width {feats.shape[0]} != {d_v}")
            samples[vid] = VideoSample(vid, feats, list(caps))
    return Dataset(manifest.get("name", manifest_path.parent.name), d_v, samples,
                   {k: list(v) for k, v in manifest["splits"].items()})


# --- synthetic event world ---------------------------------------------------

SUBJECTS = ("man", "woman", "dog", "cat", "boy", "girl", "bird", "horse", "chef", "child",
            "monkey", "player")
VERBS = ("running", "jumping", "cooking", "singing", "swimming", "dancing", "eating",
         "driving", "reading", "sleeping", "climbing", "playing")


@dataclass
class SynthConfig:
    n_videos: int = 200
    n_subjects: int = 4
    n_verbs: int = 4
    events_per_video: Tuple[int, int] = (2, 3)
    frames_per_event: Tuple[int, int] = (8, 15)
    n_frames: Optional[int] = 30
    feature_dim: int = 32
    noise_std: float = 0.05
    prototype_scale: float = 1.0
    split_scheme: str = "msvd"
    seed: int = 0

    def validate(self) -> "SynthConfig":
        self.events_per_video = tuple(self.events_per_video)
        self.frames_per_event = tuple(self.frames_per_event)
        if self.n_videos < 1:
            raise ConfigError("n_videos must be >= 1")
        if not 1 <= self.n_subjects <= len(SUBJECTS):
            raise ConfigError(f"n_subjects must be in 1..{len(SUBJECTS)}")
        if not 1 <= self.n_verbs <= len(VERBS):
            raise ConfigError(f"n_verbs must be in 1..{len(VERBS)}")
        for name in ("events_per_video", "frames_per_event"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ConfigError(f"{name} must be a range 1 <= lo <= hi, got {(lo, hi)}")
        if self.n_frames is not None and self.n_frames < 1:
            raise ConfigError("n_frames must be >= 1")
        if self.feature_dim < 2:
            raise ConfigError("feature_dim must be >= 2")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.split_scheme not in (*SPLIT_SCHEMES, "all"):
            raise ConfigError(f"unknown split scheme {self.split_scheme!r}")
        return self


def event_prototypes(cfg: SynthConfig) -> np.ndarray:
    """Prototype feature vector per (subject, verb), shape ``(S, V, d)``.

    The first half of a prototype encodes the subject, the second half the
    verb, so events sharing a word share half of their appearance.
    """
    rng = np.random.default_rng([cfg.seed, 1])
    half = cfg.feature_dim // 2
    subj = rng.normal(0.0, cfg.prototype_scale, size=(cfg.n_subjects, half))
    verb = rng.normal(0.0, cfg.prototype_scale, size=(cfg.n_verbs, cfg.feature_dim - half))
    protos = np.concatenate([
        np.broadcast_to(subj[:, None, :], (cfg.n_subjects, cfg.n_verbs, half)),
        np.broadcast_to(verb[None, :, :], (cfg.n_subjects, cfg.n_verbs, cfg.feature_dim - half)),
    ], axis=2)
    return protos.astype(np.float32).astype(DTYPE)


def caption_for(events: Sequence[Tuple[int, int]]) -> str:
    return " then ".join(f"{SUBJECTS[s]} is {VERBS[v]}" for s, v in events)


def synth_video(events, cfg: SynthConfig, protos: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    frames = []
    lo, hi = cfg.frames_per_event
    for s, v in events:
        n = int(rng.integers(lo, hi + 1))
        frames.append(protos[s, v][:, None] + rng.normal(0.0, cfg.noise_std, size=(cfg.feature_dim, n))
                      if cfg.noise_std > 0 else np.repeat(protos[s, v][:, None], n, axis=1))
    v = np.concatenate(frames, axis=1)
    if cfg.n_frames is not None:
        # equally spaced frame sampling
        pick = np.floor((np.arange(cfg.n_frames) + 0.5) * v.shape[1] / cfg.n_frames).astype(int)
        v = v[:, pick]
    # stored as float32 on disk; keep the in-memory copy representable
    return v.astype(np.float32).astype(DTYPE)


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    protos = event_prototypes(cfg)
    samples = {}
    width = len(str(cfg.n_videos - 1))
    for k in range(cfg.n_videos):
        lo, hi = cfg.events_per_video
        n_ev = int(rng.integers(lo, hi + 1))
        events = []
        while len(events) < n_ev:
            ev = (int(rng.integers(cfg.n_subjects)), int(rng.integers(cfg.n_verbs)))
            # consecutive events differ so every boundary is visible
            if events and ev == events[-1] and cfg.n_subjects * cfg.n_verbs > 1:
                continue
            events.append(ev)
        vid = f"video{k:0{width}d}"
        samples[vid] = VideoSample(vid, synth_video(events, cfg, protos, rng), [caption_for(events)])
    ids = list(samples)
    if cfg.split_scheme == "all":
        splits = {"train": ids, "val": list(ids), "test": list(ids)}
    else:
        n_tr, n_va, _ = split_sizes(len(ids), cfg.split_scheme)
        splits = {"train": ids[:n_tr], "val": ids[n_tr:n_tr + n_va], "test": ids[n_tr + n_va:]}
    return Dataset("synthetic", cfg.feature_dim, samples, splits)


def synth_config_dict(cfg: SynthConfig) -> dict:
    d = asdict(cfg)
    d["events_per_video"] = list(cfg.events_per_video)
    d["frames_per_event"] = list(cfg.frames_per_event)
    return d
