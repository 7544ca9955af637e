"""Feature ingestion, frame stacking, SpecAugment, and the synthetic corpus.

The synthetic task stands in for real speech at desk scale: every token
owns a characteristic multi-frame pattern, an utterance is its tokens'
patterns plus noise, and each "speaker" optionally distorts the feature
space with a seeded linear transform whose strength is a severity knob.
A base model trained on canonical speakers degrades sharply on perturbed
ones, which is exactly the gap adaptation has to close.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binio
from .errors import ContractError, DomainError, FormatError

FEATURE_MAGIC = b"XDFT"
FEATURE_VERSION = 1
SPLITS = ("train", "dev", "test")


@dataclass
class FeatureSequence:
    frames: np.ndarray            # (T_raw, feat_dim) float32
    frame_period_ms: int = 10

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ContractError(f"features must be (T_raw >= 1, feat_dim), got "
                                f"{self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise ContractError("features contain NaN or Inf")


@dataclass
class Utterance:
    id: str
    features: FeatureSequence
    labels: list[int]
    speaker_id: str
    split: str
    domain_tag: str | None = None


@dataclass
class SpeakerSpec:
    """Seeded per-speaker feature-space distortion: x -> (I + s*P) x + s*b."""

    seed: int
    severity_knob: float
    perturbation: np.ndarray = field(repr=False)  # (feat_dim, feat_dim)
    channel_bias: np.ndarray = field(repr=False)  # (feat_dim,)

    @classmethod
    def from_seed(cls, seed: int, severity_knob: float, feat_dim: int,
                  rank: int = 4) -> "SpeakerSpec":
        if not 0.0 <= severity_knob <= 1.0:
            raise DomainError(f"severity_knob must lie in [0, 1], got {severity_knob}")
        rng = np.random.default_rng([0x5EED, seed])
        # low-rank mixing plus a channel rescale: destructive to an
        # unadapted model yet within reach of a bottleneck adapter
        u = rng.normal(0.0, 1.0, size=(feat_dim, rank))
        v = rng.normal(0.0, 1.0, size=(rank, feat_dim))
        perturbation = u @ v / np.sqrt(rank * feat_dim)
        perturbation += np.diag(rng.normal(0.0, 0.5, size=feat_dim))
        channel_bias = rng.normal(0.0, 0.5, size=feat_dim)
        return cls(seed=seed, severity_knob=severity_knob,
                   perturbation=perturbation, channel_bias=channel_bias)

    def apply(self, frames: np.ndarray) -> np.ndarray:
        s = self.severity_knob
        if s == 0.0:
            return frames
        d = frames.shape[1]
        mat = np.eye(d) + s * self.perturbation
        return (frames @ mat.T + s * self.channel_bias).astype(np.float32)


# ---------------------------------------------------------------------------
# deterministic transforms
# ---------------------------------------------------------------------------


def stack_frames(features: FeatureSequence, stack: int = 4, stride: int = 3) -> np.ndarray:
    """Concatenate ``stack`` consecutive frames every ``stride`` frames.

    Output frame k is input frames [k*stride, k*stride + stack); with the
    defaults a 10 ms frame period becomes an effective 30 ms step.
    """
    frames = features.frames
    t_raw, feat_dim = frames.shape
    if t_raw < stack:
        raise ContractError(f"sequence of {t_raw} frames too short to stack {stack}")
    t_out = (t_raw - stack) // stride + 1
    out = np.empty((t_out, stack * feat_dim), dtype=frames.dtype)
    for k in range(t_out):
        out[k] = frames[k * stride: k * stride + stack].reshape(-1)
    return out


def spec_augment(features: FeatureSequence, num_time_masks: int = 2,
                 max_time_width: int = 2, num_freq_masks: int = 2,
                 max_freq_width: int = 8, seed: int = 0) -> FeatureSequence:
    """Mask random time spans and channels, filling with per-channel means.

    Masks span exactly the configured width at a seeded random offset;
    operates on raw (pre-stacking) features and never touches unmasked
    cells.
    """
    frames = features.frames
    t_raw, feat_dim = frames.shape
    if max_time_width > t_raw:
        raise DomainError(f"time mask width {max_time_width} exceeds {t_raw} frames")
    if max_freq_width > feat_dim:
        raise DomainError(f"freq mask width {max_freq_width} exceeds {feat_dim} channels")
    out = frames.copy()
    fill = frames.mean(axis=0)
    rng = np.random.default_rng([0xA06, seed])
    for _ in range(num_time_masks):
        if max_time_width == 0:
            break
        t0 = int(rng.integers(0, t_raw - max_time_width + 1))
        out[t0: t0 + max_time_width, :] = fill
    for _ in range(num_freq_masks):
        if max_freq_width == 0:
            break
        f0 = int(rng.integers(0, feat_dim - max_freq_width + 1))
        out[:, f0: f0 + max_freq_width] = fill[f0: f0 + max_freq_width]
    return FeatureSequence(frames=out, frame_period_ms=features.frame_period_ms)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


def token_pattern(seed: int, token: int, token_pattern_len: int, feat_dim: int) -> np.ndarray:
    """The characteristic frames of one token; pure function of its inputs."""
    rng = np.random.default_rng([0x70CE, seed, token])
    return rng.normal(0.0, 1.0, size=(token_pattern_len, feat_dim))


def _split_sizes(n: int) -> tuple[int, int, int]:
    n_dev = max(1, round(0.1 * n))
    n_test = max(1, round(0.1 * n))
    return n - n_dev - n_test, n_dev, n_test


def generate_synthetic_corpus(num_speakers: int, utt_per_speaker: int, vocab: int,
                              token_pattern_len: int = 8, noise_std: float = 0.1,
                              speaker_specs: list[SpeakerSpec] | None = None,
                              seed: int = 0, feat_dim: int = 128,
                              min_tokens: int = 2, max_tokens: int = 4) -> list[Utterance]:
    """Build utterances for ``num_speakers`` with per-speaker 80/10/10 splits.

    ``speaker_specs`` defaults to all-canonical speakers (severity 0).
    The same seed always yields a byte-identical corpus.
    """
    if vocab < 2:
        raise ContractError(f"need at least 2 real tokens, got {vocab}")
    if utt_per_speaker < 3:
        raise ContractError("need at least 3 utterances per speaker for the splits")
    if speaker_specs is None:
        speaker_specs = [SpeakerSpec.from_seed(seed=1000 + i, severity_knob=0.0,
                                               feat_dim=feat_dim)
                         for i in range(num_speakers)]
    if len(speaker_specs) != num_speakers:
        raise ContractError(f"{len(speaker_specs)} speaker specs for "
                            f"{num_speakers} speakers")
    patterns = [token_pattern(seed, tok, token_pattern_len, feat_dim)
                for tok in range(vocab)]
    utts: list[Utterance] = []
    for s, spec in enumerate(speaker_specs):
        speaker_id = f"spk{s:02d}"
        rng = np.random.default_rng([0xC0, seed, s])
        n_train, n_dev, n_test = _split_sizes(utt_per_speaker)
        splits = (["train"] * n_train + ["dev"] * n_dev + ["test"] * n_test)
        order = rng.permutation(utt_per_speaker)
        assigned = [None] * utt_per_speaker
        for pos, split in zip(order, splits):
            assigned[pos] = split
        for k in range(utt_per_speaker):
            n_tok = int(rng.integers(min_tokens, max_tokens + 1))
            labels = rng.integers(0, vocab, size=n_tok).tolist()
            frames = np.concatenate([patterns[tok] for tok in labels], axis=0)
            frames = frames + rng.normal(0.0, noise_std, size=frames.shape)
            frames = spec.apply(frames.astype(np.float32))
            utts.append(Utterance(
                id=f"{speaker_id}_{k:04d}",
                features=FeatureSequence(frames=frames),
                labels=[int(t) for t in labels],
                speaker_id=speaker_id,
                split=assigned[k]))
    return utts


def filter_split(utts: list[Utterance], split: str,
                 speakers: set[str] | None = None) -> list[Utterance]:
    if split not in SPLITS:
        raise ContractError(f"split must be one of {SPLITS}")
    return [u for u in utts if u.split == split
            and (speakers is None or u.speaker_id in speakers)]


# ---------------------------------------------------------------------------
# on-disk formats
# ---------------------------------------------------------------------------


def write_features(path: str | Path, features: FeatureSequence) -> None:
    buf = io.BytesIO()
    buf.write(FEATURE_MAGIC)
    binio.write_u32(buf, FEATURE_VERSION)
    t_raw, feat_dim = features.frames.shape
    binio.write_u32(buf, feat_dim)
    binio.write_u32(buf, t_raw)
    binio.write_u32(buf, features.frame_period_ms)
    raw = binio.f32_payload(features.frames)
    buf.write(raw)
    binio.write_u64(buf, binio.fnv1a64(raw))
    Path(path).write_bytes(buf.getvalue())


def read_features(path: str | Path) -> FeatureSequence:
    buf = io.BytesIO(Path(path).read_bytes())
    binio.expect_magic(buf, FEATURE_MAGIC, "feature")
    version = binio.read_u32(buf)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature file version {version}")
    feat_dim = binio.read_u32(buf)
    t_raw = binio.read_u32(buf)
    period = binio.read_u32(buf)
    raw = binio.read_exact(buf, 4 * feat_dim * t_raw)
    if binio.read_u64(buf) != binio.fnv1a64(raw):
        raise FormatError("feature payload checksum mismatch")
    frames = np.frombuffer(raw, dtype="<f4").reshape(t_raw, feat_dim)
    return FeatureSequence(frames=frames.copy(), frame_period_ms=period)


def save_corpus(utts: list[Utterance], out_dir: str | Path) -> Path:
    """Write features/<id>.xdft plus a tab-separated manifest; returns its path."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for utt in utts:
        rel = f"features/{utt.id}.xdft"
        write_features(out_dir / rel, utt.features)
        fields = [utt.id, rel, " ".join(str(t) for t in utt.labels),
                  utt.speaker_id, utt.split]
        if utt.domain_tag is not None:
            fields.append(utt.domain_tag)
        lines.append("\t".join(fields))
    manifest = out_dir / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def load_corpus(manifest_path: str | Path) -> list[Utterance]:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    utts = []
    for lineno, line in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) not in (5, 6):
            raise FormatError(f"{manifest_path}:{lineno}: expected 5 or 6 fields, "
                              f"got {len(fields)}")
        utt_id, rel, tokens, speaker_id, split = fields[:5]
        if split not in SPLITS:
            raise FormatError(f"{manifest_path}:{lineno}: bad split {split!r}")
        utts.append(Utterance(
            id=utt_id,
            features=read_features(root / rel),
            labels=[int(t) for t in tokens.split()] if tokens.strip() else [],
            speaker_id=speaker_id,
            split=split,
            domain_tag=fields[5] if len(fields) == 6 else None))
    return utts
