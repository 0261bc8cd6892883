"""Synthetic ambiguous-instruction corpus, splitting, batching and JSON-lines IO.

Every instruction follows ``<verb> the X <rel1> the Y <rel2> the Z``. Reading
A tags X and Y as GOAL and Z as DETAIL. Reading B tags X and Z as GOAL and Y
as DETAIL. Both readings share the same tokens, so only prosody separates
them: goal words are spoken higher, longer and after a pause.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embeddings import Embedder, EmbeddingSource
from .errors import CapacityError, DimensionError, FormatError, ParseError, SplitError
from .features import (
    D_PROSODY, AudioClip, Normalizer, WordAlignment, dump_alignment, extract_prosody,
    extract_raw, feature_dim, fuse, read_wav, write_wav,
)

LABELS = ("O", "GOAL", "DETAIL")
O, GOAL, DETAIL = 0, 1, 2
SOS = 3
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}

SAMPLE_RATE = 16000

VERBS = ("place", "put", "move", "set", "bring", "leave", "drop", "slide")
OBJECTS = (
    "coke can", "pringles", "counter", "mug", "red cup", "table", "shelf", "bowl",
    "apple", "box", "laptop", "plate", "sponge", "kettle", "book", "tray", "lamp",
    "stool", "cereal box", "water bottle", "fridge", "sink", "chair", "cabinet",
    "banana", "remote", "basket", "vase", "phone", "notebook",
)
RELATIONS = ("beside", "on", "near", "under")


@dataclass(frozen=True)
class Vocabulary:
    verbs: tuple = VERBS
    objects: tuple = OBJECTS
    relations: tuple = RELATIONS

    def capacity(self) -> int:
        """Number of distinct instructions (ordered distinct X, Y, Z)."""
        n = len(self.objects)
        return len(self.verbs) * len(self.relations) ** 2 * n * max(n - 1, 0) * max(n - 2, 0)


@dataclass(frozen=True)
class Instruction:
    instruction_id: int
    verb: str
    x: str
    rel1: str
    y: str
    rel2: str
    z: str

    def tokens_and_labels(self, interpretation: str) -> tuple[list[str], list[int]]:
        y_label, z_label = (GOAL, DETAIL) if interpretation == "A" else (DETAIL, GOAL)
        chunks = [
            ([self.verb, "the"], O), (self.x.split(), GOAL), ([self.rel1, "the"], O),
            (self.y.split(), y_label), ([self.rel2, "the"], O), (self.z.split(), z_label),
        ]
        words: list[str] = []
        labels: list[int] = []
        for toks, lab in chunks:
            words.extend(toks)
            labels.extend([lab] * len(toks))
        return words, labels

    def to_dict(self) -> dict:
        return {"verb": self.verb, "x": self.x, "rel1": self.rel1, "y": self.y,
                "rel2": self.rel2, "z": self.z}


@dataclass
class UtteranceSample:
    id: str
    instruction_id: int
    interpretation: str
    speaker_id: int
    words: list  # (token, t_start, t_end)
    labels: list  # ints, O=0 GOAL=1 DETAIL=2
    frame: dict  # verb/x/rel1/y/rel2/z slots of the instruction
    prosody: np.ndarray | None = None
    raw: np.ndarray | None = None
    audio_path: str | None = None

    @property
    def tokens(self) -> list[str]:
        return [w[0] for w in self.words]

    @property
    def instruction(self) -> Instruction:
        return Instruction(self.instruction_id, **self.frame)

    def to_json(self) -> dict:
        d = {
            "id": self.id, "instruction_id": self.instruction_id,
            "interpretation": self.interpretation, "speaker_id": self.speaker_id,
            "words": [[w, float(s), float(e)] for w, s, e in self.words],
            "labels": [LABELS[y] for y in self.labels],
            "frame": self.frame,
            "features": {
                "prosody": None if self.prosody is None else self.prosody.tolist(),
                "raw": None if self.raw is None else self.raw.tolist(),
            },
            "audio_path": self.audio_path,
        }
        return d

    @classmethod
    def from_json(cls, d: dict) -> "UtteranceSample":
        feats = d.get("features") or {}
        pro, raw = feats.get("prosody"), feats.get("raw")
        return cls(
            id=str(d["id"]), instruction_id=int(d["instruction_id"]),
            interpretation=str(d["interpretation"]), speaker_id=int(d["speaker_id"]),
            words=[(str(w), float(s), float(e)) for w, s, e in d["words"]],
            labels=[LABEL_INDEX[y] for y in d["labels"]],
            frame=dict(d["frame"]),
            prosody=None if pro is None else np.asarray(pro, dtype=np.float64).reshape(-1, D_PROSODY),
            raw=None if raw is None else np.asarray(raw, dtype=np.float64).reshape(len(d["words"]), -1),
            audio_path=d.get("audio_path"),
        )

    def validate(self) -> None:
        if len(self.labels) != len(self.words):
            raise FormatError(f"{self.id}: {len(self.labels)} labels for {len(self.words)} words")
        if GOAL not in self.labels or DETAIL not in self.labels:
            raise FormatError(f"{self.id}: needs at least one GOAL and one DETAIL label")


# ---------------------------------------------------------------- generation


@dataclass(frozen=True)
class WordProsody:
    """Generative parameters of one spoken word."""

    f0: float  # Hz, mean over the word
    glide: float  # total f0 change across the word, Hz (end minus start)
    duration: float
    pause_before: float
    amplitude: float


def draw_instructions(n_instructions: int, seed: int, vocab: Vocabulary = Vocabulary()) -> list[Instruction]:
    if n_instructions < 1:
        raise ValueError("n_instructions must be >= 1")
    if n_instructions > vocab.capacity():
        raise CapacityError(
            f"vocabulary supports {vocab.capacity()} distinct instructions, {n_instructions} requested")
    rng = np.random.default_rng([seed, 1])
    seen: set = set()
    out: list[Instruction] = []
    while len(out) < n_instructions:
        verb = vocab.verbs[rng.integers(len(vocab.verbs))]
        x, y, z = (vocab.objects[i] for i in rng.choice(len(vocab.objects), 3, replace=False))
        r1, r2 = (vocab.relations[i] for i in rng.integers(len(vocab.relations), size=2))
        key = (verb, x, r1, y, r2, z)
        if key in seen:
            continue
        seen.add(key)
        out.append(Instruction(len(out), verb, x, r1, y, r2, z))
    return out


def _speaker_params(n_speakers: int, seed: int) -> list[dict]:
    rng = np.random.default_rng([seed, 2])
    return [
        {"f0": rng.uniform(95.0, 230.0), "amp": rng.uniform(0.25, 0.55), "rate": rng.uniform(0.85, 1.15)}
        for _ in range(n_speakers)
    ]


def emphasis_prosody(words: Sequence[str], labels: Sequence[int], speaker: dict,
                     rng: np.random.Generator) -> list[WordProsody]:
    """Draw base prosody per word, then apply the GOAL / DETAIL emphasis model."""
    T = len(words)
    out = []
    for k, (w, lab) in enumerate(zip(words, labels)):
        pos = k / (T - 1) if T > 1 else 0.0
        f0 = speaker["f0"] * (1.0 - 0.08 * pos) * rng.normal(1.0, 0.04)
        duration = speaker["rate"] * (0.10 + 0.035 * len(w)) * rng.normal(1.0, 0.08)
        pause = rng.uniform(0.15, 0.30) if k == 0 else rng.uniform(0.01, 0.05)
        glide = rng.uniform(-0.04, 0.04) * f0
        amp = speaker["amp"] * rng.normal(1.0, 0.10)
        if lab == GOAL:
            f0 *= rng.normal(1.25, 0.05)
            duration *= rng.normal(1.30, 0.05)
            pause += rng.uniform(0.12, 0.20)
        elif lab == DETAIL:
            f0 *= rng.normal(0.95, 0.05)
        noise = rng.normal(1.0, 0.03, size=5)
        out.append(WordProsody(
            f0=f0 * noise[0], glide=glide * noise[1], duration=max(duration * noise[2], 0.04),
            pause_before=pause * noise[3], amplitude=min(amp * noise[4], 0.95)))
    return out


def layout(params: Sequence[WordProsody], words: Sequence[str], trailing: float) -> tuple[list, float]:
    """Word timings from pauses and durations; returns ``(words, clip end)``."""
    t = 0.0
    timed = []
    for w, p in zip(words, params):
        t += p.pause_before
        start = t
        t += p.duration
        timed.append((w, start, t))
    return timed, t + trailing


def analytic_prosody(params: Sequence[WordProsody], timed: Sequence, clip_end: float) -> np.ndarray:
    """The 16 prosody fields implied directly by the generative parameters."""
    T = len(params)
    f0 = np.array([p.f0 for p in params])
    dur = np.array([p.duration for p in params])
    energy = np.log(np.array([p.amplitude for p in params]) ** 2 / 2.0 + 1e-10)
    utt_f0 = float((f0 * dur).sum() / dur.sum())
    utt_energy = float((energy * dur).sum() / dur.sum())
    out = np.zeros((T, D_PROSODY))
    for k, p in enumerate(params):
        half = abs(p.glide) / 2.0
        out[k] = [
            p.f0, abs(p.glide) / math.sqrt(12.0), p.f0 - half, p.f0 + half, p.glide / p.duration, 1.0,
            energy[k], 0.0, energy[k], 0.0,
            p.duration, timed[k][1] - (timed[k - 1][2] if k else 0.0),
            (timed[k + 1][1] if k + 1 < T else clip_end) - timed[k][2],
            k / (T - 1) if T > 1 else 0.0, p.f0 / utt_f0, energy[k] - utt_energy,
        ]
    return out


def synthesize(params: Sequence[WordProsody], timed: Sequence, clip_end: float,
               sample_rate: int = SAMPLE_RATE, fade_s: float = 0.005) -> AudioClip:
    """Each word as a linear-glide sine at its f0 with 5 ms raised-cosine edges."""
    n = int(math.ceil(clip_end * sample_rate))
    out = np.zeros(n)
    for (w, start, end), p in zip(timed, params):
        i0 = int(round(start * sample_rate))
        i1 = min(int(round(end * sample_rate)), n)
        m = i1 - i0
        if m <= 0:
            continue
        t = np.arange(m) / sample_rate
        f_start = p.f0 - p.glide / 2.0
        rate = p.glide / p.duration
        phase = 2.0 * np.pi * (f_start * t + 0.5 * rate * t * t)
        seg = p.amplitude * np.sin(phase)
        nf = min(int(fade_s * sample_rate), m // 2)
        if nf > 0:
            ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(nf) / nf)
            seg[:nf] *= ramp
            seg[m - nf:] *= ramp[::-1]
        out[i0:i1] = seg
    return AudioClip(out, sample_rate)


def generate_corpus(n_instructions: int, n_speakers: int, seed: int = 42, render: str = "features",
                    out_dir=None, with_raw: bool = True,
                    vocab: Vocabulary = Vocabulary()) -> list[UtteranceSample]:
    """Two readings per instruction per speaker: ``2 * n_instructions * n_speakers`` samples.

    ``render="features"`` derives prosody directly from the generative
    parameters (raw cepstra still come from in-memory synthesis unless
    ``with_raw`` is off). ``render="audio"`` writes ``<id>.wav`` and
    ``<id>.align.json`` under ``out_dir`` and extracts both feature sets from
    those files' contents.
    """
    if n_speakers < 1:
        raise ValueError("n_speakers must be >= 1")
    if render not in ("features", "audio"):
        raise ValueError(f"render must be 'features' or 'audio', got {render!r}")
    if render == "audio":
        if out_dir is None:
            raise ValueError("audio rendering needs out_dir")
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    instructions = draw_instructions(n_instructions, seed, vocab)
    speakers = _speaker_params(n_speakers, seed)
    samples = []
    for inst in instructions:
        for s, spk in enumerate(speakers):
            for interp in ("A", "B"):
                rng = np.random.default_rng([seed, 3, inst.instruction_id, s, ord(interp)])
                words, labels = inst.tokens_and_labels(interp)
                params = emphasis_prosody(words, labels, spk, rng)
                timed, end = layout(params, words, trailing=rng.uniform(0.10, 0.25))
                sid = f"i{inst.instruction_id:03d}_s{s:02d}_{interp}"
                sample = UtteranceSample(sid, inst.instruction_id, interp, s, timed, labels,
                                         inst.to_dict())
                alignment = [WordAlignment(w, a, b) for w, a, b in timed]
                if render == "features":
                    sample.prosody = analytic_prosody(params, timed, end)
                    if with_raw:
                        sample.raw = extract_raw(synthesize(params, timed, end), alignment)
                else:
                    clip = synthesize(params, timed, end)
                    wav = out_dir / f"{sid}.wav"
                    write_wav(wav, clip)
                    dump_alignment(out_dir / f"{sid}.align.json", alignment)
                    clip = read_wav(wav)
                    sample.prosody = extract_prosody(clip, alignment)
                    sample.raw = extract_raw(clip, alignment)
                    sample.audio_path = str(wav)
                samples.append(sample)
    return samples


# ---------------------------------------------------------------- splitting


@dataclass(frozen=True)
class SplitSpec:
    train: float = 24 / 35
    val: float = 6 / 35
    test: float = 5 / 35
    seed: int = 42

    def __post_init__(self):
        fr = (self.train, self.val, self.test)
        if min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise SplitError(f"split fractions {fr} must be non-negative and sum to 1")


def split_by_instruction(samples: Sequence[UtteranceSample], spec: SplitSpec = SplitSpec()):
    """Shuffle instruction ids, then allot them by largest remainder."""
    ids = sorted({s.instruction_id for s in samples})
    rng = np.random.default_rng([spec.seed, 4])
    order = [ids[i] for i in rng.permutation(len(ids))]
    fr = np.array([spec.train, spec.val, spec.test])
    quotas = fr * len(ids)
    counts = np.floor(quotas).astype(int)
    for i in np.argsort(-(quotas - counts), kind="stable")[: len(ids) - counts.sum()]:
        counts[i] += 1
    if (counts == 0).any():
        raise SplitError(f"{len(ids)} instructions cannot fill splits {fr.tolist()} (sizes {counts.tolist()})")
    cut1, cut2 = counts[0], counts[0] + counts[1]
    groups = [set(order[:cut1]), set(order[cut1:cut2]), set(order[cut2:])]
    return tuple([s for s in samples if s.instruction_id in g] for g in groups)


# ---------------------------------------------------------------- featurisation + batching


@dataclass
class Featurizer:
    """Turns samples into fused ``(T, d)`` matrices, optionally standardised."""

    mode: str = "prosody"
    embedding: EmbeddingSource = field(default_factory=EmbeddingSource)
    normalizer: Normalizer | None = None

    def __post_init__(self):
        self._embedder = Embedder(self.embedding)

    @property
    def dim(self) -> int:
        return feature_dim(self.mode, self.embedding.d_embed)

    @property
    def miss_log(self) -> list[str]:
        return self._embedder.miss_log

    def raw_matrix(self, sample: UtteranceSample) -> np.ndarray:
        emb = self._embedder.embed_utterance(sample.tokens)
        return fuse(sample.prosody, sample.raw, emb, self.mode)

    def __call__(self, sample: UtteranceSample) -> np.ndarray:
        x = self.raw_matrix(sample)
        return self.normalizer.apply(x) if self.normalizer is not None else x

    def fit(self, train: Iterable[UtteranceSample]) -> "Featurizer":
        self.normalizer = Normalizer.fit([self.raw_matrix(s) for s in train])
        return self


@dataclass
class Batch:
    features: np.ndarray  # (B, T_max, d)
    targets: np.ndarray  # (B, T_max) int, 0 where padded
    mask: np.ndarray  # (B, T_max) bool
    ids: list = field(default_factory=list)

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def pad_batch(sequences: Sequence[np.ndarray], labels: Sequence[Sequence[int]] | None = None,
              d: int | None = None, ids: Sequence[str] | None = None, pad_to: int | None = None) -> Batch:
    """Right-pad ``(T_i, d)`` matrices with zeros to the longest length."""
    if not sequences:
        raise ValueError("pad_batch needs at least one sequence")
    dims = {np.shape(s)[-1] for s in sequences}
    if d is not None:
        dims.add(d)
    if len(dims) != 1:
        raise DimensionError(f"pad_batch: inconsistent feature dims {sorted(dims)}")
    d = dims.pop()
    T = max(len(s) for s in sequences)
    if pad_to is not None:
        T = max(T, pad_to)
    B = len(sequences)
    feats = np.zeros((B, T, d))
    targets = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T), dtype=bool)
    for b, s in enumerate(sequences):
        n = len(s)
        feats[b, :n] = s
        mask[b, :n] = True
        if labels is not None:
            if len(labels[b]) != n:
                raise DimensionError(f"sequence {b}: {n} frames but {len(labels[b])} labels")
            targets[b, :n] = labels[b]
    return Batch(feats, targets, mask, list(ids) if ids is not None else [])


def make_batches(samples: Sequence[UtteranceSample], featurizer: Featurizer, batch_size: int,
                 rng: np.random.Generator | None = None) -> list[Batch]:
    order = np.arange(len(samples)) if rng is None else rng.permutation(len(samples))
    out = []
    for i in range(0, len(order), batch_size):
        chunk = [samples[j] for j in order[i:i + batch_size]]
        out.append(pad_batch([featurizer(s) for s in chunk], [s.labels for s in chunk],
                             d=featurizer.dim, ids=[s.id for s in chunk]))
    return out


# ---------------------------------------------------------------- JSON-lines


def serialize(samples: Iterable[UtteranceSample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), separators=(",", ":")) + "\n")


def deserialize(path) -> list[UtteranceSample]:
    out = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                sample = UtteranceSample.from_json(json.loads(line))
                sample.validate()
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"malformed sample ({exc})", line=lineno) from exc
            out.append(sample)
    return out
