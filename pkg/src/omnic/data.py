"""Synthetic corpus generation and the byte-level tokenizer.

Corpora are desk-scale stand-ins with class structure strong enough that a
linear classifier on raw inputs separates them, so downstream accuracy
thresholds measure the model rather than luck.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderConfig, ModalitySample
from .errors import ConfigError

PAD_ID = 0
MASK_ID = 257
VOCAB_SIZE = 258


def tokenize_text(s: str | bytes, length: int) -> np.ndarray:
    """Byte-level ids: byte value + 1, id 0 = padding, truncated/padded to length."""
    raw = s.encode("utf-8") if isinstance(s, str) else bytes(s)
    ids = np.zeros(length, dtype=np.int64)
    n = min(len(raw), length)
    ids[:n] = np.frombuffer(raw[:n], dtype=np.uint8).astype(np.int64) + 1
    return ids


def detokenize_text(ids: np.ndarray) -> str:
    """Inverse of tokenize_text for ids in 1..256; padding and mask ids drop."""
    vals = [i - 1 for i in np.asarray(ids).tolist() if 1 <= i <= 256]
    return bytes(vals).decode("utf-8", errors="replace")


@dataclass
class SyntheticCorpusSpec:
    modality: str
    n_classes: int = 4
    per_class: int = 256
    noise: float = 0.2
    seed: int = 0

    def validate(self):
        if self.n_classes < 2:
            raise ConfigError("need at least 2 classes")
        return self


def _class_color(c: int, k: int) -> np.ndarray:
    phase = 2 * np.pi * c / k
    return 0.5 + 0.5 * np.cos(phase + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3]))


def _image_sample(c: int, k: int, size, noise: float, rng: np.random.Generator) -> np.ndarray:
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w]
    # instance-unique low-frequency background texture; without it every
    # same-class image is near-identical and the contrastive loss floors at
    # log(batch / n_classes) instead of approaching zero
    fy, fx = rng.uniform(0.5, 2.5, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    pattern = 0.5 + 0.5 * np.sin(2 * np.pi * (fy * yy / h + fx * xx / w) + phase)
    img = noise * rng.random((3, h, w)) + 0.3 * pattern[None]
    color = _class_color(c, k)
    # class-dependent anchor on a circle around the image center
    angle = 2 * np.pi * c / k
    cy = h / 2 + (h / 4) * np.sin(angle)
    cx = w / 2 + (w / 4) * np.cos(angle)
    n_blobs = 2 + c % 2
    for b in range(n_blobs):
        by = cy + rng.uniform(-h / 7, h / 7) + (b - 1) * h / 8 * np.sin(angle + np.pi / 2)
        bx = cx + rng.uniform(-w / 7, w / 7) + (b - 1) * w / 8 * np.cos(angle + np.pi / 2)
        r = h / 7 * rng.uniform(0.7, 1.3)
        mask = (yy - by) ** 2 + (xx - bx) ** 2 <= r**2
        bright = rng.uniform(0.75, 1.0)
        for ch in range(3):
            img[ch][mask] = color[ch] * bright
    return np.clip(img, 0.0, 1.0)


def _audio_sample(c: int, k: int, size, noise: float, rng: np.random.Generator) -> np.ndarray:
    h, w = size
    spec = noise * rng.random((1, h, w))
    # harmonic stripes: class-dependent fundamental row plus overtones
    fundamental = 2 + (c * (h - 6)) // k
    for m in range(1, 4):
        row = (fundamental * m) % (h - 1)
        spec[0, row, :] = np.maximum(spec[0, row, :], rng.uniform(0.8, 1.0))
    # temporal pulses at class-dependent spacing
    spacing = 3 + c % 5
    offset = rng.integers(0, spacing)
    spec[0, :, offset::spacing] += 0.35
    return np.clip(spec, 0.0, 1.0)


def _text_unigram(c: int, k: int, noise: float) -> np.ndarray:
    """Unigram distribution over byte values, concentrated on a class range."""
    span = 200 // k
    lo = 20 + c * span
    probs = np.full(256, noise / 256)
    probs[lo : lo + span] += (1.0 - noise) / span
    return probs / probs.sum()


def _text_sample(c: int, k: int, length: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    probs = _text_unigram(c, k, noise)
    bytes_ = rng.choice(256, size=length, p=probs)
    return bytes_.astype(np.int64) + 1


def generate_corpus(spec: SyntheticCorpusSpec, config: EncoderConfig) -> list[ModalitySample]:
    """Deterministic labeled corpus of spec.n_classes * spec.per_class samples."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    samples = []
    for c in range(spec.n_classes):
        for _ in range(spec.per_class):
            if spec.modality == "image":
                payload = _image_sample(c, spec.n_classes, config.image_size, spec.noise, rng)
            elif spec.modality == "audio":
                payload = _audio_sample(c, spec.n_classes, config.audio_size, spec.noise, rng)
            elif spec.modality == "text":
                payload = _text_sample(c, spec.n_classes, config.text_len, spec.noise, rng)
            else:
                raise ConfigError(f"unknown modality {spec.modality!r}")
            samples.append(ModalitySample(tag=spec.modality, payload=payload, label=c))
    order = np.random.default_rng(spec.seed + 1).permutation(len(samples))
    return [samples[i] for i in order]


_CONSONANTS = "bcdfgklmnprstvz"
_VOWELS = "aeiou"


def _draw_word(rng: np.random.Generator) -> str:
    chars = []
    for _ in range(3):
        chars.append(_CONSONANTS[rng.integers(0, len(_CONSONANTS))])
        chars.append(_VOWELS[rng.integers(0, len(_VOWELS))])
    return "".join(chars)


def class_words(k: int) -> list[str]:
    """Deterministic pronounceable class names, pairwise distinct."""
    words: list[str] = []
    for c in range(k):
        attempt = 0
        while True:
            word = _draw_word(np.random.default_rng(7919 * c + attempt))
            if word not in words:
                break
            attempt += 1
        words.append(word)
    return words


def class_word(c: int) -> str:
    return class_words(c + 1)[c]


DEFAULT_CAPTION_TEMPLATES = (
    "a {} thing",
    "this is {}",
    "one {} here",
)


def class_prompts(k: int, template: str = DEFAULT_CAPTION_TEMPLATES[0]) -> list[str]:
    """Zero-shot class prompts phrased in the caption grammar.

    Prompts must match the training captions' phrasing (the "a photo of a
    [class]" convention): a bare class word sits far from any caption the
    text tower was aligned on.
    """
    return [template.format(w) for w in class_words(k)]


def generate_paired_corpus(
    spec: SyntheticCorpusSpec,
    config: EncoderConfig,
    templates: tuple[str, ...] = DEFAULT_CAPTION_TEMPLATES,
) -> list[tuple[ModalitySample, ModalitySample]]:
    """Paired (image-or-audio, caption) corpus sharing a latent class per pair."""
    spec.validate()
    if spec.modality not in ("image", "audio"):
        raise ConfigError("paired corpus side A must be image or audio")
    rng = np.random.default_rng(spec.seed)
    pairs = []
    pair_id = 0
    for c in range(spec.n_classes):
        for _ in range(spec.per_class):
            if spec.modality == "image":
                payload = _image_sample(c, spec.n_classes, config.image_size, spec.noise, rng)
            else:
                payload = _audio_sample(c, spec.n_classes, config.audio_size, spec.noise, rng)
            a = ModalitySample(tag=spec.modality, payload=payload, label=c, pair_id=pair_id)
            template = templates[rng.integers(0, len(templates))]
            caption = template.format(class_word(c))
            b = ModalitySample(
                tag="text",
                payload=tokenize_text(caption, config.text_len),
                label=c,
                pair_id=pair_id,
            )
            pairs.append((a, b))
            pair_id += 1
    order = np.random.default_rng(spec.seed + 1).permutation(len(pairs))
    return [pairs[i] for i in order]


def split_corpus(samples: list, holdout_fraction: float, seed: int) -> tuple[list, list]:
    """Deterministic train/holdout split."""
    order = np.random.default_rng(seed).permutation(len(samples))
    n_hold = int(round(len(samples) * holdout_fraction))
    hold = [samples[i] for i in order[:n_hold]]
    train = [samples[i] for i in order[n_hold:]]
    return train, hold
