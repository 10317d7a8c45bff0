"""Class labels from report impressions via pairwise-trained sentence embeddings.

Every unordered pair of labelled impressions becomes a same/different
training example for a sentence encoder. New impressions are then labelled
by cosine similarity to the class centroids of the reference encodings.

The bundled :class:`HashingEncoder` is a deliberately small stand-in for a
pretrained transformer encoder; anything satisfying :class:`SentenceEncoder`
can be plugged in for inference.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DivergenceError
from .models import checkpoint_bytes, parse_checkpoint

log = logging.getLogger(__name__)

ENCODER_MAGIC = b"ENCW"
_TOKEN = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class LabeledImpression:
    id: str
    text: str
    label: int

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"impression {self.id!r} is empty")
        if self.label not in (0, 1):
            raise ValueError(f"impression {self.id!r}: label must be 0 or 1")


@dataclass(frozen=True)
class ImpressionPair:
    id_a: str
    id_b: str
    same_class: bool

    def key(self) -> frozenset:
        return frozenset((self.id_a, self.id_b))


def generate_pairs(impressions: Sequence[LabeledImpression]) -> list[ImpressionPair]:
    """All C(N, 2) unordered pairs, ordered lexicographically by id."""
    ids = [imp.id for imp in impressions]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"duplicate impression ids: {', '.join(dupes)}")
    ordered = sorted(impressions, key=lambda imp: imp.id)
    return [ImpressionPair(a.id, b.id, a.label == b.label)
            for a, b in itertools.combinations(ordered, 2)]


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class SentenceEncoder(Protocol):
    dim: int

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        """Unit-norm embeddings, one row per text."""
        ...


class HashingEncoder:
    """Hashed bag of tokens -> mean pooling -> dense layer -> L2 normalisation."""

    def __init__(self, dim: int = 64, buckets: int = 512, hash_seed: int = 0, seed: int = 0):
        self.dim = dim
        self.buckets = buckets
        self.hash_seed = hash_seed
        self.params = {
            "proj.weight": ad.glorot_init(buckets, dim, seed, dtype=np.float64),
            "proj.bias": Tensor(np.zeros(dim), requires_grad=True),
        }

    def bucket(self, token: str) -> int:
        h = hashlib.blake2b(token.encode(), digest_size=8, key=self.hash_seed.to_bytes(8, "little"))
        return int.from_bytes(h.digest(), "little") % self.buckets

    def features(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.buckets))
        for i, text in enumerate(texts):
            toks = tokenize(text)
            for tok in toks:
                out[i, self.bucket(tok)] += 1.0
            if toks:
                out[i] /= len(toks)
        return out

    def embed_features(self, feats: np.ndarray) -> Tensor:
        e = ad.dense(Tensor(feats), self.params["proj.weight"], self.params["proj.bias"], "identity")
        norm = ad.power(ad.tsum(e * e, axis=1, keepdims=True) + 1e-12, 0.5)
        return e / norm

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        with ad.no_grad():
            return self.embed_features(self.features(texts)).data

    def save(self, path: str | Path) -> None:
        state = {k: t.data for k, t in self.params.items()}
        state["hash_seed"] = np.array([self.hash_seed], dtype=np.float32)
        Path(path).write_bytes(checkpoint_bytes(state, ENCODER_MAGIC))

    @classmethod
    def load(cls, path: str | Path) -> "HashingEncoder":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"encoder checkpoint not found: {path}")
        state = parse_checkpoint(path.read_bytes(), ENCODER_MAGIC)
        w = state["proj.weight"]
        enc = cls(dim=w.shape[0], buckets=w.shape[1], hash_seed=int(state["hash_seed"][0]))
        enc.params["proj.weight"].data = w.astype(np.float64)
        enc.params["proj.bias"].data = state["proj.bias"].astype(np.float64)
        return enc


def contrastive_loss(cos: Tensor, same: np.ndarray, margin: float = 0.5) -> Tensor:
    """Mean of ``(1 - cos)^2`` on same-class pairs and ``max(0, cos - margin)^2`` otherwise."""
    s = Tensor(same.astype(cos.dtype))
    pull = (1.0 - cos) ** 2
    push = ad.relu(cos - margin) ** 2
    return ad.tmean(s * pull + (1.0 - s) * push)


def train_encoder(encoder: HashingEncoder, impressions: Sequence[LabeledImpression],
                  pairs: Sequence[ImpressionPair], epochs: int = 20, margin: float = 0.5,
                  lr: float = 1e-2, seed: int = 0, batch: int = 256) -> list[float]:
    """Fit the encoder's dense layer on same/different pairs; returns mean loss per epoch."""
    if epochs == 0:
        return []
    if not pairs:
        raise ValueError("no pairs to train on")
    index = {imp.id: i for i, imp in enumerate(impressions)}
    feats = encoder.features([imp.text for imp in impressions])
    a = np.array([index[p.id_a] for p in pairs])
    b = np.array([index[p.id_b] for p in pairs])
    same = np.array([p.same_class for p in pairs])
    rng = np.random.default_rng(seed)
    opt = ad.AdamState(lr=lr)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        total = 0.0
        for lo in range(0, len(order), batch):
            sel = order[lo:lo + batch]
            for t in encoder.params.values():
                t.zero_grad()
            u = encoder.embed_features(feats)
            cos = ad.tsum(ad.take_rows(u, a[sel]) * ad.take_rows(u, b[sel]), axis=1)
            loss = contrastive_loss(cos, same[sel], margin)
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"non-finite encoder loss at epoch {epoch + 1}")
            loss.backward()
            ad.adam_step(encoder.params, opt)
            total += loss.item() * len(sel)
        history.append(total / len(pairs))
        log.debug("encoder epoch %d loss %.5f", epoch + 1, history[-1])
    return history


@dataclass(frozen=True)
class LabelPrediction:
    label: int
    confidence: float
    low_confidence: bool = False


class CentroidClassifier:
    """Nearest class centroid (by cosine) over reference encodings."""

    def __init__(self, encoder: SentenceEncoder, refs: Sequence[LabeledImpression]):
        ordered = sorted(refs, key=lambda r: r.id)
        labels = np.array([r.label for r in ordered])
        missing = [c for c in (0, 1) if not np.any(labels == c)]
        if missing:
            raise ValueError(f"no reference impressions for class {missing}")
        enc = encoder.encode([r.text for r in ordered])
        cents = np.stack([enc[labels == c].mean(axis=0) for c in (0, 1)])
        self.centroids = cents / np.linalg.norm(cents, axis=1, keepdims=True)
        self.encoder = encoder

    def predict(self, texts: Sequence[str]) -> list[LabelPrediction]:
        sims = self.encoder.encode(list(texts)) @ self.centroids.T
        out = []
        for s0, s1 in sims:
            label = int(s1 > s0)
            out.append(LabelPrediction(label, float(abs(s1 - s0)), bool(s1 == s0)))
        return out


def predict_label(encoder: SentenceEncoder, labeled_refs: Sequence[LabeledImpression],
                  query: str) -> LabelPrediction:
    """Closer centroid wins; confidence is the cosine gap, an exact tie gives 0."""
    return CentroidClassifier(encoder, labeled_refs).predict([query])[0]


def label_manifest(encoder: SentenceEncoder, labeled_refs: Sequence[LabeledImpression],
                   reports: Sequence[dict], manifest_ids: Iterable[str] | None = None
                   ) -> dict[str, LabelPrediction]:
    """Label every report; each report id must name a manifest volume."""
    if manifest_ids is not None:
        known = set(manifest_ids)
        orphans = [r["id"] for r in reports if r["id"] not in known]
        if orphans:
            raise ValueError(f"reports without a matching volume: {', '.join(orphans)}")
    clf = CentroidClassifier(encoder, labeled_refs)
    preds = clf.predict([r["impression"] for r in reports])
    return {r["id"]: p for r, p in zip(reports, preds)}


# JSON-lines IO --------------------------------------------------------------

def read_reports(path: str | Path) -> list[dict]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        obj = json.loads(line)
        if "id" not in obj or not str(obj.get("impression", "")).strip():
            raise ValueError(f"{path}:{lineno}: report needs an id and a non-empty impression")
        if "label" in obj and obj["label"] not in (0, 1):
            raise ValueError(f"{path}:{lineno}: label must be 0 or 1")
        rows.append({"id": str(obj["id"]), "impression": obj["impression"], **(
            {"label": obj["label"]} if "label" in obj else {})})
    return rows


def reports_to_impressions(rows: Sequence[dict]) -> list[LabeledImpression]:
    unlabeled = [r["id"] for r in rows if "label" not in r]
    if unlabeled:
        raise ValueError(f"reports lack labels: {', '.join(unlabeled[:10])}")
    return [LabeledImpression(r["id"], r["impression"], int(r["label"])) for r in rows]


def write_reports(rows: Iterable[dict], path: str | Path) -> None:
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in rows))


def write_label_map(labels: dict[str, LabelPrediction], path: str | Path) -> None:
    Path(path).write_text("".join(
        json.dumps({"id": i, "label": p.label, "confidence": p.confidence}) + "\n"
        for i, p in labels.items()))


def read_label_map(path: str | Path) -> dict[str, int]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            obj = json.loads(line)
            if obj["label"] not in (0, 1):
                raise ValueError(f"{path}: label for {obj['id']} must be 0 or 1")
            out[str(obj["id"])] = int(obj["label"])
    return out


# templated corpus -------------------------------------------------------------

_NORMAL_KEYS = [
    "No intracranial abnormality identified.",
    "Normal MRI head.",
    "Unremarkable examination without pathologic enhancement.",
    "Negative study, no acute intracranial process.",
    "Stable normal appearance.",
    "Clear parenchyma; no leptomeningeal abnormality.",
]
_TUMOR_KEYS = [
    "Multiple new enhancing lesions consistent with metastases.",
    "Innumerable brain metastases, increased since prior.",
    "Solitary ring-enhancing mass in the {site} lobe compatible with a metastasis.",
    "Interval growth of {site} metastatic deposit with surrounding vasogenic edema.",
    "New {size} mm enhancing nodule in the {site} hemisphere, suspicious for metastatic disease.",
    "Infratentorial and supratentorial enhancing masses representing metastatic spread.",
]
_FILLER = [
    "Comparison is made with the study from {month}.",
    "Mild chronic small vessel ischemic change.",
    "Paranasal sinuses are clear.",
    "Findings were discussed with the referring team.",
    "Postoperative changes of the calvarium are noted.",
]
_SITES = ["frontal", "parietal", "occipital", "temporal", "cerebellar"]
_MONTHS = ["January", "March", "June", "August", "November"]


def templated_impression(label: int, rng: np.random.Generator) -> str:
    keys = _TUMOR_KEYS if label == 1 else _NORMAL_KEYS
    parts = [str(rng.choice(keys))]
    if rng.random() < 0.6:
        parts.append(str(rng.choice(_FILLER)))
    if rng.random() < 0.3:
        parts.insert(0, str(rng.choice(_FILLER)))
    text = " ".join(parts)
    return text.format(site=rng.choice(_SITES), size=int(rng.integers(3, 25)), month=rng.choice(_MONTHS))


def synthetic_corpus(n_per_class: int = 45, seed: int = 0, prefix: str = "rep") -> list[LabeledImpression]:
    """Balanced templated corpus; class key phrases share no tokens."""
    rng = np.random.default_rng(seed)
    labels = [0] * n_per_class + [1] * n_per_class
    return [LabeledImpression(f"{prefix}{i:04d}", templated_impression(lab, rng), lab)
            for i, lab in enumerate(labels)]
