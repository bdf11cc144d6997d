"""Text-to-image retrieval.

Images are indexed by their projected, unit-normalized retrieval vectors.
A text query runs through the decoder with a trailing retrieval token; the
hidden state at that token, projected and normalized, is the query vector.
Search is an exact top-K dot product (equal to cosine on unit vectors), and
recall counts the fraction of queries whose source image appears in the
top K.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from capret.backbones import BackboneBundle, encode_image, hidden_at_ret
from capret.bridge import BridgeParameters, project_image_for_retrieval, project_ret_for_retrieval
from capret.checkpoint import CheckpointError, read_container, write_container
from capret.data.images import load_and_preprocess_image
from capret.data.manifest import DatasetManifest
from capret.data.vocab import Vocabulary, normalize_caption, tokenize

DEFAULT_KS = (1, 5, 10)


def unit_rows(x: np.ndarray) -> np.ndarray:
    """Normalize rows to unit L2 norm (zero rows are left at zero)."""
    x = np.asarray(x, dtype=np.float32)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


@dataclass(frozen=True)
class RetrievalIndex:
    """Immutable search index: parallel ids/uris plus unit-normalized rows."""

    ids: tuple[str, ...]
    uris: tuple[str, ...]
    vectors: np.ndarray
    skipped: int = 0  # images dropped during build because they failed to decode

    def __post_init__(self):
        if len(self.ids) != len(self.uris):
            raise ValueError(f"ids ({len(self.ids)}) and uris ({len(self.uris)}) must be parallel")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("index ids must be unique")
        v = np.asarray(self.vectors)
        if v.ndim != 2 or v.shape[0] != len(self.ids):
            raise ValueError(f"vectors must be [{len(self.ids)}, q], got {v.shape}")
        norms = np.linalg.norm(v, axis=1)
        if len(self.ids) and not np.allclose(norms, 1.0, atol=1e-6):
            worst = float(np.abs(norms - 1.0).max())
            raise ValueError(f"index rows must be unit-norm within 1e-6 (worst deviation {worst:.2e})")

    @property
    def size(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class RankedResult:
    """Top-k answer for one query: (image id, score) pairs, best first."""

    query_id: str
    ranking: tuple[tuple[str, float], ...]
    truncated_to_corpus: bool = False  # requested k exceeded the corpus size

    def ids(self) -> tuple[str, ...]:
        return tuple(i for i, _ in self.ranking)


def build_index(
    backbones: BackboneBundle,
    bridge: BridgeParameters,
    manifest: DatasetManifest,
    split: str,
) -> RetrievalIndex:
    """Index every image of a split: normalize(image-retrieval projection of the vision embedding)."""
    records = manifest.split_records(split)
    if not records:
        raise ValueError(f"split {split!r} of {manifest.name!r} has no images to index")
    ids, uris, rows = [], [], []
    skipped = 0
    for rec in records:
        path = manifest.image_path(rec)
        try:
            image = load_and_preprocess_image(path)
        except Exception as e:  # unreadable image: skip but keep count
            warnings.warn(f"skipping unreadable image {path}: {e}")
            skipped += 1
            continue
        v = encode_image(backbones, image)
        rows.append(project_image_for_retrieval(bridge, v).detach().numpy())
        ids.append(rec.image_uri)
        uris.append(str(path))
    if not rows:
        raise ValueError(f"no readable images in split {split!r}")
    return RetrievalIndex(ids=tuple(ids), uris=tuple(uris), vectors=unit_rows(np.stack(rows)), skipped=skipped)


def embed_query(
    backbones: BackboneBundle,
    bridge: BridgeParameters,
    vocab: Vocabulary,
    text: str,
) -> np.ndarray:
    """Unit query vector: decode [BOS, words…, EOS, RET], project the hidden
    state at the retrieval token."""
    if not normalize_caption(text):
        raise ValueError("query text is empty after normalization")
    ids = tokenize(text, vocab, append_ret=True)
    h = hidden_at_ret(backbones, None, ids, bridge.ret_embedding)
    q = project_ret_for_retrieval(bridge, h).detach().numpy()
    return unit_rows(q[None, :])[0]


def search(index: RetrievalIndex, query: np.ndarray, k: int) -> RankedResult:
    """Exact top-k by cosine score; ties broken by ascending image id.

    k larger than the corpus returns the whole corpus with a flag.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    q = np.asarray(query, dtype=np.float32).reshape(-1)
    if q.shape[0] != index.vectors.shape[1]:
        raise ValueError(f"query dim {q.shape[0]} != index dim {index.vectors.shape[1]}")
    q = unit_rows(q[None, :])[0]
    scores = index.vectors @ q
    order = sorted(range(index.size), key=lambda i: (-scores[i], index.ids[i]))
    truncated = k > index.size
    top = order[: min(k, index.size)]
    return RankedResult(
        query_id="",
        ranking=tuple((index.ids[i], float(scores[i])) for i in top),
        truncated_to_corpus=truncated,
    )


def recall_at_k(
    results: list[RankedResult],
    ground_truth: dict[str, str],
    ks: tuple[int, ...] = DEFAULT_KS,
) -> dict[str, float]:
    """R@K = 100 · (#queries whose true image is in the top K) / #queries,
    plus the arithmetic mean over the requested K values."""
    if not results:
        raise ValueError("no query results to score")
    out: dict[str, float] = {}
    for k in ks:
        hits = 0
        for res in results:
            if res.query_id not in ground_truth:
                raise ValueError(f"query {res.query_id!r} has no ground-truth image")
            if ground_truth[res.query_id] in res.ids()[:k]:
                hits += 1
        out[f"R@{k}"] = 100.0 * hits / len(results)
    out["mean_recall"] = float(np.mean([out[f"R@{k}"] for k in ks]))
    return out


def evaluate_split_retrieval(
    backbones: BackboneBundle,
    bridge: BridgeParameters,
    manifest: DatasetManifest,
    split: str,
    vocab: Vocabulary,
    ks: tuple[int, ...] = DEFAULT_KS,
) -> dict[str, float]:
    """Text-to-image recall over one split: every caption is an independent
    query whose ground truth is its source image."""
    index = build_index(backbones, bridge, manifest, split)
    results = []
    ground_truth = {}
    max_k = max(ks)
    for rec in manifest.split_records(split):
        for j, cap in enumerate(rec.captions):
            qid = f"{rec.image_uri}#cap{j}"
            q = embed_query(backbones, bridge, vocab, cap)
            res = search(index, q, max_k)
            results.append(RankedResult(qid, res.ranking, res.truncated_to_corpus))
            ground_truth[qid] = rec.image_uri
    return recall_at_k(results, ground_truth, ks)


def rank_embeddings(
    query_vectors: np.ndarray,
    query_ids: list[str],
    index: RetrievalIndex,
    k: int,
) -> list[RankedResult]:
    """Search many pre-computed query vectors against one index."""
    out = []
    for qid, q in zip(query_ids, np.asarray(query_vectors)):
        res = search(index, q, k)
        out.append(RankedResult(qid, res.ranking, res.truncated_to_corpus))
    return out


def save_index(index: RetrievalIndex, path: str | Path) -> None:
    """Persist an index as a tensor container plus ids.json."""
    path = Path(path)
    write_container(path, {"index.vectors": index.vectors}, {"kind": "retrieval-index"})
    (path / "ids.json").write_text(json.dumps({"ids": list(index.ids), "uris": list(index.uris), "skipped": index.skipped}))


def load_index(path: str | Path) -> RetrievalIndex:
    path = Path(path)
    tensors, _ = read_container(path)
    if "index.vectors" not in tensors:
        raise CheckpointError(f"container at {path} holds no index.vectors tensor")
    ids_path = path / "ids.json"
    if not ids_path.is_file():
        raise CheckpointError(f"missing ids.json next to index container at {path}")
    meta = json.loads(ids_path.read_text())
    return RetrievalIndex(
        ids=tuple(meta["ids"]),
        uris=tuple(meta["uris"]),
        vectors=tensors["index.vectors"].astype(np.float32),
        skipped=int(meta.get("skipped", 0)),
    )
