"""
recsys/textpipe.py

Textual item embeddings:
  1. tokenize ad text
  2. train skip-gram word vectors with negative sampling on the marketplace corpus
  3. train a convolutional (category, subcategory) classifier over frozen word vectors
  4. use the classifier's last hidden layer as the item's textual embedding
"""
from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import EmptyInputError
from .mf import EmbeddingTable
from .models import Ad
from .storage import (expect_kind, format_int_list, load_state, parse_int_list, read_ids,
                      read_manifest, read_matrix, save_state, write_ids, write_manifest,
                      write_matrix)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

PAD_INDEX = 0


def tokenize(text: str) -> List[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


# -------------------------
# Word vectors
# -------------------------
@dataclass(frozen=True, eq=False)
class WordVectors:
    vocab: Tuple[str, ...]
    vectors: np.ndarray
    min_count: int = 2

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.vocab):
            raise ValueError(f"vector matrix {self.vectors.shape} does not match vocab of {len(self.vocab)}")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("word vectors contain non-finite values")
        object.__setattr__(self, "_index", {t: n for n, t in enumerate(self.vocab)})

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.vocab)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def index(self, token: str) -> Optional[int]:
        return self._index.get(token)

    def vector(self, token: str) -> Optional[np.ndarray]:
        n = self._index.get(token)
        return None if n is None else self.vectors[n]

    def encode(self, tokens: Sequence[str], length: int) -> np.ndarray:
        """Map in-vocabulary tokens to 1-based ids, truncate to `length`, pad with 0."""
        ids = [self._index[t] + 1 for t in tokens if t in self._index][:length]
        out = np.zeros(length, dtype=np.int64)
        out[:len(ids)] = ids
        return out

    def padded_matrix(self) -> np.ndarray:
        """Vectors with a leading all-zero padding row."""
        return np.vstack([np.zeros((1, self.dim)), self.vectors])

    def save(self, directory: PathLike) -> None:
        directory = Path(directory)
        write_manifest(directory, {"kind": "word_vectors", "dim": self.dim,
                                   "vocab_size": len(self.vocab), "min_count": self.min_count})
        write_ids(directory / "vocab.txt", self.vocab)
        write_matrix(directory / "vectors.mat", self.vectors)

    @classmethod
    def load(cls, directory: PathLike) -> "WordVectors":
        directory = Path(directory)
        manifest = read_manifest(directory)
        expect_kind(manifest, "word_vectors", directory)
        return cls(read_ids(directory / "vocab.txt"),
                   read_matrix(directory / "vectors.mat").astype(np.float64),
                   min_count=int(manifest.get("min_count", 2)))


class SkipGramModel(nn.Module):
    """Skip-gram with negative sampling: separate input and output embeddings."""

    def __init__(self, vocab_size: int, dim: int):
        super().__init__()
        self.embed_input = nn.Embedding(vocab_size, dim, sparse=True)
        self.embed_output = nn.Embedding(vocab_size, dim, sparse=True)
        init_range = 0.5 / dim
        self.embed_input.weight.data.uniform_(-init_range, init_range)
        self.embed_output.weight.data.zero_()

    def forward(self, centers: torch.Tensor, contexts: torch.Tensor,
                negatives: torch.Tensor) -> torch.Tensor:
        v = self.embed_input(centers)                      # (B, d)
        u_pos = self.embed_output(contexts)                # (B, d)
        u_neg = self.embed_output(negatives)               # (B, k, d)
        pos = F.logsigmoid((v * u_pos).sum(dim=1))
        neg = F.logsigmoid(-torch.bmm(u_neg, v.unsqueeze(2)).squeeze(2)).sum(dim=1)
        return -(pos + neg).mean()


def _skipgram_pairs(sentences: Sequence[np.ndarray], window: int) -> Tuple[np.ndarray, np.ndarray]:
    centers: List[np.ndarray] = []
    contexts: List[np.ndarray] = []
    for s in sentences:
        for off in range(1, window + 1):
            if len(s) <= off:
                break
            centers.extend((s[:-off], s[off:]))
            contexts.extend((s[off:], s[:-off]))
    if not centers:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(centers), np.concatenate(contexts)


def word2vec_fit(corpus: Iterable[Sequence[str]], dim: int = 100, window: int = 5,
                 negatives: int = 5, epochs: int = 5, seed: int = 0, min_count: int = 2,
                 step: float = 0.01, batch_size: int = 512) -> WordVectors:
    sentences_tok = [list(s) for s in corpus]
    counts = Counter(t for s in sentences_tok for t in s)
    vocab = tuple(sorted((t for t, c in counts.items() if c >= min_count),
                         key=lambda t: (-counts[t], t)))
    if not vocab:
        raise EmptyInputError(f"no token occurs at least {min_count} times")
    index = {t: n for n, t in enumerate(vocab)}
    sentences = [np.array([index[t] for t in s if t in index], dtype=np.int64) for s in sentences_tok]
    centers, contexts = _skipgram_pairs(sentences, window)
    if centers.size == 0:
        raise EmptyInputError("corpus has no co-occurring in-vocabulary tokens")

    freq = np.array([counts[t] for t in vocab], dtype=np.float64) ** 0.75
    noise = freq / freq.sum()

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = SkipGramModel(len(vocab), dim)
    optimizer = torch.optim.SparseAdam(list(model.parameters()), lr=step)
    n_pairs = centers.size
    for epoch in range(epochs):
        order = rng.permutation(n_pairs)
        sampled = rng.choice(len(vocab), size=(n_pairs, negatives), p=noise)
        total, batches = 0.0, 0
        for start in range(0, n_pairs, batch_size):
            idx = order[start:start + batch_size]
            loss = model(torch.from_numpy(centers[idx]), torch.from_numpy(contexts[idx]),
                         torch.from_numpy(sampled[idx]))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.item())
            batches += 1
        logger.info("word2vec epoch %d/%d loss=%.4f (%d pairs, vocab %d)",
                    epoch + 1, epochs, total / max(batches, 1), n_pairs, len(vocab))

    vectors = model.embed_input.weight.detach().double().numpy().copy()
    return WordVectors(vocab, vectors, min_count=min_count)


# -------------------------
# Text classifier
# -------------------------
class TextClassifier(nn.Module):
    """
    Convolutions of several widths over frozen word vectors, max-pooled over time,
    a dense tanh hidden layer (the textual embedding) and a softmax output.
    """

    def __init__(self, embeddings: np.ndarray, labels: Sequence[str], filters: int = 32,
                 widths: Sequence[int] = (2, 3, 4), hidden: int = 100, seq_len: int = 64):
        super().__init__()
        if len(labels) < 2:
            raise ValueError("a classifier needs at least 2 labels")
        if seq_len < max(widths):
            raise ValueError(f"seq_len {seq_len} shorter than widest filter {max(widths)}")
        dim = embeddings.shape[1]
        # row 0 is the fixed zero padding vector
        self.register_buffer("embedding", torch.as_tensor(embeddings, dtype=torch.float32).clone())
        self.convs = nn.ModuleList(nn.Conv1d(dim, filters, w) for w in widths)
        self.hidden = nn.Linear(filters * len(widths), hidden)
        self.output = nn.Linear(hidden, len(labels))
        self.labels = tuple(labels)
        self.widths = tuple(int(w) for w in widths)
        self.filters = filters
        self.seq_len = seq_len
        self.loss_history: Tuple[float, ...] = ()

    @property
    def embedding_dim(self) -> int:
        return self.hidden.out_features

    def features(self, token_ids: torch.Tensor) -> torch.Tensor:
        x = F.embedding(token_ids, self.embedding).transpose(1, 2)  # (B, d, L)
        pooled = [F.relu(conv(x)).max(dim=2).values for conv in self.convs]
        return torch.tanh(self.hidden(torch.cat(pooled, dim=1)))

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.output(self.features(token_ids))

    def predict_proba(self, token_ids: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.forward(token_ids), dim=1)

    def predict_labels(self, token_ids: torch.Tensor) -> List[str]:
        with torch.no_grad():
            best = self.forward(token_ids).argmax(dim=1).tolist()
        return [self.labels[i] for i in best]

    def save(self, directory: PathLike) -> None:
        directory = Path(directory)
        save_state(directory, self.state_dict(), {
            "kind": "text_classifier",
            "filters": self.filters,
            "widths": format_int_list(self.widths),
            "hidden": self.embedding_dim,
            "seq_len": self.seq_len,
            "vocab_rows": int(self.embedding.shape[0]),
            "dim": int(self.embedding.shape[1]),
        })
        write_ids(directory / "labels.txt", self.labels)

    @classmethod
    def load(cls, directory: PathLike) -> "TextClassifier":
        directory = Path(directory)
        manifest, state = load_state(directory)
        expect_kind(manifest, "text_classifier", directory)
        model = cls(np.zeros((int(manifest["vocab_rows"]), int(manifest["dim"]))),
                    read_ids(directory / "labels.txt"),
                    filters=int(manifest["filters"]),
                    widths=parse_int_list(manifest["widths"]),
                    hidden=int(manifest["hidden"]),
                    seq_len=int(manifest["seq_len"]))
        model.load_state_dict(state)
        model.eval()
        return model


def encode_ads(ads: Iterable[Ad], wv: WordVectors, seq_len: int) -> np.ndarray:
    rows = [wv.encode(tokenize(ad.text), seq_len) for ad in ads]
    if not rows:
        return np.zeros((0, seq_len), dtype=np.int64)
    return np.vstack(rows)


def _dataset_loss(model: nn.Module, x: torch.Tensor, y: torch.Tensor, batch_size: int = 256) -> float:
    total = 0.0
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            logits = model(x[start:start + batch_size])
            total += float(F.cross_entropy(logits, y[start:start + batch_size], reduction="sum"))
    return total / max(x.shape[0], 1)


def cnn_fit(ads: Iterable[Ad], wv: WordVectors, epochs: int = 10, step: float = 0.05,
            seed: int = 0, momentum: float = 0.9, batch_size: int = 32, seq_len: int = 64,
            filters: int = 32, hidden: int = 100, clip_norm: float = 5.0) -> TextClassifier:
    ads = list(ads)
    if step <= 0:
        raise ValueError(f"step must be > 0, got {step}")
    labels = tuple(sorted({ad.label for ad in ads}))
    if len(labels) < 2:
        raise EmptyInputError(f"need at least 2 distinct labels, found {len(labels)}")
    label_index = {lab: n for n, lab in enumerate(labels)}
    x = torch.from_numpy(encode_ads(ads, wv, seq_len))
    y = torch.tensor([label_index[ad.label] for ad in ads], dtype=torch.long)

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = TextClassifier(wv.padded_matrix(), labels, filters=filters, hidden=hidden, seq_len=seq_len)
    optimizer = torch.optim.SGD(model.parameters(), lr=step, momentum=momentum)

    history = [_dataset_loss(model, x, y)]
    logger.info("text classifier: %d ads, %d labels, initial loss=%.4f", len(ads), len(labels), history[0])
    for epoch in range(epochs):
        model.train()
        order = torch.from_numpy(rng.permutation(len(ads)))
        for start in range(0, len(ads), batch_size):
            idx = order[start:start + batch_size]
            loss = F.cross_entropy(model(x[idx]), y[idx])
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), clip_norm)
            optimizer.step()
        model.eval()
        history.append(_dataset_loss(model, x, y))
        logger.info("text classifier epoch %d/%d loss=%.4f", epoch + 1, epochs, history[-1])
    model.loss_history = tuple(history)
    return model


def text_embed(ad: Ad, clf: TextClassifier, wv: WordVectors) -> np.ndarray:
    """Last hidden layer activation for one ad; empty text gives the all-padding activation."""
    ids = torch.from_numpy(wv.encode(tokenize(ad.text), clf.seq_len)).unsqueeze(0)
    with torch.no_grad():
        return clf.features(ids)[0].double().numpy()


def text_embed_many(ads: Iterable[Ad], clf: TextClassifier, wv: WordVectors,
                    batch_size: int = 256) -> EmbeddingTable:
    ads = list(ads)
    x = torch.from_numpy(encode_ads(ads, wv, clf.seq_len))
    chunks = []
    with torch.no_grad():
        for start in range(0, len(ads), batch_size):
            chunks.append(clf.features(x[start:start + batch_size]).double().numpy())
    matrix = np.vstack(chunks) if chunks else np.zeros((0, clf.embedding_dim))
    return EmbeddingTable(tuple(ad.item_id for ad in ads), matrix)


def label_accuracy(ads: Sequence[Ad], clf: TextClassifier, wv: WordVectors) -> float:
    if not ads:
        return 0.0
    x = torch.from_numpy(encode_ads(ads, wv, clf.seq_len))
    predicted = clf.predict_labels(x)
    return float(np.mean([p == ad.label for p, ad in zip(predicted, ads)]))
