"""In-memory corpus and its JSONL file format.

A corpus file starts with one header object::

    {"format": "reportbias-corpus", "version": 1, "W": 20, "d": 32, "k": 5,
     "R": 1, "concepts": [...], "split": "train", ...}

followed by one record per image::

    {"id": 0, "features": [...], "refs": [[3, 7], [3], ...], "z": [3, 7, 9]}

Bag-mode corpora carry ``"regions": [[...], ...]`` instead of ``"features"``.
``refs`` lists, per reference, the indices of the mentioned concepts; ``z``
(optional) lists the concepts that are truly present.
"""

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import CorpusFormatError

FORMAT = "reportbias-corpus"
FORMAT_VERSION = 1


@dataclass
class Corpus:
    features: np.ndarray  # (N, R, d)
    refs: np.ndarray  # (N, k, W) of 0/1
    concepts: list
    z: Optional[np.ndarray] = None  # (N, W) of 0/1
    ids: Optional[np.ndarray] = None
    split: str = "train"
    regions_format: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ids is None:
            self.ids = np.arange(self.features.shape[0])

    @property
    def y(self):
        """Union labels: a concept is positive if any reference mentions it."""
        return self.refs.max(axis=1)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def n_concepts(self):
        return self.refs.shape[2]

    @property
    def dim(self):
        return self.features.shape[2]

    @property
    def k(self):
        return self.refs.shape[1]

    @property
    def n_regions(self):
        return self.features.shape[1]

    def subset(self, index, split=None):
        index = np.asarray(index)
        return Corpus(self.features[index], self.refs[index], self.concepts,
                      None if self.z is None else self.z[index], self.ids[index],
                      split or self.split, self.regions_format, dict(self.meta))


def header(corpus):
    hdr = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "W": corpus.n_concepts,
        "d": corpus.dim,
        "k": corpus.k,
        "R": corpus.n_regions,
        "concepts": list(corpus.concepts),
        "split": corpus.split,
    }
    hdr.update(corpus.meta)
    return hdr


def _indices(row):
    return [int(i) for i in np.flatnonzero(row)]


def write_jsonl(corpus, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header(corpus), sort_keys=True) + "\n")
        for i in range(corpus.n):
            rec = {"id": int(corpus.ids[i])}
            if corpus.regions_format:
                rec["regions"] = corpus.features[i].tolist()
            else:
                rec["features"] = corpus.features[i, 0].tolist()
            rec["refs"] = [_indices(r) for r in corpus.refs[i]]
            if corpus.z is not None:
                rec["z"] = _indices(corpus.z[i])
            fh.write(json.dumps(rec) + "\n")


def _fail(path, line, msg):
    raise CorpusFormatError(f"{path}:{line}: {msg}")


def _index_row(path, line, values, W, what):
    row = np.zeros(W, dtype=np.uint8)
    for v in values:
        if not isinstance(v, int) or not 0 <= v < W:
            _fail(path, line, f"{what} index {v!r} outside [0, {W})")
        row[v] = 1
    return row


def read_jsonl(path):
    """Load and validate a corpus file."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().split("\n") if ln.strip()]
    if not lines:
        _fail(path, 1, "empty corpus file")
    try:
        hdr = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        _fail(path, 1, f"invalid JSON header: {exc}")
    if not isinstance(hdr, dict) or hdr.get("format") != FORMAT:
        _fail(path, 1, "first line is not a corpus header")
    if hdr.get("version") != FORMAT_VERSION:
        _fail(path, 1, f"unsupported corpus version {hdr.get('version')!r}")
    try:
        W, d, k = int(hdr["W"]), int(hdr["d"]), int(hdr["k"])
        concepts = list(hdr["concepts"])
    except (KeyError, TypeError, ValueError) as exc:
        _fail(path, 1, f"header missing field {exc}")
    if len(concepts) != W:
        _fail(path, 1, f"header lists {len(concepts)} concept names for W={W}")

    feats, refs, zs, ids = [], [], [], []
    regions_format = None
    for line, text in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(text)
        except json.JSONDecodeError as exc:
            _fail(path, line, f"invalid JSON: {exc}")
        if not isinstance(rec, dict) or "id" not in rec or "refs" not in rec:
            _fail(path, line, "record needs 'id' and 'refs'")
        if rec.get("format") == FORMAT:
            _fail(path, line, "header must precede all records")
        has_f, has_r = "features" in rec, "regions" in rec
        if has_f == has_r:
            _fail(path, line, "record needs exactly one of 'features' or 'regions'")
        if regions_format is None:
            regions_format = has_r
        elif regions_format != has_r:
            _fail(path, line, "records mix 'features' and 'regions'")
        x = np.asarray(rec["regions"] if has_r else [rec["features"]], dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != d or x.shape[0] < 1:
            _fail(path, line, f"features must have dimension d={d}")
        if not np.all(np.isfinite(x)):
            _fail(path, line, "non-finite feature value")
        if feats and x.shape[0] != feats[0].shape[0]:
            _fail(path, line, "all records must have the same number of regions")
        if len(rec["refs"]) != k:
            _fail(path, line, f"expected {k} references, found {len(rec['refs'])}")
        refs.append(np.stack([_index_row(path, line, r, W, "refs") for r in rec["refs"]])
                    if k else np.zeros((0, W), np.uint8))
        if "z" in rec:
            zs.append(_index_row(path, line, rec["z"], W, "z"))
        ids.append(int(rec["id"]))
        feats.append(x)
    if not feats:
        _fail(path, 1, "corpus has no records")
    if zs and len(zs) != len(feats):
        _fail(path, 1, "either every record or none must carry 'z'")

    meta = {key: v for key, v in hdr.items()
            if key not in {"format", "version", "W", "d", "k", "R", "concepts", "split"}}
    return Corpus(np.stack(feats), np.stack(refs), concepts,
                  np.stack(zs) if zs else None, np.asarray(ids),
                  hdr.get("split", "train"), bool(regions_format), meta)
