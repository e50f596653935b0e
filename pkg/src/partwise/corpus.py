"""Corpus ingestion and the manifest that pins training-time encodings.

A manifest records which files belong to which split and the exact
resolution, duration vocabulary, and pitch range derived from the
training split, so evaluation and generation always reuse the encodings
the model was trained with. The manifest's content hash covers every
field; checkpoints store it and refuse to run against a different
manifest.

Splits are deterministic: files are ordered by a seeded hash of their
relative path and sliced into train/valid/test quotas, so re-running
ingest over the same directory reproduces the same assignment.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .encode import DurationVocab, PitchRange, Resolution, compute_resolution
from .evaluate import EmptyCorpus
from .kern import KernError, parse_kern_file
from .score import DEFAULT_MAX_PARTS, Score

SPLITS = ("train", "valid", "test")


@dataclass
class FileEntry:
    path: str            # relative to the manifest root
    split: str
    piano: bool = False
    n_notes: int = 0

    def to_json(self) -> dict:
        return {"path": self.path, "split": self.split, "piano": self.piano,
                "n_notes": self.n_notes}

    @staticmethod
    def from_json(obj: dict) -> "FileEntry":
        return FileEntry(obj["path"], obj["split"], obj.get("piano", False),
                         obj.get("n_notes", 0))


@dataclass
class CorpusManifest:
    root: str
    files: list[FileEntry]
    resolution: Resolution
    vocab: DurationVocab
    pitch_range: PitchRange
    p_max: int
    filters: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "root": self.root,
            "files": [f.to_json() for f in self.files],
            "resolution": self.resolution.to_json(),
            "vocab": self.vocab.to_json(),
            "pitch_range": self.pitch_range.to_json(),
            "p_max": self.p_max,
            "filters": dict(self.filters),
            "content_hash": self.content_hash(),
        }

    @staticmethod
    def from_json(obj: dict) -> "CorpusManifest":
        return CorpusManifest(
            root=obj["root"],
            files=[FileEntry.from_json(f) for f in obj["files"]],
            resolution=Resolution.from_json(obj["resolution"]),
            vocab=DurationVocab.from_json(obj["vocab"]),
            pitch_range=PitchRange.from_json(obj["pitch_range"]),
            p_max=obj["p_max"],
            filters=dict(obj.get("filters", {})),
        )

    def content_hash(self) -> str:
        body = {
            "files": [f.to_json() for f in self.files],
            "resolution": self.resolution.to_json(),
            "vocab": self.vocab.to_json(),
            "pitch_range": self.pitch_range.to_json(),
            "p_max": self.p_max,
            "filters": dict(self.filters),
        }
        blob = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n",
                              encoding="utf-8")

    @staticmethod
    def load(path) -> "CorpusManifest":
        return CorpusManifest.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def entries_for(self, split: str, include_piano: bool | None = None) -> list[FileEntry]:
        """Entries of one split. Eval splits drop piano scores when the
        exclude_piano filter is set; pass include_piano to override."""
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        if include_piano is None:
            include_piano = not (self.filters.get("exclude_piano", False)
                                 and split in ("valid", "test"))
        return [f for f in self.files
                if f.split == split and (include_piano or not f.piano)]

    def load_split(self, split: str, include_piano: bool | None = None) -> list[Score]:
        root = Path(self.root)
        return [parse_kern_file(root / f.path)
                for f in self.entries_for(split, include_piano)]


def _is_piano(score: Score) -> bool:
    # Instrument tandems name it outright; bare keyboard scores betray
    # themselves through spine splits (sub-voice flows).
    for name in score.meta.get("instruments", []):
        if "piano" in name.lower() or "klavier" in name.lower():
            return True
    return score.has_nonidentity_flows()


def _split_quotas(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    if n == 0:
        return 0, 0, 0
    total = sum(ratios)
    raw = [r / total * n for r in ratios]
    counts = [int(x) for x in raw]
    # Largest remainders take the leftover slots.
    order = sorted(range(3), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in range(n - sum(counts)):
        counts[order[i % 3]] += 1
    return counts[0], counts[1], counts[2]


def ingest(directory, ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
           seed: int = 0, exclude_piano: bool = False,
           max_parts: int = DEFAULT_MAX_PARTS) -> tuple[CorpusManifest, dict]:
    """Scan a directory of .krn files into a manifest plus an ingest report.

    The report maps composers and ensemble sizes to note counts and lists
    files that failed to parse. Encodings (resolution, vocabulary, pitch
    range) are computed from the training split only.
    """
    root = Path(directory)
    paths = sorted(p.relative_to(root) for p in root.rglob("*.krn"))
    parsed: list[tuple[str, Score]] = []
    failures: list[tuple[str, str]] = []
    for rel in paths:
        try:
            score = parse_kern_file(root / rel)
            score.validate(max_parts=max_parts)
        except (KernError, ValueError) as exc:
            failures.append((str(rel), str(exc)))
            continue
        parsed.append((str(rel), score))
    if not parsed:
        raise EmptyCorpus(f"no usable .krn files under {root}")

    ranked = sorted(parsed, key=lambda item: hashlib.sha256(
        f"{seed}:{item[0]}".encode("utf-8")).hexdigest())
    n_train, n_valid, _ = _split_quotas(len(ranked), ratios)

    entries: list[FileEntry] = []
    composers: dict[str, int] = {}
    ensembles: dict[str, int] = {}
    train_scores: list[Score] = []
    for i, (rel, score) in enumerate(ranked):
        split = ("train" if i < n_train
                 else "valid" if i < n_train + n_valid else "test")
        notes = sum(len(e.pitches) for p in score.parts for e in p.events)
        entries.append(FileEntry(rel, split, piano=_is_piano(score), n_notes=notes))
        composer = score.meta.get("composer", "unknown")
        composers[composer] = composers.get(composer, 0) + notes
        label = f"{score.n_parts} parts"
        ensembles[label] = ensembles.get(label, 0) + notes
        if split == "train":
            train_scores.append(score)
    entries.sort(key=lambda e: e.path)

    if not train_scores:
        raise EmptyCorpus("training split is empty; provide more files or ratios")
    manifest = CorpusManifest(
        root=str(root),
        files=entries,
        resolution=compute_resolution(train_scores),
        vocab=DurationVocab.from_corpus(train_scores),
        pitch_range=PitchRange.from_corpus(train_scores),
        p_max=max(s.n_parts for _, s in ranked),
        filters={"exclude_piano": exclude_piano},
    )
    report = {
        "n_files": len(parsed),
        "n_notes": sum(e.n_notes for e in entries),
        "composers": composers,
        "ensembles": ensembles,
        "failures": failures,
        "splits": {s: sum(1 for e in entries if e.split == s) for s in SPLITS},
    }
    return manifest, report
