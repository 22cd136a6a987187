"""Pathway collection curation: GMT parsing, size filtering, Jaccard
redundancy filtering and panel restriction."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.1
DEFAULT_MIN_SIZE = 50
DEFAULT_MAX_SIZE = 100

ORDERING_RULE = ("violating pairs (J > tau) are processed in descending similarity; "
                 "the larger set of the pair (gene count in the source file) is removed; "
                 "equal sizes remove the lexicographically larger name")


class Source(enum.Enum):
    HALLMARK = "Hallmark"
    GO_BP = "GO_BP"
    GO_CC = "GO_CC"
    GO_MF = "GO_MF"
    OTHER = "Other"


_PREFIXES = (("HALLMARK_", Source.HALLMARK), ("GOBP_", Source.GO_BP),
             ("GOCC_", Source.GO_CC), ("GOMF_", Source.GO_MF))


def infer_source(name: str) -> Source:
    for prefix, source in _PREFIXES:
        if name.startswith(prefix):
            return source
    return Source.OTHER


class GmtParseError(ValueError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


@dataclass(frozen=True)
class GeneSet:
    name: str
    source: Source
    genes: tuple[str, ...]
    n_genes_file: int = -1
    description: str = ""

    def __post_init__(self):
        if not self.genes:
            raise ValueError(f"gene set {self.name!r} is empty")
        if len(set(self.genes)) != len(self.genes):
            raise ValueError(f"gene set {self.name!r} has duplicate symbols")
        if self.n_genes_file < 0:
            object.__setattr__(self, "n_genes_file", len(self.genes))

    @property
    def size(self) -> int:
        return len(self.genes)

    @property
    def file_size(self) -> int:
        return self.n_genes_file


@dataclass(frozen=True)
class CurationEntry:
    stage: str
    removed: str
    kept: str = ""
    similarity: float | None = None
    reason: str = ""


@dataclass
class PathwayCollection:
    sets: list[GeneSet]
    curation_log: list[CurationEntry] = field(default_factory=list)

    def __post_init__(self):
        names = [s.name for s in self.sets]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate set names: {dup}")

    def __len__(self) -> int:
        return len(self.sets)

    def names(self) -> list[str]:
        return [s.name for s in self.sets]

    def get(self, name: str) -> GeneSet:
        for s in self.sets:
            if s.name == name:
                return s
        raise KeyError(name)

    def merged(self, other: "PathwayCollection") -> "PathwayCollection":
        return PathwayCollection(self.sets + other.sets, self.curation_log + other.curation_log)


def parse_gmt_lines(lines: Iterable[str], path="<gmt>") -> PathwayCollection:
    sets: list[GeneSet] = []
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) < 3:
            raise GmtParseError(path, lineno, f"expected name, description and genes; got {len(fields)} field(s)")
        name = fields[0].strip()
        if name in seen:
            raise GmtParseError(path, lineno, f"duplicate set name {name!r} (first on line {seen[name]})")
        genes: list[str] = []
        dupes = []
        for g in (f.strip() for f in fields[2:]):
            if not g:
                continue
            if g in genes:
                dupes.append(g)
            else:
                genes.append(g)
        if dupes:
            log.warning("%s:%d: %s repeats genes %s; counted once", path, lineno, name, sorted(set(dupes)))
        if not genes:
            raise GmtParseError(path, lineno, f"set {name!r} lists no genes")
        seen[name] = lineno
        sets.append(GeneSet(name, infer_source(name), tuple(genes), len(genes), fields[1]))
    return PathwayCollection(sets)


def parse_gmt(path) -> PathwayCollection:
    with open(path, encoding="utf-8") as fh:
        return parse_gmt_lines(fh, path)


def size_filter(c: PathwayCollection, min_size: int = DEFAULT_MIN_SIZE,
                max_size: int = DEFAULT_MAX_SIZE) -> PathwayCollection:
    """Keep sets with min_size <= |genes| <= max_size; Hallmark sets are exempt."""
    if min_size > max_size:
        raise ValueError(f"min_size {min_size} > max_size {max_size}")
    kept, entries = [], list(c.curation_log)
    for s in c.sets:
        if s.source is Source.HALLMARK or min_size <= s.size <= max_size:
            kept.append(s)
        else:
            entries.append(CurationEntry("size", s.name, reason=f"{s.size} genes outside [{min_size},{max_size}]"))
    return PathwayCollection(kept, entries)


def jaccard(a: GeneSet, b: GeneSet) -> float:
    sa, sb = set(a.genes), set(b.genes)
    return len(sa & sb) / len(sa | sb)


def _incidence(sets: Sequence[GeneSet]) -> sp.csr_matrix:
    vocab: dict[str, int] = {}
    rows, cols = [], []
    for i, s in enumerate(sets):
        for g in s.genes:
            rows.append(i)
            cols.append(vocab.setdefault(g, len(vocab)))
    data = np.ones(len(rows), dtype=np.int64)
    return sp.csr_matrix((data, (rows, cols)), shape=(len(sets), max(len(vocab), 1)))


def overlapping_pairs(sets: Sequence[GeneSet]) -> list[tuple[int, int, int, int]]:
    """All (i, j, |A∩B|, |A∪B|) with i < j and a non-empty intersection."""
    m = _incidence(sets)
    inter = sp.triu(m @ m.T, k=1).tocoo()
    sizes = [s.size for s in sets]
    return [(int(i), int(j), int(n), sizes[i] + sizes[j] - int(n))
            for i, j, n in zip(inter.row, inter.col, inter.data) if n > 0]


def _victim(a: GeneSet, b: GeneSet) -> tuple[GeneSet, GeneSet]:
    """(removed, kept) for a violating pair."""
    if (a.file_size, a.name) > (b.file_size, b.name):
        return a, b
    return b, a


def redundancy_filter(c: PathwayCollection, tau: float = DEFAULT_TAU) -> PathwayCollection:
    """Iteratively drop the larger set of the most similar violating pair.

    Similarities never change when a set is removed, so sorting all violating
    pairs once and walking them in order, skipping pairs with an already
    removed member, is the same as re-scanning after every removal.
    """
    if not 0 < tau < 1:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    t = Fraction(str(tau))
    sets = c.sets
    candidates = []
    for i, j, n_int, n_uni in overlapping_pairs(sets):
        sim = Fraction(n_int, n_uni)
        if sim > t:
            removed, kept = _victim(sets[i], sets[j])
            # most similar first, then larger removed set, then larger removed name, then smaller kept name
            candidates.append(((-sim, -removed.file_size, _desc(removed.name), kept.name), removed, kept, sim))
    candidates.sort(key=lambda x: x[0])
    gone: set[str] = set()
    entries = list(c.curation_log)
    for _, removed, kept, sim in candidates:
        if removed.name in gone or kept.name in gone:
            continue
        gone.add(removed.name)
        entries.append(CurationEntry("redundancy", removed.name, kept.name, float(sim)))
    return PathwayCollection([s for s in sets if s.name not in gone], entries)


class _desc(str):
    """String that sorts in reverse order."""

    def __lt__(self, other):
        return str.__gt__(self, other)

    def __gt__(self, other):
        return str.__lt__(self, other)


def max_pairwise_jaccard(c: PathwayCollection) -> float:
    pairs = overlapping_pairs(c.sets)
    return max((n / u for _, _, n, u in pairs), default=0.0)


def restrict_to_panel(c: PathwayCollection, panel: Iterable[str]) -> PathwayCollection:
    """Intersect every set with the gene panel, keeping the set's gene order."""
    panel = set(panel)
    if not panel:
        raise ValueError("panel is empty")
    kept, entries = [], list(c.curation_log)
    for s in c.sets:
        genes = tuple(g for g in s.genes if g in panel)
        if not genes:
            entries.append(CurationEntry("panel", s.name, reason="no genes in panel"))
            continue
        kept.append(replace(s, genes=genes))
    return PathwayCollection(kept, entries)


def curate(c: PathwayCollection, panel: Iterable[str] | None = None, tau: float = DEFAULT_TAU,
           min_size: int = DEFAULT_MIN_SIZE, max_size: int = DEFAULT_MAX_SIZE) -> PathwayCollection:
    out = redundancy_filter(size_filter(c, min_size, max_size), tau)
    return restrict_to_panel(out, panel) if panel is not None else out


def write_gmt(c: PathwayCollection, path) -> None:
    lines = ["\t".join([s.name, s.description or "na", *s.genes]) for s in c.sets]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def write_curation_log(c: PathwayCollection, path, tau: float | None = None) -> None:
    head = [f"# ordering: {ORDERING_RULE}"]
    if tau is not None:
        head.append(f"# tau: {tau!r}")
    head.append("removed_name\tkept_name\tsimilarity\tstage\treason")
    body = [f"{e.removed}\t{e.kept}\t{'' if e.similarity is None else repr(e.similarity)}\t{e.stage}\t{e.reason}"
            for e in c.curation_log]
    Path(path).write_text("\n".join(head + body) + "\n", encoding="utf-8")


def read_panel(path) -> list[str]:
    """One gene symbol per line; blank lines and '#' comments ignored."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(line)
    return out
