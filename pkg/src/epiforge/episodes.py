"""N-way K-shot episode construction.

Two constructors:

* :func:`sample_episodes` draws randomized training/validation episodes.
  Episode ``i`` is built from its own stream keyed by ``(seed, i)``.
* :func:`build_test_tasks` builds fixed evaluation tasks in which, per class,
  one whole case is held out as the query set and the support set is drawn
  from the remaining cases only.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

from ._rng import stream
from .dataset import DatasetError, DatasetIndex, ImageEntry

log = logging.getLogger(__name__)

Labeled = tuple[ImageEntry, int]


class EpisodeError(DatasetError):
    """The index cannot supply episodes of the requested shape."""


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int
    k_shot: int
    q_queries_per_class: int | None = 15

    def __post_init__(self):
        if self.n_way < 2:
            raise ValueError(f"n_way must be >= 2, got {self.n_way}")
        if self.k_shot < 1:
            raise ValueError(f"k_shot must be >= 1, got {self.k_shot}")
        if self.q_queries_per_class is not None and self.q_queries_per_class < 1:
            raise ValueError(f"q_queries_per_class must be >= 1, got {self.q_queries_per_class}")


@dataclass(frozen=True)
class Episode:
    support: tuple[Labeled, ...]
    query: tuple[Labeled, ...]
    spec: EpisodeSpec
    seed_tag: int
    classes: tuple[int, ...]  # global class index for each local label

    @property
    def support_entries(self) -> list[ImageEntry]:
        return [e for e, _ in self.support]

    @property
    def query_entries(self) -> list[ImageEntry]:
        return [e for e, _ in self.query]

    @property
    def support_labels(self) -> list[int]:
        return [y for _, y in self.support]

    @property
    def query_labels(self) -> list[int]:
        return [y for _, y in self.query]


def sample_episodes(index: DatasetIndex, spec: EpisodeSpec, count: int, seed: int) -> list[Episode]:
    if spec.q_queries_per_class is None:
        raise ValueError("randomized episodes need a fixed q_queries_per_class")
    if spec.n_way > index.n_classes:
        raise EpisodeError(f"n_way={spec.n_way} exceeds the {index.n_classes} classes in the index")
    groups = index.by_class()
    need = spec.k_shot + spec.q_queries_per_class
    for c, members in enumerate(groups):
        if len(members) < need:
            raise EpisodeError(
                f"class {index.classes[c]!r} has {len(members)} images; "
                f"{spec.k_shot}-shot with {spec.q_queries_per_class} queries needs {need}"
            )
    episodes = []
    for i in range(count):
        rng = stream(seed, i)
        chosen = [int(c) for c in rng.choice(index.n_classes, size=spec.n_way, replace=False)]
        support, query = [], []
        for label, c in enumerate(chosen):
            picks = rng.choice(len(groups[c]), size=need, replace=False)
            support += [(groups[c][j], label) for j in picks[: spec.k_shot]]
            query += [(groups[c][j], label) for j in picks[spec.k_shot :]]
        episodes.append(Episode(tuple(support), tuple(query), spec, i, tuple(chosen)))
    return episodes


def build_test_tasks(index: DatasetIndex, support_per_class: int, n_tasks: int, seed: int) -> list[Episode]:
    """Case-disjoint evaluation tasks over every class of ``index``.

    Per class the query cases for tasks ``0..n_tasks-1`` follow a seeded
    permutation of that class's cases, so tasks use distinct query cases
    whenever the class has at least ``n_tasks`` cases.
    """
    cases = index.cases_by_class()
    for c, by_case in enumerate(cases):
        if len(by_case) < 2:
            raise EpisodeError(
                f"class {index.classes[c]!r} has a single case ({next(iter(by_case))!r}); "
                "a case-disjoint support/query split is impossible"
            )
    order = []
    for c, by_case in enumerate(cases):
        ids = list(by_case)
        perm = stream(seed, 0, c).permutation(len(ids))
        order.append([ids[j] for j in perm])
        if len(ids) < n_tasks:
            log.warning(
                "class %r has %d cases for %d tasks; query cases will repeat across tasks",
                index.classes[c], len(ids), n_tasks,
            )
    spec = EpisodeSpec(n_way=index.n_classes, k_shot=support_per_class, q_queries_per_class=None)
    tasks = []
    for t in range(n_tasks):
        support, query = [], []
        for c, by_case in enumerate(cases):
            held = order[c][t % len(order[c])]
            pool = [e for cid, members in by_case.items() if cid != held for e in members]
            if len(pool) < support_per_class:
                raise EpisodeError(
                    f"class {index.classes[c]!r}: only {len(pool)} images outside query case {held!r}, "
                    f"need {support_per_class}"
                )
            picks = stream(seed, 1, t, c).choice(len(pool), size=support_per_class, replace=False)
            support += [(pool[j], c) for j in picks]
            query += [(e, c) for e in by_case[held]]
        tasks.append(Episode(tuple(support), tuple(query), spec, t, tuple(range(index.n_classes))))
    return tasks


def case_overlap(episode: Episode) -> set[str]:
    return {e.case_id for e in episode.support_entries} & {e.case_id for e in episode.query_entries}


def entry_overlap(episode: Episode) -> set[ImageEntry]:
    return set(episode.support_entries) & set(episode.query_entries)


# ---------------------------------------------------------------------------
# JSON-lines replay files


def _encode(episode: Episode, index: DatasetIndex) -> dict:
    def rows(items: Iterable[Labeled]):
        return [[index.classes[e.class_index], e.case_id, e.image_id, y] for e, y in items]

    return {
        "spec": asdict(episode.spec),
        "seed_tag": episode.seed_tag,
        "classes": [index.classes[c] for c in episode.classes],
        "support": rows(episode.support),
        "query": rows(episode.query),
    }


def save_episodes(episodes: Sequence[Episode], index: DatasetIndex, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps(_encode(ep, index), separators=(",", ":")) + "\n")
    return path


def load_episodes(path: str | Path, index: DatasetIndex) -> list[Episode]:
    class_ids = {name: i for i, name in enumerate(index.classes)}
    lookup = {(e.class_index, e.case_id, e.image_id): e for e in index.entries}
    episodes = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)

                def resolve(rows):
                    return tuple((lookup[(class_ids[cls], case, img)], int(y)) for cls, case, img, y in rows)

                episodes.append(Episode(
                    resolve(rec["support"]),
                    resolve(rec["query"]),
                    EpisodeSpec(**rec["spec"]),
                    int(rec["seed_tag"]),
                    tuple(class_ids[c] for c in rec["classes"]),
                ))
            except (KeyError, ValueError, TypeError) as exc:
                raise EpisodeError(f"cannot replay episode: {exc!r}", line=lineno) from exc
    return episodes
