"""Greedy counterfactual search over latent directions or style channels.

Both algorithms share one core: rank every candidate direction by the
mean classifier change it causes across the input images, then greedily
take the best remaining direction and move every image that flips to the
explained set. `eigen_find` searches the 2k signed factored directions;
`att_find` searches all 2m signed style-channel perturbations.

Determinism rules: images are processed in ascending-id order in fixed
chunks, so results are independent of input permutation and of the
worker count; the per-candidate mean accumulates sequentially in float64.
Every generated-image classification is counted, and the models are
checksummed before and after a search to prove they were not touched.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .models import ModelBundle
from .stylespace import ChannelStats, StyleBasis, channel_stats, sefa_factorize

EIGEN = "eigen"
CHANNEL = "channel"

FLIP_THRESHOLD = 0.5
CHUNK = 64  # fixed evaluation chunk; part of the determinism contract


class PreconditionError(ValueError):
    pass


class InvariantError(RuntimeError):
    pass


@dataclass(frozen=True)
class DirectionCandidate:
    kind: str  # EIGEN or CHANNEL
    index: int  # eigen: 1..k (rank by eigenvalue); channel: 0..m-1
    sign: int  # +1 or -1

    def order_key(self) -> tuple[int, int, int]:
        """Canonical tie-break order: eigen before channel, low index, + before -."""
        return (0 if self.kind == EIGEN else 1, self.index, 0 if self.sign > 0 else 1)

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "index": self.index, "sign": self.sign}


@dataclass(frozen=True)
class SearchConfig:
    k: int = 8
    d: float = 10.0
    max_directions: int | None = None  # cap on greedy picks (attfind runaway guard)
    parallel_workers: int = 1
    delta_on_logit: bool = False  # rank on logit margin instead of probability
    stats_samples: int = 2048
    stats_seed: int = 0

    def validate(self) -> None:
        if self.k < 1:
            raise PreconditionError(f"k must be >= 1, got {self.k}")
        if self.d < 0:
            raise PreconditionError(f"d must be >= 0, got {self.d}")
        if self.parallel_workers < 1:
            raise PreconditionError("parallel_workers must be >= 1")


@dataclass
class QueryCounter:
    """Counts generated-image classifier measurements, by phase."""

    ranking: int = 0
    baseline: int = 0
    greedy: int = 0

    @property
    def total(self) -> int:
        return self.ranking + self.baseline + self.greedy


@dataclass(frozen=True)
class DeltaTable:
    candidates: tuple[DirectionCandidate, ...]
    delta: np.ndarray  # (n_candidates, n_images) float64
    mean: np.ndarray  # (n_candidates,) float64
    image_ids: np.ndarray  # (n_images,) ascending


@dataclass(frozen=True)
class ExplainedImage:
    image_id: int
    counterfactual: np.ndarray  # flat float32
    direction: DirectionCandidate
    prob_before: float
    prob_after: float


@dataclass(frozen=True)
class ChosenDirection:
    direction: DirectionCandidate
    mean_delta: float
    n_flipped: int


@dataclass
class SearchResult:
    algorithm: str
    image_ids: np.ndarray
    explained: list[ExplainedImage]
    unexplained_ids: list[int]
    delta_table: DeltaTable
    chosen: list[ChosenDirection]
    counter: QueryCounter
    wall_ms: float
    n_candidates: int
    config: SearchConfig = field(default_factory=SearchConfig)

    @property
    def n(self) -> int:
        return len(self.image_ids)

    @property
    def n_explained(self) -> int:
        return len(self.explained)

    @property
    def explained_pct(self) -> float:
        return 100.0 * self.n_explained / self.n if self.n else 0.0

    def to_json_dict(self, pathology: str | None = None) -> dict:
        return {
            "pathology": pathology,
            "algorithm": self.algorithm,
            "n": self.n,
            "n_explained": self.n_explained,
            "explained_pct": self.explained_pct,
            "query_count": self.counter.total,
            "wall_ms": self.wall_ms,
            "chosen_directions": [
                {
                    **c.direction.to_json_dict(),
                    "mean_delta": c.mean_delta,
                    "n_flipped": c.n_flipped,
                }
                for c in self.chosen
            ],
            "per_image": [
                {
                    "id": int(e.image_id),
                    "direction": e.direction.to_json_dict(),
                    "prob_before": e.prob_before,
                    "prob_after": e.prob_after,
                }
                for e in self.explained
            ],
            "unexplained": [int(i) for i in self.unexplained_ids],
            "queries_ranking": self.counter.ranking,
            "queries_baseline": self.counter.baseline,
            "queries_greedy": self.counter.greedy,
            "n_candidates": self.n_candidates,
            "k": self.config.k,
            "d": self.config.d,
        }


def eigen_candidates(k: int) -> tuple[DirectionCandidate, ...]:
    """Both signs of every ranked direction, in canonical order."""
    return tuple(
        DirectionCandidate(EIGEN, i, s) for i in range(1, k + 1) for s in (+1, -1)
    )


def channel_candidates(m: int) -> tuple[DirectionCandidate, ...]:
    return tuple(
        DirectionCandidate(CHANNEL, c, s) for c in range(m) for s in (+1, -1)
    )


def _validate_candidate(
    cand: DirectionCandidate, basis: StyleBasis | None, stats: ChannelStats | None
) -> None:
    if cand.sign not in (+1, -1):
        raise PreconditionError(f"bad sign {cand.sign}")
    if cand.kind == EIGEN:
        if basis is None or not (1 <= cand.index <= basis.k):
            raise PreconditionError(f"eigen index {cand.index} outside basis")
    elif cand.kind == CHANNEL:
        if stats is None or not (0 <= cand.index < stats.std.shape[0]):
            raise PreconditionError(f"channel {cand.index} outside stats")
    else:
        raise PreconditionError(f"unknown candidate kind {cand.kind!r}")


def apply_direction(
    bundle: ModelBundle,
    x: np.ndarray,
    y: int,
    cand: DirectionCandidate,
    d: float,
    stats: ChannelStats | None = None,
    basis: StyleBasis | None = None,
) -> np.ndarray:
    """Counterfactual image for one input along one signed candidate.

    Eigen candidates displace the encoded latent by d along the unit
    direction; channel candidates add d times the channel's std to the
    encoded style vector. Conditioning stays on the original label y.
    """
    _validate_candidate(cand, basis, stats)
    w = bundle.encoder.encode(x)
    if cand.kind == EIGEN:
        shifted = (w + d * cand.sign * basis.directions[cand.index - 1]).astype(
            np.float32
        )
        return bundle.generator.generate_from_w(shifted, y)
    s = np.array(bundle.generator.style_of(w, y), dtype=np.float32)
    s[..., cand.index] += np.float32(d * cand.sign * stats.std[cand.index])
    return bundle.generator.synthesize(s)


def _candidate_batch(
    bundle: ModelBundle,
    w: np.ndarray,
    base_styles: np.ndarray,
    y_arr: np.ndarray,
    cand: DirectionCandidate,
    d: float,
    stats: ChannelStats | None,
    basis: StyleBasis | None,
) -> np.ndarray:
    if cand.kind == EIGEN:
        shifted = (w + d * cand.sign * basis.directions[cand.index - 1]).astype(
            np.float32
        )
        return bundle.generator.generate_from_w(shifted, y_arr)
    s = base_styles.copy()
    s[:, cand.index] += np.float32(d * cand.sign * stats.std[cand.index])
    return bundle.generator.synthesize(s)


def _scores(bundle: ModelBundle, images: np.ndarray, y: int, on_logit: bool) -> np.ndarray:
    """Per-image scalar score of the counter class on generated images."""
    ybar = 1 - y
    if on_logit:
        logits = bundle.classifier.logits(images).astype(np.float64)
        return logits[:, ybar] - logits[:, y]
    return bundle.classifier.probabilities(images)[:, ybar]


def _flip_probs(bundle: ModelBundle, images: np.ndarray, y: int) -> np.ndarray:
    return bundle.classifier.probabilities(images)[:, 1 - y]


def _ordered_mean(values: np.ndarray) -> float:
    """Sequential float64 accumulation in the given (ascending-id) order."""
    total = 0.0
    for v in values:
        total += float(v)
    return total / len(values)


def _chunks(n: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + CHUNK, n)) for lo in range(0, n, CHUNK)]


def rank_directions(
    bundle: ModelBundle,
    images: np.ndarray,
    image_ids: np.ndarray,
    y: int,
    candidates: tuple[DirectionCandidate, ...],
    d: float,
    stats: ChannelStats | None = None,
    basis: StyleBasis | None = None,
    workers: int = 1,
    counter: QueryCounter | None = None,
    on_logit: bool = False,
):
    """Score every (image, candidate) cell and the per-candidate means.

    Exactly |candidates| * n + n generated-image classifications are
    performed: the reconstruction baseline G(E(x), y) is evaluated once
    per image and shared by every candidate.
    """
    counter = counter if counter is not None else QueryCounter()
    images = np.asarray(images, dtype=np.float32)
    image_ids = np.asarray(image_ids, dtype=np.int64)
    if images.ndim != 2 or images.shape[0] != image_ids.shape[0]:
        raise PreconditionError("images and image_ids must align")
    if len(np.unique(image_ids)) != len(image_ids):
        raise PreconditionError("image ids must be unique")

    order = np.argsort(image_ids)
    images = images[order]
    image_ids = image_ids[order]
    n = images.shape[0]

    _, preds = bundle.classifier.classify(images)
    for i in range(n):
        if int(preds[i]) != y:
            raise PreconditionError(
                f"image {int(image_ids[i])} is classified {int(preds[i])}, expected {y}"
            )

    for cand in candidates:
        _validate_candidate(cand, basis, stats)

    w = bundle.encoder.encode(images)
    y_arr = np.full(n, y, dtype=np.int64)
    base_styles = np.array(bundle.generator.style_of(w, y_arr), dtype=np.float32)
    baseline = bundle.generator.synthesize(base_styles)
    counter.baseline += n
    base_score = _scores(bundle, baseline, y, on_logit)
    base_prob = _flip_probs(bundle, baseline, y)

    delta = np.empty((len(candidates), n), dtype=np.float64)

    def eval_cell(ci: int, lo: int, hi: int) -> None:
        imgs = _candidate_batch(
            bundle, w[lo:hi], base_styles[lo:hi], y_arr[lo:hi],
            candidates[ci], d, stats, basis,
        )
        delta[ci, lo:hi] = _scores(bundle, imgs, y, on_logit) - base_score[lo:hi]

    tasks = [(ci, lo, hi) for ci in range(len(candidates)) for lo, hi in _chunks(n)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda t: eval_cell(*t), tasks))
    else:
        for t in tasks:
            eval_cell(*t)
    counter.ranking += len(candidates) * n

    mean = np.array([_ordered_mean(delta[ci]) for ci in range(len(candidates))])
    table = DeltaTable(tuple(candidates), delta, mean, image_ids)
    return table, (images, w, base_styles, base_prob)


def greedy_explain(
    bundle: ModelBundle,
    table: DeltaTable,
    ranked_state,
    y: int,
    d: float,
    stats: ChannelStats | None = None,
    basis: StyleBasis | None = None,
    counter: QueryCounter | None = None,
    workers: int = 1,
    max_directions: int | None = None,
):
    """Repeatedly take the best remaining direction, flip what it can.

    Ties in the mean table resolve to the earliest candidate in canonical
    order (the candidate tuple is built in that order). A flip requires
    the counter-class probability to exceed 0.5 strictly.
    """
    counter = counter if counter is not None else QueryCounter()
    images, w, base_styles, base_prob = ranked_state
    n = images.shape[0]
    y_arr = np.full(n, y, dtype=np.int64)
    remaining = list(range(n))
    available = list(range(len(table.candidates)))
    explained: list[ExplainedImage] = []
    chosen: list[ChosenDirection] = []

    while remaining and available:
        if max_directions is not None and len(chosen) >= max_directions:
            break
        best = available[0]
        for ci in available[1:]:
            if table.mean[ci] > table.mean[best]:
                best = ci
        cand = table.candidates[best]

        idx = np.array(remaining, dtype=np.int64)
        probs = np.empty(len(idx), dtype=np.float64)
        cf_imgs = np.empty((len(idx), images.shape[1]), dtype=np.float32)

        def flip_chunk(lo: int, hi: int) -> None:
            sel = idx[lo:hi]
            imgs = _candidate_batch(
                bundle, w[sel], base_styles[sel], y_arr[sel], cand, d, stats, basis
            )
            cf_imgs[lo:hi] = imgs
            probs[lo:hi] = _flip_probs(bundle, imgs, y)

        spans = _chunks(len(idx))
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(lambda s: flip_chunk(*s), spans))
        else:
            for s in spans:
                flip_chunk(*s)
        counter.greedy += len(idx)

        flipped = probs > FLIP_THRESHOLD
        n_flipped = int(flipped.sum())
        flipped_rows = set()
        for j in np.nonzero(flipped)[0]:
            i = int(idx[j])
            flipped_rows.add(i)
            explained.append(
                ExplainedImage(
                    image_id=int(table.image_ids[i]),
                    counterfactual=cf_imgs[j].copy(),
                    direction=cand,
                    prob_before=float(base_prob[i]),
                    prob_after=float(probs[j]),
                )
            )
        remaining = [i for i in remaining if i not in flipped_rows]
        chosen.append(ChosenDirection(cand, float(table.mean[best]), n_flipped))
        available.remove(best)

    unexplained = [int(table.image_ids[i]) for i in remaining]
    return explained, unexplained, chosen, counter


def _run_search(
    bundle: ModelBundle,
    images: np.ndarray,
    image_ids: np.ndarray,
    y: int,
    config: SearchConfig,
    candidates: tuple[DirectionCandidate, ...],
    algorithm: str,
    stats: ChannelStats | None,
    basis: StyleBasis | None,
) -> SearchResult:
    config.validate()
    before = bundle.checksum()
    t0 = time.perf_counter()
    counter = QueryCounter()
    table, state = rank_directions(
        bundle, images, image_ids, y, candidates, config.d,
        stats=stats, basis=basis, workers=config.parallel_workers,
        counter=counter, on_logit=config.delta_on_logit,
    )
    explained, unexplained, chosen, counter = greedy_explain(
        bundle, table, state, y, config.d,
        stats=stats, basis=basis, counter=counter,
        workers=config.parallel_workers, max_directions=config.max_directions,
    )
    wall_ms = (time.perf_counter() - t0) * 1000.0
    if bundle.checksum() != before:
        raise InvariantError("model weights changed during search")

    explained_ids = {e.image_id for e in explained}
    if explained_ids & set(unexplained) or len(explained_ids) + len(unexplained) != len(image_ids):
        raise InvariantError("explained/unexplained do not partition the input ids")

    return SearchResult(
        algorithm=algorithm,
        image_ids=table.image_ids,
        explained=explained,
        unexplained_ids=unexplained,
        delta_table=table,
        chosen=chosen,
        counter=counter,
        wall_ms=wall_ms,
        n_candidates=len(candidates),
        config=config,
    )


def eigen_find(
    bundle: ModelBundle,
    images: np.ndarray,
    image_ids: np.ndarray,
    y: int,
    config: SearchConfig,
    basis: StyleBasis | None = None,
) -> SearchResult:
    """Greedy search over the 2k signed factored directions."""
    if basis is None:
        basis = sefa_factorize(bundle.generator, config.k)
    return _run_search(
        bundle, images, image_ids, y, config,
        eigen_candidates(config.k), "eigenfind", None, basis,
    )


def att_find(
    bundle: ModelBundle,
    images: np.ndarray,
    image_ids: np.ndarray,
    y: int,
    config: SearchConfig,
    stats: ChannelStats | None = None,
) -> SearchResult:
    """Greedy search over all 2m signed style-channel perturbations."""
    if stats is None:
        stats = channel_stats(bundle.generator, config.stats_samples, config.stats_seed)
    m = bundle.generator.config.style_dim
    return _run_search(
        bundle, images, image_ids, y, config,
        channel_candidates(m), "attfind", stats, None,
    )
