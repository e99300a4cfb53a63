"""Clustering evaluation: dimensionality reduction, density clustering, NMI.

The reduction/clustering pair sits behind a small backend contract so the
metric and search logic can be tested with cheap stubs. The reference
backend pairs a principal-component reduction with hierarchical density
clustering; a neighborhood-graph reducer is picked up automatically when
the optional dependency is installed, and a stochastic-neighbor variant is
available for comparison (it also draws the 2-D projection plots).
"""

import dataclasses
import itertools
import json

import numpy as np

from .errors import BackendError, ValidationError
from .fileio import atomic_write_text


@dataclasses.dataclass(frozen=True)
class ClusterParams:
    reduce_dim: int = 4
    min_cluster_size: int = 5
    min_samples: int = 3
    cluster_selection_epsilon: float = 0.1
    seed: int = 0

    def validate(self):
        if self.reduce_dim < 1:
            raise ValidationError("reduce_dim must be positive")
        if self.min_cluster_size < 2:
            raise ValidationError("min_cluster_size must be at least 2")
        if self.min_samples < 1:
            raise ValidationError("min_samples must be at least 1")
        if self.cluster_selection_epsilon < 0:
            raise ValidationError("cluster_selection_epsilon must be >= 0")

    def sort_key(self):
        return (self.reduce_dim, self.min_cluster_size, self.min_samples,
                self.cluster_selection_epsilon, self.seed)


@dataclasses.dataclass
class ClusterResult:
    assignments: np.ndarray
    params: ClusterParams
    n_clusters: int
    noise_fraction: float


@dataclasses.dataclass
class ContingencyTable:
    counts: np.ndarray
    row_totals: np.ndarray
    col_totals: np.ndarray
    n: int

    @classmethod
    def from_labels(cls, labels, clusters):
        a = np.asarray(labels)
        b = np.asarray(clusters)
        if a.shape != b.shape or a.ndim != 1:
            raise ValidationError("labels and clusters must be equal-length "
                                  "1-d sequences")
        if a.size == 0:
            raise ValidationError("cannot tabulate empty label sequences")
        _, ai = np.unique(a, return_inverse=True)
        _, bi = np.unique(b, return_inverse=True)
        counts = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
        np.add.at(counts, (ai, bi), 1)
        return cls(counts=counts, row_totals=counts.sum(axis=1),
                   col_totals=counts.sum(axis=0), n=int(a.size))


def _entropy(totals, n):
    p = totals[totals > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(labels, clusters):
    """Normalized mutual information 2*I/(H(L)+H(C)), natural log.

    Conventions: 0*ln 0 = 0; both partitions trivial -> 1.0; exactly one
    trivial -> 0.0. Symmetric and invariant to relabeling.
    """
    table = ContingencyTable.from_labels(labels, clusters)
    n = table.n
    h_l = _entropy(table.row_totals, n)
    h_c = _entropy(table.col_totals, n)
    if h_l == 0.0 and h_c == 0.0:
        return 1.0
    if h_l == 0.0 or h_c == 0.0:
        return 0.0
    info = 0.0
    for i in range(table.counts.shape[0]):
        for j in range(table.counts.shape[1]):
            c = table.counts[i, j]
            if c == 0:
                continue
            p = c / n
            info += p * np.log(c * n / (table.row_totals[i] * table.col_totals[j]))
    score = 2.0 * info / (h_l + h_c)
    return min(1.0, max(0.0, float(score)))


def clustering_nmi(labels, assignments, include_noise=False):
    """NMI between ground-truth labels and cluster assignments.

    Noise points (assignment -1) are dropped by default; with include_noise
    they count as one extra class. All-noise clusterings score 0.
    """
    labels = np.asarray(labels)
    assignments = np.asarray(assignments)
    if labels.shape != assignments.shape:
        raise ValidationError("labels and assignments must align")
    if not include_noise:
        keep = assignments != -1
        if not keep.any():
            return 0.0
        labels = labels[keep]
        assignments = assignments[keep]
    return nmi(labels, assignments)


class PcaHdbscanBackend:
    """Principal-component reduction + hierarchical density clustering.

    The reduction is deterministic and distance-preserving, which keeps
    tight, well-separated groups intact for the density stage; neighbor-
    embedding reducers tear or merge such groups at small sample sizes.
    """

    name = "pca+hdbscan"

    def reduce(self, vectors, dim, seed):
        from sklearn.decomposition import PCA

        x = np.asarray(vectors, dtype=np.float64)
        n_comp = min(dim, x.shape[0], x.shape[1])
        if n_comp >= x.shape[1]:
            return x.copy()
        return PCA(n_components=n_comp, random_state=seed).fit_transform(x)

    def cluster(self, points, params):
        from sklearn.cluster import HDBSCAN

        model = HDBSCAN(min_cluster_size=params.min_cluster_size,
                        min_samples=params.min_samples,
                        cluster_selection_epsilon=params.cluster_selection_epsilon)
        return model.fit_predict(np.asarray(points, dtype=np.float64))


class TsneHdbscanBackend(PcaHdbscanBackend):
    """Exact-method stochastic-neighbor reduction + density clustering."""

    name = "tsne+hdbscan"

    def reduce(self, vectors, dim, seed):
        from sklearn.manifold import TSNE

        x = np.asarray(vectors, dtype=np.float64)
        n = x.shape[0]
        perplexity = min(30.0, max(2.0, (n - 1) / 3.0))
        tsne = TSNE(n_components=dim, method="exact", init="random",
                    random_state=seed, perplexity=perplexity,
                    learning_rate="auto")
        return tsne.fit_transform(x)


class UmapHdbscanBackend(PcaHdbscanBackend):
    """Neighborhood-graph reduction + density clustering (optional)."""

    name = "umap+hdbscan"

    def reduce(self, vectors, dim, seed):
        import umap

        x = np.asarray(vectors, dtype=np.float64)
        reducer = umap.UMAP(n_components=dim, random_state=seed)
        return reducer.fit_transform(x)


def default_backend():
    try:
        import umap  # noqa: F401
    except ImportError:
        return PcaHdbscanBackend()
    return UmapHdbscanBackend()


def _canonical_assignments(raw, n_records):
    labels = np.asarray(raw)
    if labels.shape != (n_records,):
        raise BackendError(
            f"backend returned {labels.shape} assignments for {n_records} records")
    out = np.full(n_records, -1, dtype=np.int64)
    ids = sorted(set(int(v) for v in labels) - {-1})
    remap = {v: i for i, v in enumerate(ids)}
    for i, v in enumerate(labels):
        if int(v) != -1:
            out[i] = remap[int(v)]
    return out, len(ids)


def reduce_and_cluster(records, params, backend=None):
    """Reduce record vectors to params.reduce_dim and density-cluster them."""
    params.validate()
    backend = backend or default_backend()
    if len(records) < params.min_cluster_size:
        raise ValidationError(
            f"{len(records)} records but min_cluster_size={params.min_cluster_size}")
    x = np.stack([np.asarray(r.vector, dtype=np.float64) for r in records])
    try:
        reduced = backend.reduce(x, params.reduce_dim, params.seed)
        raw = backend.cluster(reduced, params)
    except (ValidationError, BackendError):
        raise
    except Exception as exc:
        raise BackendError(f"clustering backend failed with {params}: {exc}") from exc
    assignments, n_clusters = _canonical_assignments(raw, len(records))
    noise = float((assignments == -1).mean())
    return ClusterResult(assignments=assignments, params=params,
                         n_clusters=n_clusters, noise_fraction=noise)


def default_grid(seed=0):
    """Small sweep around the reference optimum; one reduction, many
    clusterings, so only distinct (reduce_dim, seed) pairs cost a reduction."""
    sizes = (3, 5, 8)
    samples = (1, 3, 5)
    epsilons = (0.0, 0.1)
    return [ClusterParams(reduce_dim=4, min_cluster_size=mcs, min_samples=ms,
                          cluster_selection_epsilon=eps, seed=seed)
            for mcs, ms, eps in itertools.product(sizes, samples, epsilons)]


def search_cluster_params(records, labels, grid=None, backend=None,
                          include_noise=False):
    """Exhaustive grid search maximizing NMI against the given labels.

    Ties break toward lower noise fraction, then lexicographic parameters.
    Returns (best ClusterParams, per-candidate result rows).
    """
    backend = backend or default_backend()
    grid = default_grid() if grid is None else list(grid)
    if not grid:
        raise ValidationError("parameter grid is empty")
    labels = np.asarray(labels)
    if labels.shape != (len(records),):
        raise ValidationError("one label per record is required")
    x = np.stack([np.asarray(r.vector, dtype=np.float64) for r in records])
    reduced_cache = {}
    rows = []
    best = None
    best_key = None
    for params in grid:
        params.validate()
        if len(records) < params.min_cluster_size:
            raise ValidationError(
                f"{len(records)} records but min_cluster_size={params.min_cluster_size}")
        cache_key = (params.reduce_dim, params.seed)
        try:
            if cache_key not in reduced_cache:
                reduced_cache[cache_key] = backend.reduce(
                    x, params.reduce_dim, params.seed)
            raw = backend.cluster(reduced_cache[cache_key], params)
        except (ValidationError, BackendError):
            raise
        except Exception as exc:
            raise BackendError(
                f"clustering backend failed with {params}: {exc}") from exc
        assignments, n_clusters = _canonical_assignments(raw, len(records))
        noise = float((assignments == -1).mean())
        score = clustering_nmi(labels, assignments, include_noise=include_noise)
        rows.append({"params": params, "nmi": score, "n_clusters": n_clusters,
                     "noise_fraction": noise})
        key = (-score, noise, params.sort_key())
        if best_key is None or key < best_key:
            best_key = key
            best = params
    return best, rows


def save_cluster_report(result, score, path):
    payload = {
        "params": dataclasses.asdict(result.params),
        "n_clusters": result.n_clusters,
        "noise_fraction": result.noise_fraction,
        "nmi": score,
        "assignments": [int(v) for v in result.assignments],
    }
    atomic_write_text(path, json.dumps(payload, indent=2) + "\n")


def emit_projection_plot(records, out_path, seed=0, backend=None):
    """2-D stochastic-neighbor projection of record vectors by song type.

    The plot always uses the neighbor-embedding view (it spreads clusters
    for the eye) even though the clustering path reduces differently.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if len(records) < 2:
        raise ValidationError("need at least two records to plot")
    backend = backend or TsneHdbscanBackend()
    x = np.stack([np.asarray(r.vector, dtype=np.float64) for r in records])
    points = backend.reduce(x, 2, seed)
    types = sorted({r.song_type for r in records})
    cmap = plt.get_cmap("tab10")
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    for i, t in enumerate(types):
        sel = np.array([r.song_type == t for r in records])
        ax.scatter(points[sel, 0], points[sel, 1], s=16,
                   color=cmap(i % 10), label=t or "(unlabeled)")
    ax.set_xticks([])
    ax.set_yticks([])
    ax.legend(frameon=False, fontsize=7, loc="best")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
