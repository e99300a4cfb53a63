"""Whole-song embedding extraction and per-unit informativeness analysis.

Embeddings are the posterior mean of the per-song latent, so extraction is
deterministic given a checkpoint. Units are ranked by their mean KL to the
prior across a dataset; high-KL units carry the information the capacity
constraint allowed through, and restricting embeddings to them ("compression")
should not hurt downstream clustering.
"""

import dataclasses
import json
import warnings

import numpy as np

from .errors import ValidationError
from .fileio import atomic_write_text
from .model import DualVae, shuffle_segments
from .nn import make_mask
from .objective import gaussian_kl_per_unit

TRAVERSAL_VALUES = (-3.0, -1.5, 0.0, 1.5, 3.0)


@dataclasses.dataclass
class EmbeddingRecord:
    song_id: str
    vector: np.ndarray
    individual_id: str = ""
    song_type: str = ""


@dataclasses.dataclass
class UnitInformativeness:
    """Per-unit statistics of the local posterior over a dataset."""

    mean_kl: np.ndarray
    mean_mu: np.ndarray
    mean_var: np.ndarray
    selected_units: list
    method: str = "largest-gap"
    threshold: float = 1.0


def _batches_by_length(songs):
    """Group songs into identical-length batches; each yields exact per-song
    results because no padding is involved."""
    groups = {}
    for i, song in enumerate(songs):
        groups.setdefault(song.n_frames, []).append(i)
    for t in sorted(groups):
        yield t, groups[t]


def _local_posteriors(model, songs, shuffle=False, seed=0):
    """Posterior (mean, log_variance) of the per-song latent, [N, d_L] each.

    By default the local encoder sees the song unshuffled; pass shuffle=True
    to reproduce the training-time segment shuffling (seeded per song).
    """
    if not songs:
        raise ValidationError("no songs to analyze")
    n = len(songs)
    d = model.hyper.d_l
    means = np.zeros((n, d))
    logvars = np.zeros((n, d))
    dual = isinstance(model, DualVae)
    for t, idx in _batches_by_length(songs):
        x = np.zeros((len(idx), model.hyper.n_mels, t), dtype=model.dtype)
        for row, i in enumerate(idx):
            values = songs[i].values
            if shuffle and dual:
                rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
                values = shuffle_segments(values, rng)
            x[row] = values
        lengths = np.full(len(idx), t, dtype=np.int64)
        mask = make_mask(lengths, t, model.dtype)
        if dual:
            q = model.local_encoder.forward(x, mask, lengths)
        else:
            q = model.encode(x, mask, lengths, training=False, update_stats=False)
        means[idx] = q.mean
        logvars[idx] = q.log_variance
    return means, logvars


def extract_embeddings(model, songs, shuffle=False, seed=0):
    """One EmbeddingRecord per song, in input order."""
    means, _ = _local_posteriors(model, songs, shuffle=shuffle, seed=seed)
    return [EmbeddingRecord(song_id=s.song_id, vector=means[i].copy(),
                            individual_id=s.individual_id, song_type=s.song_type)
            for i, s in enumerate(songs)]


def save_embeddings(records, path):
    lines = []
    for r in records:
        lines.append(json.dumps({
            "song_id": r.song_id, "individual_id": r.individual_id,
            "song_type": r.song_type,
            "vector": [float(v) for v in r.vector]},
            separators=(",", ":")))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_embeddings(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            records.append(EmbeddingRecord(
                song_id=obj["song_id"],
                vector=np.asarray(obj["vector"], dtype=np.float64),
                individual_id=obj.get("individual_id", ""),
                song_type=obj.get("song_type", "")))
    return records


def select_informative_units(mean_kl, method="largest-gap", threshold=1.0):
    """Indices (ascending) of units judged informative by their mean KL.

    largest-gap sorts units by KL descending and cuts at the biggest
    consecutive ratio; if no ratio exceeds 2 the spectrum has no clear edge
    and the threshold rule is used instead.
    """
    kl = np.asarray(mean_kl, dtype=np.float64)
    if kl.ndim != 1 or kl.size == 0:
        raise ValidationError("mean_kl must be a nonempty vector")
    if not np.all(np.isfinite(kl)):
        raise ValidationError("mean_kl contains non-finite entries")
    if float(kl.max()) < 1e-6:
        warnings.warn("all units carry ~zero KL; selecting none")
        return []
    if method == "threshold":
        return [int(i) for i in np.nonzero(kl > threshold)[0]]
    if method != "largest-gap":
        raise ValidationError(f"unknown selection method {method!r}")
    if kl.size == 1:
        return [0] if kl[0] > threshold else []
    order = np.argsort(kl)[::-1]
    s = kl[order]
    nxt = s[1:]
    ratios = np.where(nxt > 0, s[:-1] / np.where(nxt > 0, nxt, 1.0), np.inf)
    cut = int(np.argmax(ratios))
    if ratios[cut] > 2.0:
        return sorted(int(i) for i in order[:cut + 1])
    warnings.warn("no clear KL gap between units; falling back to threshold "
                  f"{threshold} nats")
    return [int(i) for i in np.nonzero(kl > threshold)[0]]


def unit_informativeness(model, songs, method="largest-gap", threshold=1.0,
                         shuffle=False, seed=0):
    """Dataset-mean per-unit KL, posterior moments, and the unit selection."""
    means, logvars = _local_posteriors(model, songs, shuffle=shuffle, seed=seed)
    kl = gaussian_kl_per_unit(means, logvars)
    mean_kl = kl.mean(axis=0)
    report = UnitInformativeness(
        mean_kl=mean_kl,
        mean_mu=means.mean(axis=0),
        mean_var=np.exp(logvars).mean(axis=0),
        selected_units=select_informative_units(mean_kl, method, threshold),
        method=method,
        threshold=threshold)
    return report


def save_unit_report(report, path):
    payload = {
        "mean_kl": [float(v) for v in report.mean_kl],
        "mean_mu": [float(v) for v in report.mean_mu],
        "mean_var": [float(v) for v in report.mean_var],
        "selected_units": [int(i) for i in report.selected_units],
        "method": report.method,
        "threshold": report.threshold,
    }
    atomic_write_text(path, json.dumps(payload, indent=2) + "\n")


def load_unit_report(path):
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    return UnitInformativeness(
        mean_kl=np.asarray(obj["mean_kl"], dtype=np.float64),
        mean_mu=np.asarray(obj["mean_mu"], dtype=np.float64),
        mean_var=np.asarray(obj["mean_var"], dtype=np.float64),
        selected_units=[int(i) for i in obj["selected_units"]],
        method=obj.get("method", "largest-gap"),
        threshold=float(obj.get("threshold", 1.0)))


def compress_embeddings(records, selected_units):
    """Restrict every record's vector to the selected unit indices."""
    if not selected_units:
        raise ValidationError("cannot compress with an empty unit selection")
    sel = sorted(int(i) for i in selected_units)
    for r in records:
        if sel[-1] >= r.vector.shape[0] or sel[0] < 0:
            raise ValidationError(
                f"unit index out of range for {r.song_id} "
                f"(dim {r.vector.shape[0]}, selection max {sel[-1]})")
    return [dataclasses.replace(r, vector=r.vector[sel].copy()) for r in records]


def _song_posteriors(model, song):
    x = np.asarray(song.values, dtype=model.dtype)[None]
    t = x.shape[-1]
    lengths = np.full(1, t, dtype=np.int64)
    mask = make_mask(lengths, t, model.dtype)
    if isinstance(model, DualVae):
        q_g = model.global_encoder.forward(x, mask, training=False,
                                           update_stats=False)
        q_l = model.local_encoder.forward(x, mask, lengths)
        return mask, q_g.mean, q_l.mean
    q = model.encode(x, mask, lengths, training=False, update_stats=False)
    return mask, None, q.mean


def _decode(model, mask, z_g, z_l):
    t = mask.shape[-1]
    field = np.broadcast_to(z_l[:, :, None], z_l.shape + (t,)) * mask
    if z_g is not None:
        field = np.concatenate([z_g * mask, field], axis=1)
    x_hat = model.decoder.forward(field, mask, training=False,
                                  update_stats=False)
    return x_hat[0]


def reconstruct_probe(model, song, mode, unit=None, selection=None,
                      traversal_values=TRAVERSAL_VALUES):
    """Decoder probes on one song.

    mode 'full' reconstructs from both posterior means; 'zero-local' zeroes
    the per-song latent to show what the global path alone carries;
    'traverse' sweeps one unit over fixed prior-standard-deviation values
    (others fixed at the posterior mean) and returns one array per value.
    """
    mask, z_g, z_l = _song_posteriors(model, song)
    if mode == "full":
        return _decode(model, mask, z_g, z_l)
    if mode == "zero-local":
        return _decode(model, mask, z_g, np.zeros_like(z_l))
    if mode != "traverse":
        raise ValidationError(f"unknown probe mode {mode!r}")
    if unit is None:
        raise ValidationError("traverse mode needs a unit index")
    d = z_l.shape[1]
    if not 0 <= unit < d:
        raise ValidationError(f"unit {unit} out of range for {d} latent units")
    if selection is not None and unit not in selection:
        warnings.warn(f"unit {unit} is outside the informative selection")
    out = []
    for value in traversal_values:
        z = z_l.copy()
        z[0, unit] = value
        out.append(_decode(model, mask, z_g, z))
    return out


def traversal_response(model, songs, unit, traversal_values=TRAVERSAL_VALUES):
    """Mean Frobenius distance between traversal and full reconstructions.

    The informativeness-causality check: traversing a high-KL unit should
    move the reconstruction more than traversing a near-prior unit.
    """
    total = 0.0
    count = 0
    for song in songs:
        full = reconstruct_probe(model, song, "full")
        for recon in reconstruct_probe(model, song, "traverse", unit=unit,
                                       traversal_values=traversal_values):
            total += float(np.linalg.norm(recon - full))
            count += 1
    return total / count


def plot_unit_scatter(report, path):
    """Mean posterior mu vs variance per unit, informative units marked."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    sel = set(report.selected_units)
    idx = np.arange(report.mean_kl.shape[0])
    chosen = np.isin(idx, sorted(sel))
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(report.mean_mu[~chosen], report.mean_var[~chosen],
               s=18, c="tab:gray", label="near prior")
    ax.scatter(report.mean_mu[chosen], report.mean_var[chosen],
               s=26, c="tab:red", label="informative")
    ax.set_xlabel("mean posterior mu")
    ax.set_ylabel("mean posterior variance")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_unit_kl(report, path):
    """Per-unit mean KL bars with the informative selection highlighted."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    sel = set(report.selected_units)
    idx = np.arange(report.mean_kl.shape[0])
    colors = ["tab:red" if i in sel else "tab:gray" for i in idx]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar(idx, report.mean_kl, color=colors, width=0.8)
    ax.set_xlabel("latent unit")
    ax.set_ylabel("mean KL (nats)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_traversal_grid(recons, values, path):
    """One reconstruction per traversal value, stacked as image rows."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(recons)
    fig, axes = plt.subplots(n, 1, figsize=(6, 1.6 * n), squeeze=False)
    for ax, recon, value in zip(axes[:, 0], recons, values):
        ax.imshow(np.asarray(recon), origin="lower", aspect="auto",
                  cmap="magma")
        ax.set_ylabel(f"{value:+.1f}", rotation=0, labelpad=18, va="center")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
