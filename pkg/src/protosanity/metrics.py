"""Deletion curves, AUDC, effective receptive field and patch relevance."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySelectionError, InvalidArgumentError, UndefinedRatioError
from .network import forward
from .numerics import n_selected, salience_order
from .prototypes import similarity_from_distance

A_MAX = 0.02
STEP = 0.001
ERF_THRESHOLD = 0.2
ERF_SCAN_MAX = 0.10
IRRELEVANT_BELOW = 0.05

PERTURBED_OVER_ORIGINAL = "perturbed/original"
ORIGINAL_OVER_PERTURBED = "original/perturbed"


@dataclass
class DeletionCurve:
    """Similarity ratio ``tau(a)`` sampled at deletion areas ``a`` (fractions)."""

    areas: np.ndarray
    ratios: np.ndarray
    a_max: float
    target: tuple = (-1, -1, "")
    location: tuple = (-1, -1)
    reference: float = float("nan")

    def __post_init__(self):
        self.areas = np.asarray(self.areas, dtype=np.float64)
        self.ratios = np.asarray(self.ratios, dtype=np.float64)
        if self.areas.shape != self.ratios.shape:
            raise InvalidArgumentError("areas and ratios must have the same length")

    def __len__(self):
        return self.areas.shape[0]

    def truncated(self, a_max):
        """The prefix of the curve with ``a <= a_max``."""
        keep = self.areas <= a_max + 1e-12
        return DeletionCurve(self.areas[keep], self.ratios[keep], a_max, self.target, self.location, self.reference)


@dataclass(frozen=True)
class RelevanceVerdict:
    overlap_fraction: float
    irrelevant: bool


def deletion_areas(a_max=A_MAX, step=STEP):
    """``0, step, 2*step, ..., a_max`` with the float noise rounded away."""
    if step <= 0 or a_max < 0:
        raise InvalidArgumentError("step must be positive and a_max non-negative")
    n = int(round(a_max / step))
    return np.round(np.arange(n + 1) * step, 12)


def deletion_batch(x, saliency, areas):
    """Stack of images with the ``a``-fraction most salient pixels blacked out.

    Row ``k`` deletes ``ceil(areas[k] * H * W)`` pixels, picked in decreasing
    saliency order with row-major tie-breaking (the top-fraction rule).
    """
    x = np.asarray(x, dtype=np.float64)
    values = getattr(saliency, "values", saliency)
    if values.shape != x.shape[-2:]:
        raise InvalidArgumentError(f"saliency {values.shape} does not match image {x.shape}")
    order = salience_order(values)
    n_pix = values.size
    h, w = values.shape
    batch = np.repeat(x[None], len(areas), axis=0)
    for k, a in enumerate(areas):
        if a <= 0:
            continue
        rows, cols = np.divmod(order[: n_selected(a, n_pix)], w)
        batch[k][:, rows, cols] = 0.0
    return batch


def _similarities_at(model, batch, proto, location, chunk=128):
    h, w = location
    r = model.prototypes[proto]
    out = []
    for start in range(0, batch.shape[0], chunk):
        feats, _ = forward(model.network, batch[start : start + chunk])
        d2 = ((feats[:, :, h, w] - r[None]) ** 2).sum(axis=1)
        out.append(similarity_from_distance(d2, model.kind, model.epsilon))
    return np.concatenate(out)


def deletion_curve(model, x, proto, saliency, a_max=A_MAX, step=STEP, location=None, target=None, orientation=PERTURBED_OVER_ORIGINAL):
    """Sample ``tau(a)`` for ``a`` in ``0, step, ..., a_max``.

    The similarity is always read at a fixed location: ``location`` if given,
    otherwise the peak of the clean image's similarity map. The clean image is
    evaluated in the same batch as the perturbed ones, so ``tau(0) == 1``
    exactly. Values above 1 are kept.

    Parameters
    ----------
    orientation : {"perturbed/original", "original/perturbed"}
        ``tau = s(x with deletions) / S(x)`` by default; the other orientation
        is a diagnostic.
    """
    areas = deletion_areas(a_max, step)
    batch = deletion_batch(x, saliency, areas)
    if location is None:
        feats, _ = forward(model.network, batch[0])
        sims = model.similarity_maps(feats)[proto]
        location = divmod(int(np.argmax(sims)), sims.shape[1])
    location = tuple(int(v) for v in location)
    sims = _similarities_at(model, batch, proto, location)
    reference = float(sims[0])
    if not reference > 0:
        raise UndefinedRatioError(f"similarity of prototype {proto} at {location} is {reference}; ratio undefined")
    if orientation == PERTURBED_OVER_ORIGINAL:
        ratios = sims / reference
    elif orientation == ORIGINAL_OVER_PERTURBED:
        with np.errstate(divide="ignore"):
            ratios = reference / sims
    else:
        raise InvalidArgumentError(f"unknown orientation {orientation!r}")
    method = getattr(saliency, "method", "")
    return DeletionCurve(areas, ratios, float(a_max), target or (-1, proto, method), location, reference)


def audc(curve, include_zero=True):
    """Mean of the sampled ratios (the sample-count approximation of the area)."""
    ratios = curve.ratios if isinstance(curve, DeletionCurve) else np.asarray(curve, dtype=np.float64)
    if not include_zero:
        ratios = ratios[1:]
    if ratios.size == 0:
        raise InvalidArgumentError("cannot take the AUDC of an empty curve")
    return float(np.mean(ratios))


def first_crossing(curve, threshold=ERF_THRESHOLD, scan_max=ERF_SCAN_MAX):
    """Smallest sampled area ``a <= scan_max`` with ``tau(a) < threshold``, else ``None``."""
    for a, t in zip(curve.areas, curve.ratios):
        if a > scan_max + 1e-12:
            break
        if t < threshold:
            return float(a)
    return None


def effective_rf_area(model, x, proto, saliency, threshold=ERF_THRESHOLD, scan_max=ERF_SCAN_MAX, step=STEP, location=None):
    """Deletion area at which the similarity first drops below ``threshold``."""
    curve = deletion_curve(model, x, proto, saliency, scan_max, step, location)
    return first_crossing(curve, threshold, scan_max)


def _box_of(patch):
    return patch.box if hasattr(patch, "box") else tuple(patch)


def relevance(patch, seg, threshold=IRRELEVANT_BELOW, statistic="box"):
    """Share of the patch lying on the object.

    ``statistic="box"`` counts the pixels of the rectangular crop;
    ``statistic="mask"`` counts only the retained (thresholded) pixels. A patch
    is irrelevant when the share is strictly below ``threshold``.
    """
    seg = np.asarray(getattr(seg, "bits", seg), dtype=bool)
    if statistic == "box":
        top, left, bottom, right = _box_of(patch)
        if bottom < top or right < left:
            raise InvalidArgumentError("empty crop box")
        if top < 0 or left < 0 or bottom >= seg.shape[0] or right >= seg.shape[1]:
            raise InvalidArgumentError(f"crop box {(top, left, bottom, right)} outside mask {seg.shape}")
        region = seg[top : bottom + 1, left : right + 1]
        frac = float(region.sum()) / region.size
    elif statistic == "mask":
        bits = patch.mask.bits
        if bits.shape != seg.shape:
            raise InvalidArgumentError("patch mask and segmentation differ in shape")
        if not bits.any():
            raise EmptySelectionError("patch mask is empty")
        frac = float((bits & seg).sum()) / float(bits.sum())
    else:
        raise InvalidArgumentError(f"unknown overlap statistic {statistic!r}")
    return RelevanceVerdict(frac, frac < threshold)


# ---------------------------------------------------------------------------
# Records, aggregation and CSV layout

PER_SAMPLE_FIELDS = (
    "image_id",
    "prototype_id",
    "method",
    "role",
    "model_kind",
    "location_h",
    "location_w",
    "audc",
    "erf_area",
    "overlap_fraction",
    "irrelevant",
)
SUMMARY_FIELDS = (
    "model_kind",
    "method",
    "n_prototypes",
    "audc_prototypes_mean",
    "audc_prototypes_std",
    "n_test_patches",
    "audc_test_mean",
    "audc_test_std",
    "irrelevant_prototypes_pct",
    "irrelevant_test_pct",
)
ROLES = ("prototype", "test-patch")


@dataclass
class EvalRecord:
    """One evaluated (image, prototype, method) triple."""

    image_id: int
    prototype_id: int
    method: str
    role: str
    model_kind: str
    location: tuple
    audc: float
    erf_area: float | None = None
    overlap_fraction: float | None = None
    irrelevant: bool | None = None
    areas: np.ndarray = field(default=None, repr=False)
    ratios: np.ndarray = field(default=None, repr=False)

    def sort_key(self):
        return (self.image_id, self.prototype_id, self.role, tuple(self.location), self.method)

    def row(self):
        return {
            "image_id": self.image_id,
            "prototype_id": self.prototype_id,
            "method": self.method,
            "role": self.role,
            "model_kind": self.model_kind,
            "location_h": self.location[0],
            "location_w": self.location[1],
            "audc": fmt_float(self.audc),
            "erf_area": fmt_float(self.erf_area),
            "overlap_fraction": fmt_float(self.overlap_fraction),
            "irrelevant": "" if self.irrelevant is None else str(int(bool(self.irrelevant))),
        }


def fmt_float(v):
    """Shortest round-trip text for a float; empty for ``None``/NaN."""
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def _mean_std(values):
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def aggregate_report(results):
    """Summary rows per ``(model_kind, method)``.

    AUDC mean and population standard deviation are reported separately for
    prototypes and test patches, along with the percentage of irrelevant
    patches among those that have a relevance verdict.
    """
    results = sorted(results, key=lambda r: (r.model_kind, r.method) + r.sort_key())
    if not results:
        raise InvalidArgumentError("no results to aggregate")
    groups = {}
    for r in results:
        groups.setdefault((r.model_kind, r.method), []).append(r)
    rows = []
    for (kind, method), recs in sorted(groups.items()):
        row = {"model_kind": kind, "method": method}
        for role, tag in (("prototype", "prototypes"), ("test-patch", "test")):
            sel = [r for r in recs if r.role == role]
            mean, std = _mean_std([r.audc for r in sel])
            verdicts = [r.irrelevant for r in sel if r.irrelevant is not None]
            pct = 100.0 * sum(verdicts) / len(verdicts) if verdicts else None
            count_key = "n_prototypes" if role == "prototype" else "n_test_patches"
            row[count_key] = len(sel)
            row[f"audc_{tag}_mean"] = mean
            row[f"audc_{tag}_std"] = std
            row[f"irrelevant_{tag}_pct"] = pct
        rows.append(row)
    return rows


def mean_curves(results, role=None):
    """Average ``tau`` per deletion area for every method, ``{method: (areas, mean)}``."""
    out = {}
    for method in sorted({r.method for r in results}):
        sel = [r for r in results if r.method == method and (role is None or r.role == role) and r.ratios is not None]
        if not sel:
            continue
        n = min(len(r.ratios) for r in sel)
        out[method] = (sel[0].areas[:n], np.mean([r.ratios[:n] for r in sel], axis=0))
    return out


def write_per_sample_csv(path, results):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=PER_SAMPLE_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in sorted(results, key=EvalRecord.sort_key):
            writer.writerow(r.row())


def write_summary_csv(path, rows, extra_fields=()):
    fields = tuple(extra_fields) + SUMMARY_FIELDS
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (fmt_float(v) if isinstance(v, float) or v is None else v) for k, v in row.items()})


def write_curves_csv(path, results):
    """Long-format export of every sampled ``tau`` value, for distribution plots."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "prototype_id", "method", "role", "location_h", "location_w", "area", "tau"])
        for r in sorted(results, key=EvalRecord.sort_key):
            if r.ratios is None:
                continue
            for a, t in zip(r.areas, r.ratios):
                writer.writerow([r.image_id, r.prototype_id, r.method, r.role, r.location[0], r.location[1], fmt_float(a), fmt_float(t)])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
