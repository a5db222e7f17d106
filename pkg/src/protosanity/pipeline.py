"""Run configuration and the train / explain / eval / report workflows.

The command line is a thin layer over these functions. Work is split into one
item per (image, role); items run either inline or on a process pool and the
results are merged in a fixed order, so the outputs do not depend on the pool
width. Every random draw comes from a stream keyed on the saliency method and
the (image, prototype, location) triple.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .bundle import file_digest, load_model, model_from_bytes, model_to_bytes, save_model
from .data import load_split, read_manifest, write_png_gray16, write_png_rgb
from .errors import InvalidArgumentError, InvalidStateError
from .estimator import ProtoPartClassifier
from .figures import curve_svg
from .metrics import (
    EvalRecord,
    ROLES,
    SUMMARY_FIELDS,
    aggregate_report,
    audc,
    deletion_curve,
    first_crossing,
    mean_curves,
    read_csv,
    relevance,
    write_curves_csv,
    write_per_sample_csv,
    write_summary_csv,
)
from .network import forward
from .numerics import Rng
from .prototypes import SIMILARITY_KINDS, predict_logits
from .saliency import METHODS, check_method, compute_saliency, extract_patch

log = logging.getLogger("protosanity")

RUN_CONFIG = "run_config.json"
PROVENANCE_FIELDS = ("run_dir", "seed", "similarity", "config_sha256")


@dataclasses.dataclass
class RunConfig:
    """Every knob of a run; written verbatim next to each output."""

    seed: int = 0
    num_classes: int = 4
    n_train: int = 500
    n_test: int = 200
    size: int = 32
    placement: str = "uniform"
    margin: int = 4
    channels: tuple = (16, 32, 32)
    feature_scale: float = 0.2
    similarity: str = "prototree"
    epsilon: float = 1e-4
    prototypes_per_class: int = 5
    epochs: int = 20
    learning_rate: float = 5e-4
    batch_size: int = 32
    optimizer: str = "adam"
    methods: tuple = METHODS
    smoothgrad_samples: int = 10
    smoothgrad_noise: float = 0.2
    top_fraction: float = 0.02
    percentile: float = 95.0
    a_max: float = 0.02
    step: float = 0.001
    erf_max: float = 0.10
    erf_threshold: float = 0.2
    overlap_threshold: float = 0.05
    overlap_statistic: str = "box"
    scope: str = "test"
    patches_per_image: int = 10
    max_test_images: int | None = None
    include_prototypes: bool = True
    input_shape: tuple | None = None
    output_dir: str | None = None

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.methods = tuple(self.methods)
        if self.input_shape is not None:
            self.input_shape = tuple(int(v) for v in self.input_shape)
        self.validate()

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise InvalidArgumentError(f"invalid run config: {msg}")

        need(isinstance(self.seed, int) and self.seed >= 0, "seed must be a non-negative integer")
        need(1 <= self.num_classes <= 8, "num_classes must lie in 1..8")
        need(self.n_train >= self.num_classes and self.n_test >= 0, "need at least one training image per class")
        need(self.size >= 8, "size must be at least 8")
        need(self.placement in ("uniform", "border"), "placement must be 'uniform' or 'border'")
        need(self.margin >= 0, "margin must be non-negative")
        need(len(self.channels) >= 1 and min(self.channels) >= 1, "channels must be positive")
        need(self.feature_scale > 0, "feature_scale must be positive")
        need(self.similarity in SIMILARITY_KINDS, f"similarity must be one of {SIMILARITY_KINDS}")
        need(self.epsilon > 0, "epsilon must be positive")
        need(self.prototypes_per_class >= 1, "prototypes_per_class must be at least 1")
        need(self.epochs >= 0 and self.batch_size >= 1, "epochs >= 0 and batch_size >= 1")
        need(self.learning_rate >= 0, "learning_rate must be non-negative")
        need(self.optimizer in ("adam", "sgd"), "optimizer must be 'adam' or 'sgd'")
        need(len(self.methods) >= 1, "at least one saliency method is required")
        for m in self.methods:
            check_method(m)
        need(len(set(self.methods)) == len(self.methods), "duplicate saliency methods")
        need(self.smoothgrad_samples >= 1 and self.smoothgrad_noise >= 0, "smoothgrad settings out of range")
        need(0 < self.top_fraction <= 1, "top_fraction must lie in (0, 1]")
        need(0 <= self.percentile <= 100, "percentile must lie in [0, 100]")
        need(self.step > 0 and 0 <= self.a_max <= 1 and 0 <= self.erf_max <= 1, "deletion areas out of range")
        need(0 < self.erf_threshold <= 1, "erf_threshold must lie in (0, 1]")
        need(0 <= self.overlap_threshold <= 1, "overlap_threshold must lie in [0, 1]")
        need(self.overlap_statistic in ("box", "mask"), "overlap_statistic must be 'box' or 'mask'")
        need(self.scope in ("prototypes", "test"), "scope must be 'prototypes' or 'test'")
        need(self.patches_per_image >= 1, "patches_per_image must be at least 1")
        need(self.max_test_images is None or self.max_test_images >= 0, "max_test_images must be non-negative")

    def to_dict(self):
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise InvalidArgumentError(f"unknown run config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise InvalidArgumentError(f"invalid run config: {exc}") from exc

    def replace(self, **changes):
        return self.from_dict({**self.to_dict(), **changes})

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, out_dir):
        path = Path(out_dir) / RUN_CONFIG
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path):
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise InvalidArgumentError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InvalidArgumentError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise InvalidArgumentError(f"config {path} must hold a JSON object")
        return cls.from_dict(data)


# ---------------------------------------------------------------------------
# training


def train_from_manifest(manifest, config: RunConfig):
    """Train and project a model on the manifest's train split.

    Returns the model, the per-epoch losses and ``{"train_accuracy", "test_accuracy"}``.
    """
    manifest = read_manifest(manifest) if not hasattr(manifest, "entries") else manifest
    train = load_split(manifest, "train")
    test = load_split(manifest, "test")
    clf = ProtoPartClassifier(
        similarity=config.similarity,
        epsilon=config.epsilon,
        prototypes_per_class=config.prototypes_per_class,
        channels=config.channels,
        feature_scale=config.feature_scale,
        epochs=config.epochs,
        learning_rate=config.learning_rate,
        batch_size=config.batch_size,
        optimizer=config.optimizer,
        random_state=config.seed,
    )
    # labels are already 0..C-1 and every class is present in train
    clf.fit(train.images, train.labels, image_ids=train.ids)
    model = clf.model_
    model.class_names = list(manifest.class_names)
    scores = {"train_accuracy": _accuracy(model, train)}
    scores["test_accuracy"] = _accuracy(model, test) if len(test) else None
    return model, clf.loss_curve_, scores


def _accuracy(model, ds):
    return float(np.mean(predict_logits(model, ds.images).argmax(axis=1) == ds.labels))


def check_consistent(model, manifest):
    if tuple(model.network.input_shape) != tuple(manifest.geometry):
        raise InvalidArgumentError(
            f"bundle expects images of shape {tuple(model.network.input_shape)}, manifest declares {tuple(manifest.geometry)}"
        )
    if model.n_classes != len(manifest.class_names):
        raise InvalidArgumentError(f"bundle has {model.n_classes} classes, manifest lists {len(manifest.class_names)}")
    for i, src in enumerate(model.source_ids):
        if not (0 <= src < len(manifest.entries)) or manifest.entries[src].split != "train":
            raise InvalidArgumentError(f"prototype {i} comes from entry {src}, which is not a training image of this manifest")


# ---------------------------------------------------------------------------
# work items


@dataclasses.dataclass
class WorkItem:
    image_id: int
    role: str
    x: np.ndarray
    seg: np.ndarray | None
    targets: list  # [(prototype, (h, w)), ...]


def top_test_targets(model, x, k=10):
    """The ``k`` most similar (prototype, location) pairs among prototypes of the predicted class.

    Ties are broken by prototype index, then row-major location.
    """
    feats, _ = forward(model.network, x)
    sims = model.similarity_maps(feats)
    predicted = int(np.argmax(model.head @ sims.reshape(sims.shape[0], -1).max(axis=1)))
    protos = np.flatnonzero(model.class_identity == predicted)
    hw = sims.shape[1] * sims.shape[2]
    cand = sims[protos].reshape(-1)
    order = np.argsort(-cand, kind="stable")[:k]
    return [(int(protos[j // hw]), tuple(int(v) for v in divmod(int(j % hw), sims.shape[2]))) for j in order]


def build_items(model, manifest, config, scope):
    """Work items for ``scope`` in ``{"prototypes", "test"}``."""
    items = []
    if scope == "prototypes":
        train = load_split(manifest, "train")
        pos = {int(i): k for k, i in enumerate(train.ids)}
        for p in range(model.n_prototypes):
            src = int(model.source_ids[p])
            k = pos[src]
            loc = tuple(int(v) for v in model.locations[p])
            items.append(WorkItem(src, "prototype", train.images[k], train.mask(k), [(p, loc)]))
    else:
        test = load_split(manifest, "test")
        n = len(test) if config.max_test_images is None else min(len(test), config.max_test_images)
        for k in range(n):
            x = test.images[k]
            items.append(WorkItem(int(test.ids[k]), "test-patch", x, test.mask(k), top_test_targets(model, x, config.patches_per_image)))
    return items


def _saliency_for(model, config, item, target, method, feats, trace):
    proto, (h, w) = target
    rng = Rng(config.seed).stream("saliency/" + method, item.image_id, proto, h, w)
    return compute_saliency(
        model,
        item.x,
        method,
        (proto, (h, w)),
        rng=rng,
        trace=trace,
        features=feats,
        smoothgrad_samples=config.smoothgrad_samples,
        smoothgrad_noise=config.smoothgrad_noise,
    )


def evaluate_item(model, config, item):
    """Deletion curve, AUDC, effective RF and relevance for every target and method."""
    feats, trace = forward(model.network, item.x)
    scan = max(config.a_max, config.erf_max)
    records = []
    for proto, loc in item.targets:
        for method in config.methods:
            sal = _saliency_for(model, config, item, (proto, loc), method, feats, trace)
            curve = deletion_curve(model, item.x, proto, sal, scan, config.step, location=loc)
            record = EvalRecord(
                image_id=item.image_id,
                prototype_id=proto,
                method=method,
                role=item.role,
                model_kind=model.kind,
                location=loc,
                audc=audc(curve.truncated(config.a_max)),
                erf_area=first_crossing(curve, config.erf_threshold, config.erf_max),
                areas=curve.areas,
                ratios=curve.ratios,
            )
            if item.seg is not None:
                patch = extract_patch(item.x, sal, method, item.image_id, config.top_fraction, config.percentile)
                verdict = relevance(patch, item.seg, config.overlap_threshold, config.overlap_statistic)
                record.overlap_fraction = verdict.overlap_fraction
                record.irrelevant = verdict.irrelevant
            records.append(record)
    return records


def _to_u8(x):
    return np.clip(np.round(np.asarray(x).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def overlay_image(x, values, box, alpha=0.6):
    """Saliency heat (red) blended over the image, crop box outlined in yellow."""
    rgb = np.asarray(x, dtype=np.float64).transpose(1, 2, 0)
    v = values - values.min()
    v = v / v.max() if v.max() > 0 else v
    heat = np.zeros_like(rgb)
    heat[..., 0] = 1.0
    out = rgb * (1 - alpha * v[..., None]) + heat * (alpha * v[..., None])
    top, left, bottom, right = box
    yellow = (1.0, 1.0, 0.0)
    out[top, left : right + 1] = yellow
    out[bottom, left : right + 1] = yellow
    out[top : bottom + 1, left] = yellow
    out[top : bottom + 1, right] = yellow
    return np.clip(np.round(out * 255.0), 0, 255).astype(np.uint8)


EXPLAIN_FIELDS = (
    "role",
    "image_id",
    "prototype_id",
    "location_h",
    "location_w",
    "method",
    "box_top",
    "box_left",
    "box_bottom",
    "box_right",
    "patch_path",
    "overlay_path",
    "saliency_path",
    "raw_path",
)


def explain_item(model, config, item, out_dir):
    """Write crop, overlay and 16-bit saliency PNGs plus a float ``.npy`` sidecar.

    Returns one index row per (target, method).
    """
    out_dir = Path(out_dir)
    feats, trace = forward(model.network, item.x)
    rows = []
    for proto, loc in item.targets:
        for method in config.methods:
            sal = _saliency_for(model, config, item, (proto, loc), method, feats, trace)
            patch = extract_patch(item.x, sal, method, item.image_id, config.top_fraction, config.percentile)
            stem = f"{item.role}_{item.image_id:06d}_p{proto:03d}_{loc[0]}_{loc[1]}_{method}.png"
            paths = {k: Path(k) / stem for k in ("patches", "overlays", "saliency")}
            write_png_rgb(out_dir / paths["patches"], _to_u8(patch.crop))
            write_png_rgb(out_dir / paths["overlays"], overlay_image(item.x, sal.values, patch.box))
            write_png_gray16(out_dir / paths["saliency"], sal.values - sal.values.min())
            raw_rel = paths["saliency"].with_suffix(".npy")
            np.save(out_dir / raw_rel, sal.values)
            top, left, bottom, right = patch.box
            rows.append(
                {
                    "role": item.role,
                    "image_id": item.image_id,
                    "prototype_id": proto,
                    "location_h": loc[0],
                    "location_w": loc[1],
                    "method": method,
                    "box_top": top,
                    "box_left": left,
                    "box_bottom": bottom,
                    "box_right": right,
                    "patch_path": paths["patches"].as_posix(),
                    "overlay_path": paths["overlays"].as_posix(),
                    "saliency_path": paths["saliency"].as_posix(),
                    "raw_path": raw_rel.as_posix(),
                }
            )
    return rows


# ---------------------------------------------------------------------------
# process pool

_WORKER = {}


def _init_worker(model_blob, config_dict, out_dir):
    _WORKER["model"] = model_from_bytes(model_blob)
    _WORKER["config"] = RunConfig.from_dict(config_dict)
    _WORKER["out_dir"] = out_dir


def _run_eval(item):
    return evaluate_item(_WORKER["model"], _WORKER["config"], item)


def _run_explain(item):
    return explain_item(_WORKER["model"], _WORKER["config"], item, _WORKER["out_dir"])


def run_items(fn, items, model, config, jobs=1, out_dir=None):
    """Apply ``fn`` to every item; results come back in item order for any ``jobs``."""
    if jobs < 1:
        raise InvalidArgumentError("--jobs must be at least 1")
    args = (model_to_bytes(model), config.to_dict(), None if out_dir is None else str(out_dir))
    if jobs == 1 or len(items) <= 1:
        _init_worker(*args)
        return [fn(item) for item in items]
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx, initializer=_init_worker, initargs=args) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# commands


def _load_inputs(bundle_path, manifest_path):
    model = load_model(bundle_path)
    manifest = read_manifest(manifest_path)
    check_consistent(model, manifest)
    return model, manifest


def _digests(paths):
    return {str(p): file_digest(p) for p in paths}


def _check_untouched(before):
    after = _digests(before)
    changed = [p for p in before if before[p] != after[p]]
    if changed:
        raise InvalidStateError(f"input files changed during the run: {', '.join(changed)}")


def _write_inputs(out_dir, digests):
    (Path(out_dir) / "inputs.json").write_text(json.dumps(digests, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _record_config(config, manifest, out_dir):
    return config.replace(input_shape=list(manifest.geometry), output_dir=str(out_dir))


def run_explain(bundle_path, manifest_path, config: RunConfig, out_dir, jobs=1):
    """Saliency, crop and overlay PNGs for ``config.scope`` plus ``explain_index.csv``."""
    out_dir = Path(out_dir)
    digests = _digests([bundle_path, manifest_path])
    model, manifest = _load_inputs(bundle_path, manifest_path)
    config = _record_config(config, manifest, out_dir)
    for sub in ("patches", "overlays", "saliency"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    items = build_items(model, manifest, config, config.scope)
    rows = [row for chunk in run_items(_run_explain, items, model, config, jobs, out_dir) for row in chunk]
    _write_rows(out_dir / "explain_index.csv", EXPLAIN_FIELDS, rows)
    config.write(out_dir)
    _write_inputs(out_dir, digests)
    _check_untouched(digests)
    return rows


def run_eval(bundle_path, manifest_path, config: RunConfig, out_dir, jobs=1):
    """Evaluate prototypes and test patches; write CSVs, SVG figures and the run config."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digests = _digests([bundle_path, manifest_path])
    model, manifest = _load_inputs(bundle_path, manifest_path)
    config = _record_config(config, manifest, out_dir)
    items = []
    if config.include_prototypes:
        items += build_items(model, manifest, config, "prototypes")
    items += build_items(model, manifest, config, "test")
    missing = sum(item.seg is None for item in items)
    if missing:
        log.warning("%d of %d images have no segmentation mask; their relevance columns are left empty", missing, len(items))
    records = [r for chunk in run_items(_run_eval, items, model, config, jobs) for r in chunk]
    if not records:
        raise InvalidArgumentError("nothing to evaluate: no prototypes and no test images selected")
    write_per_sample_csv(out_dir / "per_sample.csv", records)
    write_summary_csv(out_dir / "summary.csv", aggregate_report(records))
    write_curves_csv(out_dir / "curves.csv", records)
    (out_dir / "deletion_curves.svg").write_text(
        curve_svg(mean_curves(records), title=f"{model.kind}: all patches"), encoding="utf-8"
    )
    for role in ROLES:
        curves = mean_curves(records, role)
        if curves:
            (out_dir / f"deletion_curves_{role}.svg").write_text(
                curve_svg(curves, title=f"{model.kind}: {role}"), encoding="utf-8"
            )
    config.write(out_dir)
    _write_inputs(out_dir, digests)
    _check_untouched(digests)
    return records


def merge_reports(run_dirs):
    """Concatenate the summaries of several runs with provenance columns.

    Raises
    ------
    InvalidArgumentError
        If a directory lacks ``summary.csv`` or ``run_config.json``, or the
        runs were made on images of different geometry.
    """
    if not run_dirs:
        raise InvalidArgumentError("report needs at least one run directory")
    rows, geometry = [], None
    for d in run_dirs:
        d = Path(d)
        summary = d / "summary.csv"
        conf_path = d / RUN_CONFIG
        if not summary.is_file():
            raise InvalidArgumentError(f"run directory {d} has no summary.csv")
        if not conf_path.is_file():
            raise InvalidArgumentError(f"run directory {d} has no {RUN_CONFIG}")
        config = RunConfig.read(conf_path)
        shape = None if config.input_shape is None else tuple(config.input_shape)
        if geometry is None:
            geometry = shape
        elif shape != geometry:
            raise InvalidArgumentError(f"run {d} used images of shape {shape}, earlier runs used {geometry}")
        sha = hashlib.sha256(conf_path.read_bytes()).hexdigest()
        for row in read_csv(summary):
            rows.append({"run_dir": str(d), "seed": config.seed, "similarity": config.similarity, "config_sha256": sha, **row})
    return rows


def write_report(path_or_stream, rows):
    _write_rows(path_or_stream, PROVENANCE_FIELDS + SUMMARY_FIELDS, rows)


def _write_rows(path_or_stream, fields, rows):
    def dump(fh):
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)

    if hasattr(path_or_stream, "write"):
        dump(path_or_stream)
    else:
        with open(path_or_stream, "w", newline="", encoding="utf-8") as fh:
            dump(fh)


def save_training(model, losses, scores, config, out_dir):
    """Write ``model.psan``, ``train_log.txt`` and the run config into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle = out_dir / "model.psan"
    save_model(model, bundle)
    lines = [f"epoch {i + 1} loss {loss!r}" for i, loss in enumerate(losses)]
    for key in ("train_accuracy", "test_accuracy"):
        if scores.get(key) is not None:
            lines.append(f"{key} {scores[key]!r}")
    (out_dir / "train_log.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    config.write(out_dir)
    return bundle
