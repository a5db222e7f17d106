"""Part-visualisation methods for one (image, prototype, location) target.

Every method returns a :class:`SaliencyMap` over the input image's pixels, so
patch extraction and the metrics never need to know which method ran.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConservationError, InvalidArgumentError
from .network import forward, input_gradient
from .numerics import (
    DEFAULT_SIGMA,
    PixelMask,
    bicubic_upsample,
    bounding_box,
    gaussian_blur_5x5,
    percentile_threshold_mask,
    top_fraction_mask,
)
from .prototypes import similarity_from_distance, similarity_slope, squared_distances

UPSAMPLE_PROTOPNET = "upsample-protopnet"
UPSAMPLE_PROTOTREE = "upsample-prototree"
SMOOTHGRADS = "smoothgrads-input"
PRP = "prp"
RANDGRADS = "randgrads"
METHODS = (UPSAMPLE_PROTOPNET, UPSAMPLE_PROTOTREE, SMOOTHGRADS, PRP, RANDGRADS)

TOP_FRACTION = 0.02
PERCENTILE = 95.0
PRP_EPSILON = 1e-6
LRP_EPSILON = 1e-9


@dataclass(frozen=True)
class SaliencyMap:
    """Per-pixel importance for ``target = (prototype index, (h, w))``."""

    values: np.ndarray
    method: str
    target: tuple

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class PartPatch:
    source_image_id: int
    method: str
    mask: PixelMask
    box: tuple
    crop: np.ndarray


def check_method(method):
    if method not in METHODS:
        raise InvalidArgumentError(f"unknown saliency method {method!r}; valid methods: {', '.join(METHODS)}")
    return method


def postprocess(raw, sigma=DEFAULT_SIGMA):
    """Channel mean, then absolute value, then a 5x5 Gaussian blur.

    Parameters
    ----------
    raw : ndarray of shape (C, H, W)

    Returns
    -------
    ndarray of shape (H, W)
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3:
        raise InvalidArgumentError(f"raw saliency must be (C, H, W), got {raw.shape}")
    return gaussian_blur_5x5(np.abs(raw.mean(axis=0)), sigma)


def saliency_upsample(smap, image_shape, variant=UPSAMPLE_PROTOPNET, location=None, align_corners=False):
    """Upsampling visualisation of a similarity map; no gradients involved.

    ``upsample-protopnet`` enlarges the whole map. ``upsample-prototree`` keeps
    only ``location`` (default: the row-major-first maximum), zeroes every
    other entry, then enlarges.
    """
    values = np.asarray(getattr(smap, "values", smap), dtype=np.float64)
    h0, w0 = image_shape[-2:]
    if location is None:
        location = divmod(int(np.argmax(values)), values.shape[1])
    location = tuple(int(v) for v in location)
    if variant == UPSAMPLE_PROTOTREE:
        kept = np.zeros_like(values)
        kept[location] = values[location]
        values = kept
    elif variant != UPSAMPLE_PROTOPNET:
        raise InvalidArgumentError(f"unknown upsampling variant {variant!r}")
    index = getattr(smap, "prototype_index", -1)
    return SaliencyMap(bicubic_upsample(values, (h0, w0), align_corners), variant, (index, location))


def similarity_seed(model, features, proto, location):
    """Gradient of ``s_proto^(h, w)`` with respect to the feature maps ``(D, H, W)``."""
    h, w = location
    f = features[:, h, w]
    r = model.prototypes[proto]
    d2 = float(np.sum((f - r) ** 2))
    seed = np.zeros_like(features)
    seed[:, h, w] = similarity_slope(d2, model.kind, model.epsilon) * 2.0 * (f - r)
    return seed


def similarity_at(model, features, proto, location):
    h, w = location
    d2 = squared_distances(features[:, h : h + 1, w : w + 1], model.prototypes[proto])[0, 0, 0]
    return float(similarity_from_distance(d2, model.kind, model.epsilon))


def similarity_gradient(model, x, proto, location):
    """Gradient of the similarity at a fixed location with respect to the raw image."""
    feats, trace = forward(model.network, x)
    return input_gradient(model.network, trace, similarity_seed(model, feats, proto, location))


def _batch_similarity_gradients(model, xs, proto, location):
    feats, trace = forward(model.network, xs)
    seeds = np.stack([similarity_seed(model, f, proto, location) for f in feats])
    return input_gradient(model.network, trace, seeds)


def saliency_smoothgrads_input(model, x, target, n=10, noise=0.2, rng=None, average="gradients", sigma=DEFAULT_SIGMA, raw=False):
    """SmoothGrads times input for the similarity at a fixed location.

    ``n`` noisy copies ``x + eta`` are drawn with ``eta ~ N(0, (noise * (max(x) -
    min(x)))**2)`` per pixel and channel. With ``average="gradients"`` their
    gradients are averaged and multiplied once by the clean image; with
    ``average="products"`` each gradient is multiplied by its noisy copy and the
    products averaged. ``raw=True`` returns the ``(C, H, W)`` map before
    post-processing.
    """
    if n < 1:
        raise InvalidArgumentError(f"number of noisy samples must be >= 1, got {n}")
    if average not in ("gradients", "products"):
        raise InvalidArgumentError(f"unknown averaging mode {average!r}")
    x = np.asarray(x, dtype=np.float64)
    proto, location = target
    location = tuple(location)
    if noise == 0:
        grad = similarity_gradient(model, x, proto, location)
        attribution = grad * x
    else:
        if rng is None:
            raise InvalidArgumentError("a random generator is required when noise > 0")
        scale = noise * float(x.max() - x.min())
        noisy = x[None] + rng.normal(0.0, 1.0, size=(n,) + x.shape) * scale
        grads = _batch_similarity_gradients(model, noisy, proto, location)
        if average == "gradients":
            attribution = grads.mean(axis=0) * x
        else:
            attribution = (grads * noisy).mean(axis=0)
    if raw:
        return attribution
    return SaliencyMap(postprocess(attribution, sigma), SMOOTHGRADS, (proto, location))


def _lrp_epsilon(z, eps):
    return z + eps * np.where(z >= 0, 1.0, -1.0)


def prp_relevance(model, trace, target, prp_epsilon=PRP_EPSILON, lrp_epsilon=LRP_EPSILON, check_conservation=None):
    """Relevance of every normalised input value for one similarity score.

    The score ``S`` at ``target`` is split over feature channels in proportion
    to their share of the squared distance, ``R_d = S * ((f_d - r_d)**2 +
    prp_epsilon / D) / (d2 + prp_epsilon)``. It then flows down with LRP-epsilon
    through convolutions and bias layers, winner-take-all through max pooling
    and unchanged through ReLUs. The normalisation layer passes relevance
    through value by value.

    Parameters
    ----------
    trace : ActivationTrace
        From ``forward(model.network, x)`` on a single image.
    check_conservation : float or None
        When set, raise :class:`ConservationError` if the pixel relevance sum
        differs from ``S`` by more than this relative tolerance.

    Returns
    -------
    relevance : ndarray of shape (C, H, W)
    score : float
    """
    net = model.network
    if trace.network is not net:
        raise InvalidArgumentError("trace was not produced by this model's network")
    proto, (h, w) = target[0], tuple(target[1])
    feats = trace.features[0]
    d = feats.shape[0]
    diff2 = (feats[:, h, w] - model.prototypes[proto]) ** 2
    d2 = float(diff2.sum())
    score = float(similarity_from_distance(d2, model.kind, model.epsilon))
    rel = np.zeros_like(trace.features)
    rel[0, :, h, w] = score * (diff2 + prp_epsilon / d) / (d2 + prp_epsilon)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if layer.kind == "relu":
            continue
        if layer.kind == "maxpool2d":
            rel, _ = layer.backward(rel, trace.caches[i], need_params=False)
        elif layer.kind == "conv2d":
            s = rel / _lrp_epsilon(trace.outputs[i], lrp_epsilon)
            rel = trace.inputs[i] * layer.transpose_apply(s, trace.inputs[i].shape)
        elif layer.kind == "add-bias":
            rel = trace.inputs[i] * rel / _lrp_epsilon(trace.outputs[i], lrp_epsilon)
        else:
            raise InvalidArgumentError(f"no relevance rule for layer kind {layer.kind!r}")
    rel = rel[0]
    if check_conservation is not None:
        total = float(rel.sum())
        if abs(total - score) > check_conservation * abs(score):
            raise ConservationError(f"pixel relevance sums to {total:.6g}, expected {score:.6g}")
    return rel, score


def saliency_prp(model, trace, target, sigma=DEFAULT_SIGMA, **kwargs):
    """PRP saliency map (post-processed :func:`prp_relevance`)."""
    if not hasattr(trace, "network"):
        _, trace = forward(model.network, trace)
    rel, _ = prp_relevance(model, trace, target, **kwargs)
    return SaliencyMap(postprocess(rel, sigma), PRP, (target[0], tuple(target[1])))


def saliency_randgrads(image_shape, rng, target=(-1, (-1, -1)), sigma=DEFAULT_SIGMA):
    """Uniform ``[0, 1)`` noise per pixel, blurred like the gradient maps."""
    h0, w0 = image_shape[-2:]
    values = rng.random((h0, w0))
    return SaliencyMap(postprocess(values[None], sigma), RANDGRADS, (target[0], tuple(target[1])))


def compute_saliency(model, x, method, target, rng=None, trace=None, features=None, smoothgrad_samples=10, smoothgrad_noise=0.2):
    """Dispatch to one of :data:`METHODS` for ``target = (proto, (h, w))``."""
    check_method(method)
    proto, location = target[0], tuple(target[1])
    if method in (UPSAMPLE_PROTOPNET, UPSAMPLE_PROTOTREE, PRP) and (trace is None or features is None):
        features, trace = forward(model.network, x)
    if method in (UPSAMPLE_PROTOPNET, UPSAMPLE_PROTOTREE):
        values = model.similarity_maps(features)[proto]
        smap = saliency_upsample(values, np.shape(x), method, location)
        return SaliencyMap(smap.values, method, (proto, location))
    if method == PRP:
        return saliency_prp(model, trace, (proto, location))
    if method == SMOOTHGRADS:
        return saliency_smoothgrads_input(model, x, (proto, location), smoothgrad_samples, smoothgrad_noise, rng)
    return saliency_randgrads(np.shape(x), rng, (proto, location))


def patch_mask(saliency, method=None, top_fraction=TOP_FRACTION, percentile=PERCENTILE):
    """Pixels kept for the part visualisation.

    The ProtoPNet upsampling rule keeps everything above the 95th percentile;
    every other method keeps the top 2% of pixels. Pixels sitting at the map's
    minimum carry no saliency and are dropped, unless that would empty the
    mask (an all-equal map falls back to the plain tie-break selection).
    """
    method = method or getattr(saliency, "method", None)
    values = np.asarray(getattr(saliency, "values", saliency))
    if method == UPSAMPLE_PROTOPNET:
        mask = percentile_threshold_mask(values, percentile)
    else:
        mask = top_fraction_mask(values, top_fraction)
    informative = mask.bits & (values > values.min())
    return PixelMask(informative) if informative.any() else mask


def extract_patch(x, saliency, method=None, image_id=-1, top_fraction=TOP_FRACTION, percentile=PERCENTILE):
    """Threshold ``saliency`` and crop ``x`` (C, H, W) to the kept pixels' bounding box."""
    x = np.asarray(x)
    values = getattr(saliency, "values", saliency)
    if values.shape != x.shape[-2:]:
        raise InvalidArgumentError(f"saliency {values.shape} does not match image {x.shape}")
    method = method or getattr(saliency, "method", None)
    mask = patch_mask(values, method, top_fraction, percentile)
    top, left, bottom, right = bounding_box(mask)
    crop = x[:, top : bottom + 1, left : right + 1].copy()
    return PartPatch(int(image_id), method, mask, (top, left, bottom, right), crop)
