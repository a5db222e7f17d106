"""Prototype similarity layers, projection, decision head and toy training."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, TrainingDivergedError
from .network import Network, backward, forward
from .numerics import Rng

PROTOPNET = "protopnet"
PROTOTREE = "prototree"
SIMILARITY_KINDS = (PROTOPNET, PROTOTREE)
DEFAULT_EPSILON = 1e-4


def _check_kind(kind):
    if kind not in SIMILARITY_KINDS:
        raise InvalidArgumentError(f"unknown similarity kind {kind!r}; expected one of {SIMILARITY_KINDS}")


def similarity_from_distance(d2, kind, epsilon=DEFAULT_EPSILON):
    """Map squared L2 distances to similarity scores.

    ``protopnet``: ``log((d2 + 1) / (d2 + epsilon))``; ``prototree``: ``exp(-d2)``.
    """
    _check_kind(kind)
    d2 = np.asarray(d2, dtype=np.float64)
    if kind == PROTOPNET:
        return np.log1p(d2) - np.log(d2 + epsilon)
    return np.exp(-d2)


def similarity_slope(d2, kind, epsilon=DEFAULT_EPSILON):
    """Derivative of the similarity with respect to ``d2``."""
    _check_kind(kind)
    d2 = np.asarray(d2, dtype=np.float64)
    if kind == PROTOPNET:
        return 1.0 / (d2 + 1.0) - 1.0 / (d2 + epsilon)
    return -np.exp(-d2)


def squared_distances(features, vectors):
    """Squared distances between every feature column and every prototype.

    ``features`` is ``(D, H, W)`` or ``(N, D, H, W)``; ``vectors`` is ``(P, D)``.
    Returns ``(P, H, W)`` or ``(N, P, H, W)``.
    """
    f = np.asarray(features, dtype=np.float64)
    r = np.asarray(vectors, dtype=np.float64)
    if r.ndim == 1:
        r = r[None]
    if f.shape[-3] != r.shape[1]:
        raise InvalidArgumentError(f"feature depth {f.shape[-3]} does not match prototype depth {r.shape[1]}")
    if f.ndim == 3:
        diff = f[None] - r[:, :, None, None]
        return np.einsum("pdhw,pdhw->phw", diff, diff)
    diff = f[:, None] - r[None, :, :, None, None]
    return np.einsum("npdhw,npdhw->nphw", diff, diff)


@dataclass(frozen=True)
class Prototype:
    """One part prototype: reference vector plus where it came from."""

    index: int
    vector: np.ndarray
    source_image_id: int = -1
    location: tuple = (-1, -1)
    class_assignment: int | None = None


@dataclass(frozen=True)
class SimilarityMap:
    values: np.ndarray
    prototype_index: int
    kind: str
    epsilon: float = DEFAULT_EPSILON


@dataclass(frozen=True)
class Peak:
    location: tuple
    score: float


def similarity_map(features, proto, kind, epsilon=DEFAULT_EPSILON) -> SimilarityMap:
    """Similarity between one prototype and every location of ``features`` (D, H, W)."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 3:
        raise InvalidArgumentError(f"features must be (D, H, W), got {f.shape}")
    vec = proto.vector if isinstance(proto, Prototype) else np.asarray(proto)
    if vec.shape != (f.shape[0],):
        raise InvalidArgumentError(f"prototype of shape {vec.shape} does not match feature depth {f.shape[0]}")
    d2 = squared_distances(f, vec)[0]
    index = proto.index if isinstance(proto, Prototype) else -1
    return SimilarityMap(similarity_from_distance(d2, kind, epsilon), index, kind, epsilon)


def peak(smap) -> Peak:
    """Global maximum of a similarity map; ties go to the first in row-major order."""
    values = smap.values if isinstance(smap, SimilarityMap) else np.asarray(smap, dtype=np.float64)
    flat = int(np.argmax(values))
    h, w = divmod(flat, values.shape[1])
    return Peak((h, w), float(values[h, w]))


@dataclass
class PrototypeModel:
    """Feature extractor, prototype table and weighted-sum decision head.

    Attributes
    ----------
    network : Network
    prototypes : ndarray of shape (P, D)
    head : ndarray of shape (C, P)
        ``logits = head @ s(x)`` where ``s(x)`` holds the per-prototype maxima.
    kind : {"protopnet", "prototree"}
    epsilon : float
    class_identity : ndarray of shape (P,)
        Class each prototype was initialised for, ``-1`` when unassigned.
    source_ids, locations : ndarray
        Provenance filled in by :func:`project_prototypes` (``-1`` before).
    """

    network: Network
    prototypes: np.ndarray
    head: np.ndarray
    kind: str = PROTOTREE
    epsilon: float = DEFAULT_EPSILON
    class_identity: np.ndarray | None = None
    source_ids: np.ndarray | None = None
    locations: np.ndarray | None = None
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        _check_kind(self.kind)
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        self.head = np.asarray(self.head, dtype=np.float64)
        p, d = self.prototypes.shape
        if d != self.network.output_dims[0]:
            raise InvalidArgumentError("prototype depth does not match the network output depth")
        if self.head.ndim != 2 or self.head.shape[1] != p:
            raise InvalidArgumentError(f"head must be (num_classes, {p}), got {self.head.shape}")
        if self.class_identity is None:
            self.class_identity = np.full(p, -1, dtype=np.int64)
        if self.source_ids is None:
            self.source_ids = np.full(p, -1, dtype=np.int64)
        if self.locations is None:
            self.locations = np.full((p, 2), -1, dtype=np.int64)
        if not self.class_names:
            self.class_names = [str(c) for c in range(self.head.shape[0])]

    @property
    def n_prototypes(self):
        return self.prototypes.shape[0]

    @property
    def n_classes(self):
        return self.head.shape[0]

    def prototype(self, i) -> Prototype:
        cls = int(self.class_identity[i])
        return Prototype(
            index=int(i),
            vector=self.prototypes[i],
            source_image_id=int(self.source_ids[i]),
            location=tuple(int(v) for v in self.locations[i]),
            class_assignment=None if cls < 0 else cls,
        )

    def similarity_maps(self, features):
        """All similarity maps for features ``(D, H, W)`` or ``(N, D, H, W)``."""
        return similarity_from_distance(squared_distances(features, self.prototypes), self.kind, self.epsilon)

    def copy(self):
        return copy.deepcopy(self)


def class_head(class_identity, n_classes, negative=-0.5):
    """Head weights of 1 towards each prototype's own class and ``negative`` elsewhere."""
    ident = np.asarray(class_identity)
    head = np.full((n_classes, ident.shape[0]), float(negative))
    head[ident, np.arange(ident.shape[0])] = 1.0
    return head


def init_model(network, n_classes, per_class, kind=PROTOTREE, epsilon=DEFAULT_EPSILON, images=None, labels=None, rng=None, class_names=None):
    """Randomly initialised model with ``per_class`` prototypes for each class.

    When training images are given, each prototype starts at the most atypical
    location (farthest from the mean feature vector of the images) of a random
    image of its own class. Random locations mostly land on background, which
    gives every class the same starting similarities.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    d = network.output_dims[0]
    ident = np.repeat(np.arange(n_classes), per_class)
    if images is None:
        protos = rng.uniform(0.0, 1.0, size=(ident.shape[0], d))
    else:
        labels = np.asarray(labels)
        picks = [np.flatnonzero(labels == c) for c in ident]
        picks = np.array([pool[rng.integers(pool.shape[0])] for pool in picks])
        feats = forward(network, np.asarray(images)[picks])[0]
        mean = feats.mean(axis=(0, 2, 3))
        spread = ((feats - mean[None, :, None, None]) ** 2).sum(axis=1).reshape(len(picks), -1)
        _, h, w = network.output_dims
        hh, ww = np.divmod(spread.argmax(axis=1), w)
        protos = feats[np.arange(len(picks)), :, hh, ww]
    return PrototypeModel(
        network=network,
        prototypes=protos,
        head=class_head(ident, n_classes),
        kind=kind,
        epsilon=epsilon,
        class_identity=ident,
        class_names=list(class_names) if class_names is not None else [],
    )


def features_of(model, images, batch_size=64):
    """Feature maps of a stack of images, computed in fixed-size batches."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        return forward(model.network, images)[0]
    out = [forward(model.network, images[i : i + batch_size])[0] for i in range(0, images.shape[0], batch_size)]
    return np.concatenate(out, axis=0) if out else np.empty((0,) + model.network.output_dims)


def project_prototypes(model, images, image_ids=None, batch_size=64):
    """Move every prototype onto its nearest training feature vector.

    The nearest ``(image, h, w)`` is the global argmin of the squared distance;
    ties go to the earliest image, then the first location in row-major order.
    Returns a new model; ``model`` is left untouched.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise InvalidArgumentError("projection needs a non-empty stack of training images")
    ids = np.arange(images.shape[0]) if image_ids is None else np.asarray(image_ids, dtype=np.int64)
    _, h, w = model.network.output_dims
    best_d2 = np.full(model.n_prototypes, np.inf)
    best_pos = np.zeros((model.n_prototypes, 3), dtype=np.int64)
    best_vec = np.empty_like(model.prototypes)
    for start in range(0, images.shape[0], batch_size):
        feats = features_of(model, images[start : start + batch_size], batch_size)
        d2 = squared_distances(feats, model.prototypes)  # (n, P, H, W)
        flat = d2.transpose(1, 0, 2, 3).reshape(model.n_prototypes, -1)
        arg = flat.argmin(axis=1)
        val = flat[np.arange(model.n_prototypes), arg]
        # strict < keeps the earlier batch on ties
        better = val < best_d2
        for i in np.flatnonzero(better):
            n, rem = divmod(int(arg[i]), h * w)
            hh, ww = divmod(rem, w)
            best_d2[i] = val[i]
            best_pos[i] = (start + n, hh, ww)
    # take each vector from a single-image pass so it is bitwise f(p_i)
    for i in range(model.n_prototypes):
        n, hh, ww = best_pos[i]
        best_vec[i] = forward(model.network, images[n])[0][:, hh, ww]
    out = model.copy()
    out.prototypes = best_vec
    out.source_ids = ids[best_pos[:, 0]]
    out.locations = best_pos[:, 1:].copy()
    return out


def max_similarities(model, features):
    """Per-prototype maxima ``s(x)`` and their flat argmax locations."""
    sims = model.similarity_maps(features)
    flat = sims.reshape(sims.shape[:-2] + (-1,))
    arg = flat.argmax(axis=-1)
    return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0], arg


def predict(model, x):
    """Logits and per-prototype peaks for one image ``(C, H, W)``.

    Returns
    -------
    logits : ndarray of shape (num_classes,)
    peaks : list of Peak, one per prototype
    """
    feats, _ = forward(model.network, x)
    sims = model.similarity_maps(feats)
    peaks = [peak(sims[i]) for i in range(model.n_prototypes)]
    scores = np.array([p.score for p in peaks])
    return model.head @ scores, peaks


def predict_logits(model, images, batch_size=64):
    """Logits for a stack of images, shape ``(N, num_classes)``."""
    feats = features_of(model, images, batch_size)
    s, _ = max_similarities(model, feats)
    return s @ model.head.T


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_gradients(model, images, labels):
    """Mean cross-entropy on a batch and its gradients.

    The gradient of each max over a similarity map is routed to its argmax
    location only. Returns ``(loss, grads)`` where ``grads`` has keys
    ``"network"`` (per-layer dicts), ``"prototypes"`` and ``"head"``.
    """
    net = model.network
    feats, trace = forward(net, images)
    n = feats.shape[0]
    d, h, w = net.output_dims
    d2 = squared_distances(feats, model.prototypes)  # (n, P, H, W)
    sims = similarity_from_distance(d2, model.kind, model.epsilon)
    flat = sims.reshape(n, model.n_prototypes, -1)
    arg = flat.argmax(axis=-1)
    s = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    logits = s @ model.head.T
    probs = softmax(logits)
    idx = np.arange(n)
    loss = float(-np.mean(np.log(np.maximum(probs[idx, labels], 1e-300))))

    dlogits = probs.copy()
    dlogits[idx, labels] -= 1.0
    dlogits /= n
    dhead = dlogits.T @ s
    ds = dlogits @ model.head  # (n, P)
    d2_at = np.take_along_axis(d2.reshape(n, model.n_prototypes, -1), arg[..., None], axis=-1)[..., 0]
    dd2 = ds * similarity_slope(d2_at, model.kind, model.epsilon)  # (n, P)
    hh, ww = np.divmod(arg, w)
    f_at = feats[idx[:, None], :, hh, ww]  # (n, P, D)
    diff = f_at - model.prototypes[None]
    contrib = 2.0 * dd2[..., None] * diff  # d loss / d f_at
    dfeats = np.zeros_like(feats)
    for p in range(model.n_prototypes):
        np.add.at(dfeats, (idx, slice(None), hh[:, p], ww[:, p]), contrib[:, p])
    dprotos = -contrib.sum(axis=0)
    _, net_grads = backward(net, trace, dfeats, need_params=True)
    return loss, {"network": net_grads, "prototypes": dprotos, "head": dhead}


def train_toy(model, images, labels, epochs=20, lr=5e-4, seed=0, batch_size=32, optimizer="adam", momentum=0.9, project=True, image_ids=None, log=None):
    """Minibatch stochastic gradient training on cross-entropy, then projection.

    Parameters
    ----------
    model : PrototypeModel
        Starting point; not modified.
    images : ndarray of shape (N, C, H, W)
    labels : ndarray of shape (N,)
    epochs, lr, batch_size :
        Optimiser settings. ``lr=0`` leaves every parameter unchanged.
    optimizer : {"adam", "sgd"}
        ``"adam"`` (the default) uses the usual bias-corrected moment
        estimates with betas (0.9, 0.999); ``"sgd"`` uses heavy-ball
        ``momentum``. Exponential similarities stall on a zero-similarity
        plateau under plain SGD at useful step sizes.
    seed : int
        Drives minibatch order only.
    project : bool
        Run :func:`project_prototypes` on ``images`` after training.

    Returns
    -------
    model : PrototypeModel
    losses : list of float
        Mean training loss for each epoch.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.ndim != 4 or images.shape[0] != labels.shape[0] or images.shape[0] == 0:
        raise InvalidArgumentError("images must be (N, C, H, W) with one label each")
    if np.any(labels < 0) or np.any(labels >= model.n_classes):
        raise InvalidArgumentError("labels out of range for the decision head")
    model = model.copy()
    rng = Rng(seed)
    if optimizer not in ("adam", "sgd"):
        raise InvalidArgumentError(f"unknown optimizer {optimizer!r}")
    params = [arr for _, _, arr in model.network.parameters()] + [model.prototypes, model.head]
    first = [np.zeros_like(p) for p in params]
    second = [np.zeros_like(p) for p in params]
    beta1, beta2, tiny = 0.9, 0.999, 1e-8
    step = 0
    losses = []
    for epoch in range(int(epochs)):
        order = rng.stream("train-shuffle", epoch).permutation(images.shape[0])
        total = 0.0
        for start in range(0, order.shape[0], batch_size):
            batch = order[start : start + batch_size]
            loss, grads = loss_and_gradients(model, images[batch], labels[batch])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss} in epoch {epoch}")
            total += loss * batch.shape[0]
            flat = [g for layer in grads["network"] for g in layer.values()] + [grads["prototypes"], grads["head"]]
            step += 1
            for p, m, v, g in zip(params, first, second, flat):
                if optimizer == "sgd":
                    m *= momentum
                    m -= lr * g
                    p += m
                    continue
                m *= beta1
                m += (1 - beta1) * g
                v *= beta2
                v += (1 - beta2) * g * g
                p -= lr * (m / (1 - beta1**step)) / (np.sqrt(v / (1 - beta2**step)) + tiny)
        losses.append(total / images.shape[0])
        if log is not None:
            log(epoch, losses[-1])
    if project:
        model = project_prototypes(model, images, image_ids)
    return model, losses
