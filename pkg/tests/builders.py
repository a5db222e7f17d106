"""Small models shared by several test modules."""

import numpy as np

from protosanity.network import build_network, forward
from protosanity.prototypes import PROTOTREE, PrototypeModel, class_head


def random_model(seed, kind=PROTOTREE, bias=True, final_relu=True, size=16, channels=(4, 6), n_protos=3, feature_scale=0.5, mean=None, std=None):
    """Random network with prototypes copied from the features of a random image.

    Returns the model and a raw image whose features the prototypes came from.
    """
    rng = np.random.default_rng(seed)
    kwargs = {}
    if mean is not None:
        kwargs.update(mean=mean, std=std)
    net = build_network(
        channels=channels,
        input_shape=(3, size, size),
        bias=bias,
        final_relu=final_relu,
        rng=rng,
        feature_scale=feature_scale,
        **kwargs,
    )
    if bias:
        for layer in net.layers:
            if getattr(layer, "bias", None) is not None:
                layer.bias[:] = rng.normal(0, 0.05, size=layer.bias.shape)
    x = rng.random((3, size, size))
    donor = rng.random((3, size, size))
    feats, _ = forward(net, donor)
    _, h, w = feats.shape
    picks = [divmod(int(v), w) for v in rng.integers(0, h * w, size=n_protos)]
    protos = np.stack([feats[:, a, b] for a, b in picks]) + rng.normal(0, 0.05, size=(n_protos, feats.shape[0]))
    ident = np.arange(n_protos) % 2
    model = PrototypeModel(net, protos, class_head(ident, 2), kind=kind, class_identity=ident)
    return model, x
