"""Device-side work: decode the received sub-network and train it locally.

Devices only ever decode.  Quantization and encoding happen at the server,
and this module must not import them (checked by the test suite).
"""

from __future__ import annotations

import numpy as np

from .codec import QuantizedPayload, dequantize
from .decompose import sub_arch
from .nn import Dataset, ElasticArch, ElasticModel, SubNetworkSpec, loss, loss_and_grad, sgd_step


def local_training(
    model: ElasticModel, data: Dataset, epochs: int, lr: float, batch_size: int, rng: np.random.Generator
) -> ElasticModel:
    """``epochs`` shuffled passes of minibatch SGD over ``data``."""
    spec = model.arch.full_spec
    for _ in range(epochs):
        for batch in data.batches(batch_size, rng):
            _, grad = loss_and_grad(model, spec, batch)
            model = sgd_step(model, grad, lr)
    return model


def train_received(
    payload: QuantizedPayload,
    arch: ElasticArch,
    spec: SubNetworkSpec,
    data: Dataset,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """Decode ``payload`` as the ``spec`` slice of ``arch`` and train it on ``data``.

    Returns the trained sub-network values (full precision, canonical order)
    and the loss of the received, quantized model on ``data`` before training.
    """
    model = ElasticModel(sub_arch(arch, spec), dequantize(payload))
    received_loss = loss(model, model.arch.full_spec, data)
    model = local_training(model, data, epochs, lr, batch_size, rng)
    return model.params, received_loss
