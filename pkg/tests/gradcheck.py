"""Central finite differences over every parameter of a small encoder."""

import numpy as np

from uniret.trainer import Batch, batch_nll
from uniret.encoder import passage_forward, query_forward


def batch_loss(params, batch: Batch) -> float:
    Q = query_forward(params, batch.query_texts, batch.task_classes)[0]
    P = passage_forward(params, batch.candidate_texts)[0]
    return batch_nll(Q @ P.T, batch.positive_index)[0]


def numeric_grads(params, batch: Batch, h: float = 1e-6, only_touched=None) -> dict:
    out = {}
    for name, t in params.tensors.items():
        g = np.zeros_like(t)
        flat, gflat = t.reshape(-1), g.reshape(-1)
        idx = range(flat.size) if only_touched is None or name not in only_touched else only_touched[name]
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = batch_loss(params, batch)
            flat[i] = orig - h
            down = batch_loss(params, batch)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        out[name] = g
    return out
