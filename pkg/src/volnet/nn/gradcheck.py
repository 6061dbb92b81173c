"""Finite-difference audit of every layer kind and of a small full model.

Checks run on float64 replicas with central differences.  For the full model,
coordinates whose +-h perturbation flips a ReLU sign or a max-pool winner are
skipped: the loss is not differentiable across those points.
"""

from __future__ import annotations

import numpy as np

from ..optim import class_weights, wbce
from ..tensor import RngStream
from . import layers as L
from .model import Model, config_from_name, init_params, model_backward, model_forward

STEP = 1e-3
LAYER_CHECKS = ("conv3d", "conv2d", "maxpool3d", "maxpool2d", "maxpool-endpad", "relu",
                "dropout", "dense", "sigmoid", "flatten", "wbce")


def rel_error(analytic, numeric, floor=1e-8) -> float:
    analytic, numeric = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_grad(f, x: np.ndarray, h: float = STEP, with_signature=False):
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place).

    With ``with_signature``, ``f`` returns ``(value, signature)`` and the result
    is ``(grad, valid)``; ``valid`` marks coordinates whose perturbations left
    the signature unchanged.
    """
    call = f if with_signature else lambda: (f(), None)
    grad = np.zeros_like(x, dtype=np.float64)
    valid = np.ones(x.shape, dtype=bool)
    base = call()[1]
    flat, gflat, vflat = x.reshape(-1), grad.reshape(-1), valid.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        plus, sig_plus = call()
        flat[i] = old - h
        minus, sig_minus = call()
        flat[i] = old
        gflat[i] = (plus - minus) / (2 * h)
        vflat[i] = sig_plus == base and sig_minus == base
    return (grad, valid) if with_signature else grad


def _check_param_layer(forward, backward, x, params, rng):
    y, cache = forward(x, *params)
    proj = rng.standard_normal(y.shape)
    dx, *dparams = backward(cache, proj)
    loss = lambda: float(np.sum(forward(x, *params)[0] * proj))
    errs = [rel_error(dx, numeric_grad(loss, x))]
    errs += [rel_error(d, numeric_grad(loss, p)) for d, p in zip(dparams, params)]
    return max(errs)


def _spaced(rng, shape, gap=0.1):
    # Distinct values at least `gap` apart: no pool ties or winner flips under +-h.
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap - n * gap / 2).reshape(shape).astype(np.float64)


def check_layer(kind: str, rng: np.random.Generator) -> float:
    """Max relative error of one random instance of ``kind``."""
    b = int(rng.integers(1, 3))
    if kind in ("conv3d", "conv2d"):
        nd = 3 if kind == "conv3d" else 2
        cin, cout = (int(c) for c in rng.integers(1, 4, size=2))
        x = rng.standard_normal((b, cin, *rng.integers(2, 6, size=nd)))
        w = rng.standard_normal((cout, cin) + (3,) * nd)
        bias = rng.standard_normal(cout)
        return _check_param_layer(L.conv_forward, L.conv_backward, x, (w, bias), rng)
    if kind == "dense":
        n_in, n_out = (int(c) for c in rng.integers(1, 8, size=2))
        x = rng.standard_normal((b, n_in))
        return _check_param_layer(L.dense_forward, L.dense_backward, x,
                                  (rng.standard_normal((n_out, n_in)), rng.standard_normal(n_out)), rng)
    if kind.startswith("maxpool"):
        if kind == "maxpool2d":
            kernel, end_pad = (2, 2), False
        else:
            kernel, end_pad = ((2, 2, 2), (2, 2, 1), (1, 2, 2))[int(rng.integers(3))], kind == "maxpool-endpad"
        x = _spaced(rng, (b, int(rng.integers(1, 3)), *rng.integers(2, 6, size=len(kernel))))
        forward = lambda: L.maxpool_forward(x, kernel, end_pad)
        y, cache = forward()
        proj = rng.standard_normal(y.shape)
        dx = L.maxpool_backward(cache, proj)
        return rel_error(dx, numeric_grad(lambda: float(np.sum(forward()[0] * proj)), x))
    if kind == "relu":
        shape = (b, *rng.integers(1, 5, size=3))
        x = rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)
        y, mask = L.relu_forward(x)
        proj = rng.standard_normal(y.shape)
        return rel_error(L.relu_backward(mask, proj),
                         numeric_grad(lambda: float(np.sum(L.relu_forward(x)[0] * proj)), x))
    if kind == "dropout":
        x = rng.standard_normal((b, int(rng.integers(1, 20))))
        rate = float(rng.uniform(0.1, 0.6))
        seed = int(rng.integers(1 << 31))
        forward = lambda: L.dropout_forward(x, rate, RngStream(seed, "dropout"), "train")
        y, mask = forward()
        proj = rng.standard_normal(y.shape)
        return rel_error(L.dropout_backward(mask, proj),
                         numeric_grad(lambda: float(np.sum(forward()[0] * proj)), x))
    if kind == "sigmoid":
        z = rng.standard_normal((b, 5)) * 3
        proj = rng.standard_normal(z.shape)
        dz = L.sigmoid_backward(L.sigmoid_forward(z), proj)
        return rel_error(dz, numeric_grad(lambda: float(np.sum(L.sigmoid_forward(z) * proj)), z))
    if kind == "flatten":
        # Flatten is a reshape; its backward is the inverse reshape.
        x = rng.standard_normal((b, 2, 3, 4))
        proj = rng.standard_normal((b, 24))
        dx = proj.reshape(x.shape)
        return rel_error(dx, numeric_grad(lambda: float(np.sum(x.reshape(b, -1) * proj)), x))
    if kind == "wbce":
        n = int(rng.integers(2, 10))
        labels = np.array([1, 0] + list(rng.integers(0, 2, size=n - 2)))
        p = rng.uniform(0.1, 0.9, size=n)
        weights = class_weights(int(labels.sum()), int(n - labels.sum()))
        _, dp = wbce(p, labels, weights)
        return rel_error(dp, numeric_grad(lambda: wbce(p, labels, weights)[0], p))
    raise ValueError(f"unknown layer kind {kind!r}")


def _kink_signature(model, cache) -> bytes:
    parts = []
    for i, spec in enumerate(model.config.layers):
        if spec.kind == "relu":
            parts.append(cache.entries[i].tobytes())
        elif spec.kind.startswith("maxpool"):
            parts.append(cache.entries[i][3].tobytes())
    return b"".join(parts)


def check_model(config_name: str, rng: np.random.Generator, batch_size: int = 1):
    """Full-model check against the class-weighted loss.

    Defaults to one sample: summed over a batch, per-sample gradients can cancel
    while their O(h^2) truncation terms do not, which inflates relative error
    without indicating a bug.  Batch accumulation is covered by the layer checks.
    Returns ``(max_rel_error, skipped_coordinates, total_coordinates)``.
    """
    cfg = config_from_name(config_name)
    model32 = init_params(cfg, RngStream(int(rng.integers(1 << 31)), "init"))
    model = Model(cfg, {k: v.astype(np.float64) for k, v in model32.params.items()})
    batch = rng.uniform(0.0, 1.0, (batch_size, *cfg.input_shape))
    labels = rng.integers(0, 2, size=batch_size)
    weights = class_weights(3, 2)

    def loss_and_signature():
        scores, cache = model_forward(model, batch, "train", dtype=np.float64)
        return wbce(scores, labels, weights)[0], _kink_signature(model, cache)

    scores, cache = model_forward(model, batch, "train", dtype=np.float64)
    _, dscore = wbce(scores, labels, weights)
    grads = model_backward(model, cache, dscore)
    worst, skipped, total = 0.0, 0, 0
    for name in model.trainable():
        numeric, valid = numeric_grad(loss_and_signature, model.params[name], with_signature=True)
        total += valid.size
        skipped += int((~valid).sum())
        if valid.any():
            worst = max(worst, rel_error(grads[name][valid], numeric[valid]))
    return worst, skipped, total


def audit(instances: int = 20, seed: int = 0, config_name: str = "tiny3d") -> dict[str, float]:
    """Max relative error per layer kind and for the full ``config_name`` model."""
    rng = np.random.default_rng(seed)
    report = {kind: max(check_layer(kind, rng) for _ in range(instances)) for kind in LAYER_CHECKS}
    report[f"model:{config_name}"] = max(check_model(config_name, rng)[0] for _ in range(instances))
    return report
