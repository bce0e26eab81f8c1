"""Density-ratio-weighted robust classifier and its end-to-end training loop.

The predictor scales each class score theta_y . phi(x) by the source/target
density ratio R before the softmax, so inputs far from the source support
(R -> 0) fall back toward the uniform distribution. A class-regularization
strength r smooths the prediction further; in test mode it acts exactly
like temperature scaling with temperature 1 + r.

Training minimizes the maximum-entropy dual
E_t[log Z_theta(x)] - sum_y theta_y . c_y over theta and the feature
parameters. By a change of measure the gradient of the target expectation
becomes a source expectation, so no target labels ever enter the updates:
grad theta_y = E_s[(f_y(x) - 1{y=y_i}) phi(x)].
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from .domain import (
    DEFAULT_RATIO_BOUNDS,
    DomainClassifier,
    bce_gradient_arrays,
    bce_loss,
    density_chain_gradient,
    domain_ratios,
)
from .errors import ConfigError, ContractError, DivergenceError
from .features import (
    FeatureGradient,
    feature_backward_batch,
    feature_forward,
    feature_forward_batch,
    feature_map_from_json,
    feature_map_to_json,
    init_mlp,
)


@dataclass
class Prediction:
    probs: np.ndarray
    log_partition: float


@dataclass
class RobustClassifier:
    theta: np.ndarray  # (C, m) class weights
    feature_map: object
    r: float = 0.0
    ratio_bounds: tuple = DEFAULT_RATIO_BOUNDS

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.ndim != 2:
            raise ConfigError("theta must be a (class_count, feature_dim) matrix")
        if not np.isfinite(self.theta).all():
            raise ConfigError("theta must be finite")
        if self.theta.shape[1] != self.feature_map.out_dim:
            raise ConfigError(
                f"theta has {self.theta.shape[1]} columns but the feature map outputs "
                f"{self.feature_map.out_dim}"
            )
        if not 0.0 <= self.r <= 1.0:
            raise ConfigError("r must lie in [0, 1]")

    @property
    def class_count(self):
        return self.theta.shape[0]

    def copy(self):
        return RobustClassifier(
            self.theta.copy(), self.feature_map.copy(), self.r, tuple(self.ratio_bounds)
        )


@dataclass
class FeatureConstraint:
    """Per-class mean source feature vectors c_y = mean_i 1{y_i=y} phi(x_i)."""

    c_tilde: np.ndarray  # (C, m)


@dataclass
class TrainConfig:
    lr_domain: float = 0.1
    lr_model: float = 0.1
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 30
    domain_update_period: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.lr_domain <= 0 or self.lr_model <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.domain_update_period < 1:
            raise ConfigError("batch_size >= 1, epochs >= 0, domain_update_period >= 1 required")


@dataclass
class SourceGradient:
    grad_theta: np.ndarray  # (C, m)
    upstream: np.ndarray  # (n, m) per-sample feature upstreams
    feature_grad: FeatureGradient


def default_classifier(dim, class_count, seed=0, r=0.0, hidden=(16,), feature_dim=16,
                       ratio_bounds=DEFAULT_RATIO_BOUNDS):
    fmap = init_mlp(dim, hidden, feature_dim, "tanh", seed)
    return RobustClassifier(np.zeros((class_count, feature_dim)), fmap, r, ratio_bounds)


def class_scores(clf, X):
    """Raw per-class scores theta . phi(x) for a batch, shape (n, C)."""
    return feature_forward_batch(clf.feature_map, X) @ clf.theta.T


def _check_ratios(clf, ratios):
    lo, hi = clf.ratio_bounds
    ratios = np.atleast_1d(np.asarray(ratios, dtype=float))
    if ratios.min() < lo or ratios.max() > hi:
        raise ContractError(f"ratio outside bounds [{lo}, {hi}]")
    return ratios


def predict(clf, x, ratio, train_label=None):
    """Robust prediction for one input at a given density ratio.

    In train mode (train_label = y*) the class logits are
    (R z_y + r 1{y=y*}) / (r 1{y=y*} + 1) with z_y = theta_y . phi(x).
    In test mode the indicator is all-ones, which collapses to
    softmax(R z / (1 + r)); that form is used verbatim so the temperature
    identity holds exactly. With r = 0 the two modes coincide.
    """
    _check_ratios(clf, ratio)
    z = clf.theta @ feature_forward(clf.feature_map, x)
    if train_label is None:
        logits = ratio * z / (1.0 + clf.r)
    else:
        if not 0 <= train_label < clf.class_count:
            raise ContractError(f"train label {train_label} outside [0, {clf.class_count})")
        ind = np.zeros(clf.class_count)
        ind[train_label] = 1.0
        logits = (ratio * z + clf.r * ind) / (clf.r * ind + 1.0)
    return Prediction(softmax(logits), float(logsumexp(logits)))


def predict_proba(clf, X, ratios, labels=None):
    """Vectorized prediction; returns (probs (n, C), log-partition (n,))."""
    ratios = _check_ratios(clf, ratios)
    Z = class_scores(clf, X)
    if labels is None:
        logits = ratios[:, None] * Z / (1.0 + clf.r)
    else:
        onehot = np.zeros_like(Z)
        onehot[np.arange(Z.shape[0]), np.asarray(labels, dtype=int)] = 1.0
        logits = (ratios[:, None] * Z + clf.r * onehot) / (clf.r * onehot + 1.0)
    return softmax(logits, axis=1), logsumexp(logits, axis=1)


def feature_constraint(fmap, X, y, class_count, weights=None):
    """Empirical feature-matching constraint from labeled source data."""
    Phi = feature_forward_batch(fmap, X)
    n = Phi.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
    c = np.zeros((class_count, Phi.shape[1]))
    y = np.asarray(y, dtype=int)
    for cls in range(class_count):
        mask = y == cls
        if mask.any():
            c[cls] = (w[mask][:, None] * Phi[mask]).sum(axis=0)
    return FeatureConstraint(c)


def _as_matrix(inputs):
    X = inputs.X if hasattr(inputs, "X") else np.asarray(inputs, dtype=float)
    return np.atleast_2d(X)


def dual_objective(clf, target_inputs, ratios, constraint):
    """Mean target log-partition minus the constraint term (the unregularized dual)."""
    X = _as_matrix(target_inputs)
    if X.shape[0] == 0:
        raise ContractError("dual_objective needs at least one target input")
    ratios = _check_ratios(clf, ratios)
    Z = class_scores(clf, X)
    logZ = logsumexp(ratios[:, None] * Z, axis=1)
    return float(logZ.mean() - np.sum(clf.theta * constraint.c_tilde))


def grad_source(clf, batch, ratios, weights=None):
    """Source-measure gradient of the dual in theta and the feature parameters.

    batch is a labeled Dataset or an (X, y) pair. Per sample, f is the
    train-mode prediction at label y_i, and
    grad theta_y = sum_i w_i (f_y(x_i) - 1{y_i=y}) phi(x_i); the per-sample
    feature upstream is u_i = sum_y (f_y(x_i) - 1{y_i=y}) theta_y. Weights
    default to 1/n. For r = 0 these are exactly the change-of-measure
    gradients of dual_objective.
    """
    if hasattr(batch, "X"):
        if not batch.labeled:
            raise ContractError("grad_source requires a fully labeled batch")
        X, y = batch.X, batch.y
    else:
        X, y = batch
        X = np.asarray(X, dtype=float)
        y = np.asarray(y)
        if any(v is None for v in np.atleast_1d(y).tolist()):
            raise ContractError("grad_source requires a fully labeled batch")
        y = y.astype(int)
    ratios = _check_ratios(clf, ratios)
    n = X.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)

    Phi = feature_forward_batch(clf.feature_map, X)
    Zs = Phi @ clf.theta.T
    onehot = np.zeros_like(Zs)
    onehot[np.arange(n), y] = 1.0
    logits = (ratios[:, None] * Zs + clf.r * onehot) / (clf.r * onehot + 1.0)
    probs = softmax(logits, axis=1)

    diff = probs - onehot
    grad_theta = (diff * w[:, None]).T @ Phi
    upstream = diff @ clf.theta
    fgrad = feature_backward_batch(clf.feature_map, X, upstream, weights=w)
    return SourceGradient(grad_theta, upstream, fgrad)


def target_predictions(clf, dom, dataset, unit_ratio=False):
    """Test-mode probabilities and per-sample ratios over a whole dataset."""
    X = dataset.X if hasattr(dataset, "X") else np.asarray(dataset, dtype=float)
    if unit_ratio or dom is None:
        ratios = np.ones(X.shape[0])
    else:
        _, ratios, _, _ = domain_ratios(dom, X)
    probs, _ = predict_proba(clf, X, ratios)
    return probs, ratios


# ---------------------------------------------------------------------------
# Optimizers


class _Momentum:
    """Classic momentum SGD over theta plus the feature-map layers."""

    def __init__(self, clf, lr, momentum):
        self.lr = lr
        self.mu = momentum
        self.v_theta = np.zeros_like(clf.theta)
        self.v_layers = [(np.zeros_like(W), np.zeros_like(b)) for W, b in clf.feature_map.layers]

    def step(self, clf, grad_theta, fgrad):
        self.v_theta = self.mu * self.v_theta + grad_theta
        clf.theta -= self.lr * self.v_theta
        for i, (dW, db) in enumerate(fgrad.layers):
            vW, vb = self.v_layers[i]
            vW = self.mu * vW + dW
            vb = self.mu * vb + db
            self.v_layers[i] = (vW, vb)
            W, b = clf.feature_map.layers[i]
            clf.feature_map.layers[i] = (W - self.lr * vW, b - self.lr * vb)


def _sgd_step(fmap, fgrad, lr):
    for i, (dW, db) in enumerate(fgrad.layers):
        W, b = fmap.layers[i]
        fmap.layers[i] = (W - lr * dW, b - lr * db)


# ---------------------------------------------------------------------------
# Trainers


def _epoch_metrics(clf, dom, source, target, unit_ratio):
    Xs, ys, Xt = source.X, source.y, target.X
    if unit_ratio or dom is None:
        ratios_t = np.ones(Xt.shape[0])
        ratios_s = np.ones(Xs.shape[0])
    else:
        _, ratios_t, _, _ = domain_ratios(dom, Xt)
        _, ratios_s, _, _ = domain_ratios(dom, Xs)
    constraint = feature_constraint(clf.feature_map, Xs, ys, clf.class_count)
    dual = dual_objective(clf, Xt, ratios_t, constraint)
    if dom is None:
        bce = float("nan")
    else:
        X_all = np.vstack([Xs, Xt])
        is_src = np.concatenate([source.is_source.astype(float), np.zeros(Xt.shape[0])])
        bce = bce_loss(dom, X_all, is_src)
    probs_s, _ = predict_proba(clf, Xs, ratios_s)
    acc = float((probs_s.argmax(axis=1) == ys).mean())
    return dual, bce, acc


def train_end_to_end(source, target, clf, dom, cfg, unit_ratio=False):
    """Alternating updates of the domain classifier and the robust model.

    Each batch draws equal sample counts from source and target. Every
    domain_update_period-th batch the domain net takes one SGD step on the
    cross-entropy gradient plus the density gradients chained from the
    robust objective over the batch's target samples; every batch theta and
    the feature parameters take one momentum-SGD step on grad_source with
    ratios read from the (just updated) domain classifier. With
    unit_ratio=True the ratio path is muted: all ratios are 1 and the
    domain classifier is left untouched.

    Returns copies of the models; the inputs are not mutated. History holds
    one record per epoch with the dual objective, domain BCE, and source
    accuracy, all evaluated on the full datasets.
    """
    if not source.labeled:
        raise ContractError("source dataset must be labeled")
    clf = clf.copy()
    dom = dom.copy() if dom is not None else None
    history = []
    if cfg.epochs == 0:
        return clf, dom, history

    rng = np.random.default_rng(cfg.seed)
    Xs_all, ys_all, Xt_all = source.X, source.y, target.X
    n_s, n_t = len(source), len(target)
    bs = min(cfg.batch_size, n_s, n_t)
    n_batches = max(1, min(n_s, n_t) // bs)
    opt = _Momentum(clf, cfg.lr_model, cfg.momentum)
    src_is_source = source.is_source.astype(float)
    step = 0

    for epoch in range(cfg.epochs):
        perm_s = rng.permutation(n_s)
        perm_t = rng.permutation(n_t)
        for b in range(n_batches):
            sl_s = perm_s[b * bs : (b + 1) * bs]
            sl_t = perm_t[b * bs : (b + 1) * bs]
            Xb_s, yb_s = Xs_all[sl_s], ys_all[sl_s]
            Xb_t = Xt_all[sl_t]

            if not unit_ratio and step % cfg.domain_update_period == 0:
                X_dom = np.vstack([Xb_s, Xb_t])
                t_dom = np.concatenate([src_is_source[sl_s], np.zeros(len(sl_t))])
                g_bce = bce_gradient_arrays(dom, X_dom, t_dom)
                tau_s_t, ratio_t, clamped_t, _ = domain_ratios(dom, Xb_t)
                probs_t, _ = predict_proba(clf, Xb_t, ratio_t)
                Phi_t = feature_forward_batch(clf.feature_map, Xb_t)
                g_den = density_chain_gradient(dom, Xb_t, clf.theta, Phi_t, probs_t, tau_s_t, clamped_t)
                _sgd_step(dom.net, g_bce + g_den, cfg.lr_domain)

            if unit_ratio:
                ratios_b = np.ones(len(sl_s))
            else:
                _, ratios_b, _, _ = domain_ratios(dom, Xb_s)
            g = grad_source(clf, (Xb_s, yb_s), ratios_b)
            opt.step(clf, g.grad_theta, g.feature_grad)
            step += 1

        dual, bce, acc = _epoch_metrics(clf, None if unit_ratio else dom, source, target, unit_ratio)
        record = {"epoch": epoch, "dual": dual, "bce": bce, "source_accuracy": acc}
        if not (np.isfinite(dual) and np.isfinite(clf.theta).all()):
            raise DivergenceError(
                f"non-finite training state at epoch {epoch}",
                state={"epoch": epoch, "dual": dual, "bce": bce},
            )
        history.append(record)
    return clf, dom, history


def train_erm(source, cfg, clf=None):
    """Plain softmax cross-entropy SGD on source data (the unit-ratio baseline)."""
    if not source.labeled:
        raise ContractError("source dataset must be labeled")
    if clf is None:
        clf = default_classifier(source.dim, source.class_count, seed=cfg.seed)
    clf = clf.copy()
    clf.r = 0.0
    history = []
    if cfg.epochs == 0:
        return clf, history

    rng = np.random.default_rng(cfg.seed)
    X_all, y_all = source.X, source.y
    n = len(source)
    bs = min(cfg.batch_size, n)
    n_batches = max(1, n // bs)
    opt = _Momentum(clf, cfg.lr_model, cfg.momentum)

    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for b in range(n_batches):
            sl = perm[b * bs : (b + 1) * bs]
            g = grad_source(clf, (X_all[sl], y_all[sl]), np.ones(len(sl)))
            opt.step(clf, g.grad_theta, g.feature_grad)
        probs, _ = predict_proba(clf, X_all, np.ones(n))
        ce = float(-np.log(np.maximum(probs[np.arange(n), y_all], 1e-300)).mean())
        acc = float((probs.argmax(axis=1) == y_all).mean())
        if not np.isfinite(ce):
            raise DivergenceError(f"non-finite loss at epoch {epoch}", state={"epoch": epoch})
        history.append({"epoch": epoch, "ce_loss": ce, "accuracy": acc})
    return clf, history


# ---------------------------------------------------------------------------
# Checkpoints


def checkpoint_to_json(clf, dom=None, config=None):
    """Bundle theta, feature map, domain net, r, and bounds into JSON text."""
    doc = {
        "theta": [[float(v) for v in row] for row in clf.theta],
        "feature_map": json.loads(feature_map_to_json(clf.feature_map)),
        "r": float(clf.r),
        "ratio_bounds": [float(clf.ratio_bounds[0]), float(clf.ratio_bounds[1])],
        "domain": None,
        "config": config,
    }
    if dom is not None:
        doc["domain"] = {
            "net": json.loads(feature_map_to_json(dom.net)),
            "ratio_bounds": [float(dom.ratio_bounds[0]), float(dom.ratio_bounds[1])],
        }
    return json.dumps(doc)


def checkpoint_from_json(text):
    doc = json.loads(text) if isinstance(text, str) else text
    clf = RobustClassifier(
        np.array(doc["theta"], dtype=float),
        feature_map_from_json(doc["feature_map"]),
        doc["r"],
        tuple(doc["ratio_bounds"]),
    )
    dom = None
    if doc.get("domain") is not None:
        dom = DomainClassifier(
            feature_map_from_json(doc["domain"]["net"]),
            tuple(doc["domain"]["ratio_bounds"]),
        )
    return clf, dom, doc.get("config")
