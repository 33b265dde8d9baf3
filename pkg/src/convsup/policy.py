"""Differentiable learner policies over clipped state features.

Two parameterizations share one flat parameter vector ``theta``:

* ``LinearAffine``: ``pi(s) = W @ phi(s)`` with ``phi(s) = [x(s); 1]`` and
  ``theta = W.ravel()`` (row-major, shape ``action_dim x (state_dim + 1)``).
* ``MlpEnsemble``: the mean of ``members`` small MLPs fed ``x(s)``.

Both read the standardized, clipped state ``x(s) = clip((s - offset) / scale, -c, c)``.
Clipping keeps the Jacobian bounded by ``sqrt(state_dim * c**2 + 1)`` for the
linear policy.

The feasible set is the Euclidean ball ``||theta|| <= radius``. Outputs are
never clipped here; the environment clips at its boundary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

KINDS = ("LinearAffine", "MlpEnsemble")
ACTIVATIONS = ("swish", "tanh")


@dataclass(frozen=True, eq=False)
class PolicyParams:
    theta: np.ndarray
    kind: str
    state_dim: int
    action_dim: int
    feature_clip: float = 10.0
    feature_offset: tuple[float, ...] | None = None
    feature_scale: float = 0.1
    radius: float = 50.0
    jacobian_bound: float = float("nan")
    hidden: tuple[int, ...] = (20, 20)
    members: int = 5
    activation: str = "swish"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).ravel()
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        offset = (0.0,) * self.state_dim if self.feature_offset is None else self.feature_offset
        object.__setattr__(self, "feature_offset", tuple(float(v) for v in offset))
        if len(self.feature_offset) != self.state_dim:
            raise ValueError("feature_offset needs one entry per state dimension")
        if not self.feature_scale > 0 or not self.feature_clip > 0:
            raise ValueError("feature_scale and feature_clip must be positive")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if theta.size != n_params(self):
            raise ValueError(f"theta has {theta.size} entries, layout needs {n_params(self)}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta has non-finite entries")
        if np.isnan(self.jacobian_bound) and self.kind == "LinearAffine":
            object.__setattr__(self, "jacobian_bound", linear_jacobian_bound(self.state_dim, self.feature_clip))

    @property
    def dim(self) -> int:
        return self.theta.size

    def with_theta(self, theta) -> "PolicyParams":
        return replace(self, theta=np.asarray(theta, dtype=float), meta={})

    @property
    def weight_matrix(self) -> np.ndarray:
        if self.kind != "LinearAffine":
            raise TypeError("weight_matrix is only defined for LinearAffine policies")
        return self.theta.reshape(self.action_dim, self.state_dim + 1)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "feature_clip": self.feature_clip,
            "feature_offset": list(self.feature_offset),
            "feature_scale": self.feature_scale,
            "radius": self.radius,
            "jacobian_bound": self.jacobian_bound,
            "hidden": list(self.hidden),
            "members": self.members,
            "activation": self.activation,
            "shape": [self.dim],
            "theta": self.theta.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyParams":
        d = dict(d)
        d.pop("shape", None)
        d["theta"] = np.asarray(d["theta"], dtype=float)
        d["hidden"] = tuple(d.get("hidden", (20, 20)))
        if d.get("feature_offset") is not None:
            d["feature_offset"] = tuple(d["feature_offset"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "PolicyParams":
        return cls.from_dict(json.loads(text))


@dataclass
class LabeledDataset:
    states: np.ndarray
    labels: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.labels = np.atleast_2d(np.asarray(self.labels, dtype=float))
        if len(self.states) != len(self.labels):
            raise ValueError(f"{len(self.states)} states but {len(self.labels)} labels")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)
            if self.weights.shape != (len(self.states),):
                raise ValueError("weights must have one entry per sample")

    def __len__(self):
        return len(self.states)

    def max_label_distance(self) -> float:
        """Largest pairwise label distance (a lower bound on the action diameter)."""
        y = self.labels
        if len(y) < 2:
            return 0.0
        lo, hi = y.min(axis=0), y.max(axis=0)
        return float(np.linalg.norm(hi - lo))

    @classmethod
    def concatenate(cls, parts) -> "LabeledDataset":
        parts = list(parts)
        weights = None
        if any(p.weights is not None for p in parts):
            weights = np.concatenate([p.weights if p.weights is not None else np.ones(len(p)) for p in parts])
        return cls(np.concatenate([p.states for p in parts]), np.concatenate([p.labels for p in parts]), weights)


# ---------------------------------------------------------------- layout

def _layer_shapes(state_dim, action_dim, hidden) -> list[tuple[int, ...]]:
    sizes = (state_dim, *hidden, action_dim)
    shapes = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        shapes += [(fan_in, fan_out), (fan_out,)]
    return shapes


def _mlp_shapes(p: PolicyParams) -> list[tuple[int, ...]]:
    return _layer_shapes(p.state_dim, p.action_dim, p.hidden)


def param_count(kind, state_dim, action_dim, hidden=(20, 20), members=5) -> int:
    if kind == "LinearAffine":
        return action_dim * (state_dim + 1)
    return members * sum(int(np.prod(s)) for s in _layer_shapes(state_dim, action_dim, hidden))


def n_params(p: PolicyParams) -> int:
    return param_count(p.kind, p.state_dim, p.action_dim, p.hidden, p.members)


def _unflatten(p: PolicyParams, theta: np.ndarray) -> list[list[np.ndarray]]:
    shapes = _mlp_shapes(p)
    per_member = sum(int(np.prod(s)) for s in shapes)
    members = []
    for m in range(p.members):
        chunk = theta[m * per_member:(m + 1) * per_member]
        arrays, offset = [], 0
        for s in shapes:
            size = int(np.prod(s))
            arrays.append(chunk[offset:offset + size].reshape(s))
            offset += size
        members.append(arrays)
    return members


def linear_jacobian_bound(state_dim: int, feature_clip: float) -> float:
    """Largest feature norm over the clipped box, which is the Jacobian operator-norm bound."""
    return float(np.sqrt(state_dim * feature_clip**2 + 1.0))


def zeros(kind: str, state_dim: int, action_dim: int, **kwargs) -> PolicyParams:
    """The center of the parameter ball for the given layout."""
    count = param_count(kind, state_dim, action_dim, kwargs.get("hidden", (20, 20)), kwargs.get("members", 5))
    return PolicyParams(np.zeros(count), kind, state_dim, action_dim, **kwargs)


def standardize(params: PolicyParams, states) -> np.ndarray:
    x = (np.asarray(states, dtype=float) - np.asarray(params.feature_offset)) / params.feature_scale
    return np.clip(x, -params.feature_clip, params.feature_clip)


def template_for(env, kind: str = "LinearAffine", **kwargs) -> PolicyParams:
    """Zero policy whose features are centered on the goal at rest."""
    offset = tuple(env.goal) + (0.0,) * (env.state_dim - len(env.goal))
    kwargs.setdefault("feature_offset", offset)
    return zeros(kind, env.state_dim, env.action_dim, **kwargs)


def features(params: PolicyParams, states) -> np.ndarray:
    """Affine feature map ``[x(s); 1]``; accepts a single state or a batch."""
    clipped = standardize(params, states)
    ones = np.ones(clipped.shape[:-1] + (1,))
    return np.concatenate([clipped, ones], axis=-1)


# ---------------------------------------------------------------- MLP internals

def _activate(name: str, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return activation and its derivative."""
    if name == "tanh":
        h = np.tanh(z)
        return h, 1.0 - h**2
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    h = z * sig
    return h, sig * (1.0 + z * (1.0 - sig))


def _member_forward(layers, x, activation):
    caches = []
    h = x
    n_layers = len(layers) // 2
    for k in range(n_layers):
        W, b = layers[2 * k], layers[2 * k + 1]
        z = h @ W + b
        if k < n_layers - 1:
            a, da = _activate(activation, z)
            caches.append((h, da))
            h = a
        else:
            caches.append((h, None))
            h = z
    return h, caches


def _member_backward(layers, caches, g_out, per_sample: bool):
    """Backprop ``g_out`` (n x action_dim); returns per-layer grads (summed or per row)."""
    grads = [None] * len(layers)
    g = g_out
    for k in reversed(range(len(layers) // 2)):
        h_in, da = caches[k]
        if da is not None:
            g = g * da
        if per_sample:
            grads[2 * k] = np.einsum("ni,nj->nij", h_in, g)
            grads[2 * k + 1] = g
        else:
            grads[2 * k] = h_in.T @ g
            grads[2 * k + 1] = g.sum(axis=0)
        if k > 0:
            g = g @ layers[2 * k].T
    return grads


def _mlp_vjp(params: PolicyParams, states: np.ndarray, g_out: np.ndarray, per_sample=False) -> np.ndarray:
    """Gradient of ``sum_k g_out[k] . pi(s_k)`` w.r.t. theta (or per-sample rows)."""
    x = standardize(params, np.atleast_2d(states))
    scale = 1.0 / params.members
    blocks = []
    for layers in _unflatten(params, params.theta):
        _, caches = _member_forward(layers, x, params.activation)
        grads = _member_backward(layers, caches, g_out * scale, per_sample)
        if per_sample:
            blocks.append(np.concatenate([gr.reshape(len(x), -1) for gr in grads], axis=1))
        else:
            blocks.append(np.concatenate([gr.ravel() for gr in grads]))
    return np.concatenate(blocks, axis=-1)


# ---------------------------------------------------------------- public ops

def act_batch(params: PolicyParams, states) -> np.ndarray:
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if states.shape[-1] != params.state_dim:
        raise ValueError(f"state dimension {states.shape[-1]} != policy state_dim {params.state_dim}")
    if params.kind == "LinearAffine":
        return features(params, states) @ params.weight_matrix.T
    x = standardize(params, states)
    out = 0.0
    for layers in _unflatten(params, params.theta):
        y, _ = _member_forward(layers, x, params.activation)
        out = out + y
    return out / params.members


def act(params: PolicyParams, state) -> np.ndarray:
    state = np.asarray(state, dtype=float)
    if state.shape != (params.state_dim,):
        raise ValueError(f"expected state of shape ({params.state_dim},), got {state.shape}")
    if params.kind == "LinearAffine":
        return params.weight_matrix @ features(params, state)
    return act_batch(params, state[None])[0]


def policy_jacobian(params: PolicyParams, state) -> np.ndarray:
    """d act / d theta, shape ``(action_dim, dim)``."""
    state = np.asarray(state, dtype=float)
    if params.kind == "LinearAffine":
        return np.kron(np.eye(params.action_dim), features(params, state)[None, :])
    A = params.action_dim
    return _mlp_vjp(params, np.repeat(state[None], A, axis=0), np.eye(A), per_sample=True)


def jacobian_vjp(params: PolicyParams, states, g_out) -> np.ndarray:
    """``sum_k J(s_k)^T g_out[k]`` without materializing the Jacobians."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if params.kind == "LinearAffine":
        return (np.asarray(g_out).T @ features(params, states)).ravel()
    return _mlp_vjp(params, states, np.asarray(g_out))


def project(params: PolicyParams) -> PolicyParams:
    norm = np.linalg.norm(params.theta)
    if norm <= params.radius:
        return params
    return params.with_theta(params.theta * (params.radius / norm))


def measured_jacobian_bound(params: PolicyParams, states, margin: float = 1.5) -> float:
    """Margined maximum Jacobian operator norm over ``states``."""
    norms = [np.linalg.norm(policy_jacobian(params, s), 2) for s in np.atleast_2d(states)]
    return margin * float(max(norms))


# ---------------------------------------------------------------- ridge

def solve_ball_quadratic(H: np.ndarray, B: np.ndarray, radius: float) -> np.ndarray:
    """Minimize ``tr(W H W^T) - 2 tr(W B)`` over ``||W||_F <= radius``.

    ``H`` is symmetric positive definite (F x F), ``B`` is F x A and the
    minimizer is returned as an A x F matrix. Inside the ball this is the
    normal-equations solution ``B^T H^{-1}``; otherwise the multiplier of the
    norm constraint is found by a scalar root search.
    """
    evals, evecs = np.linalg.eigh(H)
    if evals[0] <= 0:
        raise np.linalg.LinAlgError("quadratic term must be positive definite")
    C = evecs.T @ B  # coordinates in the eigenbasis, F x A
    row_sq = np.sum(C**2, axis=1)

    def norm_at(lam):
        return np.sqrt(np.sum(row_sq / (evals + lam) ** 2))

    lam = 0.0
    if norm_at(0.0) > radius:
        upper = max(1.0, np.sqrt(row_sq.sum()) / radius)
        while norm_at(upper) > radius:
            upper *= 2.0
        lam = brentq(lambda x: norm_at(x) - radius, 0.0, upper, xtol=1e-14, rtol=4 * np.finfo(float).eps)
    W = (evecs @ (C / (evals + lam)[:, None])).T
    norm = np.linalg.norm(W)
    if norm > radius:  # root tolerance can overshoot by an ulp
        W *= radius / norm
    return W


def ridge_statistics(params: PolicyParams, data: LabeledDataset):
    """Weighted second moments ``(Phi^T Phi / n, Phi^T Y / n)`` of a dataset."""
    Phi = features(params, data.states)
    w = np.ones(len(data)) if data.weights is None else data.weights
    w = w / w.sum()
    return (Phi * w[:, None]).T @ Phi, (Phi * w[:, None]).T @ data.labels


def fit_ridge(data: LabeledDataset, alpha_reg: float, template: PolicyParams) -> PolicyParams:
    """Regularized least squares fit of a ``LinearAffine`` policy, constrained to the ball."""
    if template.kind != "LinearAffine":
        raise TypeError("fit_ridge requires a LinearAffine template")
    if len(data) == 0:
        raise ValueError("cannot fit an empty dataset")
    if not np.all(np.isfinite(data.labels)):
        raise ValueError("labels contain non-finite values")
    if not alpha_reg > 0:
        raise ValueError("alpha_reg must be positive")
    H, B = ridge_statistics(template, data)
    F = H.shape[0]
    W = solve_ball_quadratic(H + alpha_reg * np.eye(F), B, template.radius)
    return template.with_theta(W.ravel())


# ---------------------------------------------------------------- MLP fit

class TrainingDiverged(FloatingPointError):
    """Raised when a gradient-based fit produces a non-finite loss."""


def init_mlp(state_dim: int, action_dim: int, seed: int, hidden=(20, 20), members=5,
             activation="swish", **kwargs) -> PolicyParams:
    template = zeros("MlpEnsemble", state_dim, action_dim, hidden=hidden, members=members,
                     activation=activation, **kwargs)
    blocks = []
    for m in range(members):
        rng = np.random.Generator(np.random.Philox(key=[int(seed), m]))
        for shape in _mlp_shapes(template):
            if len(shape) == 2:
                blocks.append(rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape).ravel())
            else:
                blocks.append(np.zeros(shape))
    return template.with_theta(np.concatenate(blocks))


def fit_mlp(data: LabeledDataset, epochs: int = 300, step_size: float = 3e-3, seed: int = 0,
            batch_size: int = 32, alpha_reg: float = 0.0, template: PolicyParams | None = None,
            init: PolicyParams | None = None) -> PolicyParams:
    """Train each ensemble member on the squared loss with Adam-scaled minibatch steps.

    Members start from independent seeds and see independently shuffled
    batches. The final mean training loss of the ensemble is stored in
    ``meta["train_loss"]``.
    """
    if len(data) == 0:
        raise ValueError("cannot fit an empty dataset")
    if init is None:
        t = template or zeros("MlpEnsemble", data.states.shape[1], data.labels.shape[1])
        init = init_mlp(t.state_dim, t.action_dim, seed, t.hidden, t.members, t.activation,
                        feature_clip=t.feature_clip, feature_offset=t.feature_offset,
                        feature_scale=t.feature_scale, radius=t.radius)
    x = standardize(init, data.states)
    y = data.labels
    n = len(x)
    w = np.ones(n) if data.weights is None else data.weights * n / data.weights.sum()
    members = _unflatten(init, init.theta.copy())
    members = [[arr.copy() for arr in layers] for layers in members]
    b1, b2, eps = 0.9, 0.999, 1e-8
    for m, layers in enumerate(members):
        rng = np.random.Generator(np.random.Philox(key=[int(seed), 1000 + m]))
        mom = [np.zeros_like(a) for a in layers]
        vel = [np.zeros_like(a) for a in layers]
        t = 0
        for _ in range(epochs):
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                pred, caches = _member_forward(layers, x[idx], init.activation)
                resid = pred - y[idx]
                g_out = 2.0 * resid * w[idx, None] / len(idx)
                grads = _member_backward(layers, caches, g_out, per_sample=False)
                t += 1
                for k, g in enumerate(grads):
                    g = g + 2.0 * alpha_reg * layers[k]
                    mom[k] = b1 * mom[k] + (1 - b1) * g
                    vel[k] = b2 * vel[k] + (1 - b2) * g * g
                    mhat = mom[k] / (1 - b1**t)
                    vhat = vel[k] / (1 - b2**t)
                    layers[k] -= step_size * mhat / (np.sqrt(vhat) + eps)
            if not all(np.all(np.isfinite(a)) for a in layers):
                raise TrainingDiverged(f"member {m} diverged; reduce step_size (now {step_size})")
    theta = np.concatenate([a.ravel() for layers in members for a in layers])
    fitted = project(init.with_theta(theta))
    loss = float(np.mean(w * np.sum((act_batch(fitted, data.states) - y) ** 2, axis=1)))
    if not np.isfinite(loss):
        raise TrainingDiverged(f"final training loss is {loss}")
    return replace(fitted, meta={"train_loss": loss})
