"""Data buffers and training loops for the dynamics ensemble and the barrier.

The ensemble is a set of bootstrapped probabilistic nets trained by Gaussian
NLL on (state features + action) -> (state delta, reward). The barrier net is
trained on three hinge terms: safe states pushed above eps_plus, unsafe
states below -eps_minus, and a feasibility term that asks the one-step
surrogate margin (under every ensemble member) to be nonnegative at visited
(state, action) pairs. The ensemble is frozen while the barrier trains; the
barrier's spectral-norm certificates are re-projected after every optimizer
step.
"""

from __future__ import annotations

import csv
from collections import OrderedDict, deque
from dataclasses import dataclass

import numpy as np

from .models import encode_state
from .neural import (
    Adam,
    LipschitzCbf,
    Normalizer,
    Pnn,
    gaussian_nll,
    load_checkpoint,
    save_checkpoint,
    soft_clamp_log_var,
)
from .streams import RandomStream

MIN_TRAIN_SIZE = 256


# ---------------------------------------------------------------------------
# buffers


class TransitionBuffer:
    """(state features, action, next-state delta, reward) tuples."""

    def __init__(self):
        self._x = []
        self._a = []
        self._y = []

    def add(self, model_state, action, delta, reward) -> None:
        self._x.append(np.asarray(model_state, dtype=np.float64))
        self._a.append(np.asarray(action, dtype=np.float64))
        self._y.append(np.concatenate([np.asarray(delta, dtype=np.float64), [float(reward)]]))

    def __len__(self) -> int:
        return len(self._x)

    def arrays(self):
        X = np.concatenate([np.stack(self._x), np.stack(self._a)], axis=1)
        Y = np.stack(self._y)
        return X, Y

    def to_csv(self, path) -> None:
        X, Y = self.arrays()
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(
                [f"x{i}" for i in range(X.shape[1])] + [f"y{i}" for i in range(Y.shape[1])]
            )
            for xr, yr in zip(X, Y):
                w.writerow([repr(v) for v in xr] + [repr(v) for v in yr])


class KeyedFifo:
    """FIFO state store with exact-coordinate dedup (later insert wins)."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._od: OrderedDict[bytes, np.ndarray] = OrderedDict()

    def add(self, state: np.ndarray) -> bytes:
        key = state.tobytes()
        if key in self._od:
            self._od.move_to_end(key)
        else:
            self._od[key] = state
            while len(self._od) > self.capacity:
                self._od.popitem(last=False)
        return key

    def discard(self, key: bytes) -> None:
        self._od.pop(key, None)

    def __contains__(self, key: bytes) -> bool:
        return key in self._od

    def __len__(self) -> int:
        return len(self._od)

    def to_array(self) -> np.ndarray:
        if not self._od:
            return np.empty((0, 0))
        return np.stack(list(self._od.values()))


class SafetyBuffers:
    """Safe states, unsafe states, and visited (state, action) pairs."""

    def __init__(self, capacity: int = 50_000):
        self.d_plus = KeyedFifo(capacity)
        self.d_minus = KeyedFifo(capacity)
        self.d_fea: deque = deque(maxlen=capacity)

    def add_safe(self, state: np.ndarray) -> None:
        key = self.d_plus.add(state)
        self.d_minus.discard(key)

    def add_unsafe(self, state: np.ndarray) -> None:
        key = self.d_minus.add(state)
        self.d_plus.discard(key)

    def add_fea(self, model_state, phys_state, action) -> None:
        self.d_fea.append(
            (
                np.asarray(model_state, dtype=np.float64),
                np.asarray(phys_state, dtype=np.float64),
                np.asarray(action, dtype=np.float64),
            )
        )

    def fea_arrays(self):
        if not self.d_fea:
            return np.empty((0, 0)), np.empty((0, 0)), np.empty((0, 0))
        ms = np.stack([e[0] for e in self.d_fea])
        ps = np.stack([e[1] for e in self.d_fea])
        ac = np.stack([e[2] for e in self.d_fea])
        return ms, ps, ac


def ingest_step(
    bufs: SafetyBuffers,
    buffer: TransitionBuffer,
    model_state,
    action,
    delta,
    reward,
    labels,
    phys_state,
    stream: RandomStream,
    safe_cap: int = 200,
) -> None:
    """Record one executed step: transition, sensor labels, feasibility pair.

    Unsafe labels are never subsampled (they are the scarce class); safe
    labels are uniformly thinned to at most ``safe_cap`` per step.
    """
    buffer.add(model_state, action, delta, reward)
    bufs.add_fea(model_state, phys_state, action)
    if labels is None:
        return
    states = np.asarray(labels.states, dtype=np.float64)
    unsafe = np.asarray(labels.unsafe, dtype=bool)
    for s in states[unsafe]:
        bufs.add_unsafe(s)
    safe_states = states[~unsafe]
    if len(safe_states) > safe_cap:
        keep = stream.choice(len(safe_states), size=safe_cap, replace=False)
        safe_states = safe_states[np.sort(keep)]
    for s in safe_states:
        bufs.add_safe(s)


# ---------------------------------------------------------------------------
# ensemble


class PnnEnsemble:
    """Bootstrapped probabilistic nets with shared input/target normalizers."""

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        n_members: int = 5,
        hidden=(200, 200, 200),
        stream: RandomStream | None = None,
    ):
        stream = stream if stream is not None else RandomStream(0)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.hidden = tuple(hidden)
        self.members = [
            Pnn(in_dim, out_dim, hidden, stream.child("member", e)) for e in range(n_members)
        ]
        self.input_norm = Normalizer(in_dim)
        self.target_norm = Normalizer(out_dim)

    def predict_raw(self, member_idx, X: np.ndarray):
        """Per-sample Gaussian (mean, var) in raw target units.

        ``member_idx`` selects the ensemble member per row (scalar allowed).
        """
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        B = X.shape[0]
        member_idx = np.broadcast_to(np.asarray(member_idx), (B,))
        Xn = self.input_norm.transform(X)
        # dispatch rows to members in sorted blocks; clamp, exponentiate, and
        # check finiteness once for the whole batch instead of per member
        raw = np.empty((B, 2 * self.out_dim))
        order = np.argsort(member_idx, kind="stable")
        bounds = np.searchsorted(member_idx[order], np.arange(len(self.members) + 1))
        for e in range(len(self.members)):
            rows = order[bounds[e] : bounds[e + 1]]
            if rows.size:
                raw[rows] = self.members[e].net.forward(Xn[rows])
        mean = raw[:, : self.out_dim]
        if not np.all(np.isfinite(mean)):
            raise FloatingPointError("non-finite PNN activations")
        var = np.exp(soft_clamp_log_var(raw[:, self.out_dim :]))
        scale = self.target_norm.std
        return self.target_norm.inverse(mean), var * scale**2

    def save(self, path) -> None:
        arrays = {
            "input_mean": self.input_norm.mean,
            "input_std": self.input_norm.std,
            "target_mean": self.target_norm.mean,
            "target_std": self.target_norm.std,
        }
        for e, member in enumerate(self.members):
            for k, v in member.net.params().items():
                arrays[f"m{e}_{k}"] = v
        meta = {
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "n_members": len(self.members),
            "hidden": list(self.hidden),
        }
        save_checkpoint(path, "pnn_ensemble", meta, arrays)

    @classmethod
    def load(cls, path) -> "PnnEnsemble":
        kind, meta, arrays = load_checkpoint(path)
        if kind != "pnn_ensemble":
            raise ValueError(f"expected a pnn_ensemble checkpoint, got {kind!r}")
        ens = cls(meta["in_dim"], meta["out_dim"], meta["n_members"], meta["hidden"])
        ens.input_norm.mean = arrays["input_mean"]
        ens.input_norm.std = arrays["input_std"]
        ens.target_norm.mean = arrays["target_mean"]
        ens.target_norm.std = arrays["target_std"]
        for e, member in enumerate(ens.members):
            params = {
                k[len(f"m{e}_") :]: arrays[k] for k in arrays if k.startswith(f"m{e}_")
            }
            member.net.set_params(params)
        return ens


def train_ensemble(
    ensemble: PnnEnsemble,
    buffer: TransitionBuffer,
    epochs: int,
    stream: RandomStream,
    batch_size: int = 256,
    lr: float = 1e-3,
    holdout_frac: float = 0.1,
):
    """Fit every member on an independent bootstrap resample by NLL.

    Returns a history dict with per-epoch held-out NLL (averaged over
    members); returns None without touching the ensemble when the buffer is
    too small.
    """
    if len(buffer) < MIN_TRAIN_SIZE:
        return None
    X, Y = buffer.arrays()
    ensemble.input_norm.fit(X)
    ensemble.target_norm.fit(Y)
    Xn = ensemble.input_norm.transform(X)
    Yn = ensemble.target_norm.transform(Y)

    perm = stream.child("split").permutation(len(X))
    n_hold = max(1, int(len(X) * holdout_frac))
    hold, train = perm[:n_hold], perm[n_hold:]
    Xh, Yh = Xn[hold], Yn[hold]
    held_nll = np.zeros(epochs)

    for e, member in enumerate(ensemble.members):
        boot = stream.child("boot", e).integers(0, len(train), size=len(train))
        idx = train[boot]
        adam = Adam(lr=lr)
        params = member.net.params()
        for epoch in range(epochs):
            order = stream.child("order", e, epoch).permutation(len(idx))
            for start in range(0, len(idx), batch_size):
                rows = idx[order[start : start + batch_size]]
                _, grads = member.nll_loss(Xn[rows], Yn[rows])
                adam.step(params, grads)
            mean_h, lv_h = member.forward(Xh)
            nll, _, _ = gaussian_nll(mean_h, lv_h, Yh)
            held_nll[epoch] += nll / len(ensemble.members)
    return {"holdout_nll": held_nll}


# ---------------------------------------------------------------------------
# barrier training


@dataclass
class CbfHyper:
    lambda1: float = 1.0
    lambda2: float = 2.0
    lambda3: float = 1.0
    eps_plus: float = 0.05
    eps_minus: float = 0.1
    eps_fea: float = 0.01
    kappa: float = 0.95

    def __post_init__(self):
        if abs(2.0 * self.lambda1 - self.lambda2) > 1e-12:
            raise ValueError("safety weighting requires 2*lambda1 == lambda2")
        if not 0.0 <= self.eps_plus < self.eps_minus:
            raise ValueError("need 0 <= eps_plus < eps_minus")
        if min(self.lambda3, self.eps_fea) < 0:
            raise ValueError("lambda3 and eps_fea must be nonnegative")


def cbf_loss(
    cbf: LipschitzCbf,
    safe_enc: np.ndarray,
    unsafe_enc: np.ndarray,
    fea_s_enc: np.ndarray,
    fea_mu_enc: np.ndarray,
    fea_trace: np.ndarray,
    hyp: CbfHyper,
):
    """Composite hinge loss and its gradients w.r.t. barrier parameters.

    Feasibility rows come pre-expanded over ensemble members: row j carries
    the member's predicted next state (encoded) and state-covariance trace.
    Empty groups contribute zero. Returns (l_plus, l_minus, l_fea, total,
    grads).
    """
    n_plus = len(safe_enc)
    n_minus = len(unsafe_enc)
    n_fea = len(fea_s_enc)
    L = cbf.lipschitz_bound

    blocks = [b for b in (safe_enc, unsafe_enc, fea_s_enc, fea_mu_enc) if len(b)]
    if not blocks:
        return 0.0, 0.0, 0.0, 0.0, {k: np.zeros_like(v) for k, v in cbf.net.params().items()}
    X = np.concatenate(blocks, axis=0)
    h, cache = cbf.value_cached(X)
    d_h = np.zeros_like(h)

    o = 0
    l_plus = 0.0
    if n_plus:
        hp = h[o : o + n_plus]
        act = (-hp + hyp.eps_plus) > 0
        l_plus = float(np.sum(np.maximum(-hp + hyp.eps_plus, 0.0))) / n_plus
        d_h[o : o + n_plus][act] = -hyp.lambda1 / n_plus
        o += n_plus
    l_minus = 0.0
    if n_minus:
        hm = h[o : o + n_minus]
        act = (hm + hyp.eps_minus) > 0
        l_minus = float(np.sum(np.maximum(hm + hyp.eps_minus, 0.0))) / n_minus
        d_h[o : o + n_minus][act] = hyp.lambda2 / n_minus
        o += n_minus
    l_fea = 0.0
    if n_fea:
        hs = h[o : o + n_fea]
        hmu = h[o + n_fea : o + 2 * n_fea]
        term = -hmu + hyp.kappa * hs + L * np.sqrt(fea_trace) + hyp.eps_fea
        act = term > 0
        l_fea = float(np.sum(np.maximum(term, 0.0))) / n_fea
        d_h[o : o + n_fea][act] = hyp.lambda3 * hyp.kappa / n_fea
        d_h[o + n_fea : o + 2 * n_fea][act] = -hyp.lambda3 / n_fea

    total = hyp.lambda1 * l_plus + hyp.lambda2 * l_minus + hyp.lambda3 * l_fea
    grads, _ = cbf.backward(cache, d_h)
    return l_plus, l_minus, l_fea, total, grads


def prepare_feasibility_rows(ensemble: PnnEnsemble, bufs: SafetyBuffers, kind: str):
    """Expand the feasibility buffer over ensemble members.

    Returns (enc(s), enc(mu_e(s, a)), tr of the state part of Sigma_e),
    stacked member-major; the ensemble is frozen input here.
    """
    ms, ps, ac = bufs.fea_arrays()
    if len(ms) == 0:
        return np.empty((0, 0)), np.empty((0, 0)), np.empty(0)
    n = ps.shape[1]
    X = np.concatenate([ms, ac], axis=1)
    enc_s = encode_state(kind, ps)
    s_rows, mu_rows, tr_rows = [], [], []
    for e in range(len(ensemble.members)):
        mean, var = ensemble.predict_raw(e, X)
        mu_phys = ps + mean[:, :n]
        s_rows.append(enc_s)
        mu_rows.append(encode_state(kind, mu_phys))
        tr_rows.append(var[:, :n].sum(axis=1))
    return np.concatenate(s_rows), np.concatenate(mu_rows), np.concatenate(tr_rows)


def train_cbf(
    cbf: LipschitzCbf,
    bufs: SafetyBuffers,
    ensemble: PnnEnsemble | None,
    hyp: CbfHyper,
    kind: str,
    steps: int,
    stream: RandomStream,
    batch_size: int = 256,
    lr: float = 3e-4,
):
    """Minibatch descent on the composite loss; the spectral-norm projection
    runs after every step. Returns a history with per-step losses and the
    product of certified layer norms."""
    safe = bufs.d_plus.to_array()
    unsafe = bufs.d_minus.to_array()
    safe_enc = encode_state(kind, safe) if len(safe) else np.empty((0, 0))
    unsafe_enc = encode_state(kind, unsafe) if len(unsafe) else np.empty((0, 0))
    if ensemble is not None and hyp.lambda3 > 0:
        fea_s, fea_mu, fea_tr = prepare_feasibility_rows(ensemble, bufs, kind)
    else:
        fea_s, fea_mu, fea_tr = np.empty((0, 0)), np.empty((0, 0)), np.empty(0)

    adam = Adam(lr=lr)
    params = cbf.net.params()
    history = {"loss": [], "cert_product": []}

    def batch(arr, k, sub):
        if len(arr) == 0:
            return arr
        if len(arr) <= batch_size:
            return arr
        idx = stream.child(sub, k).integers(0, len(arr), size=batch_size)
        return arr[idx]

    for k in range(steps):
        fi = (
            stream.child("fea", k).integers(0, len(fea_s), size=min(batch_size, len(fea_s)))
            if len(fea_s) > batch_size
            else slice(None)
        )
        _, _, _, total, grads = cbf_loss(
            cbf,
            batch(safe_enc, k, "safe"),
            batch(unsafe_enc, k, "unsafe"),
            fea_s[fi] if len(fea_s) else fea_s,
            fea_mu[fi] if len(fea_mu) else fea_mu,
            fea_tr[fi] if len(fea_tr) else fea_tr,
            hyp,
        )
        adam.step(params, grads)
        certs = cbf.renormalize()
        history["loss"].append(total)
        history["cert_product"].append(float(np.prod(certs)))
    return history


def save_cbf(cbf: LipschitzCbf, path) -> None:
    arrays = dict(cbf.net.params())
    for i, u in enumerate(cbf._u):
        arrays[f"u{i}"] = u
    meta = {
        "in_dim": cbf.net.sizes[0],
        "hidden": cbf.net.sizes[1:-1],
        "lipschitz_bound": cbf.lipschitz_bound,
    }
    save_checkpoint(path, "lipschitz_cbf", meta, arrays)


def load_cbf(path) -> LipschitzCbf:
    kind, meta, arrays = load_checkpoint(path)
    if kind != "lipschitz_cbf":
        raise ValueError(f"expected a lipschitz_cbf checkpoint, got {kind!r}")
    cbf = LipschitzCbf(meta["in_dim"], meta["hidden"], meta["lipschitz_bound"])
    cbf.net.set_params({k: v for k, v in arrays.items() if k[0] in "Wb"})
    cbf._u = [arrays[f"u{i}"].copy() for i in range(cbf.net.n_layers)]
    cbf.certified_norms = cbf.renormalize()
    return cbf


def save_classifier(clf, path) -> None:
    meta = {"in_dim": clf.net.sizes[0], "hidden": clf.net.sizes[1:-1]}
    save_checkpoint(path, "safety_classifier", meta, dict(clf.net.params()))


def load_classifier(path):
    from .neural import SafetyClassifier

    kind, meta, arrays = load_checkpoint(path)
    if kind != "safety_classifier":
        raise ValueError(f"expected a safety_classifier checkpoint, got {kind!r}")
    clf = SafetyClassifier(meta["in_dim"], meta["hidden"])
    clf.net.set_params(arrays)
    return clf


# ---------------------------------------------------------------------------
# baseline safety classifier


def train_classifier(
    clf,
    bufs: SafetyBuffers,
    kind: str,
    steps: int,
    stream: RandomStream,
    batch_size: int = 256,
    lr: float = 1e-3,
):
    """Binary cross-entropy on safe (0) / unsafe (1) sensor labels."""
    safe = bufs.d_plus.to_array()
    unsafe = bufs.d_minus.to_array()
    if len(safe) == 0 or len(unsafe) == 0:
        return None
    X = np.concatenate([encode_state(kind, safe), encode_state(kind, unsafe)])
    y = np.concatenate([np.zeros(len(safe)), np.ones(len(unsafe))])
    adam = Adam(lr=lr)
    params = clf.net.params()
    losses = []
    for k in range(steps):
        idx = stream.child("batch", k).integers(0, len(X), size=min(batch_size, len(X)))
        loss, grads = clf.bce(X[idx], y[idx])
        adam.step(params, grads)
        losses.append(loss)
    return {"loss": losses}
