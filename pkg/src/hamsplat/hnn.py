"""Latent phase-space deformation decoder.

An MLP baseline maps hex-plane features to a W-dimensional latent state h
treated as generalized (q, p) coordinates with d = W/2 degrees of freedom.
Two scalar potentials generate the deformation field through in-graph
gradients:

    v_c = grad_h F1(h)                 (curl-free / conservative)
    v_s = grad_h F2(h) @ M^T           (divergence-free / solenoidal)
    M   = [[0, I_d], [-I_d, 0]]

and bias-free linear adapters map the combined field v = v_c + v_s to
per-attribute offsets.  The force driving the Verlet position update is the
conservative component passed through the position adapter (unit mass).

The classic canonical-coordinate training loss used for standalone
validation of the mechanism lives here as well.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class DecoderConfig:
    in_dim: int
    depth: int = 2
    width: int = 64
    head_hidden: int = 0          # 0 -> same as width
    rot_adapter_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.width % 2 != 0:
            raise ValueError(f"latent width must be even, got {self.width}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.head_hidden == 0:
            self.head_hidden = self.width

    @property
    def dof(self) -> int:
        return self.width // 2


def symplectic_matrix(width: int) -> np.ndarray:
    """Block permutation [[0, I], [-I, 0]] for an even latent width."""
    if width % 2 != 0:
        raise ValueError(f"symplectic matrix needs an even width, got {width}")
    d = width // 2
    m = np.zeros((width, width))
    m[:d, d:] = np.eye(d)
    m[d:, :d] = -np.eye(d)
    return m


class Mlp:
    """Plain fully-connected stack used for the baseline and the potentials."""

    def __init__(self, dims, activation: str = "relu", rng=None, final_zero: bool = False,
                 prefix: str = "mlp"):
        rng = rng or np.random.default_rng(0)
        self.activation = activation
        self.prefix = prefix
        self.weights: list[ad.Tensor] = []
        self.biases: list[ad.Tensor] = []
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            scale = np.sqrt(2.0 / din) if activation == "relu" else np.sqrt(1.0 / din)
            w = rng.normal(scale=scale, size=(din, dout))
            if final_zero and i == len(dims) - 2:
                w = np.zeros((din, dout))
            self.weights.append(ad.leaf(w))
            self.biases.append(ad.leaf(np.zeros(dout)))

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        act = ad.relu if self.activation == "relu" else ad.tanh
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = ad.matmul(x, w) + b
            if i < len(self.weights) - 1:
                x = act(x)
        return x

    def params(self):
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{self.prefix}{i}.w", w))
            out.append((f"{self.prefix}{i}.b", b))
        return out

    def set_param(self, name: str, tensor: ad.Tensor) -> None:
        rest = name[len(self.prefix):]
        layer = int(rest.split(".")[0])
        if name.endswith(".w"):
            self.weights[layer] = tensor
        else:
            self.biases[layer] = tensor


class DeformDecoder:
    """MLP baseline + two potential heads + three attribute adapters."""

    def __init__(self, cfg: DecoderConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        w = cfg.width
        mlp_dims = [cfg.in_dim] + [w] * cfg.depth
        self.mlp = Mlp(mlp_dims, activation="relu", rng=rng, prefix="mlp")
        self.f1 = Mlp([w, cfg.head_hidden, 1], activation="tanh", rng=rng, prefix="f1.")
        self.f2 = Mlp([w, cfg.head_hidden, 1], activation="tanh", rng=rng, prefix="f2.")
        # zero-initialized position/scale adapters: no field, no motion at start
        self.adapt_mu = ad.leaf(np.zeros((w, 3)))
        self.adapt_s = ad.leaf(np.zeros((w, 3)))
        self.adapt_r = ad.leaf(rng.normal(scale=cfg.rot_adapter_scale, size=(w, 4))
                               if cfg.rot_adapter_scale > 0 else np.zeros((w, 4)))
        self._m_t = ad.constant(symplectic_matrix(w).T)

    # -- parameter registry -------------------------------------------------
    def params(self) -> list[tuple[str, ad.Tensor]]:
        out = list(self.mlp.params()) + list(self.f1.params()) + list(self.f2.params())
        out += [("adapt_mu", self.adapt_mu), ("adapt_s", self.adapt_s),
                ("adapt_r", self.adapt_r)]
        return out

    def set_param(self, name: str, tensor: ad.Tensor) -> None:
        if name.startswith("mlp"):
            self.mlp.set_param(name, tensor)
        elif name.startswith("f1."):
            self.f1.set_param(name, tensor)
        elif name.startswith("f2."):
            self.f2.set_param(name, tensor)
        elif name in ("adapt_mu", "adapt_s", "adapt_r"):
            setattr(self, name, tensor)
        else:
            raise KeyError(name)

    def zero_heads(self) -> None:
        """Zero both potentials and all adapters; the decoder becomes inert."""
        for head in (self.f1, self.f2):
            head.weights = [ad.leaf(np.zeros(w.shape)) for w in head.weights]
            head.biases = [ad.leaf(np.zeros(b.shape)) for b in head.biases]
        self.adapt_mu = ad.leaf(np.zeros(self.adapt_mu.shape))
        self.adapt_s = ad.leaf(np.zeros(self.adapt_s.shape))
        self.adapt_r = ad.leaf(np.zeros(self.adapt_r.shape))

    # -- forward pieces -------------------------------------------------------
    def latent(self, f) -> ad.Tensor:
        """Latent phase-space coordinates h for a (B, in_dim) feature batch."""
        f = ad.as_tensor(f)
        if f.ndim != 2 or f.shape[1] != self.cfg.in_dim:
            raise ad.ShapeError("latent", f.shape, (None, self.cfg.in_dim))
        return self.mlp(f)

    def vector_fields(self, h: ad.Tensor):
        """(v_c, v_s, v) at latent states h (B, W); all stay differentiable."""
        h = ad.as_tensor(h)
        if h.ndim != 2 or h.shape[1] != self.cfg.width:
            raise ad.ShapeError("vector_fields", h.shape, (None, self.cfg.width))
        if not h.requires_grad:
            # a raw query point still needs to sit on the tape for grad_h
            h = ad.leaf(h.data)
        s1 = ad.tsum(self.f1(h))
        v_c = ad.grad(s1, [h], create_graph=True)[h]
        s2 = ad.tsum(self.f2(h))
        g2 = ad.grad(s2, [h], create_graph=True)[h]
        v_s = ad.matmul(g2, self._m_t)
        return v_c, v_s, v_c + v_s

    def deform(self, v: ad.Tensor):
        """Adapter outputs (dmu, ds, dr) for a combined field batch (B, W)."""
        v = ad.as_tensor(v)
        return (ad.matmul(v, self.adapt_mu), ad.matmul(v, self.adapt_s),
                ad.matmul(v, self.adapt_r))

    def force(self, h: ad.Tensor) -> ad.Tensor:
        """Acceleration A_mu(v_c): the conservative field through the position adapter."""
        v_c, _, _ = self.vector_fields(h)
        return ad.matmul(v_c, self.adapt_mu)

    def force_from(self, v_c: ad.Tensor) -> ad.Tensor:
        return ad.matmul(v_c, self.adapt_mu)


# ---------------------------------------------------------------------------
# canonical-coordinate validation path
# ---------------------------------------------------------------------------

def canonical_loss(h_net, q, p, dq_dt, dp_dt) -> ad.Tensor:
    """||dH/dp - dq/dt||_2 + ||dH/dq + dp/dt||_2 for one (q, p) sample.

    ``h_net`` maps a (1, 2d) tensor to a scalar energy; the loss is built
    from its in-graph input gradient, so minimizing it trains the net.
    """
    q = np.atleast_1d(np.asarray(q, dtype=np.float64))
    p = np.atleast_1d(np.asarray(p, dtype=np.float64))
    dq = np.atleast_1d(np.asarray(dq_dt, dtype=np.float64))
    dp = np.atleast_1d(np.asarray(dp_dt, dtype=np.float64))
    d = q.shape[0]
    qp = ad.leaf(np.concatenate([q, p])[None, :])
    energy = ad.tsum(h_net(qp))
    g = ad.grad(energy, [qp], create_graph=True)[qp]
    dh_dq = g[0, :d]
    dh_dp = g[0, d:]
    r1 = dh_dp - ad.constant(dq)
    r2 = dh_dq + ad.constant(dp)
    return ad.sqrt(ad.tsum(r1 * r1)) + ad.sqrt(ad.tsum(r2 * r2))


def canonical_loss_batch(h_net, qp: ad.Tensor, dqp: ad.Tensor) -> ad.Tensor:
    """Mean canonical loss over a (B, 2d) batch of states and derivatives."""
    if not qp.requires_grad:
        qp = ad.leaf(qp.data)
    b, two_d = qp.shape
    d = two_d // 2
    energy = ad.tsum(h_net(qp))
    g = ad.grad(energy, [qp], create_graph=True)[qp]
    r1 = g[:, d:] - dqp[:, :d]
    r2 = g[:, :d] + dqp[:, d:]
    n1 = ad.sqrt(ad.tsum(r1 * r1, axis=1) + 1e-30)
    n2 = ad.sqrt(ad.tsum(r2 * r2, axis=1) + 1e-30)
    return ad.mean(n1 + n2)


def hamiltonian_field(h_net, qp: np.ndarray) -> np.ndarray:
    """Symplectic field (dH/dp, -dH/dq) of a trained energy net at (B, 2d)."""
    d = qp.shape[1] // 2
    x = ad.leaf(qp)
    g = ad.grad(ad.tsum(h_net(x)), [x], create_graph=True)[x].data
    return np.concatenate([g[:, d:], -g[:, :d]], axis=1)


def fit_canonical(h_net, qp: np.ndarray, dqp: np.ndarray, steps: int, lr: float = 1e-3,
                  batch: int = 0) -> float:
    """Adam-train an energy net on sampled transitions; returns the final loss."""
    params = [t for _, t in h_net.params()]
    names = [n for n, _ in h_net.params()]
    states = {n: ad.AdamState.for_param(t) for n, t in zip(names, params)}
    qp_t = ad.constant(qp)
    dqp_t = ad.constant(dqp)
    loss_val = np.inf
    for _ in range(steps):
        loss = canonical_loss_batch(h_net, qp_t, dqp_t)
        grads = ad.grad(loss, params)
        new_params = []
        for n, t in zip(names, params):
            nt = ad.adam_step(t, grads[t], states[n], lr)
            h_net.set_param(n, nt)
            new_params.append(nt)
        params = new_params
        loss_val = loss.item()
    return loss_val


def fit_vector_field(net, qp: np.ndarray, dqp: np.ndarray, steps: int, lr: float = 1e-3) -> float:
    """Adam-train an unconstrained field net (2d -> 2d) on the same data."""
    params = [t for _, t in net.params()]
    names = [n for n, _ in net.params()]
    states = {n: ad.AdamState.for_param(t) for n, t in zip(names, params)}
    qp_t = ad.constant(qp)
    dqp_t = ad.constant(dqp)
    d = qp.shape[1] // 2
    loss_val = np.inf
    for _ in range(steps):
        pred = net(qp_t)
        r1 = pred[:, :d] - dqp_t[:, :d]
        r2 = pred[:, d:] - dqp_t[:, d:]
        n1 = ad.sqrt(ad.tsum(r1 * r1, axis=1) + 1e-30)
        n2 = ad.sqrt(ad.tsum(r2 * r2, axis=1) + 1e-30)
        loss = ad.mean(n1 + n2)
        grads = ad.grad(loss, params)
        new_params = []
        for n, t in zip(names, params):
            nt = ad.adam_step(t, grads[t], states[n], lr)
            net.set_param(n, nt)
            new_params.append(nt)
        params = new_params
        loss_val = loss.item()
    return loss_val
