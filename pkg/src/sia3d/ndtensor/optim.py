"""Parameter updates: AdamW step, global-norm clipping, cosine schedule."""

import numpy as np

__all__ = ["adamw_step", "AdamW", "clip_grad_global_norm", "cosine_lr"]


def adamw_step(params, grads, lr, weight_decay, betas, eps, state):
    """One decoupled-weight-decay Adam update, in place.

    state is a dict carrying "t" (step count) and per-parameter first/second
    moments under keys ("m", i) and ("v", i).  Parameters with grad None are
    skipped entirely (no decay, no moment update).
    """
    if lr <= 0:
        raise ValueError(f"adamw_step: lr must be positive, got {lr}")
    b1, b2 = betas
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m = state.get(("m", i))
        v = state.get(("v", i))
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state[("m", i)] = m
        state[("v", i)] = v
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        if weight_decay:
            p.data -= (lr * weight_decay) * p.data
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype, copy=False)


class AdamW:
    """AdamW over a fixed parameter list, with serializable state."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = {"t": 0}

    def step(self, lr=None):
        grads = [p.grad for p in self.params]
        adamw_step(self.params, grads, lr if lr is not None else self.lr,
                   self.weight_decay, self.betas, self.eps, self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self):
        """Flat name->array view of the moment state, for checkpointing."""
        out = {"t": np.asarray([self.state.get("t", 0)], dtype=np.int64)}
        for i in range(len(self.params)):
            if ("m", i) in self.state:
                out[f"m{i}"] = self.state[("m", i)]
                out[f"v{i}"] = self.state[("v", i)]
        return out

    def load_state_arrays(self, arrays):
        self.state = {"t": int(arrays["t"][0])}
        for i in range(len(self.params)):
            if f"m{i}" in arrays:
                self.state[("m", i)] = arrays[f"m{i}"]
                self.state[("v", i)] = arrays[f"v{i}"]


def clip_grad_global_norm(params, max_norm):
    """Scale all grads so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def cosine_lr(step, total_steps, lr_init, lr_floor, warmup_frac=0.0):
    """Cosine annealing from lr_init to lr_floor, with optional linear warmup."""
    if total_steps <= 0 or step >= total_steps:
        return float(lr_floor)
    warm = int(warmup_frac * total_steps)
    if warm > 0 and step < warm:
        return float(lr_init * (step + 1) / warm)
    frac = (step - warm) / max(1, total_steps - warm)
    return float(lr_floor + 0.5 * (lr_init - lr_floor) * (1.0 + np.cos(np.pi * frac)))
