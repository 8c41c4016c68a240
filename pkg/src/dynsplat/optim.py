"""Adam over a flat dict of named parameter arrays."""
from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-15, lr_mult=None):
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.lr_mult = dict(lr_mult or {})
        self.m: dict = {}
        self.v: dict = {}
        self.t: dict = {}

    def group_lr(self, name):
        """``lr_mult`` is looked up by full name, then by the prefix before the first dot."""
        mult = self.lr_mult.get(name)
        if mult is None:
            mult = self.lr_mult.get(name.split(".", 1)[0], 1.0)
        return self.lr * mult

    def step(self, params: dict, grads: dict) -> dict:
        """Updated copies of the parameters that have a gradient."""
        out = dict(params)
        for k, g in grads.items():
            p = params[k]
            m = self.m.get(k)
            if m is None or m.shape != p.shape:
                m = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
                self.t[k] = 0
            v = self.v[k]
            self.t[k] += 1
            t = self.t[k]
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.b1 ** t)
            vhat = v / (1 - self.b2 ** t)
            out[k] = p - self.group_lr(k) * mhat / (np.sqrt(vhat) + self.eps)
        return out

    def remap_rows(self, names, source, fresh):
        """Carry per-row moments through densification; new rows start at zero."""
        for k in names:
            if k in self.m:
                for st in (self.m, self.v):
                    a = st[k][source].copy()
                    a[fresh] = 0.0
                    st[k] = a

    def state(self) -> dict:
        step = max(self.t.values()) if self.t else 0
        return {"step": step, "m": dict(self.m), "v": dict(self.v), "t": dict(self.t)}

    def load_state(self, st: dict) -> None:
        self.m = {k: np.array(v) for k, v in st.get("m", {}).items()}
        self.v = {k: np.array(v) for k, v in st.get("v", {}).items()}
        t = st.get("t")
        self.t = dict(t) if t else {k: int(st.get("step", 0)) for k in self.m}
