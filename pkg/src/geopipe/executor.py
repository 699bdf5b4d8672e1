"""Miniature numeric runtime: multi-worker forward/backward over a partitioned
DAG with explicit OpData messages, optional Top-K compression, and SGD updates.

Float64 everywhere so gradient checks against finite differences are meaningful;
wire-size *accounting* still follows the 4-byte model in `costmodel`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .compressor import CompressionPlan, topk_compress, topk_decompress
from .errors import (
    MissingActivationCache,
    NonFiniteLoss,
    ShapeMismatch,
    UnknownConsumer,
)
from .opdag import OpDag, OpData, OpNode, derive_bp_edges, topological_order
from .opfence import Schedule

# ---------------------------------------------------------------------------
# Operator kernels (hand-derived gradients)


def forward_op(kind: str, inputs: list, params: Optional[np.ndarray] = None) -> np.ndarray:
    if kind in ("placeholder", "input", "label"):
        return inputs[0]
    if kind in ("variable", "tensor"):
        return params
    if kind == "relu":
        (x,) = inputs
        return np.maximum(x, 0.0)
    if kind == "add":
        a, b = inputs
        try:
            return a + b
        except ValueError as e:
            raise ShapeMismatch(str(e))
    if kind == "linear":
        (x,) = inputs
        x2 = x.reshape(x.shape[0], -1)  # trailing dims flatten into features
        if x2.shape[1] != params.shape[1]:
            raise ShapeMismatch(f"linear: {x.shape} @ W{params.shape}.T")
        return x2 @ params.T
    if kind == "conv2d":
        (x,) = inputs
        return _conv2d_forward(x, params)
    if kind == "cross_entropy":
        logits, labels = _order_ce_inputs(inputs)
        return _cross_entropy_forward(logits, labels)
    raise ShapeMismatch(f"unknown operator kind {kind!r}")


def _order_ce_inputs(inputs):
    """Accept (logits, labels) in either arg order; labels are the 1-D input."""
    a, b = inputs
    if np.asarray(a).ndim == 1 and np.asarray(b).ndim == 2:
        return b, a
    return a, b


def backward_op(kind: str, upstream: np.ndarray, inputs: list, params=None):
    """Returns (per-input gradients, parameter gradient or None)."""
    if kind in ("placeholder", "input", "label"):
        return [np.zeros_like(inputs[0])], None
    if kind in ("variable", "tensor"):
        return [], upstream
    if kind == "relu":
        (x,) = inputs
        return [upstream * (x > 0)], None
    if kind == "add":
        a, b = inputs
        return [_unbroadcast(upstream, a.shape), _unbroadcast(upstream, b.shape)], None
    if kind == "linear":
        (x,) = inputs
        x2 = x.reshape(x.shape[0], -1)
        gx = (upstream @ params).reshape(x.shape)
        gw = upstream.T @ x2
        return [gx], gw
    if kind == "conv2d":
        (x,) = inputs
        return _conv2d_backward(x, params, upstream)
    if kind == "cross_entropy":
        logits, labels = _order_ce_inputs(inputs)
        grads, _ = _cross_entropy_backward(logits, labels, upstream)
        if np.asarray(inputs[0]).ndim == 1 and np.asarray(inputs[1]).ndim == 2:
            grads = [grads[1], grads[0]]
        return grads, None
    raise ShapeMismatch(f"unknown operator kind {kind!r}")


def _unbroadcast(grad, shape):
    """Sum a gradient down to the shape of a broadcast operand."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _conv2d_forward(x, w):
    """Direct convolution, stride 1, no padding. x: (B,Cin,H,W); w: (Cout,Cin,k,k)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d: x{x.shape} w{w.shape}")
    B, cin, H, W = x.shape
    cout, _, k, _ = w.shape
    oh, ow = H - k + 1, W - k + 1
    if oh < 1 or ow < 1:
        raise ShapeMismatch(f"conv2d: kernel {k} larger than input {H}x{W}")
    out = np.zeros((B, cout, oh, ow))
    for di in range(k):
        for dj in range(k):
            patch = x[:, :, di : di + oh, dj : dj + ow]
            out += np.einsum("bchw,oc->bohw", patch, w[:, :, di, dj])
    return out


def _conv2d_backward(x, w, up):
    B, cin, H, W = x.shape
    cout, _, k, _ = w.shape
    oh, ow = up.shape[2], up.shape[3]
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    for di in range(k):
        for dj in range(k):
            patch = x[:, :, di : di + oh, dj : dj + ow]
            gw[:, :, di, dj] = np.einsum("bohw,bchw->oc", up, patch)
            gx[:, :, di : di + oh, dj : dj + ow] += np.einsum(
                "bohw,oc->bchw", up, w[:, :, di, dj]
            )
    return [gx], gw


def _cross_entropy_forward(logits, labels):
    if logits.ndim != 2 or labels.ndim != 1 or logits.shape[0] != labels.shape[0]:
        raise ShapeMismatch(f"cross_entropy: logits{logits.shape} labels{labels.shape}")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return np.array(-logp[np.arange(len(labels)), labels.astype(int)].mean())


def _cross_entropy_backward(logits, labels, upstream):
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(labels)), labels.astype(int)] = 1.0
    g = float(upstream) * (p - onehot) / len(labels)
    return [g, np.zeros_like(labels, dtype=float)], None


# ---------------------------------------------------------------------------
# Parameters


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # Keyed by (seed, op name) so placement never changes initial weights.
    digest = hashlib.sha256(name.encode()).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


def init_param(node: OpNode, seed: int) -> Optional[np.ndarray]:
    rng = _param_rng(seed, node.name)
    a = node.attrs
    if node.kind == "linear":
        shape = (a["out_features"], a["in_features"])
    elif node.kind == "conv2d":
        shape = (a["out_channels"], a["in_channels"], a["kernel_size"], a["kernel_size"])
    elif node.kind == "tensor":
        shape = tuple(a["shape"]) if "shape" in a else (a["size"],)
    else:
        return None
    return rng.uniform(-0.1, 0.1, size=shape)


# ---------------------------------------------------------------------------
# Workers


@dataclass
class WorkerState:
    worker_id: object
    ops: set
    params: dict = field(default_factory=dict)          # op -> ndarray
    acti: dict = field(default_factory=dict)            # (op, mb) -> output
    inputs_cache: dict = field(default_factory=dict)    # (op, mb) -> input list
    grad_in: dict = field(default_factory=dict)         # (op, mb) -> summed upstream
    grad_acc: dict = field(default_factory=dict)        # op -> accumulated param grad
    inbox: dict = field(default_factory=dict)           # (producer or label, mb) -> payload
    sent: int = 0
    received: int = 0


def route_opdata(msg: OpData, schedule: Schedule):
    """Destination worker for a message; gradients go to the producer's owner."""
    target = msg.name if msg.actual_op_user is not None else msg.op_users[0]
    if target not in schedule.assignment:
        raise UnknownConsumer(target)
    return schedule.assignment[target]


def _maybe_compress(payload, link, plan: Optional[CompressionPlan]):
    if plan is None:
        return payload, None
    ratio = plan.ratio_for(*link)
    if ratio <= 1.0:
        return payload, None
    sp = topk_compress(np.asarray(payload).reshape(-1), ratio)
    return sp, np.asarray(payload).shape


def _maybe_decompress(payload, shape):
    if shape is None:
        return payload
    return topk_decompress(payload).reshape(shape)


class IterationRunner:
    """Drives one training iteration across in-process workers with per-link
    FIFO OpData channels, following the fill-drain pipeline order."""

    def __init__(self, dag: OpDag, schedule: Schedule, seed: int = 0,
                 compression_plan: Optional[CompressionPlan] = None):
        self.dag = dag
        self.schedule = schedule
        self.plan = compression_plan
        self.topo = topological_order(dag)
        self.bp_edges = derive_bp_edges(dag)
        self.workers: dict = {}
        for name, dev in schedule.assignment.items():
            w = self.workers.setdefault(dev, WorkerState(dev, set()))
            w.ops.add(name)
        for dev, w in self.workers.items():
            for name in sorted(w.ops):
                p = init_param(dag.nodes[name], seed)
                if p is not None:
                    w.params[name] = p
        self.local_iter = 0
        self.messages_sent = 0

    # -- message passing ----------------------------------------------------

    def _send_activation(self, producer: str, value, mb: int):
        """Deliver producer's output to every remote consumer device, once each."""
        src = self.schedule.assignment[producer]
        users = sorted(self.dag.consumers(producer))
        remote_devs = []
        for u in users:
            d = self.schedule.assignment[u]
            if d != src and d not in remote_devs:
                remote_devs.append(d)
        for dst in remote_devs:
            payload, shape = _maybe_compress(value, (src, dst), self.plan)
            msg = OpData(
                name=producer,
                op_users=[u for u in users if self.schedule.assignment[u] == dst],
                is_loss=self.dag.nodes[producer].op_type.value == "loss",
                require_grad=self.dag.nodes[producer].requires_grad,
                local_iter=self.local_iter,
                micro_batch=mb,
                compress_cfg=None if shape is None else {"algo": "topk", "shape": shape},
                payload=payload,
            )
            dest = self.workers[route_opdata(msg, self.schedule)]
            restored = _maybe_decompress(msg.payload, shape)
            dest.inbox[(producer, mb)] = restored
            dest.received += 1
            self.workers[src].sent += 1
            self.messages_sent += 1

    def _send_gradient(self, producer: str, consumer: str, grad, mb: int):
        src = self.schedule.assignment[consumer]
        dst = self.schedule.assignment[producer]
        if src == dst:
            return False
        payload, shape = _maybe_compress(grad, (src, dst), self.plan)
        msg = OpData(
            name=producer,
            op_users=[consumer],
            actual_op_user=consumer,
            require_grad=False,
            local_iter=self.local_iter,
            micro_batch=mb,
            compress_cfg=None if shape is None else {"algo": "topk", "shape": shape},
            payload=payload,
        )
        dest = self.workers[route_opdata(msg, self.schedule)]
        dest.inbox[(msg.grad_label, mb)] = _maybe_decompress(msg.payload, shape)
        dest.received += 1
        self.workers[src].sent += 1
        self.messages_sent += 1
        return True

    # -- phases --------------------------------------------------------------

    def _forward_micro_batch(self, mb: int, feeds: dict):
        for name in self.topo:
            node = self.dag.nodes[name]
            dev = self.schedule.assignment[name]
            w = self.workers[dev]
            inputs = []
            for arg in node.args:
                if self.schedule.assignment[arg] == dev:
                    inputs.append(w.acti[(arg, mb)])
                else:
                    if (arg, mb) not in w.inbox:
                        raise MissingActivationCache((arg, mb, dev))
                    inputs.append(w.inbox[(arg, mb)])
            if node.op_type.value == "placeholder":
                inputs = [feeds[name]]
            out = forward_op(node.kind, inputs, w.params.get(name))
            if not np.all(np.isfinite(out)):
                raise NonFiniteLoss(name)
            w.acti[(name, mb)] = out
            w.inputs_cache[(name, mb)] = inputs
            self._send_activation(name, out, mb)

    def _backward_micro_batch(self, mb: int):
        for name in reversed(self.topo):
            node = self.dag.nodes[name]
            dev = self.schedule.assignment[name]
            w = self.workers[dev]
            if node.op_type.value == "loss":
                upstream = np.array(1.0)
            else:
                consumers = sorted(
                    v for (v, u) in self.bp_edges if u == name
                )
                if not consumers:
                    continue        # nothing flows back into this node
                pieces = []
                for c in consumers:
                    cdev = self.schedule.assignment[c]
                    if cdev == dev:
                        pieces.append(w.grad_in.pop((name, mb, c)))
                    else:
                        key = (f"{name}-{c}", mb)
                        if key not in w.inbox:
                            raise MissingActivationCache(key)
                        pieces.append(w.inbox.pop(key))
                upstream = pieces[0]
                for p in pieces[1:]:
                    upstream = upstream + p
            if not node.requires_grad:
                continue
            if (name, mb) not in w.inputs_cache:
                raise MissingActivationCache((name, mb))
            inputs = w.inputs_cache[(name, mb)]
            in_grads, p_grad = backward_op(node.kind, upstream, inputs, w.params.get(name))
            if p_grad is not None:
                if name in w.grad_acc:
                    w.grad_acc[name] = w.grad_acc[name] + p_grad
                else:
                    w.grad_acc[name] = p_grad
            for arg, g in zip(node.args, in_grads):
                if not self.dag.nodes[arg].requires_grad:
                    continue
                adev = self.schedule.assignment[arg]
                if adev == dev:
                    w.grad_in[(arg, mb, name)] = g
                else:
                    self._send_gradient(arg, name, g, mb)

    def _drop_micro_batch_caches(self, mb: int):
        for w in self.workers.values():
            for key in [k for k in w.acti if k[1] == mb]:
                del w.acti[key]
            for key in [k for k in w.inputs_cache if k[1] == mb]:
                del w.inputs_cache[key]

    def run_iteration(self, batch: dict, n_b: int, lr: float = 0.1):
        """One fill-drain iteration; returns per-micro-batch losses.

        `batch` maps each placeholder name to its full-batch array; it must
        split evenly into n_b micro-batches along axis 0.
        """
        loss_names = sorted(
            n for n, node in self.dag.nodes.items() if node.op_type.value == "loss"
        )
        for name, arr in batch.items():
            if len(arr) % n_b != 0:
                raise ShapeMismatch(f"batch for {name} not divisible by n_b={n_b}")
        losses = []
        for mb in range(n_b):
            feeds = {}
            for name, arr in batch.items():
                step = len(arr) // n_b
                feeds[name] = arr[mb * step : (mb + 1) * step]
            self._forward_micro_batch(mb, feeds)
            loss = 0.0
            for ln in loss_names:
                w = self.workers[self.schedule.assignment[ln]]
                loss += float(w.acti[(ln, mb)])
            if not np.isfinite(loss):
                raise NonFiniteLoss(loss)
            losses.append(loss)
        for mb in range(n_b):
            self._backward_micro_batch(mb)
            self._drop_micro_batch_caches(mb)
        # Update: plain SGD on each worker's own parameters, grads averaged
        # over micro-batches.
        for w in self.workers.values():
            for name in sorted(w.grad_acc):
                w.params[name] = w.params[name] - lr * (w.grad_acc[name] / n_b)
        self.local_iter += 1
        return losses

    # -- inspection -----------------------------------------------------------

    def gradients(self) -> dict:
        """Accumulated parameter gradients (sum over micro-batches), by op name."""
        out = {}
        for w in self.workers.values():
            out.update(w.grad_acc)
        return dict(sorted(out.items()))

    def parameters(self) -> dict:
        out = {}
        for w in self.workers.values():
            out.update(w.params)
        return dict(sorted(out.items()))

    def zero_grad(self):
        for w in self.workers.values():
            w.grad_acc.clear()


def run_iteration(dag, schedule, batch, n_b, compression_plan=None, lr=0.1, seed=0):
    """Convenience wrapper: build workers, run one iteration, return results."""
    runner = IterationRunner(dag, schedule, seed=seed, compression_plan=compression_plan)
    losses = runner.run_iteration(batch, n_b, lr=lr)
    return losses, runner
