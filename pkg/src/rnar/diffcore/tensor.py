"""Dense tensors and a reverse-mode computation record.

Every differentiable computation in this package is recorded on a Graph: a
flat, append-ordered tape of operation nodes. Each node stores the numpy
output array plus whatever activations its backward rule needs. Gradients
flow only into named ParamStore entries; ordinary constants are opaque data.

Broadcasting is deliberately narrow: the second operand of add/mul may have a
shape equal to a trailing suffix of the first operand's shape (covers biases
and per-row scales), nothing else. Structural ops (reshape, transpose,
expand-axis, take-along-axis) cover the remaining plumbing, and lstm-sweep is
a fused recurrent reduction with a hand-written backward pass, verified by
the finite-difference suite like every other kind.
"""

from __future__ import annotations

import numpy as np

from .precision import active_dtype


class DiffcoreError(Exception):
    pass


class ShapeError(DiffcoreError):
    pass


class NonFiniteError(DiffcoreError):
    pass


class Tensor:
    """Handle to one node's output on a Graph."""

    __slots__ = ("graph", "node_id", "data")

    def __init__(self, graph: "Graph", node_id: int, data: np.ndarray):
        self.graph = graph
        self.node_id = node_id
        self.data = data

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, node={self.node_id})"


class _Node:
    __slots__ = ("kind", "inputs", "output", "saved", "param_name")

    def __init__(self, kind, inputs, output, saved=None, param_name=None):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.saved = saved or {}
        self.param_name = param_name


def _suffix_broadcast_ok(a_shape: tuple, b_shape: tuple) -> bool:
    if len(b_shape) > len(a_shape):
        return False
    return a_shape[len(a_shape) - len(b_shape):] == b_shape


def _reduce_to_suffix(grad: np.ndarray, b_shape: tuple) -> np.ndarray:
    lead = grad.ndim - len(b_shape)
    if lead == 0:
        return grad
    return grad.sum(axis=tuple(range(lead)))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Graph:
    """Append-ordered computation record over one ParamStore.

    Single-threaded per record; several records may share a frozen store.
    """

    OP_KINDS = (
        "matmul", "add", "mul", "concat", "slice",
        "sum-over-axis", "max-over-axis", "mean-over-axis",
        "sigmoid", "tanh", "relu", "softmax-over-axis",
        "log", "square", "select-by-mask",
        # structural / fused extensions, same gradient-verification contract
        "reshape", "transpose", "expand-axis", "take-along-axis", "lstm-sweep",
    )

    def __init__(self, store=None):
        self.store = store
        self.nodes: list[_Node] = []
        self.dtype = active_dtype()

    # ---- leaves ------------------------------------------------------

    def constant(self, value) -> Tensor:
        arr = np.asarray(value, dtype=self.dtype)
        return self._record("constant", (), arr, check=False)

    def param(self, name: str) -> Tensor:
        if self.store is None:
            raise DiffcoreError("graph has no ParamStore; cannot reference parameters")
        arr = self.store.value(name)
        if arr.dtype != self.dtype:
            raise DiffcoreError(
                f"param {name!r} dtype {arr.dtype} does not match graph dtype {self.dtype}")
        return self._record("param", (), arr, param_name=name, check=False)

    # ---- bookkeeping -------------------------------------------------

    def _record(self, kind, input_ids, output, saved=None, param_name=None, check=True):
        if check and not np.isfinite(output).all():
            raise NonFiniteError(f"op {kind!r} produced non-finite values")
        node = _Node(kind, input_ids, output, saved, param_name)
        self.nodes.append(node)
        return Tensor(self, len(self.nodes) - 1, output)

    def _ids(self, *tensors) -> tuple:
        for t in tensors:
            if t.graph is not self:
                raise DiffcoreError("tensor belongs to a different graph")
        return tuple(t.node_id for t in tensors)

    def activation_count(self) -> int:
        """Total recorded elements (outputs plus saved activations)."""
        total = 0
        for node in self.nodes:
            total += node.output.size
            for v in node.saved.values():
                if isinstance(v, np.ndarray):
                    total += v.size
                elif isinstance(v, (list, tuple)):
                    total += sum(x.size for x in v if isinstance(x, np.ndarray))
        return total

    # ---- op kinds ----------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        x, y = a.data, b.data
        if x.ndim < 2 or y.ndim < 2:
            raise ShapeError(f"matmul needs ndim >= 2 operands, got {x.shape} and {y.shape}")
        if y.ndim == 2:
            if x.shape[-1] != y.shape[0]:
                raise ShapeError(f"matmul inner mismatch: {x.shape} vs {y.shape}")
        else:
            if x.ndim != y.ndim or x.shape[:-2] != y.shape[:-2] or x.shape[-1] != y.shape[-2]:
                raise ShapeError(f"batched matmul mismatch: {x.shape} vs {y.shape}")
        out = np.matmul(x, y)
        return self._record("matmul", self._ids(a, b), out)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if not _suffix_broadcast_ok(a.shape, b.shape):
            raise ShapeError(f"add: {b.shape} is not a trailing suffix of {a.shape}")
        return self._record("add", self._ids(a, b), a.data + b.data)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if not _suffix_broadcast_ok(a.shape, b.shape):
            raise ShapeError(f"mul: {b.shape} is not a trailing suffix of {a.shape}")
        return self._record("mul", self._ids(a, b), a.data * b.data)

    def concat(self, tensors, axis: int) -> Tensor:
        if not tensors:
            raise ShapeError("concat of zero tensors")
        shapes = [t.shape for t in tensors]
        base = list(shapes[0])
        for s in shapes[1:]:
            if len(s) != len(base) or any(s[d] != base[d] for d in range(len(base)) if d != axis % len(base)):
                raise ShapeError(f"concat shapes incompatible along axis {axis}: {shapes}")
        out = np.concatenate([t.data for t in tensors], axis=axis)
        sizes = [t.shape[axis] for t in tensors]
        return self._record("concat", self._ids(*tensors), out,
                            saved={"axis": axis, "sizes": sizes})

    def slice_axis(self, a: Tensor, axis: int, start: int, stop: int) -> Tensor:
        index = [np.s_[:]] * a.ndim
        index[axis] = np.s_[start:stop]
        out = a.data[tuple(index)].copy()
        return self._record("slice", self._ids(a), out,
                            saved={"axis": axis, "start": start, "stop": stop,
                                   "in_shape": a.shape})

    def sum_over_axis(self, a: Tensor, axis: int) -> Tensor:
        out = a.data.sum(axis=axis)
        return self._record("sum-over-axis", self._ids(a), out,
                            saved={"axis": axis, "extent": a.shape[axis]})

    def max_over_axis(self, a: Tensor, axis: int) -> Tensor:
        # np.argmax takes the first maximum: ties route the subgradient to the
        # lowest index, keeping backward deterministic.
        idx = np.argmax(a.data, axis=axis)
        out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
        return self._record("max-over-axis", self._ids(a), out,
                            saved={"axis": axis, "argmax": idx, "in_shape": a.shape})

    def mean_over_axis(self, a: Tensor, axis: int) -> Tensor:
        out = a.data.mean(axis=axis)
        return self._record("mean-over-axis", self._ids(a), out,
                            saved={"axis": axis, "extent": a.shape[axis]})

    def sigmoid(self, a: Tensor) -> Tensor:
        out = _stable_sigmoid(a.data)
        return self._record("sigmoid", self._ids(a), out, saved={"out": out})

    def tanh(self, a: Tensor) -> Tensor:
        out = np.tanh(a.data)
        return self._record("tanh", self._ids(a), out, saved={"out": out})

    def relu(self, a: Tensor) -> Tensor:
        out = np.maximum(a.data, 0)
        return self._record("relu", self._ids(a), out, saved={"pos": a.data > 0})

    def softmax_over_axis(self, a: Tensor, axis: int) -> Tensor:
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        ex = np.exp(shifted)
        out = ex / ex.sum(axis=axis, keepdims=True)
        return self._record("softmax-over-axis", self._ids(a), out,
                            saved={"axis": axis, "out": out})

    def log(self, a: Tensor) -> Tensor:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(a.data)
        return self._record("log", self._ids(a), out, saved={"in": a.data})

    def square(self, a: Tensor) -> Tensor:
        return self._record("square", self._ids(a), a.data ** 2, saved={"in": a.data})

    def select_by_mask(self, a: Tensor, b: Tensor, mask: Tensor) -> Tensor:
        """Elementwise mask ? a : b. The mask is data, not a gradient path."""
        if mask.shape != a.shape:
            raise ShapeError(f"select-by-mask: mask {mask.shape} must match {a.shape}")
        if not _suffix_broadcast_ok(a.shape, b.shape):
            raise ShapeError(f"select-by-mask: {b.shape} is not a trailing suffix of {a.shape}")
        m = mask.data
        out = m * a.data + (1.0 - m) * b.data
        return self._record("select-by-mask", self._ids(a, b, mask), out,
                            saved={"mask": m, "b_shape": b.shape})

    def reshape(self, a: Tensor, shape) -> Tensor:
        out = a.data.reshape(shape)
        return self._record("reshape", self._ids(a), out, saved={"in_shape": a.shape})

    def transpose(self, a: Tensor, axes) -> Tensor:
        out = np.transpose(a.data, axes).copy()
        return self._record("transpose", self._ids(a), out, saved={"axes": tuple(axes)})

    def expand_axis(self, a: Tensor, axis: int, size: int) -> Tensor:
        out = np.repeat(np.expand_dims(a.data, axis), size, axis=axis)
        return self._record("expand-axis", self._ids(a), out, saved={"axis": axis})

    def take_along(self, a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
        indices = np.asarray(indices)
        if indices.ndim != a.ndim:
            raise ShapeError(
                f"take-along-axis: indices ndim {indices.ndim} != tensor ndim {a.ndim}")
        out = np.take_along_axis(a.data, indices, axis=axis)
        return self._record("take-along-axis", self._ids(a), out,
                            saved={"axis": axis, "indices": indices, "in_shape": a.shape})

    def lstm_sweep(self, messages: Tensor, w: Tensor, b: Tensor,
                   step_mask: np.ndarray) -> Tensor:
        """Run an LSTM over the sender axis of an ordered message block.

        messages: (B, R, S, m) — S ordered sender steps per receiver.
        w: (2m, 4m) stacked input/recurrent weights, gate order (i, f, g, o).
        b: (4m,) bias. step_mask: (B, S) with 1 where the sender step is real;
        masked steps leave hidden and cell state untouched, so the output is
        the state after each row's last valid step. Returns (B, R, m).
        """
        M, W, bias = messages.data, w.data, b.data
        if M.ndim != 4:
            raise ShapeError(f"lstm-sweep expects (B,R,S,m) messages, got {M.shape}")
        Bsz, R, S, m = M.shape
        if W.shape != (2 * m, 4 * m) or bias.shape != (4 * m,):
            raise ShapeError(
                f"lstm-sweep weights {W.shape}/{bias.shape} do not fit message dim {m}")
        if S == 0:
            raise ShapeError("lstm-sweep over an empty message list")
        step_mask = np.asarray(step_mask, dtype=M.dtype)
        if step_mask.shape != (Bsz, S):
            raise ShapeError(f"lstm-sweep step mask {step_mask.shape} != {(Bsz, S)}")

        h = np.zeros((Bsz, R, m), dtype=M.dtype)
        c = np.zeros((Bsz, R, m), dtype=M.dtype)
        saved_steps = []
        for t in range(S):
            x = M[:, :, t, :]
            z = np.concatenate([x, h], axis=-1) @ W + bias
            i = _stable_sigmoid(z[..., :m])
            f = _stable_sigmoid(z[..., m:2 * m])
            g = np.tanh(z[..., 2 * m:3 * m])
            o = _stable_sigmoid(z[..., 3 * m:])
            c_new = f * c + i * g
            tc = np.tanh(c_new)
            h_new = o * tc
            mk = step_mask[:, None, t:t + 1]
            saved_steps.append((h, c, i, f, g, o, tc, mk))
            c = mk * c_new + (1.0 - mk) * c
            h = mk * h_new + (1.0 - mk) * h
        return self._record("lstm-sweep", self._ids(messages, w, b), h,
                            saved={"steps": saved_steps, "m": m, "in_shape": M.shape})

    # ---- dispatch ----------------------------------------------------

    def forward_op(self, kind: str, inputs, **attrs) -> Tensor:
        """Uniform dispatch over the registered op kinds."""
        ops = {
            "matmul": lambda: self.matmul(*inputs),
            "add": lambda: self.add(*inputs),
            "mul": lambda: self.mul(*inputs),
            "concat": lambda: self.concat(inputs, attrs["axis"]),
            "slice": lambda: self.slice_axis(inputs[0], attrs["axis"],
                                             attrs["start"], attrs["stop"]),
            "sum-over-axis": lambda: self.sum_over_axis(inputs[0], attrs["axis"]),
            "max-over-axis": lambda: self.max_over_axis(inputs[0], attrs["axis"]),
            "mean-over-axis": lambda: self.mean_over_axis(inputs[0], attrs["axis"]),
            "sigmoid": lambda: self.sigmoid(inputs[0]),
            "tanh": lambda: self.tanh(inputs[0]),
            "relu": lambda: self.relu(inputs[0]),
            "softmax-over-axis": lambda: self.softmax_over_axis(inputs[0], attrs["axis"]),
            "log": lambda: self.log(inputs[0]),
            "square": lambda: self.square(inputs[0]),
            "select-by-mask": lambda: self.select_by_mask(*inputs),
            "reshape": lambda: self.reshape(inputs[0], attrs["shape"]),
            "transpose": lambda: self.transpose(inputs[0], attrs["axes"]),
            "expand-axis": lambda: self.expand_axis(inputs[0], attrs["axis"], attrs["size"]),
            "take-along-axis": lambda: self.take_along(inputs[0], attrs["indices"],
                                                       attrs["axis"]),
            "lstm-sweep": lambda: self.lstm_sweep(*inputs, step_mask=attrs["step_mask"]),
        }
        if kind not in ops:
            raise DiffcoreError(f"unknown op kind {kind!r}; known: {sorted(ops)}")
        return ops[kind]()

    # ---- reverse pass ------------------------------------------------

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(param) into the store for every parameter leaf.

        Gradients add up across calls until ParamStore.zero_grads().
        """
        if loss.graph is not self:
            raise DiffcoreError("loss tensor belongs to a different graph")
        if loss.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

        grads: dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=self.dtype)}
        for nid in range(loss.node_id, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.kind == "param":
                self.store.grad(node.param_name)[...] += g
                continue
            if node.kind == "constant":
                continue
            for iid, ig in zip(node.inputs, self._backward_node(node, g)):
                if ig is None:
                    continue
                if iid in grads:
                    grads[iid] += ig
                else:
                    grads[iid] = ig

    def _backward_node(self, node: _Node, g: np.ndarray):
        kind, s = node.kind, node.saved
        if kind == "matmul":
            x = self.nodes[node.inputs[0]].output
            y = self.nodes[node.inputs[1]].output
            if y.ndim == 2:
                gx = np.matmul(g, y.T)
                gy = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gx = np.matmul(g, np.swapaxes(y, -1, -2))
                gy = np.matmul(np.swapaxes(x, -1, -2), g)
            return gx, gy
        if kind == "add":
            b_shape = self.nodes[node.inputs[1]].output.shape
            return g, _reduce_to_suffix(g, b_shape)
        if kind == "mul":
            x = self.nodes[node.inputs[0]].output
            y = self.nodes[node.inputs[1]].output
            return g * y, _reduce_to_suffix(g * x, y.shape)
        if kind == "concat":
            splits = np.cumsum(s["sizes"])[:-1]
            return tuple(np.ascontiguousarray(p)
                         for p in np.split(g, splits, axis=s["axis"]))
        if kind == "slice":
            ga = np.zeros(s["in_shape"], dtype=g.dtype)
            index = [np.s_[:]] * len(s["in_shape"])
            index[s["axis"]] = np.s_[s["start"]:s["stop"]]
            ga[tuple(index)] = g
            return (ga,)
        if kind == "sum-over-axis":
            return (np.repeat(np.expand_dims(g, s["axis"]), s["extent"], axis=s["axis"]),)
        if kind == "mean-over-axis":
            return (np.repeat(np.expand_dims(g, s["axis"]), s["extent"],
                              axis=s["axis"]) / s["extent"],)
        if kind == "max-over-axis":
            ga = np.zeros(s["in_shape"], dtype=g.dtype)
            np.put_along_axis(ga, np.expand_dims(s["argmax"], s["axis"]),
                              np.expand_dims(g, s["axis"]), axis=s["axis"])
            return (ga,)
        if kind == "sigmoid":
            y = s["out"]
            return (g * y * (1.0 - y),)
        if kind == "tanh":
            y = s["out"]
            return (g * (1.0 - y * y),)
        if kind == "relu":
            return (g * s["pos"],)
        if kind == "softmax-over-axis":
            y, axis = s["out"], s["axis"]
            dot = (g * y).sum(axis=axis, keepdims=True)
            return (y * (g - dot),)
        if kind == "log":
            return (g / s["in"],)
        if kind == "square":
            return (2.0 * s["in"] * g,)
        if kind == "select-by-mask":
            m = s["mask"]
            return g * m, _reduce_to_suffix(g * (1.0 - m), s["b_shape"]), None
        if kind == "reshape":
            return (g.reshape(s["in_shape"]),)
        if kind == "transpose":
            return (np.transpose(g, np.argsort(s["axes"])),)
        if kind == "expand-axis":
            return (g.sum(axis=s["axis"]),)
        if kind == "take-along-axis":
            ga = np.zeros(s["in_shape"], dtype=g.dtype)
            idx = np.broadcast_to(s["indices"], g.shape)
            mesh = list(np.ogrid[tuple(np.s_[0:n] for n in g.shape)])
            mesh[s["axis"]] = idx
            np.add.at(ga, tuple(mesh), g)
            return (ga,)
        if kind == "lstm-sweep":
            return self._backward_lstm(node, g)
        raise DiffcoreError(f"no backward rule for op kind {kind!r}")

    def _backward_lstm(self, node: _Node, g: np.ndarray):
        s = node.saved
        m = s["m"]
        W = self.nodes[node.inputs[1]].output
        gM = np.zeros(s["in_shape"], dtype=g.dtype)
        gW = np.zeros_like(W)
        gb = np.zeros(4 * m, dtype=g.dtype)
        gh = g.copy()
        gc = np.zeros_like(g)
        M = self.nodes[node.inputs[0]].output
        for t in range(len(s["steps"]) - 1, -1, -1):
            h_prev, c_prev, i, f, gg, o, tc, mk = s["steps"][t]
            gh_v = gh * mk
            gh_skip = gh * (1.0 - mk)
            go = gh_v * tc
            gc_all = gc * mk + gh_v * o * (1.0 - tc * tc)
            gc_skip = gc * (1.0 - mk)
            gf = gc_all * c_prev
            gi = gc_all * gg
            gg_grad = gc_all * i
            gc_prev = gc_all * f
            gz = np.concatenate([
                gi * i * (1.0 - i),
                gf * f * (1.0 - f),
                gg_grad * (1.0 - gg * gg),
                go * o * (1.0 - o),
            ], axis=-1)
            xh = np.concatenate([M[:, :, t, :], h_prev], axis=-1)
            gW += xh.reshape(-1, 2 * m).T @ gz.reshape(-1, 4 * m)
            gb += gz.reshape(-1, 4 * m).sum(axis=0)
            gxh = gz @ W.T
            gM[:, :, t, :] = gxh[..., :m]
            gh = gxh[..., m:] + gh_skip
            gc = gc_prev + gc_skip
        return gM, gW, gb
