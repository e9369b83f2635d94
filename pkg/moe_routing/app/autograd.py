"""
Minimal reverse-mode automatic differentiation over numpy float64 arrays.

A Tensor records the Function that produced it; backward() walks the recorded graph in
reverse topological order and accumulates gradients into every tensor that requires them.
Routing decisions never enter the graph: masks are plain arrays, so gradients flow only
through gate weights of selected entries and through expert parameters.
"""
import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_ctx")
    # ndarray operators return NotImplemented so the reflected Tensor method runs
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, _ctx=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._ctx = _ctx

    def __repr__(self):
        return f"<Tensor shape={self.data.shape} requires_grad={self.requires_grad}>"

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def __neg__(self): return Mul.apply(self, -1.0)
    def __add__(self, other): return Add.apply(self, other)
    def __radd__(self, other): return Add.apply(other, self)
    def __sub__(self, other): return Add.apply(self, Mul.apply(other, -1.0))
    def __rsub__(self, other): return Add.apply(other, Mul.apply(self, -1.0))
    def __mul__(self, other): return Mul.apply(self, other)
    def __rmul__(self, other): return Mul.apply(other, self)
    def __truediv__(self, other): return Div.apply(self, other)
    def __matmul__(self, other): return MatMul.apply(self, other)
    def __rmatmul__(self, other): return MatMul.apply(other, self)
    def __getitem__(self, index): return Gather.apply(self, index=index)

    @property
    def T(self): return Transpose.apply(self)

    def reshape(self, *shape): return Reshape.apply(self, shape=shape)

    def sum(self, axis=None, keepdims=False): return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        count = self.data.size if axis is None else self.data.shape[axis]
        return Sum.apply(self, axis=axis, keepdims=False) * (1.0 / count)

    def silu(self): return SiLU.apply(self)
    def softmax(self, axis=-1): return Softmax.apply(self, axis=axis)
    def log_softmax(self, axis=-1): return LogSoftmax.apply(self, axis=axis)

    def backward(self):
        """Accumulate d(self)/d(x) into x.grad for every x in the graph that requires grad."""
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar output")
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.parents:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._ctx is None or node.grad is None:
                continue
            grads = node._ctx.backward(node.grad)
            for parent, grad in zip(node._ctx.parents, grads):
                if grad is None or not parent.requires_grad:
                    continue
                grad = _unbroadcast(grad, parent.data.shape)
                parent.grad = grad if parent.grad is None else parent.grad + grad


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Function:
    def __init__(self, *parents, **kwargs):
        self.parents = parents
        self.kwargs = kwargs

    @classmethod
    def apply(cls, *inputs, **kwargs):
        parents = tuple(as_tensor(x) for x in inputs)
        ctx = cls(*parents, **kwargs)
        out = ctx.forward(*[p.data for p in parents])
        requires_grad = any(p.requires_grad for p in parents)
        return Tensor(out, requires_grad=requires_grad, _ctx=ctx if requires_grad else None)

    def forward(self, *args): raise NotImplementedError
    def backward(self, grad): raise NotImplementedError


class Add(Function):
    def forward(self, x, y): return x + y
    def backward(self, grad): return grad, grad


class Mul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x * y

    def backward(self, grad): return grad * self.y, grad * self.x


class Div(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x / y

    def backward(self, grad):
        return grad / self.y, -grad * self.x / (self.y * self.y)


class MatMul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x @ y

    def backward(self, grad):
        return grad @ np.swapaxes(self.y, -1, -2), np.swapaxes(self.x, -1, -2) @ grad


class Transpose(Function):
    def forward(self, x): return x.T
    def backward(self, grad): return (grad.T,)


class Reshape(Function):
    def forward(self, x):
        self.shape = x.shape
        return x.reshape(self.kwargs["shape"])

    def backward(self, grad): return (grad.reshape(self.shape),)


class Sum(Function):
    def forward(self, x):
        self.shape = x.shape
        return x.sum(axis=self.kwargs.get("axis"), keepdims=self.kwargs.get("keepdims", False))

    def backward(self, grad):
        axis = self.kwargs.get("axis")
        if axis is not None and not self.kwargs.get("keepdims", False):
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class SiLU(Function):
    """x * sigmoid(x), the expert nonlinearity."""

    def forward(self, x):
        self.x = x
        self.sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return x * self.sig

    def backward(self, grad):
        return (grad * (self.sig * (1.0 + self.x * (1.0 - self.sig))),)


class Softmax(Function):
    def forward(self, x):
        axis = self.kwargs.get("axis", -1)
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        axis = self.kwargs.get("axis", -1)
        inner = (grad * self.out).sum(axis=axis, keepdims=True)
        return (self.out * (grad - inner),)


class LogSoftmax(Function):
    def forward(self, x):
        axis = self.kwargs.get("axis", -1)
        shifted = x - x.max(axis=axis, keepdims=True)
        self.out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        return self.out

    def backward(self, grad):
        axis = self.kwargs.get("axis", -1)
        return (grad - np.exp(self.out) * grad.sum(axis=axis, keepdims=True),)


class Gather(Function):
    """Basic or fancy indexing; repeated indices accumulate in backward."""

    def forward(self, x):
        self.shape = x.shape
        return x[self.kwargs["index"]]

    def backward(self, grad):
        out = np.zeros(self.shape)
        np.add.at(out, self.kwargs["index"], grad)
        return (out,)


class ScatterRows(Function):
    """Place src rows at row positions of a zero (n_rows, D) matrix, summing collisions."""

    def forward(self, src):
        rows = self.kwargs["rows"]
        out = np.zeros((self.kwargs["n_rows"],) + src.shape[1:])
        np.add.at(out, rows, src)
        return out

    def backward(self, grad):
        return (grad[self.kwargs["rows"]],)


def scatter_rows(src, rows, n_rows):
    return ScatterRows.apply(src, rows=np.asarray(rows), n_rows=n_rows)


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer targets under row-wise softmax of logits."""
    targets = np.asarray(targets)
    log_probs = logits.log_softmax(axis=-1)
    picked = log_probs[(np.arange(targets.shape[0]), targets)]
    return -picked.mean()
