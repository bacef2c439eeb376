"""
Name: tensor.py
Desc: Minimal tensor arithmetic with reverse-mode gradients, counter-based
      random streams and the numerical oracles every other module relies on.

      Values are 64-bit floats stored in numpy arrays. A Tensor created by an
      operation remembers its parents and a backward closure while gradient
      recording is enabled; grad() walks that graph in reverse topological
      order and accumulates into every reachable Parameter.

      The primitive set is the one the denoiser, the reward model and the
      losses need: arithmetic with scalar and per-channel broadcasting,
      matmul, 3x3 convolution, pooling, up-sampling, softmax, log, exp,
      L2-normalize, gather and a handful of smooth activations.

Section Number Mapping:
1 = Tensor and Parameter
2 = Primitive operations
3 = Gradient computation and oracles
4 = Optimizer
5 = Random streams
"""
import hashlib
import math
import struct
import threading

import numpy as np

from LatentPrefPython import (
    NUMERIC_FLOOR,
    DegenerateInputException,
    NumericFaultException,
    ShapeException,
    )


LOG_2PI = math.log(2.0 * math.pi)
MASK64 = 0xFFFFFFFFFFFFFFFF

_gradState = threading.local()


def isGradEnabled():
    return getattr(_gradState, "enabled", True)


class noGrad(object):
    """
    Context manager that turns off graph recording in the current thread.

    >>> with noGrad():
    ...     eps = net.forward(x, t, cond)[0]
    """
    def __enter__(self):
        self._previous = isGradEnabled()
        _gradState.enabled = False
        return self

    def __exit__(self, excType, excValue, tb):
        _gradState.enabled = self._previous
        return False


def _checkFinite(values, op):
    if not np.all(np.isfinite(values)):
        raise NumericFaultException("Non-finite value produced by %s." % op)


# --------------------- Section 1: Tensor and Parameter ----------------------

class Tensor(object):
    """
    Tensor(values)

    An immutable block of float64 values. Operations on Tensors return new
    Tensors; arithmetic operators are overloaded.

    >>> a = Tensor([1.0, 2.0])
    >>> (a * 3.0 + 1.0).numpy()
    array([4., 7.])
    """
    __array_priority__ = 1000

    def __init__(self, values, parents = (), backward = None, op = "const"):
        values = np.asarray(values, dtype = np.float64)
        _checkFinite(values, op)
        self.values = values
        self.op = op
        self.requiresGrad = False
        self._parents = ()
        self._backward = None

        if parents and isGradEnabled():
            for p in parents:
                if p.requiresGrad:
                    self.requiresGrad = True
                    self._parents = tuple(parents)
                    self._backward = backward
                    break

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self):
        if self.values.size != 1:
            raise ShapeException("item() needs a single value, got shape %s." % (self.shape,))
        return float(self.values.reshape(-1)[0])

    def numpy(self):
        return self.values.copy()

    def detach(self):
        return Tensor(self.values)

    def __repr__(self):
        return "<tensor.Tensor( shape = %s, op = %s )>" % (self.shape, self.op)

    def __len__(self):
        return self.values.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getItem(self, index)

    def sum(self, axis = None, keepdims = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis = None, keepdims = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """
    Parameter(values, name = '')

    A trainable leaf. gradient starts at zero and has the shape of the
    value; grad() adds into it, zeroGrad() clears it.
    """
    def __init__(self, values, name = ''):
        Tensor.__init__(self, np.array(values, dtype = np.float64), op = "param")
        self.requiresGrad = True
        self.name = name
        self.grad = np.zeros_like(self.values)

    @property
    def value(self):
        return Tensor(self.values)

    @property
    def gradient(self):
        return self.grad

    def assign(self, newValues):
        newValues = np.array(newValues, dtype = np.float64)
        if newValues.shape != self.values.shape:
            raise ShapeException("Parameter %s has shape %s, can't assign %s." % (self.name, self.values.shape, newValues.shape))
        _checkFinite(newValues, "assign(%s)" % self.name)
        self.values = newValues

    def __repr__(self):
        return "<tensor.Parameter( name = %s, shape = %s )>" % (self.name, self.shape)


def asTensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def zeros(shape):
    return Tensor(np.zeros(shape))


# ------------------- Section 2: Primitive operations -------------------------

def _unbroadcast(g, shape):
    """Sums g down to shape, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis = 0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis = i, keepdims = True)
    return g


def add(a, b):
    a, b = asTensor(a), asTensor(b)

    def backward(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    return Tensor(a.values + b.values, (a, b), backward, "add")


def sub(a, b):
    a, b = asTensor(a), asTensor(b)

    def backward(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    return Tensor(a.values - b.values, (a, b), backward, "sub")


def mul(a, b):
    a, b = asTensor(a), asTensor(b)

    def backward(g):
        return (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape))
    return Tensor(a.values * b.values, (a, b), backward, "mul")


def div(a, b):
    a, b = asTensor(a), asTensor(b)
    if np.any(np.abs(b.values) < NUMERIC_FLOOR):
        raise NumericFaultException("Division by a value below the numeric floor.")

    def backward(g):
        return (_unbroadcast(g / b.values, a.shape),
                _unbroadcast(-g * a.values / (b.values * b.values), b.shape))
    return Tensor(a.values / b.values, (a, b), backward, "div")


def matmul(a, b):
    """
    Name: matmul(a, b)
    Args: a, Tensor of shape [..., n]
          b, Tensor of shape [n, m]
    Desc: Matrix product over the last axis of a.
    """
    a, b = asTensor(a), asTensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeException("matmul shapes %s and %s don't align." % (a.shape, b.shape))
    n, m = b.shape

    def backward(g):
        g2 = g.reshape(-1, m)
        a2 = a.values.reshape(-1, n)
        return ((g2 @ b.values.T).reshape(a.shape), a2.T @ g2)
    return Tensor(a.values @ b.values, (a, b), backward, "matmul")


def tsum(x, axis = None, keepdims = False):
    x = asTensor(x)
    out = x.values.sum(axis = axis, keepdims = keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)
    return Tensor(out, (x,), backward, "sum")


def mean(x, axis = None, keepdims = False):
    x = asTensor(x)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= x.shape[ax]
    return mul(tsum(x, axis, keepdims), 1.0 / count)


def reshape(x, shape):
    x = asTensor(x)

    def backward(g):
        return (g.reshape(x.shape),)
    return Tensor(x.values.reshape(shape), (x,), backward, "reshape")


def concat(tensors, axis = 0):
    tensors = [asTensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis = axis))
    return Tensor(np.concatenate([t.values for t in tensors], axis = axis), tensors, backward, "concat")


def getItem(x, index):
    x = asTensor(x)

    def backward(g):
        out = np.zeros_like(x.values)
        np.add.at(out, index, g)
        return (out,)
    return Tensor(x.values[index], (x,), backward, "getitem")


def gather(table, indices):
    """
    Name: gather(table, indices)
    Args: table, Tensor of shape [rows, dim]
          indices, integer array of row ids
    Desc: Row lookup (embedding tables). Gradients scatter-add into the rows.
    """
    indices = np.asarray(indices, dtype = np.int64)
    if np.any(indices < 0) or np.any(indices >= table.shape[0]):
        raise ShapeException("gather index out of range [0, %s)." % table.shape[0])
    return getItem(table, indices)


def exp(x):
    x = asTensor(x)
    out = np.exp(x.values)

    def backward(g):
        return (g * out,)
    return Tensor(out, (x,), backward, "exp")


def log(x):
    x = asTensor(x)
    if np.any(x.values <= 0.0):
        raise NumericFaultException("log of a non-positive value.")

    def backward(g):
        return (g / x.values,)
    return Tensor(np.log(x.values), (x,), backward, "log")


def tanh(x):
    x = asTensor(x)
    out = np.tanh(x.values)

    def backward(g):
        return (g * (1.0 - out * out),)
    return Tensor(out, (x,), backward, "tanh")


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x):
    x = asTensor(x)
    out = _sigmoid(x.values)

    def backward(g):
        return (g * out * (1.0 - out),)
    return Tensor(out, (x,), backward, "sigmoid")


def silu(x):
    x = asTensor(x)
    s = _sigmoid(x.values)

    def backward(g):
        return (g * (s + x.values * s * (1.0 - s)),)
    return Tensor(x.values * s, (x,), backward, "silu")


def softplus(x):
    x = asTensor(x)

    def backward(g):
        return (g * _sigmoid(x.values),)
    return Tensor(np.logaddexp(0.0, x.values), (x,), backward, "softplus")


def logSigmoid(x):
    """log(1 / (1 + exp(-x))), stable for large |x|."""
    return mul(softplus(mul(x, -1.0)), -1.0)


def maximum(a, b):
    a, b = asTensor(a), asTensor(b)
    mask = a.values >= b.values

    def backward(g):
        return (_unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape))
    return Tensor(np.where(mask, a.values, b.values), (a, b), backward, "maximum")


def minimum(a, b):
    a, b = asTensor(a), asTensor(b)
    mask = a.values <= b.values

    def backward(g):
        return (_unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape))
    return Tensor(np.where(mask, a.values, b.values), (a, b), backward, "minimum")


def clip(x, lo, hi):
    x = asTensor(x)
    inside = (x.values > lo) & (x.values < hi)

    def backward(g):
        return (g * inside,)
    return Tensor(np.clip(x.values, lo, hi), (x,), backward, "clip")


def softmax(v, axis = -1):
    """
    Name: softmax(v, axis = -1)
    Desc: Normalized exponentials, computed after subtracting the max so the
          result is shift-invariant.

    >>> softmax(Tensor([0.0, 0.0])).numpy()
    array([0.5, 0.5])
    """
    v = asTensor(v)
    if v.size == 0 or v.shape[axis] == 0:
        raise ShapeException("softmax of an empty vector.")
    shifted = v.values - v.values.max(axis = axis, keepdims = True)
    e = np.exp(shifted)
    out = e / e.sum(axis = axis, keepdims = True)

    def backward(g):
        return (out * (g - (g * out).sum(axis = axis, keepdims = True)),)
    return Tensor(out, (v,), backward, "softmax")


def logSumExp(v, axis = -1):
    v = asTensor(v)
    if v.size == 0:
        raise ShapeException("logSumExp of an empty vector.")
    m = v.values.max(axis = axis, keepdims = True)
    s = np.exp(v.values - m).sum(axis = axis, keepdims = True)
    out = (m + np.log(s)).squeeze(axis)
    weights = np.exp(v.values - m) / s

    def backward(g):
        return (np.expand_dims(g, axis) * weights,)
    return Tensor(out, (v,), backward, "logsumexp")


def l2Normalize(v, axis = -1):
    """
    Name: l2Normalize(v, axis = -1)
    Desc: Scales v to unit Euclidean length along axis. Vectors with norm at
          or below the numeric floor raise DegenerateInputException.

    >>> l2Normalize(Tensor([3.0, 4.0])).numpy()
    array([0.6, 0.8])
    """
    v = asTensor(v)
    norm = np.sqrt((v.values * v.values).sum(axis = axis, keepdims = True))
    if np.any(norm <= NUMERIC_FLOOR):
        raise DegenerateInputException("Can't normalize a vector with norm %.3g (floor %g)." % (norm.min(), NUMERIC_FLOOR))
    out = v.values / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis = axis, keepdims = True)) / norm,)
    return Tensor(out, (v,), backward, "l2normalize")


def conv2d(x, weight, bias = None):
    """
    Name: conv2d(x, weight, bias = None)
    Args: x, Tensor [B, Cin, H, W]
          weight, Tensor [Cout, Cin, k, k] with odd k
          bias, Tensor [Cout] or None
    Desc: Stride-1 convolution with zero "same" padding.
    """
    x, weight = asTensor(x), asTensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeException("conv2d shapes %s and %s don't align." % (x.shape, weight.shape))
    k = weight.shape[2]
    pad = k // 2
    H, W = x.shape[2], x.shape[3]
    xp = np.pad(x.values, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis = (2, 3))
    out = np.einsum("bchwij,ocij->bohw", cols, weight.values, optimize = True)
    parents = [x, weight]
    if bias is not None:
        bias = asTensor(bias)
        out = out + bias.values[None, :, None, None]
        parents.append(bias)

    def backward(g):
        gw = np.einsum("bohw,bchwij->ocij", g, cols, optimize = True)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i+H, j:j+W] += np.einsum("bohw,oc->bchw", g, weight.values[:, :, i, j], optimize = True)
        gx = gxp[:, :, pad:pad+H, pad:pad+W]
        if bias is not None:
            return (gx, gw, g.sum(axis = (0, 2, 3)))
        return (gx, gw)
    return Tensor(out, parents, backward, "conv2d")


def avgPool2x(x):
    """2x2 average downsampling over the last two axes."""
    x = asTensor(x)
    H, W = x.shape[-2], x.shape[-1]
    if H % 2 or W % 2:
        raise ShapeException("avgPool2x needs even spatial extents, got %sx%s." % (H, W))
    lead = x.shape[:-2]
    out = x.values.reshape(lead + (H // 2, 2, W // 2, 2)).mean(axis = (-3, -1))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis = -2), 2, axis = -1) / 4.0,)
    return Tensor(out, (x,), backward, "avgpool2x")


def upsample2x(x):
    """Nearest-neighbour 2x upsampling over the last two axes."""
    x = asTensor(x)
    out = np.repeat(np.repeat(x.values, 2, axis = -2), 2, axis = -1)
    lead = x.shape[:-2]
    H, W = x.shape[-2], x.shape[-1]

    def backward(g):
        return (g.reshape(lead + (H, 2, W, 2)).sum(axis = (-3, -1)),)
    return Tensor(out, (x,), backward, "upsample2x")


def avgPoolSpatial(featureMap):
    """
    Name: avgPoolSpatial(featureMap)
    Args: featureMap, Tensor [..., C, H, W]
    Desc: Mean over the H x W entries of every channel, giving [..., C].
    """
    featureMap = asTensor(featureMap)
    if featureMap.ndim < 3:
        raise ShapeException("avgPoolSpatial needs [..., C, H, W], got %s." % (featureMap.shape,))
    return mean(featureMap, axis = (-2, -1))


def gaussianLogProb(x, mean_, std, perSample = False):
    """
    Name: gaussianLogProb(x, mean, std, perSample = False)
    Args: x, mean, Tensors of equal shape
          std, positive scalar shared by every dimension
          perSample, if True keep the leading (batch) axis
    Desc: Log density of an isotropic Gaussian summed over dimensions:
          sum of -0.5*((x-mean)/std)^2 - log(std) - 0.5*log(2*pi).
    """
    std = float(std)
    if std <= 0.0:
        raise DegenerateInputException("gaussianLogProb needs std > 0, got %r." % std)
    x, mean_ = asTensor(x), asTensor(mean_)
    if x.shape != mean_.shape:
        raise ShapeException("gaussianLogProb shapes %s and %s differ." % (x.shape, mean_.shape))
    z = (x - mean_) * (1.0 / std)
    perDim = z * z * -0.5 - (math.log(std) + 0.5 * LOG_2PI)
    if perSample:
        return tsum(perDim, axis = tuple(range(1, x.ndim)))
    return tsum(perDim)


# ------------- Section 3: Gradient computation and oracles --------------------

def _topoOrder(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requiresGrad and id(p) not in visited:
                stack.append((p, False))
    return order


def grad(lossNode):
    """
    Name: grad(lossNode)
    Args: lossNode, a scalar Tensor built from the primitives of this module
    Desc: Reverse-mode accumulation. Adds d(loss)/d(value) into the grad of
          every reachable Parameter and returns {Parameter: gradient array}
          for this call alone.

    >>> p = Parameter([1.0, 2.0, 3.0])
    >>> grad((p * p).sum())[p]
    array([2., 4., 6.])
    """
    if lossNode.size != 1 or lossNode.ndim > 1:
        raise ShapeException("grad() needs a scalar root, got shape %s." % (lossNode.shape,))
    result = {}
    if not lossNode.requiresGrad:
        return result

    grads = {id(lossNode): np.ones_like(lossNode.values)}
    for node in reversed(_topoOrder(lossNode)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            g = np.array(g, dtype = np.float64).reshape(node.shape)
            node.grad = node.grad + g
            result[node] = g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requiresGrad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return result


def _scalarOf(value):
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def finiteDiffGrad(f, params, h = 1e-5, coords = None):
    """
    Name: finiteDiffGrad(f, params, h = 1e-5, coords = None)
    Args: f, a deterministic function of no arguments returning a scalar
             that reads the current values of params
          params, the Parameters to differentiate against
          h, central-difference step
          coords, optional {Parameter: list of flat indices} to subsample;
                  unlisted coordinates are left at zero
    Desc: Central differences (f(p + h e_i) - f(p - h e_i)) / 2h per
          coordinate. Parameter values are restored afterwards.
    """
    if h <= 0:
        raise DegenerateInputException("finiteDiffGrad needs h > 0.")
    result = {}
    with noGrad():
        for p in params:
            base = p.values.copy()
            g = np.zeros_like(base)
            indices = range(base.size) if coords is None or p not in coords else coords[p]
            try:
                for i in indices:
                    shifted = base.copy()
                    shifted.flat[i] += h
                    p.values = shifted
                    fPlus = _scalarOf(f())
                    shifted = base.copy()
                    shifted.flat[i] -= h
                    p.values = shifted
                    fMinus = _scalarOf(f())
                    g.flat[i] = (fPlus - fMinus) / (2.0 * h)
            finally:
                p.values = base
            result[p] = g
    return result


def relativeError(a, b, floor = 1e-8):
    """max |a - b| / max(|a|, |b|, floor), elementwise worst case."""
    a = np.asarray(a, dtype = np.float64)
    b = np.asarray(b, dtype = np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def zeroGrad(params):
    for p in params:
        p.grad = np.zeros_like(p.values)


# ---------------------------- Section 4: Optimizer ---------------------------

class SgdMomentum(object):
    """
    SgdMomentum(params, lr, momentum = 0.9, warmupSteps = 0, maxGradNorm = None)

    Stochastic gradient descent with heavy-ball momentum. The learning rate
    ramps linearly over warmupSteps. maxGradNorm rescales the joint gradient
    when its L2 norm is larger.
    """
    def __init__(self, params, lr, momentum = 0.9, warmupSteps = 0, maxGradNorm = None):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.warmupSteps = int(warmupSteps)
        self.maxGradNorm = maxGradNorm
        self.stepCount = 0
        self.velocity = [np.zeros_like(p.values) for p in self.params]
        self.lastUpdateNorm = 0.0

    def zeroGrad(self):
        zeroGrad(self.params)

    def currentLr(self):
        if self.warmupSteps > 0 and self.stepCount < self.warmupSteps:
            return self.lr * (self.stepCount + 1) / float(self.warmupSteps)
        return self.lr

    def gradNorm(self):
        return math.sqrt(sum(float((p.grad * p.grad).sum()) for p in self.params))

    def step(self):
        lr = self.currentLr()
        scale = 1.0
        if self.maxGradNorm is not None:
            norm = self.gradNorm()
            if norm > self.maxGradNorm:
                scale = self.maxGradNorm / norm
        total = 0.0
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += scale * p.grad
            update = lr * v
            total += float((update * update).sum())
            p.assign(p.values - update)
        self.stepCount += 1
        self.lastUpdateNorm = math.sqrt(total)
        return self.lastUpdateNorm


# ------------------------- Section 5: Random streams --------------------------

def mixKey(*parts):
    """Hashes ints and strings into one 64-bit stream id."""
    h = hashlib.blake2b(digest_size = 8)
    for part in parts:
        if isinstance(part, str):
            data = part.encode("utf-8")
        else:
            data = struct.pack("<Q", int(part) & MASK64)
        h.update(struct.pack("<I", len(data)))
        h.update(data)
    return struct.unpack("<Q", h.digest())[0]


class RngStream(object):
    """
    RngStream(masterSeed, streamId = 0, counter = 0)

    Counter-based random stream: a Philox generator keyed by
    (masterSeed, streamId) and started at counter. Identical triples give
    identical draws; distinct stream ids give independent streams.

    >>> rng = RngStream(7)
    >>> a = rng.child(0).normal((3,))
    >>> b = RngStream(7).child(0).normal((3,))
    >>> bool((a == b).all())
    True
    """
    def __init__(self, masterSeed, streamId = 0, counter = 0):
        self.masterSeed = int(masterSeed) & MASK64
        self.streamId = int(streamId) & MASK64
        key = np.array([self.masterSeed, self.streamId], dtype = np.uint64)
        self._bitGenerator = np.random.Philox(counter = int(counter), key = key)
        self._generator = np.random.Generator(self._bitGenerator)

    def __repr__(self):
        return "<tensor.RngStream( masterSeed = %s, streamId = %s, counter = %s )>" % (self.masterSeed, self.streamId, self.counter)

    @property
    def counter(self):
        return int(self._bitGenerator.state["state"]["counter"][0])

    def child(self, index):
        """Stream for the index-th member of a group (candidate, sample)."""
        return RngStream(self.masterSeed, mixKey(self.streamId, "child", index))

    def derive(self, label):
        """Stream for a named purpose, e.g. derive("lpo/epoch3")."""
        return RngStream(self.masterSeed, mixKey(self.streamId, label))

    def copy(self):
        other = RngStream(self.masterSeed, self.streamId)
        other._bitGenerator.state = self._bitGenerator.state
        return other

    def normal(self, shape):
        return self._generator.standard_normal(shape)

    def uniform(self, low = 0.0, high = 1.0, shape = None):
        return self._generator.uniform(low, high, shape)

    def random(self):
        return float(self._generator.random())

    def integers(self, low, high, size = None):
        return self._generator.integers(low, high, size = size)

    def permutation(self, n):
        return self._generator.permutation(n)
