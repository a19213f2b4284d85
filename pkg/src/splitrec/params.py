"""Parameter storage, the Adam optimizer and the checkpoint container."""
import struct

import numpy as np

GROUPS = ("policy", "embed", "modeler")

MAGIC = b"SPLTCKPT"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


class ParamBank:
    """Named parameter arrays, each owned by exactly one group.

    Groups: ``policy`` (allocator MLP and its sequence encoder), ``embed``
    (user and item tables), ``modeler`` (the sub-sequence modeler encoder).
    """

    def __init__(self):
        self._values = {}
        self._group = {}

    def add(self, name, value, group):
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        if name in self._values:
            raise ValueError(f"duplicate parameter {name!r}")
        self._values[name] = np.array(value, dtype=np.float64)
        self._group[name] = group

    def __getitem__(self, name):
        return self._values[name]

    def __setitem__(self, name, value):
        if name not in self._values:
            raise KeyError(name)
        self._values[name] = value

    def __contains__(self, name):
        return name in self._values

    def __len__(self):
        return len(self._values)

    def names(self, group=None):
        if group is None:
            return list(self._values)
        return [n for n, g in self._group.items() if g == group]

    def group_of(self, name):
        return self._group[name]

    def copy(self):
        other = ParamBank()
        for name, value in self._values.items():
            other._values[name] = value.copy()
            other._group[name] = self._group[name]
        return other

    def snapshot(self, group):
        return {n: self._values[n].copy() for n in self.names(group)}

    def astype(self, dtype):
        for name in self._values:
            self._values[name] = self._values[name].astype(dtype)
        return self


class Adam:
    """Adam with per-parameter step counts.

    Only the parameters present in a gradient map are touched, so a subset
    update leaves the moments of the other parameters alone.
    """

    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, bank, grads, lr=None):
        lr = self.lr if lr is None else lr
        unknown = set(grads) - set(bank.names())
        if unknown:
            raise KeyError(f"gradients for unknown parameters: {sorted(unknown)}")
        for name, g in grads.items():
            theta = bank[name]
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(theta)
                self.v[name] = np.zeros_like(theta)
                self.t[name] = 0
            t = self.t[name] + 1
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            bank[name] = theta - lr * m_hat / (np.sqrt(v_hat) + self.eps)
            self.m[name], self.v[name], self.t[name] = m, v, t

    def state_tensors(self):
        out = {}
        for name in self.m:
            out[f"adam.m/{name}"] = self.m[name]
            out[f"adam.v/{name}"] = self.v[name]
            out[f"adam.t/{name}"] = np.array(self.t[name], dtype=np.int64)
        return out

    def load_state_tensors(self, tensors):
        for key, value in tensors.items():
            kind, name = key.split("/", 1)
            if kind == "adam.m":
                self.m[name] = value
            elif kind == "adam.v":
                self.v[name] = value
            elif kind == "adam.t":
                self.t[name] = int(value)


def optimizer_step(bank, grads, lr, optimizer):
    """Apply one Adam update for the parameters in ``grads``."""
    optimizer.step(bank, grads, lr)
    return bank


def write_tensors(path, tensors):
    """Write named arrays to a flat binary file with a versioned header.

    Layout (little endian): magic, u32 version, u32 count, then per tensor an
    index entry (u16 name length, name, u8 dtype code, u8 ndim, u64 dims), and
    finally the raw buffers in index order.
    """
    header = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    buffers = []
    for name, value in tensors.items():
        arr = np.asarray(value)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        encoded = name.encode("utf-8")
        header.append(struct.pack("<H", len(encoded)))
        header.append(encoded)
        header.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buffers.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(header))
        fh.write(b"".join(buffers))


def read_tensors(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    pos = len(MAGIC)
    version, count = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    index = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos: pos + n].decode("utf-8")
        pos += n
        code, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code}")
        index.append((name, _DTYPES[code], shape))
    out = {}
    for name, dt, shape in index:
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + size > len(blob):
            raise CheckpointError(f"{path}: truncated buffer for {name}")
        out[name] = np.frombuffer(blob, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += size
    return out


def save_bank(path, bank, optimizer=None, extra=None):
    tensors = {}
    for name in bank.names():
        tensors[f"param.{bank.group_of(name)}/{name}"] = bank[name]
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    for key, value in (extra or {}).items():
        tensors[f"extra/{key}"] = np.asarray(value)
    write_tensors(path, tensors)


def load_bank(path, optimizer=None):
    """Returns (bank, extra tensors). Fills ``optimizer`` state if given."""
    tensors = read_tensors(path)
    bank = ParamBank()
    adam = {}
    extra = {}
    for key, value in tensors.items():
        kind, name = key.split("/", 1)
        if kind.startswith("param."):
            group = kind[len("param."):]
            bank.add(name, np.zeros(0), group)
            bank[name] = value
        elif kind.startswith("adam."):
            adam[key] = value
        elif kind == "extra":
            extra[name] = value
    if optimizer is not None:
        optimizer.load_state_tensors(adam)
    return bank, extra


class Overlay:
    """Read-only view of a bank with some parameters replaced."""

    def __init__(self, base, overrides):
        self.base = base
        self.overrides = overrides

    def __getitem__(self, name):
        value = self.overrides.get(name)
        return self.base[name] if value is None else value

    def __contains__(self, name):
        return name in self.base

    def names(self, group=None):
        return self.base.names(group)
