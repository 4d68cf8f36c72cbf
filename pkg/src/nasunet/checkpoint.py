"""Single-file binary checkpoints.

Layout (all integers little-endian)::

    b"NASU"  u32 format_version
    repeated sections:
        u32 name_len, name (utf-8), u8 kind, u64 payload_len, payload

kind 0 is an array: u8 dtype_len, dtype string (numpy ``str``, e.g. ``<f4``),
u8 ndim, ndim x u64 dims, raw little-endian data.  kind 1 is utf-8 text.
The first section is ``header``: JSON with format/engine version, mode,
completed epochs and seed.  Random streams are keyed by (seed, epoch, batch),
so (seed, epoch) is the whole generator state.
"""
import io
import json
import os
import struct

import numpy as np

from . import __version__

MAGIC = b"NASU"
FORMAT_VERSION = 1
_ARRAY, _TEXT = 0, 1


class CheckpointError(ValueError):
    pass


def _write_section(fh, name, kind, payload):
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<BQ", kind, len(payload)))
    fh.write(payload)


def _array_payload(arr):
    arr = np.asarray(arr)
    arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    dt = arr.dtype.str.encode("ascii")
    head = struct.pack("<B", len(dt)) + dt + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr).tobytes()


def _read_array(payload):
    n = payload[0]
    dtype = np.dtype(payload[1 : 1 + n].decode("ascii"))
    pos = 1 + n
    ndim = payload[pos]
    pos += 1
    shape = struct.unpack_from(f"<{ndim}Q", payload, pos)
    pos += 8 * ndim
    return np.frombuffer(payload[pos:], dtype=dtype).reshape(shape).copy()


def save_checkpoint(path, header, arrays, texts=None):
    header = dict(header, format_version=FORMAT_VERSION, engine_version=__version__)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    _write_section(buf, "header", _TEXT, json.dumps(header, sort_keys=True).encode("utf-8"))
    for name, text in (texts or {}).items():
        _write_section(buf, name, _TEXT, text.encode("utf-8"))
    for name, arr in arrays.items():
        _write_section(buf, name, _ARRAY, _array_payload(arr))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (header dict, arrays dict, texts dict)."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    pos = 8
    arrays, texts = {}, {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            kind, plen = struct.unpack_from("<BQ", data, pos)
            pos += 9
            payload = data[pos : pos + plen]
            if len(payload) != plen:
                raise CheckpointError(f"{path}: truncated section {name!r}")
            pos += plen
            if kind == _ARRAY:
                arrays[name] = _read_array(payload)
            elif kind == _TEXT:
                texts[name] = payload.decode("utf-8")
            else:
                raise CheckpointError(f"{path}: unknown section kind {kind} for {name!r}")
    except struct.error:
        raise CheckpointError(f"{path}: truncated checkpoint") from None
    if "header" not in texts:
        raise CheckpointError(f"{path}: missing header section")
    header = json.loads(texts.pop("header"))
    if header.get("engine_version") != __version__:
        raise CheckpointError(f"{path}: written by engine {header.get('engine_version')}, running {__version__}")
    return header, arrays, texts


def _history_text(history):
    return json.dumps([dataclass_row(r) for r in history])


def dataclass_row(r):
    return [r.epoch, r.loss, r.pixel_acc, r.miou, r.dsc, r.lr, r.genotype_hash]


def _history_from_text(text):
    from .train_eval import EpochRecord, History

    h = History()
    for row in json.loads(text):
        h.append(EpochRecord(*row))
    return h


def _params(net):
    return {f"param/{n}": p.data for n, p in net.named_parameters()}


def _load_params(net, arrays):
    state = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    net.load_state_dict(state)


def _opt_arrays(prefix, opt):
    out = {}
    for key, val in opt.state().items():
        if isinstance(val, list):
            for i, a in enumerate(val):
                out[f"{prefix}/{key}/{i}"] = a
        else:
            out[f"{prefix}/{key}"] = val
    return out


def _opt_state(prefix, opt, arrays):
    state = {}
    for key, val in opt.state().items():
        if isinstance(val, list):
            state[key] = [arrays[f"{prefix}/{key}/{i}"] for i in range(len(val))]
        else:
            state[key] = arrays[f"{prefix}/{key}"]
    opt.load_state(state)


def save_search_state(path, state, seed, config_text=""):
    arrays = _params(state.net)
    for name, p in state.net.named_arch_parameters():
        arrays[name] = p.data
    arrays.update(_opt_arrays("sgd", state.weight_opt))
    arrays.update(_opt_arrays("adam", state.arch_opt))
    header = {"mode": "search", "epoch": state.epoch, "seed": int(seed)}
    texts = {"history": _history_text(state.history), "phase_log": json.dumps(state.phase_log), "config": config_text}
    save_checkpoint(path, header, arrays, texts)


def load_search_state(path, search_config, net_config):
    from .search import init_search

    header, arrays, texts = load_checkpoint(path)
    if header.get("mode") != "search":
        raise CheckpointError(f"{path}: a {header.get('mode')} checkpoint cannot resume a search")
    if header.get("seed") != search_config.seed:
        raise CheckpointError(f"{path}: seed {header.get('seed')} differs from configured {search_config.seed}")
    state = init_search(search_config, net_config)
    _load_params(state.net, arrays)
    for name, p in state.net.named_arch_parameters():
        p.data = arrays[name].astype(p.data.dtype)
    _opt_state("sgd", state.weight_opt, arrays)
    _opt_state("adam", state.arch_opt, arrays)
    state.history = _history_from_text(texts["history"])
    state.phase_log = json.loads(texts.get("phase_log", "[]"))
    state.epoch = int(header["epoch"])
    return state


def save_train_state(path, net, optimizer, history, epoch, seed, config_text=""):
    arrays = _params(net)
    arrays.update(_opt_arrays("adam", optimizer))
    header = {"mode": "retrain", "epoch": int(epoch), "seed": int(seed)}
    save_checkpoint(path, header, arrays, {"history": _history_text(history), "config": config_text})


def load_train_state(path, net, optimizer):
    header, arrays, texts = load_checkpoint(path)
    if header.get("mode") != "retrain":
        raise CheckpointError(f"{path}: a {header.get('mode')} checkpoint cannot resume retraining")
    _load_params(net, arrays)
    _opt_state("adam", optimizer, arrays)
    return int(header["epoch"]), _history_from_text(texts["history"])
