"""Checkpoint archives.

A checkpoint is a zip file holding ``manifest.json`` plus one ``.npy`` member per
array under ``arrays/<namespace>/<name>.npy``. Generator kernels are stored in
``(out, in, P, Q, R)`` order (P, R spatial; Q temporal). Floating arrays are
float32.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
import zipfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

FORMAT = "vdblur-checkpoint"
VERSION = 1
ARRAY_ORDER = "(out, in, P, Q, R); P,R spatial, Q temporal"


def _to_array(t) -> np.ndarray:
    a = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float32)
    return a


def flatten_optimizer(opt: torch.optim.Optimizer) -> tuple[dict, dict[str, np.ndarray]]:
    sd = opt.state_dict()
    meta: dict[str, Any] = {"param_groups": sd["param_groups"], "state": {}}
    arrays: dict[str, np.ndarray] = {}
    for idx, st in sd["state"].items():
        entry = {}
        for k, v in st.items():
            if isinstance(v, torch.Tensor):
                arrays[f"{idx}/{k}"] = _to_array(v)
                entry[k] = {"array": f"{idx}/{k}"}
            else:
                entry[k] = v
        meta["state"][str(idx)] = entry
    return meta, arrays


def restore_optimizer(opt: torch.optim.Optimizer, meta: dict, arrays: Mapping[str, np.ndarray]) -> None:
    state = {}
    for idx, entry in meta["state"].items():
        st = {}
        for k, v in entry.items():
            if isinstance(v, dict) and "array" in v:
                st[k] = torch.from_numpy(np.array(arrays[v["array"]]))
            else:
                st[k] = v
        state[int(idx)] = st
    groups = []
    for g in meta["param_groups"]:
        g = dict(g)
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
        groups.append(g)
    opt.load_state_dict({"state": state, "param_groups": groups})


def save_archive(path, manifest: dict, arrays: Mapping[str, Mapping[str, Any]]) -> Path:
    """Write ``arrays`` (namespace -> name -> array) atomically to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest, format=FORMAT, version=VERSION, array_order=ARRAY_ORDER)
    index = {}
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            for ns, group in arrays.items():
                for name, value in group.items():
                    a = _to_array(value)
                    member = f"arrays/{ns}/{name}.npy"
                    buf = io.BytesIO()
                    np.lib.format.write_array(buf, a, allow_pickle=False)
                    info = zipfile.ZipInfo(member, date_time=(1980, 1, 1, 0, 0, 0))
                    zf.writestr(info, buf.getvalue())
                    index.setdefault(ns, {})[name] = {"shape": list(a.shape), "dtype": str(a.dtype)}
            info = zipfile.ZipInfo("manifest.json", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, json.dumps(dict(manifest, arrays=index), indent=2, sort_keys=True))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_archive(path) -> tuple[dict, dict[str, dict[str, np.ndarray]]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != FORMAT:
            raise ValueError(f"{path} is not a {FORMAT} archive")
        arrays: dict[str, dict[str, np.ndarray]] = {}
        for ns, names in manifest["arrays"].items():
            for name in names:
                with zf.open(f"arrays/{ns}/{name}.npy") as fh:
                    arrays.setdefault(ns, {})[name] = np.lib.format.read_array(io.BytesIO(fh.read()))
    return manifest, arrays


def load_module_arrays(module: torch.nn.Module, arrays: Mapping[str, np.ndarray]) -> None:
    sd = module.state_dict()
    missing = set(sd) - set(arrays)
    if missing:
        raise ValueError(f"checkpoint lacks arrays for {sorted(missing)[:5]}")
    new = {}
    for k, v in sd.items():
        a = np.asarray(arrays[k])
        if tuple(a.shape) != tuple(v.shape):
            raise ValueError(f"{k}: checkpoint shape {a.shape} != model shape {tuple(v.shape)}")
        new[k] = torch.from_numpy(np.array(a)).to(v.dtype)
    module.load_state_dict(new)
