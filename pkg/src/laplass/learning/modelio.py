"""Model files: a JSON manifest plus a little-endian float32 parameter blob.

A model is a directory holding ``manifest.json`` and ``params.bin``. The
manifest records every tensor's name, shape and element offset into the
blob, alongside dimensions, activations, normalization statistics, the
training configuration and the loss curve.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..serialize import read_json, write_json
from .mlp import Mlp
from .vae import LinearLatentModel, VaeModel
from .latent import LearnedModel

FORMAT = "laplass-model/1"
MANIFEST = "manifest.json"
BLOB = "params.bin"
DTYPE = np.dtype("<f4")


def _tensors(model: LearnedModel):
    out = []
    for tag, vae in (("vae_x", model.vae_x), ("vae_u", model.vae_u)):
        for part, net in (("encoder", vae.encoder), ("decoder", vae.decoder)):
            for i, (w, b) in enumerate(zip(net.weights, net.biases)):
                out.append((f"{tag}.{part}.{i}.weight", w))
                out.append((f"{tag}.{part}.{i}.bias", b))
    out.append(("latent.A", model.latent.A))
    out.append(("latent.B", model.latent.B))
    return out


def save_model(model: LearnedModel, directory, extra: dict | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    offset = 0
    index = []
    chunks = []
    for name, arr in _tensors(model):
        flat = np.ascontiguousarray(arr, dtype=DTYPE).ravel()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += flat.size
        chunks.append(flat.tobytes())
    manifest = {
        "format": FORMAT,
        "dtype": "float32-le",
        "tensors": index,
        "vae_x": _vae_meta(model.vae_x),
        "vae_u": _vae_meta(model.vae_u),
        "config": model.config,
        "loss_curve": list(model.loss_curve),
    }
    if extra:
        manifest.update(extra)
    (d / BLOB).write_bytes(b"".join(chunks))
    write_json(manifest, d / MANIFEST)


def _vae_meta(vae: VaeModel) -> dict:
    return {
        "input_dim": vae.input_dim,
        "latent_dim": vae.latent_dim,
        "encoder_activations": list(vae.encoder.activations),
        "decoder_activations": list(vae.decoder.activations),
        "mean": vae.mean.tolist(),
        "std": vae.std.tolist(),
    }


def load_model(directory) -> LearnedModel:
    d = Path(directory)
    manifest = read_json(d / MANIFEST)
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{d}: not a model directory (format {manifest.get('format')!r})")
    blob = np.frombuffer((d / BLOB).read_bytes(), dtype=DTYPE)
    tensors = {}
    for entry in manifest["tensors"]:
        size = int(np.prod(entry["shape"], dtype=int))
        start = entry["offset"]
        if start + size > blob.size:
            raise ValueError(f"{d}: parameter blob is truncated at tensor {entry['name']}")
        tensors[entry["name"]] = blob[start : start + size].astype(float).reshape(entry["shape"])

    def net(tag, part):
        acts = manifest[tag][f"{part}_activations"]
        ws = [tensors[f"{tag}.{part}.{i}.weight"] for i in range(len(acts))]
        bs = [tensors[f"{tag}.{part}.{i}.bias"] for i in range(len(acts))]
        return Mlp(ws, bs, tuple(acts))

    def vae(tag):
        meta = manifest[tag]
        return VaeModel(
            net(tag, "encoder"), net(tag, "decoder"), meta["latent_dim"], meta["input_dim"], meta["mean"], meta["std"]
        )

    latent = LinearLatentModel(tensors["latent.A"], tensors["latent.B"])
    return LearnedModel(vae("vae_x"), vae("vae_u"), latent, manifest.get("config", {}), manifest.get("loss_curve", []))
