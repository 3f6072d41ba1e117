"""Versioned checkpoint files.

Checkpoints are JSON: Python's float serialization round-trips doubles
exactly, which gives the bit-identical save/load guarantee for free.
Writes are atomic (temp file + rename).
"""

import json
import os
import tempfile

import numpy as np

from .errors import DataError
from .model import CHECKPOINT_FORMAT_VERSION, CovarianceSet, Hyperparams, LatentFactors, Model


def _hp_to_dict(hp: Hyperparams) -> dict:
    out = {
        "d": hp.d,
        "sigma2_u": hp.sigma2_u,
        "sigma2_v": hp.sigma2_v,
        "sigma2_w": hp.sigma2_w,
        "lam": hp.lam,
        "nu_g": hp.nu_g,
        "nu_p": hp.nu_p,
        "learning_rate": hp.learning_rate,
        "sgd_iters_per_em": hp.sgd_iters_per_em,
        "samples_per_iter": hp.samples_per_iter,
        "seed": hp.seed,
    }
    if hp.aspect_weights is not None:
        out["aspect_weights"] = [float(x) for x in hp.aspect_weights]
    return out


def _hp_from_dict(data: dict) -> Hyperparams:
    weights = data.pop("aspect_weights", None)
    hp = Hyperparams(**data)
    if weights is not None:
        hp.aspect_weights = np.asarray(weights, dtype=float)
    return hp


def save_checkpoint(model: Model, path) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "mode": model.mode,
        "M": model.factors.n_users,
        "N": model.factors.n_items,
        "K": model.factors.n_aspects,
        "d": model.factors.dim,
        "hyperparams": _hp_to_dict(model.hp),
        "aspects": model.aspects,
        "user_ids": model.user_ids,
        "item_ids": model.item_ids,
        "U": model.factors.U.tolist(),
        "V": model.factors.V.tolist(),
        "W": model.factors.W.tolist(),
        "L_global": model.cov.l_global.tolist(),
        "L_user": {model.user_ids[u]: L.tolist() for u, L in sorted(model.cov.l_user.items())},
        "L_item": {model.item_ids[i]: L.tolist() for i, L in sorted(model.cov.l_item.items())},
    }
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, sort_keys=True)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Model:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format version: {version}")
    user_index = {uid: idx for idx, uid in enumerate(payload["user_ids"])}
    item_index = {iid: idx for idx, iid in enumerate(payload["item_ids"])}
    factors = LatentFactors(
        U=np.asarray(payload["U"], dtype=float),
        V=np.asarray(payload["V"], dtype=float),
        W=np.asarray(payload["W"], dtype=float),
    )
    cov = CovarianceSet(
        l_global=np.asarray(payload["L_global"], dtype=float),
        l_user={user_index[uid]: np.asarray(L, dtype=float)
                for uid, L in payload["L_user"].items()},
        l_item={item_index[iid]: np.asarray(L, dtype=float)
                for iid, L in payload["L_item"].items()},
    )
    return Model(
        factors=factors,
        cov=cov,
        hp=_hp_from_dict(payload["hyperparams"]),
        mode=payload["mode"],
        aspects=payload["aspects"],
        user_ids=payload["user_ids"],
        item_ids=payload["item_ids"],
    )
