"""Python front end for the attncal C++ library.

Configs travel as plain dicts; calibration matrices as the JSON-ready list
that ``fit_uac`` returns.
"""

import json

from . import _core
from ._core import (
    ConfigError,
    ContractError,
    DacModule,
    IoError,
    Model,
    apply_uac_row,
    compute_w,
    kl_from_uniform,
    mme_score,
    nt_xent,
)

__version__ = _core.__version__


def _dump(cfg):
    return json.dumps(cfg if cfg is not None else {})


def default_config():
    return json.loads(_core.default_config())


def resolve_config(cfg=None, overrides=()):
    """Fill defaults, apply dotted ``key=value`` overrides and validate."""
    return json.loads(_core.resolve_config(_dump(cfg), list(overrides)))


def new_model(cfg, seed):
    return Model(json.dumps(cfg["model"]), seed)


def model_config(model):
    return json.loads(model.config)


def white_patches(cfg):
    return _core.white_patches(_dump(cfg))


def pretrain(cfg):
    return _core.pretrain(_dump(cfg))


def fit_uac(model, cfg):
    return json.loads(_core.fit_uac(model, _dump(cfg)))


def train_dac(model, cfg, layers=None):
    return _core.train_dac(model, _dump(cfg), layers)


def _cal(calibration):
    return None if calibration is None else json.dumps(calibration)


def white_probe(model, cfg, calibration=None, dac=None):
    return json.loads(_core.white_probe(model, _dump(cfg), _cal(calibration), dac))


def evaluate(model, cfg, calibration=None, dac=None, captions=True):
    return json.loads(_core.evaluate(model, _dump(cfg), _cal(calibration), dac, captions))


def pope_metrics(tp, fp, tn, fn):
    return json.loads(_core.pope_metrics(tp, fp, tn, fn))


def chair(captions, pools):
    return json.loads(_core.chair(captions, pools))
