"""Checkpoint files: a version field, config echo and named parameters."""

from __future__ import annotations

from pathlib import Path

import torch

from .errors import DomainError

VERSION = 1


def _builders():
    from .recognizer import Recognizer, RecognizerConfig
    from .separator import Separator, SeparatorConfig
    from .transcriber import Transcriber, TranscriberConfig
    return {
        "recognizer": (Recognizer, RecognizerConfig),
        "transcriber": (Transcriber, TranscriberConfig),
        "separator": (Separator, SeparatorConfig),
    }


def save_checkpoint(path, modules, **meta):
    """Save ``{"recognizer"|"transcriber"|"separator": module}`` plus metadata."""
    payload = {"version": VERSION, "meta": meta, "modules": {}}
    for name, module in modules.items():
        if module is None:
            continue
        payload["modules"][name] = {
            "config": module.cfg.to_dict(),
            "state": {k: v.detach().cpu().clone() for k, v in module.state_dict().items()},
        }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path):
    """Return ``(modules, meta)`` with every module rebuilt in eval mode."""
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise OSError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("version") != VERSION:
        raise DomainError(f"{path}: unsupported checkpoint version {payload.get('version')!r}")
    builders = _builders()
    modules = {}
    for name, entry in payload["modules"].items():
        model_cls, cfg_cls = builders[name]
        module = model_cls(cfg_cls(**entry["config"]))
        module.load_state_dict(entry["state"])
        module.eval()
        modules[name] = module
    return modules, payload.get("meta", {})
