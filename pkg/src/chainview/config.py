"""Run configuration: TOML sections [run] [backend] [motion] [render] [budget] [eval].

Precedence is command-line overrides > file > defaults.
"""

from __future__ import annotations

import copy
import glob
import sys
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .agent import AgentSettings, LoopBudget
from .errors import ConfigError
from .gateway import BackendConfig
from .geometry import MotionConfig
from .prompts import PromptSet, TemplateError
from .renderer import RenderSettings

DEFAULTS: dict[str, dict[str, Any]] = {
    "run": {
        "episodes": [],
        "out_dir": "runs",
        "ratio": 10,
        "k_max": 6,
        "workers": 1,
        "prompt_version": "v1",
        "prompts_dir": "",
        "strict_images": True,
        "selection": "strict",
        "rerender_anchors": False,
        "stamp_frames": True,
    },
    "backend": {
        "kind": "openai",
        "endpoint": "https://api.openai.com/v1",
        "model": "gpt-4o-mini",
        "temperature": 0.0,
        "max_output_tokens": 1024,
        "timeout_s": 120.0,
        "max_retries": 4,
        "api_key_env": "OPENAI_API_KEY",
        "max_images": 64,
        "requests_per_minute": 0.0,
        "framing": "interleaved",
        "script": "",
        "reveal_after": 3,
        "decoy": "I cannot find it",
        "record": "",
        "replay": "",
    },
    "motion": {
        "step_m": 0.3,
        "yaw_deg": 30.0,
        "pitch_deg": 30.0,
        "roll_deg": 30.0,
        "clamp_margin_m": 0.5,
        "vertical": "camera",
    },
    "render": {
        "splat_radius_px": 2,
        "background": [0.0, 0.0, 0.0],
        "near_m": 0.05,
        "far_m": 100.0,
        "birds_eye_resolution": 512,
        "up_axis": "z",
    },
    "budget": {
        "min_steps": 0,
        "max_steps": 12,
        "max_parse_retries": 1,
        "max_nudges": -1,
        "max_images": 0,
    },
    "eval": {
        "judge": "backend",
        "include_extras": True,
        "include_category": True,
        "endpoint": "",
        "model": "",
        "api_key_env": "",
    },
}


def _coerce(section: str, key: str, value: Any) -> Any:
    default = DEFAULTS[section][key]
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            if isinstance(value, str):
                return [v.strip() for v in value.split(",") if v.strip()]
            return list(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}.{key}: cannot use {value!r}") from exc


class Config:
    def __init__(self, data: Optional[dict] = None, base_dir=".", source: Optional[Path] = None):
        self.base_dir = Path(base_dir).resolve()
        self.source = source
        self.data = copy.deepcopy(DEFAULTS)
        for section, values in (data or {}).items():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown config section [{section}]")
            if not isinstance(values, dict):
                raise ConfigError(f"[{section}] must be a table")
            for key, value in values.items():
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"unknown key {section}.{key}")
                self.data[section][key] = _coerce(section, key, value)

    @classmethod
    def load(cls, path) -> "Config":
        path = Path(path)
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls(data, path.parent, path)

    def with_overrides(self, overrides: dict) -> "Config":
        """Apply ``{"section.key": value}`` overrides; ``None`` values are ignored."""
        new = Config(base_dir=self.base_dir, source=self.source)
        new.data = copy.deepcopy(self.data)
        for dotted, value in overrides.items():
            if value is None:
                continue
            section, _, key = dotted.partition(".")
            if section not in DEFAULTS or key not in DEFAULTS[section]:
                raise ConfigError(f"unknown override {dotted}")
            new.data[section][key] = _coerce(section, key, value)
        return new

    def __getitem__(self, dotted: str):
        section, _, key = dotted.partition(".")
        return self.data[section][key]

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    # -- typed views ---------------------------------------------------------

    def episode_paths(self) -> list[Path]:
        out: list[Path] = []
        for pattern in self["run.episodes"]:
            matches = sorted(glob.glob(str(self.resolve(pattern))))
            if not matches:
                raise ConfigError(f"episode pattern matched nothing: {pattern}")
            out.extend(Path(m) for m in matches)
        if not out:
            raise ConfigError("no episodes configured ([run] episodes)")
        return out

    def backend_config(self) -> BackendConfig:
        b = self.data["backend"]
        try:
            return BackendConfig(
                endpoint=b["endpoint"], model_name=b["model"], temperature=b["temperature"],
                max_output_tokens=b["max_output_tokens"], timeout_s=b["timeout_s"],
                max_retries=b["max_retries"], api_key_env=b["api_key_env"],
                max_images=b["max_images"], requests_per_minute=b["requests_per_minute"],
            )
        except ValueError as exc:
            raise ConfigError(f"[backend] {exc}") from exc

    def judge_backend_config(self) -> BackendConfig:
        base = self.backend_config()
        e = self.data["eval"]
        return BackendConfig(
            endpoint=e["endpoint"] or base.endpoint,
            model_name=e["model"] or base.model_name,
            temperature=0.0,
            max_output_tokens=16,
            timeout_s=base.timeout_s,
            max_retries=base.max_retries,
            api_key_env=e["api_key_env"] or base.api_key_env,
            requests_per_minute=base.requests_per_minute,
        )

    def prompt_set(self) -> PromptSet:
        try:
            if self["run.prompts_dir"]:
                return PromptSet.load(directory=self.resolve(self["run.prompts_dir"]))
            return PromptSet.load(self["run.prompt_version"])
        except TemplateError as exc:
            raise ConfigError(str(exc)) from exc

    def agent_settings(self) -> AgentSettings:
        m, r, b = self.data["motion"], self.data["render"], self.data["budget"]
        try:
            motion = MotionConfig(
                step_m=m["step_m"], yaw_deg=m["yaw_deg"], pitch_deg=m["pitch_deg"],
                roll_deg=m["roll_deg"], clamp_margin_m=m["clamp_margin_m"],
                vertical=m["vertical"],
                world_up=(0.0, 0.0, 1.0) if r["up_axis"] == "z" else (0.0, 1.0, 0.0),
            )
            render = RenderSettings(
                splat_radius_px=r["splat_radius_px"], background=tuple(float(x) for x in r["background"]),
                near_m=r["near_m"], far_m=r["far_m"],
                birds_eye_resolution=r["birds_eye_resolution"], up_axis=r["up_axis"],
            )
            budget = LoopBudget(
                min_steps=b["min_steps"], max_steps=b["max_steps"],
                max_parse_retries=b["max_parse_retries"],
                max_nudges=None if b["max_nudges"] < 0 else b["max_nudges"],
            )
            if self["run.ratio"] < 1:
                raise ValueError("run.ratio must be >= 1")
            if self["run.selection"] not in ("strict", "lenient"):
                raise ValueError("run.selection must be 'strict' or 'lenient'")
            if self["backend.framing"] not in ("interleaved", "single-shot"):
                raise ValueError("backend.framing must be 'interleaved' or 'single-shot'")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return AgentSettings(
            budget=budget, motion=motion, render=render,
            k_max=self["run.k_max"], ratio=self["run.ratio"],
            framing=self["backend.framing"],
            max_images=b["max_images"] or None,
            selection_lenient=self["run.selection"] == "lenient",
            rerender_anchors=self["run.rerender_anchors"],
            stamp_frames=self["run.stamp_frames"],
            prompts=self.prompt_set(),
        )

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)
