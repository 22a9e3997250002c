"""Engine configuration: weights, synthesis parameters, backend selection,
loop budget, and service settings, loadable from a JSON file."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

from .objectives import ObjectiveWeights
from .synthesis import SynthesisConfig

DEFAULT_LOOP_BUDGET = 5
DEFAULT_SESSIONS_DIR = ".tidyloop_sessions"
DEFAULT_PORT = 8080


@dataclass
class EngineConfig:
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    backend_kind: str = "mock"
    backend_settings: dict[str, Any] = field(default_factory=dict)
    loop_budget: int = DEFAULT_LOOP_BUDGET
    token_budget: int = 3000
    prompt_token_ceiling: int = 16000
    sessions_dir: str = DEFAULT_SESSIONS_DIR
    port: int = DEFAULT_PORT

    def to_dict(self) -> dict[str, Any]:
        return {
            "weights": self.synthesis.weights.to_dict(),
            "synthesis": {
                k: v for k, v in self.synthesis.to_dict().items() if k != "weights"
            },
            "backend": {"kind": self.backend_kind, **self.backend_settings},
            "loop_budget": self.loop_budget,
            "preferences": {"token_budget": self.token_budget},
            "prompt_token_ceiling": self.prompt_token_ceiling,
            "sessions_dir": self.sessions_dir,
            "port": self.port,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EngineConfig":
        weights = ObjectiveWeights.from_dict(data.get("weights", {})) if data.get("weights") else ObjectiveWeights()
        synthesis_section = dict(data.get("synthesis", {}))
        synthesis_section.pop("weights", None)
        synthesis = SynthesisConfig(**synthesis_section, weights=weights)
        backend = dict(data.get("backend", {}))
        kind = backend.pop("kind", "mock")
        preferences = data.get("preferences", {})
        return cls(
            synthesis=synthesis,
            backend_kind=kind,
            backend_settings=backend,
            loop_budget=int(data.get("loop_budget", DEFAULT_LOOP_BUDGET)),
            token_budget=int(preferences.get("token_budget", 3000)),
            prompt_token_ceiling=int(data.get("prompt_token_ceiling", 16000)),
            sessions_dir=data.get("sessions_dir", DEFAULT_SESSIONS_DIR),
            port=int(data.get("port", DEFAULT_PORT)),
        )

    def with_overrides(
        self, seed: int | None = None, backend: str | None = None
    ) -> "EngineConfig":
        out = self
        if seed is not None:
            out = replace(out, synthesis=replace(out.synthesis, seed=seed))
        if backend is not None:
            out = replace(out, backend_kind=backend)
        return out


def load_config(path: str | None = None) -> EngineConfig:
    if path is None:
        return EngineConfig()
    with open(path, "r", encoding="utf-8") as fh:
        return EngineConfig.from_dict(json.load(fh))
