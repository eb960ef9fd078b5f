"""Run configuration for the CLI.

One flat dataclass covers the whole pipeline; a JSON file may override any
subset of fields, command-line flags override the file, and two environment
variables provide deploy-time overrides: RELSEARCH_CONFIG points at the
config file and RELSEARCH_LISTEN overrides the service listen address as
"host:port". Precedence: flags > environment > config file > defaults.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path

CONFIG_ENV = "RELSEARCH_CONFIG"
LISTEN_ENV = "RELSEARCH_LISTEN"

# Conventional artifact names inside the workdir.
ARTIFACTS = {
    "pins": "pins.jsonl",
    "queries": "queries.jsonl",
    "annotations": "annotations.jsonl",
    "engagement": "engagement.jsonl",
    "truth": "truth.jsonl",
    "vocab": "vocab.jsonl",
    "bm25_index": "bm25.json",
    "teacher": "teacher.json",
    "student": "student.json",
    "labeled_pool": "labeled_pool.jsonl",
    "sampled_pool": "sampled_pool.jsonl",
    "report": "report.json",
    "scaling_report": "scaling_report.jsonl",
    "query_embeddings": "query_embeddings.jsonl",
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AppConfig:
    workdir: str = "relsearch_artifacts"
    seed: int = 0
    test_fraction: float = 0.1

    # synthetic corpus
    n_queries: int = 1000
    n_pins: int = 5000
    vocab_size: int = 4000

    # text representation
    max_len: int = 96

    # teacher
    d_model: int = 64
    teacher_hidden: int = 128
    teacher_epochs: int = 12
    teacher_batch: int = 256
    teacher_lr: float = 1e-3

    # student
    student_hidden1: int = 256
    student_hidden2: int = 128
    student_epochs: int = 15
    student_batch: int = 512
    student_lr: float = 1e-3
    d_query_emb: int = 16
    d_pin_emb: int = 16

    # sampling
    sample_total: int = 10000

    # service
    host: str = "127.0.0.1"
    port: int = 8080
    max_batch: int = 512

    def path(self, name: str) -> str:
        if name not in ARTIFACTS:
            raise ConfigError(f"unknown artifact name {name!r}")
        return str(Path(self.workdir) / ARTIFACTS[name])


_FIELDS = {f.name: f.type for f in dataclasses.fields(AppConfig)}


def load_config(path: str | None = None, environ: dict | None = None) -> AppConfig:
    """Resolve the config file (explicit path, else $RELSEARCH_CONFIG, else
    defaults only) and apply the listen-address environment override."""
    env = os.environ if environ is None else environ
    config = AppConfig()

    resolved = path or env.get(CONFIG_ENV)
    if resolved:
        try:
            with open(resolved, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {resolved}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {resolved} is not valid JSON: {exc}")
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {resolved} must hold a JSON object")
        unknown = sorted(set(raw) - set(_FIELDS))
        if unknown:
            raise ConfigError(f"unknown config keys in {resolved}: {', '.join(unknown)}")
        config = dataclasses.replace(config, **raw)

    listen = env.get(LISTEN_ENV)
    if listen:
        host, _, port = listen.rpartition(":")
        if not host or not port.isdigit():
            raise ConfigError(f"{LISTEN_ENV} must look like host:port, got {listen!r}")
        config = dataclasses.replace(config, host=host, port=int(port))
    return config


def apply_flags(config: AppConfig, **overrides) -> AppConfig:
    """Overlay explicitly-set CLI flags (None means 'not given')."""
    actual = {k: v for k, v in overrides.items() if v is not None}
    unknown = sorted(set(actual) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config overrides: {', '.join(unknown)}")
    return dataclasses.replace(config, **actual) if actual else config
