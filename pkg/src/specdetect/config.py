"""Run configuration: one flat record of every tunable, with file I/O.

The on-disk format is line-oriented `key = value` (UTF-8, '#' comments,
blank lines ignored). A line `include <path>` splices another file,
resolved relative to the including file; later assignments win. The
resolved configuration is echoed into every output directory so a run
can be reproduced from its artifacts alone.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields

from .autodiff import OptimConfig
from .hsio import SynthConfig, ValidationError
from .metatrain import TrainConfig
from .pipeline import ModelSpec
from .tta import TtaConfig

__all__ = ["RunConfig", "load_config", "parse_assignments"]

MAX_INCLUDE_DEPTH = 16


@dataclass
class RunConfig:
    # patching and episodes
    patch_size: int = 5
    n_way: int = 10
    k_shot: int = 2
    query_count: int = 15

    # model widths
    descr_dim: int = 64
    adapter_dim: int = 64
    embed_dim: int = 64
    state_dim: int = 16
    heads: int = 4
    blocks: int = 2
    prior_hidden: int = 128
    ff_mult: int = 2
    freq_low_ratio: float = 0.25
    freq_mid_ratio: float = 0.60
    freq_masking: bool = True

    # source-domain training
    iterations: int = 10000
    batch_episodes: int = 32
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    det_weight: float = 1.0
    phys_weight: float = 0.1
    support_blend: float = 0.7
    pseudo_q_pos: float = 0.9
    pseudo_q_neg: float = 0.1
    target_bias: float = 0.8

    # test-time adaptation
    tta_iterations: int = 50
    tta_learning_rate: float = 1e-4
    consistency_weight: float = 0.4
    quantile_pos: float = 0.95
    quantile_neg: float = 0.05
    refresh_every: int = 10
    noise_std: float = 0.01

    # evaluation
    grid: int = 1000
    target_class: int = 0         # 0 = unset

    # synthetic scene generation
    height: int = 48
    width: int = 48
    bands: int = 32
    background_classes: int = 4
    length_scale: float = 8.0
    implant_count: int = 20
    alpha_min: float = 0.4
    alpha_max: float = 1.0
    synth_noise_std: float = 0.01

    # runtime
    seed: int = 0
    threads: int = 1
    chunk: int = 256

    # -- derived module configs -------------------------------------------

    def model_spec(self, bands: int) -> ModelSpec:
        return ModelSpec(
            bands=bands, patch_size=self.patch_size, descr_dim=self.descr_dim,
            adapter_dim=self.adapter_dim, embed_dim=self.embed_dim,
            state_dim=self.state_dim, heads=self.heads, blocks=self.blocks,
            prior_hidden=self.prior_hidden, ff_mult=self.ff_mult,
            freq_low_ratio=self.freq_low_ratio,
            freq_mid_ratio=self.freq_mid_ratio,
            freq_masking=self.freq_masking, n_way=self.n_way)

    def train_cfg(self) -> TrainConfig:
        return TrainConfig(
            iterations=self.iterations, batch_episodes=self.batch_episodes,
            n_way=self.n_way, k_shot=self.k_shot,
            query_count=self.query_count, det_weight=self.det_weight,
            phys_weight=self.phys_weight, support_blend=self.support_blend,
            pseudo_q_pos=self.pseudo_q_pos, pseudo_q_neg=self.pseudo_q_neg,
            target_bias=self.target_bias,
            optim=OptimConfig(learning_rate=self.learning_rate,
                              weight_decay=self.weight_decay),
            seed=self.seed)

    def tta_cfg(self) -> TtaConfig:
        return TtaConfig(
            iterations=self.tta_iterations,
            consistency_weight=self.consistency_weight,
            quantile_pos=self.quantile_pos, quantile_neg=self.quantile_neg,
            refresh_every=self.refresh_every, noise_std=self.noise_std,
            optim=OptimConfig(learning_rate=self.tta_learning_rate,
                              weight_decay=self.weight_decay),
            seed=self.seed, chunk=self.chunk, threads=self.threads)

    def synth_cfg(self) -> SynthConfig:
        return SynthConfig(
            height=self.height, width=self.width, bands=self.bands,
            background_classes=self.background_classes,
            length_scale=self.length_scale,
            implant_count=self.implant_count, alpha_min=self.alpha_min,
            alpha_max=self.alpha_max, noise_std=self.synth_noise_std,
            seed=self.seed)

    # -- validation and I/O -------------------------------------------------

    def validate(self) -> None:
        self.model_spec(self.bands).adapter_cfg().validate()
        self.model_spec(self.bands).encoder_cfg().validate()
        self.train_cfg().validate()
        self.train_cfg().optim.validate()
        self.tta_cfg().validate()
        self.synth_cfg().validate()
        if self.grid < 1:
            raise ValidationError("grid must be >= 1")
        if self.threads < 1 or self.chunk < 1:
            raise ValidationError("threads and chunk must be >= 1")

    def set_field(self, key: str, raw: str) -> None:
        """Assign one field from its textual form."""
        by_name = {f.name: f for f in fields(self)}
        if key not in by_name:
            raise ValidationError(f"unknown configuration key {key!r}")
        ftype = by_name[key].type
        try:
            if ftype == "bool" or ftype is bool:
                low = raw.strip().lower()
                if low in ("true", "1", "yes", "on"):
                    value = True
                elif low in ("false", "0", "no", "off"):
                    value = False
                else:
                    raise ValueError(raw)
            elif ftype == "int" or ftype is int:
                value = int(raw)
            else:
                value = float(raw)
        except ValueError as exc:
            raise ValidationError(
                f"bad value {raw!r} for configuration key {key!r}") from exc
        setattr(self, key, value)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# resolved run configuration\n")
            for f in fields(self):
                v = getattr(self, f.name)
                if isinstance(v, bool):
                    v = "true" if v else "false"
                fh.write(f"{f.name} = {v}\n")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _read_lines(path, depth: int) -> list[tuple[str, str]]:
    if depth > MAX_INCLUDE_DEPTH:
        raise ValidationError(f"configuration include depth exceeds "
                              f"{MAX_INCLUDE_DEPTH} at {path}")
    pairs: list[tuple[str, str]] = []
    base = os.path.dirname(os.path.abspath(str(path)))
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if text.startswith("include ") or text == "include":
                target = text[len("include"):].strip()
                if not target:
                    raise ValidationError(
                        f"{path}:{lineno}: include needs a path")
                pairs.extend(_read_lines(os.path.join(base, target), depth + 1))
                continue
            if "=" not in text:
                raise ValidationError(
                    f"{path}:{lineno}: expected key = value, got {text!r}")
            key, _, raw = text.partition("=")
            pairs.append((key.strip(), raw.strip()))
    return pairs


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults, then the file (with includes), then explicit overrides."""
    cfg = RunConfig()
    if path is not None:
        for key, raw in _read_lines(path, 0):
            cfg.set_field(key, raw)
    for key, raw in (overrides or {}).items():
        cfg.set_field(key, raw)
    return cfg


def parse_assignments(items: list[str]) -> dict[str, str]:
    """key=value strings (e.g. from repeated --set flags) to a dict."""
    out = {}
    for item in items:
        if "=" not in item:
            raise ValidationError(f"expected key=value, got {item!r}")
        key, _, raw = item.partition("=")
        out[key.strip()] = raw.strip()
    return out
