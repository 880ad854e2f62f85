"""Raw attention-map dumps and a teacher/student cross-attention gap."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .autograd import ParamStore
from .matching import adaptive_match_batch
from .nn import ModelConfig, forward
from .scenes import SceneSample, stack_grids


def attention_maps(params: ParamStore, cfg: ModelConfig, grids: np.ndarray):
    """Per-layer (B, M, N, N) self and (B, M, N, HW) cross maps of the model's own queries."""
    out = forward(params.frozen(), cfg, grids.astype(params["backbone.proj.w"].dtype))
    return (
        [a.values for a in out.attention.self_attn],
        [a.values for a in out.attention.cross_attn],
        out,
    )


def dump_attention(params: ParamStore, cfg: ModelConfig, scene: SceneSample, out_dir: str | Path) -> list[Path]:
    """One CSV per (kind, layer, head): `attn_{self|cross}_L{l}_H{h}.csv`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sa, ca, _ = attention_maps(params, cfg, stack_grids([scene]))
    written = []
    for kind, maps in (("self", sa), ("cross", ca)):
        for layer, m in enumerate(maps):
            for head in range(m.shape[1]):
                path = out_dir / f"attn_{kind}_L{layer}_H{head}.csv"
                np.savetxt(path, m[0, head].astype(np.float64), delimiter=",", fmt="%.10g")
                written.append(path)
    return written


def dump_pair(
    teacher: ParamStore, tcfg: ModelConfig, student: ParamStore, scfg: ModelConfig, scene: SceneSample,
    out_dir: str | Path,
) -> dict[str, list[Path]]:
    out_dir = Path(out_dir)
    return {
        "teacher": dump_attention(teacher, tcfg, scene, out_dir / "teacher"),
        "student": dump_attention(student, scfg, scene, out_dir / "student"),
    }


def cross_attention_gap(
    teacher: ParamStore, tcfg: ModelConfig, student: ParamStore, scfg: ModelConfig,
    scenes: Sequence[SceneSample], layers: Sequence[int], batch_size: int = 64,
) -> float:
    """Mean squared difference between student cross maps and the adaptively matched teacher rows.

    `layers[k]` is the teacher layer compared with student layer k.
    """
    total, count = 0.0, 0
    for start in range(0, len(scenes), batch_size):
        grids = stack_grids(scenes[start : start + batch_size])
        _, t_ca, t_out = attention_maps(teacher, tcfg, grids)
        _, s_ca, s_out = attention_maps(student, scfg, grids)
        for k, tk in enumerate(layers):
            idx = adaptive_match_batch(
                s_out.probs[k].values, s_out.boxes[k].values, t_out.probs[tk].values, t_out.boxes[tk].values
            )
            sel = np.take_along_axis(t_ca[tk], idx[:, None, :, None], axis=2)
            diff = s_ca[k].astype(np.float64) - sel
            total += float(np.sum(diff**2))
            count += diff.size
    return total / max(count, 1)
