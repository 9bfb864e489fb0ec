"""Analytical FLOPs and parameter accounting for the refinement path of a pyramid.

Costs follow the same convention as the runtime primitives, so a report over a
desk-scale description equals what :class:`~app.core.flop_counter.FlopCounter`
measures while the live pyramid runs.
"""
import logging
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from jinja2 import Environment, FileSystemLoader

from app.core.exceptions import ConfigError
from app.core.ops import SIGMOID_FLOPS, SOFTMAX_FLOPS
from app.models.config import FlopsConfig, Placement, TccConfig, TccMode
from app.models.flops import (
    FlopsReport,
    KeyCountRow,
    LayerCost,
    LayerSpec,
    LevelDelta,
    RefinementComparison,
    ReportDelta,
    Variant,
)
from app.services.io_utils import atomic_write_text

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).parent.parent / "templates"


def flops_conv(
    in_channels: int,
    out_channels: int,
    kh: int,
    kw: int,
    out_height: int,
    out_width: int,
    has_bias: bool
) -> int:
    flops = 2 * kh * kw * in_channels * out_channels * out_height * out_width
    if has_bias:
        flops += out_height * out_width * out_channels
    return flops


def flops_tcc_level(H: int, W: int, C: int, Cr: int, n: int, stack_depth: int, mode: TccMode = "full") -> int:
    """FLOPs of one TCC block on an H×W level with C channels reduced to Cr."""
    if Cr > C:
        raise ConfigError(f"reduced channels {Cr} exceed pyramid width {C}", location="tcc.base_channels")
    positions = H * W
    residual = positions * C
    if Cr == 0:
        return residual
    keys = n + 1
    local = flops_conv(Cr, Cr, 3, 3, H, W, True)
    project = positions * Cr + 2 * positions * Cr * Cr     # query + context, W_A
    if mode == "local_only":
        per_stack = local + project
    else:
        condense = (
            flops_conv(Cr, n, 1, 1, H, W, True)            # importance scores
            + n * SIGMOID_FLOPS + n * Cr                   # gates
        )
        if mode == "no_transformer":
            mix = n * Cr + 2 * positions * Cr              # key sum, local + sum, 1/(n+1)
        else:
            mix = (
                2 * positions * keys * Cr                  # query · keys
                + positions * keys                         # 1/sqrt(Cr)
                + SOFTMAX_FLOPS * positions * keys
                + 2 * positions * keys * Cr                # weighted values
            )
        per_stack = local + condense + mix + project
    return (
        flops_conv(C, Cr, 1, 1, H, W, True)
        + stack_depth * per_stack
        + flops_conv(Cr, C, 1, 1, H, W, False)
        + residual
    )


def count_tcc_params(C: int, Cr: int, n: int, stack_depth: int, mode: TccMode = "full") -> int:
    per_stack = (9 * Cr * Cr + Cr) + Cr * Cr
    if mode != "local_only":
        per_stack += Cr * n + n
    return (C * Cr + Cr) + stack_depth * per_stack + Cr * C



def level_shapes(image_height: int, image_width: int, num_levels: int = 4) -> List[Tuple[int, int, int]]:
    """(stride, H_i, W_i) per level, strides 4·2^i."""
    shapes = []
    for i in range(num_levels):
        stride = 4 * 2 ** i
        shapes.append((stride, math.ceil(image_height / stride), math.ceil(image_width / stride)))
    return shapes


def describe_pyramid(
    width: int,
    image_hw: Tuple[int, int],
    refinement: Variant,
    tcc: Optional[TccConfig] = None,
    placement: Optional[Placement] = None,
    num_levels: int = 4,
    neighbors: Optional[Dict[int, List[int]]] = None
) -> List[LayerSpec]:
    """Layer list of the fusion adds and refinement path over ``num_levels`` levels."""
    tcc = tcc or TccConfig()
    placement = placement or tcc.placement
    if neighbors is None:
        neighbors = {i: ([i + 1] if i < num_levels - 1 else []) for i in range(num_levels)}
    shapes = level_shapes(image_hw[0], image_hw[1], num_levels)

    def tcc_layer(name: str, i: int, H: int, W: int) -> LayerSpec:
        if tcc.reduced_channels(i) > width:
            raise ConfigError(
                f"tcc reduced channels {tcc.reduced_channels(i)} at level {i} exceed pyramid width {width}",
                location="flops.pyramid_width",
            )
        return LayerSpec(
            name=name, kind="tcc", level=i, height=H, width=W,
            in_channels=width, out_channels=width,
            reduced_channels=tcc.reduced_channels(i), n_keys=tcc.n_keys, stack_depth=tcc.stack_depth,
            mode=tcc.mode,
        )

    layers = []
    for i, (_, H, W) in enumerate(shapes):
        if refinement == "tcc" and placement.before_fusion:
            layers.append(tcc_layer(f"p{i}.tcc_before", i, H, W))
        for j in neighbors.get(i, []):
            layers.append(LayerSpec(
                name=f"p{i}.fuse_from_p{j}", kind="add", level=i, height=H, width=W,
                in_channels=width, out_channels=width,
            ))
        if refinement == "conv3x3":
            layers.append(LayerSpec(
                name=f"p{i}.refine_conv3x3", kind="conv", level=i, height=H, width=W,
                in_channels=width, out_channels=width, kernel=3,
            ))
        elif refinement == "tcc" and placement.after_fusion:
            layers.append(tcc_layer(f"p{i}.tcc_after", i, H, W))
    return layers


def layer_cost(layer: LayerSpec) -> LayerCost:
    H, W = layer.height, layer.width
    if layer.kind == "conv":
        k = layer.kernel
        flops = flops_conv(layer.in_channels, layer.out_channels, k, k, H, W, layer.bias)
        params = k * k * layer.in_channels * layer.out_channels + (layer.out_channels if layer.bias else 0)
    elif layer.kind == "tcc":
        args = (layer.in_channels, layer.reduced_channels, layer.n_keys, layer.stack_depth, layer.mode)
        flops = flops_tcc_level(H, W, *args)
        params = count_tcc_params(*args)
    elif layer.kind == "add":
        flops, params = H * W * layer.out_channels, 0
    else:
        raise ConfigError(f"unknown layer kind '{layer.kind}'", location=layer.name)
    return LayerCost(
        name=layer.name, level=layer.level, flops=flops, params=params,
        output_shape=(layer.out_channels, H, W),
    )


def model_report(layers: Iterable[LayerSpec], label: str = "") -> FlopsReport:
    return FlopsReport(label=label, layers=[layer_cost(layer) for layer in layers])


def _relative(delta: int, base: int) -> Optional[float]:
    return delta / base if base else None


def compare(base: FlopsReport, variant: FlopsReport) -> ReportDelta:
    base_levels, variant_levels = base.by_level(), variant.by_level()
    levels = []
    for level in sorted(set(base_levels) | set(variant_levels)):
        b, v = base_levels.get(level, 0), variant_levels.get(level, 0)
        levels.append(LevelDelta(
            level=level, base_flops=b, variant_flops=v, delta_flops=v - b, relative=_relative(v - b, b),
        ))
    delta = variant.total_flops - base.total_flops
    return ReportDelta(
        base=base.label,
        variant=variant.label,
        base_flops=base.total_flops,
        variant_flops=variant.total_flops,
        delta_flops=delta,
        delta_params=variant.total_params - base.total_params,
        relative=_relative(delta, base.total_flops),
        levels=levels,
    )


ABLATION_MODES: Tuple[TccMode, ...] = ("local_only", "no_transformer")


def variant_reports(
    cfg: FlopsConfig,
    tcc: Optional[TccConfig] = None,
    placement: Optional[Placement] = None
) -> Dict[str, FlopsReport]:
    """Reports for none, conv3x3 and tcc, plus ``tcc_<mode>`` for each ablation mode."""
    tcc = tcc or TccConfig()
    hw = (cfg.image_height, cfg.image_width)

    def report(variant: Variant, label: str, config: TccConfig) -> FlopsReport:
        return model_report(
            describe_pyramid(cfg.pyramid_width, hw, variant, config, placement, cfg.num_levels),
            label=label,
        )

    reports = {variant: report(variant, variant, tcc) for variant in ("none", "conv3x3", "tcc")}
    for mode in ABLATION_MODES:
        reports[f"tcc_{mode}"] = report("tcc", f"tcc_{mode}", tcc.model_copy(update={"mode": mode}))
    return reports


def compare_refinements(
    cfg: Optional[FlopsConfig] = None,
    tcc: Optional[TccConfig] = None,
    placement: Optional[Placement] = None
) -> RefinementComparison:
    """Refinement-only deltas of conv3x3, TCC and the TCC ablations against no refinement."""
    cfg = cfg or FlopsConfig()
    reports = variant_reports(cfg, tcc, placement)
    conv_delta = compare(reports["none"], reports["conv3x3"])
    tcc_delta = compare(reports["none"], reports["tcc"])
    ratio = tcc_delta.delta_flops / conv_delta.delta_flops if conv_delta.delta_flops else 0.0
    logger.info(
        f"Refinement deltas at {cfg.image_height}x{cfg.image_width}, C={cfg.pyramid_width}: "
        f"conv3x3 {conv_delta.delta_flops / 1e9:.2f} GFLOPs, tcc {tcc_delta.delta_flops / 1e9:.2f} GFLOPs, "
        f"ratio {ratio:.3f}"
    )
    return RefinementComparison(
        image_height=cfg.image_height,
        image_width=cfg.image_width,
        pyramid_width=cfg.pyramid_width,
        conv_delta=conv_delta,
        tcc_delta=tcc_delta,
        delta_ratio=ratio,
        ablation_deltas=[compare(reports["none"], reports[f"tcc_{mode}"]) for mode in ABLATION_MODES],
    )



def key_count_sweep(
    cfg: Optional[FlopsConfig] = None,
    tcc: Optional[TccConfig] = None,
    placement: Optional[Placement] = None,
    n_values: Optional[Sequence[int]] = None
) -> List[KeyCountRow]:
    """TCC refinement cost per key count; extras are relative to ``tcc.n_keys``."""
    cfg = cfg or FlopsConfig()
    tcc = tcc or TccConfig()
    n_values = list(n_values or cfg.key_counts)
    hw = (cfg.image_height, cfg.image_width)

    def report(n: int) -> FlopsReport:
        variant = tcc.model_copy(update={"n_keys": n})
        return model_report(describe_pyramid(cfg.pyramid_width, hw, "tcc", variant, placement, cfg.num_levels))

    baseline = report(tcc.n_keys)
    rows = []
    for n in n_values:
        current = report(n)
        rows.append(KeyCountRow(
            n_keys=n,
            flops=current.total_flops,
            params=current.total_params,
            extra_flops=current.total_flops - baseline.total_flops,
            extra_params=current.total_params - baseline.total_params,
        ))
    return rows


class ReportWriter:
    """Writes reports as text (one layer per line) and as JSON."""

    def __init__(self, template_dir: Optional[Path] = None):
        self.env = Environment(
            loader=FileSystemLoader(str(template_dir or TEMPLATE_DIR)),
            keep_trailing_newline=True,
            trim_blocks=True,
            lstrip_blocks=True,
        )

    def render_text(self, report: FlopsReport) -> str:
        return self.env.get_template("flops_report.txt.jinja2").render(report=report)

    def render_comparison(self, comparison: RefinementComparison, sweep: Sequence[KeyCountRow] = ()) -> str:
        return self.env.get_template("flops_comparison.txt.jinja2").render(comparison=comparison, sweep=sweep)

    def write(self, out_dir: Path, name: str, report: FlopsReport) -> Tuple[Path, Path]:
        text_path = atomic_write_text(out_dir / f"{name}.txt", self.render_text(report))
        json_path = atomic_write_text(out_dir / f"{name}.json", report.model_dump_json(indent=2) + "\n")
        logger.info(f"Wrote FLOPs report '{report.label}' to {text_path} and {json_path}")
        return text_path, json_path


report_writer = ReportWriter()
