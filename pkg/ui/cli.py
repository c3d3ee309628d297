"""Command-line surface: gen-synth, select-bands, evaluate, predict-length, spectrum."""

from __future__ import annotations

import argparse
import json
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pandas as pd

from core.cube_io import Manifest, Split, read_axis, read_manifest
from core.evaluation import FoldUnit
from core.features import RGB_TARGETS_NM, nearest_band
from core.optimizer import GaConfig
from core.pipeline import (
    BandModel,
    LengthRule,
    PatchDataset,
    SelectionSpec,
    evaluate_bands,
    fit_band_model,
    length_frame,
    mean_absolute_error,
    select_bands,
    stem_predictions,
)
from core.svm import SvmConfig
from core.synth import SynthMode, SynthSpec, generate
from utils.config import APP_CONFIG, resolve_threads
from utils.logger import log, set_console

Handler = Callable[[argparse.Namespace, argparse.ArgumentParser], int]


def _parse_list(value: str, *, cast: type[float] | type[int], what: str) -> list[Any]:
    parts = [part.strip() for part in value.split(",") if part.strip()]
    if not parts:
        raise ValueError(f"empty {what} list")
    try:
        return [cast(part) for part in parts]
    except ValueError as exc:
        raise ValueError(f"invalid {what} list {value!r}") from exc


def _int_list(value: str) -> list[int]:
    try:
        return _parse_list(value, cast=int, what="integer")
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _float_list(value: str) -> list[float]:
    try:
        return _parse_list(value, cast=float, what="number")
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _band_tokens(value: str) -> list[str]:
    tokens = [token.strip().lower() for token in value.split(",") if token.strip()]
    if not tokens:
        raise argparse.ArgumentTypeError("empty band list")
    for token in tokens:
        if token != "rgb" and not token.lstrip("-").isdigit():
            raise argparse.ArgumentTypeError(f"band token {token!r} is neither an index nor 'rgb'")
    return tokens


def _resolve_band_tokens(tokens: Sequence[str], axis: np.ndarray) -> list[int]:
    """Expand 'rgb' and check indices against the cube axis."""
    bands: list[int] = []
    for token in tokens:
        if token == "rgb":
            bands.extend(nearest_band(axis, target) for target in RGB_TARGETS_NM)
        else:
            bands.append(int(token))
    for band in bands:
        if not 0 <= band < axis.size:
            raise ValueError(f"band index {band} outside [0, {axis.size - 1}]")
    if len(set(bands)) != len(bands):
        raise ValueError(f"duplicate band indices in {bands}")
    return bands


def _write_json(payload: dict[str, Any], path: Path) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    log(f"Wrote {path}")


def _write_csv(frame: pd.DataFrame, path: Path) -> None:
    frame.to_csv(path, index=False, lineterminator="\n")
    log(f"Wrote {path} ({len(frame)} rows)")


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_manifest(args: argparse.Namespace, parser: argparse.ArgumentParser) -> tuple[Manifest, np.ndarray]:
    """Manifest plus the first cube's axis; unreadable inputs are usage errors."""
    path = Path(args.manifest)
    if not path.is_file():
        parser.error(f"manifest not found: {path}")
    manifest = read_manifest(path)
    return manifest, read_axis(manifest.cube_file(manifest.records[0]))


def _selection_spec(args: argparse.Namespace, parser: argparse.ArgumentParser) -> SelectionSpec:
    try:
        ga = GaConfig(
            population=args.population,
            max_generations=args.generations,
            crossover_prob=args.crossover,
            mutation_prob=args.mutation,
            elite_count=args.elite,
            runs=args.runs,
            stall_window=args.stall_window,
            stall_tol=args.stall_tol,
            laplace_a=args.laplace_a,
            laplace_b=args.laplace_b,
            power_p=args.power_p,
            k=args.k,
            seed=args.seed,
        )
        return SelectionSpec(
            k=args.k,
            include_rgb=not args.no_rgb,
            ga=ga,
            svm=SvmConfig(c=args.svm_c, gamma=args.svm_gamma),
            cv_folds=args.folds,
            fold_unit=FoldUnit(args.fold_unit),
            patch_width=args.patch_width,
            mask_threshold=args.mask_threshold,
        )
    except ValueError as exc:
        parser.error(str(exc))


def _bands_from_flags(args: argparse.Namespace, parser: argparse.ArgumentParser, axis: np.ndarray) -> list[int]:
    try:
        if args.bands is not None:
            return _resolve_band_tokens(args.bands, axis)
        if args.wavelengths is not None:
            return _resolve_band_tokens([str(nearest_band(axis, nm)) for nm in args.wavelengths], axis)
        if args.selection is not None:
            payload = json.loads(Path(args.selection).read_text(encoding="utf-8"))
            return _resolve_band_tokens([str(band) for band in payload["bands"]], axis)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read band list from --selection: {exc}")
    except ValueError as exc:
        parser.error(str(exc))
    parser.error("one of --bands, --wavelengths or --selection is required")


def cmd_gen_synth(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    mode = SynthMode(args.mode)
    if mode is SynthMode.LOCALIZED and args.planted_bands is None:
        parser.error("--planted-bands is required in localized mode")
    if args.lesion_mm is not None and len(args.lesion_mm) != 2:
        parser.error("--lesion-mm takes exactly two values: low,high")
    defaults = SynthSpec()
    spec = SynthSpec(
        n_stems_train=args.stems_train,
        n_stems_test=args.stems_test,
        rows=args.rows,
        cols=args.cols,
        n_bands=args.n_bands,
        wavelength_lo=args.wavelength_lo,
        wavelength_hi=args.wavelength_hi,
        planted_bands=tuple(args.planted_bands or ()),
        band_halfwidth=args.halfwidth,
        attenuation=args.alpha,
        noise_sd=args.noise,
        mode=mode,
        broad_attenuation=args.broad_alpha,
        lesion_mm_range=tuple(args.lesion_mm) if args.lesion_mm is not None else defaults.lesion_mm_range,
        scale_mm_per_px=args.scale,
        dai_values=tuple(args.dai) if args.dai is not None else defaults.dai_values,
        patch_width=args.patch_width,
        bands_per_lesion=args.bands_per_lesion,
        lesions_grow_with_dai=not args.flat_lesions,
        seed=args.seed,
    )
    try:
        spec.validate()
    except ValueError as exc:
        parser.error(str(exc))

    out = _out_dir(args)
    generate(spec, out)
    print(out / APP_CONFIG.manifest_file)
    return 0


def cmd_select(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    spec = _selection_spec(args, parser)
    threads = _threads(args, parser)
    manifest, _ = _load_manifest(args, parser)
    out = _out_dir(args)

    result = select_bands(manifest, spec=spec, max_parallel_tasks=threads)
    _write_json(result.to_dict(), out / APP_CONFIG.selection_file)
    _write_csv(result.history_frame(), out / APP_CONFIG.history_file)
    _write_json(result.evaluation.trained.to_dict(), out / APP_CONFIG.model_file)
    print(" ".join(f"{nm:.2f}" for nm in result.band_wavelengths))
    return 0


def cmd_evaluate(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    spec = _selection_spec(args, parser)
    manifest, axis = _load_manifest(args, parser)
    bands = _bands_from_flags(args, parser, axis)
    out = _out_dir(args)

    evaluation = evaluate_bands(manifest, bands=bands, spec=spec)
    _write_json(evaluation.to_dict(), out / APP_CONFIG.report_file)
    _write_json(evaluation.trained.to_dict(), out / APP_CONFIG.model_file)
    print(f"patch F1 {evaluation.test_report.f1:.4f}  stem F1 {evaluation.stem_report.f1:.4f}")
    return 0


def cmd_predict_length(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    spec = _selection_spec(args, parser)
    manifest, axis = _load_manifest(args, parser)
    trained: BandModel | None = None
    bands: list[int] = []
    if args.model is not None:
        try:
            trained = BandModel.from_dict(json.loads(Path(args.model).read_text(encoding="utf-8")))
            _resolve_band_tokens([str(band) for band in trained.bands], axis)
        except (OSError, json.JSONDecodeError, ValueError) as exc:
            parser.error(f"cannot use --model: {exc}")
    else:
        bands = _bands_from_flags(args, parser, axis)
    out = _out_dir(args)

    patch_width = trained.patch_width if trained is not None else spec.patch_width
    mask_threshold = trained.mask_threshold if trained is not None else spec.mask_threshold
    dataset = PatchDataset.build(manifest, patch_width=patch_width, mask_threshold=mask_threshold)
    if trained is None:
        trained = fit_band_model(dataset.subset(Split.TRAIN), bands, spec)
    scored = dataset if args.split == "all" else dataset.subset(args.split)
    stems = stem_predictions(scored, trained.predict(scored))
    frame = length_frame(stems, patch_width, manifest.scale_mm_per_px, args.length_rule)
    _write_csv(frame, out / APP_CONFIG.lengths_file)
    print(f"MAE {mean_absolute_error(frame):.4f} mm")
    return 0


def cmd_spectrum(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    if args.patch_width < 1:
        parser.error("--patch-width must be >= 1")
    manifest, _ = _load_manifest(args, parser)
    out = _out_dir(args)

    dataset = PatchDataset.build(manifest, patch_width=args.patch_width, mask_threshold=args.mask_threshold)
    if args.split != "all":
        dataset = dataset.subset(args.split)
    _write_csv(dataset.spectrum().to_frame(), out / APP_CONFIG.spectrum_file)
    print(out / APP_CONFIG.spectrum_file)
    return 0


def _threads(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    try:
        return resolve_threads(args.threads)
    except ValueError as exc:
        parser.error(str(exc))


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed")
    common.add_argument("--threads", type=int, default=0, help="concurrent fitness evaluations (0 = all cores)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--quiet", action="store_true", help="no progress log on stderr")
    return common


def _experiment_flags(parser: argparse.ArgumentParser) -> None:
    ga, svm = GaConfig(), SvmConfig()
    parser.add_argument("--manifest", required=True)
    parser.add_argument("--k", type=int, default=3, help="variable bands chosen by the GA")
    parser.add_argument("--no-rgb", action="store_true", help="do not fix the RGB bands")
    parser.add_argument("--population", type=int, default=ga.population)
    parser.add_argument("--generations", type=int, default=ga.max_generations)
    parser.add_argument("--runs", type=int, default=ga.runs)
    parser.add_argument("--crossover", type=float, default=ga.crossover_prob)
    parser.add_argument("--mutation", type=float, default=ga.mutation_prob)
    parser.add_argument("--elite", type=int, default=ga.elite_count)
    parser.add_argument("--stall-window", type=int, default=ga.stall_window)
    parser.add_argument("--stall-tol", type=float, default=ga.stall_tol)
    parser.add_argument("--laplace-a", type=float, default=ga.laplace_a)
    parser.add_argument("--laplace-b", type=float, default=ga.laplace_b)
    parser.add_argument("--power-p", type=float, default=ga.power_p)
    parser.add_argument("--svm-c", type=float, default=svm.c)
    parser.add_argument("--svm-gamma", type=float, default=svm.gamma)
    parser.add_argument("--folds", type=int, default=10)
    parser.add_argument("--fold-unit", choices=[unit.value for unit in FoldUnit], default=FoldUnit.PATCH.value)
    parser.add_argument("--patch-width", type=int, default=64)
    parser.add_argument("--mask-threshold", type=float, default=None)


def _band_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--bands", type=_band_tokens, help="comma list of band indices; 'rgb' expands to the RGB bands")
    group.add_argument("--wavelengths", type=_float_list, help="comma list of nm values mapped to nearest bands")
    group.add_argument("--selection", help="selection.json whose bands are evaluated")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="charcoal-rot-bands",
        description=f"{APP_CONFIG.app_name} {APP_CONFIG.version}",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    common = _common_flags()
    synth = SynthSpec()

    gen = commands.add_parser("gen-synth", parents=[common], help="write a synthetic stem dataset")
    gen.add_argument("--stems-train", type=int, default=synth.n_stems_train)
    gen.add_argument("--stems-test", type=int, default=synth.n_stems_test)
    gen.add_argument("--rows", type=int, default=synth.rows)
    gen.add_argument("--cols", type=int, default=synth.cols)
    gen.add_argument("--n-bands", type=int, default=synth.n_bands)
    gen.add_argument("--wavelength-lo", type=float, default=synth.wavelength_lo)
    gen.add_argument("--wavelength-hi", type=float, default=synth.wavelength_hi)
    gen.add_argument("--planted-bands", type=_int_list, default=None)
    gen.add_argument("--halfwidth", type=int, default=synth.band_halfwidth)
    gen.add_argument("--mode", choices=[mode.value for mode in SynthMode], default=SynthMode.LOCALIZED.value)
    gen.add_argument("--alpha", type=float, default=synth.attenuation)
    gen.add_argument("--broad-alpha", type=float, default=synth.broad_attenuation)
    gen.add_argument("--noise", type=float, default=synth.noise_sd)
    gen.add_argument("--lesion-mm", type=_float_list, default=None, help="low,high interior lesion range")
    gen.add_argument("--scale", type=float, default=synth.scale_mm_per_px)
    gen.add_argument("--dai", type=_int_list, default=None)
    gen.add_argument("--patch-width", type=int, default=synth.patch_width)
    gen.add_argument("--bands-per-lesion", type=int, default=synth.bands_per_lesion, help="planted bands each lesion darkens")
    gen.add_argument("--flat-lesions", action="store_true", help="draw every lesion from the full --lesion-mm range")
    gen.set_defaults(handler=cmd_gen_synth, command_parser=gen)

    select = commands.add_parser("select-bands", parents=[common], help="GA band selection")
    _experiment_flags(select)
    select.set_defaults(handler=cmd_select, command_parser=select)

    evaluate = commands.add_parser("evaluate", parents=[common], help="evaluate a fixed band list")
    _experiment_flags(evaluate)
    _band_flags(evaluate)
    evaluate.set_defaults(handler=cmd_evaluate, command_parser=evaluate)

    lengths = commands.add_parser("predict-length", parents=[common], help="per-stem disease length")
    _experiment_flags(lengths)
    _band_flags(lengths)
    lengths.add_argument("--model", help="model.json written by select-bands or evaluate")
    lengths.add_argument("--length-rule", choices=[rule.value for rule in LengthRule], default=LengthRule.FARTHEST.value)
    lengths.add_argument("--split", choices=["all", Split.TRAIN.value, Split.TEST.value], default=Split.TEST.value)
    lengths.set_defaults(handler=cmd_predict_length, command_parser=lengths)

    spectrum = commands.add_parser("spectrum", parents=[common], help="mean healthy/infected reflectance curves")
    spectrum.add_argument("--manifest", required=True)
    spectrum.add_argument("--patch-width", type=int, default=64)
    spectrum.add_argument("--mask-threshold", type=float, default=None)
    spectrum.add_argument("--split", choices=["all", Split.TRAIN.value, Split.TEST.value], default="all")
    spectrum.set_defaults(handler=cmd_spectrum, command_parser=spectrum)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand; returns 0 on success, 1 on runtime errors, 2 on usage errors."""
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
        set_console(not args.quiet)
        handler: Handler = args.handler
        return handler(args, args.command_parser)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        set_console(True)
