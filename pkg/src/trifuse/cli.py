"""Command-line surface: fuse, eval, sweep, stats and link subcommands.

Every command is deterministic given (inputs, flags, seed). Exit codes:
0 success, 2 input/schema error, 3 external-scorer failure, 4 internal
invariant violation. A ``--config FILE`` of key=value lines mirrors every
flag (keys are the long flag names without the leading dashes); explicit
flags win over the config file. TRIFUSE_THREADS caps per-scan workers.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
from pathlib import Path

from . import fileio
from .domain import PipelineConfig, SOURCE_MODEL_A, SOURCE_MODEL_B
from .errors import ConfigError, InputError, InvariantError, ScorerError
from .froc import (
    STRATIFIERS,
    detection_probability_summary,
    evaluate,
    match_lesions,
    resolve_stratifier,
    stratified_eval,
)
from .fusion import CommandCadxProvider, FileCadxProvider, fuse_scans
from .readerstats import detected_vs_missed_table, missed_overlap_table
from .reportlink import (
    LinkCandidate,
    default_grammar,
    extract_entities,
    load_grammar,
    lobe_of_candidate,
    match_entities,
)
from .sweeps import (
    CADE_PRESET_THRESHOLDS,
    CADX_PRESET_THRESHOLDS,
    sweep_cade,
    sweep_cadx,
)
from .volume import Volume, load_volume

DEFAULT_SEED = 17
DEFAULT_RESAMPLES = 1000


def _worker_count() -> int:
    raw = os.environ.get("TRIFUSE_THREADS", "")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"TRIFUSE_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


class _Options:
    """Layered option lookup: explicit flag, then config file, then default."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config = fileio.parse_config_file(args.config) if args.config else {}

    def get(self, name: str, default=None, cast=str):
        value = getattr(self.args, name.replace("-", "_"), None)
        if value is not None:
            return value
        if name in self.config:
            raw = self.config[name]
            try:
                return cast(raw)
            except (TypeError, ValueError):
                raise ConfigError(f"config key {name!r} has invalid value {raw!r}") from None
        return default

    def get_flag(self, name: str) -> bool:
        if getattr(self.args, name.replace("-", "_"), False):
            return True
        raw = self.config.get(name, "").lower()
        return raw in ("1", "true", "yes", "on")

    def require(self, name: str, cast=str):
        value = self.get(name, None, cast)
        if value is None:
            raise InputError(f"missing required option --{name} (flag or config key)")
        return value

    def choice(self, name: str, choices: tuple[str, ...], default=None):
        value = self.get(name, default)
        if value is None:
            raise InputError(f"missing required option --{name} (flag or config key)")
        if value not in choices:
            raise InputError(f"--{name} must be one of {choices}, got {value!r}")
        return value


def _parse_thresholds(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise InputError(f"malformed threshold list {text!r}") from None


def _volume_dir_loader(directory: str | Path, kind: str):
    """Per-scan volume loader with caching; records which files were read."""
    directory = Path(directory)
    cache: dict[str, Volume] = {}
    loaded: dict[str, Path] = {}

    def load(scan_id: str) -> Volume:
        if scan_id not in cache:
            header = directory / f"{scan_id}.hdr"
            if not header.exists():
                raise InputError(f"no {kind} volume for scan {scan_id!r}: {header} not found")
            cache[scan_id] = load_volume(header)
            loaded[scan_id] = header
        return cache[scan_id]

    return load, loaded


def _pipeline_config(opts: _Options, seed: int) -> PipelineConfig:
    lung_labels = opts.get("lung-labels", None)
    if isinstance(lung_labels, str):
        lung_labels = frozenset(int(v) for v in lung_labels.split(",") if v.strip())
    kwargs = dict(
        tau_cadx=opts.get("tau-cadx", 0.10, float),
        tau_cade=opts.get("tau-cade", 0.20, float),
        consensus_radius_policy=opts.get("consensus-radius-policy", "adaptive"),
        consensus_radius_mm=opts.get("consensus-radius-mm", 5.0, float),
        dedup_radius_mm=opts.get("dedup-radius-mm", 2.0, float),
        bootstrap_resamples=opts.get("resamples", DEFAULT_RESAMPLES, int),
        rng_seed=seed,
    )
    if lung_labels:
        kwargs["lung_labels"] = lung_labels
    return PipelineConfig(**kwargs)


def cmd_fuse(args: argparse.Namespace) -> int:
    opts = _Options(args)
    convention = opts.choice("coordinate-convention", ("lps", "ras"), "lps")
    seed = opts.get("seed", DEFAULT_SEED, int)
    cfg = _pipeline_config(opts, seed)
    cade_a = opts.require("cade-a")
    cade_b = opts.require("cade-b")
    out_path = Path(opts.require("out"))

    candidates_a = fileio.read_candidates(cade_a, convention, expected_model=SOURCE_MODEL_A)
    candidates_b = fileio.read_candidates(cade_b, convention, expected_model=SOURCE_MODEL_B)

    cadx_scores_path = opts.get("cadx-scores")
    cadx_cmd = opts.get("cadx-cmd")
    if cadx_scores_path and cadx_cmd:
        raise InputError("use either --cadx-scores or --cadx-cmd, not both")
    provider = None
    if cadx_scores_path:
        provider = FileCadxProvider(fileio.read_cadx_scores(cadx_scores_path))
    elif cadx_cmd:
        volumes_dir = opts.get("volumes")
        if not volumes_dir:
            raise InputError("--cadx-cmd needs --volumes DIR to extract patches from")
        volume_loader, _ = _volume_dir_loader(volumes_dir, "intensity")
        provider = CommandCadxProvider(
            cadx_cmd, volume_loader, workdir=Path(tempfile.mkdtemp(prefix="trifuse_patch_"))
        )

    masks_dir = opts.get("masks")
    mask_loader = None
    masks_loaded: dict[str, Path] = {}
    if masks_dir:
        mask_loader, masks_loaded = _volume_dir_loader(masks_dir, "mask")

    output = fuse_scans(
        candidates_a,
        candidates_b,
        cadx_provider=provider,
        masks=mask_loader,
        cfg=cfg,
        max_workers=_worker_count(),
    )

    inputs = {"cade_a": cade_a, "cade_b": cade_b}
    if cadx_scores_path:
        inputs["cadx_scores"] = cadx_scores_path
    for scan_id, header in sorted(masks_loaded.items()):
        inputs[f"mask:{scan_id}"] = header
    manifest = fileio.build_manifest(
        command="fuse",
        config={
            "tau_cadx": cfg.tau_cadx,
            "tau_cade": cfg.tau_cade,
            "consensus_radius_policy": cfg.consensus_radius_policy,
            "consensus_radius_mm": cfg.consensus_radius_mm,
            "dedup_radius_mm": cfg.dedup_radius_mm,
            "lung_labels": sorted(cfg.lung_labels),
            "coordinate_convention": convention,
            "cadx_cmd": cadx_cmd or None,
        },
        inputs=inputs,
        seed=seed,
    )
    fileio.write_fused_csv(out_path, output.fused, manifest["digest"])
    fileio.write_manifest(out_path.parent / (out_path.stem + ".manifest.json"), manifest)
    print(f"fused {len(output.fused)} candidates across {len(output.per_scan)} scans -> {out_path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    opts = _Options(args)
    convention = opts.choice("coordinate-convention", ("lps", "ras"), "lps")
    seed = opts.get("seed", DEFAULT_SEED, int)
    resamples = opts.get("resamples", DEFAULT_RESAMPLES, int)
    with_ci = opts.get_flag("ci")
    candidates_path = opts.require("candidates")
    references_path = opts.require("references")
    out_dir = Path(opts.require("out"))

    candidates = fileio.read_candidates(candidates_path, convention)
    references = fileio.read_references(references_path, convention)
    if not references:
        raise InputError(f"{references_path}: no reference lesions")
    label = opts.get("label") or Path(candidates_path).stem

    stratify_name = opts.get("stratify")
    if stratify_name is not None and stratify_name not in STRATIFIERS:
        raise InputError(f"--stratify must be one of {STRATIFIERS}, got {stratify_name!r}")
    warnings: tuple[str, ...] = ()
    named = {}
    if stratify_name:
        stratified = stratified_eval(
            candidates,
            references,
            resolve_stratifier(stratify_name),
            ci=with_ci,
            resamples=resamples,
            seed=seed,
        )
        named["overall"] = stratified.overall
        named.update(stratified.strata)
        warnings = stratified.warnings
    else:
        named["overall"] = evaluate(
            candidates, references, ci=with_ci, resamples=resamples, seed=seed
        )

    manifest = fileio.build_manifest(
        command="eval",
        config={
            "stratify": stratify_name or None,
            "ci": with_ci,
            "resamples": resamples if with_ci else None,
            "coordinate_convention": convention,
            "label": label,
        },
        inputs={"candidates": candidates_path, "references": references_path},
        seed=seed,
    )
    digest = manifest["digest"]
    payload = {
        "manifest_digest": digest,
        "label": label,
        "overall": fileio.froc_result_payload(named["overall"]),
        "strata": {
            name: fileio.froc_result_payload(result)
            for name, result in named.items()
            if name != "overall"
        },
        "warnings": list(warnings),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    fileio.write_json(out_dir / "metrics.json", payload, sig=6)
    fileio.write_json(out_dir / "metrics.raw.json", payload)
    fileio.write_csv(out_dir / "metrics.csv", fileio.METRICS_CSV_HEADER,
                     fileio.metrics_csv_rows(named), digest)
    matches = match_lesions(candidates, references)
    fileio.write_matches_csv(out_dir / "matches.csv", matches, label, digest)
    fileio.write_manifest(out_dir / "manifest.json", manifest)
    for warning in warnings:
        print(f"warning: {warning}", file=sys.stderr)
    print(f"evaluated {len(candidates)} candidates against {len(references)} lesions -> {out_dir}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    opts = _Options(args)
    convention = opts.choice("coordinate-convention", ("lps", "ras"), "lps")
    seed = opts.get("seed", DEFAULT_SEED, int)
    mode = opts.choice("mode", ("cadx", "cade"))
    out_path = Path(opts.require("out"))

    threshold_text = opts.get("thresholds")
    preset = opts.get_flag("preset")
    if threshold_text and preset:
        raise InputError("use either --thresholds or --preset, not both")
    if threshold_text:
        thresholds = _parse_thresholds(threshold_text)
    elif preset:
        thresholds = list(CADX_PRESET_THRESHOLDS if mode == "cadx" else CADE_PRESET_THRESHOLDS)
    else:
        raise InputError("sweep needs --thresholds LIST or --preset")

    if mode == "cadx":
        scored_path = opts.get("scored")
        if not scored_path:
            raise InputError("--mode cadx needs --scored FILE")
        scores, labels = fileio.read_labeled_scores(scored_path)
        rows = sweep_cadx(scores, labels, thresholds)
        manifest = fileio.build_manifest(
            command="sweep",
            config={"mode": mode, "thresholds": thresholds},
            inputs={"scored": scored_path},
            seed=seed,
        )
        fileio.write_cadx_sweep_csv(out_path, rows, manifest["digest"])
    else:
        candidates_path = opts.get("candidates")
        references_path = opts.get("references")
        if not candidates_path or not references_path:
            raise InputError("--mode cade needs --candidates FILE and --references FILE")
        candidates = fileio.read_candidates(candidates_path, convention)
        references = fileio.read_references(references_path, convention)
        rows = sweep_cade(candidates, references, thresholds)
        manifest = fileio.build_manifest(
            command="sweep",
            config={"mode": mode, "thresholds": thresholds,
                    "coordinate_convention": convention},
            inputs={"candidates": candidates_path, "references": references_path},
            seed=seed,
        )
        fileio.write_cade_sweep_csv(out_path, rows, manifest["digest"])
    fileio.write_manifest(out_path.parent / (out_path.stem + ".manifest.json"), manifest)
    print(f"swept {len(thresholds)} thresholds ({mode}) -> {out_path}")
    return 0


def _load_match_tables(matches_dir: str | Path, references) -> dict:
    files = sorted(Path(matches_dir).glob("*.csv"))
    if not files:
        raise InputError(f"{matches_dir}: no match CSV files found")
    tables = fileio.read_match_files(files)
    ref_keys = {r.key for r in references}
    for model, table in tables.items():
        if set(table) != ref_keys:
            raise InputError(
                f"match table for model {model!r} does not cover the reference set exactly"
            )
    return tables


def cmd_stats(args: argparse.Namespace) -> int:
    opts = _Options(args)
    convention = opts.choice("coordinate-convention", ("lps", "ras"), "lps")
    seed = opts.get("seed", DEFAULT_SEED, int)
    analysis = opts.choice("analysis", ("consensus", "semantic", "overlap"))
    per_model = opts.get_flag("per-model")
    matches_dir = opts.require("matches")
    references_path = opts.require("references")
    out_path = Path(opts.require("out"))
    references = fileio.read_references(references_path, convention)
    if not references:
        raise InputError(f"{references_path}: no reference lesions")
    tables = _load_match_tables(matches_dir, references)

    match_files = {f"matches:{p.stem}": p for p in sorted(Path(matches_dir).glob("*.csv"))}
    manifest = fileio.build_manifest(
        command="stats",
        config={"analysis": analysis, "per_model": per_model},
        inputs={"references": references_path, **match_files},
        seed=seed,
    )
    digest = manifest["digest"]

    if analysis == "consensus":
        summaries = {
            model: detection_probability_summary(
                {k: v for k, v in table.items() if v is not None}, references, "consensus"
            )
            for model, table in tables.items()
        }
        fileio.write_consensus_csv(out_path, summaries, digest)
    elif analysis == "semantic":
        detected_by_model = {
            model: {k for k, v in table.items() if v is not None}
            for model, table in tables.items()
        }
        if per_model:
            result = detected_vs_missed_table(detected_by_model, references, pooled=False)
        else:
            result = {"pooled": detected_vs_missed_table(detected_by_model, references, pooled=True)}
        fileio.write_semantic_csv(out_path, result, digest)
        for table in result.values():
            for diagnostic in table.diagnostics:
                print(f"warning: {diagnostic}", file=sys.stderr)
    else:
        missed_by_model = {
            model: {k for k, v in table.items() if v is None}
            for model, table in tables.items()
        }
        rows = missed_overlap_table(missed_by_model, references)
        fileio.write_overlap_csv(out_path, rows, digest)
    fileio.write_manifest(out_path.parent / (out_path.stem + ".manifest.json"), manifest)
    print(f"{analysis} analysis over {len(tables)} model(s) -> {out_path}")
    return 0


def cmd_link(args: argparse.Namespace) -> int:
    opts = _Options(args)
    convention = opts.choice("coordinate-convention", ("lps", "ras"), "lps")
    seed = opts.get("seed", DEFAULT_SEED, int)
    reports_path = opts.require("reports")
    fused_path = opts.require("fused")
    out_path = Path(opts.require("out"))
    size_tol = opts.get("size-tol-mm", 3.0, float)
    ordinal_tol = opts.get("ordinal-tol", 1, int)
    grammar_path = opts.get("grammar")

    reports = fileio.read_reports(reports_path)
    grammar = load_grammar(grammar_path) if grammar_path else default_grammar()
    fused = fileio.read_fused(fused_path, convention)

    mask_loader = None
    masks_loaded: dict[str, Path] = {}
    if opts.get("masks"):
        mask_loader, masks_loaded = _volume_dir_loader(opts.get("masks"), "mask")

    entities = []
    reported_scans = set()
    for report_id, scan_id, text in reports:
        reported_scans.add(scan_id)
        entities.extend(extract_entities(text, grammar, report_id=report_id, scan_id=scan_id))

    # linkage is scoped to scans that have a report; candidates on scans
    # never mentioned in any report stay out of the match table
    candidates = []
    for record in fused:
        if record.scan_id not in reported_scans:
            continue
        lobe = None
        if mask_loader is not None:
            mask = mask_loader(record.scan_id)
            lobe = lobe_of_candidate(record, mask)
        candidates.append(
            LinkCandidate(
                scan_id=record.scan_id,
                candidate_id=record.candidate_id,
                center=record.center,
                tier=record.tier,
                score=record.score,
                diameter_mm=record.diameter_mm,
                lobe=lobe,
            )
        )

    matches = []
    scan_ids = sorted({e.scan_id for e in entities} | {c.scan_id for c in candidates})
    for scan_id in scan_ids:
        matches.extend(
            match_entities(
                [e for e in entities if e.scan_id == scan_id],
                [c for c in candidates if c.scan_id == scan_id],
                size_tol_mm=size_tol,
                ordinal_tol=ordinal_tol,
            )
        )

    inputs = {"reports": reports_path, "fused": fused_path}
    if grammar_path:
        inputs["grammar"] = grammar_path
    for scan_id, header in sorted(masks_loaded.items()):
        inputs[f"mask:{scan_id}"] = header
    manifest = fileio.build_manifest(
        command="link",
        config={"size_tol_mm": size_tol, "ordinal_tol": ordinal_tol,
                "coordinate_convention": convention},
        inputs=inputs,
        seed=seed,
    )
    fileio.write_entity_matches_csv(out_path, matches, manifest["digest"])
    fileio.write_entities_csv(
        out_path.parent / (out_path.stem + ".entities.csv"), entities, manifest["digest"]
    )
    fileio.write_manifest(out_path.parent / (out_path.stem + ".manifest.json"), manifest)
    matched = sum(1 for m in matches if m.status == "matched")
    print(f"linked {matched}/{len(entities)} entities -> {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trifuse",
        description="Fuse detector candidate lists and evaluate lesion-level performance.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p: argparse.ArgumentParser):
        p.add_argument("--config", help="key=value file mirroring the flags")
        p.add_argument("--seed", type=int, help="seed for all randomness (default 17)")
        p.add_argument("--coordinate-convention", choices=("lps", "ras"),
                       help="convention of input world coordinates (default lps)")

    p = sub.add_parser("fuse", help="run tri-stage fusion over two candidate lists")
    p.add_argument("--cade-a", help="CSV of CADE_A candidates")
    p.add_argument("--cade-b", help="CSV of CADE_B candidates")
    p.add_argument("--cadx-scores", help="CSV of precomputed classifier scores")
    p.add_argument("--cadx-cmd", help="external scorer command (reads patch header path on stdin)")
    p.add_argument("--volumes", help="directory of <scan_id>.hdr intensity volumes for --cadx-cmd")
    p.add_argument("--masks", help="directory of <scan_id>.hdr lobe label volumes")
    p.add_argument("--tau-cadx", type=float, help="malignancy promotion threshold (default 0.10)")
    p.add_argument("--tau-cade", type=float, help="detector retention threshold (default 0.20)")
    p.add_argument("--out", help="output fused CSV path")
    common(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="lesion-level FROC evaluation")
    p.add_argument("--candidates", help="candidate CSV (raw or fused)")
    p.add_argument("--references", help="reference nodule CSV")
    p.add_argument("--stratify", choices=STRATIFIERS, help="optional stratified analysis")
    p.add_argument("--ci", action="store_true", help="bootstrap confidence intervals")
    p.add_argument("--resamples", type=int, help="bootstrap resamples (default 1000)")
    p.add_argument("--label", help="model label recorded in outputs")
    p.add_argument("--out", help="output directory")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="operating-threshold sweep tables")
    p.add_argument("--mode", choices=("cadx", "cade"))
    p.add_argument("--scored", help="labeled score CSV (cadx mode)")
    p.add_argument("--candidates", help="candidate CSV (cade mode)")
    p.add_argument("--references", help="reference CSV (cade mode)")
    p.add_argument("--thresholds", help="comma-separated threshold list")
    p.add_argument("--preset", action="store_true", help="use the built-in threshold grid")
    p.add_argument("--out", help="output CSV path")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("stats", help="reader-consensus and detectability statistics")
    p.add_argument("--matches", help="directory of per-model match CSVs")
    p.add_argument("--references", help="reference nodule CSV")
    p.add_argument("--analysis", choices=("consensus", "semantic", "overlap"))
    p.add_argument("--per-model", action="store_true",
                   help="semantic analysis per model instead of pooled")
    p.add_argument("--out", help="output CSV path")
    common(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("link", help="match report-derived entities to fused candidates")
    p.add_argument("--reports", help="TSV of report_id, scan_id, text")
    p.add_argument("--fused", help="fused candidate CSV")
    p.add_argument("--masks", help="directory of <scan_id>.hdr lobe label volumes")
    p.add_argument("--grammar", help="JSON extraction grammar (default built-in English rules)")
    p.add_argument("--size-tol-mm", type=float, help="size agreement tolerance (default 3)")
    p.add_argument("--ordinal-tol", type=int, help="ordinal agreement tolerance (default 1)")
    p.add_argument("--out", help="output match CSV path")
    common(p)
    p.set_defaults(func=cmd_link)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InputError, ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except ScorerError as err:
        print(f"scorer error: {err}", file=sys.stderr)
        return 3
    except InvariantError as err:
        print(f"invariant violation: {err}", file=sys.stderr)
        return 4


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
