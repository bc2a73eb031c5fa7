"""Batch command-line front end.

Subcommands cover the full workflow: detect attention maps over a corpus,
rank and select cases for revision, evaluate attention quality against
ground truth, build ensemble labels, track a campaign, simulate the
human-in-the-loop protocol, estimate workload and scan for false positives.

Exit codes: 0 success, 1 validation error, 2 I/O error. All numeric
configuration is echoed into outputs, and re-running a subcommand on the
same inputs produces byte-identical files (timestamps only ever live in the
campaign state).
"""

from __future__ import annotations

import argparse
import json
import multiprocessing
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import campaign as camp
from . import corpus, regions
from .detect import DetectionConfig, build_attention
from .ensemble import ensemble_label
from .nifti import NiftiFormatError, read_volume, write_volume
from .volume import LabelVolume, OrganLabelMap, VolumeGrid

PROG = "segqa"


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the contract reserves 2 for I/O errors.
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _detection_config(args: argparse.Namespace) -> DetectionConfig:
    return DetectionConfig(
        std_threshold=args.tau_std,
        entropy_threshold=args.tau_entropy,
        binarize_threshold=args.bin_thresh,
        min_component_voxels=args.min_component,
    )


def _add_detect_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tau-std", type=float, default=0.1,
                   help="member std-dev threshold (default 0.1)")
    p.add_argument("--tau-entropy", type=float, default=0.5,
                   help="normalized entropy threshold (default 0.5)")
    p.add_argument("--bin-thresh", type=float, default=0.5,
                   help="probability binarization threshold (default 0.5)")
    p.add_argument("--min-component", type=int, default=0,
                   help="drop union components smaller than this many voxels")


def _detect_one(task: tuple[str, list[str], str, DetectionConfig]) -> str:
    case_id, model_dirs, out_dir, cfg = task
    preds = corpus.load_prediction_set(case_id, model_dirs)
    amap = build_attention(preds, cfg)
    labels = OrganLabelMap.for_channel_count(preds.num_organs)
    corpus.write_attention_outputs(out_dir, amap, labels, cfg)
    return case_id


def cmd_detect(args: argparse.Namespace) -> int:
    cfg = _detection_config(args)
    model_dirs = [str(d) for d in args.preds]
    if len(model_dirs) < 2:
        raise ValueError("detect: need at least two --preds model directories")
    case_ids, _ = corpus.discover_cases(model_dirs)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    tasks = [(cid, model_dirs, str(args.out), cfg) for cid in case_ids]
    if args.jobs > 1:
        with multiprocessing.Pool(args.jobs) as pool:
            done = pool.map(_detect_one, tasks)
    else:
        done = [_detect_one(t) for t in tasks]
    for cid in sorted(done):
        print(f"detect: {cid}")
    print(f"detect: wrote {len(done)} cases to {args.out}")
    return 0


RANKING_BASE_HEADER = ("rank", "case_id", "total_mm3")


def _ranking_rows(sizes: list[dict[str, object]]) -> tuple[list[str], list[list[object]]]:
    organ_names = list(sizes[0]["organ_names"])
    entries = [
        camp.CaseEntry(
            case_id=s["case_id"],
            per_organ_mm3=dict(s["per_organ_mm3"]),
            total_mm3=float(s["total_mm3"]),
        )
        for s in sizes
    ]
    ranked = camp.rank_cases(entries)
    header = list(RANKING_BASE_HEADER) + [f"{name}_mm3" for name in organ_names]
    rows = []
    for rank, entry in enumerate(ranked, start=1):
        rows.append(
            [rank, entry.case_id, repr(entry.total_mm3)]
            + [repr(float(entry.per_organ_mm3.get(name, 0.0))) for name in organ_names]
        )
    return header, rows


def cmd_rank(args: argparse.Namespace) -> int:
    sizes = corpus.read_sizes(args.attention)
    header, rows = _ranking_rows(sizes)
    corpus.write_csv(args.out, header, rows)
    if args.curve:
        corpus.write_csv(
            args.curve, ("rank", "total_mm3"), [[r[0], r[2]] for r in rows]
        )
    print(f"rank: wrote {len(rows)} cases to {args.out}")
    return 0


def cmd_select(args: argparse.Namespace) -> int:
    rows = corpus.read_ranking_csv(args.ranking)
    selected = [r for r in rows if r["total_mm3"] > args.threshold_mm3]
    for row in selected:
        print(row["case_id"])
    if args.out:
        corpus.write_csv(
            args.out,
            ("rank", "case_id", "total_mm3"),
            [[r["rank"], r["case_id"], repr(r["total_mm3"])] for r in selected],
        )
    print(f"select: {len(selected)} of {len(rows)} cases above {args.threshold_mm3} mm3")
    if args.knee:
        suggestion = camp.knee_suggestion([r["total_mm3"] for r in rows])
        if suggestion is None:
            print("knee: no clear drop in the size curve")
        else:
            print(
                f"knee: advisory cutoff after {suggestion.cases_before_knee} cases "
                f"(drop ratio {suggestion.drop_ratio:.2f} below {suggestion.size_at_knee:g} mm3)"
            )
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    sizes = corpus.read_sizes(args.attention)
    organ_count = len(sizes[0]["organ_names"])
    labels = OrganLabelMap.for_channel_count(organ_count)
    pseudo_files = corpus.find_label_volumes(args.pseudo)
    truth_files = corpus.find_label_volumes(args.truth)

    reports = []
    for s in sizes:
        case_id = str(s["case_id"])
        if case_id not in pseudo_files or case_id not in truth_files:
            raise corpus.CorpusError(f"case {case_id!r}: missing pseudo or truth labels")
        attention_masks = corpus.load_attention_masks(args.attention, case_id, organ_count)
        pseudo = corpus.load_label_volume(pseudo_files[case_id], labels)
        truth = corpus.load_label_volume(truth_files[case_id], labels)
        reports.append(
            regions.evaluate_case(
                case_id,
                attention_masks,
                pseudo,
                truth,
                connectivity=args.connectivity,
                provenance={
                    "connectivity": args.connectivity,
                    "detect_config": s["config"],
                    "attention_dir": str(args.attention),
                    "pseudo_dir": str(args.pseudo),
                    "truth_dir": str(args.truth),
                },
            )
        )

    corpus.write_json(args.out, regions.metrics_json_dict(reports))
    csv_path = Path(args.out).with_suffix(".csv")
    csv_path.write_text(regions.metrics_csv(reports), encoding="utf-8")
    print(f"evaluate: wrote {args.out} and {csv_path} ({len(reports)} cases)")
    return 0


def _load_mask(path: str, organ: int | None) -> VolumeGrid:
    grid = read_volume(path)
    if organ is not None:
        return grid.with_values((grid.values == organ).astype(np.uint8))
    return grid.with_values((grid.values != 0).astype(np.uint8))


def cmd_dsc(args: argparse.Namespace) -> int:
    value = regions.dsc(_load_mask(args.a, args.organ), _load_mask(args.b, args.organ))
    print(repr(value))
    return 0


def cmd_matrix(args: argparse.Namespace) -> int:
    if len(args.inputs) < 2:
        raise ValueError("matrix: need at least two --inputs files")
    if args.organ < 1:
        raise ValueError(f"matrix: organ code must be >= 1, got {args.organ}")
    names = []
    labelings = []
    for path in args.inputs:
        grid = read_volume(path)
        if grid.values.dtype == np.dtype(np.float32):
            raise corpus.CorpusError(f"{path}: label volumes must be integer-kind")
        count = max(int(grid.values.max()), args.organ)
        labelings.append(LabelVolume(grid, OrganLabelMap.for_channel_count(max(count, 1))))
        name = Path(path).name
        for suffix in (".nii.gz", ".nii"):
            if name.endswith(suffix):
                name = name[: -len(suffix)]
                break
        names.append(name)
    codes = {len(lv.labels) for lv in labelings}
    if len(codes) > 1:
        top = max(codes)
        labelings = [
            LabelVolume(lv.grid, OrganLabelMap.for_channel_count(top)) for lv in labelings
        ]
    matrix = regions.dsc_matrix(labelings, args.organ)
    rows = [[names[i]] + [repr(float(v)) for v in matrix[i]] for i in range(len(names))]
    corpus.write_csv(args.out, [""] + names, rows)
    print(f"matrix: wrote {len(names)}x{len(names)} matrix to {args.out}")
    return 0


def cmd_ensemble(args: argparse.Namespace) -> int:
    model_dirs = [str(d) for d in args.preds]
    case_ids, organ_count = corpus.discover_cases(model_dirs)
    labels = OrganLabelMap.for_channel_count(organ_count)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for case_id in case_ids:
        preds = corpus.load_prediction_set(case_id, model_dirs)
        label = ensemble_label(preds, args.bin_thresh, labels)
        write_volume(label.grid, out_dir / f"{case_id}.nii.gz")
        corpus.write_json(
            out_dir / f"{case_id}_ensemble.json",
            {
                "case_id": case_id,
                "model_ids": [m.model_id for m in preds.members],
                "binarize_threshold": args.bin_thresh,
                "organ_names": list(labels.names),
            },
        )
    print(f"ensemble: wrote {len(case_ids)} label volumes to {args.out}")
    return 0


def cmd_campaign(args: argparse.Namespace) -> int:
    if args.action == "init":
        if args.attention is None:
            raise ValueError("campaign init: --attention is required")
        state_path = Path(args.state)
        if state_path.exists() and not args.force:
            raise ValueError(f"campaign init: {state_path} exists (use --force to overwrite)")
        sizes = corpus.read_sizes(args.attention)
        entries = tuple(
            camp.CaseEntry(
                case_id=s["case_id"],
                per_organ_mm3=dict(s["per_organ_mm3"]),
                total_mm3=float(s["total_mm3"]),
            )
            for s in sizes
        )
        state = camp.CampaignState(cases=entries, loop_index=0, config=sizes[0]["config"])
        camp.save_state(state, state_path)
        print(f"campaign: initialized {state_path} with {len(entries)} cases")
        return 0

    state = camp.load_state(args.state)
    if args.action == "status":
        counts = {status: 0 for status in camp.STATUSES}
        for entry in state.cases:
            counts[entry.status] += 1
        print(f"loop_index: {state.loop_index}")
        for status in camp.STATUSES:
            print(f"{status}: {counts[status]}")
        for rank, entry in enumerate(state.ranking, start=1):
            print(f"{rank}\t{entry.case_id}\t{entry.total_mm3:g}\t{entry.status}")
        return 0
    if args.action == "mark":
        if not args.case or not args.status:
            raise ValueError("campaign mark: --case and --status are required")
        state = camp.mark_case(state, args.case, args.status, tuple(args.tag))
        camp.save_state(state, args.state)
        print(f"campaign: {args.case} -> {args.status}")
        return 0
    if args.action == "stop-check":
        done = camp.stopping_check(state)
        print("true" if done else "false")
        return 0
    raise ValueError(f"campaign: unknown action {args.action!r}")


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _detection_config(args)
    model_dirs = [str(d) for d in args.preds]
    case_ids, organ_count = corpus.discover_cases(model_dirs)
    labels = OrganLabelMap.for_channel_count(organ_count)
    truth_files = corpus.find_label_volumes(args.truth)
    missing = [cid for cid in case_ids if cid not in truth_files]
    if missing:
        raise corpus.CorpusError(f"missing truth labels for cases: {missing[:5]}")

    loop0 = {cid: corpus.load_prediction_set(cid, model_dirs) for cid in case_ids}
    truths = {
        cid: corpus.load_label_volume(truth_files[cid], labels) for cid in case_ids
    }
    policy = camp.LoopPolicy(
        size_threshold_mm3=args.threshold_mm3,
        max_loops=args.loops,
        reuse_revised_labels=True,
    )
    reports = camp.run_loop({0: loop0}, truths, cfg, policy)
    corpus.write_json(
        args.out,
        {
            "config": cfg.as_dict(),
            "policy": {
                "size_threshold_mm3": policy.size_threshold_mm3,
                "max_loops": policy.max_loops,
            },
            "loops": [camp.loop_report_dict(r) for r in reports],
        },
    )
    for report in reports:
        print(
            f"loop {report.loop_index}: attention {report.total_attention_mm3:g} mm3, "
            f"revised {report.revised_count}, residual {report.residual_error_mm3:g} mm3"
            + (" (stopped)" if report.stopped else "")
        )
    print(f"simulate: wrote {args.out}")
    return 0


def cmd_estimate(args: argparse.Namespace) -> int:
    est = camp.estimate_workload(args.revised, args.total, args.minutes, args.hours)
    print(f"cases needing revision: {est.cases_needing_revision}")
    print(f"total cases: {est.total_cases}")
    print(f"minutes per case: {est.minutes_per_case:g}")
    print(f"hours per day: {est.hours_per_day:g}")
    print(f"estimated days: {est.estimated_days:g}")
    print(f"human fraction: {est.human_fraction:.1%}")
    return 0


def cmd_fpscan(args: argparse.Namespace) -> int:
    label_files = corpus.find_label_volumes(args.preds)
    masks = []
    for case_id in sorted(label_files):
        grid = read_volume(label_files[case_id])
        masks.append(
            (case_id, grid.with_values((grid.values == args.organ).astype(np.uint8)))
        )
    scan = regions.false_positive_scan(masks, connectivity=args.connectivity)
    payload = {
        "organ": args.organ,
        "connectivity": args.connectivity,
        "total_cases": scan.total_cases,
        "flagged_cases": scan.flagged_case_count,
        "fpr": scan.fpr,
        "total_components": scan.total_component_count,
        "per_case": {c.case_id: c.component_count for c in scan.per_case},
    }
    corpus.write_json(args.out, payload)
    print(
        f"fpscan: {scan.flagged_case_count} of {scan.total_cases} cases flagged "
        f"(FPR {scan.fpr:.2%}), {scan.total_component_count} components"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=PROG, description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="build attention maps for a corpus")
    p.add_argument("--preds", nargs="+", required=True,
                   help="one directory per model with <case>_organ<code>.nii[.gz] channels")
    p.add_argument("--out", required=True, help="output directory")
    _add_detect_flags(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel workers (wall time only)")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("rank", help="rank cases by attention size")
    p.add_argument("--attention", required=True, help="directory written by detect")
    p.add_argument("--out", required=True, help="ranking CSV path")
    p.add_argument("--curve", help="optional size-vs-rank curve CSV")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("select", help="pick cases above a size threshold")
    p.add_argument("--ranking", required=True, help="CSV written by rank")
    p.add_argument("--threshold-mm3", type=float, required=True)
    p.add_argument("--knee", action="store_true", help="print advisory knee cutoff")
    p.add_argument("--out", help="optional CSV of the selected cases")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("evaluate", help="score attention maps against ground truth")
    p.add_argument("--attention", required=True)
    p.add_argument("--pseudo", required=True, help="directory of pseudo label volumes")
    p.add_argument("--truth", required=True, help="directory of ground-truth label volumes")
    p.add_argument("--out", required=True, help="metrics JSON path (CSV written alongside)")
    p.add_argument("--connectivity", type=int, default=26, choices=(6, 18, 26))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("dsc", help="Dice similarity of two volumes")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--organ", type=int, help="compare this organ code instead of any-foreground")
    p.set_defaults(func=cmd_dsc)

    p = sub.add_parser("matrix", help="pairwise Dice matrix for one organ")
    p.add_argument("--inputs", nargs="+", required=True, help="label volumes to compare")
    p.add_argument("--organ", type=int, required=True)
    p.add_argument("--out", required=True, help="matrix CSV path")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("ensemble", help="average model predictions into final labels")
    p.add_argument("--preds", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bin-thresh", type=float, default=0.5)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("campaign", help="track an annotation campaign")
    p.add_argument("action", choices=("init", "status", "mark", "stop-check"))
    p.add_argument("--state", required=True, help="campaign state JSON")
    p.add_argument("--attention", help="attention directory (init)")
    p.add_argument("--force", action="store_true", help="overwrite existing state (init)")
    p.add_argument("--case", help="case id (mark)")
    p.add_argument("--status", choices=("revised", "confirmed"), help="new status (mark)")
    p.add_argument("--tag", action="append", default=[], help="free-text error tag (mark)")
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("simulate", help="run the loop with a simulated annotator")
    p.add_argument("--preds", nargs="+", required=True, help="loop-0 model directories")
    p.add_argument("--truth", required=True, help="ground-truth label directory")
    p.add_argument("--loops", type=int, default=2, help="loop budget")
    p.add_argument("--threshold-mm3", type=float, default=0.0)
    p.add_argument("--out", required=True, help="report JSON path")
    _add_detect_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="workload arithmetic for a revision count")
    p.add_argument("--revised", type=int, required=True)
    p.add_argument("--total", type=int, required=True)
    p.add_argument("--minutes", type=float, default=15.0)
    p.add_argument("--hours", type=float, default=8.0)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("fpscan", help="false positives on known-negative volumes")
    p.add_argument("--preds", required=True, help="directory of predicted label volumes")
    p.add_argument("--organ", type=int, required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--connectivity", type=int, default=26, choices=(6, 18, 26))
    p.set_defaults(func=cmd_fpscan)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, NiftiFormatError, json.JSONDecodeError) as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 1
    except KeyError as exc:
        print(f"{PROG}: error: input file is missing field {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"{PROG}: i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
