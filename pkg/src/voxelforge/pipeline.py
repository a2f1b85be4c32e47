"""Manifest-driven preprocessing pipeline with re-runnable, skippable stages.

Each stage reads the previous stage's files from the output directory and
writes its own; a content-hash stamp per (subject, stage) lets re-runs
skip work whose inputs and configuration are unchanged. All intermediates
are inspectable: NIfTI for volumes, JSON for transforms and reports,
record files for training exports.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats, losses, morph, patches, records
from .register import RegistrationConfig, register as run_registration, resample, save_transform
from .volume import IntensityDomain, Volume, minmax_normalize, pad_or_crop

__all__ = [
    "ManifestError",
    "SubjectSpec",
    "PipelineManifest",
    "load_manifest",
    "PipelineRunner",
    "STAGES",
    "verify_dataset_counts",
    "load_rire_reference",
]

log = logging.getLogger("voxelforge")

STAGES = ("convert", "register", "clean", "patch", "export", "evaluate")

MODALITIES = ("ct", "pd", "t1", "t2", "mp_rage", "pet")


class ManifestError(ValueError):
    """The pipeline manifest is structurally invalid."""


@dataclass(frozen=True)
class SubjectSpec:
    id: str
    mri_path: Path
    ct_path: Path
    trim: tuple[tuple[int, int], ...] = ()
    pred_ct_path: Path | None = None


@dataclass(frozen=True)
class PipelineManifest:
    subjects: tuple[SubjectSpec, ...]
    output_dir: Path
    registration: RegistrationConfig = field(
        default_factory=RegistrationConfig
    )
    clean_threshold: float | None = None
    mode: str = "2d"
    patch_stride: int = 8
    min_foreground_fraction: float = 0.0
    target_slice_shape: tuple[int, int] = (384, 384)
    loss_weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    lambda_boost: float = 0.0
    rire_index: tuple[dict, ...] = ()


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ManifestError(message)


def load_manifest(path: str | Path) -> PipelineManifest:
    """Parse and validate a pipeline manifest JSON file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from None

    subjects = []
    seen_ids: set[str] = set()
    for index, entry in enumerate(raw.get("subjects", [])):
        _require("id" in entry, f"subject {index}: missing 'id'")
        _require(
            "mri_path" in entry and "ct_path" in entry,
            f"subject {entry.get('id', index)}: missing mri_path/ct_path",
        )
        sid = str(entry["id"])
        _require(sid not in seen_ids, f"duplicate subject id {sid!r}")
        seen_ids.add(sid)
        mri = (path.parent / entry["mri_path"]).resolve()
        ct = (path.parent / entry["ct_path"]).resolve()
        _require(mri != ct, f"subject {sid}: mri_path and ct_path must differ")
        trim = tuple((int(lo), int(hi)) for lo, hi in entry.get("trim", []))
        pred = entry.get("pred_ct_path")
        subjects.append(
            SubjectSpec(
                id=sid,
                mri_path=mri,
                ct_path=ct,
                trim=trim,
                pred_ct_path=(path.parent / pred).resolve() if pred else None,
            )
        )

    mode = raw.get("mode", "2d")
    _require(mode in ("2d", "3d"), f"mode must be '2d' or '3d', got {mode!r}")

    reg_cfg = raw.get("registration", {})
    try:
        registration = RegistrationConfig(**reg_cfg)
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"registration config: {exc}") from None

    try:
        weights = losses.LossWeights(**raw.get("loss_weights", {}))
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"loss_weights: {exc}") from None

    target = tuple(raw.get("target_slice_shape", (384, 384)))
    _require(
        len(target) == 2 and all(int(t) > 0 for t in target),
        "target_slice_shape must be two positive extents",
    )

    index_entries = []
    for entry in raw.get("rire_index", []):
        _require(
            "id" in entry and "modalities" in entry,
            "rire_index entries need 'id' and 'modalities'",
        )
        bad = set(entry["modalities"]) - set(MODALITIES)
        _require(not bad, f"rire_index {entry['id']}: unknown modalities {sorted(bad)}")
        index_entries.append({"id": str(entry["id"]), "modalities": list(entry["modalities"])})

    return PipelineManifest(
        subjects=tuple(subjects),
        output_dir=(path.parent / raw.get("output_dir", "out")).resolve(),
        registration=registration,
        clean_threshold=raw.get("clean_threshold"),
        mode=mode,
        patch_stride=int(raw.get("patch_stride", 8)),
        min_foreground_fraction=float(raw.get("min_foreground_fraction", 0.0)),
        target_slice_shape=(int(target[0]), int(target[1])),
        loss_weights=weights,
        lambda_boost=float(raw.get("lambda_boost", 0.0)),
        rire_index=tuple(index_entries),
    )


# -- dataset bookkeeping ---------------------------------------------------------


def load_rire_reference() -> dict:
    """Bundled modality-count reference and volume-shape bookkeeping."""
    from importlib import resources

    text = resources.files("voxelforge.data").joinpath("rire_dataset.json").read_text()
    return json.loads(text)


def verify_dataset_counts(index: tuple[dict, ...]) -> tuple[bool, list[str]]:
    """Check a modality index against the published subject counts.

    Returns (all_passed, report_lines); the first row counts subjects per
    modality, the second restricts to subjects that also have CT data.
    """
    reference = load_rire_reference()["modality_counts"]
    all_counts = {m: 0 for m in MODALITIES}
    ct_counts = {m: 0 for m in MODALITIES}
    for entry in index:
        modalities = set(entry["modalities"])
        for m in modalities:
            all_counts[m] += 1
        if "ct" in modalities:
            for m in modalities:
                ct_counts[m] += 1

    lines = []
    passed = True
    for m in MODALITIES:
        expected = reference["all"][m]
        actual = all_counts[m]
        ok = actual == expected
        passed &= ok
        lines.append(f"{'PASS' if ok else 'FAIL'} all subjects {m}: {actual} (expected {expected})")
    for m in MODALITIES:
        if m == "ct":
            continue
        expected = reference["with_ct"][m]
        actual = ct_counts[m]
        ok = actual == expected
        passed &= ok
        lines.append(f"{'PASS' if ok else 'FAIL'} with CT {m}: {actual} (expected {expected})")
    return passed, lines


# -- stage plumbing ---------------------------------------------------------------


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _read_volume(path: Path) -> Volume:
    suffix = "".join(path.suffixes)
    if suffix.endswith((".mhd", ".mha")):
        return formats.read_mhd(path)
    return formats.read_nifti(path)


class PipelineRunner:
    """Executes pipeline stages for every subject of a manifest."""

    def __init__(
        self,
        manifest: PipelineManifest,
        output_dir: Path | None = None,
        force: bool = False,
        jobs: int = 1,
    ):
        self.manifest = manifest
        self.out = Path(output_dir) if output_dir else manifest.output_dir
        self.force = force
        self.jobs = max(1, jobs)

    # -- stamps -------------------------------------------------------------

    def _stamp_path(self, scope: Path, stage: str) -> Path:
        return scope / ".stamps" / f"{stage}.json"

    def _up_to_date(
        self, scope: Path, stage: str, inputs: list[Path], config: dict
    ) -> bool:
        if self.force:
            return False
        stamp_path = self._stamp_path(scope, stage)
        if not stamp_path.exists():
            return False
        try:
            stamp = json.loads(stamp_path.read_text())
        except json.JSONDecodeError:
            return False
        if stamp.get("config") != config:
            return False
        recorded = stamp.get("inputs", {})
        if set(recorded) != {str(p) for p in inputs}:
            return False
        for p in inputs:
            if not p.exists() or _sha256_file(p) != recorded[str(p)]:
                return False
        return all(Path(o).exists() for o in stamp.get("outputs", []))

    def _write_stamp(
        self,
        scope: Path,
        stage: str,
        inputs: list[Path],
        config: dict,
        outputs: list[Path],
    ) -> None:
        stamp_path = self._stamp_path(scope, stage)
        stamp_path.parent.mkdir(parents=True, exist_ok=True)
        stamp = {
            "inputs": {str(p): _sha256_file(p) for p in inputs},
            "config": config,
            "outputs": [str(o) for o in outputs],
        }
        stamp_path.write_text(json.dumps(stamp, indent=2, sort_keys=True) + "\n")

    def _subject_dir(self, subject: SubjectSpec) -> Path:
        directory = self.out / subject.id
        directory.mkdir(parents=True, exist_ok=True)
        return directory

    # -- stages -------------------------------------------------------------

    def stage_convert(self, subject: SubjectSpec) -> None:
        directory = self._subject_dir(subject)
        outputs = [directory / "mri.nii.gz", directory / "ct.nii.gz"]
        inputs = [subject.mri_path, subject.ct_path]
        raw_inputs = list(inputs)
        for source in inputs:
            if source.suffix == ".mhd":
                raw = source.with_suffix(".raw")
                if raw.exists():
                    raw_inputs.append(raw)
        if self._up_to_date(directory, "convert", raw_inputs, {}):
            log.info("%s convert: up to date", subject.id)
            return
        formats.write_nifti(_read_volume(subject.mri_path), outputs[0])
        formats.write_nifti(_read_volume(subject.ct_path), outputs[1])
        self._write_stamp(directory, "convert", raw_inputs, {}, outputs)
        log.info("%s convert: wrote %s", subject.id, [o.name for o in outputs])

    def stage_register(self, subject: SubjectSpec) -> None:
        directory = self._subject_dir(subject)
        cfg = self.manifest.registration
        inputs = [directory / "mri.nii.gz", directory / "ct.nii.gz"]
        outputs = [
            directory / "transform.json",
            directory / "mri_registered.nii.gz",
            directory / "register_report.json",
        ]
        config = {
            "bins": cfg.bins,
            "max_iterations": cfg.max_iterations,
            "convergence_tol": cfg.convergence_tol,
            "pyramid_levels": cfg.pyramid_levels,
            "sampling_fraction": cfg.sampling_fraction,
        }
        if self._up_to_date(directory, "register", inputs, config):
            log.info("%s register: up to date", subject.id)
            return
        ct = formats.read_nifti(inputs[1])  # CT is the fixed volume
        mri = formats.read_nifti(inputs[0])
        result = run_registration(ct, mri, cfg)
        save_transform(result.transform, outputs[0])
        moved = resample(mri, result.transform, ct)
        formats.write_nifti(moved, outputs[1])
        report = {
            "improved": result.improved,
            "iterations": result.trace[-1].iteration if result.trace else 0,
            "final_mi": result.trace[-1].mi if result.trace else None,
            "trace": [[e.iteration, e.mi, e.level] for e in result.trace],
        }
        outputs[2].write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        self._write_stamp(directory, "register", inputs, config, outputs)
        log.info("%s register: improved=%s", subject.id, result.improved)

    def stage_clean(self, subject: SubjectSpec) -> None:
        directory = self._subject_dir(subject)
        inputs = [directory / "ct.nii.gz", directory / "mri_registered.nii.gz"]
        outputs = [
            directory / "ct_clean.nii.gz",
            directory / "ct_mask.nii.gz",
            directory / "mri_clean.nii.gz",
            directory / "boost_weights.nii.gz",
        ]
        config = {
            "clean_threshold": self.manifest.clean_threshold,
            "trim": [list(r) for r in subject.trim],
            "lambda_boost": self.manifest.lambda_boost,
        }
        if self._up_to_date(directory, "clean", inputs, config):
            log.info("%s clean: up to date", subject.id)
            return
        ct = formats.read_nifti(inputs[0])
        mri = formats.read_nifti(inputs[1])
        cleaned, mask = morph.clean_ct(ct, self.manifest.clean_threshold)
        if subject.trim:
            cleaned = morph.trim_slices(cleaned, subject.trim)
            mask = morph.trim_slices(mask, subject.trim)
            mri = morph.trim_slices(mri, subject.trim)
        boost = patches.make_boost_weights(mask, self.manifest.lambda_boost)
        formats.write_nifti(cleaned, outputs[0])
        formats.write_nifti(mask, outputs[1])
        formats.write_nifti(mri, outputs[2])
        formats.write_nifti(
            mask.with_voxels(boost.weights, IntensityDomain.RAW16, raw_range=None),
            outputs[3],
        )
        self._write_stamp(directory, "clean", inputs, config, outputs)
        log.info("%s clean: mask keeps %.1f%% of voxels",
                 subject.id, 100.0 * mask.voxels.mean())

    def _record_path(self, subject: SubjectSpec) -> Path:
        kind = "patches" if self.manifest.mode == "3d" else "slices"
        return self._subject_dir(subject) / f"{subject.id}-{kind}.tfrecord"

    def stage_patch(self, subject: SubjectSpec) -> None:
        if self.manifest.mode != "3d":
            log.info("%s patch: skipped (mode is 2d)", subject.id)
            return
        directory = self._subject_dir(subject)
        inputs = [directory / "mri_clean.nii.gz", directory / "ct_clean.nii.gz"]
        record_path = self._record_path(subject)
        report_path = directory / "patch_report.json"
        outputs = [record_path, report_path]
        config = {
            "stride": self.manifest.patch_stride,
            "min_foreground_fraction": self.manifest.min_foreground_fraction,
        }
        if self._up_to_date(directory, "patch", inputs, config):
            log.info("%s patch: up to date", subject.id)
            return
        mri = minmax_normalize(formats.read_nifti(inputs[0]))
        ct = minmax_normalize(formats.read_nifti(inputs[1]))
        pairs = patches.extract_pairs(
            mri,
            ct,
            stride=self.manifest.patch_stride,
            min_foreground_fraction=self.manifest.min_foreground_fraction,
        )
        count = records.write_example_records(
            record_path,
            "3d",
            (
                records.ExamplePayload(input=p.input, target=p.target, anchor=p.anchor)
                for p in pairs
            ),
        )
        report = {
            "patches": count,
            "ct_raw_range": list(ct.raw_range or ()),
            "mri_raw_range": list(mri.raw_range or ()),
            "volume_shape": list(ct.shape),
        }
        report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        self._write_stamp(directory, "patch", inputs, config, outputs)
        log.info("%s patch: %d pairs", subject.id, count)

    def stage_export(self, subject: SubjectSpec) -> None:
        if self.manifest.mode != "2d":
            log.info("%s export: skipped (mode is 3d)", subject.id)
            return
        directory = self._subject_dir(subject)
        inputs = [directory / "mri_clean.nii.gz", directory / "ct_clean.nii.gz"]
        record_path = self._record_path(subject)
        report_path = directory / "export_report.json"
        outputs = [record_path, report_path]
        config = {"target_slice_shape": list(self.manifest.target_slice_shape)}
        if self._up_to_date(directory, "export", inputs, config):
            log.info("%s export: up to date", subject.id)
            return
        target = self.manifest.target_slice_shape
        mri = minmax_normalize(pad_or_crop(formats.read_nifti(inputs[0]), target))
        ct = minmax_normalize(pad_or_crop(formats.read_nifti(inputs[1]), target))
        count = records.write_example_records(
            record_path,
            "2d",
            (
                records.ExamplePayload(
                    input=mri.voxels[d], target=ct.voxels[d], anchor=(d,)
                )
                for d in range(ct.depth)
            ),
        )
        report = {
            "slices": count,
            "ct_raw_range": list(ct.raw_range or ()),
            "mri_raw_range": list(mri.raw_range or ()),
            "slice_shape": list(target),
        }
        report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        self._write_stamp(directory, "export", inputs, config, outputs)
        log.info("%s export: %d slices", subject.id, count)

    def _reconstruct(self, subject: SubjectSpec, truth: Volume) -> tuple[Volume, Volume]:
        """Rebuild the target volume from the exported records.

        For 3D patch records the comparison is restricted to the covered
        bounding box, since nothing is predicted outside it; returns the
        (pred, truth) pair to evaluate.
        """
        mode, examples = records.read_example_records(self._record_path(subject))
        if mode == "3d":
            buffer = patches.AggregationBuffer(truth.shape)
            for example in examples:
                buffer.add(example.target.astype(np.float64), example.anchor)
            out = buffer.finalize()
            box = tuple(
                slice(int(axis.min()), int(axis.max()) + 1)
                for axis in np.nonzero(buffer.coverage)
            )
            pred = Volume(
                voxels=out[box],
                spacing=truth.spacing,
                intensity_domain=IntensityDomain.UNIT,
                raw_range=truth.raw_range,
            )
            boxed_truth = Volume(
                voxels=truth.voxels[box],
                spacing=truth.spacing,
                intensity_domain=truth.intensity_domain,
                raw_range=truth.raw_range,
            )
            return pred, boxed_truth
        slices = [example.target for example in examples]
        stacked = np.stack(slices, axis=0) if slices else np.zeros((0, 1, 1), np.float32)
        return truth.with_voxels(stacked.astype(np.float32), IntensityDomain.UNIT), truth

    def _evaluate_subject(self, subject: SubjectSpec) -> losses.VolumeMetrics:
        directory = self._subject_dir(subject)
        truth = formats.read_nifti(directory / "ct_clean.nii.gz")
        if self.manifest.mode == "3d":
            truth = minmax_normalize(truth)
        else:
            truth = minmax_normalize(
                pad_or_crop(truth, self.manifest.target_slice_shape)
            )
        if subject.pred_ct_path is not None:
            pred = _read_volume(subject.pred_ct_path)
            if pred.intensity_domain is IntensityDomain.UNIT and pred.raw_range is None:
                pred = pred.with_voxels(pred.voxels, IntensityDomain.UNIT,
                                        raw_range=truth.raw_range)
        else:
            pred, truth = self._reconstruct(subject, truth)
        report = losses.evaluate(pred, truth, subject.id)
        return report.volumes[0]

    def stage_evaluate(self) -> losses.EvalReport | None:
        inputs = []
        for subject in self.manifest.subjects:
            inputs.append(self._subject_dir(subject) / "ct_clean.nii.gz")
            if subject.pred_ct_path is not None:
                inputs.append(subject.pred_ct_path)
            else:
                inputs.append(self._record_path(subject))
        outputs = [self.out / "eval.json", self.out / "eval.txt"]
        config = {"mode": self.manifest.mode,
                  "target_slice_shape": list(self.manifest.target_slice_shape)}
        if self._up_to_date(self.out, "evaluate", inputs, config):
            log.info("evaluate: up to date")
            return None
        entries = self._map_subjects(self._evaluate_subject)
        report = losses.EvalReport(volumes=tuple(entries))
        outputs[0].write_text(report.to_json() + "\n")
        outputs[1].write_text(report.to_table() + "\n")
        self._write_stamp(self.out, "evaluate", inputs, config, outputs)
        log.info("evaluate: aggregate mae %.4g over %d subject(s)",
                 report.aggregate_mae, len(report.volumes))
        return report

    # -- driver ----------------------------------------------------------------

    def _map_subjects(self, fn):
        subjects = self.manifest.subjects
        if self.jobs == 1 or len(subjects) <= 1:
            return [fn(s) for s in subjects]
        with ThreadPoolExecutor(max_workers=self.jobs) as pool:
            return list(pool.map(fn, subjects))

    def run(self, stages: list[str] | None = None) -> None:
        """Run the requested stages (default: every stage for the mode)."""
        selected = list(stages) if stages else list(STAGES)
        for stage in selected:
            if stage not in STAGES:
                raise ManifestError(
                    f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}"
                )
        self.out.mkdir(parents=True, exist_ok=True)
        per_subject = {
            "convert": self.stage_convert,
            "register": self.stage_register,
            "clean": self.stage_clean,
            "patch": self.stage_patch,
            "export": self.stage_export,
        }
        for stage in selected:
            if stage == "evaluate":
                self.stage_evaluate()
            else:
                self._map_subjects(per_subject[stage])
