"""End-to-end orchestration: brain volume, multi-atlas segmentation, evaluation.

All stages are pure given (config, inputs); reports are JSON with sorted keys
so reruns are byte-identical. Wall-clock timings go to a separate sidecar.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import mesh as mesh_mod
from .brainvol import BrainVolumeParams, BrainVolumeEstimate, estimate_brain_volume
from .ellipsoid import Ellipsoid
from .errors import ConfigError, EmptyLabelError, StageError
from .fusion import binarize_probability, majority_vote, rank_select, staple_fuse
from .metaimage import load_metaimage, save_metaimage
from .metrics import dice, hausdorff, label_volume, mean_absolute_surface_distance, ventricle_brain_ratio
from .orient import orient_by_pca, orientation_skull_label, prior_similarity_transform
from .registration import (
    AffineMap,
    AtlasEntry,
    CompositeTransform,
    PTermParams,
    RigidParams,
    register_nonrigid,
    register_rigid,
    warp_label,
)
from .volume import LabelMap, Volume

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class PipelineParams:
    """Every empirical knob, defaulted to the published values."""

    c1: float = 0.02
    c2: float = 0.25
    i_low_anchor: float = 85.0
    i_high_anchor: float = 115.0
    beta: float = 0.82
    alpha: float | None = 0.18  # the published empirical internal weight
    top_n: int = 4
    probability_threshold: float = 0.8
    cf: float = 0.95
    patch_radius: int = 3
    patch_stride: int = 2
    rigid_budget: int = 450
    # the PCA orientation + similarity prior leave only a small residual pose,
    # so the pipeline searches a tighter box than the op's +/-20deg/20mm default
    # (wide bounds let the optimizer drift along the near-flat LC2 landscape
    # of a speckled, azimuthally symmetric head)
    rigid_angle_bound_deg: float = 8.0
    rigid_trans_bound_mm: float = 10.0
    nonrigid_budget: int = 2000
    control_sweeps: tuple = ((4, 4, 4), (6, 6, 6))
    displacement_bound: float = 10.0
    mesh_target_vertices: int = 700
    mesh_smooth_iterations: int = 2
    mesh_smooth_lambda: float = 0.3
    mesh_max_iters: int = 150
    # P-ball radius in voxels; at coarse grids 2 voxels can span half the
    # ventricle and blur the grow/hold decision several mm past the boundary
    mesh_ball_radius_voxels: float = 2.0
    workers: int = 1

    @staticmethod
    def from_dict(d: dict) -> "PipelineParams":
        known = {f: d[f] for f in d if f in PipelineParams.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown parameter(s): {sorted(unknown)}")
        if "control_sweeps" in known:
            known["control_sweeps"] = tuple(tuple(s) for s in known["control_sweeps"])
        try:
            return PipelineParams(**known)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class Atlas:
    entry: AtlasEntry
    ellipsoid: Ellipsoid


def load_atlas_dir(path: str | Path) -> list[Atlas]:
    """Bank layout: <id>.mri.mhd + <id>.vent.mhd + <id>.json (brain ellipsoid)."""
    path = Path(path)
    atlases = []
    for meta in sorted(path.glob("*.json")):
        atlas_id = meta.name[: -len(".json")]
        mri_path = path / f"{atlas_id}.mri.mhd"
        vent_path = path / f"{atlas_id}.vent.mhd"
        if not mri_path.exists() or not vent_path.exists():
            raise ConfigError(f"atlas {atlas_id} is missing its .mri.mhd or .vent.mhd")
        info = json.loads(meta.read_text())
        mri = load_metaimage(mri_path)
        vent = load_metaimage(vent_path)
        if isinstance(mri, LabelMap):
            mri = Volume(mri.data.astype(np.float64), mri.spacing, mri.origin)
        atlases.append(
            Atlas(
                entry=AtlasEntry(atlas_id, mri, vent),
                ellipsoid=Ellipsoid.from_dict(info["ellipsoid"]),
            )
        )
    if not atlases:
        raise ConfigError(f"no atlases found under {path}")
    return atlases


def save_atlas(directory: str | Path, atlas_id: str, mri: Volume, vent: LabelMap, ellipsoid: Ellipsoid, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_metaimage(mri, directory / f"{atlas_id}.mri.mhd")
    save_metaimage(vent, directory / f"{atlas_id}.vent.mhd")
    info = {"ellipsoid": ellipsoid.to_dict()}
    if extra:
        info.update(extra)
    (directory / f"{atlas_id}.json").write_text(json.dumps(info, sort_keys=True, indent=1))


def _dump_json(obj: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n")


# ---------------------------------------------------------------------------
# Brain volume stage
# ---------------------------------------------------------------------------

def run_brain_volume(us: Volume, params: PipelineParams | None = None) -> dict:
    params = params or PipelineParams()
    bv_params = BrainVolumeParams(cf=params.cf)
    est = estimate_brain_volume(us, bv_params)
    return {
        "schema_version": SCHEMA_VERSION,
        "brain_volume": est.to_dict(),
    }


# ---------------------------------------------------------------------------
# Segmentation pipeline
# ---------------------------------------------------------------------------

@dataclass
class SegmentOutputs:
    final_label: LabelMap
    staple_label: LabelMap
    probability: LabelMap
    mesh: mesh_mod.SurfaceMesh
    brain_estimate: BrainVolumeEstimate
    per_atlas: list[dict]
    selected: list[str]
    report: dict
    timings: dict
    variants: dict = field(default_factory=dict)  # name -> LabelMap


def _register_one(us, atlas: Atlas, base: AffineMap, pivot, params: PipelineParams):
    return register_rigid(
        us, atlas.entry, RigidParams(), budget=params.rigid_budget, base=base, pivot=pivot,
        angle_bound=np.radians(params.rigid_angle_bound_deg),
        trans_bound=params.rigid_trans_bound_mm,
        patch_radius=params.patch_radius, stride=params.patch_stride,
    )


def _staple_on_roi(labels: list[LabelMap], rater_ids: list[str], us: Volume, dilation: int = 2):
    """STAPLE restricted to the dilated union of the labels.

    On the full grid the enormous background drives every estimated
    specificity to ~1 and saturates the posterior, which turns the 80%
    threshold into low-quorum voting; restricting the performance model to
    the disagreement neighborhood keeps it meaningful. The per-voxel E/M
    steps are geometry-free, so the ROI voxels are packed into a flat grid
    and the posterior is pasted back afterward.
    """
    union = np.zeros(labels[0].dims, dtype=bool)
    for lab in labels:
        union |= lab.data > 0
    if not union.any():
        raise EmptyLabelError("no foreground in any selected label")
    roi = ndimage.binary_dilation(union, iterations=dilation)
    packed = [LabelMap(lab.data[roi].reshape(-1, 1, 1)) for lab in labels]
    result = staple_fuse(packed, rater_ids=rater_ids)
    prob_full = np.zeros(labels[0].dims)
    prob_full[roi] = result.probability.probability[:, 0, 0]
    probability = LabelMap(
        (prob_full > 0.5).astype(np.uint8), us.spacing, us.origin, probability=prob_full
    )
    return result, probability


def run_segment(us: Volume, atlases: list[Atlas], params: PipelineParams | None = None,
                pterm: PTermParams | None = None, emit_variants: bool = False) -> SegmentOutputs:
    params = params or PipelineParams()
    timings = {}
    t_start = time.perf_counter()

    # subject geometry: brain ellipsoid + orientation from the inferior skull
    t0 = time.perf_counter()
    try:
        brain_est = estimate_brain_volume(us, BrainVolumeParams(cf=params.cf))
        orient_skull = orientation_skull_label(us, brain_est.ellipsoid)
        orientation = orient_by_pca(us, orient_skull, brain_est.centroid)
    except Exception as exc:
        raise StageError("init", str(exc)) from exc
    timings["init"] = time.perf_counter() - t0

    subject = brain_est.ellipsoid
    c_s = np.asarray(subject.center)
    orient_map = AffineMap(orientation, c_s - orientation @ c_s)
    if pterm is None:
        pterm = PTermParams.from_us(
            us, c1=params.c1, c2=params.c2,
            low_anchor=params.i_low_anchor, high_anchor=params.i_high_anchor,
        )

    # canonical subject ellipsoid for the prior (orientation already applied)
    subject_canonical = Ellipsoid(subject.center, subject.semi_axes, np.eye(3))

    # per-atlas rigid then non-rigid registration
    t0 = time.perf_counter()
    bases = []
    for atlas in atlases:
        prior = prior_similarity_transform(subject_canonical, atlas.ellipsoid)
        inv_scale = 1.0 / np.asarray(prior.scale)
        prior_inv = AffineMap(np.diag(inv_scale), -np.asarray(prior.translation) * inv_scale)
        bases.append(prior_inv.compose(orient_map))

    def do_rigid(i):
        try:
            return _register_one(us, atlases[i], bases[i], c_s, params)
        except Exception as exc:
            raise StageError("register-rigid", f"atlas {atlases[i].entry.atlas_id}: {exc}") from exc

    with ThreadPoolExecutor(max_workers=max(params.workers, 1)) as pool:
        rigid_results = list(pool.map(do_rigid, range(len(atlases))))
    timings["rigid"] = time.perf_counter() - t0

    # mean warped-label volume after the rigid stage (the P_adj reference)
    rigid_labels = []
    for atlas, rigid, base in zip(atlases, rigid_results, bases):
        t = CompositeTransform(base.compose(rigid.params.to_affine(c_s)))
        rigid_labels.append(warp_label(atlas.entry.ventricle_label, t, us))
    volumes = [label_volume(lab) for lab in rigid_labels]
    positive = [v for v in volumes if v > 0]
    mean_label_vol = float(np.mean(positive)) if positive else 0.0

    t0 = time.perf_counter()

    def do_nonrigid(i):
        try:
            return register_nonrigid(
                us, atlases[i].entry, rigid_results[i].params, pterm,
                budget=params.nonrigid_budget, base=bases[i], pivot=c_s,
                control_sweeps=params.control_sweeps,
                displacement_bound=params.displacement_bound,
                mean_label_volume=mean_label_vol or None,
                patch_radius=params.patch_radius, stride=params.patch_stride,
            )
        except Exception as exc:
            raise StageError("register-nonrigid", f"atlas {atlases[i].entry.atlas_id}: {exc}") from exc

    with ThreadPoolExecutor(max_workers=max(params.workers, 1)) as pool:
        nonrigid_results = list(pool.map(do_nonrigid, range(len(atlases))))
    timings["nonrigid"] = time.perf_counter() - t0

    per_atlas = []
    for atlas, rigid, nonrigid in zip(atlases, rigid_results, nonrigid_results):
        per_atlas.append({
            "atlas_id": atlas.entry.atlas_id,
            "rigid_score": rigid.score,
            "rigid_init_score": rigid.init_score,
            "rigid_params": {"angles": list(rigid.params.angles),
                             "translation": list(rigid.params.translation)},
            "score": nonrigid.score,
            "lc2": nonrigid.lc2,
            "p_adjusted": nonrigid.p_adjusted,
        })

    # fusion
    t0 = time.perf_counter()
    scored = [(a.entry.atlas_id, nr.score) for a, nr in zip(atlases, nonrigid_results)]
    selected = rank_select(scored, min(params.top_n, len(scored)))
    sel_idx = [next(i for i, a in enumerate(atlases) if a.entry.atlas_id == sid) for sid in selected]
    sel_labels = [
        LabelMap((nonrigid_results[i].warped_label.data > 0).astype(np.uint8), us.spacing, us.origin)
        for i in sel_idx
    ]
    try:
        staple, probability = _staple_on_roi(sel_labels, selected, us)
        fused = binarize_probability(probability, params.probability_threshold)
    except Exception as exc:
        raise StageError("fusion", str(exc)) from exc
    closed = ndimage.binary_closing(fused.data > 0, structure=np.ones((3, 3, 3)))
    staple_label = LabelMap(closed.astype(np.uint8), us.spacing, us.origin)
    timings["fusion"] = time.perf_counter() - t0

    # mesh refinement
    t0 = time.perf_counter()
    try:
        surf = mesh_mod.marching_cubes(staple_label)
        dec = mesh_mod.decimate(surf, params.mesh_target_vertices)
        smoothed = mesh_mod.laplacian_smooth(
            dec.mesh, params.mesh_smooth_iterations, params.mesh_smooth_lambda
        )
        v_k = label_volume(staple_label)
        sel_volumes = [label_volume(lab) for lab in sel_labels]
        v_m = float(np.mean([v for v in sel_volumes if v > 0])) if any(sel_volumes) else v_k
        ep = mesh_mod.MeshEnergyParams(
            beta=params.beta, alpha=params.alpha, l=max(2.0 * v_k / v_m, 0.2) if v_m else 2.0,
            ball_radius_voxels=params.mesh_ball_radius_voxels,
        )
        deform = mesh_mod.deform_mesh(smoothed, us, pterm, ep, max_iters=params.mesh_max_iters)
        final_label = mesh_mod.mesh_to_label(deform.mesh, us)
    except Exception as exc:
        raise StageError("mesh", str(exc)) from exc
    timings["mesh"] = time.perf_counter() - t0

    v_vent = label_volume(final_label)
    ratio = ventricle_brain_ratio(v_vent, brain_est.volume_mm3)

    report = {
        "schema_version": SCHEMA_VERSION,
        "brain_volume": brain_est.to_dict(),
        "pterm": {"c1": pterm.c1, "c2": pterm.c2, "i_low": pterm.i_low, "i_high": pterm.i_high},
        "per_atlas": per_atlas,
        "selected": selected,
        "staple": {
            "iterations": staple.n_iterations,
            "raters": [
                {"id": r.rater_id, "p": r.sensitivity, "q": r.specificity} for r in staple.raters
            ],
        },
        "mesh": {
            "vertices": int(len(deform.mesh.vertices)),
            "energy_trace_first": deform.energy_trace[0],
            "energy_trace_last": deform.energy_trace[-1],
            "literal_energy": deform.literal_energy,
            "l": ep.l,
            "converged": deform.converged,
        },
        "volumes_mm3": {
            "ventricles": v_vent,
            "staple_stage_ventricles": label_volume(staple_label),
            "brain": brain_est.volume_mm3,
        },
        "ratio": ratio,
    }
    outputs = SegmentOutputs(
        final_label=final_label,
        staple_label=staple_label,
        probability=probability,
        mesh=deform.mesh,
        brain_estimate=brain_est,
        per_atlas=per_atlas,
        selected=selected,
        report=report,
        timings=timings,
    )

    if emit_variants:
        t0 = time.perf_counter()
        outputs.variants = _comparison_variants(
            us, atlases, params, pterm, bases, c_s, rigid_results, nonrigid_results,
            selected, sel_labels, staple_label, final_label, mean_label_vol,
        )
        timings["variants"] = time.perf_counter() - t0
    timings["total"] = time.perf_counter() - t_start
    return outputs


def _mesh_refine_label(label: LabelMap, us: Volume, pterm: PTermParams,
                       params: PipelineParams, v_m: float) -> LabelMap:
    surf = mesh_mod.marching_cubes(label)
    dec = mesh_mod.decimate(surf, params.mesh_target_vertices)
    smoothed = mesh_mod.laplacian_smooth(dec.mesh, params.mesh_smooth_iterations, params.mesh_smooth_lambda)
    v_k = label_volume(label)
    ep = mesh_mod.MeshEnergyParams(
        beta=params.beta, alpha=params.alpha, l=max(2.0 * v_k / v_m, 0.2) if v_m else 2.0,
        ball_radius_voxels=params.mesh_ball_radius_voxels,
    )
    deform = mesh_mod.deform_mesh(smoothed, us, pterm, ep, max_iters=params.mesh_max_iters)
    return mesh_mod.mesh_to_label(deform.mesh, us)


def _comparison_variants(us, atlases, params, pterm, bases, c_s, rigid_results,
                         nonrigid_results, selected, sel_labels, staple_label,
                         final_label, mean_label_vol) -> dict:
    """Method-ladder labels: lc2_only, single_best, single_best_mesh, mv, staple, proposed."""
    best_idx = next(i for i, a in enumerate(atlases) if a.entry.atlas_id == selected[0])
    single_best = LabelMap(
        (nonrigid_results[best_idx].warped_label.data > 0).astype(np.uint8), us.spacing, us.origin
    )
    variants = {
        "single_best": single_best,
        "mv": majority_vote(sel_labels),
        "staple": staple_label,
        "proposed": final_label,
    }
    # LC2-only: the best atlas re-registered non-rigidly without the P term
    lc2_scores = [(a.entry.atlas_id, r.score) for a, r in zip(atlases, rigid_results)]
    lc2_best_id = rank_select(lc2_scores, 1)[0]
    i = next(j for j, a in enumerate(atlases) if a.entry.atlas_id == lc2_best_id)
    huge = 1e12  # windows so wide the hinge terms vanish: P contributes only C2/N
    pterm_off = PTermParams(c1=params.c1, c2=1e-12, i_low=-huge, i_high=huge)
    nr = register_nonrigid(
        us, atlases[i].entry, rigid_results[i].params, pterm_off,
        budget=params.nonrigid_budget, base=bases[i], pivot=c_s,
        control_sweeps=params.control_sweeps,
        displacement_bound=params.displacement_bound,
        mean_label_volume=mean_label_vol or None,
        patch_radius=params.patch_radius, stride=params.patch_stride,
    )
    variants["lc2_only"] = LabelMap(
        (nr.warped_label.data > 0).astype(np.uint8), us.spacing, us.origin
    )
    try:
        variants["single_best_mesh"] = _mesh_refine_label(
            single_best, us, pterm, params, mean_label_vol or label_volume(single_best)
        )
    except Exception:
        variants["single_best_mesh"] = single_best
    return variants


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate_pair(pred: LabelMap, truth: LabelMap) -> dict:
    return {
        "dice": dice(pred, truth),
        "mad_mm": mean_absolute_surface_distance(pred, truth),
        "hausdorff_mm": hausdorff(pred, truth),
        "pred_volume_mm3": label_volume(pred),
        "truth_volume_mm3": label_volume(truth),
    }


VARIANT_ORDER = ("lc2_only", "single_best", "single_best_mesh", "mv", "staple", "proposed")


def _aggregate(rows: list[dict]) -> dict:
    agg = {}
    for key in ("dice", "mad_mm", "hausdorff_mm"):
        vals = np.asarray([r[key] for r in rows])
        agg[key] = {"mean": float(vals.mean()), "sd": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0}
    return agg


def run_evaluate(pairs: list[tuple[LabelMap, LabelMap]], case_ids: list[str] | None = None,
                 variants: dict[str, list[tuple[LabelMap, LabelMap]]] | None = None) -> dict:
    """Per-case and aggregate metrics for (prediction, truth) label pairs.

    ``variants`` maps a method name to its own (prediction, truth) list and
    produces the method-comparison table (one aggregate row per variant).
    """
    if case_ids is None:
        case_ids = [f"case{i}" for i in range(len(pairs))]
    rows = []
    for cid, (pred, truth) in zip(case_ids, pairs):
        row = {"case": cid}
        row.update(evaluate_pair(pred, truth))
        rows.append(row)
    report = {"schema_version": SCHEMA_VERSION, "cases": rows, "aggregate": _aggregate(rows)}
    if variants:
        table = []
        names = [n for n in VARIANT_ORDER if n in variants]
        names += [n for n in sorted(variants) if n not in VARIANT_ORDER]
        for name in names:
            vrows = [evaluate_pair(p, t) for p, t in variants[name]]
            entry = {"method": name, "cases": len(vrows)}
            entry.update(_aggregate(vrows))
            table.append(entry)
        report["method_table"] = table
    return report
