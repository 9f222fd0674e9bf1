"""Command-line interface.

Exit codes: 0 success, 2 configuration/usage error, 3 stage failure.
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import mesh as mesh_mod
from .brainvol import calibrate_cf
from .ellipsoid import Ellipsoid
from .errors import ConfigError, FontusError
from .fusion import binarize_probability, majority_vote, staple_fuse
from .metaimage import load_metaimage, save_metaimage
from .orient import prior_similarity_transform
from .phantom import PhantomSpec, atlas_bank_specs, generate_phantom
from .pipeline import (
    PipelineParams,
    SCHEMA_VERSION,
    _dump_json,
    evaluate_pair,
    load_atlas_dir,
    run_brain_volume,
    run_evaluate,
    run_segment,
    save_atlas,
)
from .registration import (
    AffineMap,
    AtlasEntry,
    PTermParams,
    RigidParams,
    register_nonrigid,
    register_rigid,
)
from .volume import LabelMap, Volume


def _load_params(config: str | None, seed: int | None, workers: int | None) -> tuple[PipelineParams, dict]:
    raw = {}
    if config:
        try:
            raw = json.loads(Path(config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config}: {exc}") from exc
    params_dict = dict(raw.get("params", {}))
    if workers is not None:
        params_dict["workers"] = workers
    params = PipelineParams.from_dict(params_dict)
    if seed is not None:
        raw["seed"] = seed
    return params, raw


def _fail(exc: Exception) -> None:
    click.echo(f"error: {exc}", err=True)
    if isinstance(exc, (ConfigError, click.UsageError)):
        sys.exit(2)
    sys.exit(3)


@click.group()
def main():
    """Infant brain volume and lateral-ventricle segmentation from 3D US."""


@main.group()
def phantom():
    """Synthetic phantom generation."""


@phantom.command("generate")
@click.option("--spec", "spec_path", type=click.Path(exists=True), default=None,
              help="JSON PhantomSpec overrides.")
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(), required=True)
@click.option("--bank", type=int, default=0, help="Also write an atlas bank of this size.")
def phantom_generate(spec_path, seed, out, bank):
    """Write us.mhd, mri.mhd, truth_*.mhd and truth.json under --out."""
    try:
        overrides = json.loads(Path(spec_path).read_text()) if spec_path else {}
        if "dims" in overrides:
            overrides["dims"] = tuple(overrides["dims"])
        if "spacing" in overrides:
            overrides["spacing"] = tuple(overrides["spacing"])
        if "semi_axes_range" in overrides:
            overrides["semi_axes_range"] = tuple(overrides["semi_axes_range"])
        spec = PhantomSpec(seed=overrides.pop("seed", seed), **overrides)
    except (TypeError, ValueError, json.JSONDecodeError) as exc:
        _fail(ConfigError(str(exc)))
        return
    try:
        ph = generate_phantom(spec)
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_metaimage(ph.us, out_dir / "us.mhd")
        save_metaimage(ph.mri, out_dir / "mri.mhd")
        save_metaimage(ph.truth_ventricles, out_dir / "truth_ventricles.mhd")
        save_metaimage(ph.truth_brain, out_dir / "truth_brain.mhd")
        _dump_json(
            {
                "schema_version": SCHEMA_VERSION,
                "ellipsoid": ph.truth_ellipsoid.to_dict(),
                "brain_volume_mm3": ph.truth_brain_volume,
                "ventricle_volume_mm3": ph.truth_ventricle_volume,
                "seed": spec.seed,
            },
            out_dir / "truth.json",
        )
        if bank > 0:
            bank_dir = out_dir / "atlases"
            for bank_spec in atlas_bank_specs(spec.seed, bank, spec.dims, spec.spacing,
                                              spec.semi_axes_range):
                atlas_ph = generate_phantom(bank_spec)
                save_atlas(
                    bank_dir, f"atlas{bank_spec.seed}", atlas_ph.mri,
                    atlas_ph.truth_ventricles, atlas_ph.truth_ellipsoid,
                    extra={
                        "ventricle_volume_mm3": atlas_ph.truth_ventricle_volume,
                        "brain_volume_mm3": atlas_ph.truth_brain_volume,
                    },
                )
        click.echo(f"phantom written to {out_dir}")
    except FontusError as exc:
        _fail(exc)


@main.command("brain-volume")
@click.option("--us", "us_path", type=click.Path(exists=True), required=True)
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--out", type=click.Path(), required=True)
def brain_volume_cmd(us_path, config, out):
    """Estimate total brain volume; write report.json."""
    try:
        params, _ = _load_params(config, None, None)
        us = load_metaimage(us_path)
        if isinstance(us, LabelMap):
            us = Volume(us.data.astype(float), us.spacing, us.origin)
        report = run_brain_volume(us, params)
        _dump_json(report, Path(out))
        click.echo(f"brain volume: {report['brain_volume']['volume_mm3']:.0f} mm^3")
    except FontusError as exc:
        _fail(exc)


@main.command("register")
@click.option("--us", "us_path", type=click.Path(exists=True), required=True)
@click.option("--atlas-dir", type=click.Path(exists=True), required=True)
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--out", type=click.Path(), required=True)
def register_cmd(us_path, atlas_dir, config, out):
    """Rigid + non-rigid registration of every atlas; write transforms and labels."""
    try:
        params, _ = _load_params(config, None, None)
        us = load_metaimage(us_path)
        if isinstance(us, LabelMap):
            us = Volume(us.data.astype(float), us.spacing, us.origin)
        atlases = load_atlas_dir(atlas_dir)
        from .brainvol import BrainVolumeParams, detect_skull_voxels, estimate_brain_volume
        from .orient import orient_by_pca

        est = estimate_brain_volume(us, BrainVolumeParams(cf=params.cf))
        skull = detect_skull_voxels(us, est.ellipsoid, BrainVolumeParams(cf=params.cf))
        rot = orient_by_pca(us, skull, est.centroid)
        c_s = np.asarray(est.ellipsoid.center)
        orient_map = AffineMap(rot, c_s - rot @ c_s)
        subject_canonical = Ellipsoid(est.ellipsoid.center, est.ellipsoid.semi_axes, np.eye(3))
        pterm = PTermParams.from_us(us, c1=params.c1, c2=params.c2,
                                    low_anchor=params.i_low_anchor, high_anchor=params.i_high_anchor)
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        for atlas in atlases:
            prior = prior_similarity_transform(subject_canonical, atlas.ellipsoid)
            inv_scale = 1.0 / np.asarray(prior.scale)
            base = AffineMap(np.diag(inv_scale), -np.asarray(prior.translation) * inv_scale).compose(orient_map)
            rigid = register_rigid(us, atlas.entry, RigidParams(), budget=params.rigid_budget,
                                   base=base, pivot=c_s,
                                   angle_bound=np.radians(params.rigid_angle_bound_deg),
                                   trans_bound=params.rigid_trans_bound_mm,
                                   patch_radius=params.patch_radius, stride=params.patch_stride)
            nonrigid = register_nonrigid(us, atlas.entry, rigid.params, pterm,
                                         budget=params.nonrigid_budget, base=base, pivot=c_s,
                                         control_sweeps=params.control_sweeps,
                                         displacement_bound=params.displacement_bound,
                                         patch_radius=params.patch_radius, stride=params.patch_stride)
            aid = atlas.entry.atlas_id
            lines = ["rigid angles_rad " + " ".join(f"{a:.17g}" for a in rigid.params.angles),
                     "rigid translation_mm " + " ".join(f"{t:.17g}" for t in rigid.params.translation),
                     f"rigid lc2 {rigid.score:.17g}",
                     f"nonrigid score {nonrigid.score:.17g}",
                     "ffd dims " + " ".join(str(d) for d in nonrigid.ffd.control_dims),
                     "ffd displacements_mm " + " ".join(
                         f"{v:.17g}" for v in nonrigid.ffd.displacements.ravel())]
            (out_dir / f"{aid}.transform.txt").write_text("\n".join(lines) + "\n")
            save_metaimage(nonrigid.warped_label, out_dir / f"{aid}.warped.mhd")
            click.echo(f"{aid}: lc2={rigid.score:.4f} score={nonrigid.score:.4f}")
    except FontusError as exc:
        _fail(exc)


@main.command("fuse")
@click.option("--labels", multiple=True, type=click.Path(exists=True), required=True)
@click.option("--method", type=click.Choice(["staple", "mv"]), default="staple")
@click.option("--out", type=click.Path(), required=True)
@click.option("--threshold", type=float, default=0.8)
def fuse_cmd(labels, method, out, threshold):
    """Fuse warped labels; write prob.mhd (staple) or fused.mhd (mv) + raters.json."""
    try:
        maps = [load_metaimage(p) for p in labels]
        maps = [m if isinstance(m, LabelMap) else LabelMap(m.data.astype(np.uint8), m.spacing, m.origin) for m in maps]
        maps = [LabelMap((m.data > 0).astype(np.uint8), m.spacing, m.origin) for m in maps]
        out_path = Path(out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        if method == "mv":
            fused = majority_vote(maps)
            save_metaimage(fused, out_path)
        else:
            result = staple_fuse(maps, rater_ids=[Path(p).stem for p in labels])
            prob_vol = Volume(result.probability.probability, maps[0].spacing, maps[0].origin)
            save_metaimage(prob_vol, out_path)
            fused = binarize_probability(result.probability, threshold)
            save_metaimage(fused, out_path.with_name(out_path.stem + ".binary.mhd"))
            _dump_json(
                {
                    "schema_version": SCHEMA_VERSION,
                    "raters": [
                        {"id": r.rater_id, "p": r.sensitivity, "q": r.specificity}
                        for r in result.raters
                    ],
                    "iterations": result.n_iterations,
                },
                out_path.with_name("raters.json"),
            )
        click.echo(f"fused ({method}) -> {out_path}")
    except FontusError as exc:
        _fail(exc)


@main.command("refine")
@click.option("--mesh", "mesh_path", type=click.Path(exists=True), required=True)
@click.option("--us", "us_path", type=click.Path(exists=True), required=True)
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--out", type=click.Path(), required=True)
def refine_cmd(mesh_path, us_path, config, out):
    """Deform a PLY mesh against the US volume; write the refined PLY."""
    try:
        params, _ = _load_params(config, None, None)
        us = load_metaimage(us_path)
        if isinstance(us, LabelMap):
            us = Volume(us.data.astype(float), us.spacing, us.origin)
        surf = mesh_mod.load_ply(mesh_path)
        pterm = PTermParams.from_us(us, c1=params.c1, c2=params.c2,
                                    low_anchor=params.i_low_anchor, high_anchor=params.i_high_anchor)
        ep = mesh_mod.MeshEnergyParams(beta=params.beta, alpha=params.alpha)
        result = mesh_mod.deform_mesh(surf, us, pterm, ep, max_iters=params.mesh_max_iters)
        mesh_mod.save_ply(result.mesh, out)
        click.echo(f"refined mesh -> {out} (energy {result.energy_trace[0]:.4f} -> {result.energy_trace[-1]:.4f})")
    except FontusError as exc:
        _fail(exc)


@main.command("segment")
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--us", "us_path", type=click.Path(exists=True), required=True)
@click.option("--atlas-dir", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--workers", type=int, default=None)
@click.option("--variants", is_flag=True, default=False)
@click.option("--out", type=click.Path(), required=True)
def segment_cmd(config, us_path, atlas_dir, seed, workers, variants, out):
    """Full pipeline; writes labels, mesh, report.json and timing.json."""
    try:
        params, _ = _load_params(config, seed, workers)
        us = load_metaimage(us_path)
        if isinstance(us, LabelMap):
            us = Volume(us.data.astype(float), us.spacing, us.origin)
        atlases = load_atlas_dir(atlas_dir)
        outputs = run_segment(us, atlases, params, emit_variants=variants)
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_metaimage(outputs.final_label, out_dir / "ventricles.mhd")
        save_metaimage(outputs.staple_label, out_dir / "staple.mhd")
        prob = Volume(outputs.probability.probability, us.spacing, us.origin)
        save_metaimage(prob, out_dir / "probability.mhd")
        mesh_mod.save_ply(outputs.mesh, out_dir / "ventricles.ply")
        for name, lab in outputs.variants.items():
            save_metaimage(lab, out_dir / f"variant_{name}.mhd")
        _dump_json(outputs.report, out_dir / "report.json")
        _dump_json({"timings_s": outputs.timings}, out_dir / "timing.json")
        click.echo(
            f"segmented: ratio={outputs.report['ratio']:.5f} "
            f"ventricles={outputs.report['volumes_mm3']['ventricles']:.0f} mm^3"
        )
    except FontusError as exc:
        _fail(exc)


@main.command("evaluate")
@click.option("--pred", multiple=True, type=click.Path(exists=True), required=True)
@click.option("--truth", multiple=True, type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
def evaluate_cmd(pred, truth, out):
    """Dice / MAD / Hausdorff per case plus aggregates."""
    try:
        if len(pred) != len(truth):
            raise ConfigError("need one --truth per --pred")
        pairs = []
        for p, t in zip(pred, truth):
            pl = load_metaimage(p)
            tl = load_metaimage(t)
            pl = pl if isinstance(pl, LabelMap) else LabelMap((pl.data > 0.5).astype(np.uint8), pl.spacing, pl.origin)
            tl = tl if isinstance(tl, LabelMap) else LabelMap((tl.data > 0.5).astype(np.uint8), tl.spacing, tl.origin)
            pl = LabelMap((pl.data > 0).astype(np.uint8), pl.spacing, pl.origin)
            tl = LabelMap((tl.data > 0).astype(np.uint8), tl.spacing, tl.origin)
            pairs.append((pl, tl))
        report = run_evaluate(pairs, case_ids=[Path(p).stem for p in pred])
        _dump_json(report, Path(out))
        agg = report["aggregate"]
        click.echo(
            f"dice {agg['dice']['mean']:.3f} mad {agg['mad_mm']['mean']:.2f}mm "
            f"hausdorff {agg['hausdorff_mm']['mean']:.2f}mm over {len(pairs)} case(s)"
        )
    except FontusError as exc:
        _fail(exc)


@main.command("calibrate-cf")
@click.option("--atlas-dir", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
def calibrate_cf_cmd(atlas_dir, out):
    """Leave-one-out C_f calibration from an atlas bank's ellipsoids + brain volumes."""
    try:
        path = Path(atlas_dir)
        pairs = []
        for meta in sorted(path.glob("*.json")):
            info = json.loads(meta.read_text())
            if "ellipsoid" not in info or "brain_volume_mm3" not in info:
                continue
            pairs.append((Ellipsoid.from_dict(info["ellipsoid"]), float(info["brain_volume_mm3"])))
        if len(pairs) < 3:
            raise ConfigError(f"need >= 3 atlases with brain_volume_mm3, found {len(pairs)}")
        cal = calibrate_cf(pairs)
        _dump_json({"schema_version": SCHEMA_VERSION, "calibration": cal.to_dict()}, Path(out))
        click.echo(f"cf = {cal.cf:.4f} (LOO mean err {100 * cal.loo_mean_abs_rel_error:.2f}%)")
    except FontusError as exc:
        _fail(exc)


if __name__ == "__main__":
    main()
