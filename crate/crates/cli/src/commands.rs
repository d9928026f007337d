use std::path::{Path, PathBuf};

use boxseg::ba_unet::BaUnet;
use boxseg::manifest::{resolve, Manifest, ManifestCase};
use boxseg::metrics::{aggregate_fold, score_case, write_report_csv, CaseScore};
use boxseg::phantom::generate_corpus;
use boxseg::preprocess::{
    crop_slices, extract_organ_slab, make_bounding_boxes, resize_volume, window_normalize, Organ, OrganProfile,
    ResizeMode, SlabReference,
};
use boxseg::pseudo_mask::{generate_pseudo_mask_with_report, PseudoMaskParams};
use boxseg::trainer::{infer as infer_volume, make_folds, TrainCase, TrainConfig, Trainer};
use boxseg::volume::{binarize, load_boxes, load_volume, save_boxes, save_volume, Dtype, SoftLabelVolume, Volume, VolumeShape};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::FileConfig;
use crate::error::{CliError, CliResult};
use crate::{BboxArgs, EvalArgs, InferArgs, PhantomArgs, PreprocessArgs, PseudomaskArgs, TrainArgs};

pub struct Context {
    pub seed: u64,
    pub out: PathBuf,
    pub file: FileConfig,
}

impl Context {
    fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// How `path` is recorded in a manifest written to the output directory.
    fn entry(&self, path: &Path) -> String {
        if let Ok(rel) = path.strip_prefix(&self.out) {
            return rel.to_string_lossy().into_owned();
        }
        absolute(path)
    }
}

fn absolute(path: &Path) -> String {
    std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf()).to_string_lossy().into_owned()
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::usage("output", e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::usage("out", format!("cannot write {}: {e}", path.display())))
}

fn to_value(v: &impl Serialize) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn shape_arg(field: &'static str, v: &[usize]) -> CliResult<VolumeShape> {
    match v {
        &[s, h, w] => Ok(VolumeShape::new(s, h, w)?),
        _ => Err(CliError::usage(field, "expected three comma-separated sizes")),
    }
}

fn pair<T: Copy>(field: &'static str, v: &[T]) -> CliResult<(T, T)> {
    match v {
        &[a, b] => Ok((a, b)),
        _ => Err(CliError::usage(field, "expected two comma-separated values")),
    }
}

fn organ_arg(name: &str) -> CliResult<Organ> {
    Ok(Organ::parse(name)?)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "volume".into(), |s| s.to_string_lossy().into_owned())
}

fn required<'a>(case: &'a ManifestCase, field: &'static str, value: &'a Option<String>) -> CliResult<&'a str> {
    value.as_deref().ok_or_else(|| CliError::usage(field, format!("case `{}` has no `{field}` entry", case.id)))
}

fn load_manifest(path: &Path) -> CliResult<Manifest> {
    Ok(Manifest::load(path)?)
}

pub fn phantom(ctx: &Context, a: &PhantomArgs) -> CliResult<Value> {
    let mut spec = ctx.file.phantom.clone().unwrap_or_default();
    spec.seed = ctx.seed;
    if let Some(shape) = &a.shape {
        spec.shape = shape_arg("shape", shape)?;
    }
    if let Some(n) = a.n_blobs {
        spec.n_blobs = n;
    }
    if let Some(n) = a.noise_std {
        spec.noise_std_hu = n;
    }
    if let Some(p) = a.hole_probability {
        spec.hole_probability = p;
    }
    if a.noiseless {
        spec = spec.noiseless();
    }
    let manifest = generate_corpus(a.count, &spec, &ctx.out)?;
    manifest.save(ctx.out_path("manifest.json"))?;
    println!("wrote {} phantoms to {}", a.count, ctx.out.display());
    Ok(json!({ "count": a.count, "phantom": to_value(&spec) }))
}

struct Prepared {
    image: Volume,
    gt: Option<Volume>,
    slab: Option<boxseg::preprocess::SliceRange>,
}

fn prepare(profile: &OrganProfile, a: &PreprocessArgs, image: &Volume, gt: Option<Volume>) -> CliResult<Prepared> {
    let mut image = window_normalize(image, profile.hu_window)?;
    let mut gt = gt;
    let mut slab = None;
    if a.crop_slab {
        let reference = gt.as_ref().ok_or_else(|| CliError::usage("gt", "--crop-slab needs ground truth"))?;
        let (cropped, range) = extract_organ_slab(&image, SlabReference::Labels(reference))?;
        gt = Some(crop_slices(reference, range)?);
        image = cropped;
        slab = Some(range);
    }
    if a.resize {
        image = resize_volume(&image, profile.target_shape, ResizeMode::Trilinear)?;
        gt = gt.map(|g| resize_volume(&g, profile.target_shape, ResizeMode::Nearest)).transpose()?;
    }
    Ok(Prepared { image, gt, slab })
}

pub fn preprocess(ctx: &Context, a: &PreprocessArgs) -> CliResult<Value> {
    let mut profile = OrganProfile::preset(organ_arg(&a.organ)?);
    if let Some(o) = &ctx.file.profile {
        profile = profile.with_overrides(o)?;
    }
    if let Some(w) = &a.window {
        profile.hu_window = pair("window", w)?;
    }
    if let Some(t) = &a.target_shape {
        profile.target_shape = shape_arg("target_shape", t)?;
    }
    profile.validate()?;

    if let Some(mpath) = &a.manifest {
        let manifest = load_manifest(mpath)?;
        let mut out = Manifest::default();
        for case in &manifest.cases {
            let image = load_volume(resolve(mpath, &case.image))?;
            let gt = case.gt.as_deref().map(|g| load_volume(resolve(mpath, g))).transpose()?;
            let p = prepare(&profile, a, &image, gt)?;
            let image_path = ctx.out_path(&format!("{}_image.json", case.id));
            save_volume(&p.image, &image_path)?;
            let mut entry = ManifestCase { id: case.id.clone(), image: ctx.entry(&image_path), ..ManifestCase::default() };
            if let Some(gt) = &p.gt {
                let gt_path = ctx.out_path(&format!("{}_gt.json", case.id));
                save_volume(gt, &gt_path)?;
                entry.gt = Some(ctx.entry(&gt_path));
            }
            if let Some(range) = p.slab {
                write_json(&ctx.out_path(&format!("{}_slab.json", case.id)), &range)?;
            }
            out.cases.push(entry);
        }
        out.save(ctx.out_path("manifest.json"))?;
        println!("preprocessed {} cases", out.cases.len());
    } else {
        let image_path = a.image.as_ref().expect("clap enforces --image or --manifest");
        let gt = a.gt.as_deref().map(load_volume).transpose()?;
        let p = prepare(&profile, a, &load_volume(image_path)?, gt)?;
        save_volume(&p.image, ctx.out_path(&format!("{}.json", stem(image_path))))?;
        if let (Some(gt), Some(gt_path)) = (&p.gt, &a.gt) {
            save_volume(gt, ctx.out_path(&format!("{}.json", stem(gt_path))))?;
        }
        if let Some(range) = p.slab {
            write_json(&ctx.out_path("slab.json"), &range)?;
        }
        println!("preprocessed {}", image_path.display());
    }
    Ok(json!({ "profile": to_value(&profile), "crop_slab": a.crop_slab, "resize": a.resize }))
}

pub fn bbox(ctx: &Context, a: &BboxArgs) -> CliResult<Value> {
    if let Some(mpath) = &a.manifest {
        let mut manifest = load_manifest(mpath)?;
        for case in &mut manifest.cases {
            let gt = load_volume(resolve(mpath, required(case, "gt", &case.gt)?))?;
            let boxes = make_bounding_boxes(&gt, a.margin, a.split_lr)?;
            let path = ctx.out_path(&format!("{}_boxes.json", case.id));
            save_boxes(&boxes, &path)?;
            case.image = ctx.entry(&resolve(mpath, &case.image));
            case.gt = case.gt.as_deref().map(|g| ctx.entry(&resolve(mpath, g)));
            case.boxes = Some(ctx.entry(&path));
        }
        manifest.save(ctx.out_path("manifest.json"))?;
        println!("boxes for {} cases", manifest.cases.len());
    } else {
        let gt_path = a.gt.as_ref().expect("clap enforces --gt or --manifest");
        let boxes = make_bounding_boxes(&load_volume(gt_path)?, a.margin, a.split_lr)?;
        save_boxes(&boxes, ctx.out_path("boxes.json"))?;
        println!("boxes for {}", gt_path.display());
    }
    Ok(json!({ "margin": a.margin, "split_lr": a.split_lr }))
}

fn pseudomask_params(ctx: &Context, a: &PseudomaskArgs) -> CliResult<PseudoMaskParams> {
    let mut params = ctx.file.pseudo_mask.clone().unwrap_or_default();
    params.seed = ctx.seed;
    if let Some(organ) = &a.organ {
        let ks = OrganProfile::preset(organ_arg(organ)?).kmeans_ks;
        params.ks = [ks[0], ks[1]];
    }
    if let Some(ks) = &a.ks {
        let (k1, k2) = pair("ks", ks)?;
        params.ks = [k1, k2];
    }
    if let Some(v) = a.hole_area_max {
        params.hole_area_max = v;
    }
    if let Some(v) = a.fg_component_min_frac {
        params.fg_component_min_frac = v;
    }
    if let Some(v) = a.closing_radius {
        params.closing_radius = v;
    }
    if let Some(v) = a.kmeans_restarts {
        params.kmeans_restarts = v;
    }
    params.validate()?;
    Ok(params)
}

fn pseudomask_one(params: &PseudoMaskParams, image: &Path, boxes: &Path, mask_out: &Path, report_out: &Path) -> CliResult<()> {
    let image = load_volume(image)?;
    let (mask, report) = generate_pseudo_mask_with_report(&image, &load_boxes(boxes)?, params)?;
    save_volume(&mask.to_volume(image.spacing_mm())?, mask_out)?;
    write_json(report_out, &report)
}

pub fn pseudomask(ctx: &Context, a: &PseudomaskArgs) -> CliResult<Value> {
    let params = pseudomask_params(ctx, a)?;
    if let Some(mpath) = &a.manifest {
        let mut manifest = load_manifest(mpath)?;
        for case in &mut manifest.cases {
            let boxes = resolve(mpath, required(case, "boxes", &case.boxes)?);
            let image = resolve(mpath, &case.image);
            let mask_path = ctx.out_path(&format!("{}_pseudo_mask.json", case.id));
            let report_path = ctx.out_path(&format!("{}_stage_report.json", case.id));
            pseudomask_one(&params, &image, &boxes, &mask_path, &report_path)?;
            case.image = ctx.entry(&image);
            case.boxes = Some(ctx.entry(&boxes));
            case.gt = case.gt.as_deref().map(|g| ctx.entry(&resolve(mpath, g)));
            case.pseudo_mask = Some(ctx.entry(&mask_path));
        }
        manifest.save(ctx.out_path("manifest.json"))?;
        println!("pseudo masks for {} cases", manifest.cases.len());
    } else {
        let image = a.image.as_ref().expect("clap enforces --image or --manifest");
        let boxes = a.boxes.as_ref().expect("clap requires --boxes with --image");
        pseudomask_one(&params, image, boxes, &ctx.out_path("pseudo_mask.json"), &ctx.out_path("stage_report.json"))?;
        println!("pseudo mask for {}", image.display());
    }
    Ok(to_value(&params))
}

fn train_config(ctx: &Context, a: &TrainArgs) -> CliResult<(TrainConfig, boxseg::ba_unet::ArchConfig)> {
    let mut cfg = ctx.file.train.clone().unwrap_or_default();
    cfg.seed = ctx.seed;
    let overrides = [
        (a.alpha, &mut cfg.alpha),
        (a.epsilon, &mut cfg.epsilon),
        (a.adam_lr, &mut cfg.adam_lr),
        (a.sgd_lr, &mut cfg.sgd_lr_initial),
        (a.lr_decay_rate, &mut cfg.lr_decay_rate),
    ];
    for (flag, slot) in overrides {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(v) = a.adam_epochs {
        cfg.adam_epochs = v;
    }
    if let Some(v) = a.sgd_epochs {
        cfg.sgd_epochs = v;
    }
    if let Some(v) = a.lr_decayed_step {
        cfg.lr_decayed_step = v;
    }
    if let Some(v) = a.folds {
        cfg.folds = v;
    }
    cfg.validate()?;
    let mut arch = ctx.file.arch.clone().unwrap_or_default();
    if let Some(c) = a.base_channels {
        arch.base_channels = c;
    }
    arch.validate()?;
    Ok((cfg, arch))
}

fn load_train_case(mpath: &Path, case: &ManifestCase) -> CliResult<TrainCase> {
    let image = load_volume(resolve(mpath, &case.image))?;
    let mask = load_volume(resolve(mpath, required(case, "pseudo_mask", &case.pseudo_mask)?))?;
    let pseudo_mask = SoftLabelVolume::from_volume(&mask)?;
    Ok(TrainCase { id: case.id.clone(), image, pseudo_mask })
}

pub fn train(ctx: &Context, a: &TrainArgs) -> CliResult<Value> {
    let (cfg, arch) = train_config(ctx, a)?;
    let mpath = &a.manifest;
    let manifest = load_manifest(mpath)?;
    if manifest.cases.is_empty() {
        return Err(CliError::usage("manifest", "no cases listed"));
    }
    let ids: Vec<String> = manifest.cases.iter().map(|c| c.id.clone()).collect();
    let folds = if cfg.folds <= 1 { vec![Vec::new()] } else { make_folds(&ids, cfg.folds, cfg.seed)? };
    if let Some(f) = a.fold {
        if f == 0 || f > folds.len() {
            return Err(CliError::usage("fold", format!("must lie in 1..={}", folds.len())));
        }
    }
    let all_cases: Vec<TrainCase> =
        manifest.cases.iter().map(|c| load_train_case(mpath, c)).collect::<CliResult<_>>()?;
    let spacing = all_cases[0].image.spacing_mm();

    for (i, held_out) in folds.iter().enumerate() {
        let fold_no = i + 1;
        if a.fold.is_some_and(|f| f != fold_no) {
            continue;
        }
        let dir = ctx.out_path(&format!("fold_{fold_no}"));
        let cases: Vec<TrainCase> = all_cases.iter().filter(|c| !held_out.contains(&c.id)).cloned().collect();
        let mut trainer = if a.resume && dir.join("train_state.json").exists() {
            Trainer::resume(&dir, &cases)?
        } else {
            Trainer::new(BaUnet::new(arch.clone(), cfg.seed)?, &cases, &cfg)?
        };
        trainer.run_with(&cases, |t| {
            let e = t.log().last().expect("an epoch just finished");
            println!("fold {fold_no} epoch {} ({}) loss {:.5}", e.epoch, e.phase.as_str(), e.mean_loss);
            t.save(&dir, spacing)
        })?;
        trainer.save(&dir, spacing)?;

        let validation = Manifest {
            cases: manifest
                .cases
                .iter()
                .filter(|c| held_out.contains(&c.id))
                .map(|c| ManifestCase {
                    id: c.id.clone(),
                    image: absolute(&resolve(mpath, &c.image)),
                    gt: c.gt.as_deref().map(|g| absolute(&resolve(mpath, g))),
                    ..ManifestCase::default()
                })
                .collect(),
        };
        validation.save(dir.join("validation.json"))?;
    }
    Ok(json!({ "train": to_value(&cfg), "arch": to_value(&arch), "folds": folds.len() }))
}

pub fn infer(ctx: &Context, a: &InferArgs) -> CliResult<Value> {
    let model = BaUnet::<f32>::load(&a.checkpoint)?;
    if let Some(mpath) = &a.manifest {
        let mut manifest = load_manifest(mpath)?;
        for case in &mut manifest.cases {
            let image_path = resolve(mpath, &case.image);
            let image = load_volume(&image_path)?;
            let prob = infer_volume(&model, &image)?;
            let path = ctx.out_path(&format!("{}_prediction.json", case.id));
            save_volume(&prob.to_volume(image.spacing_mm())?, &path)?;
            case.image = ctx.entry(&image_path);
            case.gt = case.gt.as_deref().map(|g| ctx.entry(&resolve(mpath, g)));
            case.boxes = case.boxes.as_deref().map(|g| ctx.entry(&resolve(mpath, g)));
            case.pseudo_mask = case.pseudo_mask.as_deref().map(|g| ctx.entry(&resolve(mpath, g)));
            case.prediction = Some(ctx.entry(&path));
        }
        manifest.save(ctx.out_path("manifest.json"))?;
        println!("predicted {} cases", manifest.cases.len());
    } else {
        let image_path = a.image.as_ref().expect("clap enforces --image or --manifest");
        let image = load_volume(image_path)?;
        let prob = infer_volume(&model, &image)?;
        save_volume(&prob.to_volume(image.spacing_mm())?, ctx.out_path("prediction.json"))?;
        println!("predicted {}", image_path.display());
    }
    Ok(json!({ "checkpoint": ctx.entry(&a.checkpoint), "arch": to_value(model.config()) }))
}

fn score(id: &str, pred: &Path, gt: &Path, threshold: f64) -> CliResult<CaseScore> {
    let pred = load_volume(pred)?;
    let pred = match pred.dtype() {
        Dtype::Uint8Label => pred,
        _ => binarize(&SoftLabelVolume::from_volume(&pred)?, threshold)?,
    };
    Ok(score_case(id, &pred, &load_volume(gt)?)?)
}

pub fn eval(ctx: &Context, a: &EvalArgs) -> CliResult<Value> {
    let scores = if let Some(mpath) = &a.manifest {
        let manifest = load_manifest(mpath)?;
        manifest
            .cases
            .iter()
            .map(|c| {
                let pred = resolve(mpath, required(c, "prediction", &c.prediction)?);
                let gt = resolve(mpath, required(c, "gt", &c.gt)?);
                score(&c.id, &pred, &gt, a.threshold)
            })
            .collect::<CliResult<Vec<_>>>()?
    } else {
        let pred = a.pred.as_ref().expect("clap enforces --pred or --manifest");
        let gt = a.gt.as_ref().expect("clap requires --gt with --pred");
        vec![score(&stem(pred), pred, gt, a.threshold)?]
    };
    write_report_csv(&scores, ctx.out_path("report.csv"))?;
    let summary = aggregate_fold(&scores)?;
    println!("{} cases, mean DSC {:.2}", summary.n, summary.mean_dsc());
    Ok(json!({ "threshold": a.threshold }))
}
