//! Stage orchestration behind the command-line entry points.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::evaluation::{self, BlandAltman, EpochMae};
use crate::grid::Roi;
use crate::image_io::{self, GrayImage, Patch, Scale, SegMasks};
use crate::morphometry::{self, HexNeighbors, MorphoReport};
use crate::postprocess::{decode_class_probs, watershed_decode_with, DecodeParams, LabelMap};
use crate::synth::{self, Manifest, Stratum, SynthItem};
use crate::unet::{self, ContinuousGenerator, Head, Loss, Model, Net, Trainer};

/// Decoded segmentation of an image by either network head.
pub fn segment(model: &Net, image: &GrayImage, params: &DecodeParams) -> Result<LabelMap> {
    match model.config().head {
        Head::Regression => Ok(watershed_decode_with(&unet::infer_full(model, image)?, params)),
        Head::Classification3 => Ok(decode_class_probs(&unet::infer_probs(model, image)?, params.min_region_px)),
    }
}

/// Segmentation plus morphometry over `roi`.
pub fn analyze_image(model: &Net, image: &GrayImage, roi: Roi, params: &DecodeParams, convention: HexNeighbors) -> Result<MorphoReport> {
    let map = segment(model, image, params)?;
    morphometry::analyze(&map, roi, image.scale, convention)
}

/// Loads an image file: three pages are image + masks, one or two pages a
/// microscope export with an optional initial segmentation.
pub fn load_any(path: &Path) -> Result<(GrayImage, Option<SegMasks>)> {
    let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let three = if is_png {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        path.with_file_name(format!("{stem}_cells.png")).exists()
    } else {
        image_io::read_pages(path).map_err(|e| e.at_path(path))?.len() == 3
    };
    if three {
        let (image, masks) = image_io::load_three_page_mask(path)?;
        Ok((image, Some(masks)))
    } else if is_png {
        let pixels = image_io::read_gray_png(path).map_err(|e| e.at_path(path))?;
        let scale = match image_io::read_sidecar(path)? {
            Some(side) => side.scale()?,
            None => Scale::default(),
        };
        Ok((GrayImage::new(pixels, scale), None))
    } else {
        image_io::load_microscope_tiff(path)
    }
}

/// One dataset entry on disk.
#[derive(Debug, Clone)]
pub struct Sample {
    pub path: PathBuf,
    pub image: GrayImage,
    pub masks: Option<SegMasks>,
    pub stratum: Option<Stratum>,
}

impl Sample {
    pub fn stem(&self) -> String {
        self.path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
    }

    /// Analysed region: the annotation roi when known, else the whole frame.
    pub fn roi(&self) -> Roi {
        self.masks.as_ref().map_or(Roi::full(self.image.width(), self.image.height()), |m| m.roi)
    }
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::from(e).at_path(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let ext = p.extension().and_then(|e| e.to_str()).unwrap_or_default().to_ascii_lowercase();
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            matches!(ext.as_str(), "tif" | "tiff") || (ext == "png" && !stem.ends_with("_cells") && !stem.ends_with("_guttae"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Files of one split: from `manifest.json` when present, else
/// `<root>/<split>/`, else every image directly under `root`.
pub fn split_files(root: &Path, split: &str) -> Result<Vec<(PathBuf, Option<Stratum>)>> {
    let manifest = root.join("manifest.json");
    if manifest.exists() {
        let m = Manifest::load(&manifest)?;
        return Ok(m
            .entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| (root.join(&e.file), e.stratum))
            .collect());
    }
    let sub = root.join(split);
    let dir = if sub.is_dir() { sub } else { root.to_path_buf() };
    Ok(image_files(&dir)?.into_iter().map(|p| (p, None)).collect())
}

pub fn load_split(root: &Path, split: &str, scale: &crate::config::ScaleOverride) -> Result<Vec<Sample>> {
    split_files(root, split)?
        .into_iter()
        .map(|(path, stratum)| {
            let (mut image, masks) = load_any(&path)?;
            image.scale = scale.apply(image.scale)?;
            Ok(Sample { path, image, masks, stratum })
        })
        .collect()
}

/// Training patches of annotated images, cut from the normalized image.
pub fn training_patches<'a>(items: impl IntoIterator<Item = (&'a GrayImage, &'a SegMasks)>, stride: usize) -> Result<Vec<Patch>> {
    let mut out = Vec::new();
    for (image, masks) in items {
        out.extend(image_io::extract_patches(&image_io::normalize(image), masks, stride)?);
    }
    Ok(out)
}

/// Runs `epochs` epochs, calling `on_epoch(epoch, trainer, step_losses)`
/// after each (epochs count from 1).
pub fn run_training(
    trainer: &mut Trainer,
    generator: &mut ContinuousGenerator,
    epochs: usize,
    mut on_epoch: impl FnMut(usize, &Trainer, &[f32]) -> Result<()>,
) -> Result<()> {
    for epoch in 1..=epochs {
        let losses = trainer.train_epoch(generator)?;
        on_epoch(epoch, trainer, &losses)?;
    }
    Ok(())
}

/// Trainer and generator for a set of source patches.
pub fn prepare_training(config: &PipelineConfig, patches: Vec<Patch>) -> Result<(Trainer, ContinuousGenerator)> {
    let model = Model::build(&config.unet)?;
    let mut trainer = Trainer::new(model, config.train.clone())?;
    if config.train.loss == Loss::WeightedCrossEntropy {
        trainer.fit_class_weights(&patches);
    }
    let generator = ContinuousGenerator::new(patches, config.train.augment_target_count, config.train.refresh_prob, config.train.seed)?;
    Ok((trainer, generator))
}

fn checkpoint_dir(config: &PipelineConfig) -> PathBuf {
    config.paths.output_dir.join("checkpoints")
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

pub fn cmd_synth(config: &PipelineConfig) -> Result<Manifest> {
    let s = &config.synth;
    let count = s.split.total();
    let items = if s.stratified {
        synth::generate_stratified(&s.image, count, s.image.seed)?
    } else {
        synth::generate_dataset(&s.image, count, s.image.seed)?
            .into_iter()
            .enumerate()
            .map(|(i, (image, masks))| SynthItem {
                image,
                masks,
                config: synth::SynthConfig { seed: synth::item_seed(s.image.seed, i), ..s.image.clone() },
                stratum: None,
            })
            .collect()
    };
    fs::create_dir_all(&config.paths.data_root)?;
    synth::write_dataset(&config.paths.data_root, &items, s.split, s.image.seed, &s.image)
}

pub fn cmd_train(config: &PipelineConfig) -> Result<()> {
    let samples = load_split(&config.paths.data_root, "train", &config.scale)?;
    let annotated: Vec<(&GrayImage, &SegMasks)> = samples.iter().filter_map(|s| s.masks.as_ref().map(|m| (&s.image, m))).collect();
    if annotated.is_empty() {
        return Err(Error::Empty(format!("no annotated training images under {}", config.paths.data_root.display())));
    }
    let patches = training_patches(annotated, config.train.patch_stride)?;
    if patches.is_empty() {
        return Err(Error::Empty("training images yield no patches".into()));
    }
    let (mut trainer, mut generator) = prepare_training(config, patches)?;
    fs::create_dir_all(&config.paths.output_dir)?;
    create_parent(&config.paths.weights)?;
    let ckpt = checkpoint_dir(config);
    let mut log = std::io::BufWriter::new(fs::File::create(config.paths.output_dir.join("train_log.csv"))?);
    writeln!(log, "epoch,step,loss,wall_ms")?;
    let start = Instant::now();
    let every = config.train.checkpoint_every;
    run_training(&mut trainer, &mut generator, config.train.epochs, |epoch, t, losses| {
        let first_step = t.adam.step - losses.len() as u64;
        for (k, loss) in losses.iter().enumerate() {
            writeln!(log, "{epoch},{},{loss},{}", first_step + k as u64 + 1, start.elapsed().as_millis())?;
        }
        if every > 0 && epoch % every == 0 {
            fs::create_dir_all(&ckpt)?;
            unet::save_weights(ckpt.join(format!("epoch_{epoch:04}.bin")), &t.model, Some(&t.adam))?;
        }
        Ok(())
    })?;
    log.flush()?;
    unet::save_weights(&config.paths.weights, &trainer.model, Some(&trainer.adam))
}

fn require_weights(config: &PipelineConfig) -> Result<Net> {
    let path = &config.paths.weights;
    if !path.exists() {
        return Err(Error::Weights(format!("weights file {} does not exist; run train first", path.display())));
    }
    unet::load_model(path)
}

/// Images to run inference on: the test split when the dataset has one,
/// otherwise every image under the data root.
fn inference_inputs(config: &PipelineConfig) -> Result<Vec<Sample>> {
    let test = load_split(&config.paths.data_root, "test", &config.scale)?;
    if !test.is_empty() {
        return Ok(test);
    }
    image_files(&config.paths.data_root)?
        .into_iter()
        .map(|path| {
            let (mut image, masks) = load_any(&path)?;
            image.scale = config.scale.apply(image.scale)?;
            Ok(Sample { path, image, masks, stratum: None })
        })
        .collect()
}

pub fn cmd_infer(config: &PipelineConfig) -> Result<usize> {
    let model = require_weights(config)?;
    let inputs = inference_inputs(config)?;
    let dir = config.paths.output_dir.join("infer");
    fs::create_dir_all(&dir)?;
    let params = config.postprocess.params();
    for s in &inputs {
        let stem = s.stem();
        let labels = match model.config().head {
            Head::Regression => {
                let map = unet::infer_full(&model, &s.image)?;
                map.save_dump(dir.join(format!("{stem}.sdm")))?;
                watershed_decode_with(&map, &params)
            }
            Head::Classification3 => decode_class_probs(&unet::infer_probs(&model, &s.image)?, params.min_region_px),
        };
        let out = dir.join(format!("{stem}.labels.png"));
        labels.save_png(&out)?;
        image_io::write_sidecar(&out, s.image.scale, Some(s.roi()))?;
    }
    Ok(inputs.len())
}

#[derive(Debug, Serialize)]
struct NamedReport<'a> {
    file: String,
    #[serde(flatten)]
    report: &'a MorphoReport,
}

pub fn cmd_report(config: &PipelineConfig) -> Result<Vec<(String, MorphoReport)>> {
    let dir = config.paths.output_dir.join("infer");
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::from(e).at_path(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_str().is_some_and(|s| s.ends_with(".labels.png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Empty(format!("no label maps in {}; run infer first", dir.display())));
    }
    let mut rows = Vec::new();
    for path in &files {
        let map = LabelMap::load_png(path)?;
        let side = image_io::read_sidecar(path)?;
        let scale = config.scale.apply(side.as_ref().map_or(Ok(Scale::default()), |s| s.scale())?)?;
        let roi = side.and_then(|s| s.roi()).unwrap_or(Roi::full(map.width(), map.height()));
        let report = morphometry::analyze(&map, roi, scale, config.morphometry.hex_neighbors)?;
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().trim_end_matches(".labels.png").to_string();
        rows.push((name, report));
    }
    let mut csv = fs::File::create(config.paths.output_dir.join("reports.csv"))?;
    writeln!(csv, "file,{}", MorphoReport::csv_header())?;
    for (name, r) in &rows {
        writeln!(csv, "{name},{}", r.csv_row())?;
    }
    let named: Vec<NamedReport> = rows.iter().map(|(file, report)| NamedReport { file: file.clone(), report }).collect();
    fs::write(config.paths.output_dir.join("reports.json"), serde_json::to_string_pretty(&named)?)?;
    Ok(rows)
}

/// Sorted `(epoch, path)` of every checkpoint file.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<(usize, PathBuf)> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let stem = p.file_stem()?.to_str()?;
            let epoch = stem.strip_prefix("epoch_")?.parse().ok()?;
            Some((epoch, p))
        })
        .collect();
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub images: usize,
    pub pixel_accuracy_pct: f64,
    pub bland_altman: Vec<(String, BlandAltman)>,
    pub epochs: Vec<EpochMae>,
}

fn reference_reports(samples: &[Sample], convention: HexNeighbors) -> Result<Vec<MorphoReport>> {
    samples
        .iter()
        .map(|s| {
            let masks = s.masks.as_ref().ok_or_else(|| Error::Empty(format!("{} has no reference masks", s.path.display())))?;
            morphometry::analyze(&LabelMap::from_masks(masks)?, masks.roi, s.image.scale, convention)
        })
        .collect()
}

pub fn cmd_eval(config: &PipelineConfig) -> Result<EvalSummary> {
    let model = require_weights(config)?;
    let samples: Vec<Sample> = inference_inputs(config)?.into_iter().filter(|s| s.masks.is_some()).collect();
    if samples.is_empty() {
        return Err(Error::Empty("no annotated test images to evaluate".into()));
    }
    let conv = config.morphometry.hex_neighbors;
    let params = config.postprocess.params();
    let refs = reference_reports(&samples, conv)?;
    let mut preds = Vec::new();
    let mut maps = Vec::new();
    for s in &samples {
        let map = segment(&model, &s.image, &params)?;
        preds.push(morphometry::analyze(&map, s.roi(), s.image.scale, conv)?);
        maps.push(map);
    }
    let dir = config.paths.output_dir.join("eval");
    fs::create_dir_all(&dir)?;

    let accuracy = evaluation::mean_pixel_accuracy(maps.iter().zip(samples.iter().map(|s| s.masks.as_ref().expect("filtered"))))?;
    fs::write(dir.join("accuracy.json"), serde_json::to_string_pretty(&serde_json::json!({ "pixel_accuracy_pct": accuracy, "images": samples.len() }))?)?;

    let getters: [(&str, &str, fn(&MorphoReport) -> Option<f64>); 5] = [
        ("cd", "cells/mm2", |r| Some(r.cd)),
        ("mca", "um2", |r| r.mca),
        ("hex", "%", |r| r.hex_pct),
        ("cv", "%", |r| r.cv_pct),
        ("gar", "%", |r| Some(r.gar_pct)),
    ];
    let mut ba_all = Vec::new();
    for (name, unit, get) in getters {
        let (a, b): (Vec<f64>, Vec<f64>) = preds.iter().zip(&refs).filter_map(|(p, r)| Some((get(p)?, get(r)?))).unzip();
        if a.len() < 2 {
            continue;
        }
        let ba = evaluation::bland_altman_with(&a, &b, config.evaluation.sd)?;
        ba.write_csv(fs::File::create(dir.join(format!("ba_{name}.csv")))?)?;
        fs::write(dir.join(format!("ba_{name}.svg")), ba.svg(&format!("Bland-Altman {}", name.to_uppercase()), unit))?;
        ba_all.push((name.to_string(), ba));
    }

    let strata: Option<Vec<Stratum>> = samples.iter().map(|s| s.stratum).collect();
    if let Some(strata) = strata {
        let rows = evaluation::gar_agreement(&preds, &refs, &strata, config.evaluation.sd)?;
        evaluation::write_gar_csv(&rows, fs::File::create(dir.join("gar.csv"))?)?;
    }

    let checkpoints = list_checkpoints(&checkpoint_dir(config))?;
    let mut epochs = Vec::new();
    if !checkpoints.is_empty() {
        let models = checkpoints.iter().map(|(e, p)| Ok((*e, unet::load_model(p)?))).collect::<Result<Vec<_>>>()?;
        epochs = evaluation::epoch_mae_curves(&models, &refs, |m, i| analyze_image(m, &samples[i].image, samples[i].roi(), &params, conv))?;
        evaluation::write_epochs_csv(&epochs, fs::File::create(dir.join("epochs.csv"))?)?;
        for (stem, svg) in evaluation::epoch_svgs(&[("model", &epochs)]) {
            fs::write(dir.join(format!("{stem}.svg")), svg)?;
        }
    }
    Ok(EvalSummary {
        images: samples.len(),
        pixel_accuracy_pct: accuracy,
        bland_altman: ba_all,
        epochs,
    })
}
