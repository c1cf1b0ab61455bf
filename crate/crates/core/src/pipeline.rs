//! Command implementations shared by the CLI and the tests.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, RgbImage};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, restore_model};
use crate::config::RunConfig;
use crate::data::{write_directory_dataset, Dataset};
use crate::error::{Error, Result};
use crate::eval::{
    extract_embeddings, linear_probe, write_top_k_csv, ProbeReport, Protocol, ProtocolMode, RetrievalLabels,
};
use crate::hsoa::AugmentationRecord;
use crate::masks::{LabelSchema, RegionSets};
use crate::model::{ForwardMode, ReidModel};
use crate::sample::{Sample, View};
use crate::seed::SeedStream;
use crate::train::{
    dtype_of, evaluate, hsoa_samples, load_dataset, synthesizer, write_json, AugmentSummary, Evaluation, Layout,
    Prepared, Trainer,
};

/// Runs `f` on a private single-thread pool in strict mode, as is otherwise.
pub fn with_threads<T: Send>(cfg: &RunConfig, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if !cfg.strict {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
    pool.install(f)
}

/// Writes originals plus HSOA samples as a directory dataset under `<out>/dataset`.
pub fn cmd_augment(cfg: &RunConfig, out: &Path) -> Result<AugmentSummary> {
    let layout = Layout::new(out)?;
    let schema = LabelSchema::default();
    let sets: RegionSets = cfg.regions.resolve(&schema)?;
    let ds = load_dataset(cfg, &schema)?;
    let originals = Dataset::new(ds.samples.into_iter().filter(|s| s.view != View::HsoaAug).collect());
    let masks = originals.region_masks(&schema, &sets)?;
    let synth = synthesizer(cfg);
    let (extra, summary) = hsoa_samples(&originals, &masks, synth.as_ref(), cfg)?;
    let root = out.join("dataset");
    let records: Vec<AugmentationRecord> = extra
        .iter()
        .map(|s| AugmentationRecord::new(s, s.style, &PathBuf::from("images").join(format!("{}.png", s.id))))
        .map(|mut r| {
            // the record names the source, not the augmented sample
            r.source_id = r
                .source_id
                .trim_end_matches(&format!("_{}", r.style.as_str()))
                .to_string();
            r
        })
        .collect();
    let mut all = originals.samples;
    all.extend(extra);
    write_directory_dataset(&Dataset::new(all), &root)?;
    let log_path = out.join("logs/augment.jsonl");
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
    write_json(&layout.report("augment.json"), &summary)?;
    log::info!(
        "augmented {} sources into {} samples ({} without masks, {} without hair)",
        summary.sources,
        summary.generated,
        summary.skipped_no_mask,
        summary.skipped_no_hair
    );
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: usize,
    pub best_cloth_changing_map: f64,
    pub final_evaluation: Evaluation,
    pub augment: AugmentSummary,
    pub cpre_untouched_fraction: f64,
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: bool) -> Result<TrainSummary> {
    let prep = Prepared::new(cfg)?;
    let layout = Layout::new(out)?;
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml_string()?).map_err(|e| Error::io(&cfg_path, e))?;
    let outcome = Trainer::new(&prep, out)?.run(resume)?;
    let summary = TrainSummary {
        steps: outcome.steps,
        epochs: cfg.schedule.epochs,
        best_cloth_changing_map: outcome.best_cloth_changing_map,
        final_evaluation: outcome.evaluation,
        augment: prep.augment.clone(),
        cpre_untouched_fraction: outcome.cpre.untouched_fraction(),
    };
    write_json(&layout.report("train_summary.json"), &summary)?;
    Ok(summary)
}

/// Rebuilds the model the configuration describes and loads `checkpoint` into it.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(ReidModel, Prepared)> {
    let mut plain = cfg.clone();
    plain.hsoa.enabled = false;
    let prep = Prepared::new(&plain)?;
    let model = ReidModel::new(
        prep.model_config.clone(),
        dtype_of(cfg.precision),
        SeedStream::new(cfg.seed),
    )?;
    let ck = load_checkpoint(checkpoint)?;
    restore_model(&model, &ck)?;
    Ok((model, prep))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EvalOptions {
    pub dump_attention: bool,
    pub top_k_csv: bool,
}

/// Grayscale attention map, max-normalized and upsampled to the image size.
pub fn attention_image(attention: &[f64], fh: usize, fw: usize, height: u32, width: u32) -> GrayImage {
    let max = attention.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    GrayImage::from_fn(width, height, |x, y| {
        let fy = (y as usize * fh) / height as usize;
        let fx = (x as usize * fw) / width as usize;
        Luma([(attention[fy * fw + fx] / max * 255.0).round() as u8])
    })
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: &Path, opts: EvalOptions) -> Result<Evaluation> {
    let layout = Layout::new(out)?;
    let (model, prep) = load_model(cfg, checkpoint)?;
    let ev = evaluate(&model, &prep.test, cfg)?;
    write_json(&layout.report("standard.json"), &ev.standard)?;
    write_json(&layout.report("cloth_changing.json"), &ev.cloth_changing)?;
    let queries: Vec<&Sample> = prep
        .test
        .samples
        .iter()
        .filter(|s| s.camera == cfg.dataset.query_camera)
        .collect();
    if opts.dump_attention {
        let dir = out.join("dumps/attention");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (fh, fw) = model.config().feature_dims();
        for chunk in queries.chunks(cfg.eval.batch_size) {
            let images: Vec<&RgbImage> = chunk.iter().map(|s| &s.image).collect();
            let o = model.forward(&model.images_to_tensor(&images)?, ForwardMode::Eval, false)?;
            let att = o
                .attention
                .to_dtype(candle_core::DType::F64)?
                .flatten_from(1)?
                .to_vec2::<f64>()?;
            for (s, a) in chunk.iter().zip(&att) {
                let img = attention_image(a, fh, fw, s.image.height(), s.image.width());
                let path = dir.join(format!("{}.png", s.id));
                img.save(&path).map_err(|e| Error::Image {
                    path: path.clone(),
                    source: e,
                })?;
            }
        }
    }
    if opts.top_k_csv {
        let gallery: Vec<&Sample> = prep
            .test
            .samples
            .iter()
            .filter(|s| s.camera != cfg.dataset.query_camera)
            .collect();
        let qe = extract_embeddings(&model, &queries, cfg.eval.batch_size, cfg.eval.embedding)?;
        let ge = extract_embeddings(&model, &gallery, cfg.eval.batch_size, cfg.eval.embedding)?;
        let ql: Vec<RetrievalLabels> = queries.iter().map(|s| RetrievalLabels::from(*s)).collect();
        let gl: Vec<RetrievalLabels> = gallery.iter().map(|s| RetrievalLabels::from(*s)).collect();
        let qid: Vec<&str> = queries.iter().map(|s| s.id.as_str()).collect();
        let gid: Vec<&str> = gallery.iter().map(|s| s.id.as_str()).collect();
        for mode in [ProtocolMode::Standard, ProtocolMode::ClothChanging] {
            let protocol = Protocol {
                mode,
                cross_camera_only: cfg.eval.cross_camera_only,
            };
            let path = out.join(format!("dumps/top10_{mode}.csv"));
            write_top_k_csv(&path, &qid, &qe, &ql, &gid, &ge, &gl, protocol, 10)?;
        }
    }
    Ok(ev)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeTarget {
    Hairstyle,
    Clothes,
}

impl std::str::FromStr for ProbeTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hairstyle" => Ok(ProbeTarget::Hairstyle),
            "clothes" => Ok(ProbeTarget::Clothes),
            other => Err(Error::Argument(format!(
                "unknown probe target {other:?} (hairstyle|clothes)"
            ))),
        }
    }
}

/// Linear probe on test-side embeddings; `shuffle_labels` gives the null control.
pub fn cmd_probe(
    cfg: &RunConfig,
    checkpoint: &Path,
    out: &Path,
    target: ProbeTarget,
    shuffle_labels: bool,
) -> Result<ProbeReport> {
    let layout = Layout::new(out)?;
    let (model, prep) = load_model(cfg, checkpoint)?;
    let samples: Vec<&Sample> = prep.test.samples.iter().collect();
    let emb = extract_embeddings(&model, &samples, cfg.eval.batch_size, cfg.eval.embedding)?;
    let mut labels: Vec<u32> = samples
        .iter()
        .map(|s| match target {
            ProbeTarget::Hairstyle => s.hairstyle,
            ProbeTarget::Clothes => s.clothes,
        })
        .collect();
    if shuffle_labels {
        labels.shuffle(&mut SeedStream::new(cfg.eval.probe_seed).named("probe-shuffle").rng());
    }
    let mut report = linear_probe(&emb, &labels, cfg.eval.probe_seed)?;
    report.target = match target {
        ProbeTarget::Hairstyle => "hairstyle".into(),
        ProbeTarget::Clothes => "clothes".into(),
    };
    let name = format!(
        "probe_{}{}.json",
        report.target,
        if shuffle_labels { "_shuffled" } else { "" }
    );
    write_json(&layout.report(&name), &report)?;
    Ok(report)
}
