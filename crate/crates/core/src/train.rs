//! Training loop: data preparation, PK epochs, losses, optimizer steps,
//! periodic evaluation and checkpointing.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta, CHECKPOINT_VERSION};
use crate::config::{DatasetSource, Precision, RunConfig, SynthesizerKind};
use crate::cpre::mix_batch;
use crate::data::{generate_synthetic_dataset, load_directory_dataset, Dataset, PkSampler};
use crate::error::{Error, Result};
use crate::eval::{
    compute_cmc_map, extract_embeddings, hairstyle_probe, single_shot_report, ProbeReport, ProbeResult, Protocol,
    ProtocolMode, RetrievalLabels, RetrievalReport,
};
use crate::hsoa::{augment_identity, FileAdapter, HairSynthesizer, ProceduralStub};
use crate::losses::{
    attention_loss, cal_loss, id_loss, total_loss, triplet_loss, AttentionTargets, LossComponents, LossValues,
};
use crate::masks::{FeatureMasks, LabelSchema, RegionMasks, RegionSets};
use crate::model::{ForwardMode, ModelConfig, ReidModel};
use crate::nn::ParamMode;
use crate::optim::Adam;
use crate::sample::{Sample, View};
use crate::seed::SeedStream;

pub fn dtype_of(p: Precision) -> DType {
    match p {
        Precision::F32 => DType::F32,
        Precision::F64 => DType::F64,
    }
}

/// Loads the configured dataset (synthetic or from disk).
pub fn load_dataset(cfg: &RunConfig, schema: &LabelSchema) -> Result<Dataset> {
    match cfg.dataset.source {
        DatasetSource::Synthetic => generate_synthetic_dataset(&cfg.dataset.synthetic, schema),
        DatasetSource::Directory => {
            let path = cfg.dataset.path.as_ref().expect("validated");
            load_directory_dataset(path, schema)
        }
    }
}

/// Identity-disjoint train/test split; augmented samples never enter the test side.
pub fn split(cfg: &RunConfig, ds: &Dataset) -> Result<(Dataset, Dataset)> {
    let (train, test) = ds.split_by_identity(cfg.dataset.train_fraction)?;
    let test = Dataset::new(test.samples.into_iter().filter(|s| s.view != View::HsoaAug).collect());
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config(
            "identity split leaves the train or test side empty".into(),
        ));
    }
    Ok((train, test))
}

pub fn synthesizer(cfg: &RunConfig) -> Box<dyn HairSynthesizer> {
    match cfg.hsoa.synthesizer {
        SynthesizerKind::Procedural => Box::new(ProceduralStub),
        SynthesizerKind::Files => {
            let mut f = FileAdapter::new(cfg.hsoa.heads_dir.clone().expect("validated"));
            if let Some(t) = cfg.hsoa.face_tolerance {
                f = f.with_face_tolerance(t);
            }
            Box::new(f)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentSummary {
    pub sources: usize,
    pub generated: usize,
    pub skipped_no_mask: usize,
    pub skipped_no_hair: usize,
    pub skipped_synthesis: usize,
}

/// HSOA samples for every source in `ds` that has masks, in source order.
pub fn hsoa_samples(
    ds: &Dataset,
    masks: &[Option<RegionMasks>],
    synth: &dyn HairSynthesizer,
    cfg: &RunConfig,
) -> Result<(Vec<Sample>, AugmentSummary)> {
    let mut out = Vec::new();
    let mut summary = AugmentSummary::default();
    for (s, m) in ds.samples.iter().zip(masks) {
        if s.view == View::HsoaAug {
            continue;
        }
        summary.sources += 1;
        let Some(m) = m else {
            summary.skipped_no_mask += 1;
            continue;
        };
        let aug = augment_identity(s, m, synth, &cfg.hsoa.styles)?;
        if aug.empty_hair {
            summary.skipped_no_hair += 1;
            continue;
        }
        summary.skipped_synthesis += aug.skipped.len();
        summary.generated += aug.samples.len();
        out.extend(aug.samples);
    }
    Ok((out, summary))
}

/// Everything training needs, derived once from the configuration.
pub struct Prepared {
    pub config: RunConfig,
    pub schema: LabelSchema,
    pub sets: RegionSets,
    /// Training pool: originals plus augmented samples.
    pub pool: Dataset,
    pub pool_masks: Vec<Option<RegionMasks>>,
    pub pool_features: Vec<Option<FeatureMasks>>,
    pub test: Dataset,
    pub test_masks: Vec<Option<RegionMasks>>,
    pub identity_index: BTreeMap<u32, u32>,
    pub clothes_index: BTreeMap<u32, u32>,
    pub model_config: ModelConfig,
    pub augment: AugmentSummary,
}

impl Prepared {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let schema = LabelSchema::default();
        let ds = load_dataset(config, &schema)?;
        Self::from_dataset(config, ds)
    }

    pub fn from_dataset(config: &RunConfig, ds: Dataset) -> Result<Self> {
        config.validate()?;
        let schema = LabelSchema::default();
        let sets = config.regions.resolve(&schema)?;
        let (train, test) = split(config, &ds)?;
        let first = &train.samples[0];
        let (h, w) = first.dims();
        if let Some(bad) = ds.samples.iter().find(|s| s.dims() != (h, w)) {
            return Err(Error::Data {
                path: PathBuf::from(&bad.id),
                reason: format!("image is {:?}, expected {:?}", bad.dims(), (h, w)),
            });
        }
        let train_masks = train.region_masks(&schema, &sets)?;
        let mut pool = train.samples.clone();
        let mut augment = AugmentSummary::default();
        let has_aug = train.samples.iter().any(|s| s.view == View::HsoaAug);
        if config.hsoa.enabled && !has_aug {
            let synth = synthesizer(config);
            let (extra, summary) = hsoa_samples(&train, &train_masks, synth.as_ref(), config)?;
            pool.extend(extra);
            augment = summary;
        } else if !config.hsoa.enabled && has_aug {
            pool.retain(|s| s.view != View::HsoaAug);
        }
        let pool = Dataset::new(pool);
        let dilation = config.cpre.dilation;
        let pool_masks: Vec<Option<RegionMasks>> = pool
            .region_masks(&schema, &sets)?
            .into_iter()
            .map(|m| {
                m.map(|m| {
                    if dilation > 0 {
                        m.with_cloth_dilation(dilation)
                    } else {
                        m
                    }
                })
            })
            .collect();

        let identity_index: BTreeMap<u32, u32> = pool
            .identities()
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, i as u32))
            .collect();
        let mut clothes: Vec<u32> = pool.samples.iter().map(|s| s.clothes).collect();
        clothes.sort_unstable();
        clothes.dedup();
        let clothes_index: BTreeMap<u32, u32> = clothes.into_iter().enumerate().map(|(i, c)| (c, i as u32)).collect();

        let model_config = ModelConfig {
            backbone: config.model.backbone,
            input_height: h,
            input_width: w,
            id_channels: config.model.id_channels,
            num_identities: identity_index.len(),
            num_clothes_classes: clothes_index.len(),
            rpa_enabled: config.model.rpa_enabled,
            attention_gradient: config.model.attention_gradient,
        };
        model_config.validate()?;
        let (fh, fw) = model_config.feature_dims();
        let pool_features = pool_masks
            .iter()
            .map(|m| m.as_ref().map(|m| m.feature_targets(fh, fw)).transpose())
            .collect::<Result<Vec<_>>>()?;
        let test_masks = test.region_masks(&schema, &sets)?;
        Ok(Self {
            config: config.clone(),
            schema,
            sets,
            pool,
            pool_masks,
            pool_features,
            test,
            test_masks,
            identity_index,
            clothes_index,
            model_config,
            augment,
        })
    }

    /// Per training identity (contiguous index), its contiguous clothes classes.
    pub fn positive_clothes(&self) -> BTreeMap<u32, Vec<u32>> {
        self.pool
            .clothes_per_identity()
            .into_iter()
            .map(|(id, cs)| {
                (
                    self.identity_index[&id],
                    cs.iter().map(|c| self.clothes_index[c]).collect(),
                )
            })
            .collect()
    }
}

/// Both protocol reports and the hairstyle probe for one model state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub standard: RetrievalReport,
    pub cloth_changing: RetrievalReport,
    pub probe: ProbeReport,
}

/// Evaluates on the test side: query camera vs. every other camera.
pub fn evaluate(model: &ReidModel, test: &Dataset, cfg: &RunConfig) -> Result<Evaluation> {
    let all: Vec<&Sample> = test.samples.iter().collect();
    let emb = extract_embeddings(model, &all, cfg.eval.batch_size, cfg.eval.embedding)?;
    let labels: Vec<RetrievalLabels> = all.iter().map(|s| RetrievalLabels::from(*s)).collect();
    let is_query: Vec<bool> = all.iter().map(|s| s.camera == cfg.dataset.query_camera).collect();
    let pick = |want: bool| -> (Vec<Vec<f64>>, Vec<RetrievalLabels>) {
        emb.iter()
            .zip(&labels)
            .zip(&is_query)
            .filter(|(_, &q)| q == want)
            .map(|((e, l), _)| (e.clone(), *l))
            .unzip()
    };
    let (qe, ql) = pick(true);
    let (ge, gl) = pick(false);
    let probe = hairstyle_probe(
        &emb,
        &all.iter().map(|s| s.hairstyle).collect::<Vec<_>>(),
        cfg.eval.probe_seed,
    )?;
    let run = |mode: ProtocolMode| -> Result<RetrievalReport> {
        let protocol = Protocol {
            mode,
            cross_camera_only: cfg.eval.cross_camera_only,
        };
        let mut r = if cfg.eval.single_shot_trials > 0 {
            let seed = SeedStream::new(cfg.seed).named("single-shot");
            single_shot_report(&qe, &ql, &ge, &gl, protocol, cfg.eval.single_shot_trials, seed)?
        } else {
            compute_cmc_map(&qe, &ql, &ge, &gl, protocol)?
        };
        r.probe = Some(ProbeResult {
            target: probe.target.clone(),
            accuracy: probe.accuracy,
        });
        Ok(r)
    };
    Ok(Evaluation {
        standard: run(ProtocolMode::Standard)?,
        cloth_changing: run(ProtocolMode::ClothChanging)?,
        probe,
    })
}

/// Mean attention mass on hair cells and on face-plus-limb cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMass {
    pub hair: f64,
    pub face_limbs: f64,
    pub samples: usize,
}

/// Averages `<A, hair>` and `<A, face + limbs>` over samples with masks, using eval-mode attention.
pub fn attention_mass(model: &ReidModel, samples: &[&Sample], masks: &[Option<RegionMasks>]) -> Result<AttentionMass> {
    let (fh, fw) = model.config().feature_dims();
    let mut hair = 0.0;
    let mut pos = 0.0;
    let mut n = 0usize;
    for (chunk, mchunk) in samples.chunks(128).zip(masks.chunks(128)) {
        let images: Vec<&RgbImage> = chunk.iter().map(|s| &s.image).collect();
        let out = model.forward(&model.images_to_tensor(&images)?, ForwardMode::Eval, false)?;
        let att = out.attention.to_dtype(DType::F64)?.flatten_from(1)?.to_vec2::<f64>()?;
        for (a, m) in att.iter().zip(mchunk) {
            let Some(m) = m else { continue };
            let f = m.feature_targets(fh, fw)?;
            let dot = |g: &[f64]| a.iter().zip(g).map(|(x, y)| x * y).sum::<f64>();
            hair += dot(f.hair.as_slice());
            pos += dot(f.face.as_slice()) + dot(f.limbs.as_slice());
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Evaluation("no sample with masks for the attention audit".into()));
    }
    Ok(AttentionMass {
        hair: hair / n as f64,
        face_limbs: pos / n as f64,
        samples: n,
    })
}

/// Counts of non-cloth pixels seen and altered by erasing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpreAudit {
    pub erased_samples: u64,
    pub non_cloth_pixels: u64,
    pub non_cloth_changed: u64,
}

impl CpreAudit {
    pub fn untouched_fraction(&self) -> f64 {
        if self.non_cloth_pixels == 0 {
            1.0
        } else {
            1.0 - self.non_cloth_changed as f64 / self.non_cloth_pixels as f64
        }
    }
}

/// One line of `logs/loss.jsonl`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub standard_rank1: f64,
    #[serde(rename = "standard_mAP")]
    pub standard_map: f64,
    pub cloth_changing_rank1: f64,
    #[serde(rename = "cloth_changing_mAP")]
    pub cloth_changing_map: f64,
    pub probe_accuracy: f64,
}

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "logs", "reports", "dumps"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn last(&self) -> PathBuf {
        self.root.join("checkpoints/last.safetensors")
    }

    pub fn best(&self) -> PathBuf {
        self.root.join("checkpoints/best.safetensors")
    }

    pub fn loss_log(&self) -> PathBuf {
        self.root.join("logs/loss.jsonl")
    }

    pub fn eval_log(&self) -> PathBuf {
        self.root.join("logs/eval.jsonl")
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Final state of a training run.
pub struct TrainOutcome {
    pub model: ReidModel,
    pub evaluation: Evaluation,
    pub best_cloth_changing_map: f64,
    pub losses: Vec<LossRecord>,
    pub cpre: CpreAudit,
    pub steps: u64,
}

pub struct Trainer<'a> {
    prep: &'a Prepared,
    layout: Layout,
    model: ReidModel,
    adam: Adam,
    sampler: PkSampler,
    positive_clothes: BTreeMap<u32, Vec<u32>>,
    run_seed: SeedStream,
    audit: CpreAudit,
}

impl<'a> Trainer<'a> {
    pub fn new(prep: &'a Prepared, out: &Path) -> Result<Self> {
        let cfg = &prep.config;
        let run_seed = SeedStream::new(cfg.seed);
        let model = ReidModel::new(
            prep.model_config.clone(),
            dtype_of(cfg.precision),
            run_seed.named("init"),
        )?;
        let adam = Adam::new(&cfg.optimizer, model.store().params())?;
        let sampler = PkSampler::new(&prep.pool, cfg.sampler.p, cfg.sampler.k)?;
        Ok(Self {
            prep,
            layout: Layout::new(out)?,
            model,
            adam,
            sampler,
            positive_clothes: prep.positive_clothes(),
            run_seed,
            audit: CpreAudit::default(),
        })
    }

    pub fn model(&self) -> &ReidModel {
        &self.model
    }

    fn meta(&self, epoch: usize, step: u64, best_map: f64) -> CheckpointMeta {
        CheckpointMeta {
            version: CHECKPOINT_VERSION,
            config_hash: checkpoint::config_hash(self.model.config()),
            model: self.model.config().clone(),
            epoch,
            step,
            adam_t: self.adam.steps(),
            best_map,
        }
    }

    fn record_erasure(&mut self, before: &Sample, after: &Sample, masks: &RegionMasks) {
        if after.view != View::Erased {
            return;
        }
        self.audit.erased_samples += 1;
        for ((x, y, a), b) in before.image.enumerate_pixels().zip(after.image.pixels()) {
            if *masks.cloth.get(y as usize, x as usize) == 0 {
                self.audit.non_cloth_pixels += 1;
                if a != b {
                    self.audit.non_cloth_changed += 1;
                }
            }
        }
    }

    /// One optimizer step on the batch `indices` of the pool.
    pub fn step(&mut self, indices: &[usize], seed: SeedStream, lr: f64) -> Result<LossValues> {
        let prep = self.prep;
        let cfg = &prep.config;
        let raw: Vec<Sample> = indices.iter().map(|&i| prep.pool.samples[i].clone()).collect();
        let batch = if cfg.cpre.enabled {
            let cloth: Vec<Option<&crate::grid::BinaryMask>> = indices
                .iter()
                .map(|&i| prep.pool_masks[i].as_ref().map(|m| &m.cloth))
                .collect();
            let mixed = mix_batch(&raw, &cloth, &cfg.cpre.settings(), seed.named("cpre"))?;
            for ((r, m), &i) in raw.iter().zip(&mixed).zip(indices) {
                if let Some(masks) = &prep.pool_masks[i] {
                    self.record_erasure(r, m, masks);
                }
            }
            mixed
        } else {
            raw
        };
        let images: Vec<&RgbImage> = batch.iter().map(|s| &s.image).collect();
        let x = self.model.images_to_tensor(&images)?;
        let out = self.model.forward(&x, ForwardMode::Train, true)?;
        let ids: Vec<u32> = batch.iter().map(|s| prep.identity_index[&s.identity]).collect();
        let clothes: Vec<u32> = batch.iter().map(|s| prep.clothes_index[&s.clothes]).collect();
        let w = &cfg.loss;

        let l_id = id_loss(&out.id_logits, &ids)?;
        let l_tri = triplet_loss(&out.embedding_pre_bn, &ids, w.triplet_margin)?;
        let l_att = if cfg.model.rpa_enabled {
            let feats: Vec<Option<&FeatureMasks>> = indices.iter().map(|&i| prep.pool_features[i].as_ref()).collect();
            let targets = AttentionTargets::from_masks(
                &feats,
                self.model.config().feature_dims(),
                w.epsilon,
                self.model.dtype(),
            )?;
            attention_loss(&out.attention, &targets, w)?
        } else {
            Tensor::zeros((), self.model.dtype(), &candle_core::Device::Cpu)?
        };
        let head = self
            .model
            .clothes_logits(&out.features.detach(), ForwardMode::Train, false, ParamMode::Live)?;
        let adv = self
            .model
            .clothes_logits(&out.features, ForwardMode::Train, false, ParamMode::Frozen)?;
        let cal = cal_loss(&head, &adv, &clothes, &ids, &self.positive_clothes)?;
        let (total, values) = total_loss(
            &LossComponents {
                id: l_id,
                tri: l_tri,
                att: l_att,
                cal: cal.adversarial,
            },
            w,
        )?;
        let objective = (total + cal.classifier)?;
        let grads = objective.backward()?;
        self.adam.step(self.model.store().params(), &grads, lr)?;
        Ok(values)
    }

    fn steps_per_epoch(&self) -> usize {
        match self.prep.config.schedule.steps_per_epoch {
            0 => self.sampler.batches_per_epoch(),
            n => n,
        }
    }

    /// Batches of one epoch; extra passes are drawn when more steps are configured.
    fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let es = self.run_seed.named("epochs").child(epoch as u64);
        let want = self.steps_per_epoch();
        let mut out = Vec::with_capacity(want);
        let mut pass = 0u64;
        while out.len() < want {
            out.extend(self.sampler.epoch(&mut es.named("sampler").child(pass).rng()));
            pass += 1;
        }
        out.truncate(want);
        out
    }

    /// Runs (or resumes) the configured schedule.
    pub fn run(mut self, resume: bool) -> Result<TrainOutcome> {
        let cfg = self.prep.config.clone();
        let mut start_epoch = 0;
        let mut step: u64 = 0;
        let mut best_map = f64::NEG_INFINITY;
        let mut losses: Vec<LossRecord> = Vec::new();
        if resume && self.layout.last().is_file() {
            let ck = checkpoint::load_checkpoint(&self.layout.last())?;
            checkpoint::restore_model(&self.model, &ck)?;
            self.adam.load_state(ck.meta.adam_t, ck.adam_m, ck.adam_v)?;
            start_epoch = ck.meta.epoch;
            step = ck.meta.step;
            best_map = ck.meta.best_map;
            losses = read_jsonl::<LossRecord>(&self.layout.loss_log())?
                .into_iter()
                .filter(|r| r.step <= step)
                .collect();
            log::info!("resuming after epoch {start_epoch} (step {step})");
        }
        let mut eval_records: Vec<EvalRecord> = if start_epoch > 0 {
            read_jsonl::<EvalRecord>(&self.layout.eval_log())?
                .into_iter()
                .filter(|r| r.epoch <= start_epoch)
                .collect()
        } else {
            Vec::new()
        };
        let mut loss_out =
            BufWriter::new(File::create(self.layout.loss_log()).map_err(|e| Error::io(self.layout.loss_log(), e))?);
        for r in &losses {
            writeln_json(&mut loss_out, r, &self.layout.loss_log())?;
        }
        rewrite_jsonl(&self.layout.eval_log(), &eval_records)?;

        let mut last_eval = None;
        for epoch in start_epoch..cfg.schedule.epochs {
            let lr = cfg.optimizer.lr * cfg.schedule.factor(epoch);
            let es = self.run_seed.named("epochs").child(epoch as u64);
            for (b, batch) in self.epoch_batches(epoch).iter().enumerate() {
                step += 1;
                let values = match self.step(batch, es.child(b as u64), lr) {
                    Ok(v) => v,
                    Err(e) => {
                        loss_out.flush().ok();
                        log::error!("aborting at step {step}: {e}; last checkpoint kept");
                        return Err(e);
                    }
                };
                let rec = LossRecord {
                    step,
                    epoch,
                    lr,
                    losses: values,
                };
                writeln_json(&mut loss_out, &rec, &self.layout.loss_log())?;
                losses.push(rec);
            }
            loss_out.flush().map_err(|e| Error::io(self.layout.loss_log(), e))?;
            let done = epoch + 1;
            if done % cfg.eval.every == 0 || done == cfg.schedule.epochs {
                let ev = evaluate(&self.model, &self.prep.test, &cfg)?;
                log::info!(
                    "epoch {done}: standard R1 {:.3} mAP {:.3} | cloth-changing R1 {:.3} mAP {:.3} | hair probe {:.3}",
                    ev.standard.rank1,
                    ev.standard.map,
                    ev.cloth_changing.rank1,
                    ev.cloth_changing.map,
                    ev.probe.accuracy
                );
                eval_records.push(EvalRecord {
                    epoch: done,
                    standard_rank1: ev.standard.rank1,
                    standard_map: ev.standard.map,
                    cloth_changing_rank1: ev.cloth_changing.rank1,
                    cloth_changing_map: ev.cloth_changing.map,
                    probe_accuracy: ev.probe.accuracy,
                });
                rewrite_jsonl(&self.layout.eval_log(), &eval_records)?;
                if ev.cloth_changing.map > best_map {
                    best_map = ev.cloth_changing.map;
                    checkpoint::save_checkpoint(
                        &self.layout.best(),
                        &self.model,
                        None,
                        &self.meta(done, step, best_map),
                    )?;
                }
                last_eval = Some(ev);
            }
            checkpoint::save_checkpoint(
                &self.layout.last(),
                &self.model,
                Some(&self.adam),
                &self.meta(done, step, best_map),
            )?;
        }
        let evaluation = match last_eval {
            Some(ev) => ev,
            None => evaluate(&self.model, &self.prep.test, &cfg)?,
        };
        write_json(&self.layout.report("train_standard.json"), &evaluation.standard)?;
        write_json(
            &self.layout.report("train_cloth_changing.json"),
            &evaluation.cloth_changing,
        )?;
        write_json(&self.layout.report("train_cpre_audit.json"), &self.audit)?;
        Ok(TrainOutcome {
            model: self.model,
            evaluation,
            best_cloth_changing_map: best_map,
            losses,
            cpre: self.audit,
            steps: step,
        })
    }
}

fn writeln_json<T: Serialize>(out: &mut impl Write, value: &T, path: &Path) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))
}

fn rewrite_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for r in rows {
        writeln_json(&mut out, r, path)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l).map_err(Error::from)
        })
        .collect()
}
