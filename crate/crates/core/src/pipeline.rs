//! End-to-end user flows binding all modules together.
//!
//! Commands mirror the CLI verbs: train each stage, generate
//! (text -> condition -> face), edit (condition-token inpainting plus
//! embedding-optimization editing), build a dataset corpus, and evaluate.
//! Every command is deterministic given the run config and its seeds, and
//! each writes a provenance record sufficient to reproduce its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use faceforge_tensor::ckpt;
use faceforge_tensor::optim::Adam;
use faceforge_tensor::rng::{derive_seed, fnv1a, rng_from_seed};
use faceforge_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::condition::{
    condition_to_seg, rasterize_landmarks, seg_to_condition, ConditionError, ConditionImage,
    JitterParams, LandmarkSet, RenderStyle, SegmentationPalette,
};
use crate::dataset::{
    align_crop, align_template, attribute_stats, captions_from_attributes, filter_records,
    never_occluded, stats_csv, translate, upscale, AttributeVector, DatasetError, FaceRecord,
    FilterItem, FilterRules, GeometricLandmarkStub, GeometricSegmentationStub, LandmarkExtractor,
    Manifest, SegmentationExtractor, TaggedPassthroughTranslator, TemplateCaptionEngine,
    UpscalerRegistry,
};
use crate::diffusion::{
    ControlSample, ControlTrainer, ControlledDiffusion, DiffusionConfig, DiffusionError,
    GuidanceConfig, SampleOptions, SamplerKind, TrainRecipe,
};
use crate::editor::{EditConfig, EditError, EditSession, LayerSelection};
use crate::masked::{
    DecodeOptions, MaskSchedule, MaskedError, MaskedTransformer, MaskedTransformerConfig,
};
use crate::metrics::{
    clip_score, fid, landmark_consistency, render_csv, render_table, seg_consistency,
    ImageFeatureExtractor, MetricError, MetricRow, RandomProjectionExtractor,
};
use crate::pixels::{
    image_to_signed_tensor, image_to_unit_tensor, signed_tensor_to_image, unit_tensor_to_image,
};
use crate::text::{build_task_prompt, EncoderRegistry, Task, TextError};
use crate::vq::{VqConfig, VqError, VqModel};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing checkpoint for stage `{stage}`: {path}")]
    MissingCheckpoint { stage: &'static str, path: PathBuf },
    #[error("invalid condition image: {0}")]
    InvalidCondition(String),
    #[error("edit region covers no tokens")]
    EmptyEditRegion,
    #[error("edit region has {got} cells, token grid has {expected}")]
    EditRegionSize { expected: usize, got: usize },
    #[error("unpaired ids (no generated file): {0:?}")]
    UnpairedIds(Vec<String>),
    #[error("io: {path}: {err}")]
    Io { path: PathBuf, err: String },
    #[error(transparent)]
    Vq(#[from] VqError),
    #[error(transparent)]
    Masked(#[from] MaskedError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Condition(#[from] ConditionError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Ckpt(#[from] ckpt::CkptError),
}

fn io_err(path: &Path, err: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io {
        path: path.to_path_buf(),
        err: err.to_string(),
    }
}

// ---------------------------------------------------------------------------
// run config
// ---------------------------------------------------------------------------

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub vq: VqSection,
    pub muse: MuseSection,
    pub controlnet: ControlNetSection,
    pub edit: EditSectionCfg,
    pub data: DataSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqSection {
    pub config: VqConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MuseSection {
    pub config: MaskedTransformerConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub decode_steps: usize,
    pub temperature: f64,
    pub text_backend: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlNetSection {
    pub config: DiffusionConfig,
    pub recipe: TrainRecipe,
    pub guidance: GuidanceConfig,
    /// Optimizer updates to run (each consumes `recipe.grad_accum`
    /// micro-batches).
    pub steps: u64,
    pub sample_steps: usize,
    pub sampler: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditSectionCfg {
    pub embed_steps: usize,
    pub embed_lr: f64,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    /// `upblocks` or `last:<k>`.
    pub layers: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub corpus_root: String,
    pub manifest: String,
    /// Working resolution for faces and conditions.
    pub image_size: usize,
    pub align_size: usize,
    pub upscale_factor: usize,
    pub upscale_backend: String,
    /// Languages per record, source language first.
    pub languages: Vec<String>,
    pub captions_per_record: usize,
    pub blur_threshold: f64,
    pub pose_ratio_threshold: f64,
    pub landmark_radius: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub feature_dim: usize,
    pub feature_seed: u64,
    pub text_backend: String,
    pub seed: u64,
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig =
            serde_json::from_str(json).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_json(&text)
    }

    /// Fail-fast cross-section consistency checks.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |msg: String| Err(PipelineError::Config(msg));
        if self.format_version != CONFIG_FORMAT_VERSION {
            return fail(format!(
                "format_version {} unsupported (want {CONFIG_FORMAT_VERSION})",
                self.format_version
            ));
        }
        self.vq.config.validate().map_err(PipelineError::Vq)?;
        if self.vq.config.image_size != self.data.image_size {
            return fail("vq image_size must equal data image_size".into());
        }
        let grid = self.vq.config.grid_size();
        let m = &self.muse.config;
        if m.grid_height != grid || m.grid_width != grid {
            return fail(format!(
                "muse grid {}x{} must match vq grid {grid}x{grid}",
                m.grid_height, m.grid_width
            ));
        }
        if m.codebook_size != self.vq.config.codebook_size {
            return fail("muse codebook_size must match vq codebook_size".into());
        }
        if self.controlnet.config.unet.image_size != self.data.image_size {
            return fail("controlnet image_size must equal data image_size".into());
        }
        if self.data.align_size * self.data.upscale_factor != self.data.image_size {
            return fail("align_size * upscale_factor must equal image_size".into());
        }
        if self.data.languages.is_empty() {
            return fail("languages must not be empty".into());
        }
        if self.vq.batch_size == 0 || self.muse.batch_size == 0 {
            return fail("batch sizes must be positive".into());
        }
        if self.vq.lr <= 0.0 || self.muse.lr <= 0.0 {
            return fail("learning rates must be positive".into());
        }
        if self.muse.decode_steps == 0 {
            return fail("decode_steps must be positive".into());
        }
        if self.controlnet.sample_steps == 0
            || self.controlnet.sample_steps > self.controlnet.config.schedule.timesteps
        {
            return fail("sample_steps must be in 1..=schedule timesteps".into());
        }
        self.controlnet
            .recipe
            .validate()
            .map_err(PipelineError::Diffusion)?;
        self.controlnet
            .guidance
            .validate()
            .map_err(PipelineError::Diffusion)?;
        parse_layers(&self.edit.layers)?;
        parse_sampler(&self.controlnet.sampler)?;
        Ok(())
    }

    /// Stable digest of the canonical JSON form, for provenance records.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a(json.as_bytes()))
    }

    /// A complete minutes-scale configuration.
    pub fn toy(root: &Path) -> Self {
        RunConfig {
            format_version: CONFIG_FORMAT_VERSION,
            vq: VqSection {
                config: VqConfig {
                    image_size: 16,
                    downsample_factor: 4,
                    codebook_size: 16,
                    embed_dim: 8,
                    channels: vec![8, 12],
                    commitment_weight: 0.25,
                    seed: 10,
                },
                steps: 30,
                batch_size: 4,
                lr: 2e-3,
                seed: 11,
            },
            muse: MuseSection {
                config: MaskedTransformerConfig {
                    grid_height: 4,
                    grid_width: 4,
                    codebook_size: 16,
                    layers: 1,
                    heads: 2,
                    model_dim: 32,
                    text_dim: 16,
                    seed: 20,
                },
                steps: 30,
                batch_size: 4,
                lr: 2e-3,
                decode_steps: 6,
                temperature: 1.0,
                text_backend: "stub".into(),
                seed: 21,
            },
            controlnet: ControlNetSection {
                config: DiffusionConfig {
                    unet: crate::diffusion::UNetConfig {
                        image_size: 16,
                        base_channels: 4,
                        mid_channels: 8,
                        time_dim: 8,
                        text_dim: 16,
                        heads: 2,
                        norm_groups: 2,
                    },
                    schedule: crate::diffusion::ScheduleConfig {
                        timesteps: 50,
                        ..Default::default()
                    },
                    seed: 30,
                },
                recipe: TrainRecipe {
                    epochs: 1,
                    batch_size: 2,
                    grad_accum: 2,
                    lr: 1e-3,
                },
                guidance: GuidanceConfig::default(),
                steps: 10,
                sample_steps: 8,
                sampler: "ddim".into(),
                seed: 31,
            },
            edit: EditSectionCfg {
                embed_steps: 3,
                embed_lr: 1e-2,
                finetune_steps: 3,
                finetune_lr: 1e-3,
                layers: "upblocks".into(),
                seed: 40,
            },
            data: DataSection {
                corpus_root: root.join("corpus").to_string_lossy().into_owned(),
                manifest: "manifest.jsonl".into(),
                image_size: 16,
                align_size: 8,
                upscale_factor: 2,
                upscale_backend: "bicubic".into(),
                languages: vec![
                    "en".into(),
                    "fr".into(),
                    "de".into(),
                    "es".into(),
                    "it".into(),
                ],
                captions_per_record: 3,
                blur_threshold: 1e-9,
                pose_ratio_threshold: 0.35,
                landmark_radius: 1,
                seed: 50,
            },
            eval: EvalSection {
                feature_dim: 8,
                feature_seed: 60,
                text_backend: "stub".into(),
                seed: 61,
            },
        }
    }
}

fn parse_layers(s: &str) -> Result<LayerSelection, PipelineError> {
    if s == "upblocks" {
        return Ok(LayerSelection::AllUpBlocks);
    }
    if let Some(k) = s.strip_prefix("last:") {
        let k: usize = k
            .parse()
            .map_err(|_| PipelineError::Config(format!("bad layer selection `{s}`")))?;
        return Ok(LayerSelection::LastK(k));
    }
    Err(PipelineError::Config(format!(
        "layer selection must be `upblocks` or `last:<k>`, got `{s}`"
    )))
}

fn parse_sampler(s: &str) -> Result<SamplerKind, PipelineError> {
    match s {
        "ddim" => Ok(SamplerKind::Ddim),
        "ddpm" => Ok(SamplerKind::Ddpm),
        other => Err(PipelineError::Config(format!(
            "sampler must be ddim or ddpm, got `{other}`"
        ))),
    }
}

// ---------------------------------------------------------------------------
// modalities, tasks and checkpoint layout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Mask,
    Landmarks,
}

impl Modality {
    pub fn task(&self) -> Task {
        match self {
            Modality::Mask => Task::Segmentation,
            Modality::Landmarks => Task::Landmarks,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Mask => "mask",
            Modality::Landmarks => "landmarks",
        }
    }

    pub fn parse(s: &str) -> Result<Self, PipelineError> {
        match s {
            "mask" => Ok(Modality::Mask),
            "landmarks" => Ok(Modality::Landmarks),
            other => Err(PipelineError::Config(format!(
                "modality must be mask or landmarks, got `{other}`"
            ))),
        }
    }
}

/// Image kinds the tokenizer is fine-tuned for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VqKind {
    Face,
    Mask,
    Landmarks,
}

impl VqKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            VqKind::Face => "face",
            VqKind::Mask => "mask",
            VqKind::Landmarks => "landmarks",
        }
    }

    pub fn parse(s: &str) -> Result<Self, PipelineError> {
        match s {
            "face" => Ok(VqKind::Face),
            "mask" => Ok(VqKind::Mask),
            "landmarks" => Ok(VqKind::Landmarks),
            other => Err(PipelineError::Config(format!(
                "vq kind must be face, mask or landmarks, got `{other}`"
            ))),
        }
    }
}

/// Generation tasks for the masked transformer trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MuseTask {
    Base,
    Segmentation,
    Landmarks,
}

impl MuseTask {
    pub fn as_str(&self) -> &'static str {
        match self {
            MuseTask::Base => "base",
            MuseTask::Segmentation => "segmentation",
            MuseTask::Landmarks => "landmarks",
        }
    }

    pub fn parse(s: &str) -> Result<Self, PipelineError> {
        match s {
            "base" => Ok(MuseTask::Base),
            "segmentation" => Ok(MuseTask::Segmentation),
            "landmarks" => Ok(MuseTask::Landmarks),
            other => Err(PipelineError::Config(format!(
                "muse task must be base, segmentation or landmarks, got `{other}`"
            ))),
        }
    }
}

pub fn vq_ckpt_path(dir: &Path, kind: VqKind) -> PathBuf {
    dir.join(format!("vq-{}.ckpt", kind.as_str()))
}

pub fn muse_ckpt_path(dir: &Path, task: MuseTask) -> PathBuf {
    dir.join(format!("muse-{}.ckpt", task.as_str()))
}

pub fn controlnet_ckpt_path(dir: &Path, modality: Modality) -> PathBuf {
    dir.join(format!("controlnet-{}.ckpt", modality.as_str()))
}

fn require_ckpt(path: PathBuf, stage: &'static str) -> Result<PathBuf, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::MissingCheckpoint { stage, path });
    }
    Ok(path)
}

// ---------------------------------------------------------------------------
// provenance
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config_digest: String,
    pub seeds: BTreeMap<String, u64>,
    pub checkpoints: BTreeMap<String, String>,
    pub stages: Vec<serde_json::Value>,
    pub outputs: Vec<String>,
}

impl Provenance {
    fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            config_digest: cfg.digest(),
            seeds: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
            stages: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn record_ckpt(&mut self, label: &str, path: &Path) -> Result<(), PipelineError> {
        self.checkpoints
            .insert(label.to_string(), ckpt::file_hash(path)?);
        Ok(())
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf, PipelineError> {
        let path = out_dir.join("provenance.json");
        let json = serde_json::to_string_pretty(self).expect("provenance serializes");
        std::fs::write(&path, json).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}

// ---------------------------------------------------------------------------
// corpus loading helpers
// ---------------------------------------------------------------------------

struct Corpus {
    root: PathBuf,
    manifest: Manifest,
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus, PipelineError> {
    let root = PathBuf::from(&cfg.data.corpus_root);
    let path = root.join(&cfg.data.manifest);
    if !path.exists() {
        return Err(PipelineError::Io {
            path,
            err: "manifest not found (run build-dataset first)".into(),
        });
    }
    let manifest = Manifest::read(&path)?;
    if manifest.records.is_empty() {
        return Err(PipelineError::Dataset(DatasetError::EmptyManifest));
    }
    for rec in &manifest.records {
        rec.validate_refs(&root)?;
    }
    Ok(Corpus { root, manifest })
}

impl Corpus {
    fn load_image(&self, rel: &str) -> Result<ConditionImage, PipelineError> {
        Ok(ConditionImage::load_png(&self.root.join(rel))?)
    }

    fn load_landmarks(&self, rel: &str) -> Result<LandmarkSet, PipelineError> {
        let path = self.root.join(rel);
        let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        Ok(LandmarkSet::from_json(&text)?)
    }

    /// The rendered condition image for one record under a modality.
    fn condition_image(
        &self,
        rec: &FaceRecord,
        modality: Modality,
        size: usize,
        radius: usize,
    ) -> Result<ConditionImage, PipelineError> {
        match modality {
            Modality::Mask => self.load_image(&rec.seg),
            Modality::Landmarks => {
                let lms = self.load_landmarks(&rec.landmarks)?;
                Ok(rasterize_landmarks(&lms, size, &RenderStyle { radius })?)
            }
        }
    }
}

fn encoder<'r>(
    registry: &'r EncoderRegistry,
    id: &str,
) -> Result<&'r std::sync::Arc<dyn crate::text::TextEncoder>, PipelineError> {
    Ok(registry.get(id)?)
}

/// The default backend registry: the deterministic stub encoder at the
/// width the config asks for.
pub fn default_registry(cfg: &RunConfig) -> EncoderRegistry {
    EncoderRegistry::with_stub(cfg.muse.config.text_dim)
}

// ---------------------------------------------------------------------------
// cmd_train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    Vq(VqKind),
    Muse(MuseTask),
    ControlNet(Modality),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub hash: String,
    pub steps_run: u64,
    pub final_step: u64,
    pub final_loss: Option<f64>,
}

/// Train (or resume) one stage and write its checkpoint under `ckpt_dir`.
pub fn cmd_train(
    cfg: &RunConfig,
    stage: TrainStage,
    ckpt_dir: &Path,
    from: Option<&Path>,
    registry: &EncoderRegistry,
) -> Result<TrainOutcome, PipelineError> {
    cfg.validate()?;
    let corpus = load_corpus(cfg)?;
    std::fs::create_dir_all(ckpt_dir).map_err(|e| io_err(ckpt_dir, e))?;
    let (outcome, stage_name, seed) = match stage {
        TrainStage::Vq(kind) => (
            train_vq(cfg, &corpus, kind, ckpt_dir)?,
            format!("train-vq-{}", kind.as_str()),
            cfg.vq.seed,
        ),
        TrainStage::Muse(task) => (
            train_muse(cfg, &corpus, task, ckpt_dir, from, registry)?,
            format!("train-muse-{}", task.as_str()),
            cfg.muse.seed,
        ),
        TrainStage::ControlNet(modality) => (
            train_controlnet(cfg, &corpus, modality, ckpt_dir, registry)?,
            format!("train-controlnet-{}", modality.as_str()),
            cfg.controlnet.seed,
        ),
    };
    let mut prov = Provenance::new(&stage_name, cfg);
    prov.seeds.insert("section".into(), seed);
    prov.checkpoints.insert("final".into(), outcome.hash.clone());
    prov.stages.push(serde_json::json!({
        "stage": stage_name,
        "steps_run": outcome.steps_run,
        "final_step": outcome.final_step,
        "from": from.map(|p| p.to_string_lossy().into_owned()),
    }));
    prov.outputs = vec![outcome.checkpoint.to_string_lossy().into_owned()];
    let prov_path = ckpt_dir.join(format!("provenance-{stage_name}.json"));
    let json = serde_json::to_string_pretty(&prov).expect("provenance serializes");
    std::fs::write(&prov_path, json).map_err(|e| io_err(&prov_path, e))?;
    Ok(outcome)
}

fn vq_training_images(
    cfg: &RunConfig,
    corpus: &Corpus,
    kind: VqKind,
) -> Result<Vec<Tensor>, PipelineError> {
    let size = cfg.data.image_size;
    let radius = cfg.data.landmark_radius;
    let mut images = Vec::with_capacity(corpus.manifest.records.len());
    for rec in &corpus.manifest.records {
        let img = match kind {
            VqKind::Face => corpus.load_image(&rec.image)?,
            VqKind::Mask => corpus.load_image(&rec.seg)?,
            VqKind::Landmarks => {
                corpus.condition_image(rec, Modality::Landmarks, size, radius)?
            }
        };
        images.push(image_to_unit_tensor(&img));
    }
    Ok(images)
}

fn train_vq(
    cfg: &RunConfig,
    corpus: &Corpus,
    kind: VqKind,
    ckpt_dir: &Path,
) -> Result<TrainOutcome, PipelineError> {
    let path = vq_ckpt_path(ckpt_dir, kind);
    let mut model = if path.exists() {
        VqModel::load(&path)?
    } else {
        VqModel::new(cfg.vq.config.clone())?
    };
    let target = cfg.vq.steps;
    let images = vq_training_images(cfg, corpus, kind)?;
    let mut opt = Adam::new(cfg.vq.lr);
    let mut steps_run = 0;
    let mut final_loss = None;
    while model.step < target {
        let batch = pick_batch(&images, cfg.vq.batch_size, cfg.vq.seed, model.step);
        let losses = model.train_step(&batch, &mut opt)?;
        final_loss = Some(losses.total);
        steps_run += 1;
    }
    if steps_run > 0 || !path.exists() {
        model.save(&path)?;
    }
    Ok(TrainOutcome {
        hash: ckpt::file_hash(&path)?,
        checkpoint: path,
        steps_run,
        final_step: model.step,
        final_loss,
    })
}

/// Deterministic batch: a seeded shuffle per epoch, sliced by step.
fn pick_batch<T: Clone>(items: &[T], batch_size: usize, seed: u64, step: u64) -> Vec<T> {
    let n = items.len();
    let per_epoch = n.div_ceil(batch_size) as u64;
    let epoch = step / per_epoch;
    let slot = (step % per_epoch) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(derive_seed(seed, &format!("epoch{epoch}")));
    order.shuffle(&mut rng);
    order
        .into_iter()
        .cycle()
        .skip(slot * batch_size)
        .take(batch_size)
        .map(|i| items[i].clone())
        .collect()
}

fn muse_pairs_with(
    cfg: &RunConfig,
    corpus: &Corpus,
    task: MuseTask,
    ckpt_dir: &Path,
    registry: &EncoderRegistry,
) -> Result<Vec<(crate::vq::TokenGrid, crate::text::TextEmbedding)>, PipelineError> {
    let enc = encoder(registry, &cfg.muse.text_backend)?;
    let modalities: Vec<(Modality, Task)> = match task {
        MuseTask::Base => vec![
            (Modality::Mask, Task::Segmentation),
            (Modality::Landmarks, Task::Landmarks),
        ],
        MuseTask::Segmentation => vec![(Modality::Mask, Task::Segmentation)],
        MuseTask::Landmarks => vec![(Modality::Landmarks, Task::Landmarks)],
    };
    let mut pairs = Vec::new();
    for (modality, prompt_task) in modalities {
        let kind = match modality {
            Modality::Mask => VqKind::Mask,
            Modality::Landmarks => VqKind::Landmarks,
        };
        let vq = VqModel::load(&require_ckpt(vq_ckpt_path(ckpt_dir, kind), "vq")?)?;
        for rec in &corpus.manifest.records {
            let img = corpus.condition_image(
                rec,
                modality,
                cfg.data.image_size,
                cfg.data.landmark_radius,
            )?;
            let grid = vq.tokenize(&image_to_unit_tensor(&img))?;
            for (lang, caps) in &rec.captions {
                let prompt = build_task_prompt(prompt_task, &caps[0])?;
                let mut emb = enc.encode(&prompt)?;
                emb.lang_hint = Some(lang.clone());
                pairs.push((grid.clone(), emb));
            }
        }
    }
    Ok(pairs)
}

fn train_muse(
    cfg: &RunConfig,
    corpus: &Corpus,
    task: MuseTask,
    ckpt_dir: &Path,
    from: Option<&Path>,
    registry: &EncoderRegistry,
) -> Result<TrainOutcome, PipelineError> {
    let path = muse_ckpt_path(ckpt_dir, task);
    let mut model = if path.exists() {
        MaskedTransformer::load(&path)?
    } else if let Some(base) = from {
        // branch a specialist from an existing (base) checkpoint
        let mut m = MaskedTransformer::load(&require_ckpt(base.to_path_buf(), "muse-base")?)?;
        m.step = 0;
        m
    } else {
        MaskedTransformer::new(cfg.muse.config.clone())?
    };
    let pairs = muse_pairs_with(cfg, corpus, task, ckpt_dir, registry)?;
    let mut opt = Adam::new(cfg.muse.lr);
    let target = cfg.muse.steps;
    let mut steps_run = 0;
    let mut final_loss = None;
    while model.step < target {
        let batch = pick_batch(&pairs, cfg.muse.batch_size, cfg.muse.seed, model.step);
        let seed = derive_seed(cfg.muse.seed, &format!("step{}", model.step));
        let loss = model.train_step(&batch, seed, None, &mut opt)?;
        final_loss = Some(loss);
        steps_run += 1;
    }
    if steps_run > 0 || !path.exists() {
        model.save(&path)?;
    }
    Ok(TrainOutcome {
        hash: ckpt::file_hash(&path)?,
        checkpoint: path,
        steps_run,
        final_step: model.step,
        final_loss,
    })
}

fn control_samples(
    cfg: &RunConfig,
    corpus: &Corpus,
    modality: Modality,
) -> Result<Vec<ControlSample>, PipelineError> {
    let palette = SegmentationPalette::default_face();
    let jitter = JitterParams::training_default(&palette);
    let mut samples = Vec::new();
    for (ri, rec) in corpus.manifest.records.iter().enumerate() {
        let face = corpus.load_image(&rec.image)?;
        let cond = corpus.condition_image(
            rec,
            modality,
            cfg.data.image_size,
            cfg.data.landmark_radius,
        )?;
        for (lang, caps) in &rec.captions {
            let seed = derive_seed(
                cfg.controlnet.seed,
                &format!("aug-{ri}-{lang}"),
            );
            let mut rng = rng_from_seed(seed);
            // paired horizontal flip
            let (face_img, cond_img) = if rng.gen_bool(0.5) {
                (face.mirrored_horizontal(), cond.mirrored_horizontal())
            } else {
                (face.clone(), cond.clone())
            };
            // color/brightness/contrast jitter on the condition only
            let cond_img = jitter_condition_for_training(&cond_img, &jitter, rng.gen())?;
            samples.push(ControlSample {
                image: image_to_signed_tensor(&face_img),
                condition: image_to_signed_tensor(&cond_img),
                caption: caps[0].clone(),
            });
        }
    }
    Ok(samples)
}

fn jitter_condition_for_training(
    img: &ConditionImage,
    params: &JitterParams,
    seed: u64,
) -> Result<ConditionImage, PipelineError> {
    Ok(crate::condition::jitter_condition(img, params, seed)?)
}

fn train_controlnet(
    cfg: &RunConfig,
    corpus: &Corpus,
    modality: Modality,
    ckpt_dir: &Path,
    registry: &EncoderRegistry,
) -> Result<TrainOutcome, PipelineError> {
    let path = controlnet_ckpt_path(ckpt_dir, modality);
    let mut model = if path.exists() {
        ControlledDiffusion::load(&path)?
    } else {
        ControlledDiffusion::new(cfg.controlnet.config.clone())?
    };
    let enc = encoder(registry, &cfg.muse.text_backend)?;
    let samples = control_samples(cfg, corpus, modality)?;
    let mut trainer = ControlTrainer::new(cfg.controlnet.recipe.clone(), cfg.controlnet.guidance.clone())?;
    let target = cfg.controlnet.steps;
    let start_step = model.step;
    let mut final_loss = None;
    let mut micro = 0u64;
    while model.step < target {
        let batch = pick_batch(
            &samples_as_refs(&samples),
            cfg.controlnet.recipe.batch_size,
            cfg.controlnet.seed,
            micro,
        );
        let batch: Vec<ControlSample> = batch
            .into_iter()
            .map(|s| ControlSample {
                image: s.image.clone(),
                condition: s.condition.clone(),
                caption: s.caption.clone(),
            })
            .collect();
        let seed = derive_seed(cfg.controlnet.seed, &format!("micro{micro}"));
        let loss = trainer.micro_step(&mut model, &batch, enc.as_ref(), seed)?;
        final_loss = Some(loss);
        micro += 1;
    }
    let steps_run = model.step - start_step;
    if steps_run > 0 || !path.exists() {
        model.save(&path)?;
    }
    Ok(TrainOutcome {
        hash: ckpt::file_hash(&path)?,
        checkpoint: path,
        steps_run,
        final_step: model.step,
        final_loss,
    })
}

fn samples_as_refs(samples: &[ControlSample]) -> Vec<&ControlSample> {
    samples.iter().collect()
}

// ---------------------------------------------------------------------------
// cmd_generate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub prompt: String,
    pub modality: Modality,
    /// User-supplied condition image path; skips stage 1.
    pub condition: Option<PathBuf>,
    pub seed: u64,
    /// Overrides for the config's sampler settings, if given.
    pub cfg_scale: Option<f64>,
    pub sample_steps: Option<usize>,
    pub decode_steps: Option<usize>,
    pub temperature: Option<f64>,
    pub sampler: Option<String>,
}

#[derive(Debug)]
pub struct GenerateOutput {
    pub condition: ConditionImage,
    pub face: ConditionImage,
    pub provenance: Provenance,
}

/// Text -> condition -> face. Stage 1 (masked transformer + tokenizer
/// decode + palette snap) is skipped when the user supplies a condition.
pub fn cmd_generate(
    cfg: &RunConfig,
    ckpt_dir: &Path,
    req: &GenerationRequest,
    out_dir: &Path,
    registry: &EncoderRegistry,
) -> Result<GenerateOutput, PipelineError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut prov = Provenance::new("generate", cfg);
    prov.seeds.insert("request".into(), req.seed);
    let enc = encoder(registry, &cfg.muse.text_backend)?;
    let size = cfg.data.image_size;
    let palette = SegmentationPalette::default_face();

    let condition_img = match &req.condition {
        Some(path) => {
            let img = ConditionImage::load_png(path)?;
            if img.height != size || img.width != size {
                return Err(PipelineError::InvalidCondition(format!(
                    "expected {size}x{size}, got {}x{}",
                    img.height, img.width
                )));
            }
            prov.stages.push(serde_json::json!({
                "stage": "condition",
                "source": "user-condition",
                "path": path.to_string_lossy(),
            }));
            img
        }
        None => {
            let (vq_kind, muse_task) = match req.modality {
                Modality::Mask => (VqKind::Mask, MuseTask::Segmentation),
                Modality::Landmarks => (VqKind::Landmarks, MuseTask::Landmarks),
            };
            let vq_path = require_ckpt(vq_ckpt_path(ckpt_dir, vq_kind), "vq")?;
            let muse_path = require_ckpt(muse_ckpt_path(ckpt_dir, muse_task), "muse")?;
            let vq = VqModel::load(&vq_path)?;
            let muse = MaskedTransformer::load(&muse_path)?;
            prov.record_ckpt("vq", &vq_path)?;
            prov.record_ckpt("muse", &muse_path)?;
            let prompt = build_task_prompt(req.modality.task(), &req.prompt)?;
            let emb = enc.encode(&prompt)?;
            let opts = DecodeOptions {
                schedule: MaskSchedule::cosine(req.decode_steps.unwrap_or(cfg.muse.decode_steps))?,
                temperature: req.temperature.unwrap_or(cfg.muse.temperature),
                seed: derive_seed(req.seed, "muse"),
            };
            let grid = muse.generate(&emb, &opts)?;
            let decoded = vq.decode_tokens(&grid)?;
            let raw = unit_tensor_to_image(&decoded);
            let img = match req.modality {
                // snap generated mask colors onto the palette
                Modality::Mask => {
                    let seg = condition_to_seg(&raw, &palette);
                    seg_to_condition(&seg, &palette)?
                }
                Modality::Landmarks => raw,
            };
            prov.stages.push(serde_json::json!({
                "stage": "condition",
                "source": "generated",
                "task_prompt": prompt,
                "decode_steps": opts.schedule.steps,
                "temperature": opts.temperature,
                "snapped": matches!(req.modality, Modality::Mask),
            }));
            img
        }
    };

    let cn_path = require_ckpt(
        controlnet_ckpt_path(ckpt_dir, req.modality),
        "controlnet",
    )?;
    let cn = ControlledDiffusion::load(&cn_path)?;
    prov.record_ckpt("controlnet", &cn_path)?;
    let text_emb = enc.encode(&req.prompt)?;
    let uncond = enc.encode_uncond();
    let sampler_name = req.sampler.as_deref().unwrap_or(&cfg.controlnet.sampler);
    let opts = SampleOptions {
        steps: req.sample_steps.unwrap_or(cfg.controlnet.sample_steps),
        cfg_scale: req.cfg_scale.unwrap_or(cfg.controlnet.guidance.cfg_scale),
        seed: derive_seed(req.seed, "sample"),
        sampler: parse_sampler(sampler_name)?,
    };
    let cond_tensor = image_to_signed_tensor(&condition_img);
    let face_tensor = cn.sample(&text_emb, &uncond, Some(&cond_tensor), &opts)?;
    let face = signed_tensor_to_image(&face_tensor);
    prov.stages.push(serde_json::json!({
        "stage": "face",
        "sampler": sampler_name,
        "steps": opts.steps,
        "cfg_scale": opts.cfg_scale,
    }));

    let cond_path = out_dir.join("condition.png");
    let face_path = out_dir.join("face.png");
    condition_img.save_png(&cond_path)?;
    face.save_png(&face_path)?;
    prov.outputs = vec![
        cond_path.to_string_lossy().into_owned(),
        face_path.to_string_lossy().into_owned(),
    ];
    prov.write(out_dir)?;
    Ok(GenerateOutput {
        condition: condition_img,
        face,
        provenance: prov,
    })
}

// ---------------------------------------------------------------------------
// cmd_edit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EditRequest {
    pub image: PathBuf,
    pub condition: PathBuf,
    pub modality: Modality,
    pub prompt: String,
    pub alpha: f64,
    /// Boolean edit region at token resolution, row-major.
    pub edit_region: Vec<bool>,
    pub seed: u64,
}

#[derive(Debug)]
pub struct EditOutput {
    pub condition_edited: ConditionImage,
    pub image_edited: ConditionImage,
    pub provenance: Provenance,
}

/// Edit flow: inpaint the condition tokens under the edit region, then run
/// the embedding-optimization edit against the control branch.
pub fn cmd_edit(
    cfg: &RunConfig,
    ckpt_dir: &Path,
    req: &EditRequest,
    out_dir: &Path,
    registry: &EncoderRegistry,
) -> Result<EditOutput, PipelineError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut prov = Provenance::new("edit", cfg);
    prov.seeds.insert("request".into(), req.seed);
    let enc = encoder(registry, &cfg.muse.text_backend)?;
    let size = cfg.data.image_size;
    let palette = SegmentationPalette::default_face();

    let image = ConditionImage::load_png(&req.image)?;
    let condition = ConditionImage::load_png(&req.condition)?;
    for (what, img) in [("image", &image), ("condition", &condition)] {
        if img.height != size || img.width != size {
            return Err(PipelineError::InvalidCondition(format!(
                "{what}: expected {size}x{size}, got {}x{}",
                img.height, img.width
            )));
        }
    }

    // stage 1: token-space condition edit
    let (vq_kind, muse_task) = match req.modality {
        Modality::Mask => (VqKind::Mask, MuseTask::Segmentation),
        Modality::Landmarks => (VqKind::Landmarks, MuseTask::Landmarks),
    };
    let vq_path = require_ckpt(vq_ckpt_path(ckpt_dir, vq_kind), "vq")?;
    let muse_path = require_ckpt(muse_ckpt_path(ckpt_dir, muse_task), "muse")?;
    let vq = VqModel::load(&vq_path)?;
    let muse = MaskedTransformer::load(&muse_path)?;
    prov.record_ckpt("vq", &vq_path)?;
    prov.record_ckpt("muse", &muse_path)?;
    let grid = vq.tokenize(&image_to_unit_tensor(&condition))?;
    if req.edit_region.len() != grid.len() {
        return Err(PipelineError::EditRegionSize {
            expected: grid.len(),
            got: req.edit_region.len(),
        });
    }
    if !req.edit_region.iter().any(|&b| b) {
        return Err(PipelineError::EmptyEditRegion);
    }
    let keep: Vec<bool> = req.edit_region.iter().map(|&b| !b).collect();
    let task_prompt = build_task_prompt(req.modality.task(), &req.prompt)?;
    let prompt_emb = enc.encode(&task_prompt)?;
    let opts = DecodeOptions {
        schedule: MaskSchedule::cosine(cfg.muse.decode_steps)?,
        temperature: cfg.muse.temperature,
        seed: derive_seed(req.seed, "inpaint"),
    };
    let edited_grid = muse.inpaint(&grid, &keep, &prompt_emb, &opts)?;
    let decoded = unit_tensor_to_image(&vq.decode_tokens(&edited_grid)?);
    let condition_edited = match req.modality {
        Modality::Mask => {
            let seg = condition_to_seg(&decoded, &palette);
            seg_to_condition(&seg, &palette)?
        }
        Modality::Landmarks => decoded,
    };
    prov.stages.push(serde_json::json!({
        "stage": "condition-edit",
        "edited_tokens": req.edit_region.iter().filter(|&&b| b).count(),
        "kept_tokens": keep.iter().filter(|&&b| b).count(),
        "decode_steps": cfg.muse.decode_steps,
    }));

    // stage 2: embedding optimization, selective fine-tune, one edit pass
    let cn_path = require_ckpt(
        controlnet_ckpt_path(ckpt_dir, req.modality),
        "controlnet",
    )?;
    let cn = ControlledDiffusion::load(&cn_path)?;
    prov.record_ckpt("controlnet", &cn_path)?;
    let e_tgt = enc.encode(&req.prompt)?;
    let edit_cfg = EditConfig {
        embed_steps: cfg.edit.embed_steps,
        embed_lr: cfg.edit.embed_lr,
        finetune_steps: cfg.edit.finetune_steps,
        finetune_lr: cfg.edit.finetune_lr,
        layers: parse_layers(&cfg.edit.layers)?,
        seed: derive_seed(req.seed, "imagic"),
    };
    let mut session = EditSession::new(
        cn,
        image_to_signed_tensor(&image),
        image_to_signed_tensor(&condition),
        e_tgt,
        edit_cfg,
    )?;
    session.optimize_embedding()?;
    prov.stages.push(serde_json::json!({
        "stage": "optimize-embedding",
        "steps": cfg.edit.embed_steps,
        "lr": cfg.edit.embed_lr,
    }));
    session.finetune_model()?;
    prov.stages.push(serde_json::json!({
        "stage": "finetune",
        "steps": cfg.edit.finetune_steps,
        "lr": cfg.edit.finetune_lr,
        "layers": cfg.edit.layers,
    }));
    let uncond = enc.encode_uncond();
    let sample_opts = SampleOptions {
        steps: cfg.controlnet.sample_steps,
        cfg_scale: cfg.controlnet.guidance.cfg_scale,
        seed: derive_seed(req.seed, "edit-sample"),
        sampler: parse_sampler(&cfg.controlnet.sampler)?,
    };
    let edited = session.edit(
        &image_to_signed_tensor(&condition_edited),
        req.alpha,
        &uncond,
        &sample_opts,
    )?;
    let image_edited = signed_tensor_to_image(&edited);
    prov.stages.push(serde_json::json!({
        "stage": "edit-sample",
        "alpha": req.alpha,
        "steps": sample_opts.steps,
    }));

    let cond_path = out_dir.join("condition_edited.png");
    let img_path = out_dir.join("image_edited.png");
    condition_edited.save_png(&cond_path)?;
    image_edited.save_png(&img_path)?;
    prov.outputs = vec![
        cond_path.to_string_lossy().into_owned(),
        img_path.to_string_lossy().into_owned(),
    ];
    prov.write(out_dir)?;
    Ok(EditOutput {
        condition_edited,
        image_edited,
        provenance: prov,
    })
}

// ---------------------------------------------------------------------------
// cmd_build_dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
struct RawAnnotation {
    anchors: [[f64; 2]; 5],
    attrs: BTreeMap<String, bool>,
}

#[derive(Debug, Clone)]
pub struct BuildOutcome {
    pub processed: usize,
    pub skipped_existing: usize,
    pub rejected: crate::dataset::FilterReport,
    pub manifest_path: PathBuf,
}

/// Build (or extend) the corpus from a source directory of raw images and
/// per-image annotation JSON (`{id}.png` + `{id}.json` with anchors and the
/// forty attributes). Completed ids are skipped, so re-running resumes.
pub fn cmd_build_dataset(
    cfg: &RunConfig,
    source_dir: &Path,
) -> Result<BuildOutcome, PipelineError> {
    cfg.validate()?;
    let root = PathBuf::from(&cfg.data.corpus_root);
    for sub in ["images", "seg", "landmarks"] {
        std::fs::create_dir_all(root.join(sub)).map_err(|e| io_err(&root.join(sub), e))?;
    }
    let manifest_path = root.join(&cfg.data.manifest);
    let mut manifest = if manifest_path.exists() {
        Manifest::read(&manifest_path)?
    } else {
        Manifest::default()
    };
    let existing: std::collections::BTreeSet<String> =
        manifest.records.iter().map(|r| r.id.clone()).collect();

    // deterministic source order
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(source_dir).map_err(|e| io_err(source_dir, e))? {
        let entry = entry.map_err(|e| io_err(source_dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();

    let upscalers = UpscalerRegistry::with_stub();
    let palette = SegmentationPalette::default_face();
    let lm_extractor = GeometricLandmarkStub;
    let seg_extractor = GeometricSegmentationStub;
    let caption_engine = TemplateCaptionEngine;
    let translator = TaggedPassthroughTranslator;
    let rules = FilterRules {
        blur_threshold: cfg.data.blur_threshold,
        pose_ratio_threshold: cfg.data.pose_ratio_threshold,
    };
    let size = cfg.data.image_size;
    let final_anchors = align_template(size);

    let mut processed = 0;
    let mut skipped = 0;
    let mut report = crate::dataset::FilterReport::default();
    for id in &ids {
        if existing.contains(id) {
            skipped += 1;
            continue;
        }
        let img_path = source_dir.join(format!("{id}.png"));
        let ann_path = source_dir.join(format!("{id}.json"));
        let raw_img = ConditionImage::load_png(&img_path)?;
        let ann_text = std::fs::read_to_string(&ann_path).map_err(|e| io_err(&ann_path, e))?;
        let ann: RawAnnotation =
            serde_json::from_str(&ann_text).map_err(|e| io_err(&ann_path, e.to_string()))?;
        let attrs = AttributeVector::from_map(&ann.attrs)?;

        // align + upscale to the working resolution
        let aligned = align_crop(&raw_img, &ann.anchors, cfg.data.align_size)?;
        let face = upscale(
            &aligned,
            cfg.data.upscale_factor,
            &upscalers,
            &cfg.data.upscale_backend,
        )?;
        // extract conditions; the anchors now sit at the template positions
        let lms = lm_extractor.extract(&face, &final_anchors)?;
        let seg = seg_extractor.extract(&face, &lms)?;

        // filtering
        let item = FilterItem {
            id: id.clone(),
            image: face.clone(),
            landmarks: lms.clone(),
        };
        let (kept, r) = filter_records(&[item], &rules, &never_occluded);
        report.occlusion += r.occlusion;
        report.blur += r.blur;
        report.extreme_pose += r.extreme_pose;
        report.kept += r.kept;
        if kept.is_empty() {
            continue;
        }

        // captions in the source language, then translations
        let source_caps = captions_from_attributes(
            &attrs,
            cfg.data.captions_per_record,
            derive_seed(cfg.data.seed, id),
            &caption_engine,
        )?;
        let (source_lang, targets) = cfg
            .data
            .languages
            .split_first()
            .expect("validated non-empty");
        let outcome = translate(&source_caps, targets, &translator);
        let mut captions = BTreeMap::new();
        captions.insert(source_lang.clone(), source_caps);
        for (lang, caps) in outcome.by_lang {
            captions.insert(lang, caps);
        }

        // write artifacts
        let image_ref = format!("images/{id}.png");
        let seg_ref = format!("seg/{id}.png");
        let lms_ref = format!("landmarks/{id}.json");
        face.save_png(&root.join(&image_ref))?;
        seg_to_condition(&seg, &palette)?.save_png(&root.join(&seg_ref))?;
        std::fs::write(root.join(&lms_ref), lms.to_json())
            .map_err(|e| io_err(&root.join(&lms_ref), e))?;

        let record = FaceRecord {
            id: id.clone(),
            image: image_ref,
            seg: seg_ref,
            landmarks: lms_ref,
            attrs,
            captions,
        };
        record.validate_refs(&root)?;
        manifest.records.push(record);
        processed += 1;
    }
    manifest.write(&manifest_path)?;
    // stats + filter report alongside the manifest
    if !manifest.records.is_empty() {
        let stats = attribute_stats(&manifest)?;
        std::fs::write(root.join("attribute_stats.csv"), stats_csv(&stats))
            .map_err(|e| io_err(&root.join("attribute_stats.csv"), e))?;
    }
    let report_json = serde_json::json!({
        "occlusion": report.occlusion,
        "blur": report.blur,
        "extreme_pose": report.extreme_pose,
        "kept": report.kept,
    });
    std::fs::write(
        root.join("filter_report.json"),
        serde_json::to_string_pretty(&report_json).expect("report serializes"),
    )
    .map_err(|e| io_err(&root.join("filter_report.json"), e))?;
    let mut prov = Provenance::new("build-dataset", cfg);
    prov.seeds.insert("data".into(), cfg.data.seed);
    prov.stages.push(serde_json::json!({
        "stage": "build-dataset",
        "processed": processed,
        "skipped_existing": skipped,
        "rejected": report_json,
    }));
    prov.outputs = vec![manifest_path.to_string_lossy().into_owned()];
    prov.write(&root)?;
    Ok(BuildOutcome {
        processed,
        skipped_existing: skipped,
        rejected: report,
        manifest_path,
    })
}

// ---------------------------------------------------------------------------
// cmd_evaluate
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct EvalOutcome {
    pub rows: Vec<MetricRow>,
    pub table: String,
    pub csv_path: PathBuf,
}

/// Evaluate generated outputs against the corpus ground truth, paired by id.
///
/// The generated directory holds `{id}.png` faces and optionally
/// `{id}-seg.png` / `{id}-landmarks.json` condition predictions.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    generated_dir: &Path,
    out_dir: &Path,
    registry: &EncoderRegistry,
) -> Result<EvalOutcome, PipelineError> {
    cfg.validate()?;
    let corpus = load_corpus(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let enc = encoder(registry, &cfg.eval.text_backend)?;

    // pairing by id, fail with the full unpaired list
    let mut unpaired = Vec::new();
    for rec in &corpus.manifest.records {
        if !generated_dir.join(format!("{}.png", rec.id)).exists() {
            unpaired.push(rec.id.clone());
        }
    }
    if !unpaired.is_empty() {
        return Err(PipelineError::UnpairedIds(unpaired));
    }

    let extractor = RandomProjectionExtractor::new(cfg.eval.feature_seed, cfg.eval.feature_dim);
    let text_proj = RandomProjectionExtractor::new(
        derive_seed(cfg.eval.feature_seed, "clip-image"),
        enc.dim(),
    );
    let mut real_feats = Vec::new();
    let mut gen_feats = Vec::new();
    let mut clip_scores = Vec::new();
    let mut seg_scores = Vec::new();
    let mut lm_dists = Vec::new();
    let palette = SegmentationPalette::default_face();
    for rec in &corpus.manifest.records {
        let real = corpus.load_image(&rec.image)?;
        let gen = ConditionImage::load_png(&generated_dir.join(format!("{}.png", rec.id)))?;
        real_feats.push(extractor.features(&real));
        gen_feats.push(extractor.features(&gen));
        let caption = rec
            .captions
            .values()
            .next()
            .and_then(|caps| caps.first())
            .cloned()
            .unwrap_or_default();
        let text_emb = enc.encode(&caption)?;
        clip_scores.push(clip_score(&text_proj.features(&gen), &text_emb.pooled)?);
        let gen_seg_path = generated_dir.join(format!("{}-seg.png", rec.id));
        if gen_seg_path.exists() {
            let gt = condition_to_seg(&corpus.load_image(&rec.seg)?, &palette);
            let pred = condition_to_seg(&ConditionImage::load_png(&gen_seg_path)?, &palette);
            seg_scores.push(seg_consistency(&pred, &gt)?);
        }
        let gen_lms_path = generated_dir.join(format!("{}-landmarks.json", rec.id));
        if gen_lms_path.exists() {
            let gt = corpus.load_landmarks(&rec.landmarks)?;
            let text = std::fs::read_to_string(&gen_lms_path)
                .map_err(|e| io_err(&gen_lms_path, e))?;
            let pred = LandmarkSet::from_json(&text)?;
            lm_dists.push(landmark_consistency(&pred, &gt)?);
        }
    }
    let fid_value = fid(&gen_feats, &real_feats)?;
    let mean = |v: &[f64]| -> Option<f64> {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let mut row = MetricRow::new("generated");
    row.fid = Some(fid_value);
    // reported x100 like the published tables
    row.text = mean(&clip_scores).map(|v| v * 100.0);
    row.mask = mean(&seg_scores);
    row.human = None;
    let mut rows = vec![row];
    if let Some(lm) = mean(&lm_dists) {
        let mut lm_row = MetricRow::new("generated (landmark dist)");
        lm_row.mask = Some(lm);
        rows.push(lm_row);
    }
    let table = render_table(&rows);
    let csv_path = out_dir.join("metrics.csv");
    std::fs::write(&csv_path, render_csv(&rows)).map_err(|e| io_err(&csv_path, e))?;
    std::fs::write(out_dir.join("metrics.txt"), &table)
        .map_err(|e| io_err(&out_dir.join("metrics.txt"), e))?;
    let mut prov = Provenance::new("evaluate", cfg);
    prov.seeds.insert("eval".into(), cfg.eval.seed);
    prov.outputs = vec![csv_path.to_string_lossy().into_owned()];
    prov.write(out_dir)?;
    Ok(EvalOutcome {
        rows,
        table,
        csv_path,
    })
}

// ---------------------------------------------------------------------------
// synthetic source data (test and demo corpus)
// ---------------------------------------------------------------------------

/// Write a synthetic raw-source directory of `n` face-like images with
/// anchors and attributes, usable by `cmd_build_dataset`.
pub fn write_synthetic_source(
    dir: &Path,
    n: usize,
    raw_size: usize,
    seed: u64,
) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for i in 0..n {
        let id = format!("face{i:04}");
        let mut rng = rng_from_seed(derive_seed(seed, &id));
        let s = raw_size as f64;
        // textured background + skin-ish disc + eye dots, enough structure
        // to pass the blur gate
        let mut img = ConditionImage::filled(raw_size, raw_size, [0, 0, 0]);
        let base: [u8; 3] = [rng.gen_range(40..200), rng.gen_range(40..200), rng.gen_range(40..200)];
        for y in 0..raw_size {
            for x in 0..raw_size {
                let noise = ((x * 7 + y * 13 + i * 3) % 23) as i32 - 11;
                let px = [
                    (base[0] as i32 + noise).clamp(0, 255) as u8,
                    (base[1] as i32 + noise * 2).clamp(0, 255) as u8,
                    (base[2] as i32 - noise).clamp(0, 255) as u8,
                ];
                img.set(y, x, px);
            }
        }
        let cx = s * rng.gen_range(0.4..0.6);
        let cy = s * rng.gen_range(0.4..0.6);
        let r = s * rng.gen_range(0.22..0.3);
        for y in 0..raw_size {
            for x in 0..raw_size {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                if dx * dx + dy * dy < r * r {
                    img.set(y, x, [224, 172, 140]);
                }
            }
        }
        let eye_y = cy - 0.25 * r;
        let eye_dx = 0.45 * r;
        for (ex, ey) in [(cx - eye_dx, eye_y), (cx + eye_dx, eye_y)] {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (x, y) = ((ex as i64 + dx) as usize, (ey as i64 + dy) as usize);
                    if x < raw_size && y < raw_size {
                        img.set(y, x, [20, 20, 20]);
                    }
                }
            }
        }
        let anchors = [
            [cx - eye_dx, eye_y],
            [cx + eye_dx, eye_y],
            [cx, cy + 0.15 * r],
            [cx - 0.35 * r, cy + 0.6 * r],
            [cx + 0.35 * r, cy + 0.6 * r],
        ];
        let mut attrs = AttributeVector::all_false();
        for name in crate::dataset::ATTRIBUTE_NAMES {
            if rng.gen_bool(0.25) {
                attrs.set(name, true);
            }
        }
        let ann = serde_json::json!({
            "anchors": anchors,
            "attrs": attrs.to_map(),
        });
        img.save_png(&dir.join(format!("{id}.png")))?;
        std::fs::write(dir.join(format!("{id}.json")), ann.to_string())
            .map_err(|e| io_err(dir, e))?;
    }
    Ok(())
}
