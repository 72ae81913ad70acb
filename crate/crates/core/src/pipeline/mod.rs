//! End-to-end stages: reasoning over images, training, evaluation and
//! single-sample inference.

mod config;

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{OptimizerKind, TrainConfig};

use crate::autograd::ParamStore;
use crate::backbones::PointGeometry;
use crate::checkpoint::{load_checkpoint, save_checkpoint, sidecar_path, CheckpointMeta};
use crate::dataset::{
    draw_pairs, load_image, load_manifest, load_point_coords, make_partition, normalize_coords, write_point_annotation,
    EntryId, Manifest, PairIndex, PartitionName, PartitionSpec, PointCloudInstance, SampleLoader, DEFAULT_IMAGE_SIZE,
};
use crate::error::{Error, Result, StageExt};
use crate::knowledge::KnowledgeTokens;
use crate::metrics::{evaluate_all, MetricReport};
use crate::mhacot::{parse_transcript, run_chain, KnowledgeRecord, PromptTemplates};
use crate::mllm::{cache_get, BackendConfig};
use crate::model::{GreatModel, ModelInput};
use crate::optim::Adam;

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasonFailure {
    pub image_id: String,
    pub error: String,
    pub exit_code: i32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReasonSummary {
    pub total: usize,
    /// Already cached before this run.
    pub cached: usize,
    pub generated: usize,
    pub failures: Vec<ReasonFailure>,
}

enum Outcome {
    Cached,
    Generated,
}

/// Fills the transcript cache for every manifest image, running up to
/// `backend.concurrency` conversations at once. Per-image failures are
/// collected rather than aborting the batch.
pub fn reason(
    manifest: &Manifest,
    backend: &BackendConfig,
    templates: &PromptTemplates,
    cache_dir: &Path,
) -> Result<ReasonSummary> {
    let client = backend.connect()?;
    let pool = thread_pool(backend.concurrency)?;
    let results: Vec<(String, Result<Outcome>)> = pool.install(|| {
        manifest
            .images
            .par_iter()
            .map(|e| {
                let id = e.id();
                let res = if cache_get(&id, cache_dir).is_some() {
                    Ok(Outcome::Cached)
                } else {
                    load_image(&e.file, &e.object, &e.affordance, DEFAULT_IMAGE_SIZE)
                        .and_then(|img| run_chain(&img, client.as_ref(), templates, cache_dir))
                        .map(|_| Outcome::Generated)
                };
                (id, res)
            })
            .collect()
    });
    let mut summary = ReasonSummary {
        total: results.len(),
        ..ReasonSummary::default()
    };
    for (image_id, res) in results {
        match res {
            Ok(Outcome::Cached) => summary.cached += 1,
            Ok(Outcome::Generated) => summary.generated += 1,
            Err(e) => {
                log::warn!("{image_id}: {e}");
                summary.failures.push(ReasonFailure {
                    image_id,
                    exit_code: e.exit_code(),
                    error: e.to_string(),
                })
            }
        }
    }
    Ok(summary)
}

/// Parsed knowledge for the given manifest images, read from the cache only.
pub fn load_knowledge(
    manifest: &Manifest,
    images: impl IntoIterator<Item = usize>,
    cache_dir: &Path,
) -> Result<BTreeMap<usize, KnowledgeRecord>> {
    let mut out = BTreeMap::new();
    let mut missing = Vec::new();
    for idx in images {
        if out.contains_key(&idx) {
            continue;
        }
        let id = manifest.images[idx].id();
        match cache_get(&id, cache_dir) {
            Some(t) => {
                out.insert(idx, parse_transcript(&t).stage("knowledge")?);
            }
            None => missing.push(id),
        }
    }
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(Error::MissingTranscripts { missing });
    }
    Ok(out)
}

/// Preloaded, model-ready data for a set of pairs.
struct Prepared {
    geometry: HashMap<usize, PointGeometry>,
    labels: HashMap<(usize, String), Vec<f64>>,
    pixels: HashMap<usize, Array3<f64>>,
    tokens: HashMap<usize, KnowledgeTokens>,
}

impl Prepared {
    fn load(
        model: &GreatModel,
        manifest: &Manifest,
        points: &[(usize, String)],
        images: &[usize],
        knowledge: &BTreeMap<usize, KnowledgeRecord>,
        pool: &rayon::ThreadPool,
    ) -> Result<Self> {
        let mut loader = SampleLoader::new(manifest, true, model.config.image_size as u32);
        let mut coords: BTreeMap<usize, Array2<f64>> = BTreeMap::new();
        let mut labels = HashMap::new();
        for (inst, aff) in points {
            if !coords.contains_key(inst) {
                coords.insert(*inst, loader.instance(*inst)?.coords.clone());
            }
            labels.insert((*inst, aff.clone()), loader.label(*inst, aff)?.heatmap.clone());
        }
        let mut pixels = HashMap::new();
        for &i in images {
            if let Entry::Vacant(slot) = pixels.entry(i) {
                slot.insert(loader.image(i)?.pixels.clone());
            }
        }
        let geometry = pool.install(|| {
            coords
                .par_iter()
                .map(|(&i, c)| model.prepare_points(c).map(|g| (i, g)))
                .collect::<Result<HashMap<_, _>>>()
        })?;
        let tokens = images
            .iter()
            .map(|&i| {
                let record = knowledge
                    .get(&i)
                    .ok_or_else(|| Error::MissingTranscripts {
                        missing: vec![manifest.images[i].id()],
                    })?;
                model.prepare_knowledge(record).map(|t| (i, t))
            })
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(Self {
            geometry,
            labels,
            pixels,
            tokens,
        })
    }

    fn input(&self, p: &PairIndex) -> ModelInput<'_> {
        ModelInput {
            pixels: &self.pixels[&p.image],
            geometry: &self.geometry[&p.instance],
            knowledge: &self.tokens[&p.image],
        }
    }

    fn label(&self, p: &PairIndex) -> &[f64] {
        &self.labels[&(p.instance, p.affordance.clone())]
    }
}

fn split_entries(entries: &[EntryId]) -> (Vec<(usize, String)>, Vec<usize>) {
    let mut points = Vec::new();
    let mut images = Vec::new();
    for e in entries {
        match e {
            EntryId::Point {
                instance,
                affordance,
            } => points.push((*instance, affordance.clone())),
            EntryId::Image(i) => images.push(*i),
        }
    }
    (points, images)
}

fn partition_for(cfg: &TrainConfig, manifest: &Manifest, name: PartitionName) -> Result<PartitionSpec> {
    make_partition(
        name,
        manifest,
        &cfg.held_out_objects,
        &cfg.held_out_affordances,
        cfg.seed,
        cfg.seen_train_ratio,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_curve: PathBuf,
    pub epoch_losses: Vec<f64>,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

fn remove_checkpoint(path: &Path) {
    for p in [path.to_path_buf(), sidecar_path(path)] {
        if let Err(e) = std::fs::remove_file(&p) {
            log::warn!("could not remove old checkpoint {}: {e}", p.display());
        }
    }
}

/// Trains on the configured partition. Reads transcripts from the cache
/// only and fails before any optimisation if some are missing.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.manifest)?;
    let partition = partition_for(cfg, &manifest, cfg.partition)?;
    let (points, images) = split_entries(&partition.train);
    let knowledge = load_knowledge(&manifest, images.iter().copied(), &cfg.cache_dir)?;

    let (model, mut store) = GreatModel::new(&cfg.model, cfg.seed)?;
    let pool = thread_pool(cfg.workers)?;
    let data = Prepared::load(&model, &manifest, &points, &images, &knowledge, &pool).stage("load")?;
    let mut adam = match cfg.optimizer {
        OptimizerKind::Adam => Adam::new(&store, cfg.learning_rate),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let steps = points.len().div_ceil(cfg.batch_size);
    log::info!(
        "training on {}: {} annotations, {} images, {} parameters, {steps} steps per epoch",
        partition.name,
        points.len(),
        images.len(),
        store.scalar_count()
    );

    std::fs::create_dir_all(&cfg.checkpoint_dir).map_err(|e| Error::io(&cfg.checkpoint_dir, e))?;
    let curve_path = cfg.checkpoint_dir.join("loss_curve.csv");
    let mut curve = String::from("epoch,loss\n");
    let train_json = serde_json::to_value(cfg)?;
    let mut saved: Vec<PathBuf> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        let mut count = 0usize;
        for _ in 0..steps {
            let pairs = draw_pairs(&partition, &manifest, cfg.batch_size, &mut rng)?;
            let results: Vec<Result<(f64, Vec<Array2<f64>>)>> = pool.install(|| {
                pairs
                    .par_iter()
                    .map(|p| model.loss_and_grads(&store, data.input(p), data.label(p), &cfg.loss))
                    .collect()
            });
            let mut sum: Option<Vec<Array2<f64>>> = None;
            for r in results {
                // φ is clamped inside (0, 1) whenever it is finite, so a domain
                // error here means the network produced NaN.
                let (loss, grads) = r.map_err(|e| match e.root() {
                    Error::Domain(_) => Error::Divergence {
                        epoch,
                        loss: f64::NAN,
                        last_good: saved.last().cloned(),
                    },
                    _ => e,
                })?;
                total += loss;
                count += 1;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| *a += g),
                }
            }
            let mut grads = sum.expect("batch is non-empty");
            let inv = 1.0 / pairs.len() as f64;
            grads.iter_mut().for_each(|g| *g *= inv);
            adam.step(&mut store, &grads)?;
        }
        let epoch_loss = total / count as f64;
        if !epoch_loss.is_finite() || store.iter().any(|(_, v)| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::Divergence {
                epoch,
                loss: epoch_loss,
                last_good: saved.last().cloned(),
            });
        }
        losses.push(epoch_loss);
        let _ = writeln!(curve, "{epoch},{epoch_loss}");
        std::fs::write(&curve_path, &curve).map_err(|e| Error::io(&curve_path, e))?;

        let path = cfg.checkpoint_dir.join(checkpoint_name(epoch));
        let meta = CheckpointMeta::new(cfg.model.clone(), train_json.clone(), epoch, Some(epoch_loss));
        save_checkpoint(&path, &store, &meta)?;
        saved.push(path);
        if cfg.keep_checkpoints > 0 && saved.len() > cfg.keep_checkpoints {
            remove_checkpoint(&saved.remove(0));
        }
        log::info!("epoch {epoch}/{}: loss {epoch_loss:.6}", cfg.epochs);
    }
    Ok(TrainOutcome {
        checkpoint: saved.pop().expect("at least one epoch"),
        loss_curve: curve_path,
        epoch_losses: losses,
    })
}

/// Pairs each test annotation with a test image of the same cell, cycling
/// through the cell's images in order. Cells without test images fall back
/// to all of the cell's images.
pub fn test_pairs(partition: &PartitionSpec, manifest: &Manifest) -> Result<Vec<PairIndex>> {
    let mut cell_images: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for e in &partition.test {
        if let EntryId::Image(i) = e {
            let m = &manifest.images[*i];
            cell_images.entry((&m.object, &m.affordance)).or_default().push(*i);
        }
    }
    let mut cursor: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut out = Vec::new();
    for e in &partition.test {
        let EntryId::Point {
            instance,
            affordance,
        } = e
        else {
            continue;
        };
        let object = manifest.points[*instance].object.as_str();
        let fallback: Vec<usize>;
        let pool = match cell_images.get(&(object, affordance.as_str())) {
            Some(v) => v,
            None => {
                fallback = (0..manifest.images.len())
                    .filter(|&i| manifest.images[i].object == object && &manifest.images[i].affordance == affordance)
                    .collect();
                &fallback
            }
        };
        if pool.is_empty() {
            return Err(Error::Sampling(format!("no image for cell ({object}, {affordance})")));
        }
        let k = cursor.entry((object.to_string(), affordance.clone())).or_default();
        out.push(PairIndex {
            image: pool[*k % pool.len()],
            instance: *instance,
            affordance: affordance.clone(),
        });
        *k += 1;
    }
    Ok(out)
}

/// Evaluates a checkpoint on the test side of `partition` (default: the
/// partition it was trained on).
pub fn evaluate(checkpoint: &Path, partition: Option<PartitionName>, workers: usize) -> Result<MetricReport> {
    let (model, store, meta) = load_checkpoint(checkpoint)?;
    let cfg: TrainConfig = serde_json::from_value(meta.train.clone())
        .map_err(|e| Error::Checkpoint(format!("sidecar training config: {e}")))?;
    let name = partition.unwrap_or(cfg.partition);
    let manifest = load_manifest(&cfg.manifest)?;
    let spec = partition_for(&cfg, &manifest, name)?;
    let pairs = test_pairs(&spec, &manifest)?;
    let images: Vec<usize> = pairs.iter().map(|p| p.image).collect();
    let points: Vec<(usize, String)> = pairs.iter().map(|p| (p.instance, p.affordance.clone())).collect();
    let knowledge = load_knowledge(&manifest, images.iter().copied(), &cfg.cache_dir)?;
    let pool = thread_pool(workers)?;
    let data = Prepared::load(&model, &manifest, &points, &images, &knowledge, &pool).stage("load")?;
    let predictions = predict_all(&model, &store, &data, &pairs, &pool)?;
    let labels: Vec<Vec<f64>> = pairs.iter().map(|p| data.label(p).to_vec()).collect();
    evaluate_all(name.as_str(), &predictions, &labels, &cfg.metrics)
}

fn predict_all(
    model: &GreatModel,
    store: &ParamStore,
    data: &Prepared,
    pairs: &[PairIndex],
    pool: &rayon::ThreadPool,
) -> Result<Vec<Vec<f64>>> {
    pool.install(|| pairs.par_iter().map(|p| model.predict(store, data.input(p))).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferRequest {
    pub checkpoint: PathBuf,
    pub points: PathBuf,
    pub image: PathBuf,
    pub object: String,
    pub out: PathBuf,
    pub heatmap_png: Option<PathBuf>,
    /// Overrides the cache directory recorded in the checkpoint.
    pub cache_dir: Option<PathBuf>,
    /// Overrides the backend recorded in the checkpoint.
    pub backend: Option<BackendConfig>,
}

/// Predicts one heatmap and writes it as "x y z φ" rows. Without a cached
/// transcript the configured backend is asked; with no backend this fails.
pub fn infer(req: &InferRequest) -> Result<Vec<f64>> {
    let (model, store, meta) = load_checkpoint(&req.checkpoint)?;
    let cfg: TrainConfig = serde_json::from_value(meta.train.clone()).unwrap_or_default();
    let cache_dir = req.cache_dir.clone().unwrap_or(cfg.cache_dir.clone());
    let coords = load_point_coords(&req.points)?;
    let stem = req.points.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let instance = PointCloudInstance::new(stem, req.object.clone(), coords)?;
    let image = load_image(&req.image, &req.object, "", model.config.image_size as u32)?;

    let transcript = match cache_get(&image.id, &cache_dir) {
        Some(t) => t,
        None => match req.backend.as_ref().or(cfg.backend.as_ref()) {
            Some(b) => run_chain(&image, b.connect()?.as_ref(), &cfg.prompts, &cache_dir)?,
            None => {
                return Err(Error::MissingTranscripts {
                    missing: vec![image.id.clone()],
                })
            }
        },
    };
    let record = parse_transcript(&transcript).stage("knowledge")?;
    let geometry = model.prepare_points(&normalize_coords(&instance.coords))?;
    let tokens = model.prepare_knowledge(&record)?;
    let phi = model.predict(
        &store,
        ModelInput {
            pixels: &image.pixels,
            geometry: &geometry,
            knowledge: &tokens,
        },
    )?;
    if let Some(dir) = req.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_point_annotation(&req.out, &instance.coords, &phi)?;
    if let Some(png) = &req.heatmap_png {
        crate::render::heatmap_image(&instance.coords, &phi, 512)
            .save(png)
            .map_err(|e| Error::Image {
                path: png.clone(),
                msg: e.to_string(),
            })?;
    }
    Ok(phi)
}
