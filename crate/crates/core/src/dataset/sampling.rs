use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::{
    load_image, load_point_annotation, load_point_coords, normalize_coords, AffordanceAnnotation,
    EntryId, InteractionImage, Manifest, PairedSample, PartitionSpec, PointCloudInstance,
    DEFAULT_IMAGE_SIZE,
};
use crate::error::{Error, Result};

/// Indices of one paired sample: image entry, point instance and affordance.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PairIndex {
    pub image: usize,
    pub instance: usize,
    pub affordance: String,
}

/// Draws `batch_size` pairs from the train side of `partition`. Each image is
/// uniform over train images; its partner instance is uniform over train
/// instances annotated for the image's (object, affordance) cell.
pub fn draw_pairs<R: Rng + ?Sized>(
    partition: &PartitionSpec,
    manifest: &Manifest,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<PairIndex>> {
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    let mut images = Vec::new();
    let mut cells: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for e in &partition.train {
        match e {
            EntryId::Image(i) => images.push(*i),
            EntryId::Point {
                instance,
                affordance,
            } => cells
                .entry((manifest.points[*instance].object.as_str(), affordance.as_str()))
                .or_default()
                .push(*instance),
        }
    }
    if images.is_empty() {
        return Err(Error::Sampling(format!(
            "{}: no training images",
            partition.name
        )));
    }
    (0..batch_size)
        .map(|_| {
            let image = images[rng.random_range(0..images.len())];
            let entry = &manifest.images[image];
            let pool = cells
                .get(&(entry.object.as_str(), entry.affordance.as_str()))
                .filter(|p| !p.is_empty())
                .ok_or_else(|| {
                    Error::Sampling(format!(
                        "no training instance for cell ({}, {})",
                        entry.object, entry.affordance
                    ))
                })?;
            let instance = pool[rng.random_range(0..pool.len())];
            Ok(PairIndex {
                image,
                instance,
                affordance: entry.affordance.clone(),
            })
        })
        .collect()
}

/// Memoising loader for manifest entries.
pub struct SampleLoader<'m> {
    manifest: &'m Manifest,
    normalize: bool,
    image_size: u32,
    instances: HashMap<usize, PointCloudInstance>,
    raw_coords: HashMap<usize, ndarray::Array2<f64>>,
    labels: HashMap<(usize, String), AffordanceAnnotation>,
    images: HashMap<usize, InteractionImage>,
}

impl<'m> SampleLoader<'m> {
    pub fn new(manifest: &'m Manifest, normalize: bool, image_size: u32) -> Self {
        Self {
            manifest,
            normalize,
            image_size,
            instances: HashMap::new(),
            raw_coords: HashMap::new(),
            labels: HashMap::new(),
            images: HashMap::new(),
        }
    }

    pub fn manifest(&self) -> &'m Manifest {
        self.manifest
    }

    fn raw(&mut self, idx: usize) -> Result<&ndarray::Array2<f64>> {
        if !self.raw_coords.contains_key(&idx) {
            let coords = load_point_coords(&self.manifest.points[idx].file)?;
            self.raw_coords.insert(idx, coords);
        }
        Ok(&self.raw_coords[&idx])
    }

    pub fn instance(&mut self, idx: usize) -> Result<&PointCloudInstance> {
        if !self.instances.contains_key(&idx) {
            let entry = &self.manifest.points[idx];
            let raw = self.raw(idx)?.clone();
            let inst = PointCloudInstance::new(entry.id(), entry.object.clone(), raw)?;
            let inst = if self.normalize {
                PointCloudInstance {
                    coords: normalize_coords(&inst.coords),
                    ..inst
                }
            } else {
                inst
            };
            self.instances.insert(idx, inst);
        }
        Ok(&self.instances[&idx])
    }

    pub fn label(&mut self, idx: usize, affordance: &str) -> Result<&AffordanceAnnotation> {
        let key = (idx, affordance.to_string());
        if !self.labels.contains_key(&key) {
            let entry = &self.manifest.points[idx];
            let file = entry.labels.get(affordance).ok_or_else(|| {
                Error::Validation(format!(
                    "instance {} has no `{affordance}` annotation",
                    entry.file.display()
                ))
            })?;
            let (coords, heat) = load_point_annotation(file)?;
            let raw = self.raw(idx)?;
            let mismatch = raw
                .iter()
                .zip(coords.iter())
                .any(|(a, b)| (a - b).abs() > 1e-6 * (1.0 + a.abs()));
            if mismatch {
                return Err(Error::Validation(format!(
                    "{}: coordinates differ from instance {}",
                    file.display(),
                    entry.file.display()
                )));
            }
            let label = AffordanceAnnotation::new(entry.id(), affordance, heat, coords.nrows())?;
            self.labels.insert(key.clone(), label);
        }
        Ok(&self.labels[&key])
    }

    pub fn image(&mut self, idx: usize) -> Result<&InteractionImage> {
        if !self.images.contains_key(&idx) {
            let e = &self.manifest.images[idx];
            let img = load_image(&e.file, &e.object, &e.affordance, self.image_size)?;
            self.images.insert(idx, img);
        }
        Ok(&self.images[&idx])
    }

    pub fn pair(&mut self, p: &PairIndex) -> Result<PairedSample> {
        let points = self.instance(p.instance)?.clone();
        let label = self.label(p.instance, &p.affordance)?.clone();
        let image = self.image(p.image)?.clone();
        if image.affordance_category != label.affordance_category
            || image.object_category != points.object_category
        {
            return Err(Error::Sampling(format!(
                "pair ({}, {}) disagrees on categories",
                image.id, points.id
            )));
        }
        Ok(PairedSample {
            points,
            label,
            image,
        })
    }
}

/// Draws and loads a batch of paired samples with default loading options
/// (normalised clouds, 224×224 images).
pub fn sample_batch<R: Rng + ?Sized>(
    partition: &PartitionSpec,
    manifest: &Manifest,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<PairedSample>> {
    let pairs = draw_pairs(partition, manifest, batch_size, rng)?;
    let mut loader = SampleLoader::new(manifest, true, DEFAULT_IMAGE_SIZE);
    pairs.iter().map(|p| loader.pair(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::partition::tests::grid_manifest;
    use crate::dataset::{make_partition, PartitionName};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::{BTreeSet, HashSet};

    fn seen(m: &Manifest) -> PartitionSpec {
        make_partition(PartitionName::Seen, m, &BTreeSet::new(), &BTreeSet::new(), 0, 0.8).unwrap()
    }

    #[test]
    fn unique_pair_in_single_cell() {
        let m = grid_manifest(&[("mug", &["grasp"])], 1, 1);
        let spec = PartitionSpec {
            name: PartitionName::Seen,
            train: vec![
                EntryId::Image(0),
                EntryId::Point {
                    instance: 0,
                    affordance: "grasp".into(),
                },
            ],
            test: vec![],
            held_out_objects: BTreeSet::new(),
            held_out_affordances: BTreeSet::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs = draw_pairs(&spec, &m, 5, &mut rng).unwrap();
        assert!(pairs.iter().all(|p| p.image == 0 && p.instance == 0 && p.affordance == "grasp"));
    }

    #[test]
    fn all_pairs_covered() {
        // 2 images × 3 instances in one cell.
        let m = grid_manifest(&[("mug", &["grasp"])], 3, 2);
        let mut train: Vec<EntryId> = (0..2).map(EntryId::Image).collect();
        train.extend((0..3).map(|i| EntryId::Point {
            instance: i,
            affordance: "grasp".into(),
        }));
        let spec = PartitionSpec {
            name: PartitionName::Seen,
            train,
            test: vec![],
            held_out_objects: BTreeSet::new(),
            held_out_affordances: BTreeSet::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let seen_pairs: HashSet<(usize, usize)> = draw_pairs(&spec, &m, 10_000, &mut rng)
            .unwrap()
            .into_iter()
            .map(|p| (p.image, p.instance))
            .collect();
        assert_eq!(seen_pairs.len(), 6);
    }

    #[test]
    fn batch_of_sixteen_respects_categories() {
        let m = grid_manifest(&[("mug", &["grasp", "pour"]), ("knife", &["grasp", "cut"])], 10, 5);
        let spec = seen(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs = draw_pairs(&spec, &m, 16, &mut rng).unwrap();
        assert_eq!(pairs.len(), 16);
        let train: BTreeSet<&EntryId> = spec.train.iter().collect();
        for p in &pairs {
            let img = &m.images[p.image];
            assert_eq!(img.object, m.points[p.instance].object);
            assert_eq!(img.affordance, p.affordance);
            assert!(train.contains(&EntryId::Image(p.image)));
            assert!(train.contains(&EntryId::Point {
                instance: p.instance,
                affordance: p.affordance.clone()
            }));
        }
    }

    #[test]
    fn missing_cell_partner_is_sampling_error() {
        let m = grid_manifest(&[("mug", &["grasp"])], 1, 1);
        let spec = PartitionSpec {
            name: PartitionName::Seen,
            train: vec![EntryId::Image(0)],
            test: vec![],
            held_out_objects: BTreeSet::new(),
            held_out_affordances: BTreeSet::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match draw_pairs(&spec, &m, 1, &mut rng) {
            Err(Error::Sampling(msg)) => assert!(msg.contains("(mug, grasp)")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_batch_rejected() {
        let m = grid_manifest(&[("mug", &["grasp"])], 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            draw_pairs(&seen(&m), &m, 0, &mut rng),
            Err(Error::Argument(_))
        ));
    }
}
