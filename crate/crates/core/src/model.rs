//! The full network: encoders, knowledge integration, fusion and decoder.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::backbones::{default_levels, ImageEncoder, LevelSpec, PointEncoder, PointFeaturePyramid, PointGeometry, TextEncoder};
use crate::cmafm::Cmafm;
use crate::dataset::PairedSample;
use crate::decoder::Decoder;
use crate::error::{Error, Result, StageExt};
use crate::knowledge::{encode_knowledge, KnowledgeIntegrator, KnowledgeTokens, MAX_OBJECT_TOKENS};
use crate::loss::{total_loss_node, LossConfig};
use crate::mhacot::KnowledgeRecord;
use crate::nn::Init;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width `C`.
    pub channels: usize,
    /// Attention width `d` of the co-representation; defaults to `C`.
    pub attention_dim: Option<usize>,
    /// Square input side; `N_i = (image_size / 32)²`.
    pub image_size: usize,
    /// Set-abstraction levels; the last `npoint` is `N_p`.
    pub point_levels: Vec<LevelSpec>,
    pub text_vocab: usize,
    pub text_layers: usize,
    pub max_object_tokens: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 512,
            attention_dim: None,
            image_size: 224,
            point_levels: default_levels(),
            text_vocab: 4096,
            text_layers: 2,
            max_object_tokens: MAX_OBJECT_TOKENS,
        }
    }
}

impl ModelConfig {
    pub fn with_channels(channels: usize) -> Self {
        Self {
            channels,
            ..Self::default()
        }
    }

    pub fn d(&self) -> usize {
        self.attention_dim.unwrap_or(self.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 4 {
            return Err(Error::Config(format!("channels must be at least 4, got {}", self.channels)));
        }
        if self.d() == 0 {
            return Err(Error::Config("attention_dim must be positive".into()));
        }
        if self.text_vocab == 0 || self.max_object_tokens == 0 {
            return Err(Error::Config("text_vocab and max_object_tokens must be positive".into()));
        }
        if self.point_levels.is_empty() {
            return Err(Error::Config("point_levels is empty".into()));
        }
        Ok(())
    }
}

/// Inputs of one forward pass, prepared once and reusable.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'s> {
    pub pixels: &'s Array3<f64>,
    pub geometry: &'s PointGeometry,
    pub knowledge: &'s KnowledgeTokens,
}

/// Every intermediate of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub f_i: Var,
    pub pyramid: PointFeaturePyramid,
    pub f_p: Var,
    pub t_o: Var,
    pub t_a: Var,
    pub tbar_o: Var,
    pub tbar_a: Var,
    pub f_p_prime: Var,
    pub t_o_prime: Var,
    pub p_o: Var,
    pub f_tp: Var,
    pub f_ti: Var,
    /// `[1 × N]`
    pub phi: Var,
    /// Attention maps of the knowledge integration and the co-representation.
    pub attention: [Var; 6],
}

#[derive(Clone, Debug)]
pub struct GreatModel {
    pub config: ModelConfig,
    pub image: ImageEncoder,
    pub point: PointEncoder,
    pub text: TextEncoder,
    pub knowledge: KnowledgeIntegrator,
    pub cmafm: Cmafm,
    pub decoder: Decoder,
}

impl GreatModel {
    /// Builds the network and its freshly initialised parameters.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let c = config.channels;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let model = Self {
            image: ImageEncoder::new(&mut store, &mut init, c, config.image_size)?,
            point: PointEncoder::new(&mut store, &mut init, c, &config.point_levels)?,
            text: TextEncoder::new(&mut store, &mut init, c, config.text_vocab, config.text_layers)?,
            knowledge: KnowledgeIntegrator::new(&mut store, &mut init, c),
            cmafm: Cmafm::new(&mut store, &mut init, c, config.d())?,
            decoder: Decoder::new(&mut store, &mut init, c),
            config: config.clone(),
        };
        Ok((model, store))
    }

    /// Sampling and grouping structure for normalised coordinates.
    pub fn prepare_points(&self, coords: &Array2<f64>) -> Result<PointGeometry> {
        self.point.geometry(coords).stage("point_encode")
    }

    pub fn prepare_knowledge(&self, record: &KnowledgeRecord) -> Result<KnowledgeTokens> {
        KnowledgeTokens::from_record(record, &self.text, self.config.max_object_tokens).stage("encode_knowledge")
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, input: ModelInput<'_>) -> Result<ForwardTrace> {
        let f_i = self.image.forward(tape, store, input.pixels).stage("image_encode")?;
        let pyramid = self.point.encode(tape, store, input.geometry).stage("point_encode")?;
        let f_p = pyramid.deepest();
        let (t_o, t_a) = encode_knowledge(tape, store, &self.text, input.knowledge).stage("encode_knowledge")?;
        let integrated = self.knowledge.integrate(tape, store, t_o, t_a).stage("integrate_knowledge")?;
        let co = self
            .cmafm
            .co_represent(tape, store, f_p, integrated.t_o)
            .stage("co_represent")?;
        let p_o = self
            .cmafm
            .inject_geometry(tape, store, co.points, co.knowledge)
            .stage("inject_geometry")?;
        let f_tp = self
            .point
            .fp_upsample(tape, store, input.geometry, &pyramid, p_o)
            .stage("upsample_points")?;
        let f_ti = self
            .cmafm
            .fuse_intention(tape, store, integrated.t_a, f_i)
            .stage("fuse_intention")?;
        let phi = self.decoder.decode(tape, store, f_ti, f_tp).stage("decode")?;
        Ok(ForwardTrace {
            f_i,
            pyramid,
            f_p,
            t_o,
            t_a,
            tbar_o: integrated.t_o,
            tbar_a: integrated.t_a,
            f_p_prime: co.points,
            t_o_prime: co.knowledge,
            p_o,
            f_tp,
            f_ti,
            phi,
            attention: [
                integrated.cross_o,
                integrated.cross_a,
                integrated.self_o,
                integrated.self_a,
                co.point_weights,
                co.knowledge_weights,
            ],
        })
    }

    /// φ for one input.
    pub fn predict(&self, store: &ParamStore, input: ModelInput<'_>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let trace = self.forward(&mut tape, store, input)?;
        Ok(tape.value(trace.phi).iter().copied().collect())
    }

    /// φ for a paired sample whose image the knowledge record describes.
    pub fn predict_sample(&self, store: &ParamStore, sample: &PairedSample, record: &KnowledgeRecord) -> Result<Vec<f64>> {
        if record.image_id != sample.image.id {
            return Err(Error::Argument(format!(
                "knowledge for `{}` paired with image `{}`",
                record.image_id, sample.image.id
            )));
        }
        let geometry = self.prepare_points(&sample.points.coords)?;
        let knowledge = self.prepare_knowledge(record)?;
        self.predict(
            store,
            ModelInput {
                pixels: &sample.image.pixels,
                geometry: &geometry,
                knowledge: &knowledge,
            },
        )
    }

    /// Total loss and parameter gradients (in store order) for one sample.
    pub fn loss_and_grads(
        &self,
        store: &ParamStore,
        input: ModelInput<'_>,
        label: &[f64],
        loss: &LossConfig,
    ) -> Result<(f64, Vec<Array2<f64>>)> {
        let mut tape = Tape::new();
        let trace = self.forward(&mut tape, store, input)?;
        let l = total_loss_node(&mut tape, trace.phi, label, loss).stage("loss")?;
        let value = tape.scalar(l);
        let grads = tape.backward(l).param_grads(store);
        Ok((value, grads))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::backbones::LevelSpec;
    use crate::dataset::normalize_coords;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            channels: 8,
            attention_dim: None,
            image_size: 64,
            point_levels: vec![
                LevelSpec {
                    npoint: 16,
                    radius: 0.5,
                    nsample: 8,
                },
                LevelSpec {
                    npoint: 4,
                    radius: 1.0,
                    nsample: 8,
                },
            ],
            text_vocab: 64,
            text_layers: 1,
            max_object_tokens: 64,
        }
    }

    fn record() -> KnowledgeRecord {
        KnowledgeRecord {
            image_id: "img".into(),
            object_text: "the handle is a curved loop".into(),
            affordance_texts: ["hold the handle".into(), "drink".into(), "carry it".into()],
        }
    }

    fn inputs(model: &GreatModel, n: usize) -> (Array3<f64>, PointGeometry, KnowledgeTokens) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pixels = Array3::from_shape_simple_fn((3, 64, 64), || rng.random_range(0.0..1.0));
        let coords = Array2::from_shape_simple_fn((n, 3), || rng.random_range(-1.0..1.0));
        let geom = model.prepare_points(&normalize_coords(&coords)).unwrap();
        (pixels, geom, model.prepare_knowledge(&record()).unwrap())
    }

    #[test]
    fn forward_shapes() {
        let (model, store) = GreatModel::new(&tiny_config(), 0).unwrap();
        let (px, geom, know) = inputs(&model, 32);
        let mut tape = Tape::new();
        let t = model
            .forward(
                &mut tape,
                &store,
                ModelInput {
                    pixels: &px,
                    geometry: &geom,
                    knowledge: &know,
                },
            )
            .unwrap();
        assert_eq!(tape.shape(t.f_i), (8, 4));
        assert_eq!(tape.shape(t.f_p), (8, 4));
        assert_eq!(tape.shape(t.t_a), (3, 8));
        assert_eq!(tape.shape(t.tbar_o), tape.shape(t.t_o));
        assert_eq!(tape.shape(t.t_o_prime), (8, tape.shape(t.t_o).0));
        assert_eq!(tape.shape(t.f_tp), (8, 32));
        assert_eq!(tape.shape(t.phi), (1, 32));
        assert!(tape.value(t.phi).iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn stage_name_attached_to_errors() {
        let (model, store) = GreatModel::new(&tiny_config(), 0).unwrap();
        let (_, geom, know) = inputs(&model, 32);
        let bad = Array3::zeros((1, 64, 64));
        let err = model
            .predict(
                &store,
                ModelInput {
                    pixels: &bad,
                    geometry: &geom,
                    knowledge: &know,
                },
            )
            .unwrap_err();
        assert!(err.to_string().starts_with("image_encode:"), "{err}");
        assert!(matches!(err.root(), Error::Shape(_)));
    }

    #[test]
    fn composite_gradcheck_on_parameter_slice() {
        let (model, mut store) = GreatModel::new(&tiny_config(), 1).unwrap();
        let (px, geom, know) = inputs(&model, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Zero biases put ReLU inputs exactly on the kink at ball centres
        // (zero offsets); a small jitter moves the check off it.
        for v in store.values_mut() {
            v.mapv_inplace(|x| x + rng.random_range(-0.05..0.05));
        }
        let label: Vec<f64> = (0..32).map(|_| if rng.random_bool(0.3) { rng.random_range(0.5..1.0) } else { 0.0 }).collect();
        let cfg = LossConfig::default();
        let input = ModelInput {
            pixels: &px,
            geometry: &geom,
            knowledge: &know,
        };
        let (_, grads) = model.loss_and_grads(&store, input, &label, &cfg).unwrap();
        let ids: Vec<_> = store.ids().collect();
        let h = 1e-6;
        let mut checked = 0;
        for (k, &id) in ids.iter().enumerate() {
            let (r, c) = store.get(id).dim();
            let (i, j) = (k % r, (k * 7) % c);
            let orig = store.get(id)[[i, j]];
            store.get_mut(id)[[i, j]] = orig + h;
            let up = model.loss_and_grads(&store, input, &label, &cfg).unwrap().0;
            store.get_mut(id)[[i, j]] = orig - h;
            let down = model.loss_and_grads(&store, input, &label, &cfg).unwrap().0;
            store.get_mut(id)[[i, j]] = orig;
            let num = (up - down) / (2.0 * h);
            let a = grads[id.index()][[i, j]];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-3, "{}[{i},{j}]: analytic {a} numeric {num}", store.name(id));
            checked += 1;
        }
        assert_eq!(checked, store.len());
        assert!(checked >= 20);
    }
}
