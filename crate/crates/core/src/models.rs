//! GCN encoder, cluster-specific generators and the two-headed discriminator.
//!
//! Parameters live in plain [`Matrix`] values. A training step binds a model
//! to a [`Tape`], which yields `Var` handles for the forward pass; gradients
//! come back from `Tape::backward` keyed by those handles.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::data::feature_count;
use crate::matrix::Matrix;
use crate::training::LossWeights;

pub const HIDDEN_WIDTH: usize = 32;
pub const EMBED_WIDTH: usize = 16;
pub const DISC_HIDDEN_WIDTH: usize = 16;

pub const MAGIC: &[u8; 5] = b"TMGP1";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("model file: {0}")]
    Serialization(String),
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: Var<'_>) -> Var<'_> {
        match self {
            Self::Relu => x.relu(),
            Self::Linear => x,
            Self::Sigmoid => x.sigmoid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayer {
    pub weight: Matrix,
    pub activation: Activation,
}

impl GcnLayer {
    pub fn new(weight: Matrix, activation: Activation) -> Self {
        Self { weight, activation }
    }

    /// Glorot-uniform weights in `±√(6 / (in + out))`.
    pub fn glorot(input: usize, output: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output).map(|_| rng.random_range(-limit..=limit)).collect();
        Self::new(Matrix::from_vec(input, output, data).expect("in × out"), activation)
    }

    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self::new(Matrix::zeros(input, output), activation)
    }

    pub fn input_width(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_width(&self) -> usize {
        self.weight.cols()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundLayer<'t> {
        let weight = if trainable {
            tape.param(self.weight.clone())
        } else {
            tape.constant(self.weight.clone())
        };
        BoundLayer {
            weight,
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLayer<'t> {
    pub weight: Var<'t>,
    pub activation: Activation,
}

impl<'t> BoundLayer<'t> {
    pub fn forward(&self, features: Var<'t>, norm_a: Var<'t>) -> Result<Var<'t>> {
        gcn_forward(self.weight, self.activation, features, norm_a)
    }
}

/// `φ(Â · F · W)`.
pub fn gcn_forward<'t>(weight: Var<'t>, activation: Activation, features: Var<'t>, norm_a: Var<'t>) -> Result<Var<'t>> {
    let (n, m) = norm_a.shape();
    if n != m || features.rows() != n {
        return Err(ModelError::Dimension(format!(
            "adjacency {:?} does not match features {:?}",
            norm_a.shape(),
            features.shape()
        )));
    }
    let projected = features.matmul(weight)?;
    Ok(activation.apply(norm_a.matmul(projected)?))
}

/// Every model is an ordered list of GCN layers; the order fixes the
/// serialization layout and the parameter order given to the optimizer.
pub trait Layers {
    fn layers(&self) -> Vec<&GcnLayer>;
    fn layers_mut(&mut self) -> Vec<&mut GcnLayer>;

    fn weights_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers_mut().into_iter().map(|l| &mut l.weight).collect()
    }

    fn parameter_count(&self) -> usize {
        self.layers().iter().map(|l| l.weight.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub layer1: GcnLayer,
    pub layer2: GcnLayer,
}

impl Encoder {
    pub fn init(features: usize, embed: usize, rng: &mut impl Rng) -> Self {
        Self {
            layer1: GcnLayer::glorot(features, HIDDEN_WIDTH, Activation::Relu, rng),
            layer2: GcnLayer::glorot(HIDDEN_WIDTH, embed, Activation::Linear, rng),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundEncoder<'t> {
        BoundEncoder {
            layer1: self.layer1.bind(tape, trainable),
            layer2: self.layer2.bind(tape, trainable),
        }
    }

    /// Untaped convenience forward pass.
    pub fn encode_matrix(&self, features: &Matrix, norm_a: &Matrix) -> Result<Matrix> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let z = bound.encode(tape.constant(features.clone()), tape.constant(norm_a.clone()))?;
        Ok((*z.value()).clone())
    }
}

impl Layers for Encoder {
    fn layers(&self) -> Vec<&GcnLayer> {
        vec![&self.layer1, &self.layer2]
    }
    fn layers_mut(&mut self) -> Vec<&mut GcnLayer> {
        vec![&mut self.layer1, &mut self.layer2]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundEncoder<'t> {
    pub layer1: BoundLayer<'t>,
    pub layer2: BoundLayer<'t>,
}

impl<'t> BoundEncoder<'t> {
    pub fn encode(&self, features: Var<'t>, norm_a: Var<'t>) -> Result<Var<'t>> {
        let hidden = self.layer1.forward(features, norm_a)?;
        self.layer2.forward(hidden, norm_a)
    }

    pub fn params(&self) -> Vec<Var<'t>> {
        vec![self.layer1.weight, self.layer2.weight]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub layer1: GcnLayer,
    pub layer2: GcnLayer,
}

impl Generator {
    pub fn init(embed: usize, features: usize, rng: &mut impl Rng) -> Self {
        Self {
            layer1: GcnLayer::glorot(embed, HIDDEN_WIDTH, Activation::Relu, rng),
            layer2: GcnLayer::glorot(HIDDEN_WIDTH, features, Activation::Linear, rng),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundGenerator<'t> {
        BoundGenerator {
            layer1: self.layer1.bind(tape, trainable),
            layer2: self.layer2.bind(tape, trainable),
        }
    }
}

impl Layers for Generator {
    fn layers(&self) -> Vec<&GcnLayer> {
        vec![&self.layer1, &self.layer2]
    }
    fn layers_mut(&mut self) -> Vec<&mut GcnLayer> {
        vec![&mut self.layer1, &mut self.layer2]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundGenerator<'t> {
    pub layer1: BoundLayer<'t>,
    pub layer2: BoundLayer<'t>,
}

impl<'t> BoundGenerator<'t> {
    pub fn generate(&self, embeddings: Var<'t>, norm_a: Var<'t>) -> Result<Var<'t>> {
        let hidden = self.layer1.forward(embeddings, norm_a)?;
        self.layer2.forward(hidden, norm_a)
    }

    pub fn params(&self) -> Vec<Var<'t>> {
        vec![self.layer1.weight, self.layer2.weight]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub layer1: GcnLayer,
    pub layer2: GcnLayer,
    pub critic: GcnLayer,
    pub classifier: GcnLayer,
}

impl Discriminator {
    pub fn init(features: usize, rng: &mut impl Rng) -> Self {
        Self {
            layer1: GcnLayer::glorot(features, HIDDEN_WIDTH, Activation::Relu, rng),
            layer2: GcnLayer::glorot(HIDDEN_WIDTH, DISC_HIDDEN_WIDTH, Activation::Relu, rng),
            critic: GcnLayer::glorot(DISC_HIDDEN_WIDTH, 1, Activation::Linear, rng),
            classifier: GcnLayer::glorot(DISC_HIDDEN_WIDTH, 1, Activation::Sigmoid, rng),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundDiscriminator<'t> {
        BoundDiscriminator {
            layer1: self.layer1.bind(tape, trainable),
            layer2: self.layer2.bind(tape, trainable),
            critic: self.critic.bind(tape, trainable),
            classifier: self.classifier.bind(tape, trainable),
        }
    }
}

impl Layers for Discriminator {
    fn layers(&self) -> Vec<&GcnLayer> {
        vec![&self.layer1, &self.layer2, &self.critic, &self.classifier]
    }
    fn layers_mut(&mut self) -> Vec<&mut GcnLayer> {
        vec![&mut self.layer1, &mut self.layer2, &mut self.critic, &mut self.classifier]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundDiscriminator<'t> {
    pub layer1: BoundLayer<'t>,
    pub layer2: BoundLayer<'t>,
    pub critic: BoundLayer<'t>,
    pub classifier: BoundLayer<'t>,
}

impl<'t> BoundDiscriminator<'t> {
    fn trunk(&self, features: Var<'t>, norm_a: Var<'t>) -> Result<Var<'t>> {
        let h = self.layer1.forward(features, norm_a)?;
        self.layer2.forward(h, norm_a)
    }

    /// Returns `(critic scores, real-domain probabilities)`, both `n × 1`.
    pub fn discriminate(&self, features: Var<'t>, norm_a: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let h = self.trunk(features, norm_a)?;
        Ok((self.critic.forward(h, norm_a)?, self.classifier.forward(h, norm_a)?))
    }

    pub fn critic_scores(&self, features: Var<'t>, norm_a: Var<'t>) -> Result<Var<'t>> {
        let h = self.trunk(features, norm_a)?;
        self.critic.forward(h, norm_a)
    }

    pub fn params(&self) -> Vec<Var<'t>> {
        vec![
            self.layer1.weight,
            self.layer2.weight,
            self.critic.weight,
            self.classifier.weight,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub rois: usize,
    pub views: usize,
    pub clusters: usize,
    pub embed: usize,
}

impl ModelDims {
    pub fn new(rois: usize, views: usize, clusters: usize) -> Self {
        Self {
            rois,
            views,
            clusters,
            embed: EMBED_WIDTH,
        }
    }

    pub fn features(&self) -> usize {
        feature_count(self.rois)
    }

    pub fn targets(&self) -> usize {
        self.views.saturating_sub(1)
    }

    fn validate(&self) -> Result<()> {
        if self.rois < 2 || self.views < 2 || self.clusters < 1 || self.embed < 1 {
            return Err(ModelError::Dimension(format!(
                "need rois >= 2, views >= 2, clusters >= 1, embed >= 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// All `c × k + 2` networks of one trained model plus its training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub dims: ModelDims,
    pub encoder: Encoder,
    /// `generators[cluster][target]`.
    pub generators: Vec<Vec<Generator>>,
    pub discriminator: Discriminator,
    /// Position of the source view among the dataset's views.
    pub source_view: usize,
    pub weights: LossWeights,
    pub seed: u64,
}

impl ModelBundle {
    /// Glorot-initialized bundle, deterministic in `seed`.
    pub fn init(dims: ModelDims, source_view: usize, weights: LossWeights, seed: u64) -> Result<Self> {
        dims.validate()?;
        if source_view >= dims.views {
            return Err(ModelError::Dimension(format!(
                "source view {source_view} out of range for {} views",
                dims.views
            )));
        }
        let f = dims.features();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::init(f, dims.embed, &mut rng);
        let generators = (0..dims.clusters)
            .map(|_| (0..dims.targets()).map(|_| Generator::init(dims.embed, f, &mut rng)).collect())
            .collect();
        let discriminator = Discriminator::init(f, &mut rng);
        Ok(Self {
            dims,
            encoder,
            generators,
            discriminator,
            source_view,
            weights,
            seed,
        })
    }

    /// Dataset view positions predicted by the generators, in generator order.
    pub fn target_views(&self) -> Vec<usize> {
        (0..self.dims.views).filter(|&p| p != self.source_view).collect()
    }

    fn layers(&self) -> Vec<&GcnLayer> {
        let mut out = self.encoder.layers();
        for row in &self.generators {
            for g in row {
                out.extend(g.layers());
            }
        }
        out.extend(self.discriminator.layers());
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut GcnLayer> {
        let mut out = self.encoder.layers_mut();
        for row in &mut self.generators {
            for g in row {
                out.extend(g.layers_mut());
            }
        }
        out.extend(self.discriminator.layers_mut());
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        for d in [self.dims.rois, self.dims.views, self.dims.clusters, self.dims.embed] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for layer in self.layers() {
            for x in layer.weight.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.source_view as u32).to_le_bytes());
        for w in self.weights.to_array() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = ByteReader { bytes, pos: 0 };
        if reader.take(5)? != MAGIC {
            return Err(ModelError::Serialization("bad magic bytes".into()));
        }
        let version = reader.take(1)?[0];
        if version != FORMAT_VERSION {
            return Err(ModelError::Serialization(format!("unsupported format version {version}")));
        }
        let mut dims_raw = [0usize; 4];
        for d in &mut dims_raw {
            *d = reader.u32()? as usize;
        }
        let dims = ModelDims {
            rois: dims_raw[0],
            views: dims_raw[1],
            clusters: dims_raw[2],
            embed: dims_raw[3],
        };
        dims.validate().map_err(|e| ModelError::Serialization(e.to_string()))?;

        let mut bundle = Self::init(dims, 0, LossWeights::default(), 0)
            .map_err(|e| ModelError::Serialization(e.to_string()))?;
        let params: usize = bundle.layers().iter().map(|l| l.weight.len()).sum();
        let expected = 6 + 16 + 8 * params + 8 + 4 + 8 * LossWeights::FIELD_COUNT;
        if bytes.len() != expected {
            return Err(ModelError::Serialization(format!(
                "header dims {dims:?} need {expected} bytes, file has {}",
                bytes.len()
            )));
        }
        for layer in bundle.layers_mut() {
            for x in layer.weight.as_mut_slice() {
                *x = reader.f64()?;
            }
        }
        bundle.seed = reader.u64()?;
        bundle.source_view = reader.u32()? as usize;
        if bundle.source_view >= dims.views {
            return Err(ModelError::Serialization(format!(
                "source view {} out of range",
                bundle.source_view
            )));
        }
        let mut w = [0.0; LossWeights::FIELD_COUNT];
        for x in &mut w {
            *x = reader.f64()?;
        }
        bundle.weights = LossWeights::from_array(w);
        Ok(bundle)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| ModelError::Serialization(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    fs::write(path, bundle.to_bytes()).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ModelBundle::from_bytes(&bytes)
}
