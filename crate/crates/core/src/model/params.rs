use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Glorot uniform on `±√(6 / (fan_in + fan_out))`.
    Glorot {
        fan_in: usize,
        fan_out: usize,
    },
    /// `N(0, 0.02)`; biases and positional encodings.
    SmallNormal,
    Ones,
}

impl Init {
    pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
        (6.0 / (fan_in + fan_out) as f64).sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Indices of one encoder layer's tensors within [`ModelParams`].
#[derive(Clone, Debug)]
pub struct LayerIndex {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub ffn_w1: usize,
    pub ffn_b1: usize,
    pub ffn_w2: usize,
    pub ffn_b2: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
}

#[derive(Clone, Debug)]
pub struct ScaleIndex {
    pub pos: usize,
    pub layers: Vec<LayerIndex>,
    pub align_w: usize,
    pub align_b: usize,
}

/// Where every learnable tensor lives in the flat parameter list.
#[derive(Clone, Debug)]
pub struct ParamIndex {
    pub input_w: usize,
    pub input_b: usize,
    pub scales: Vec<ScaleIndex>,
    pub fusion_w: usize,
    pub fusion_v: usize,
    pub head_w: usize,
    pub head_b: usize,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> usize {
        self.add(
            name,
            vec![fan_in, fan_out],
            Init::Glorot { fan_in, fan_out },
        )
    }

    fn bias(&mut self, name: String, len: usize) -> usize {
        self.add(name, vec![len], Init::SmallNormal)
    }
}

/// Enumerates every parameter of a configuration in canonical order.
pub fn layout(config: &ModelConfig) -> (Vec<ParamSpec>, ParamIndex) {
    let d = config.model_dim;
    let mut b = LayoutBuilder { specs: Vec::new() };
    let input_w = b.weight("input.weight".into(), config.feature_dim, d);
    let input_b = b.bias("input.bias".into(), d);
    let mut scales = Vec::new();
    for (s, t_s) in config.scale_lengths().into_iter().enumerate() {
        let pos = b.add(format!("scale{s}.pos"), vec![t_s, d], Init::SmallNormal);
        let layers = (0..config.layers_per_scale)
            .map(|l| {
                let p = format!("scale{s}.layer{l}");
                LayerIndex {
                    wq: b.weight(format!("{p}.wq"), d, d),
                    wk: b.weight(format!("{p}.wk"), d, d),
                    wv: b.weight(format!("{p}.wv"), d, d),
                    wo: b.weight(format!("{p}.wo"), d, d),
                    ln1_gain: b.add(format!("{p}.ln1.gain"), vec![d], Init::Ones),
                    ln1_bias: b.bias(format!("{p}.ln1.bias"), d),
                    ffn_w1: b.weight(format!("{p}.ffn.w1"), d, config.ffn_dim),
                    ffn_b1: b.bias(format!("{p}.ffn.b1"), config.ffn_dim),
                    ffn_w2: b.weight(format!("{p}.ffn.w2"), config.ffn_dim, d),
                    ffn_b2: b.bias(format!("{p}.ffn.b2"), d),
                    ln2_gain: b.add(format!("{p}.ln2.gain"), vec![d], Init::Ones),
                    ln2_bias: b.bias(format!("{p}.ln2.bias"), d),
                }
            })
            .collect();
        let align_w = b.weight(format!("scale{s}.align.weight"), d, d);
        let align_b = b.bias(format!("scale{s}.align.bias"), d);
        scales.push(ScaleIndex {
            pos,
            layers,
            align_w,
            align_b,
        });
    }
    let fusion_w = b.weight("fusion.proj".into(), d, d);
    let fusion_v = b.weight("fusion.vec".into(), d, 1);
    let head_w = b.weight("head.weight".into(), d, 1);
    let head_b = b.bias("head.bias".into(), 1);
    let index = ParamIndex {
        input_w,
        input_b,
        scales,
        fusion_w,
        fusion_v,
        head_w,
        head_b,
    };
    (b.specs, index)
}

/// All learnable tensors of a detector plus the configuration they belong to.
#[derive(Clone, Debug)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: ParamIndex,
}

/// Serialized form of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ModelParams {
    /// Deterministic initialization from `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, index) = layout(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let tensors = specs
            .iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let values: Vec<f64> = match spec.init {
                    Init::Glorot { fan_in, fan_out } => {
                        let bound = Init::glorot_bound(fan_in, fan_out);
                        let dist = Uniform::new_inclusive(-bound, bound);
                        (0..n).map(|_| dist.sample(&mut rng)).collect()
                    }
                    Init::SmallNormal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                    Init::Ones => vec![1.0; n],
                };
                Tensor::from_raw(spec.shape.clone(), values).with_requires_grad()
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            names: specs.into_iter().map(|s| s.name).collect(),
            tensors,
            index,
        })
    }

    /// Rebuilds parameters from named arrays, checking names and shapes
    /// against the configuration's canonical layout.
    pub fn from_arrays(config: &ModelConfig, arrays: Vec<NamedArray>) -> Result<Self> {
        config.validate()?;
        let (specs, index) = layout(config);
        if specs.len() != arrays.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                arrays.len()
            )));
        }
        let mut tensors = Vec::with_capacity(specs.len());
        for (spec, arr) in specs.iter().zip(arrays) {
            if spec.name != arr.name || spec.shape != arr.shape {
                return Err(Error::Config(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    spec.name, spec.shape, arr.name, arr.shape
                )));
            }
            tensors.push(Tensor::new(arr.shape, arr.values)?.with_requires_grad());
        }
        Ok(ModelParams {
            config: config.clone(),
            names: specs.into_iter().map(|s| s.name).collect(),
            tensors,
            index,
        })
    }

    pub fn to_arrays(&self) -> Vec<NamedArray> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| NamedArray {
                name: name.clone(),
                shape: t.shape().to_vec(),
                values: t.values().to_vec(),
            })
            .collect()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn index(&self) -> &ParamIndex {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Flat copy of every value, in canonical order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.values().iter().copied())
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape() && a.values() == b.values())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;

    fn tiny() -> ModelConfig {
        ModelConfig {
            window_len: 8,
            feature_dim: 4,
            model_dim: 8,
            heads: 2,
            layers_per_scale: 1,
            ffn_dim: 32,
            scale_factors: vec![1],
            activation: Activation::Gelu,
            dropout: 0.0,
        }
    }

    #[test]
    fn same_seed_gives_identical_params() {
        let a = ModelParams::init(&ModelConfig::default(), 11).unwrap();
        let b = ModelParams::init(&ModelConfig::default(), 11).unwrap();
        let c = ModelParams::init(&ModelConfig::default(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn tiny_config_param_count_matches_hand_sum() {
        // input projection 4·8 + 8; positional 8·8; one layer: 4 attention
        // matrices 8·8, ffn 8·32 + 32 + 32·8 + 8, two norms 2·(8 + 8);
        // alignment 8·8 + 8; fusion 8·8 + 8; head 8 + 1
        let layer = 4 * 64 + (8 * 32 + 32 + 32 * 8 + 8) + 2 * 16;
        let expect = (4 * 8 + 8) + 64 + layer + (64 + 8) + (64 + 8) + (8 + 1);
        assert_eq!(expect, 1097);
        let p = ModelParams::init(&tiny(), 0).unwrap();
        assert_eq!(p.count(), expect);
    }

    #[test]
    fn weights_respect_glorot_bound() {
        let config = ModelConfig::default();
        let p = ModelParams::init(&config, 5).unwrap();
        let (specs, _) = layout(&config);
        for (spec, t) in specs.iter().zip(p.tensors()) {
            if let Init::Glorot { fan_in, fan_out } = spec.init {
                let bound = Init::glorot_bound(fan_in, fan_out);
                assert!(t.values().iter().all(|v| v.abs() <= bound), "{}", spec.name);
            }
            assert!(t.requires_grad());
        }
    }

    #[test]
    fn arrays_round_trip_and_reject_mismatch() {
        let p = ModelParams::init(&tiny(), 1).unwrap();
        let back = ModelParams::from_arrays(&tiny(), p.to_arrays()).unwrap();
        assert_eq!(p, back);
        let mut other = tiny();
        other.model_dim = 16;
        assert!(ModelParams::from_arrays(&other, p.to_arrays()).is_err());
    }
}
