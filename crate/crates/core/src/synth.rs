//! Random teacher networks with self-labelled data.
//!
//! Weights and biases are drawn uniformly from `[−a, a]` with `a = 1/√fan_in`,
//! inputs from a standard normal, and labels are the teacher's own argmax.
//! The output bias is then shifted so every logit has zero mean over the
//! samples; otherwise the positive ReLU mean puts nearly all samples in one class.
//! All values are rounded to `f32` before labelling so that a bundle written in
//! `f32` reproduces the labels exactly.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::bundle::{Bundle, DType, Nonlinearity};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::netexec::{
    argmax, bundle_from_model, forward_capture, ConvWeight, Dataset, FeatureMap, Features, InputShape, LayerSpec,
    NetworkModel,
};

pub const DEFAULT_MLP: &str = "mlp:32,64,48,10";
pub const DEFAULT_SAMPLES: usize = 1536;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Arch {
    /// Layer widths, input first. Every hidden layer is ReLU and prunable.
    Mlp(Vec<usize>),
    /// 1×14×14 input; conv(4, 3×3) → pool → conv(8, 3×3) → pool → dense 16 → dense 10.
    LenetToy,
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "lenet-toy" {
            return Ok(Arch::LenetToy);
        }
        let bad = || Error::InvalidParameter(format!("bad arch {s:?}: expected mlp:d0,d1,... or lenet-toy"));
        let dims = s.strip_prefix("mlp:").ok_or_else(bad)?;
        let dims: Vec<usize> = dims
            .split(',')
            .map(|d| d.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if dims.len() < 2 || dims.contains(&0) {
            return Err(bad());
        }
        Ok(Arch::Mlp(dims))
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::LenetToy => f.write_str("lenet-toy"),
            Arch::Mlp(d) => {
                let dims: Vec<String> = d.iter().map(usize::to_string).collect();
                write!(f, "mlp:{}", dims.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub arch: Arch,
    pub samples: usize,
    /// Held-out samples (the last ones) for accuracy measurement.
    pub verification: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(arch: Arch, samples: usize, seed: u64) -> Self {
        Self {
            arch,
            samples,
            verification: samples / 3,
            seed,
        }
    }
}

fn r32(x: f64) -> f64 {
    x as f32 as f64
}

fn uniform_vec(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let a = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    (0..len).map(|_| r32(dist.sample(rng))).collect()
}

fn dense(rng: &mut ChaCha8Rng, name: &str, n_in: usize, n_out: usize, relu: bool) -> LayerSpec {
    let w = Matrix::new(n_in, n_out, uniform_vec(rng, n_in * n_out, n_in)).expect("shape");
    let b = uniform_vec(rng, n_out, n_in);
    let nl = if relu { Nonlinearity::Relu } else { Nonlinearity::None };
    LayerSpec::dense(name, w, Some(b), nl).prunable(relu)
}

fn conv(rng: &mut ChaCha8Rng, name: &str, out_c: usize, in_c: usize, k: usize) -> LayerSpec {
    let fan_in = in_c * k * k;
    let w = ConvWeight::new(out_c, in_c, k, k, uniform_vec(rng, out_c * fan_in, fan_in)).expect("shape");
    let b = uniform_vec(rng, out_c, fan_in);
    LayerSpec::conv(name, w, Some(b), 1, 0, Nonlinearity::Relu).prunable(true)
}

/// Builds the teacher, its inputs and labels.
pub fn synthesize(cfg: &SynthConfig) -> Result<(NetworkModel, Dataset)> {
    if cfg.samples == 0 || cfg.verification >= cfg.samples {
        return Err(Error::InvalidParameter(format!(
            "need samples > verification, got {} and {}",
            cfg.samples, cfg.verification
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (model, inputs) = match &cfg.arch {
        Arch::Mlp(dims) => {
            let last = dims.len() - 2;
            let layers = dims
                .windows(2)
                .enumerate()
                .map(|(i, w)| dense(&mut rng, &format!("fc{}", i + 1), w[0], w[1], i < last))
                .collect();
            let model = NetworkModel::new(InputShape::Flat(dims[0]), layers)?;
            let x: Vec<f64> = (0..cfg.samples * dims[0])
                .map(|_| r32(rng.sample::<f64, _>(StandardNormal)))
                .collect();
            (model, Features::Flat(Matrix::new(cfg.samples, dims[0], x)?))
        }
        Arch::LenetToy => {
            let layers = vec![
                conv(&mut rng, "conv1", 4, 1, 3),
                LayerSpec::max_pool("pool1"),
                conv(&mut rng, "conv2", 8, 4, 3),
                LayerSpec::max_pool("pool2"),
                dense(&mut rng, "fc1", 32, 16, true),
                dense(&mut rng, "fc2", 16, 10, false),
            ];
            let model = NetworkModel::new(InputShape::Spatial(1, 14, 14), layers)?;
            let x: Vec<f64> = (0..cfg.samples * 196)
                .map(|_| r32(rng.sample::<f64, _>(StandardNormal)))
                .collect();
            (model, Features::Maps(FeatureMap::new(cfg.samples, 1, 14, 14, x)?))
        }
    };
    let mut model = model;
    let logits = model.forward(&inputs)?;
    let last = model.layers.last_mut().expect("non-empty model");
    let bias = last.bias.get_or_insert_with(|| vec![0.0; logits.cols()]);
    for (j, b) in bias.iter_mut().enumerate() {
        let mean = (0..logits.rows()).map(|i| logits.get(i, j)).sum::<f64>() / logits.rows() as f64;
        *b = r32(*b - mean);
    }
    let logits = model.forward(&inputs)?;
    let labels = (0..logits.rows()).map(|i| argmax(logits.row(i))).collect();
    let verification = (cfg.samples - cfg.verification..cfg.samples).collect();
    Ok((
        model,
        Dataset {
            inputs,
            labels,
            verification,
        },
    ))
}

/// [`synthesize`] plus captured activations of the pruning pool, as an `f32` bundle.
pub fn synth_bundle(cfg: &SynthConfig) -> Result<Bundle> {
    let (model, data) = synthesize(cfg)?;
    let pool = data.inputs.select_samples(&data.pruning_pool());
    let (_, caps) = forward_capture(&model, &pool)?;
    bundle_from_model(&model, &data, Some(&caps), DType::F32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{read_bundle, write_bundle};
    use crate::netexec::{evaluate_accuracy, model_from_bundle};
    use std::io::Cursor;

    #[test]
    fn arch_parsing() {
        assert_eq!("mlp:8,6,4".parse::<Arch>().unwrap(), Arch::Mlp(vec![8, 6, 4]));
        assert_eq!("lenet-toy".parse::<Arch>().unwrap(), Arch::LenetToy);
        for bad in ["mlp:", "mlp:4", "mlp:4,x", "mlp:4,0", "resnet"] {
            assert!(bad.parse::<Arch>().is_err(), "{bad}");
        }
        assert_eq!(Arch::Mlp(vec![3, 2]).to_string(), "mlp:3,2");
    }

    #[test]
    fn teacher_labels_itself() {
        let cfg = SynthConfig::new("mlp:8,6,4".parse().unwrap(), 64, 7);
        let (model, data) = synthesize(&cfg).unwrap();
        assert_eq!(model.prunable_layers(), vec![0]);
        assert_eq!(evaluate_accuracy(&model, &data.inputs, &data.labels).unwrap(), 1.0);
        assert_eq!(data.verification.len(), 21);
    }

    #[test]
    fn bundle_is_deterministic_and_roundtrips() {
        let cfg = SynthConfig::new("mlp:8,6,5,4".parse().unwrap(), 64, 7);
        let write = || {
            let mut buf = Cursor::new(Vec::new());
            write_bundle(&synth_bundle(&cfg).unwrap(), &mut buf).unwrap();
            buf.into_inner()
        };
        let a = write();
        assert_eq!(a, write());
        let back = read_bundle(Cursor::new(a)).unwrap();
        assert_eq!(back, synth_bundle(&cfg).unwrap());
        let (model, data) = model_from_bundle(&back).unwrap();
        let (orig_model, orig_data) = synthesize(&cfg).unwrap();
        assert_eq!(model, orig_model);
        assert_eq!(data, orig_data);
    }

    #[test]
    fn lenet_toy_bundle_has_capture_shapes() {
        let cfg = SynthConfig::new(Arch::LenetToy, 30, 1);
        let b = synth_bundle(&cfg).unwrap();
        let pool = 20;
        let shape = |name: &str| b.tensors[name].shape.clone();
        assert_eq!(shape("conv1.patches"), vec![pool * 16, 4 * 9]);
        assert_eq!(shape("conv2.activation"), vec![pool, 8 * 4]);
        assert_eq!(shape("fc1.activation"), vec![pool, 16]);
    }
}
