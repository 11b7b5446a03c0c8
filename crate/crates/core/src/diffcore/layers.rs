use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::graph::{Activation, Graph, Var};
use crate::diffcore::params::ParameterSet;
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};
use crate::Prng;

/// Whether a forward pass trains (batch statistics, live dropout) or infers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Declarative layer description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { units: usize },
    Conv1d { filters: usize, kernel_size: usize, dilation: usize },
    MaxPool1d { pool: usize },
    Upsample1d { factor: usize },
    BatchNorm,
    Dropout { p: f64 },
    Activation { activation: Activation },
    Flatten,
    /// Rank-2 `(batch, features)` to rank-3 `(batch, steps, channels)`.
    Unflatten { steps: usize, channels: usize },
    CropTime { len: usize },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Spec(m.to_string()));
        match *self {
            LayerSpec::Dense { units: 0 } => bad("dense units must be >= 1"),
            LayerSpec::Conv1d { filters, kernel_size, dilation } => {
                if filters == 0 || kernel_size == 0 || dilation == 0 {
                    bad("conv1d filters, kernel_size and dilation must be >= 1")
                } else {
                    Ok(())
                }
            }
            LayerSpec::MaxPool1d { pool: 0 } => bad("pool size must be >= 1"),
            LayerSpec::Upsample1d { factor: 0 } => bad("upsample factor must be >= 1"),
            LayerSpec::Dropout { p } if !(0.0..1.0).contains(&p) => bad("dropout probability must be in [0, 1)"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    He,
    Glorot,
}

#[derive(Debug, Clone)]
enum Layer {
    Dense { w: usize, b: usize },
    Conv1d { k: usize, b: usize, dilation: usize },
    MaxPool(usize),
    Upsample(usize),
    BatchNorm { gamma: usize, beta: usize, mean: usize, var: usize },
    Dropout(f64),
    Act(Activation),
    Flatten,
    Unflatten(usize, usize),
    CropTime(usize),
}

/// A chain of layers whose parameters live in an external [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct Sequential {
    layers: Vec<Layer>,
    out_shape: Vec<usize>,
}

fn uniform_tensor(shape: &[usize], limit: f64, rng: &mut Prng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-limit..limit))
}

impl Sequential {
    /// Registers parameters for `specs` under `prefix` and returns the chain.
    ///
    /// `input_shape` excludes the batch axis. Weight layers followed by a
    /// relu-family activation get He-uniform initialization, all others
    /// Glorot-uniform.
    pub fn build(
        specs: &[LayerSpec],
        input_shape: &[usize],
        params: &mut ParameterSet,
        prefix: &str,
        rng: &mut Prng,
    ) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            spec.validate()?;
            let init = specs[i + 1..]
                .iter()
                .take_while(|s| !matches!(s, LayerSpec::Dense { .. } | LayerSpec::Conv1d { .. }))
                .find_map(|s| match s {
                    LayerSpec::Activation { activation: Activation::Relu | Activation::LeakyRelu(_) } => Some(Init::He),
                    LayerSpec::Activation { .. } => Some(Init::Glorot),
                    _ => None,
                })
                .unwrap_or(Init::Glorot);
            let name = |what: &str| format!("{prefix}.{i}.{what}");
            let layer = match *spec {
                LayerSpec::Dense { units } => {
                    let [fan_in] = shape[..] else {
                        return Err(Error::Spec(format!("{prefix}: dense layer {i} needs rank-1 input, got {shape:?}")));
                    };
                    let limit = match init {
                        Init::He => (6.0 / fan_in as f64).sqrt(),
                        Init::Glorot => (6.0 / (fan_in + units) as f64).sqrt(),
                    };
                    let w = params.add(name("weight"), uniform_tensor(&[fan_in, units], limit, rng), true);
                    let b = params.add(name("bias"), Tensor::zeros(&[units]), true);
                    shape = vec![units];
                    Layer::Dense { w, b }
                }
                LayerSpec::Conv1d { filters, kernel_size, dilation } => {
                    let [steps, chans] = shape[..] else {
                        return Err(Error::Spec(format!("{prefix}: conv layer {i} needs rank-2 input, got {shape:?}")));
                    };
                    let fan_in = kernel_size * chans;
                    let fan_out = kernel_size * filters;
                    let limit = match init {
                        Init::He => (6.0 / fan_in as f64).sqrt(),
                        Init::Glorot => (6.0 / (fan_in + fan_out) as f64).sqrt(),
                    };
                    let k = params.add(name("kernel"), uniform_tensor(&[kernel_size, chans, filters], limit, rng), true);
                    let b = params.add(name("bias"), Tensor::zeros(&[filters]), true);
                    shape = vec![steps, filters];
                    Layer::Conv1d { k, b, dilation }
                }
                LayerSpec::MaxPool1d { pool } => {
                    if shape.len() != 2 || pool > shape[0] {
                        return Err(Error::Spec(format!("{prefix}: pool {pool} on {shape:?}")));
                    }
                    shape[0] /= pool;
                    Layer::MaxPool(pool)
                }
                LayerSpec::Upsample1d { factor } => {
                    if shape.len() != 2 {
                        return Err(Error::Spec(format!("{prefix}: upsample on {shape:?}")));
                    }
                    shape[0] *= factor;
                    Layer::Upsample(factor)
                }
                LayerSpec::BatchNorm => {
                    let c = *shape.last().unwrap_or(&0);
                    Layer::BatchNorm {
                        gamma: params.add(name("gamma"), Tensor::filled(&[c], 1.0), true),
                        beta: params.add(name("beta"), Tensor::zeros(&[c]), true),
                        mean: params.add(name("running_mean"), Tensor::zeros(&[c]), false),
                        var: params.add(name("running_var"), Tensor::filled(&[c], 1.0), false),
                    }
                }
                LayerSpec::Dropout { p } => Layer::Dropout(p),
                LayerSpec::Activation { activation } => Layer::Act(activation),
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    Layer::Flatten
                }
                LayerSpec::Unflatten { steps, channels } => {
                    if shape != [steps * channels] {
                        return Err(Error::Spec(format!("{prefix}: cannot unflatten {shape:?} to ({steps}, {channels})")));
                    }
                    shape = vec![steps, channels];
                    Layer::Unflatten(steps, channels)
                }
                LayerSpec::CropTime { len } => {
                    if shape.len() != 2 || len > shape[0] {
                        return Err(Error::Spec(format!("{prefix}: crop {len} on {shape:?}")));
                    }
                    shape[0] = len;
                    Layer::CropTime(len)
                }
            };
            layers.push(layer);
        }
        Ok(Self { layers, out_shape: shape })
    }

    /// Output shape without the batch axis.
    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &mut ParameterSet,
        mut x: Var,
        mode: Mode,
        rng: &mut Prng,
    ) -> Result<Var> {
        for layer in &self.layers {
            x = match *layer {
                Layer::Dense { w, b } => {
                    let (w, b) = (g.param(params, w), g.param(params, b));
                    g.dense(x, w, b)?
                }
                Layer::Conv1d { k, b, dilation } => {
                    let (k, b) = (g.param(params, k), g.param(params, b));
                    g.conv1d(x, k, b, dilation)?
                }
                Layer::MaxPool(p) => g.maxpool1d(x, p)?,
                Layer::Upsample(f) => g.upsample1d(x, f)?,
                Layer::BatchNorm { gamma, beta, mean, var } => {
                    let (gv, bv) = (g.param(params, gamma), g.param(params, beta));
                    match mode {
                        Mode::Train => {
                            let (y, stats) = g.batchnorm_train(x, gv, bv)?;
                            update_running(params, mean, var, &stats);
                            y
                        }
                        Mode::Infer => {
                            let rm = params.get(mean).value.data().to_vec();
                            let rv = params.get(var).value.data().to_vec();
                            g.batchnorm_infer(x, gv, bv, &rm, &rv)?
                        }
                    }
                }
                Layer::Dropout(p) => dropout(g, x, p, mode, rng)?,
                Layer::Act(a) => g.activation(x, a)?,
                Layer::Flatten => g.flatten(x)?,
                Layer::Unflatten(s, c) => {
                    let batch = g.value(x).batch();
                    g.reshape(x, vec![batch, s, c])?
                }
                Layer::CropTime(len) => g.crop_time(x, len)?,
            };
        }
        Ok(x)
    }
}

/// Running statistics momentum.
pub const BN_MOMENTUM: f64 = 0.9;

fn update_running(params: &mut ParameterSet, mean: usize, var: usize, stats: &crate::diffcore::graph::BatchStats) {
    let unbias = stats.count as f64 / (stats.count as f64 - 1.0).max(1.0);
    for (r, m) in params.get_mut(mean).value.data_mut().iter_mut().zip(&stats.mean) {
        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
    }
    for (r, v) in params.get_mut(var).value.data_mut().iter_mut().zip(&stats.var) {
        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v * unbias;
    }
}

/// Inverted dropout: survivors are scaled by `1/(1-p)`; identity at inference.
pub fn dropout(g: &mut Graph, x: Var, p: f64, mode: Mode, rng: &mut Prng) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Spec(format!("dropout probability {p} outside [0, 1)")));
    }
    if mode == Mode::Infer || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let mask = (0..g.value(x).len())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    g.dropout_mask(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn dropout_identity_cases() {
        let mut rng = Prng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[4, 3], |i| i as f64));
        assert_eq!(dropout(&mut g, x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert_eq!(dropout(&mut g, x, 0.7, Mode::Infer, &mut rng).unwrap(), x);
        assert!(dropout(&mut g, x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_is_unbiased_in_expectation() {
        let mut rng = Prng::seed_from_u64(7);
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(&[100_000], 2.0));
        let y = dropout(&mut g, x, 0.3, Mode::Train, &mut rng).unwrap();
        let mean = g.value(y).data().iter().sum::<f64>() / 100_000.0;
        assert!((mean - 2.0).abs() / 2.0 < 0.01, "mean {mean}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(LayerSpec::Conv1d { filters: 4, kernel_size: 0, dilation: 1 }.validate().is_err());
        assert!(LayerSpec::Conv1d { filters: 4, kernel_size: 3, dilation: 0 }.validate().is_err());
        assert!(LayerSpec::Dropout { p: 1.0 }.validate().is_err());
        assert!(LayerSpec::Dropout { p: 0.1 }.validate().is_ok());
    }

    #[test]
    fn build_tracks_shapes_and_counts() {
        let mut rng = Prng::seed_from_u64(3);
        let mut params = ParameterSet::new();
        let specs = vec![
            LayerSpec::Conv1d { filters: 8, kernel_size: 3, dilation: 1 },
            LayerSpec::Activation { activation: Activation::LeakyRelu(0.1) },
            LayerSpec::MaxPool1d { pool: 2 },
            LayerSpec::BatchNorm,
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 4 },
        ];
        let seq = Sequential::build(&specs, &[10, 6], &mut params, "t", &mut rng).unwrap();
        assert_eq!(seq.out_shape(), &[4]);
        assert_eq!(params.trainable_count(), 3 * 6 * 8 + 8 + 8 + 8 + 40 * 4 + 4);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut rng = Prng::seed_from_u64(3);
        let mut params = ParameterSet::new();
        let seq = Sequential::build(&[LayerSpec::BatchNorm], &[1], &mut params, "bn", &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        seq.forward(&mut g, &mut params, x, Mode::Train, &mut rng).unwrap();
        let mean = params.get(params.find("bn.0.running_mean").unwrap()).value.data()[0];
        let var = params.get(params.find("bn.0.running_var").unwrap()).value.data()[0];
        assert!((mean - 0.2).abs() < 1e-12);
        // unbiased batch variance is 2
        assert!((var - (0.9 + 0.2)).abs() < 1e-12);
    }
}
