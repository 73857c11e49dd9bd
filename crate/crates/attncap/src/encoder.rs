//! Scratch CNN encoder: stages of (conv 3x3 same-padding, relu, maxpool 2x2)
//! followed by a 1x1 projection to the feature width, yielding a grid of
//! per-region annotation vectors plus their mean as a global feature.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2D, Conv2DVars};
use crate::tensor::{Tape, Tensor, Var};

/// Architecture of the encoder; the input image side is implied exactly:
/// side = grid_side * 2^(number of stages).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Output channels of each conv stage.
    pub channels: Vec<usize>,
    /// Width D of each annotation vector after the 1x1 projection.
    pub feature_dim: usize,
    /// Side g of the annotation grid; n = g*g regions.
    pub grid_side: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: vec![8, 16, 32],
            feature_dim: 128,
            grid_side: 6,
        }
    }
}

impl EncoderConfig {
    pub fn input_side(&self) -> usize {
        self.grid_side << self.channels.len()
    }

    pub fn regions(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.feature_dim == 0 || self.grid_side == 0 {
            return Err(Error::Config(
                "encoder needs at least one stage, a positive feature_dim, and a positive grid_side"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Trainable encoder parameters: one 3x3 conv per stage plus the projection.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub stages: Vec<Conv2D>,
    pub projection: Conv2D,
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub stages: Vec<Conv2DVars>,
    pub projection: Conv2DVars,
}

impl EncoderParams {
    pub fn init(config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(config.channels.len());
        let mut in_channels = 3;
        for &out_channels in &config.channels {
            stages.push(Conv2D::init(in_channels, out_channels, 3, 1, 1, rng)?);
            in_channels = out_channels;
        }
        let projection = Conv2D::init(in_channels, config.feature_dim, 1, 0, 1, rng)?;
        Ok(EncoderParams { stages, projection })
    }

    pub fn bind(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            stages: self.stages.iter().map(|s| s.bind(tape)).collect(),
            projection: self.projection.bind(tape),
        }
    }

    /// Parameters in a fixed name order (checkpointing and the optimizer).
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            out.push((format!("encoder.stage{i}.kernels"), &stage.kernels));
            out.push((format!("encoder.stage{i}.bias"), &stage.bias));
        }
        out.push(("encoder.projection.kernels".into(), &self.projection.kernels));
        out.push(("encoder.projection.bias".into(), &self.projection.bias));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter_mut().enumerate() {
            out.push((format!("encoder.stage{i}.kernels"), &mut stage.kernels));
            out.push((format!("encoder.stage{i}.bias"), &mut stage.bias));
        }
        out.push((
            "encoder.projection.kernels".into(),
            &mut self.projection.kernels,
        ));
        out.push(("encoder.projection.bias".into(), &mut self.projection.bias));
        out
    }
}

/// Encoder output: n = g*g annotation rows [n x D] and their mean [D].
#[derive(Debug, Clone, Copy)]
pub struct FeatureGrid {
    pub annotations: Var,
    pub global: Var,
    pub regions: usize,
    pub feature_dim: usize,
}

/// Run the encoder on one [3 x side x side] image already on the tape.
pub fn encode(
    config: &EncoderConfig,
    params: &EncoderVars,
    tape: &mut Tape,
    image: Var,
) -> Result<FeatureGrid> {
    let side = config.input_side();
    let shape = tape.shape(image).to_vec();
    if shape != [3, side, side] {
        return Err(Error::ShapeMismatch {
            op: "encode (expected [3, side, side] with side = grid_side * 2^stages)",
            lhs: shape,
            rhs: vec![3, side, side],
        });
    }
    let mut x = image;
    for stage in &params.stages {
        let conv = stage.forward(tape, x)?;
        let act = tape.relu(conv)?;
        x = tape.maxpool2x2(act)?;
    }
    let projected = params.projection.forward(tape, x)?;

    // [D x g x g] -> [D x n] -> [n x D]: one row per region.
    let n = config.regions();
    let d = config.feature_dim;
    let flat = tape.reshape(projected, vec![d, n])?;
    let annotations = tape.transpose(flat)?;
    let global = tape.mean_axis(annotations, 0)?;
    Ok(FeatureGrid {
        annotations,
        global,
        regions: n,
        feature_dim: d,
    })
}

/// Mean over annotation rows; the vanilla model's single-vector conditioning.
pub fn global_pool(tape: &mut Tape, grid: &FeatureGrid) -> Result<Var> {
    tape.mean_axis(grid.annotations, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradient_check;
    use rand::SeedableRng;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            channels: vec![4],
            feature_dim: 3,
            grid_side: 4,
        }
    }

    #[test]
    fn default_config_shape_arithmetic() {
        let config = EncoderConfig::default();
        assert_eq!(config.input_side(), 48);
        assert_eq!(config.regions(), 36);
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_grid() {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = EncoderParams::init(&config, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let image = tape.leaf(Tensor::zeros(vec![3, 8, 8]));
        let grid = encode(&config, &vars, &mut tape, image).unwrap();
        assert_eq!(tape.shape(grid.annotations), &[16, 3]);
        assert!(tape.value(grid.annotations).iter().all(|v| *v == 0.0));
        assert!(tape.value(grid.global).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn wrong_image_side_is_rejected_with_expected_side() {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = EncoderParams::init(&config, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let image = tape.leaf(Tensor::zeros(vec![3, 6, 6]));
        let err = encode(&config, &vars, &mut tape, image).unwrap_err();
        assert!(err.to_string().contains('8'), "{err}");
    }

    #[test]
    fn encode_is_pure_and_distinguishes_images() {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = EncoderParams::init(&config, &mut rng).unwrap();

        let image_a = Tensor::new(vec![3, 8, 8], (0..192).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let image_b = Tensor::new(vec![3, 8, 8], (0..192).map(|i| (i % 5) as f64 / 5.0).collect()).unwrap();

        let run = |image: &Tensor| -> Vec<f64> {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let img = tape.leaf(image.clone());
            let grid = encode(&config, &vars, &mut tape, img).unwrap();
            tape.value(grid.annotations).values().to_vec()
        };
        let first = run(&image_a);
        let second = run(&image_a);
        assert_eq!(first, second);
        assert_ne!(first, run(&image_b));
    }

    #[test]
    fn global_is_mean_of_annotation_rows() {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = EncoderParams::init(&config, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let image = tape.leaf(Tensor::new(
            vec![3, 8, 8],
            (0..192).map(|i| ((i * 37) % 11) as f64 / 11.0).collect(),
        ).unwrap());
        let grid = encode(&config, &vars, &mut tape, image).unwrap();
        let ann = tape.value(grid.annotations).values().to_vec();
        let global = tape.value(grid.global).values().to_vec();
        let (n, d) = (grid.regions, grid.feature_dim);
        for j in 0..d {
            let mean: f64 = (0..n).map(|i| ann[i * d + j]).sum::<f64>() / n as f64;
            assert!((global[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn global_pool_hand_examples() {
        let mut tape = Tape::new();
        // Rows [1,0] and [0,1] average to [0.5, 0.5].
        let ann = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let grid = FeatureGrid {
            annotations: ann,
            global: ann,
            regions: 2,
            feature_dim: 2,
        };
        let pooled = global_pool(&mut tape, &grid).unwrap();
        assert_eq!(tape.value(pooled).values(), &[0.5, 0.5]);

        // All rows equal v pool to v.
        let same = tape.leaf(Tensor::new(vec![3, 2], vec![4.0, -2.0, 4.0, -2.0, 4.0, -2.0]).unwrap());
        let grid2 = FeatureGrid {
            annotations: same,
            global: same,
            regions: 3,
            feature_dim: 2,
        };
        let pooled2 = global_pool(&mut tape, &grid2).unwrap();
        assert_eq!(tape.value(pooled2).values(), &[4.0, -2.0]);
    }

    #[test]
    fn global_pool_gradient_is_one_over_n() {
        let annotations = Tensor::new(vec![4, 3], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let err = gradient_check(
            |t, ann| {
                let pooled = t.mean_axis(ann, 0)?;
                t.sum_all(pooled)
            },
            &annotations,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4);

        let mut tape = Tape::new();
        let ann = tape.leaf(annotations.with_requires_grad(true));
        let pooled = tape.mean_axis(ann, 0).unwrap();
        let loss = tape.sum_all(pooled).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(ann).unwrap().iter().all(|g| (g - 0.25).abs() < 1e-15));
    }

    #[test]
    fn encode_end_to_end_gradient_check() {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = EncoderParams::init(&config, &mut rng).unwrap();
        let image = Tensor::new(
            vec![3, 8, 8],
            (0..192).map(|i| ((i * 13) % 9) as f64 / 9.0 - 0.4).collect(),
        )
        .unwrap();

        // Probe the first-stage kernels through the whole encoder.
        let cfg = config.clone();
        let p = params.clone();
        let img = image.clone();
        let err = gradient_check(
            move |t, kernels| {
                let stage = Conv2DVars {
                    kernels,
                    bias: t.constant(p.stages[0].bias.clone()),
                    pad: 1,
                    stride: 1,
                };
                let vars = EncoderVars {
                    stages: vec![stage],
                    projection: Conv2DVars {
                        kernels: t.constant(p.projection.kernels.clone().with_requires_grad(false)),
                        bias: t.constant(p.projection.bias.clone()),
                        pad: 0,
                        stride: 1,
                    },
                };
                let image = t.constant(img.clone());
                let grid = encode(&cfg, &vars, t, image)?;
                let act = t.tanh(grid.annotations)?;
                t.sum_all(act)
            },
            &params.stages[0].kernels,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "encoder gradient error {err}");
    }
}
