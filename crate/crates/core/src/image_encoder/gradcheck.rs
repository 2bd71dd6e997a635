//! Central finite-difference check of the image tower's backward pass.

use std::fmt;

use rand::Rng as _;
use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::scalar::dot;
use crate::seed;
use crate::tensor::Tensor;

use super::layers::{backward_with_input, forward, ForwardCache};
use super::{init_params_with, InitScheme, NetworkGrads, NetworkParams, NetworkSpec};

/// Finite-difference step.
pub const STEP: f64 = 1e-4;
const WEIGHT_SAMPLES: usize = 12;
const BIAS_SAMPLES: usize = 4;
const INPUT_SAMPLES: usize = 16;
/// Below this magnitude gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Samples whose perturbation crossed a ReLU or pool-argmax boundary.
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checks: Vec<ParamCheck>,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "  {:<28} checked {:>3} skipped {:>2} max rel err {:.3e}",
                c.name, c.checked, c.skipped, c.max_rel_error
            )?;
        }
        write!(
            f,
            "  {} (max rel err {:.3e}, tolerance {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tolerance
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks [`backward_with_input`] on He-initialised parameters and a random
/// input of `input_shape`.
pub fn gradient_check(spec: &NetworkSpec, input_shape: [usize; 3], tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    gradient_check_with(spec, input_shape, tolerance, seed, backward_with_input)
}

/// Same check against an arbitrary gradient routine.
pub fn gradient_check_with<B>(
    spec: &NetworkSpec,
    input_shape: [usize; 3],
    tolerance: f64,
    seed: u64,
    backward_fn: B,
) -> Result<GradCheckReport>
where
    B: Fn(&NetworkParams<f64>, &NetworkSpec, &ForwardCache<f64>, &[f64]) -> Result<(NetworkGrads<f64>, Tensor<f64>)>,
{
    let spec = spec.with_input_shape(input_shape);
    spec.validate()?;
    let params: NetworkParams<f64> = init_params_with(&spec, InitScheme::He, seed)?;
    let mut rng = seed::rng(seed, &[seed::STREAM_GRADCHECK]);
    let n_in: usize = input_shape.iter().product();
    let image = Tensor::from_vec(&input_shape, (0..n_in).map(|_| rng.random::<f64>()).collect())?;
    let upstream: Vec<f64> = (0..spec.output_dim()).map(|_| StandardNormal.sample(&mut rng)).collect();

    let (_, cache) = forward(&params, &spec, &image)?;
    let base_pattern = cache.activation_pattern(&spec);
    let (grads, gin) = backward_fn(&params, &spec, &cache, &upstream)?;

    let probe = |p: &NetworkParams<f64>, x: &Tensor<f64>| -> Result<(f64, bool)> {
        let (out, c) = forward(p, &spec, x)?;
        Ok((dot(&upstream, &out), c.activation_pattern(&spec) == base_pattern))
    };

    let mut checks = Vec::new();
    for (b, block) in params.blocks().iter().enumerate() {
        let kind = spec.layers[block.layer].kind();
        for (part, len, samples) in [("weight", block.weight.len(), WEIGHT_SAMPLES), ("bias", block.bias.len(), BIAS_SAMPLES)] {
            let mut check = ParamCheck {
                name: format!("layer {} {} {}", block.layer, kind, part),
                checked: 0,
                skipped: 0,
                max_rel_error: 0.0,
            };
            for idx in index::sample(&mut rng, len, samples.min(len)) {
                let perturbed = |delta: f64| {
                    let mut p = params.clone();
                    let blk = &mut p.blocks_mut()[b];
                    let t = if part == "weight" { &mut blk.weight } else { &mut blk.bias };
                    t.data_mut()[idx] += delta;
                    p
                };
                let (lp, same_p) = probe(&perturbed(STEP), &image)?;
                let (lm, same_m) = probe(&perturbed(-STEP), &image)?;
                if !(same_p && same_m) {
                    check.skipped += 1;
                    continue;
                }
                let g = &grads.blocks()[b];
                let analytic = if part == "weight" { g.weight.data()[idx] } else { g.bias.data()[idx] };
                let numeric = (lp - lm) / (2.0 * STEP);
                check.max_rel_error = check.max_rel_error.max(relative_error(analytic, numeric));
                check.checked += 1;
            }
            checks.push(check);
        }
    }

    let mut input_check = ParamCheck { name: "input".into(), checked: 0, skipped: 0, max_rel_error: 0.0 };
    for idx in index::sample(&mut rng, n_in, INPUT_SAMPLES.min(n_in)) {
        let shifted = |delta: f64| {
            let mut x = image.clone();
            x.data_mut()[idx] += delta;
            x
        };
        let (lp, same_p) = probe(&params, &shifted(STEP))?;
        let (lm, same_m) = probe(&params, &shifted(-STEP))?;
        if !(same_p && same_m) {
            input_check.skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * STEP);
        input_check.max_rel_error = input_check.max_rel_error.max(relative_error(gin.data()[idx], numeric));
        input_check.checked += 1;
    }
    checks.push(input_check);

    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let any_checked = checks.iter().any(|c| c.checked > 0);
    Ok(GradCheckReport { checks, tolerance, max_rel_error, passed: any_checked && max_rel_error < tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_encoder::{backward_with_input, LayerSpec};

    /// Every layer kind, d = 4, 8×8 input, with a normalisation strength
    /// large enough that its nonlinearity matters.
    fn all_kinds() -> NetworkSpec {
        NetworkSpec {
            input_shape: [2, 8, 8],
            layers: vec![
                LayerSpec::Conv { out_channels: 4, kernel: 3, stride: 1, padding: 1, relu: true },
                LayerSpec::pool(2, 2),
                LayerSpec::Lcn { n: 3, k: 1.0, alpha: 0.5, beta: 0.75 },
                LayerSpec::Conv { out_channels: 3, kernel: 3, stride: 2, padding: 1, relu: true },
                LayerSpec::fc(6, true),
                LayerSpec::fc(4, false),
            ],
        }
    }

    #[test]
    fn every_layer_kind_passes() {
        for seed in 0..3 {
            let r = gradient_check(&all_kinds(), [2, 8, 8], 1e-4, seed).unwrap();
            assert!(r.passed, "seed {seed}:\n{r}");
            assert!(r.checks.iter().all(|c| c.checked > 0), "{r}");
        }
    }

    #[test]
    fn reference_shaped_tiny_network_passes() {
        let spec = NetworkSpec::five_conv([3, 16, 16], [4, 4, 4, 4, 4], 8, 4);
        let r = gradient_check(&spec, [3, 16, 16], 1e-4, 1).unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn linear_network_is_exact() {
        let spec = NetworkSpec {
            input_shape: [1, 8, 8],
            layers: vec![
                LayerSpec::Conv { out_channels: 3, kernel: 3, stride: 1, padding: 1, relu: false },
                LayerSpec::Conv { out_channels: 2, kernel: 3, stride: 2, padding: 0, relu: false },
                LayerSpec::fc(5, false),
                LayerSpec::fc(4, false),
            ],
        };
        let r = gradient_check(&spec, [1, 8, 8], 1e-7, 4).unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn sign_flipped_conv_gradient_fails() {
        let corrupted = |p: &NetworkParams<f64>, s: &NetworkSpec, c: &ForwardCache<f64>, u: &[f64]| {
            let (mut g, gin) = backward_with_input(p, s, c, u)?;
            g.blocks_mut()[0].weight.scale(-1.0);
            Ok((g, gin))
        };
        let r = gradient_check_with(&all_kinds(), [2, 8, 8], 1e-4, 0, corrupted).unwrap();
        assert!(!r.passed);
    }
}
