//! Finite-difference verification of every parameter gradient of a model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::model::{Model, ModelConfig, ParamGroup};
use crate::par;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub batch: usize,
    /// Central-difference step.
    pub step: f64,
    /// Smallest step tried when a probe crosses a LeakyReLU kink.
    pub min_step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, as a multiple of |loss|.
    /// Central differences cannot resolve gradients much below
    /// `ε·|loss|/step`, so tiny gradients are compared in absolute terms.
    pub floor_scale: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                encoder_dropout: 0.0,
                ..ModelConfig::miniature()
            },
            seed: 0,
            batch: 2,
            step: 1e-5,
            min_step: 1e-8,
            tolerance: 1e-4,
            floor_scale: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupResult {
    pub group: &'static str,
    pub parameters: usize,
    pub worst_relative_error: f64,
    /// Element that produced the worst error, as `name[index]`.
    pub worst_at: String,
    /// Parameters whose step had to shrink to stay off a kink.
    pub reduced_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub loss: f64,
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups
            .iter()
            .all(|g| g.worst_relative_error < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.worst_relative_error)
            .fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

struct Problem {
    inputs: Vec<Tensor<f64>>,
    targets: Vec<Tensor<f64>>,
}

impl Problem {
    fn new(config: &ModelConfig, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [batch, config.image_channels, config.input_size, config.input_size];
        let (lo, hi) = config.output.range();
        let frame = |rng: &mut ChaCha8Rng| Tensor::from_fn(&dims, |_| rng.random_range(lo..hi));
        let inputs = (0..config.input_frames).map(|_| frame(&mut rng)).collect();
        let targets = (0..config.predict_frames).map(|_| frame(&mut rng)).collect();
        Self { inputs, targets }
    }

    /// Summed loss over every predicted pixel with batch-statistics
    /// normalization, plus the kink pattern of the evaluation. Returns the
    /// gradients too when `grads` is set.
    fn loss(&self, model: &Model<f64>, grads: bool) -> crate::Result<Evaluation> {
        let mut scratch = model.clone();
        let mut fwd = scratch.train_forward(0);
        let out = fwd.predict_sequence(&self.inputs, self.targets.len())?;
        let mut total = None;
        for (&p, t) in out.iter().zip(&self.targets) {
            let l = if model.config.output.range() == (0.0, 1.0) {
                fwd.graph.bce_sum(p, t)?
            } else {
                let m = fwd.graph.mse_mean(p, t)?;
                fwd.graph.scale(m, t.len() as f64)
            };
            total = Some(match total {
                None => l,
                Some(acc) => fwd.graph.add(acc, l)?,
            });
        }
        let total = total.expect("at least one predicted frame");
        let value = fwd.graph.value(total).data()[0];
        let grads = if grads { Some(fwd.gradients(total)?) } else { None };
        Ok(Evaluation {
            value,
            grads,
            kinks: fwd.graph.kink_pattern(),
        })
    }
}

struct Evaluation {
    value: f64,
    grads: Option<Vec<Tensor<f64>>>,
    kinks: Vec<bool>,
}

/// Central difference along one coordinate, shrinking the step while either
/// probe lands on a different side of some kink. Returns the estimate and
/// whether the step was reduced.
fn central_difference(
    problem: &Problem,
    model: &Model<f64>,
    base: &[bool],
    (pi, j): (usize, usize),
    config: &GradcheckConfig,
) -> crate::Result<(f64, bool)> {
    let origin = model.params.at(pi).value.data()[j];
    let mut m = model.clone();
    let mut h = config.step;
    loop {
        m.params.at_mut(pi).value.data_mut()[j] = origin + h;
        let plus = problem.loss(&m, false)?;
        m.params.at_mut(pi).value.data_mut()[j] = origin - h;
        let minus = problem.loss(&m, false)?;
        let estimate = (plus.value - minus.value) / (2.0 * h);
        let smooth = plus.kinks == base && minus.kinks == base;
        if smooth || h / 10.0 < config.min_step {
            return Ok((estimate, h < config.step));
        }
        h /= 10.0;
    }
}

/// Compares analytic gradients with central differences for every scalar
/// parameter of a freshly built model.
pub fn gradcheck(config: &GradcheckConfig) -> crate::Result<GradcheckReport> {
    let model = Model::<f64>::new(config.model.clone(), config.seed)
        .map_err(|e| crate::TensorError::Shape(e.to_string()))?;
    let problem = Problem::new(&model.config, config.batch, config.seed ^ 0x5eed);
    let base = problem.loss(&model, true)?;
    let grads = base.grads.as_ref().expect("requested");
    let floor = config.floor_scale * base.value.abs().max(1.0);
    let mut coords = Vec::new();
    for (pi, p) in model.params.iter().enumerate() {
        coords.extend((0..p.value.len()).map(|j| (pi, j)));
    }
    let numeric = par::map_slice(&coords, |&c| {
        central_difference(&problem, &model, &base.kinks, c, config)
    });
    let mut groups: Vec<GroupResult> = Vec::new();
    for (&(pi, j), n) in coords.iter().zip(numeric) {
        let p = model.params.at(pi);
        let (n, reduced) = n?;
        let err = relative_error(grads[pi].data()[j], n, floor);
        let name = p.group.name();
        let slot = match groups.iter().position(|g| g.group == name) {
            Some(i) => i,
            None => {
                groups.push(GroupResult {
                    group: name,
                    parameters: 0,
                    worst_relative_error: 0.0,
                    worst_at: String::new(),
                    reduced_steps: 0,
                });
                groups.len() - 1
            }
        };
        let g = &mut groups[slot];
        g.parameters += 1;
        g.reduced_steps += usize::from(reduced);
        if err >= g.worst_relative_error {
            g.worst_relative_error = err;
            g.worst_at = format!("{}[{j}]", p.name);
        }
    }
    groups.sort_by_key(|g| ParamGroup::ALL.iter().position(|a| a.name() == g.group));
    Ok(GradcheckReport {
        tolerance: config.tolerance,
        loss: base.value,
        groups,
    })
}
