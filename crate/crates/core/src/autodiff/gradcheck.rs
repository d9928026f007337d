//! Finite-difference verification of analytic gradients.

use rand::{seq::index::sample, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// A coordinate whose first or second differences at `step` and
    /// `step / 2` disagree by more than this (relative) straddles a kink and
    /// is skipped.
    pub kink_tolerance: f64,
    /// Check only this fraction of each input's coordinates (rounded up,
    /// chosen at random).
    pub sample_fraction: Option<f64>,
    /// Only inputs flagged `true` are checked; `None` checks all.
    pub check_inputs: Option<Vec<bool>>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, kink_tolerance: 1e-7, sample_fraction: None, check_inputs: None, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_nonsmooth: usize,
    /// Largest `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    /// `(input, coordinate)` of the largest error.
    pub worst: Option<(usize, usize)>,
}

/// Compares reverse-mode gradients of `f` with central differences.
///
/// The graph output is reduced to a scalar with a fixed random projection
/// (or used as is when it already has one element).
pub fn check_gradients<F>(inputs: &[Tensor<f64>], cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.parameter(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_out = g.value(out).len();
    let projection: Vec<f64> = if n_out == 1 { vec![1.0] } else { (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect() };
    g.backward_with(out, projection.clone())?;
    let analytic: Vec<Vec<f64>> =
        vars.iter().zip(inputs).map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data().iter().zip(&projection).map(|(a, b)| a * b).sum())
    };

    let f0 = eval(inputs)?;
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (j, t) in inputs.iter().enumerate() {
        if cfg.check_inputs.as_ref().is_some_and(|c| !c.get(j).copied().unwrap_or(false)) {
            continue;
        }
        let coords: Vec<usize> = match cfg.sample_fraction.map(|f| ((f * t.len() as f64).ceil() as usize).max(1)) {
            Some(m) if m < t.len() => {
                let mut c = sample(&mut rng, t.len(), m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..t.len()).collect(),
        };
        for i in coords {
            let base = t.data()[i];
            let mut at = |h: f64| -> Result<(f64, f64)> {
                work[j].data_mut()[i] = base + h;
                let plus = eval(&work)?;
                work[j].data_mut()[i] = base - h;
                let minus = eval(&work)?;
                work[j].data_mut()[i] = base;
                Ok(((plus - minus) / (2.0 * h), (plus - 2.0 * f0 + minus) / (h * h)))
            };
            let h = cfg.step;
            let (numeric, curvature) = at(h)?;
            let (half, half_curvature) = at(h / 2.0)?;
            let scale = numeric.abs().max(1.0);
            // Around a kink the central difference can look consistent while
            // the second difference blows up like 1/h.
            if (numeric - half).abs() > cfg.kink_tolerance * scale
                || h * (curvature - half_curvature).abs() > cfg.kink_tolerance * scale
            {
                report.skipped_nonsmooth += 1;
                continue;
            }
            report.checked += 1;
            let err = (analytic[j][i] - numeric).abs() / scale;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((j, i));
            }
        }
    }
    Ok(report)
}
