use crate::autodiff::{BackwardCtx, BackwardOp, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::volume::SoftLabelVolume;

/// `1 - 2 (sum(Y y) + eps) / (sum(Y) + sum(y) + eps)` over all voxels, with
/// sums accumulated in f64. `target` may be soft.
pub fn dice_loss_value<T: Scalar>(pred: &[T], target: &[T], epsilon: f64) -> f64 {
    let (inter, total) = dice_sums(pred, target);
    1.0 - 2.0 * (inter + epsilon) / (total + epsilon)
}

fn dice_sums<T: Scalar>(pred: &[T], target: &[T]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut total = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        let (p, t) = (p.as_f64(), t.as_f64());
        inter += p * t;
        total += p + t;
    }
    (inter, total)
}

struct DiceLoss<T> {
    target: Vec<T>,
    epsilon: f64,
}

impl<T: Scalar> BackwardOp<T> for DiceLoss<T> {
    fn name(&self) -> &'static str {
        "dice_loss"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (inter, total) = dice_sums(ctx.inputs[0].data(), &self.target);
        let a = inter + self.epsilon;
        let b = total + self.epsilon;
        let up = ctx.grad_out[0].as_f64();
        // d/dy_i of -2 a / b = -2 (Y_i b - a) / b^2
        let grad = self.target.iter().map(|&t| T::of(up * -2.0 * (t.as_f64() * b - a) / (b * b))).collect();
        vec![Some(grad)]
    }
}

/// Records the Dice loss of `pred` against a fixed `target` on the tape.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &[T], epsilon: f64) -> Result<Var> {
    if g.value(pred).len() != target.len() {
        return Err(Error::LengthMismatch { expected: g.value(pred).len(), found: target.len() });
    }
    if epsilon <= 0.0 {
        return Err(Error::invalid("epsilon", "must be positive"));
    }
    let value = dice_loss_value(g.value(pred).data(), target, epsilon);
    let op = DiceLoss { target: target.to_vec(), epsilon };
    Ok(g.push_op(&[pred], Tensor::scalar(T::of(value)), Box::new(op)))
}

/// `(1 - alpha) Y + alpha y` voxelwise, evaluated in f64.
pub fn ema_values<T: Scalar>(current: &[T], prediction: &[T], alpha: f64) -> Result<Vec<T>> {
    if current.len() != prediction.len() {
        return Err(Error::LengthMismatch { expected: current.len(), found: prediction.len() });
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid("alpha", "must lie in (0, 1]"));
    }
    Ok(current
        .iter()
        .zip(prediction)
        .map(|(&y0, &y)| T::of((1.0 - alpha) * y0.as_f64() + alpha * y.as_f64()))
        .collect())
}

pub fn ema_update(current: &SoftLabelVolume, prediction: &SoftLabelVolume, alpha: f64) -> Result<SoftLabelVolume> {
    if current.shape() != prediction.shape() {
        return Err(Error::ShapeMismatch(format!("ensemble {} vs prediction {}", current.shape(), prediction.shape())));
    }
    SoftLabelVolume::new(current.shape(), ema_values(current.data(), prediction.data(), alpha)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_gradients, GradCheckConfig};
    use crate::volume::VolumeShape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-7;

    #[test]
    fn half_prediction_on_half_target() {
        let half = vec![0.5f64; 8];
        let expected = 1.0 - 2.0 * (2.0 + EPS) / (8.0 + EPS);
        assert_eq!(dice_loss_value(&half, &half, EPS), expected);
        assert!((expected - 0.5).abs() < 1e-7);
    }

    #[test]
    fn hard_identical_masks_give_near_zero() {
        let y: Vec<f64> = (0..2000).map(|i| f64::from(u8::from(i % 2 == 0))).collect();
        let loss = dice_loss_value(&y, &y, EPS);
        // Exactly -eps / (2n + eps): the smoothing term nudges a perfect
        // match just below zero.
        assert!((loss + EPS / (2000.0 + EPS)).abs() < 1e-15, "{loss}");
        assert!(loss.abs() < 1e-6);
        // Soft identical inputs obey the algebraic bound.
        let soft: Vec<f64> = (0..50).map(|i| (i as f64 + 0.5) / 50.0).collect();
        let sq: f64 = soft.iter().map(|v| v * v).sum();
        let s: f64 = soft.iter().sum();
        let bound = 1.0 - 2.0 * (sq + EPS) / (2.0 * s + EPS);
        assert!(dice_loss_value(&soft, &soft, EPS) <= bound + 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pred = Tensor::from_fn(vec![2, 3, 3, 3], |_| rng.random_range(0.01..0.99));
        let target: Vec<f64> = (0..54).map(|_| [0.0, 0.5, 1.0][rng.random_range(0..3)]).collect();
        let report = check_gradients(&[pred], &GradCheckConfig::default(), |g, v| dice_loss(g, v[0], &target, EPS)).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert_eq!(report.skipped_nonsmooth, 0);
    }

    #[test]
    fn dice_rejects_bad_inputs() {
        let mut g = Graph::<f64>::new();
        let p = g.parameter(Tensor::zeros(vec![4]));
        assert!(dice_loss(&mut g, p, &[0.0; 3], EPS).is_err());
        assert!(dice_loss(&mut g, p, &[0.0; 4], 0.0).is_err());
    }

    #[test]
    fn ema_examples() {
        assert!((ema_values(&[1.0f64], &[0.8], 0.1).unwrap()[0] - 0.98).abs() < 1e-15);
        assert_eq!(ema_values(&[0.3f64, 0.9], &[0.7, 0.2], 1.0).unwrap(), vec![0.7, 0.2]);
        assert!(ema_values(&[0.3f64], &[0.7, 0.2], 0.5).is_err());
        assert!(ema_values(&[0.3f64], &[0.7], 0.0).is_err());
        let shape = VolumeShape::new(1, 1, 2).unwrap();
        let a = SoftLabelVolume::new(shape, vec![1.0, 0.0]).unwrap();
        let b = SoftLabelVolume::new(shape, vec![0.8, 0.5]).unwrap();
        let c = ema_update(&a, &b, 0.1).unwrap();
        assert_eq!(c.data(), &[0.98f32, 0.05]);
        assert!(ema_update(&a, &SoftLabelVolume::zeros(VolumeShape::new(1, 2, 2).unwrap()), 0.1).is_err());
    }

    #[test]
    fn ema_matches_geometric_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for alpha in [0.1, 0.5, 1.0, 0.37] {
            let y0: Vec<f64> = (0..16).map(|_| rng.random()).collect();
            let y: Vec<f64> = (0..16).map(|_| rng.random()).collect();
            let mut cur = y0.clone();
            for t in 1..=20 {
                cur = ema_values(&cur, &y, alpha).unwrap();
                let keep = (1.0 - alpha).powi(t);
                for i in 0..16 {
                    let closed = keep * y0[i] + (1.0 - keep) * y[i];
                    assert!((cur[i] - closed).abs() < 1e-12);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn dice_loss_in_unit_interval(pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..64)) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let l = dice_loss_value(&p, &t, EPS);
            let total: f64 = p.iter().chain(&t).sum();
            prop_assert!(l <= 1.0);
            prop_assert!(l >= -EPS / (total + EPS) - 1e-15);
        }

        #[test]
        fn ema_stays_in_unit_interval(pairs in prop::collection::vec((0.0f32..=1.0, 0.0f32..=1.0), 1..64), alpha in 0.01f64..=1.0) {
            let (a, b): (Vec<f32>, Vec<f32>) = pairs.into_iter().unzip();
            let shape = VolumeShape::new(1, 1, a.len()).unwrap();
            let out = ema_update(&SoftLabelVolume::new(shape, a).unwrap(), &SoftLabelVolume::new(shape, b).unwrap(), alpha).unwrap();
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
