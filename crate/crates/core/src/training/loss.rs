use crate::error::{domain_err, shape_err, Result};
use crate::tensor::graph::BCE_CLAMP;
use crate::tensor::{Element, Tensor};

/// Binary cross-entropy in its training and reporting forms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BceValue {
    /// Mean over every pixel.
    pub mean: f64,
    /// Summed over the pixels of a frame, averaged over frames.
    pub nats_per_frame: f64,
}

/// Per-pixel BCE in nats with the prediction clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_pixel(p: f64, t: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

fn frames_of(dims: &[usize]) -> usize {
    if dims.len() > 3 {
        dims[..dims.len() - 3].iter().product()
    } else {
        1
    }
}

/// BCE of `pred` against `target`. Frames are the trailing C×H×W blocks.
pub fn bce_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<BceValue> {
    if pred.dims() != target.dims() {
        return shape_err(format!(
            "bce shapes differ: {:?} vs {:?}",
            pred.dims(),
            target.dims()
        ));
    }
    if target.data().iter().any(|&t| !(t >= T::zero() && t <= T::one())) {
        return domain_err("bce target outside [0, 1]");
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| bce_pixel(p.as_f64(), t.as_f64()))
        .sum();
    let n = pred.len().max(1) as f64;
    Ok(BceValue {
        mean: total / n,
        nats_per_frame: total / frames_of(pred.dims()) as f64,
    })
}

/// Mean squared error over all elements.
pub fn mse_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.dims() != target.dims() {
        return shape_err(format!(
            "mse shapes differ: {:?} vs {:?}",
            pred.dims(),
            target.dims()
        ));
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(total / pred.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_binary_prediction_is_free() {
        let t = Tensor::<f64>::new(&[1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let v = bce_loss(&t, &t).unwrap();
        assert!(v.mean < 1e-6 && v.nats_per_frame < 1e-5);
    }

    #[test]
    fn coin_flip_costs_ln2_per_pixel() {
        let p = Tensor::<f64>::full(&[3, 1, 64, 64], 0.5);
        let t = Tensor::from_fn(&[3, 1, 64, 64], |i| (i % 2) as f64);
        let v = bce_loss(&p, &t).unwrap();
        assert!((v.nats_per_frame - 4096.0 * 2f64.ln()).abs() < 1e-9);
        assert!((v.nats_per_frame - 2839.13).abs() < 0.01);
        assert!((v.mean - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn random_case_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Tensor::<f64>::from_fn(&[2, 1, 5, 5], |_| rng.random_range(0.01..0.99));
        let t = Tensor::<f64>::from_fn(&[2, 1, 5, 5], |_| rng.random::<f64>());
        let mut sum = 0.0;
        for (a, b) in p.data().iter().zip(t.data()) {
            sum -= b * a.ln() + (1.0 - b) * (1.0 - a).ln();
        }
        let v = bce_loss(&p, &t).unwrap();
        assert!((v.nats_per_frame - sum / 2.0).abs() < 1e-10);
        assert!((v.mean - sum / 50.0).abs() < 1e-10);
    }

    #[test]
    fn bad_target_is_a_domain_error() {
        let p = Tensor::<f64>::full(&[2], 0.5);
        let t = Tensor::new(&[2], vec![-0.1, 0.5]).unwrap();
        assert!(matches!(bce_loss(&p, &t), Err(crate::TensorError::Domain(_))));
    }

    #[test]
    fn mse_cases() {
        let a = Tensor::<f64>::from_fn(&[4, 4], |i| i as f64 * 0.1);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.5);
        assert!((mse_loss(&a, &b).unwrap() - 0.25).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = Tensor::<f64>::from_fn(&[4, 4], |_| rng.random::<f64>());
        let direct: f64 = a
            .data()
            .iter()
            .zip(c.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / 16.0;
        assert!((mse_loss(&a, &c).unwrap() - direct).abs() < 1e-12);
        assert!(mse_loss(&a, &Tensor::zeros(&[16])).is_err());
    }
}
