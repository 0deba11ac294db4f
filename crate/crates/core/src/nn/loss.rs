use super::Real;
use crate::error::{Error, Result};

/// Mean squared error and its gradient `2 (p - t) / N` with respect to the
/// predictions. The loss is accumulated in `f64`.
pub fn mse_loss<F: Real>(predictions: &[F], targets: &[F]) -> Result<(f64, Vec<F>)> {
    if predictions.is_empty() {
        return Err(Error::Empty("mse batch"));
    }
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let n = predictions.len() as f64;
    let mut sse = 0.0;
    let grad = predictions
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let diff = p.to64() - t.to64();
            sse += diff * diff;
            F::of(2.0 * diff / n)
        })
        .collect();
    Ok((sse / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_predictions() {
        let (l, g) = mse_loss(&[1.0f64, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn single_element() {
        let (l, g) = mse_loss(&[3.0f64], &[1.0]).unwrap();
        assert_eq!(l, 4.0);
        assert_eq!(g, vec![4.0]);
    }

    #[test]
    fn empty_and_mismatched() {
        assert!(mse_loss::<f64>(&[], &[]).is_err());
        assert!(mse_loss(&[1.0f64], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn matches_two_pass_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p: Vec<f64> = (0..333).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t: Vec<f64> = (0..333).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (l, _) = mse_loss(&p, &t).unwrap();
        let diffs: Vec<f64> = p.iter().zip(&t).map(|(a, b)| a - b).collect();
        let want = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
        assert!((l - want).abs() < 1e-12);
    }
}
