//! Loss, optimiser, recurrent dropout, the training loop, evaluation, and
//! k-fold cross-validation.

mod adam;
mod run;

pub use adam::Adam;
pub use run::{
    cross_validate, evaluate, fold_seed, model_grad_check, train, CvReport, EpochRecord, Metrics,
    Split, TrainReport,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Probability floor applied before the logarithm of the loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Inverted-dropout mask: each element is `1/(1-rate)` with probability
/// `1-rate`, else 0. Without an RNG (evaluation) the mask is all ones.
pub fn recurrent_dropout_mask<T: Scalar>(
    shape: &[usize],
    rate: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Tensor<T> {
    let n = shape.iter().product();
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = T::lit(1.0 / (1.0 - rate));
            let data = (0..n)
                .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
                .collect();
            Tensor::from_parts(shape.to_vec(), data)
        }
        _ => Tensor::ones(shape.to_vec()),
    }
}

/// Mean of `−ln max(p[n, label_n], 1e-12)` over the batch.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, probs: Var, labels: &[usize]) -> Result<Var> {
    let picked = tape.pick(probs, labels)?;
    let logs = tape.log_floor(picked, PROB_FLOOR);
    let total = tape.sum(logs);
    Ok(tape.scale(total, -1.0 / labels.len() as f64))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::error::Error;

    fn loss(probs: &[f64], c: usize, labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_f64([labels.len(), c], probs).unwrap());
        let l = cross_entropy(&mut tape, p, labels)?;
        Ok(tape.value(l).item())
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(loss(&[1.0, 0.0], 2, &[0]).unwrap(), 0.0);
        assert!((loss(&[0.25; 4], 4, &[2]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((loss(&[0.7, 0.3], 2, &[0]).unwrap() - 0.356_674_943_938_732_4).abs() < 1e-12);
        // floored, so a zero probability stays finite
        assert!((loss(&[1.0, 0.0], 2, &[1]).unwrap() - 1e12f64.ln()).abs() < 1e-9);
        assert!(matches!(loss(&[0.5, 0.5], 2, &[2]), Err(Error::Data(_))));
    }

    #[test]
    fn dropout_masks() {
        let ones: Tensor<f32> = recurrent_dropout_mask(&[3, 4], 0.0, Some(&mut ChaCha8Rng::seed_from_u64(0)));
        assert!(ones.data().iter().all(|&v| v == 1.0));
        let eval: Tensor<f32> = recurrent_dropout_mask(&[3, 4], 0.5, None);
        assert!(eval.data().iter().all(|&v| v == 1.0));
        let m: Tensor<f64> = recurrent_dropout_mask(&[100_000], 0.25, Some(&mut ChaCha8Rng::seed_from_u64(1)));
        let kept = m.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
        assert!((kept - 0.75).abs() < 0.01, "{kept}");
        assert!(m.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15));
    }
}
