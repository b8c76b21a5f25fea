//! Domain-adversarial alignment of EEG patch embeddings with the text
//! embedding space: a scheduled gradient-reversal layer in front of a
//! small domain classifier trained with binary cross-entropy.

use rand::seq::index::sample as index_sample;
use rand_chacha::ChaCha8Rng;

use crate::nn::{self, Bound};
use crate::tensor::{Result, Scalar, Tape, Tensor, TensorError, Var};

/// Scaling factor of the reversal: grows from 0 toward 1 as training
/// progresses, `2 / (1 + e^(-10 t / T)) - 1`.
pub fn lambda_schedule(t: u64, total: u64) -> Result<f64> {
    if total == 0 || t > total {
        return Err(TensorError::InvalidArg {
            op: "lambda_schedule",
            detail: format!("t = {t} out of range for total = {total}"),
        });
    }
    let x = 10.0 * t as f64 / total as f64;
    Ok(2.0 / (1.0 + (-x).exp()) - 1.0)
}

pub const EEG_DOMAIN: f64 = 1.0;
pub const TEXT_DOMAIN: f64 = 0.0;

/// Binary cross-entropy of the domain classifier over a mixed batch.
/// EEG embeddings pass through `gradient_reverse(·, lambda)` so the
/// encoder is trained to confuse the classifier while the classifier
/// itself minimizes the same loss.
pub fn adversarial_loss<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &Bound,
    eeg_embeddings: Var,
    text_embeddings: Var,
    lambda: f64,
) -> Result<Var> {
    let n_eeg = tape.shape(eeg_embeddings)[0];
    let n_text = tape.shape(text_embeddings)[0];
    if n_eeg == 0 || n_text == 0 {
        return Err(TensorError::InvalidArg {
            op: "adversarial_loss",
            detail: "both domains must be present in every batch".into(),
        });
    }
    let reversed = tape.gradient_reverse(eeg_embeddings, lambda)?;
    let inputs = tape.concat(&[reversed, text_embeddings], 0)?;
    let logits = classifier_logits(tape, bound, inputs)?;
    let mut labels = vec![EEG_DOMAIN; n_eeg];
    labels.extend(std::iter::repeat(TEXT_DOMAIN).take(n_text));
    tape.bce_with_logits(logits, &labels)
}

/// Two-layer MLP with a single output logit per row.
pub fn classifier_logits<S: Scalar>(tape: &mut Tape<S>, bound: &Bound, x: Var) -> Result<Var> {
    let h = nn::linear(tape, bound, "adv.fc1", x)?;
    let g = tape.gelu(h)?;
    let out = nn::linear(tape, bound, "adv.fc2", g)?;
    let n = tape.shape(out)[0];
    tape.reshape(out, &[n])
}

/// Draw `count` distinct rows of the text embedding table.
pub fn sample_text_rows<S: Scalar>(
    table: &Tensor<S>,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<S>> {
    let v = table.shape()[0];
    let d = table.shape()[1];
    if count == 0 || count > v {
        return Err(TensorError::InvalidArg {
            op: "sample_text_rows",
            detail: format!("cannot draw {count} distinct rows from a table of {v}"),
        });
    }
    let picks = index_sample(rng, v, count);
    let mut data = Vec::with_capacity(count * d);
    for i in picks {
        data.extend_from_slice(table.row(i));
    }
    Tensor::new(vec![count, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        assert_eq!(lambda_schedule(0, 100).unwrap(), 0.0);
        let at_total = lambda_schedule(100, 100).unwrap();
        assert!((at_total - 0.9999092).abs() < 1e-6, "lambda(T) = {at_total}");
        let mut prev = -1.0;
        for t in 0..=1000 {
            let l = lambda_schedule(t, 1000).unwrap();
            assert!(l > prev, "not strictly increasing at t = {t}");
            assert!((0.0..1.0).contains(&l));
            prev = l;
        }
        assert!(lambda_schedule(5, 4).is_err());
        assert!(lambda_schedule(0, 0).is_err());
    }

    #[test]
    fn uninformative_classifier_loss_is_ln2() {
        // zero weights -> logit 0 -> p = 0.5 -> BCE = ln 2
        let mut ps = crate::nn::ParamSet::<f64>::new();
        ps.insert("adv.fc1.w", Tensor::zeros(&[4, 8]));
        ps.insert("adv.fc1.b", Tensor::zeros(&[8]));
        ps.insert("adv.fc2.w", Tensor::zeros(&[8, 1]));
        ps.insert("adv.fc2.b", Tensor::zeros(&[1]));
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape, false).unwrap();
        let eeg = tape.constant(Tensor::full(&[3, 4], 0.5)).unwrap();
        let text = tape.constant(Tensor::full(&[2, 4], -0.5)).unwrap();
        let loss = adversarial_loss(&mut tape, &bound, eeg, text, 0.3).unwrap();
        let got = tape.value(loss).scalar_value().unwrap();
        assert!((got - (2.0f64).ln()).abs() < 1e-12, "loss {got}");
    }

    #[test]
    fn single_domain_batch_rejected() {
        let mut ps = crate::nn::ParamSet::<f64>::new();
        ps.insert("adv.fc1.w", Tensor::zeros(&[4, 8]));
        ps.insert("adv.fc1.b", Tensor::zeros(&[8]));
        ps.insert("adv.fc2.w", Tensor::zeros(&[8, 1]));
        ps.insert("adv.fc2.b", Tensor::zeros(&[1]));
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape, false).unwrap();
        let eeg = tape.constant(Tensor::full(&[3, 4], 0.5)).unwrap();
        let empty = tape.constant(Tensor::zeros(&[0, 4])).unwrap();
        assert!(adversarial_loss(&mut tape, &bound, eeg, empty, 0.3).is_err());
    }

    #[test]
    fn lambda_zero_trains_classifier_but_not_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = crate::nn::ParamSet::<f64>::new();
        crate::nn::init_linear(&mut ps, "adv.fc1", 4, 8, 0.2, &mut rng);
        crate::nn::init_linear(&mut ps, "adv.fc2", 8, 1, 0.2, &mut rng);
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape, true).unwrap();
        let eeg_src = tape.leaf(Tensor::randn(&[3, 4], 1.0, &mut rng), true).unwrap();
        let text = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
        let loss = adversarial_loss(&mut tape, &bound, eeg_src, text, 0.0).unwrap();
        tape.backward(loss).unwrap();
        // classifier still receives gradient
        let w = tape.grad(bound.var("adv.fc1.w")).unwrap();
        assert!(w.data().iter().any(|&v| v != 0.0));
        // encoder side receives exactly zero
        let g = tape.grad(eeg_src).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn text_rows_are_distinct_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let table = Tensor::<f64>::randn(&[10, 3], 1.0, &mut rng);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let a = sample_text_rows(&table, 4, &mut r1).unwrap();
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let b = sample_text_rows(&table, 4, &mut r2).unwrap();
        assert!(a.bit_eq(&b));
        assert!(sample_text_rows(&table, 11, &mut r1).is_err());
    }
}
