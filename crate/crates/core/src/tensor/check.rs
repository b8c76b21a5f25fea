//! Central-difference gradient oracle. Always runs in `f64`: single
//! precision is too coarse for a step of 1e-5.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, TensorError, Var};

const STEP: f64 = 1e-5;

/// Compare analytic gradients of a scalar-valued graph against central
/// finite differences over `n_coords` sampled parameter coordinates.
///
/// `f` must rebuild the same graph from the leaves it is handed; it is
/// evaluated repeatedly at perturbed parameter values. Returns the maximum
/// relative error `|analytic - cd| / max(|analytic|, |cd|, 1e-8)`.
/// Non-deterministic functions are rejected by a repeated-evaluation probe.
pub fn finite_diff_check<F>(
    f: &F,
    params: &[Tensor<f64>],
    n_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> =
            values.iter().map(|t| tape.leaf(t.clone(), false)).collect::<Result<_>>()?;
        let out = f(&mut tape, &vars)?;
        tape.value(out).scalar_value()
    };

    let base = eval(params)?;
    if eval(params)?.to_bits() != base.to_bits() {
        return Err(TensorError::NonDeterministic);
    }

    // Analytic gradients in one backward pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> =
        params.iter().map(|t| tape.leaf(t.clone(), true)).collect::<Result<_>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let total: usize = params.iter().map(Tensor::numel).sum();
    if total == 0 {
        return Err(TensorError::InvalidArg {
            op: "finite_diff_check",
            detail: "no parameter coordinates".into(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for _ in 0..n_coords {
        let mut flat = rng.gen_range(0..total);
        let mut pi = 0;
        while flat >= params[pi].numel() {
            flat -= params[pi].numel();
            pi += 1;
        }

        let mut plus = params.to_vec();
        plus[pi].data_mut()[flat] += STEP;
        let mut minus = params.to_vec();
        minus[pi].data_mut()[flat] -= STEP;
        let cd = (eval(&plus)? - eval(&minus)?) / (2.0 * STEP);

        let an = analytic[pi].data()[flat];
        let rel = (an - cd).abs() / an.abs().max(cd.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_exactly() {
        // f(x) = sum(x*x): analytic 2x, cd 2x
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let err = finite_diff_check(
            &|tape: &mut Tape<f64>, vs: &[Var]| {
                let sq = tape.mul(vs[0], vs[0])?;
                tape.sum(sq)
            },
            &[x],
            8,
            7,
        )
        .unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn every_primitive_passes_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let randn = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::<f64>::randn(shape, 0.8, rng);

        // matmul (all four transpose combinations reached via composition)
        let a = randn(&[3, 4], &mut rng);
        let b = randn(&[4, 5], &mut rng);
        let err = finite_diff_check(
            &|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.matmul(v[0], v[1])?;
                let z = t.matmul_t(y, v[1], false, true)?; // [3,4]
                let w = t.matmul_t(v[0], z, true, false)?; // [4,4]
                t.sum(w)
            },
            &[a, b],
            120,
            1,
        )
        .unwrap();
        assert!(err < 1e-4, "matmul err = {err}");

        // add (broadcast) / sub / mul / scale
        let x = randn(&[4, 3], &mut rng);
        let bias = randn(&[3], &mut rng);
        let err = finite_diff_check(
            &|t: &mut Tape<f64>, v: &[Var]| {
                let s = t.add(v[0], v[1])?;
                let d = t.sub(s, v[0])?;
                let m = t.mul(d, s)?;
                let sc = t.scale(m, -1.7)?;
                t.mean(sc)
            },
            &[x, bias],
            120,
            2,
        )
        .unwrap();
        assert!(err < 1e-4, "elementwise err = {err}");

        // conv1d
        let x = randn(&[2, 3, 17], &mut rng);
        let w = randn(&[4, 3, 5], &mut rng);
        let bias = randn(&[4], &mut rng);
        let err = finite_diff_check(
            &|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.conv1d(v[0], v[1], v[2], 2, 3)?;
                let g = t.gelu(y)?;
                t.mean(g)
            },
            &[x, w, bias],
            150,
            3,
        )
        .unwrap();
        assert!(err < 1e-4, "conv1d err = {err}");

        // layer_norm
        let x = randn(&[5, 8], &mut rng);
        let gamma = randn(&[8], &mut rng);
        let beta = randn(&[8], &mut rng);
        let err = finite_diff_check(
            &|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                let sq = t.mul(y, y)?;
                t.mean(sq)
            },
            &[x, gamma, beta],
            150,
            4,
        )
        .unwrap();
        assert!(err < 1e-4, "layer_norm err = {err}");

        // masked_softmax over a partially masked matrix
        let scores = randn(&[4, 6], &mut rng);
        let err = finite_diff_check(
            &|t: &mut Tape<f64>, v: &[Var]| {
                let mask = t.constant(Tensor::new(
                    vec![4, 6],
                    vec![
                        1., 1., 1., 0., 0., 0., //
                        1., 1., 1., 1., 0., 0., //
                        1., 1., 1., 1., 1., 0., //
                        1., 1., 1., 1., 1., 1.,
                    ],
                )?)?;
                let y = t.masked_softmax(v[0], mask)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            },
            &[scores],
            100,
            5,
        )
        .unwrap();
        assert!(err < 1e-4, "masked_softmax err = {err}");

        // embedding_lookup + l2_normalize
        let table = randn(&[7, 5], &mut rng);
        let weights = randn(&[4, 5], &mut rng);
        let err = finite_diff_check(
            &|t: &mut Tape<f64>, v: &[Var]| {
                let rows = t.embedding(v[0], &[2, 5, 2, 0])?;
                let n = t.l2_normalize(rows)?;
                let w = t.constant(weights.clone())?;
                let wn = t.mul(n, w)?;
                let sq = t.mul(wn, wn)?;
                let s = t.sum(sq)?;
                let e = t.embedding(v[0], &[1])?;
                let es = t.sum(e)?;
                t.add(s, es)
            },
            &[table],
            100,
            6,
        )
        .unwrap();
        assert!(err < 1e-4, "embedding/l2 err = {err}");

        // cross_entropy_masked
        let logits = randn(&[5, 9], &mut rng);
        let err = finite_diff_check(
            &|t: &mut Tape<f64>, v: &[Var]| {
                t.cross_entropy_masked(v[0], &[Some(1), None, Some(8), Some(0), None])
            },
            &[logits],
            100,
            7,
        )
        .unwrap();
        assert!(err < 1e-4, "cross_entropy err = {err}");

        // concat / slice / reshape
        let p = randn(&[2, 3], &mut rng);
        let q = randn(&[2, 4], &mut rng);
        let err = finite_diff_check(
            &|t: &mut Tape<f64>, v: &[Var]| {
                let c = t.concat(&[v[0], v[1]], 1)?;
                let s = t.slice(c, 1, 1, 5)?;
                let r = t.reshape(s, &[5, 2])?;
                let m = t.mul(r, r)?;
                t.mean(m)
            },
            &[p, q],
            100,
            8,
        )
        .unwrap();
        assert!(err < 1e-4, "concat/slice/reshape err = {err}");

        // bce_with_logits; gradient_reverse composed twice restores true
        // calculus, so the pair is finite-difference checkable
        let z = randn(&[6], &mut rng);
        let err = finite_diff_check(
            &|t: &mut Tape<f64>, v: &[Var]| {
                let r = t.gradient_reverse(v[0], 1.0)?;
                let r = t.gradient_reverse(r, 1.0)?;
                t.bce_with_logits(r, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0])
            },
            &[z],
            60,
            9,
        )
        .unwrap();
        assert!(err < 1e-4, "bce/grl err = {err}");
    }

    #[test]
    fn gradient_reverse_scales_true_gradient_by_minus_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let z = Tensor::<f64>::randn(&[5], 0.9, &mut rng);
        let labels = [1.0, 0.0, 0.0, 1.0, 1.0];
        let lambda = 0.6;

        let grad_of = |reversed: bool| {
            let mut tape = Tape::<f64>::new();
            let v = tape.leaf(z.clone(), true).unwrap();
            let x = if reversed { tape.gradient_reverse(v, lambda).unwrap() } else { v };
            let loss = tape.bce_with_logits(x, &labels).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(v).unwrap().clone()
        };

        let plain = grad_of(false);
        let reversed = grad_of(true);
        for (p, r) in plain.data().iter().zip(reversed.data()) {
            assert!((r - (-lambda) * p).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_parameters_on_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::<f64>::randn(&[6, 12], 1.0, &mut rng);
        let gamma = Tensor::<f64>::randn(&[12], 0.5, &mut rng);
        let beta = Tensor::<f64>::randn(&[12], 0.5, &mut rng);
        let err = finite_diff_check(
            &|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                let g = t.gelu(y)?;
                t.mean(g)
            },
            &[x, gamma, beta],
            150,
            22,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }
}
