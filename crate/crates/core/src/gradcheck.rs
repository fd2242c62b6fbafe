//! Central finite-difference verification of tape gradients.
//!
//! The numeric side is an independent oracle: it only ever calls the
//! recorded forward (twice per element, at x ± eps) and never looks at the
//! backward rules it is checking.

use crate::error::Result;
use crate::tape::{BufId, Tape};
use crate::tensor::TensorValue;

/// Relative discrepancy with a floor: |a - n| / max(|a|, |n|, 0.01).
/// The floor turns the comparison absolute for near-zero gradients, where
/// f32 forward noise divided by 2*eps would otherwise dominate.
pub fn relative_discrepancy(analytic: f32, numeric: f32) -> f32 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(0.01)
}

/// Central-difference gradient of `f` with respect to every element of every
/// input, at the given eps. `f` must be pure: it records whatever ops it
/// needs onto the fresh tape and returns the scalar loss buffer.
pub fn numeric_gradients<F>(inputs: &[TensorValue], eps: f32, f: &F) -> Result<Vec<Vec<f32>>>
where
    F: Fn(&mut Tape, &[BufId]) -> Result<BufId>,
{
    let eval = |xs: &[TensorValue]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<BufId> =
            xs.iter().map(|t| tape.leaf(t.shape.clone(), t.data.clone())).collect();
        let loss = f(&mut tape, &ids)?;
        Ok(tape.value(loss) as f64)
    };
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0f32; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data[j] -= eps;
            let fp = eval(&plus)?;
            let fm = eval(&minus)?;
            g[j] = ((fp - fm) / (2.0 * eps as f64)) as f32;
        }
        grads.push(g);
    }
    Ok(grads)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f32,
    /// (input index, flat element index, analytic, numeric) for the worst element.
    pub worst: Option<(usize, usize, f32, f32)>,
}

/// Records `f` once, runs the tape backward, and compares every input
/// gradient against central finite differences. Returns the maximum relative
/// discrepancy over all elements of all inputs.
pub fn grad_check<F>(inputs: &[TensorValue], eps: f32, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[BufId]) -> Result<BufId>,
{
    let mut tape = Tape::new();
    let ids: Vec<BufId> =
        inputs.iter().map(|t| tape.leaf(t.shape.clone(), t.data.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f32>> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| tape.grad(id).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]))
        .collect();
    let numeric = numeric_gradients(inputs, eps, &f)?;
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None };
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let e = relative_discrepancy(analytic[i][j], numeric[i][j]);
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = Some((i, j, analytic[i][j], numeric[i][j]));
            }
        }
    }
    Ok(report)
}

/// Deterministic pseudo-random tensor for checks: values in [-0.9, 0.9].
pub fn test_tensor(shape: Vec<usize>, seed: u64) -> TensorValue {
    use rand::Rng;
    let mut rng = crate::rng::stream(seed, "gradcheck", &[]);
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-0.9..0.9)).collect();
    TensorValue { shape, data, grad: None }
}

/// Finite-difference check of the whole learner pass: two images and two
/// messages through the visual, language, and decision modules into the
/// cross-entropy loss, differentiated with respect to every trainable
/// parameter. `worst` indexes (position in trainable-name order, element).
///
/// An element passes if it agrees at any of the given step sizes. Batchnorm
/// centers activations, so some relu unit always sits within a coarse step
/// of zero and bends the secant there; a fine step walks around the bend but
/// amplifies f32 forward noise on other elements. A wrong backward rule
/// disagrees at every step size (the secant converges to the true gradient),
/// so the multi-eps accept keeps full detection power.
pub fn agent_composite_check(
    arch: &crate::agent::ArchConfig,
    seed: u64,
    step_sizes: &[f32],
) -> Result<GradCheckReport> {
    use crate::agent::Agent;
    use crate::params::TapeBinding;

    if step_sizes.is_empty() {
        return Err(crate::error::CoreError::invalid("gradcheck", "no step sizes given"));
    }
    let mut agent = Agent::init(arch.clone(), seed)?;
    let side = arch.resolution;
    let images: Vec<TensorValue> =
        (0..2).map(|i| test_tensor(vec![side, side, 3], seed.wrapping_add(i + 1))).collect();
    let last = (arch.vocab_size - 1) as u8;
    let messages: Vec<Vec<u8>> = vec![vec![0, 1.min(last)], vec![last]];
    let labels = vec![1.0, 0.0];

    let mut tape = Tape::new();
    let mut bind = TapeBinding::new();
    let probs = agent.listener_forward(&mut tape, &mut bind, &images, &messages)?;
    let loss = tape.bce_loss(probs, &labels)?;
    tape.backward(loss)?;
    let analytic = bind.gradients(&tape, &agent.params)?;

    let eval = |agent: &mut Agent| -> Result<f64> {
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new();
        let probs = agent.listener_forward(&mut tape, &mut bind, &images, &messages)?;
        let loss = tape.bce_loss(probs, &labels)?;
        Ok(tape.value(loss) as f64)
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None };
    for (pi, name) in agent.params.trainable_names().iter().enumerate() {
        for j in 0..agent.params.get(name)?.len() {
            let orig = agent.params.get(name)?.data[j];
            let mut best = f32::INFINITY;
            let mut best_numeric = 0.0f32;
            for &eps in step_sizes {
                agent.params.get_mut(name)?.data[j] = orig + eps;
                let fp = eval(&mut agent)?;
                agent.params.get_mut(name)?.data[j] = orig - eps;
                let fm = eval(&mut agent)?;
                agent.params.get_mut(name)?.data[j] = orig;
                let numeric = ((fp - fm) / (2.0 * eps as f64)) as f32;
                let e = relative_discrepancy(analytic[name][j], numeric);
                if e < best {
                    best = e;
                    best_numeric = numeric;
                }
            }
            if best > report.max_rel_error {
                report.max_rel_error = best;
                report.worst = Some((pi, j, analytic[name][j], best_numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f32 = 1e-2;
    const TOL: f32 = 1e-2;

    #[test]
    fn affine_matches_finite_differences() {
        let x = test_tensor(vec![4, 3], 1);
        let w = test_tensor(vec![3, 5], 2);
        let b = test_tensor(vec![5], 3);
        let target = vec![0.25; 20];
        let rep = grad_check(&[x, w, b], EPS, |t, ids| {
            let y = t.affine(ids[0], ids[1], ids[2])?;
            t.mse_loss(y, &target)
        })
        .unwrap();
        assert!(rep.max_rel_error < TOL, "{:?}", rep);
    }

    #[test]
    fn matmul_matches_finite_differences() {
        let a = test_tensor(vec![3, 4], 4);
        let b = test_tensor(vec![4, 2], 5);
        let target = vec![-0.5; 6];
        let rep = grad_check(&[a, b], EPS, |t, ids| {
            let y = t.matmul(ids[0], ids[1])?;
            t.mse_loss(y, &target)
        })
        .unwrap();
        assert!(rep.max_rel_error < TOL, "{:?}", rep);
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        let x = test_tensor(vec![7, 7, 2], 6);
        let k = test_tensor(vec![3, 3, 3, 2], 7);
        let target = vec![0.1; 3 * 3 * 3];
        let rep = grad_check(&[x, k], EPS, |t, ids| {
            let y = t.conv2d_valid(ids[0], ids[1], 2)?;
            t.mse_loss(y, &target)
        })
        .unwrap();
        assert!(rep.max_rel_error < TOL, "{:?}", rep);
    }

    #[test]
    fn batchnorm_train_matches_finite_differences() {
        let x = test_tensor(vec![6, 3], 8);
        let g = test_tensor(vec![3], 9);
        let b = test_tensor(vec![3], 10);
        let target = vec![0.0; 18];
        let rep = grad_check(&[x, g, b], EPS, |t, ids| {
            let (y, _, _) = t.batchnorm_train(ids[0], ids[1], ids[2], 1e-5)?;
            t.mse_loss(y, &target)
        })
        .unwrap();
        assert!(rep.max_rel_error < TOL, "{:?}", rep);
    }

    #[test]
    fn batchnorm_eval_matches_finite_differences() {
        let x = test_tensor(vec![5, 3], 11);
        let g = test_tensor(vec![3], 12);
        let b = test_tensor(vec![3], 13);
        let rm = vec![0.1, -0.2, 0.05];
        let rv = vec![0.9, 1.1, 1.0];
        let target = vec![0.0; 15];
        let rep = grad_check(&[x, g, b], EPS, move |t, ids| {
            let y = t.batchnorm_eval(ids[0], ids[1], ids[2], &rm, &rv, 1e-5)?;
            t.mse_loss(y, &target)
        })
        .unwrap();
        assert!(rep.max_rel_error < TOL, "{:?}", rep);
    }

    #[test]
    fn gru_cell_matches_finite_differences() {
        use crate::tape::{gru_cell, GruWeightIds};
        let vocab = 3;
        let hidden = 4;
        let mut inputs = vec![test_tensor(vec![2, vocab], 20), test_tensor(vec![2, hidden], 21)];
        for s in 22..31 {
            let (r, c) = match (s - 22) % 3 {
                0 => (vocab, hidden),
                1 => (hidden, hidden),
                _ => (1, hidden),
            };
            let shape = if r == 1 { vec![hidden] } else { vec![r, c] };
            inputs.push(test_tensor(shape, s));
        }
        let target = vec![0.2; 2 * hidden];
        let rep = grad_check(&inputs, EPS, |t, ids| {
            let w = GruWeightIds {
                wr: ids[2],
                ur: ids[3],
                br: ids[4],
                wz: ids[5],
                uz: ids[6],
                bz: ids[7],
                wh: ids[8],
                uh: ids[9],
                bh: ids[10],
            };
            let h2 = gru_cell(t, ids[0], ids[1], &w)?;
            t.mse_loss(h2, &target)
        })
        .unwrap();
        assert!(rep.max_rel_error < TOL, "{:?}", rep);
    }

    #[test]
    fn bce_matches_finite_differences() {
        // Probabilities strictly inside (0,1) and away from the clamp band.
        let p = TensorValue::new(vec![4], vec![0.3, 0.6, 0.45, 0.8]).unwrap();
        let labels = vec![1.0, 0.0, 1.0, 0.0];
        let rep = grad_check(&[p], 1e-3, move |t, ids| t.bce_loss(ids[0], &labels)).unwrap();
        assert!(rep.max_rel_error < TOL, "{:?}", rep);
    }

    #[test]
    fn corrupted_matmul_backward_is_detected() {
        // Analytic side from a sabotaged reverse rule; numeric oracle is
        // untouched. The checker must light up well above the pass band.
        let a = test_tensor(vec![2, 3], 40);
        let b = test_tensor(vec![3, 2], 41);
        let target = vec![0.3; 4];
        let f = |t: &mut Tape, ids: &[BufId]| -> Result<BufId> {
            let y = t.matmul(ids[0], ids[1])?;
            t.mse_loss(y, &target)
        };
        let mut tape = Tape::new();
        let ids = vec![
            tape.leaf(a.shape.clone(), a.data.clone()),
            tape.leaf(b.shape.clone(), b.data.clone()),
        ];
        tape.corrupt_matmul_vjp = true;
        let loss = f(&mut tape, &ids).unwrap();
        tape.backward(loss).unwrap();
        let numeric = numeric_gradients(&[a, b], 1e-2, &f).unwrap();
        let analytic = tape.grad(ids[0]).unwrap();
        let max_err = analytic
            .iter()
            .zip(numeric[0].iter())
            .map(|(&x, &y)| relative_discrepancy(x, y))
            .fold(0.0f32, f32::max);
        assert!(max_err > 0.1, "corruption slipped through: {}", max_err);
    }

    #[test]
    fn full_agent_forward_matches_finite_differences() {
        // The whole image+message -> loss composition at 16x16. The wider
        // band absorbs f32 accumulation noise across the deep graph.
        let arch = crate::agent::ArchConfig {
            resolution: 16,
            conv_filters: 4,
            conv_strides: vec![2, 2],
            embed_dim: 16,
            gru_hidden: 8,
            decision_hidden: 16,
            vocab_size: 3,
            max_len: 4,
            threshold: 0.95,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
        };
        let rep = agent_composite_check(&arch, 61, EPS).unwrap();
        assert!(rep.max_rel_error < 2.0 * TOL, "{:?}", rep);
    }
}
