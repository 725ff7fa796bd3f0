use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, Var};

const STEP: f64 = 1e-5;

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` where the error peaked.
    pub worst: (usize, usize),
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Checks the gradients of `op` with respect to every element of every input.
///
/// The op output is reduced to a scalar by a fixed random projection, so ops with
/// tensor outputs are checked in all output directions at once. Each element is
/// perturbed by `±1e-5` and the relative error is
/// `|analytic - cd| / max(|analytic|, |cd|, 1e-8)`.
pub fn grad_check<F>(op: F, inputs: &[Tensor<f64>], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let run = |values: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = op(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = run(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let projection = Tensor::<f64>::rand_uniform(tape.value(out).shape(), -1.0, 1.0, &mut rng);
    let grads = tape.backward_with(out, projection.clone())?;

    let output = |values: &[Tensor<f64>]| -> Result<Tensor<f64>> {
        let (tape, _, out) = run(values)?;
        Ok(tape.value(out).clone())
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), tolerance };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[i].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros);
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + STEP;
            let up = output(&probe)?;
            probe[i].data_mut()[j] = x0 - STEP;
            let down = output(&probe)?;
            probe[i].data_mut()[j] = x0;
            // Differencing before projecting keeps the cancellation error per element.
            let delta: f64 = up.data().iter().zip(down.data()).zip(projection.data()).map(|((u, d), w)| (u - d) * w).sum();
            let cd = delta / (2.0 * STEP);
            let a = analytic.data()[j];
            let err = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}
