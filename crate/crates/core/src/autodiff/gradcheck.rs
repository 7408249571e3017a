use super::tape::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coordinate: usize,
    pub step: f64,
    /// Coordinates whose difference stencil crosses an activation kink.
    pub skipped: Vec<usize>,
    pub checked: usize,
}

fn eval(f: &dyn Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor) -> Result<(f64, Vec<u8>)> {
    let mut tape = Tape::new();
    tape.record_kinks();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    Ok((tape.scalar(out), tape.kink_signature().to_vec()))
}

/// Compares reverse-mode gradients of the scalar function `f` at `x` with
/// central differences, coordinate by coordinate. Relative error uses the
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(f: impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor, step: f64) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    let analytic = tape.backward(out)?.wrt(leaf);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coordinate: 0,
        step,
        skipped: Vec::new(),
        checked: 0,
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let (fp, kp) = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let (fm, km) = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        if kp != km {
            report.skipped.push(i);
            continue;
        }
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coordinate = i;
        }
    }
    Ok(report)
}
