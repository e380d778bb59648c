//! Central finite-difference gradient checking in f64.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Per-input comparison of analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// `||g_num - g_ana|| / max(||g_num||, ||g_ana||)` per input (0 when both vanish).
    pub rel_err: Vec<f64>,
    pub coords_checked: Vec<usize>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares backward-pass gradients of `build` against central differences.
///
/// `build` records a scalar loss on a fresh tape from one leaf per input.
/// With `max_coords = Some(n)`, at most `n` evenly spaced coordinates of
/// each input are perturbed.
pub fn check<F>(inputs: &[Tensor<f64>], build: F, h: f64, max_coords: Option<usize>) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            tape.grad(*v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut rel_err = Vec::with_capacity(inputs.len());
    let mut coords_checked = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let n = inputs[i].numel();
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < n => (0..m).map(|j| j * n / m).collect(),
            _ => (0..n).collect(),
        };
        let (mut diff2, mut num2, mut ana2) = (0.0, 0.0, 0.0);
        for &c in &coords {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[c] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[c] = orig;
            let num = (plus - minus) / (2.0 * h);
            let ana = analytic[i][c];
            diff2 += (num - ana) * (num - ana);
            num2 += num * num;
            ana2 += ana * ana;
        }
        let scale = num2.sqrt().max(ana2.sqrt());
        rel_err.push(if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale });
        coords_checked.push(coords.len());
    }
    Ok(GradReport { rel_err, coords_checked })
}
