//! Central finite-difference gradient verification.
//!
//! The check only ever evaluates the function forward, so it stays
//! independent of the backward implementation it verifies. Run it in f64:
//! finite differences are meaningless in f32.

use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckOpts {
    /// Central-difference step.
    pub eps: f64,
    /// Skip coordinates with |x| < eps: for kinked ops (abs, relu) the
    /// two-sided difference straddles the nondifferentiable point.
    pub kink_filter: bool,
    /// Check at most this many coordinates, chosen deterministically from
    /// the seed. `None` checks every coordinate.
    pub probe: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        GradCheckOpts {
            eps: 1e-3,
            kink_filter: true,
            probe: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coord: Option<usize>,
    pub checked: usize,
    pub skipped: usize,
}

/// Compare the analytic gradient of a scalar function against central
/// differences. `f(x, need_grad)` returns the value and, when asked, the
/// gradient vector (same length as `x`).
pub fn grad_check<F>(f: F, x0: &[f64], opts: &GradCheckOpts) -> Result<GradCheckReport>
where
    F: Fn(&[f64], bool) -> Result<(f64, Option<Vec<f64>>)>,
{
    let (_, grad) = f(x0, true)?;
    let grad = grad.expect("grad_check closure must return a gradient when asked");
    assert_eq!(
        grad.len(),
        x0.len(),
        "analytic gradient length {} != input length {}",
        grad.len(),
        x0.len()
    );

    let coords: Vec<usize> = match opts.probe {
        Some(k) if k < x0.len() => {
            use rand::prelude::*;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
            let mut all: Vec<usize> = (0..x0.len()).collect();
            all.shuffle(&mut rng);
            all.truncate(k);
            all.sort_unstable();
            all
        }
        _ => (0..x0.len()).collect(),
    };

    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut x = x0.to_vec();
    for &i in &coords {
        if opts.kink_filter && x0[i].abs() < opts.eps {
            skipped += 1;
            continue;
        }
        x[i] = x0[i] + opts.eps;
        let (fp, _) = f(&x, false)?;
        x[i] = x0[i] - opts.eps;
        let (fm, _) = f(&x, false)?;
        x[i] = x0[i];
        let numeric = (fp - fm) / (2.0 * opts.eps);
        let analytic = grad[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst = Some(i);
        }
        checked += 1;
    }

    Ok(GradCheckReport {
        max_rel_err,
        worst_coord: worst,
        checked,
        skipped,
    })
}
