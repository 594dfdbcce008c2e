//! Dormand–Prince 5(4) with first-same-as-last stages. Steps are shortened to
//! land exactly on each output time, so no interpolation is involved.

use super::bdf::initial_step;
use super::sparse::CsrMatrix;
use super::{error_norm, SolverOptions, SolverStats};
use crate::error::{Error, Result};

const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const SAFETY: f64 = 0.9;

const A: [&[f64]; 6] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
];
const B: [f64; 6] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0];
const E: [f64; 7] = [
    -71.0 / 57600.0,
    0.0,
    71.0 / 16695.0,
    -71.0 / 1920.0,
    17253.0 / 339200.0,
    -22.0 / 525.0,
    1.0 / 40.0,
];

pub(crate) fn integrate(
    j: &CsrMatrix,
    y0: &[f64],
    outputs: &[f64],
    opts: &SolverOptions,
) -> Result<(Vec<Vec<f64>>, SolverStats)> {
    let n = y0.len();
    let mut stats = SolverStats::default();
    let mut out = Vec::with_capacity(outputs.len());
    let mut next_out = 0;
    while next_out < outputs.len() && outputs[next_out] <= 0.0 {
        out.push(y0.to_vec());
        next_out += 1;
    }
    let t_end = match outputs.last() {
        Some(&t) if t > 0.0 => t,
        _ => return Ok((out, stats)),
    };

    let mut y = y0.to_vec();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    j.mul_vec(&y, &mut k[0]);
    stats.matvecs += 1;
    let mut h = initial_step(j, &y, &k[0], t_end, 4, opts, &mut stats);
    let mut t = 0.0f64;
    let mut stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut err = vec![0.0; n];
    let mut rejected_last = false;

    while next_out < outputs.len() {
        let target = outputs[next_out];
        let min_step = 10.0 * f64::EPSILON * t.abs().max(f64::MIN_POSITIVE);
        if h < min_step {
            return Err(Error::StepUnderflow { t, h });
        }
        if stats.steps + stats.rejected >= opts.max_steps {
            return Err(Error::TooManySteps {
                t,
                limit: opts.max_steps,
            });
        }
        let lands = t + h >= target;
        let step = if lands { target - t } else { h };

        for s in 1..6 {
            stage.copy_from_slice(&y);
            for (m, &a) in A[s].iter().enumerate() {
                let w = step * a;
                if w != 0.0 {
                    for (x, kv) in stage.iter_mut().zip(&k[m]) {
                        *x += w * kv;
                    }
                }
            }
            j.mul_vec(&stage, &mut k[s]);
        }
        y_new.copy_from_slice(&y);
        for (m, &b) in B.iter().enumerate() {
            let w = step * b;
            if w != 0.0 {
                for (x, kv) in y_new.iter_mut().zip(&k[m]) {
                    *x += w * kv;
                }
            }
        }
        j.mul_vec(&y_new, &mut k[6]);
        stats.matvecs += 6;
        err.iter_mut().for_each(|v| *v = 0.0);
        for (m, &e) in E.iter().enumerate() {
            let w = step * e;
            if w != 0.0 {
                for (x, kv) in err.iter_mut().zip(&k[m]) {
                    *x += w * kv;
                }
            }
        }
        let norm = error_norm(&err, &y, &y_new, opts.rtol, opts.atol);
        if norm <= 1.0 {
            stats.steps += 1;
            let mut factor = if norm == 0.0 {
                MAX_FACTOR
            } else {
                MAX_FACTOR.min(SAFETY * norm.powf(-0.2))
            };
            if rejected_last {
                factor = factor.min(1.0);
            }
            rejected_last = false;
            std::mem::swap(&mut y, &mut y_new);
            k.swap(0, 6);
            if lands {
                t = target;
                out.push(y.clone());
                next_out += 1;
                // a step shortened to hit the output time says little about the next one
                h = h.max(step * factor);
            } else {
                t += step;
                h = step * factor;
            }
        } else {
            stats.rejected += 1;
            rejected_last = true;
            h = step * MIN_FACTOR.max(SAFETY * norm.powf(-0.2));
        }
    }
    Ok((out, stats))
}
