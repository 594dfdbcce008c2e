//! Lumped propensities: sums of a separable propensity over every micro-state of
//! a box.
//!
//! Each propensity is a constant times a product of one-dimensional kernels, so
//! the box sum factors into a product of one-dimensional range sums. Polynomial
//! kernels are summed in closed form with exact integer arithmetic where it fits;
//! the reciprocal (Hill-type) kernel uses the continuity-corrected integral on
//! wide ranges and the exact sum on narrow ones.

use crate::geometry::{stay_set, MacroState};
use crate::model::Reaction;

/// Ranges of at most this many points are summed term by term for kernels
/// without an exact closed form.
pub const EXACT_SUM_WIDTH: i64 = 8;

/// One-dimensional factor of a separable propensity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kernel {
    /// Constant 1 (the dimension only contributes its point count).
    Count,
    /// `C(x, k)`.
    Binomial(u32),
    /// `x^k`.
    Power(u32),
    /// `exp(r x)`.
    Exp(f64),
    /// `1 / (offset + x)`.
    Reciprocal(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DimPlan {
    pub kernel: Kernel,
    /// The factor is zero below this count (reactant availability).
    pub min: i64,
}

/// Factorization of a propensity into per-dimension kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeSumPlan {
    pub scale: f64,
    pub dims: Vec<DimPlan>,
}

impl RangeSumPlan {
    pub fn evaluate(&self, x: &[i64]) -> f64 {
        let mut rate = self.scale;
        for (plan, &xi) in self.dims.iter().zip(x) {
            rate *= if xi < plan.min { 0.0 } else { kernel_value(plan.kernel, xi) };
        }
        rate
    }

    /// Sum of the propensity over the box `[lower, upper]`.
    pub fn range_sum(&self, lower: &[i64], upper: &[i64]) -> f64 {
        let mut rate = self.scale;
        for (d, plan) in self.dims.iter().enumerate() {
            let a = lower[d].max(plan.min);
            let b = upper[d];
            if a > b {
                return 0.0;
            }
            rate *= kernel_range_sum(plan.kernel, a, b);
        }
        rate
    }
}

fn kernel_value(kernel: Kernel, x: i64) -> f64 {
    match kernel {
        Kernel::Count => 1.0,
        Kernel::Binomial(k) => binomial(x, k),
        Kernel::Power(k) => power_value(x, k),
        Kernel::Exp(r) => (r * x as f64).exp(),
        Kernel::Reciprocal(o) => 1.0 / (o + x as f64),
    }
}

fn kernel_range_sum(kernel: Kernel, a: i64, b: i64) -> f64 {
    debug_assert!(0 <= a && a <= b);
    match kernel {
        Kernel::Count => (b - a + 1) as f64,
        Kernel::Binomial(k) => binomial_range_sum(a, b, k),
        Kernel::Power(k) => power_range_sum(a, b, k),
        Kernel::Exp(r) => {
            if b - a < EXACT_SUM_WIDTH {
                (a..=b).map(|x| (r * x as f64).exp()).sum()
            } else {
                let n = (b - a + 1) as f64;
                (r * a as f64).exp() * (r * n).exp_m1() / r.exp_m1()
            }
        }
        Kernel::Reciprocal(o) => reciprocal_range_sum(a, b, o),
    }
}

/// `Σ_{x=a}^{b} 1/(offset + x)`: exact for narrow ranges, otherwise the integral
/// `∫_{a-1/2}^{b+1/2} dx/(offset + x)`.
pub fn reciprocal_range_sum(a: i64, b: i64, offset: f64) -> f64 {
    if b - a < EXACT_SUM_WIDTH {
        return (a..=b).map(|x| 1.0 / (offset + x as f64)).sum();
    }
    let mut acc = 0.0;
    let mut a = a;
    // the integral needs a positive lower limit
    while a <= b && offset + a as f64 - 0.5 <= 0.0 {
        acc += 1.0 / (offset + a as f64);
        a += 1;
    }
    if a > b {
        return acc;
    }
    acc + ((offset + b as f64 + 0.5).ln() - (offset + a as f64 - 0.5).ln())
}

/// Exact `C(n, k)` when it fits in 128 bits.
fn binomial_u128(n: i64, k: u32) -> Option<u128> {
    if n < 0 || (k as i64) > n {
        return Some(0);
    }
    let k = (k as i64).min(n - k as i64) as u128;
    let n = n as u128;
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul(n - i)? / (i + 1);
    }
    Some(acc)
}

fn binomial_f64(n: i64, k: u32) -> f64 {
    if n < 0 || (k as i64) > n {
        return 0.0;
    }
    let k = (k as i64).min(n - k as i64);
    let mut acc = 1.0f64;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// `C(x, k)` as a float (exact whenever the integer value is representable).
pub fn binomial(x: i64, k: u32) -> f64 {
    match binomial_u128(x, k) {
        Some(v) => v as f64,
        None => binomial_f64(x, k),
    }
}

/// `Σ_{x=a}^{b} C(x, k) = C(b+1, k+1) − C(a, k+1)` (hockey-stick identity);
/// zero for an empty range.
pub fn binomial_range_sum(a: i64, b: i64, k: u32) -> f64 {
    if a > b {
        return 0.0;
    }
    let a = a.max(0);
    match (binomial_u128(b + 1, k + 1), binomial_u128(a, k + 1)) {
        (Some(hi), Some(lo)) => (hi - lo) as f64,
        _ if b - a < 64 => (a..=b).map(|x| binomial_f64(x, k)).sum(),
        _ => binomial_f64(b + 1, k + 1) - binomial_f64(a, k + 1),
    }
}

fn power_value(x: i64, k: u32) -> f64 {
    match (x as i128).checked_pow(k) {
        Some(v) => v as f64,
        None => (x as f64).powi(k as i32),
    }
}

/// Stirling numbers of the second kind, `S(k, j)` for `j = 0..=k`.
fn stirling2_row(k: u32) -> Vec<u128> {
    let k = k as usize;
    let mut row = vec![0u128; k + 1];
    row[0] = 1;
    for n in 1..=k {
        let mut next = vec![0u128; k + 1];
        for j in 1..=n {
            next[j] = j as u128 * row[j] + row[j - 1];
        }
        row = next;
    }
    row
}

/// `Σ_{x=a}^{b} x^k`, through the binomial basis `x^k = Σ_j S(k,j) j! C(x,j)`.
pub fn power_range_sum(a: i64, b: i64, k: u32) -> f64 {
    if a > b {
        return 0.0;
    }
    let exact = || -> Option<u128> {
        let row = stirling2_row(k);
        let mut total: u128 = 0;
        let mut fact: u128 = 1;
        for (j, &s) in row.iter().enumerate() {
            if j > 0 {
                fact = fact.checked_mul(j as u128)?;
            }
            if s == 0 {
                continue;
            }
            let hi = binomial_u128(b + 1, j as u32 + 1)?;
            let lo = binomial_u128(a, j as u32 + 1)?;
            total = total.checked_add(s.checked_mul(fact)?.checked_mul(hi - lo)?)?;
        }
        Some(total)
    };
    match exact() {
        Some(v) => v as f64,
        None => (a..=b).map(|x| power_value(x, k)).sum(),
    }
}

/// `Σ_{x ∈ box} α_j(x)` for reaction `j`.
pub fn lumped_rate(reaction: &Reaction, boxed: &MacroState) -> f64 {
    reaction.plan().range_sum(boxed.lower(), boxed.upper())
}

/// Total propensity of the micro-states of `boxed` that leave it under the
/// reaction, computed as the full box sum minus the sum over the stay set.
pub fn exit_rate(reaction: &Reaction, boxed: &MacroState) -> f64 {
    let v = reaction.change();
    if v.iter().all(|&c| c == 0) {
        return 0.0;
    }
    let total = lumped_rate(reaction, boxed);
    let stay = stay_set(boxed, v).map_or(0.0, |s| lumped_rate(reaction, &s));
    (total - stay).max(0.0)
}
