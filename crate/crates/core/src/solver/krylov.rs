//! Restarted GMRES with an ILU(0) right preconditioner for `(I − cJ) x = b`.
//!
//! Used by the BDF integrator when a direct factorization would fill in too
//! much, typically on grids with three or more lumped species. The residual is
//! measured in the integrator's error weights so the solve is as accurate as
//! the local error test needs.

use rayon::prelude::*;

use super::sparse::CsrMatrix;

const PAR_ROWS: usize = 20_000;

const RESTART: usize = 40;
const MAX_RESTARTS: usize = 10;
/// Weighted residual target, in units of the local error tolerance.
const TOLERANCE: f64 = 1e-3;

#[derive(Debug)]
pub struct IluGmres {
    n: usize,
    /// Pattern of `A = I − cJ`: `J`'s pattern plus the diagonal, sorted rows.
    indptr: Vec<usize>,
    indices: Vec<usize>,
    /// Position of the diagonal inside each row.
    diag_pos: Vec<usize>,
    jvals: Vec<f64>,
    /// `A` values for the current shift.
    avals: Vec<f64>,
    /// ILU(0) factors stored in `A`'s pattern (unit lower part, upper part with diagonal).
    ilu: Vec<f64>,
    shift: Option<f64>,
}

impl IluGmres {
    pub fn new(j: &CsrMatrix) -> Self {
        let n = j.n();
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::with_capacity(j.nnz() + n);
        let mut jvals = Vec::with_capacity(j.nnz() + n);
        let mut diag_pos = Vec::with_capacity(n);
        indptr.push(0);
        for i in 0..n {
            let mut row: Vec<(usize, f64)> = j.row(i).collect();
            if !row.iter().any(|e| e.0 == i) {
                row.push((i, 0.0));
                row.sort_unstable_by_key(|e| e.0);
            }
            for (c, v) in row {
                if c == i {
                    diag_pos.push(indices.len());
                }
                indices.push(c);
                jvals.push(v);
            }
            indptr.push(indices.len());
        }
        let len = indices.len();
        Self {
            n,
            indptr,
            indices,
            diag_pos,
            jvals,
            avals: vec![0.0; len],
            ilu: vec![0.0; len],
            shift: None,
        }
    }

    pub fn shift(&self) -> Option<f64> {
        self.shift
    }

    /// Forms `I − cJ` and its incomplete factorization.
    pub fn factor(&mut self, c: f64) {
        for (a, &v) in self.avals.iter_mut().zip(&self.jvals) {
            *a = -c * v;
        }
        for &d in &self.diag_pos {
            self.avals[d] += 1.0;
        }
        self.ilu.copy_from_slice(&self.avals);
        // IKJ variant restricted to the pattern
        let mut where_in_row = vec![usize::MAX; self.n];
        for i in 0..self.n {
            let (start, end) = (self.indptr[i], self.indptr[i + 1]);
            for p in start..end {
                where_in_row[self.indices[p]] = p;
            }
            for p in start..self.diag_pos[i] {
                let k = self.indices[p];
                let lik = self.ilu[p] / self.ilu[self.diag_pos[k]];
                self.ilu[p] = lik;
                for q in self.diag_pos[k] + 1..self.indptr[k + 1] {
                    let w = where_in_row[self.indices[q]];
                    if w != usize::MAX {
                        self.ilu[w] -= lik * self.ilu[q];
                    }
                }
            }
            for p in start..end {
                where_in_row[self.indices[p]] = usize::MAX;
            }
        }
        self.shift = Some(c);
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let row = |i: usize| -> f64 {
            let mut acc = 0.0;
            for p in self.indptr[i]..self.indptr[i + 1] {
                acc += self.avals[p] * x[self.indices[p]];
            }
            acc
        };
        if self.n >= PAR_ROWS {
            y.par_iter_mut().enumerate().for_each(|(i, yi)| *yi = row(i));
        } else {
            for (i, yi) in y.iter_mut().enumerate() {
                *yi = row(i);
            }
        }
    }

    /// `x ← (LU)⁻¹ x`.
    fn precondition(&self, x: &mut [f64]) {
        for i in 0..self.n {
            let mut acc = x[i];
            for p in self.indptr[i]..self.diag_pos[i] {
                acc -= self.ilu[p] * x[self.indices[p]];
            }
            x[i] = acc;
        }
        for i in (0..self.n).rev() {
            let mut acc = x[i];
            for p in self.diag_pos[i] + 1..self.indptr[i + 1] {
                acc -= self.ilu[p] * x[self.indices[p]];
            }
            x[i] = acc / self.ilu[self.diag_pos[i]];
        }
    }

    /// Solves `(I − cJ) x = b` starting from the contents of `x`, until the
    /// residual scaled by `weights` has 2-norm below the tolerance divided by √n.
    /// Returns the number of inner iterations, or `None` without convergence.
    pub fn solve(&self, b: &[f64], x: &mut [f64], weights: &[f64]) -> Option<usize> {
        let n = self.n;
        let target = TOLERANCE;
        let mut r = vec![0.0; n];
        let mut w = vec![0.0; n];
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(RESTART + 1);
        let mut iterations = 0;
        let wnorm = |v: &[f64]| -> f64 { (v.iter().zip(weights).map(|(a, s)| (a * s) * (a * s)).sum::<f64>() / n as f64).sqrt() };

        for _ in 0..MAX_RESTARTS {
            self.apply(x, &mut r);
            for ((ri, bi), s) in r.iter_mut().zip(b).zip(weights) {
                *ri = (bi - *ri) * s;
            }
            let beta = (r.iter().map(|v| v * v).sum::<f64>()).sqrt();
            if beta / (n as f64).sqrt() <= target {
                return Some(iterations);
            }
            basis.clear();
            basis.push(r.iter().map(|v| v / beta).collect());
            let mut h = vec![vec![0.0; RESTART]; RESTART + 1];
            let mut cs = vec![0.0; RESTART];
            let mut sn = vec![0.0; RESTART];
            let mut g = vec![0.0; RESTART + 1];
            g[0] = beta;
            let mut k_used = 0;
            for k in 0..RESTART {
                iterations += 1;
                // w = W A M⁻¹ W⁻¹ v_k
                let mut z: Vec<f64> = basis[k].iter().zip(weights).map(|(v, s)| v / s).collect();
                self.precondition(&mut z);
                self.apply(&z, &mut w);
                for (wi, s) in w.iter_mut().zip(weights) {
                    *wi *= s;
                }
                for (j, v) in basis.iter().enumerate() {
                    let hij: f64 = w.iter().zip(v).map(|(a, b)| a * b).sum();
                    h[j][k] = hij;
                    for (wi, vi) in w.iter_mut().zip(v) {
                        *wi -= hij * vi;
                    }
                }
                let hn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                h[k + 1][k] = hn;
                for j in 0..k {
                    let t = cs[j] * h[j][k] + sn[j] * h[j + 1][k];
                    h[j + 1][k] = -sn[j] * h[j][k] + cs[j] * h[j + 1][k];
                    h[j][k] = t;
                }
                let den = h[k][k].hypot(h[k + 1][k]);
                cs[k] = h[k][k] / den;
                sn[k] = h[k + 1][k] / den;
                h[k][k] = den;
                h[k + 1][k] = 0.0;
                g[k + 1] = -sn[k] * g[k];
                g[k] *= cs[k];
                k_used = k + 1;
                if g[k + 1].abs() / (n as f64).sqrt() <= target || hn == 0.0 {
                    break;
                }
                basis.push(w.iter().map(|v| v / hn).collect());
            }
            // back substitution for the least-squares coefficients
            let mut coef = vec![0.0; k_used];
            for i in (0..k_used).rev() {
                let mut acc = g[i];
                for j in i + 1..k_used {
                    acc -= h[i][j] * coef[j];
                }
                coef[i] = acc / h[i][i];
            }
            let mut update = vec![0.0; n];
            for (cj, v) in coef.iter().zip(&basis) {
                for (u, vi) in update.iter_mut().zip(v) {
                    *u += cj * vi;
                }
            }
            for (u, s) in update.iter_mut().zip(weights) {
                *u /= s;
            }
            self.precondition(&mut update);
            for (xi, u) in x.iter_mut().zip(&update) {
                *xi += u;
            }
        }
        self.apply(x, &mut r);
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri = bi - *ri;
        }
        (wnorm(&r) <= target).then_some(iterations)
    }
}

#[cfg(test)]
mod tests {
    use super::super::lu::ShiftedLu;
    use super::*;

    fn random_generator(n: usize, seed: u64) -> CsrMatrix {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        let mut rows = vec![Vec::new(); n];
        for (i, row) in rows.iter_mut().enumerate().take(n - 1) {
            let mut out = 0.0;
            for j in [i + 1, (i + 7) % (n - 1), (i * 3 + 1) % (n - 1)] {
                if j != i && !row.iter().any(|e: &(usize, f64)| e.0 == j) {
                    let v = 10.0 * next();
                    out += v;
                    row.push((j, v));
                }
            }
            row.push((i, -out));
            row.sort_unstable_by_key(|e| e.0);
        }
        CsrMatrix::from_rows(n, rows)
    }

    #[test]
    fn agrees_with_direct_factorization() {
        let q = random_generator(300, 7);
        let qt = q.transpose();
        for c in [1e-3, 0.1, 10.0] {
            let b: Vec<f64> = (0..300).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
            let mut lu = ShiftedLu::new(&qt, &q);
            lu.factor(c);
            let mut direct = vec![0.0; 300];
            lu.solve(&b, &mut direct);

            let mut it = IluGmres::new(&qt);
            it.factor(c);
            let mut x = b.clone();
            let weights = vec![1e10; 300];
            it.solve(&b, &mut x, &weights).expect("converges");
            for (a, d) in x.iter().zip(&direct) {
                assert!((a - d).abs() < 1e-11, "c={c}: {a} vs {d}");
            }
        }
    }
}
