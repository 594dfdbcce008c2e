//! Sparse LU factorization of shifted systems `I − cJ` where `J` is a generator
//! (or its transpose).
//!
//! For `c > 0` these matrices are nonsingular M-matrices that are diagonally
//! dominant by rows or by columns, so elimination without pivoting is stable.
//! A symmetric reverse Cuthill–McKee permutation keeps the fill close to the
//! profile of the state-space grid. The last index (the sink) is always
//! eliminated last; nothing couples back into it.

use std::collections::VecDeque;

use super::sparse::CsrMatrix;

/// Factorization workspace bound to one `J`; refactor for each new shift `c`.
#[derive(Debug)]
pub struct ShiftedLu {
    n: usize,
    /// `order[new] = old`.
    order: Vec<usize>,
    /// `pos[old] = new`.
    pos: Vec<usize>,
    /// Columns of the permuted `J`: `(row, value)` in new indices.
    jcols: Vec<Vec<(usize, f64)>>,
    l_ptr: Vec<usize>,
    l_idx: Vec<usize>,
    l_val: Vec<f64>,
    u_ptr: Vec<usize>,
    u_idx: Vec<usize>,
    u_val: Vec<f64>,
    diag: Vec<f64>,
    shift: Option<f64>,
    envelope: usize,
}

impl ShiftedLu {
    /// `j_rows` is `J` in CSR form; `j_cols` must be `Jᵀ` in CSR form (the columns of `J`).
    pub fn new(j_rows: &CsrMatrix, j_cols: &CsrMatrix) -> Self {
        let n = j_rows.n();
        let order = rcm_order(j_rows, j_cols);
        let mut pos = vec![0; n];
        for (new, &old) in order.iter().enumerate() {
            pos[old] = new;
        }
        let jcols = order
            .iter()
            .map(|&old| {
                let mut col: Vec<(usize, f64)> = j_cols.row(old).map(|(r, v)| (pos[r], v)).collect();
                col.sort_unstable_by_key(|e| e.0);
                col
            })
            .collect::<Vec<_>>();
        let mut first = (0..n).collect::<Vec<usize>>();
        for (j, col) in jcols.iter().enumerate() {
            for &(i, _) in col {
                let (lo, hi) = if i < j { (i, j) } else { (j, i) };
                first[hi] = first[hi].min(lo);
            }
        }
        let envelope = first.iter().enumerate().map(|(k, &f)| k - f).sum();
        Self {
            n,
            order,
            pos,
            jcols,
            l_ptr: Vec::new(),
            l_idx: Vec::new(),
            l_val: Vec::new(),
            u_ptr: Vec::new(),
            u_idx: Vec::new(),
            u_val: Vec::new(),
            diag: Vec::new(),
            shift: None,
            envelope,
        }
    }

    pub fn shift(&self) -> Option<f64> {
        self.shift
    }

    /// Entries strictly inside the symmetric profile of the permuted matrix;
    /// `L` and `U` each fit within it.
    pub fn envelope(&self) -> usize {
        self.envelope
    }

    pub fn fill(&self) -> usize {
        self.l_idx.len() + self.u_idx.len() + self.n
    }

    /// Left-looking factorization of `I − cJ` (permuted).
    pub fn factor(&mut self, c: f64) {
        let n = self.n;
        self.l_ptr.clear();
        self.l_idx.clear();
        self.l_val.clear();
        self.u_ptr.clear();
        self.u_idx.clear();
        self.u_val.clear();
        self.diag.clear();
        self.l_ptr.push(0);
        self.u_ptr.push(0);

        let mut x = vec![0.0; n];
        let mut mark = vec![usize::MAX; n];
        let mut pattern: Vec<usize> = Vec::new();
        let mut topo: Vec<usize> = Vec::new();
        let mut stack: Vec<(usize, usize)> = Vec::new();

        for j in 0..n {
            // scatter column j of A = I - cJ and collect its pattern
            pattern.clear();
            let touch = |i: usize, mark: &mut [usize], pattern: &mut Vec<usize>| {
                if mark[i] != j {
                    mark[i] = j;
                    pattern.push(i);
                }
            };
            touch(j, &mut mark, &mut pattern);
            x[j] = 1.0;
            for &(i, v) in &self.jcols[j] {
                if mark[i] != j {
                    x[i] = 0.0;
                }
                touch(i, &mut mark, &mut pattern);
                x[i] -= c * v;
            }

            // depth-first reach through the columns of L computed so far
            topo.clear();
            let seeds: Vec<usize> = pattern.iter().copied().filter(|&i| i < j).collect();
            let visited_stamp = |i: usize, mark: &mut [usize]| -> bool {
                // second stamp: n + j marks "visited in DFS"
                if mark[i] == n + j {
                    false
                } else {
                    mark[i] = n + j;
                    true
                }
            };
            for &s in &seeds {
                if !visited_stamp(s, &mut mark) {
                    continue;
                }
                stack.push((s, self.l_ptr[s]));
                while let Some(top) = stack.len().checked_sub(1) {
                    let (node, mut p) = stack[top];
                    let end = self.l_ptr[node + 1];
                    let mut descend = None;
                    while p < end {
                        let child = self.l_idx[p];
                        p += 1;
                        if mark[child] == n + j {
                            continue;
                        }
                        if mark[child] != j {
                            // fill-in position
                            x[child] = 0.0;
                            pattern.push(child);
                        }
                        mark[child] = n + j;
                        if child < j {
                            descend = Some(child);
                            break;
                        }
                    }
                    stack[top].1 = p;
                    match descend {
                        Some(child) => stack.push((child, self.l_ptr[child])),
                        None => {
                            topo.push(node);
                            stack.pop();
                        }
                    }
                }
            }
            // topo holds a post-order; eliminate in reverse
            for &k in topo.iter().rev() {
                let xk = x[k];
                if xk == 0.0 {
                    continue;
                }
                for p in self.l_ptr[k]..self.l_ptr[k + 1] {
                    x[self.l_idx[p]] -= self.l_val[p] * xk;
                }
            }

            pattern.sort_unstable();
            let d = x[j];
            debug_assert!(d > 0.0, "non-positive pivot {d} in column {j}");
            for &i in &pattern {
                if i < j {
                    self.u_idx.push(i);
                    self.u_val.push(x[i]);
                } else if i > j {
                    self.l_idx.push(i);
                    self.l_val.push(x[i] / d);
                }
            }
            self.diag.push(d);
            self.l_ptr.push(self.l_idx.len());
            self.u_ptr.push(self.u_idx.len());
        }
        self.shift = Some(c);
    }

    /// Solves `(I − cJ) x = b` with the current factors.
    pub fn solve(&self, b: &[f64], out: &mut [f64]) {
        let n = self.n;
        let mut y: Vec<f64> = (0..n).map(|new| b[self.order[new]]).collect();
        for k in 0..n {
            let yk = y[k];
            if yk != 0.0 {
                for p in self.l_ptr[k]..self.l_ptr[k + 1] {
                    y[self.l_idx[p]] -= self.l_val[p] * yk;
                }
            }
        }
        for k in (0..n).rev() {
            let zk = y[k] / self.diag[k];
            y[k] = zk;
            if zk != 0.0 {
                for p in self.u_ptr[k]..self.u_ptr[k + 1] {
                    y[self.u_idx[p]] -= self.u_val[p] * zk;
                }
            }
        }
        for (old, o) in out.iter_mut().enumerate() {
            *o = y[self.pos[old]];
        }
    }
}

/// Reverse Cuthill–McKee order of the symmetrized off-diagonal pattern, with
/// the final index pinned last.
fn rcm_order(rows: &CsrMatrix, cols: &CsrMatrix) -> Vec<usize> {
    let n = rows.n();
    if n == 0 {
        return Vec::new();
    }
    let last = n - 1;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..last {
        for (k, _) in rows.row(i).chain(cols.row(i)) {
            if k != i && k != last {
                adj[i].push(k);
            }
        }
        adj[i].sort_unstable();
        adj[i].dedup();
    }
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    visited[last] = true;
    let mut order = Vec::with_capacity(n);

    let bfs_levels = |start: usize, visited: &[bool]| -> (usize, usize) {
        // returns (eccentricity, a min-degree node on the last level)
        let mut dist = vec![usize::MAX; n];
        let mut q = VecDeque::new();
        dist[start] = 0;
        q.push_back(start);
        let mut far = start;
        while let Some(u) = q.pop_front() {
            if dist[u] > dist[far] || (dist[u] == dist[far] && degree[u] < degree[far]) {
                far = u;
            }
            for &w in &adj[u] {
                if !visited[w] && dist[w] == usize::MAX {
                    dist[w] = dist[u] + 1;
                    q.push_back(w);
                }
            }
        }
        (dist[far], far)
    };

    let mut by_degree: Vec<usize> = (0..last).collect();
    by_degree.sort_by_key(|&i| (degree[i], i));
    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        // pseudo-peripheral start node
        let mut start = seed;
        let (mut ecc, mut far) = bfs_levels(start, &visited);
        for _ in 0..4 {
            let (e2, f2) = bfs_levels(far, &visited);
            if e2 <= ecc {
                break;
            }
            start = far;
            ecc = e2;
            far = f2;
        }
        let mut q = VecDeque::new();
        visited[start] = true;
        q.push_back(start);
        while let Some(u) = q.pop_front() {
            order.push(u);
            let mut next: Vec<usize> = adj[u].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_by_key(|&w| (degree[w], w));
            for w in next {
                visited[w] = true;
                q.push_back(w);
            }
        }
    }
    order.reverse();
    order.push(last);
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        // Gaussian elimination with partial pivoting
        let n = b.len();
        let mut m: Vec<Vec<f64>> = a.to_vec();
        let mut r = b.to_vec();
        for k in 0..n {
            let p = (k..n).max_by(|&i, &j| m[i][k].abs().partial_cmp(&m[j][k].abs()).unwrap()).unwrap();
            m.swap(k, p);
            r.swap(k, p);
            for i in k + 1..n {
                let f = m[i][k] / m[k][k];
                for j in k..n {
                    m[i][j] -= f * m[k][j];
                }
                r[i] -= f * r[k];
            }
        }
        let mut x = vec![0.0; n];
        for k in (0..n).rev() {
            let s: f64 = (k + 1..n).map(|j| m[k][j] * x[j]).sum();
            x[k] = (r[k] - s) / m[k][k];
        }
        x
    }

    #[test]
    fn matches_dense_elimination_on_random_generator() {
        // 2-D nearest-neighbour walk on a 7x6 grid plus sink
        let (w, h) = (7usize, 6usize);
        let n = w * h + 1;
        let sink = n - 1;
        let mut rows = vec![Vec::new(); n];
        let mut seed = 12345u64;
        let mut rnd = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64) / (1u64 << 31) as f64
        };
        for x in 0..w {
            for y in 0..h {
                let i = x * h + y;
                let mut row: Vec<(usize, f64)> = Vec::new();
                let mut out = 0.0;
                for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1), (1, 1)] {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    let r = rnd() * 3.0;
                    out += r;
                    if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                        row.push((nx as usize * h + ny as usize, r));
                    } else if let Some(e) = row.iter_mut().find(|e| e.0 == sink) {
                        e.1 += r;
                    } else {
                        row.push((sink, r));
                    }
                }
                row.push((i, -out));
                row.sort_by_key(|e| e.0);
                rows[i] = row;
            }
        }
        let q = CsrMatrix::from_rows(n, rows);
        let qt = q.transpose();
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        for (jr, jc) in [(&q, &qt), (&qt, &q)] {
            let mut lu = ShiftedLu::new(jr, jc);
            for c in [0.01, 0.7, 25.0] {
                lu.factor(c);
                let mut x = vec![0.0; n];
                lu.solve(&b, &mut x);
                let dense: Vec<Vec<f64>> = (0..n)
                    .map(|i| (0..n).map(|k| (if i == k { 1.0 } else { 0.0 }) - c * jr.get(i, k)).collect())
                    .collect();
                let want = dense_solve(&dense, &b);
                for i in 0..n {
                    assert!((x[i] - want[i]).abs() <= 1e-12 * want[i].abs().max(1.0), "{c} {i}");
                }
            }
        }
    }

    #[test]
    fn nonnegative_right_hand_sides_give_nonnegative_solutions() {
        // pure birth chain: tiny tail values must stay positive and accurate
        let n = 80;
        let rows = (0..n)
            .map(|i| if i + 1 < n { vec![(i, -1.0), (i + 1, 1.0)] } else { vec![] })
            .collect();
        let q = CsrMatrix::from_rows(n, rows);
        let qt = q.transpose();
        let mut lu = ShiftedLu::new(&qt, &q);
        lu.factor(0.5);
        let mut b = vec![0.0; n];
        b[0] = 1.0;
        let mut x = vec![0.0; n];
        lu.solve(&b, &mut x);
        // (I - 0.5 Qᵀ)^{-1} e_0 has entries (1/1.5) (0.5/1.5)^k
        for k in 0..n - 1 {
            let want = (1.0 / 1.5) * (0.5f64 / 1.5).powi(k as i32);
            assert!((x[k] - want).abs() <= 1e-14 * want, "{k}: {} vs {want}", x[k]);
        }
    }
}
