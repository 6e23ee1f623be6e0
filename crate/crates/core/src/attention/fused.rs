//! Streaming kernel for the two-stage factorized attentions.
//!
//! Both SODA and trajectory attention have the same shape: every query first
//! attends *within* each group of tokens (one softmax per group), producing
//! one summary vector per group; the summaries are re-projected and the
//! query then attends *across* groups. They differ only in which axis forms
//! the groups:
//!
//! | variant    | groups        | members in a group | query's own group |
//! |------------|---------------|--------------------|-------------------|
//! | SODA       | locations s'  | frames t'          | its location s    |
//! | trajectory | frames t'     | locations s'       | its frame t       |
//!
//! The kernel walks queries in chunks so only `chunk x groups x c` summary
//! values are alive at once, and recomputes them in the backward pass. The
//! key and value re-projections are folded into the query side
//! (`<q^, y W_k> = <W_k q^, y>`), which is exact up to rounding.

use crate::autodiff::{count_macs, CustomOp};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grouping {
    /// Softmax over time per location, then over locations.
    Soda,
    /// Softmax over locations per frame, then over time.
    Trajectory,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub grouping: Grouping,
    pub t: usize,
    pub m: usize,
}

impl Layout {
    pub fn groups(&self) -> usize {
        match self.grouping {
            Grouping::Soda => self.m,
            Grouping::Trajectory => self.t,
        }
    }

    pub fn members(&self) -> usize {
        match self.grouping {
            Grouping::Soda => self.t,
            Grouping::Trajectory => self.m,
        }
    }

    #[inline]
    pub fn token(&self, group: usize, member: usize) -> usize {
        match self.grouping {
            Grouping::Soda => member * self.m + group,
            Grouping::Trajectory => group * self.m + member,
        }
    }

    #[inline]
    pub fn own_group(&self, query: usize) -> usize {
        match self.grouping {
            Grouping::Soda => query % self.m,
            Grouping::Trajectory => query / self.m,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Kernel {
    pub layout: Layout,
    pub heads: usize,
    pub scale: f64,
    pub chunk: usize,
}

/// Per-query intermediates, rebuilt on demand.
struct QueryState {
    /// `[groups, c]` first-stage summaries.
    y: Vec<f64>,
    /// `[heads, groups, members]` first-stage weights.
    p: Vec<f64>,
    /// `[c]` re-projected query.
    q_hat: Vec<f64>,
    /// `[heads, c]` query folded through the key projection.
    u: Vec<f64>,
    /// `[heads, groups]` second-stage weights.
    r: Vec<f64>,
    /// `[heads, c]` weighted summaries before the value projection.
    y_bar: Vec<f64>,
}

fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in xs.iter_mut() {
        *x /= s;
    }
}

/// Inputs in kernel order.
pub(crate) struct Inputs<'a> {
    pub q: &'a [f64],
    pub k: &'a [f64],
    pub v: &'a [f64],
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
    pub c: usize,
}

impl Kernel {
    fn head_dim(&self, c: usize) -> usize {
        c / self.heads
    }

    fn new_state(&self, c: usize) -> QueryState {
        let (g, mm, h) = (self.layout.groups(), self.layout.members(), self.heads);
        QueryState {
            y: vec![0.0; g * c],
            p: vec![0.0; h * g * mm],
            q_hat: vec![0.0; c],
            u: vec![0.0; h * c],
            r: vec![0.0; h * g],
            y_bar: vec![0.0; h * c],
        }
    }

    /// First stage for query `i`: `y[g] = sum_j p[g,j] v[token(g,j)]`.
    fn stage_one(&self, x: &Inputs, i: usize, st: &mut QueryState) {
        let (c, dh) = (x.c, self.head_dim(x.c));
        let (gn, mn) = (self.layout.groups(), self.layout.members());
        st.y.fill(0.0);
        for h in 0..self.heads {
            let hs = h * dh;
            let qi = &x.q[i * c + hs..i * c + hs + dh];
            for g in 0..gn {
                let p = &mut st.p[(h * gn + g) * mn..(h * gn + g + 1) * mn];
                for (j, pj) in p.iter_mut().enumerate() {
                    let tok = self.layout.token(g, j);
                    let kj = &x.k[tok * c + hs..tok * c + hs + dh];
                    *pj = self.scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                }
                softmax_in_place(p);
                let yg = &mut st.y[g * c + hs..g * c + hs + dh];
                for (j, &pj) in p.iter().enumerate() {
                    let tok = self.layout.token(g, j);
                    for (yd, vd) in yg.iter_mut().zip(&x.v[tok * c + hs..tok * c + hs + dh]) {
                        *yd += pj * vd;
                    }
                }
            }
        }
        count_macs((2 * gn * mn * c) as u64);
    }

    /// Second stage for query `i`; writes the output row.
    fn stage_two(&self, x: &Inputs, i: usize, st: &mut QueryState, out: &mut [f64]) {
        let (c, dh) = (x.c, self.head_dim(x.c));
        let gn = self.layout.groups();
        let own = self.layout.own_group(i);
        st.q_hat.fill(0.0);
        for d in 0..c {
            let yd = st.y[own * c + d];
            for e in 0..c {
                st.q_hat[e] += yd * x.wq[d * c + e];
            }
        }
        for h in 0..self.heads {
            let hs = h * dh;
            let u = &mut st.u[h * c..(h + 1) * c];
            for (d, ud) in u.iter_mut().enumerate() {
                *ud = (hs..hs + dh).map(|e| x.wk[d * c + e] * st.q_hat[e]).sum();
            }
            let r = &mut st.r[h * gn..(h + 1) * gn];
            for (g, rg) in r.iter_mut().enumerate() {
                let yg = &st.y[g * c..(g + 1) * c];
                *rg = self.scale * yg.iter().zip(u.iter()).map(|(a, b)| a * b).sum::<f64>();
            }
            softmax_in_place(r);
            let yb = &mut st.y_bar[h * c..(h + 1) * c];
            yb.fill(0.0);
            for (g, &rg) in r.iter().enumerate() {
                for (b, yv) in yb.iter_mut().zip(&st.y[g * c..(g + 1) * c]) {
                    *b += rg * yv;
                }
            }
            for e in hs..hs + dh {
                out[e] = (0..c).map(|d| yb[d] * x.wv[d * c + e]).sum();
            }
        }
        count_macs((3 * c * c + 2 * self.heads * gn * c) as u64);
    }

    /// Output `[n, c]` and, if requested, second-stage weights `[heads, n, groups]`.
    pub fn forward(&self, x: &Inputs, want_weights: bool) -> (Vec<f64>, Option<Vec<f64>>) {
        let c = x.c;
        let n = x.q.len() / c;
        let gn = self.layout.groups();
        let mut out = vec![0.0; n * c];
        let mut weights = want_weights.then(|| vec![0.0; self.heads * n * gn]);
        let mut states: Vec<QueryState> =
            (0..self.chunk.min(n)).map(|_| self.new_state(c)).collect();
        for start in (0..n).step_by(self.chunk) {
            let end = (start + self.chunk).min(n);
            for (i, st) in (start..end).zip(states.iter_mut()) {
                self.stage_one(x, i, st);
            }
            for (i, st) in (start..end).zip(states.iter_mut()) {
                self.stage_two(x, i, st, &mut out[i * c..(i + 1) * c]);
                if let Some(w) = weights.as_mut() {
                    for h in 0..self.heads {
                        w[(h * n + i) * gn..(h * n + i + 1) * gn]
                            .copy_from_slice(&st.r[h * gn..(h + 1) * gn]);
                    }
                }
            }
        }
        (out, weights)
    }

    /// Gradients for `(q, k, v, wq, wk, wv)`.
    pub fn backward(&self, x: &Inputs, g: &[f64]) -> [Vec<f64>; 6] {
        let c = x.c;
        let dh = self.head_dim(c);
        let n = x.q.len() / c;
        let (gn, mn) = (self.layout.groups(), self.layout.members());
        let mut dq = vec![0.0; n * c];
        let mut dk = vec![0.0; n * c];
        let mut dv = vec![0.0; n * c];
        let mut dwq = vec![0.0; c * c];
        let mut dwk = vec![0.0; c * c];
        let mut dwv = vec![0.0; c * c];
        let mut st = self.new_state(c);
        let mut scratch = vec![0.0; c];
        let mut dy = vec![0.0; gn * c];
        let mut dq_hat = vec![0.0; c];
        let mut dy_bar = vec![0.0; c];
        let mut du = vec![0.0; c];
        let mut dr = vec![0.0; gn];
        let mut dp = vec![0.0; mn];

        for i in 0..n {
            self.stage_one(x, i, &mut st);
            self.stage_two(x, i, &mut st, &mut scratch);
            let go = &g[i * c..(i + 1) * c];
            let own = self.layout.own_group(i);
            dy.fill(0.0);
            dq_hat.fill(0.0);

            for h in 0..self.heads {
                let hs = h * dh;
                let yb = &st.y_bar[h * c..(h + 1) * c];
                let u = &st.u[h * c..(h + 1) * c];
                let r = &st.r[h * gn..(h + 1) * gn];
                for d in 0..c {
                    dy_bar[d] = (hs..hs + dh).map(|e| x.wv[d * c + e] * go[e]).sum();
                    for e in hs..hs + dh {
                        dwv[d * c + e] += yb[d] * go[e];
                    }
                }
                for g in 0..gn {
                    let yg = &st.y[g * c..(g + 1) * c];
                    dr[g] = yg.iter().zip(&dy_bar).map(|(a, b)| a * b).sum();
                    for (dyd, b) in dy[g * c..(g + 1) * c].iter_mut().zip(&dy_bar) {
                        *dyd += r[g] * b;
                    }
                }
                let rdr: f64 = r.iter().zip(&dr).map(|(a, b)| a * b).sum();
                du.fill(0.0);
                for g in 0..gn {
                    let db = r[g] * (dr[g] - rdr) * self.scale;
                    let yg = &st.y[g * c..(g + 1) * c];
                    for d in 0..c {
                        dy[g * c + d] += db * u[d];
                        du[d] += db * yg[d];
                    }
                }
                for d in 0..c {
                    for e in hs..hs + dh {
                        dwk[d * c + e] += du[d] * st.q_hat[e];
                        dq_hat[e] += x.wk[d * c + e] * du[d];
                    }
                }
            }
            for d in 0..c {
                let yd = st.y[own * c + d];
                let mut acc = 0.0;
                for e in 0..c {
                    dwq[d * c + e] += yd * dq_hat[e];
                    acc += x.wq[d * c + e] * dq_hat[e];
                }
                dy[own * c + d] += acc;
            }

            for h in 0..self.heads {
                let hs = h * dh;
                for g in 0..gn {
                    let p = &st.p[(h * gn + g) * mn..(h * gn + g + 1) * mn];
                    let dyg = &dy[g * c + hs..g * c + hs + dh];
                    for (j, dpj) in dp.iter_mut().enumerate() {
                        let tok = self.layout.token(g, j);
                        *dpj = dyg
                            .iter()
                            .zip(&x.v[tok * c + hs..tok * c + hs + dh])
                            .map(|(a, b)| a * b)
                            .sum();
                        for (dvd, a) in dv[tok * c + hs..tok * c + hs + dh].iter_mut().zip(dyg) {
                            *dvd += p[j] * a;
                        }
                    }
                    let pdp: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..mn {
                        let da = p[j] * (dp[j] - pdp) * self.scale;
                        let tok = self.layout.token(g, j);
                        for d in hs..hs + dh {
                            dq[i * c + d] += da * x.k[tok * c + d];
                            dk[tok * c + d] += da * x.q[i * c + d];
                        }
                    }
                }
            }
        }
        [dq, dk, dv, dwq, dwk, dwv]
    }
}

impl CustomOp for Kernel {
    fn name(&self) -> &'static str {
        match self.layout.grouping {
            Grouping::Soda => "soda_kernel",
            Grouping::Trajectory => "trajectory_kernel",
        }
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let c = inputs[0].shape()[1];
        let x = Inputs {
            q: inputs[0].data(),
            k: inputs[1].data(),
            v: inputs[2].data(),
            wq: inputs[3].data(),
            wk: inputs[4].data(),
            wv: inputs[5].data(),
            c,
        };
        self.backward(&x, grad.data())
            .into_iter()
            .zip(inputs)
            .map(|(g, inp)| Tensor::from_parts(inp.shape().to_vec(), g))
            .collect()
    }
}
