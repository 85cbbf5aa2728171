//! Two-hop scaled dot-product attention pooling with the ego token as query.
//!
//! Each hop attends from the current ego token over the surrounding-vehicle
//! tokens and adds the attended value back onto the ego token. The pooled
//! feature is a GELU projection of the final ego token. Absent tokens are
//! masked out; with no tokens present the hops are identities.

use rand::Rng;

use super::dense::{Activation, Dense, DenseNet, DenseTape};
use super::matrix::{gemm, Matrix, Operand};
use super::{Param, Parameterized};
use crate::error::{check_dim, Result};

pub const HOPS: usize = 2;

#[derive(Clone, Debug)]
pub struct AttentionHop {
    pub query: Param,
    pub key: Param,
    pub value: Param,
}

impl AttentionHop {
    fn glorot<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (2 * hidden) as f64).sqrt();
        let mut mat = || {
            Param::new(
                vec![hidden, hidden],
                (0..hidden * hidden)
                    .map(|_| rng.gen_range(-limit..limit))
                    .collect(),
            )
        };
        Self {
            query: mat(),
            key: mat(),
            value: mat(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionPool {
    hidden: usize,
    pub hops: Vec<AttentionHop>,
    pub out: DenseNet,
}

struct HopTape {
    ego_in: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    weights: Vec<f64>,
}

pub struct AttentionTape {
    batch: usize,
    tokens: usize,
    sv: Matrix,
    hops: Vec<HopTape>,
    out: DenseTape,
}

fn project(x: &Matrix, w: &Param, hidden: usize) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), hidden);
    gemm(
        1.0,
        Operand::plain(x),
        Operand::raw(&w.value, hidden, hidden, false),
        0.0,
        &mut out,
    );
    out
}

impl AttentionPool {
    pub fn new<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        let hops = (0..HOPS).map(|_| AttentionHop::glorot(hidden, rng)).collect();
        let out = DenseNet {
            layers: vec![Dense::glorot(hidden, hidden, Activation::Gelu, rng)],
            frozen: false,
        };
        Self { hidden, hops, out }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn check(&self, ego: &Matrix, sv: &Matrix, mask: &[bool]) -> Result<usize> {
        check_dim("AttentionPool ego width", self.hidden, ego.cols())?;
        check_dim("AttentionPool token width", self.hidden, sv.cols())?;
        check_dim("AttentionPool mask", sv.rows(), mask.len())?;
        let batch = ego.rows();
        let tokens = if batch == 0 { 0 } else { sv.rows() / batch };
        check_dim("AttentionPool token rows", batch * tokens, sv.rows())?;
        Ok(tokens)
    }

    /// `ego`: `[B, H]`; `sv`: `[B * T, H]` sample-major; `mask[b * T + t]` marks present tokens.
    pub fn forward_recorded(
        &self,
        ego: &Matrix,
        sv: &Matrix,
        mask: &[bool],
    ) -> Result<(Matrix, AttentionTape)> {
        let tokens = self.check(ego, sv, mask)?;
        let batch = ego.rows();
        let h = self.hidden;
        let scale = 1.0 / (h as f64).sqrt();
        let mut cur = ego.clone();
        let mut tapes = Vec::with_capacity(self.hops.len());
        for hop in &self.hops {
            let q = project(&cur, &hop.query, h);
            let k = project(sv, &hop.key, h);
            let v = project(sv, &hop.value, h);
            let mut weights = vec![0.0; batch * tokens];
            let mut next = cur.clone();
            let mut scores = vec![0.0; tokens];
            for b in 0..batch {
                let qb = q.row(b);
                let mut max = f64::NEG_INFINITY;
                for t in 0..tokens {
                    if mask[b * tokens + t] {
                        let s = dot(qb, k.row(b * tokens + t)) * scale;
                        scores[t] = s;
                        max = max.max(s);
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut z = 0.0;
                for t in 0..tokens {
                    if mask[b * tokens + t] {
                        let e = (scores[t] - max).exp();
                        weights[b * tokens + t] = e;
                        z += e;
                    }
                }
                let nb = next.row_mut(b);
                for t in 0..tokens {
                    let w = &mut weights[b * tokens + t];
                    if *w == 0.0 {
                        continue;
                    }
                    *w /= z;
                    for (o, vv) in nb.iter_mut().zip(v.row(b * tokens + t)) {
                        *o += *w * vv;
                    }
                }
            }
            tapes.push(HopTape {
                ego_in: cur,
                q,
                k,
                v,
                weights,
            });
            cur = next;
        }
        let (pooled, out_tape) = self.out.forward_recorded(&cur)?;
        Ok((
            pooled,
            AttentionTape {
                batch,
                tokens,
                sv: sv.clone(),
                hops: tapes,
                out: out_tape,
            },
        ))
    }

    pub fn forward(&self, ego: &Matrix, sv: &Matrix, mask: &[bool]) -> Result<Matrix> {
        Ok(self.forward_recorded(ego, sv, mask)?.0)
    }

    /// Single-sample pooling over an arbitrary number of present tokens.
    pub fn pool(&self, ego: &[f64], sv_tokens: &[Vec<f64>]) -> Result<Vec<f64>> {
        let e = Matrix::row_vector(ego);
        let sv = if sv_tokens.is_empty() {
            Matrix::zeros(0, self.hidden)
        } else {
            Matrix::from_rows(sv_tokens)?
        };
        let mask = vec![true; sv_tokens.len()];
        Ok(self.forward(&e, &sv, &mask)?.into_vec())
    }

    /// Returns `(d_ego, d_sv)`; parameter gradients are accumulated when `accumulate`.
    pub fn backward(
        &mut self,
        tape: &AttentionTape,
        d_out: &Matrix,
        accumulate: bool,
    ) -> Result<(Matrix, Matrix)> {
        let mut d_cur = if accumulate {
            self.out.backward(&tape.out, d_out)?
        } else {
            self.out.input_grad(&tape.out, d_out)?
        };
        let h = self.hidden;
        let scale = 1.0 / (h as f64).sqrt();
        let (batch, tokens) = (tape.batch, tape.tokens);
        let mut d_sv = Matrix::zeros(batch * tokens, h);
        for (hop, ht) in self.hops.iter_mut().zip(&tape.hops).rev() {
            let mut dq = Matrix::zeros(batch, h);
            let mut dk = Matrix::zeros(batch * tokens, h);
            let mut dv = Matrix::zeros(batch * tokens, h);
            let mut dw = vec![0.0; tokens];
            for b in 0..batch {
                let d_o = d_cur.row(b);
                let mut wsum = 0.0;
                for t in 0..tokens {
                    let idx = b * tokens + t;
                    let w = ht.weights[idx];
                    if w == 0.0 {
                        dw[t] = 0.0;
                        continue;
                    }
                    for (g, d) in dv.row_mut(idx).iter_mut().zip(d_o) {
                        *g = w * d;
                    }
                    dw[t] = dot(d_o, ht.v.row(idx));
                    wsum += w * dw[t];
                }
                for t in 0..tokens {
                    let idx = b * tokens + t;
                    let w = ht.weights[idx];
                    if w == 0.0 {
                        continue;
                    }
                    let ds = w * (dw[t] - wsum) * scale;
                    {
                        let kr = ht.k.row(idx);
                        for (g, kk) in dq.row_mut(b).iter_mut().zip(kr) {
                            *g += ds * kk;
                        }
                    }
                    let qr = ht.q.row(b);
                    for (g, qq) in dk.row_mut(idx).iter_mut().zip(qr) {
                        *g = ds * qq;
                    }
                }
            }
            if accumulate {
                accumulate_outer(&mut hop.query, &ht.ego_in, &dq);
                accumulate_outer(&mut hop.key, &tape.sv, &dk);
                accumulate_outer(&mut hop.value, &tape.sv, &dv);
            }
            // Residual path plus the query projection.
            gemm(
                1.0,
                Operand::plain(&dq),
                Operand::raw(&hop.query.value, h, h, true),
                1.0,
                &mut d_cur,
            );
            gemm(
                1.0,
                Operand::plain(&dk),
                Operand::raw(&hop.key.value, h, h, true),
                1.0,
                &mut d_sv,
            );
            gemm(
                1.0,
                Operand::plain(&dv),
                Operand::raw(&hop.value.value, h, h, true),
                1.0,
                &mut d_sv,
            );
        }
        Ok((d_cur, d_sv))
    }
}

fn accumulate_outer(p: &mut Param, x: &Matrix, d: &Matrix) {
    let (r, c) = (p.shape[0], p.shape[1]);
    let mut g = Matrix::zeros(r, c);
    gemm(1.0, Operand::transposed(x), Operand::plain(d), 0.0, &mut g);
    for (a, b) in p.grad.iter_mut().zip(g.data()) {
        *a += b;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Parameterized for AttentionPool {
    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self
            .hops
            .iter()
            .flat_map(|h| [&h.query, &h.key, &h.value])
            .collect();
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self
            .hops
            .iter_mut()
            .flat_map(|h| [&mut h.query, &mut h.key, &mut h.value])
            .collect();
        v.extend(self.out.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tokens(rng: &mut ChaCha8Rng, n: usize, h: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn permutation_invariant_for_all_orders_up_to_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pool = AttentionPool::new(6, &mut rng);
        let ego: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let toks = tokens(&mut rng, 4, 6);
        for n in 1..=4 {
            let base = pool.pool(&ego, &toks[..n]).unwrap();
            let mut idx: Vec<usize> = (0..n).collect();
            // Heap's algorithm over all n! orders.
            let mut c = vec![0; n];
            let mut i = 0;
            while i < n {
                if c[i] < i {
                    if i % 2 == 0 {
                        idx.swap(0, i);
                    } else {
                        idx.swap(c[i], i);
                    }
                    let perm: Vec<Vec<f64>> = idx.iter().map(|&j| toks[j].clone()).collect();
                    let out = pool.pool(&ego, &perm).unwrap();
                    for (a, b) in out.iter().zip(&base) {
                        assert!((a - b).abs() < 1e-12);
                    }
                    c[i] += 1;
                    i = 0;
                } else {
                    c[i] = 0;
                    i += 1;
                }
            }
        }
    }

    #[test]
    fn empty_token_list_is_ego_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pool = AttentionPool::new(4, &mut rng);
        let ego = vec![0.2, -0.1, 0.5, 0.9];
        let out = pool.pool(&ego, &[]).unwrap();
        assert_eq!(out, pool.out.forward_vec(&ego).unwrap());
    }

    #[test]
    fn single_token_takes_full_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pool = AttentionPool::new(3, &mut rng);
        let ego = vec![0.3, 0.1, -0.4];
        let tok = vec![0.7, -0.2, 0.05];
        let out = pool.pool(&ego, &[tok.clone()]).unwrap();
        // Each hop adds the value projection of the token with weight 1.
        let mut cur = ego.clone();
        for hop in &pool.hops {
            for j in 0..3 {
                cur[j] += (0..3).map(|i| tok[i] * hop.value.value[i * 3 + j]).sum::<f64>();
            }
        }
        let expected = pool.out.forward_vec(&cur).unwrap();
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn duplicate_tokens_match_single_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pool = AttentionPool::new(5, &mut rng);
        let ego: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tok: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let one = pool.pool(&ego, &[tok.clone()]).unwrap();
        let two = pool.pool(&ego, &[tok.clone(), tok]).unwrap();
        for (a, b) in one.iter().zip(&two) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn masked_tokens_are_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pool = AttentionPool::new(4, &mut rng);
        let ego = Matrix::row_vector(&[0.1, 0.2, 0.3, 0.4]);
        let toks = tokens(&mut rng, 3, 4);
        let sv = Matrix::from_rows(&toks).unwrap();
        let masked = pool.forward(&ego, &sv, &[true, false, true]).unwrap();
        let direct = pool.pool(ego.row(0), &[toks[0].clone(), toks[2].clone()]).unwrap();
        for (a, b) in masked.data().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
