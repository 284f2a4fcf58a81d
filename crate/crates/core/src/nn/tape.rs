//! Reverse-mode autodiff over row-major `f64` matrices.
//!
//! A [`Tape`] records a forward computation as a flat list of nodes; calling
//! [`Tape::backward`] walks it in reverse and accumulates parameter gradients
//! into a [`Gradients`] buffer. Parameters are borrowed from a [`ParamSet`],
//! never copied, so a tape is cheap to build per training example.
//!
//! The op set is exactly what the encoder and the four task heads need; ops
//! that would be slow when composed (attention, layer norm, BCE) are fused.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::params::{Gradients, ParamId, ParamSet};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Param(ParamId),
    Const,
    Gather {
        src: Var,
        rows: Vec<usize>,
    },
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        blocks: Vec<(usize, usize)>,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
    ConcatCols(Var, Var),
    RowDot(Var, Var),
    BroadcastCols(Var),
    NormalizeRows {
        x: Var,
        norms: Array1<f64>,
    },
    Bce {
        logits: Var,
        targets: Array2<f64>,
        weights: Option<Array2<f64>>,
    },
}

struct Node {
    value: Option<Array2<f64>>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

/// Numerically stable BCE with logits for one element.
pub fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

const NORM_EPS: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    fn push(&mut self, value: Option<Array2<f64>>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(x), _) => x.view(),
            (None, Op::Param(id)) => self.params.get(*id).view(),
            _ => unreachable!("node without value"),
        }
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(None, Op::Param(id))
    }

    pub fn constant(&mut self, x: Array2<f64>) -> Var {
        self.push(Some(x), Op::Const)
    }

    /// Selects rows of `src` (with repetition). Used for embedding lookup.
    pub fn gather(&mut self, src: Var, rows: Vec<usize>) -> Var {
        let x = self.value(src);
        let mut out = Array2::zeros((rows.len(), x.ncols()));
        for (o, &r) in rows.iter().enumerate() {
            out.row_mut(o).assign(&x.row(r));
        }
        self.push(Some(out), Op::Gather { src, rows })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) + &self.value(b);
        self.push(Some(out), Op::Add(a, b))
    }

    /// `a + 1 bias`, with `bias` a 1xm row broadcast over the rows of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let out = &self.value(a) + &self.value(bias);
        self.push(Some(out), Op::AddBias(a, bias))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) * &self.value(b);
        self.push(Some(out), Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = &self.value(a) * c;
        self.push(Some(out), Op::Scale(a, c))
    }

    /// Multiplies every entry of `a` by the 1x1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let c = self.scalar(s);
        let out = &self.value(a) * c;
        self.push(Some(out), Op::ScaleBy(a, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b));
        self.push(Some(out), Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(Some(out), Op::MatMulT(a, b))
    }

    /// `x · w + b` with `w` stored as in x out.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(Some(out), Op::Relu(a))
    }

    /// Row-wise layer normalization with learned gain and bias (1xd each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = Array1::zeros(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            xhat.row_mut(i).assign(&row.mapv(|v| (v - mean) * is));
        }
        let out = &(&xhat * &self.value(gain)) + &self.value(bias);
        self.push(
            Some(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head softmax attention, independently within each block of rows.
    ///
    /// `blocks` are `(start, len)` row ranges; rows of different blocks never
    /// attend to each other, so many sequences can share one packed matrix.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        blocks: Vec<(usize, usize)>,
        heads: usize,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.dim();
        assert_eq!(d % heads, 0, "model dim must divide into heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(blocks.len() * heads);
        for &(start, len) in &blocks {
            for h in 0..heads {
                let cols = s![start..start + len, h * dh..(h + 1) * dh];
                let qb = qv.slice(cols);
                let kb = kv.slice(cols);
                let vb = vv.slice(cols);
                let mut p = qb.dot(&kb.t());
                for mut row in p.rows_mut() {
                    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b * scale));
                    row.mapv_inplace(|x| (x * scale - m).exp());
                    let z = row.sum();
                    row /= z;
                }
                out.slice_mut(cols).assign(&p.dot(&vb));
                probs.push(p);
            }
        }
        self.push(
            Some(out),
            Op::Attention {
                q,
                k,
                v,
                blocks,
                heads,
                probs,
            },
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let out = ndarray::concatenate(Axis(1), &[av, bv]).expect("row counts match");
        self.push(Some(out), Op::ConcatCols(a, b))
    }

    /// Row-wise dot product: N x d, N x d -> N x 1.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let prod = &self.value(a) * &self.value(b);
        let out = prod.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(Some(out), Op::RowDot(a, b))
    }

    /// Repeats an N x 1 column `m` times.
    pub fn broadcast_cols(&mut self, a: Var, m: usize) -> Var {
        let col = self.value(a);
        assert_eq!(col.ncols(), 1);
        let out = col
            .broadcast((col.nrows(), m))
            .expect("column broadcast")
            .to_owned();
        self.push(Some(out), Op::BroadcastCols(a))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let norms = xv.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(NORM_EPS));
        let out = &xv / &norms.view().insert_axis(Axis(1));
        self.push(Some(out), Op::NormalizeRows { x, norms })
    }

    /// Summed binary cross-entropy with logits, optionally weighted; 1x1.
    pub fn bce(&mut self, logits: Var, targets: Array2<f64>, weights: Option<Array2<f64>>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.dim(), targets.dim());
        let mut total = 0.0;
        Zip::indexed(&z).for_each(|ix, &zi| {
            let w = weights.as_ref().map_or(1.0, |w| w[ix]);
            total += w * bce_with_logits(zi, targets[ix]);
        });
        self.push(
            Some(Array2::from_elem((1, 1), total)),
            Op::Bce {
                logits,
                targets,
                weights,
            },
        )
    }

    /// Back-propagates from the 1x1 node `loss`, adding parameter gradients into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) {
        let mut g: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        fn acc(g: &mut [Option<Array2<f64>>], v: Var, d: Array2<f64>) {
            match &mut g[v.0] {
                Some(x) => *x += &d,
                slot => *slot = Some(d),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(dy) = g[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Param(id) => grads.accumulate(*id, &dy),
                Op::Const => {}
                Op::Gather { src, rows } => {
                    if let Op::Param(id) = self.nodes[src.0].op {
                        let target = grads.dense_mut(id, self.params.get(id).dim());
                        for (o, &r) in rows.iter().enumerate() {
                            let mut row = target.row_mut(r);
                            row += &dy.row(o);
                        }
                    } else {
                        let mut d = Array2::zeros(self.value(*src).dim());
                        for (o, &r) in rows.iter().enumerate() {
                            let mut row = d.row_mut(r);
                            row += &dy.row(o);
                        }
                        acc(&mut g, *src, d);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut g, *b, dy.clone());
                    acc(&mut g, *a, dy);
                }
                Op::AddBias(a, b) => {
                    acc(&mut g, *b, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut g, *a, dy);
                }
                Op::Mul(a, b) => {
                    let da = &dy * &self.value(*b);
                    let db = &dy * &self.value(*a);
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::Scale(a, c) => acc(&mut g, *a, dy * *c),
                Op::ScaleBy(a, s) => {
                    let c = self.scalar(*s);
                    let ds = (&dy * &self.value(*a)).sum();
                    acc(&mut g, *s, Array2::from_elem((1, 1), ds));
                    acc(&mut g, *a, dy * c);
                }
                Op::MatMul(a, b) => {
                    let da = dy.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&dy);
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::MatMulT(a, b) => {
                    // y = a bᵀ: da = dy b, db = dyᵀ a
                    let da = dy.dot(&self.value(*b));
                    let db = dy.t().dot(&self.value(*a));
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::Relu(a) => {
                    let mut d = dy;
                    Zip::from(&mut d).and(&self.value(*a)).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(&mut g, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    acc(&mut g, *bias, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(
                        &mut g,
                        *gain,
                        (&dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    let dxhat = &dy * &self.value(*gain);
                    let d = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(dxhat.dim());
                    for i in 0..dxhat.nrows() {
                        let dr = dxhat.row(i);
                        let xr = xhat.row(i);
                        let m1 = dr.sum() / d;
                        let m2 = dr.dot(&xr) / d;
                        let is = inv_std[i];
                        Zip::from(dx.row_mut(i))
                            .and(&dr)
                            .and(&xr)
                            .for_each(|o, &dv, &xv| *o = is * (dv - m1 - xv * m2));
                    }
                    acc(&mut g, *x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    blocks,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (n, d) = qv.dim();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Array2::zeros((n, d));
                    let mut dk = Array2::zeros((n, d));
                    let mut dv = Array2::zeros((n, d));
                    let mut pi = 0;
                    for &(start, len) in blocks {
                        for h in 0..*heads {
                            let cols = s![start..start + len, h * dh..(h + 1) * dh];
                            let p = &probs[pi];
                            pi += 1;
                            let dout = dy.slice(cols);
                            dv.slice_mut(cols).assign(&p.t().dot(&dout));
                            let dp = dout.dot(&vv.slice(cols).t());
                            // softmax backward, then the 1/sqrt(dh) scale
                            let mut ds = &dp * p;
                            let rs = ds.sum_axis(Axis(1));
                            ds -= &(p * &rs.insert_axis(Axis(1)));
                            ds *= scale;
                            dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                            dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                        }
                    }
                    acc(&mut g, *q, dq);
                    acc(&mut g, *k, dk);
                    acc(&mut g, *v, dv);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).ncols();
                    acc(&mut g, *a, dy.slice(s![.., ..ca]).to_owned());
                    acc(&mut g, *b, dy.slice(s![.., ca..]).to_owned());
                }
                Op::RowDot(a, b) => {
                    let da = &self.value(*b) * &dy;
                    let db = &self.value(*a) * &dy;
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::BroadcastCols(a) => {
                    acc(&mut g, *a, dy.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
                Op::NormalizeRows { x, norms } => {
                    let y = self.nodes[idx].value.as_ref().expect("value");
                    let dots = (&dy * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let dx = (&dy - &(y * &dots)) / norms.view().insert_axis(Axis(1));
                    acc(&mut g, *x, dx);
                }
                Op::Bce {
                    logits,
                    targets,
                    weights,
                } => {
                    let scale = dy[[0, 0]];
                    let z = self.value(*logits);
                    let mut d = Array2::zeros(z.dim());
                    Zip::indexed(&mut d).for_each(|ix, o| {
                        let w = weights.as_ref().map_or(1.0, |w| w[ix]);
                        *o = scale * w * (sigmoid(z[ix]) - targets[ix]);
                    });
                    acc(&mut g, *logits, d);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` w.r.t. every entry of every parameter.
    fn check<F>(params: &mut ParamSet, f: F)
    where
        F: Fn(&mut Tape) -> Var,
    {
        let mut grads = Gradients::new(params.len());
        {
            let mut tape = Tape::new(params);
            let loss = f(&mut tape);
            tape.backward(loss, &mut grads);
        }
        let h = 1e-6;
        for id in params.ids() {
            let analytic = grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(params.get(id).dim()));
            let shape = params.get(id).dim();
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let orig = params.get(id)[[r, c]];
                    params.get_mut(id)[[r, c]] = orig + h;
                    let up = {
                        let mut t = Tape::new(params);
                        let l = f(&mut t);
                        t.scalar(l)
                    };
                    params.get_mut(id)[[r, c]] = orig - h;
                    let down = {
                        let mut t = Tape::new(params);
                        let l = f(&mut t);
                        t.scalar(l)
                    };
                    params.get_mut(id)[[r, c]] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let a = analytic[[r, c]];
                    let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-7);
                    assert!(
                        err < 1e-4 || (a - numeric).abs() < 1e-8,
                        "{} [{r},{c}]: analytic {a} numeric {numeric}",
                        params.name(id)
                    );
                }
            }
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn gradients_of_dense_ops() {
        let mut r = rng();
        let mut p = ParamSet::new();
        let x = p.add_normal("x", (3, 4), 1.0, &mut r);
        let w = p.add_normal("w", (4, 2), 1.0, &mut r);
        let b = p.add_normal("b", (1, 2), 1.0, &mut r);
        let gain = p.add_normal("gain", (1, 4), 1.0, &mut r);
        let beta = p.add_normal("beta", (1, 4), 1.0, &mut r);
        let s = p.add_normal("s", (1, 1), 1.0, &mut r);
        check(&mut p, |t| {
            let xv = t.param(x);
            let gv = t.param(gain);
            let bv0 = t.param(beta);
            let ln = t.layer_norm(xv, gv, bv0);
            let wv = t.param(w);
            let bv = t.param(b);
            let h = t.linear(ln, wv, bv);
            let h = t.relu(h);
            let sv = t.param(s);
            let h = t.scale_by(h, sv);
            let other = t.gather(xv, vec![2, 0, 1]);
            let m = t.mul(other, xv);
            let m = t.matmul(m, wv);
            let tot = t.add(h, m);
            let c = t.concat_cols(tot, h);
            let c2 = t.scale(c, 0.5);
            let targets = Array2::from_shape_fn((3, 4), |(i, j)| ((i + j) % 2) as f64);
            t.bce(c2, targets, None)
        });
    }

    #[test]
    fn gradients_of_attention_and_similarity_ops() {
        let mut r = rng();
        let mut p = ParamSet::new();
        let x = p.add_normal("x", (5, 4), 1.0, &mut r);
        let wq = p.add_normal("wq", (4, 4), 0.7, &mut r);
        let wk = p.add_normal("wk", (4, 4), 0.7, &mut r);
        let y = p.add_normal("y", (2, 4), 1.0, &mut r);
        check(&mut p, |t| {
            let xv = t.param(x);
            let q = {
                let w = t.param(wq);
                t.matmul(xv, w)
            };
            let k = {
                let w = t.param(wk);
                t.matmul(xv, w)
            };
            let a = t.attention(q, k, xv, vec![(0, 3), (3, 2)], 2);
            let n = t.normalize_rows(a);
            let yv = t.param(y);
            let yn = t.normalize_rows(yv);
            let sim = t.matmul_t(n, yn);
            let cls = t.gather(a, vec![0, 3]);
            let d = t.row_dot(cls, yv);
            let d = t.broadcast_cols(d, 5);
            let mut targets = Array2::zeros((5, 2));
            targets[[1, 0]] = 1.0;
            let weights = Array2::from_shape_fn((5, 2), |(i, _)| 1.0 + i as f64);
            let l1 = t.bce(sim, targets, Some(weights));
            let l2 = t.bce(d, Array2::ones((2, 5)), None);
            t.add(l1, l2)
        });
    }

    #[test]
    fn bce_is_stable_and_zero_at_optimum() {
        assert!(bce_with_logits(40.0, 1.0) < 1e-15);
        assert!(bce_with_logits(-40.0, 0.0) < 1e-15);
        assert!((bce_with_logits(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!(bce_with_logits(-800.0, 1.0).is_finite());
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
