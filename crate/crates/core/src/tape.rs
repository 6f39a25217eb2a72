//! Minimal reverse-mode automatic differentiation over `f64` matrices.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order for backpropagation. Loss functions are
//! recorded as fused nodes carrying their analytic input gradients.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, xhat: Array2<f64>, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Scatter { tokens: Var, fill: Var, positions: Vec<usize> },
    MeanRows(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    WeightedSum(Vec<(Var, f64)>),
    Fused(Vec<(Var, Array2<f64>)>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-6;
const NORM_EPS: f64 = 1e-12;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Bind a named parameter. Repeated binds of the same name return the
    /// same node, so gradients from every use accumulate on one leaf.
    pub fn param(&mut self, name: &str, value: &Array2<f64>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// `a + row` with `row` (1 x n) broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a) * factor;
        self.push(v, Op::Scale(a, factor))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    /// Row-wise standardization (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.outer_iter_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = xhat.clone();
        self.push(value, Op::LayerNorm { x, xhat, inv_std })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.outer_iter_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row /= s;
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols { x: a, start })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows { x: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Place row `i` of `tokens` at output row `positions[i]`; every other
    /// output row is a copy of `fill` (1 x d).
    pub fn scatter_rows(&mut self, tokens: Var, fill: Var, positions: &[usize], n_total: usize) -> Result<Var> {
        let t = self.value(tokens);
        let f = self.value(fill);
        if t.nrows() != positions.len() {
            return Err(Error::Dimension(format!(
                "{} tokens for {} positions",
                t.nrows(),
                positions.len()
            )));
        }
        if f.nrows() != 1 || (t.nrows() > 0 && t.ncols() != f.ncols()) {
            return Err(Error::Dimension("fill row width does not match tokens".into()));
        }
        let mut out = Array2::<f64>::zeros((n_total, f.ncols()));
        for mut row in out.outer_iter_mut() {
            row.assign(&f.row(0));
        }
        for (i, &p) in positions.iter().enumerate() {
            if p >= n_total {
                return Err(Error::Dimension(format!("position {p} >= {n_total}")));
            }
            out.row_mut(p).assign(&t.row(i));
        }
        Ok(self.push(
            out,
            Op::Scatter {
                tokens,
                fill,
                positions: positions.to_vec(),
            },
        ))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean of empty token set")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let mut norms = Vec::with_capacity(v.nrows());
        for mut row in v.outer_iter_mut() {
            let n = row.dot(&row).sqrt().max(NORM_EPS);
            row /= n;
            norms.push(n);
        }
        self.push(v, Op::L2NormalizeRows { x: a, norms })
    }

    /// Weighted sum of 1 x 1 scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total: f64 = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        self.push(Array2::from_elem((1, 1), total), Op::WeightedSum(terms.to_vec()))
    }

    /// A scalar node whose gradient with respect to each input is given.
    pub fn fused(&mut self, value: f64, input_grads: Vec<(Var, Array2<f64>)>) -> Var {
        self.push(Array2::from_elem((1, 1), value), Op::Fused(input_grads))
    }

    /// Backpropagate from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ga = &g * self.value(*row);
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g * *f),
                Op::Gelu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |gi, &x| *gi *= gelu_grad(x));
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, xhat, inv_std } => {
                    let n = xhat.ncols() as f64;
                    let mut gx = Array2::<f64>::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let gy = g.row(r);
                        let xh = xhat.row(r);
                        let sum_g = gy.sum();
                        let sum_gx = gy.dot(&xh);
                        for c in 0..xhat.ncols() {
                            gx[[r, c]] = inv_std[r] / n * (n * gy[c] - sum_g - xh[c] * sum_gx);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Array2::<f64>::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot = g.row(r).dot(&y.row(r));
                        for c in 0..y.ncols() {
                            ga[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::SliceCols { x, start } => {
                    let mut gx = Array2::<f64>::zeros(self.value(*x).dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::SliceRows { x, start } => {
                    let mut gx = Array2::<f64>::zeros(self.value(*x).dim());
                    gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::Scatter {
                    tokens,
                    fill,
                    positions,
                } => {
                    let d = g.ncols();
                    let mut gt = Array2::<f64>::zeros((positions.len(), d));
                    let mut is_visible = vec![false; g.nrows()];
                    for (i, &p) in positions.iter().enumerate() {
                        gt.row_mut(i).assign(&g.row(p));
                        is_visible[p] = true;
                    }
                    let mut gf = Array2::<f64>::zeros((1, d));
                    for (r, vis) in is_visible.iter().enumerate() {
                        if !vis {
                            let mut row = gf.row_mut(0);
                            row += &g.row(r);
                        }
                    }
                    acc(&mut grads, *tokens, gt);
                    acc(&mut grads, *fill, gf);
                }
                Op::MeanRows(a) => {
                    let rows = self.value(*a).nrows();
                    let ga = Array2::from_shape_fn((rows, g.ncols()), |(_, c)| g[[0, c]] / rows as f64);
                    acc(&mut grads, *a, ga);
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut gx = Array2::<f64>::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot = g.row(r).dot(&y.row(r));
                        for c in 0..y.ncols() {
                            gx[[r, c]] = (g[[r, c]] - y[[r, c]] * dot) / norms[r];
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::WeightedSum(terms) => {
                    let up = g[[0, 0]];
                    for &(v, w) in terms {
                        acc(&mut grads, v, Array2::from_elem((1, 1), up * w));
                    }
                }
                Op::Fused(inputs) => {
                    let up = g[[0, 0]];
                    for (v, gi) in inputs {
                        acc(&mut grads, *v, gi * up);
                    }
                }
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of all bound parameters, keyed by name.
    pub fn for_params(&self, tape: &Tape) -> BTreeMap<String, Array2<f64>> {
        tape.bound_params()
            .iter()
            .filter_map(|(name, &v)| self.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Build a scalar from `x` through `f`, compare tape gradient with
    /// central differences.
    fn check<F>(x0: Array2<f64>, f: F)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let x = tape.param("x", &x0);
        let out = f(&mut tape, x);
        let grads = tape.backward(out);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Array2::zeros(x0.dim()));
        let h = 1e-6;
        let eval = |xv: &Array2<f64>| {
            let mut t = Tape::new();
            let x = t.param("x", xv);
            let o = f(&mut t, x);
            t.scalar(o)
        };
        let mut num = Array2::<f64>::zeros(x0.dim());
        for idx in 0..x0.len() {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            num.as_slice_mut().unwrap()[idx] = (eval(&xp) - eval(&xm)) / (2.0 * h);
        }
        let diff = (&analytic - &num).mapv(|v| v * v).sum().sqrt();
        let scale = analytic.mapv(|v| v * v).sum().sqrt().max(num.mapv(|v| v * v).sum().sqrt());
        assert!(diff <= 1e-6 * scale.max(1e-8), "rel err {} (scale {scale})", diff / scale);
    }

    fn reduce(t: &mut Tape, v: Var, w: &Array2<f64>) -> Var {
        // weighted sum of all entries via a fixed random weight
        let wv = t.constant(w.clone());
        let prod = t.matmul(v, wv);
        let rows = t.mean_rows(prod);
        let ones = t.constant(Array2::ones((rows_dim(t, rows), 1)));
        t.matmul(rows, ones)
    }

    fn rows_dim(t: &Tape, v: Var) -> usize {
        t.value(v).ncols()
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = rand_mat(4, 6, &mut rng);
        let w = rand_mat(6, 3, &mut rng);
        let w6 = rand_mat(6, 6, &mut rng);
        let row = rand_mat(1, 6, &mut rng);

        check(x0.clone(), |t, x| {
            let y = t.gelu(x);
            reduce(t, y, &w)
        });
        check(x0.clone(), |t, x| {
            let y = t.layer_norm(x);
            reduce(t, y, &w)
        });
        check(x0.clone(), |t, x| {
            let y = t.softmax_rows(x);
            reduce(t, y, &w)
        });
        check(x0.clone(), |t, x| {
            let y = t.l2_normalize_rows(x);
            reduce(t, y, &w)
        });
        check(x0.clone(), |t, x| {
            let r = t.constant(row.clone());
            let y = t.mul_row(x, r);
            let y = t.add_row(y, r);
            reduce(t, y, &w)
        });
        check(x0.clone(), |t, x| {
            let xt = t.transpose(x);
            let a = t.matmul(x, xt);
            let sm = t.softmax_rows(a);
            let y = t.matmul(sm, x);
            reduce(t, y, &w)
        });
        check(x0.clone(), |t, x| {
            let a = t.slice_cols(x, 1, 3);
            let b = t.slice_cols(x, 4, 2);
            let c = t.slice_rows(x, 1, 2);
            let ab = t.concat_cols(&[a, b]);
            let c2 = t.slice_cols(c, 0, 5);
            let r = t.concat_rows(&[ab, c2]);
            let wv = t.constant(w6.slice(s![..5, ..]).to_owned());
            let p = t.matmul(r, wv);
            let m = t.mean_rows(p);
            let ones = t.constant(Array2::ones((6, 1)));
            t.matmul(m, ones)
        });
        check(x0.clone(), |t, x| {
            let tok = t.slice_rows(x, 0, 2);
            let fill = t.slice_rows(x, 3, 1);
            let y = t.scatter_rows(tok, fill, &[4, 1], 5).unwrap();
            reduce(t, y, &w)
        });
        check(x0, |t, x| {
            let a = t.scale(x, 0.3);
            let b = t.add(a, x);
            let s1 = reduce(t, b, &w);
            let s2 = reduce(t, x, &w);
            t.weighted_sum(&[(s1, 2.0), (s2, -0.5)])
        });
    }

    #[test]
    fn repeated_param_bind_accumulates() {
        let mut t = Tape::new();
        let p = Array2::from_elem((1, 1), 3.0);
        let a = t.param("p", &p);
        let b = t.param("p", &p);
        assert_eq!(a, b);
        let s = t.weighted_sum(&[(a, 2.0), (b, 5.0)]);
        let g = t.backward(s);
        assert_eq!(g.get(a).unwrap()[[0, 0]], 7.0);
    }
}
