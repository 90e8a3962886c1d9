//! Minimal reverse-mode autodiff over `ndarray` matrices.
//!
//! Every value is an `Array2<f64>`; vectors travel as 1×n rows. A [`Tape`]
//! records the forward computation and [`Tape::backward`] walks it in
//! reverse, accumulating gradients for the leaves that asked for them.
//! The op set is exactly what the denoiser architectures need; it is not a
//! general tensor library.

use ndarray::{concatenate, Array2, Axis};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf { needs_grad: bool },
    MatMul(Var, Var),
    Add(Var, Var),
    /// a: m×n plus a 1×n row broadcast over rows.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// a: m×n times a 1×n row broadcast over rows.
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Silu(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, f64),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    Transpose(Var),
    Sum(Var),
    MeanAbsDiff(Var, Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Forward computation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input: participates in the forward pass only.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf { needs_grad: false })
    }

    /// Leaf whose gradient is wanted (a model parameter).
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf { needs_grad: true })
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let d = self.nodes[v.0].value.dim();
        (d.0, d.1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(value, Op::Silu(a))
    }

    /// Row-wise softmax with max subtraction. A single-column input maps to
    /// exactly 1.0 per row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Row-wise layer norm (no affine; compose with mul_row/add_row for a
    /// learned gain and bias).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let mean: f64 = row.sum() / n;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let denom = (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) / denom);
        }
        self.push(value, Op::LayerNormRows(a, eps))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat shape mismatch");
        self.push(value, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self
            .value(a)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(value, Op::SliceCols(a, start, len))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    /// Sum of all entries as a 1×1 matrix.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Mean of |a - b| over all entries, as a 1×1 matrix.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let diff = self.value(a) - self.value(b);
        let n = diff.len() as f64;
        let value = Array2::from_elem((1, 1), diff.mapv(f64::abs).sum() / n);
        self.push(value, Op::MeanAbsDiff(a, b))
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[(0, 0)]
    }

    /// Reverse pass from a scalar node. Returns one gradient slot per node;
    /// only leaves created with [`Tape::leaf`] are guaranteed populated.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.dim(),
            (1, 1),
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf { needs_grad } => {
                    if *needs_grad {
                        grads[i] = Some(g);
                    }
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let grow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *row, grow);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulRow(a, row) => {
                    let ga = &g * &self.nodes[row.0].value;
                    let grow = (&g * &self.nodes[a.0].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *row, grow);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g * *c);
                }
                Op::Relu(a) => {
                    let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, g * &mask);
                }
                Op::Silu(a) => {
                    let deriv = self.nodes[a.0]
                        .value
                        .mapv(|x| {
                            let s = sigmoid(x);
                            s * (1.0 + x * (1.0 - s))
                        });
                    accumulate(&mut grads, *a, g * &deriv);
                }
                Op::SoftmaxRows(a) => {
                    // dx = (g - rowsum(g*y)) * y
                    let y = &self.nodes[i].value;
                    let gy = &g * y;
                    let rowsum = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = (&g - &rowsum) * y;
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNormRows(a, eps) => {
                    let x = &self.nodes[a.0].value;
                    let y = &self.nodes[i].value;
                    let n = x.ncols() as f64;
                    let mut ga = Array2::zeros(x.raw_dim());
                    for (r, xrow) in x.rows().into_iter().enumerate() {
                        let mean: f64 = xrow.sum() / n;
                        let var: f64 =
                            xrow.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                        let denom = (var + eps).sqrt();
                        let grow = g.row(r);
                        let yrow = y.row(r);
                        let gmean: f64 = grow.sum() / n;
                        let gydot: f64 =
                            grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..x.ncols() {
                            ga[(r, c)] = (grow[c] - gmean - yrow[c] * gydot) / denom;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let na = self.nodes[a.0].value.ncols();
                    let ga = g.slice(ndarray::s![.., ..na]).to_owned();
                    let gb = g.slice(ndarray::s![.., na..]).to_owned();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::SliceCols(a, start, len) => {
                    let mut ga = Array2::zeros(self.nodes[a.0].value.raw_dim());
                    ga.slice_mut(ndarray::s![.., *start..start + len])
                        .assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.t().to_owned());
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.nodes[a.0].value.raw_dim(), g[(0, 0)]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::MeanAbsDiff(a, b) => {
                    let diff = &self.nodes[a.0].value - &self.nodes[b.0].value;
                    let n = diff.len() as f64;
                    let ga = diff.mapv(|d| g[(0, 0)] * d.signum() / n);
                    accumulate(&mut grads, *b, -ga.clone());
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Gradients { slots: grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    slots: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a leaf; zero-shaped leaves that never
    /// influenced the loss return None.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.slots[v.0].as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn randn(rng: &mut ChaCha12Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences through an arbitrary tape program for a
    /// single leaf, compared against the analytic gradient.
    fn finite_diff_check<F>(x0: Array2<f64>, build: F, tol: f64)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let loss = build(&mut tape, x);
        let analytic = tape.backward(loss).get(x).unwrap().clone();

        let h = 1e-6;
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp[(r, c)] += delta;
                let mut t = Tape::new();
                let v = t.leaf(xp);
                let l = build(&mut t, v);
                t.scalar(l)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[(r, c)];
            let denom = fd.abs().max(a.abs()).max(1e-8);
            assert!(
                ((fd - a) / denom).abs() < tol,
                "grad mismatch at ({r},{c}): fd={fd} analytic={a}"
            );
        }
    }

    #[test]
    fn matmul_and_bias_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let x0 = randn(&mut rng, 3, 4);
        let w = randn(&mut rng, 4, 2);
        let b = randn(&mut rng, 1, 2);
        let probe = randn(&mut rng, 3, 2);
        finite_diff_check(
            x0,
            move |t, x| {
                let wv = t.constant(w.clone());
                let bv = t.constant(b.clone());
                let y = t.matmul(x, wv);
                let y = t.add_row(y, bv);
                let p = t.constant(probe.clone());
                let m = t.mul(y, p);
                t.sum(m)
            },
            1e-5,
        );
    }

    #[test]
    fn activation_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        // Keep values away from the ReLU kink so finite differences agree.
        let x0 = randn(&mut rng, 2, 5).mapv(|v| v + 0.3 * v.signum());
        let probe = randn(&mut rng, 2, 5);
        let p2 = probe.clone();
        finite_diff_check(
            x0.clone(),
            move |t, x| {
                let y = t.relu(x);
                let p = t.constant(probe.clone());
                let m = t.mul(y, p);
                t.sum(m)
            },
            1e-4,
        );
        finite_diff_check(
            x0,
            move |t, x| {
                let y = t.silu(x);
                let p = t.constant(p2.clone());
                let m = t.mul(y, p);
                t.sum(m)
            },
            1e-5,
        );
    }

    #[test]
    fn softmax_and_layer_norm_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x0 = randn(&mut rng, 3, 4);
        let probe = randn(&mut rng, 3, 4);
        let p2 = probe.clone();
        finite_diff_check(
            x0.clone(),
            move |t, x| {
                let y = t.softmax_rows(x);
                let p = t.constant(probe.clone());
                let m = t.mul(y, p);
                t.sum(m)
            },
            1e-5,
        );
        finite_diff_check(
            x0,
            move |t, x| {
                let y = t.layer_norm_rows(x, 1e-5);
                let p = t.constant(p2.clone());
                let m = t.mul(y, p);
                t.sum(m)
            },
            1e-4,
        );
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x0 = randn(&mut rng, 3, 6);
        let other = randn(&mut rng, 3, 2);
        let probe = randn(&mut rng, 2, 8);
        finite_diff_check(
            x0,
            move |t, x| {
                let o = t.constant(other.clone());
                let cat = t.concat_cols(x, o);
                let sl = t.slice_cols(cat, 1, 7);
                // reuse x through two paths to exercise accumulation
                let tr = t.transpose(sl);
                let p = t.constant(probe.clone());
                let m = t.mul(tr, p);
                t.sum(m)
            },
            1e-5,
        );
    }

    #[test]
    fn mean_abs_diff_gradient() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x0 = randn(&mut rng, 4, 3);
        let target = randn(&mut rng, 4, 3) + 5.0; // keep |diff| away from 0
        finite_diff_check(
            x0,
            move |t, x| {
                let tv = t.constant(target.clone());
                t.mean_abs_diff(x, tv)
            },
            1e-5,
        );
    }

    #[test]
    fn softmax_single_column_is_exactly_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Array2::from_shape_vec((3, 1), vec![-2.0, 0.0, 7.5]).unwrap());
        let y = tape.softmax_rows(x);
        assert!(tape.value(y).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f(x) = sum(x*x) + sum(x) has gradient 2x + 1.
        let x0 = Array2::from_shape_vec((1, 3), vec![1.0, -2.0, 0.5]).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let sq = tape.mul(x, x);
        let s1 = tape.sum(sq);
        let s2 = tape.sum(x);
        let loss = tape.add(s1, s2);
        let g = tape.backward(loss);
        let expected = x0.mapv(|v| 2.0 * v + 1.0);
        let got = g.get(x).unwrap();
        for (a, b) in got.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
