//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node returns the gradient of that scalar with
//! respect to every node on the tape. Scalars are `1 x 1` matrices.

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SoftmaxNll(Var, Vec<usize>),
    LogMeanExp(Var, Option<f64>),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Mat {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Mat::zeros(self.shapes[v.0]),
        }
    }
}

fn softmax_rows(logits: &Mat) -> Mat {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let total = row.sum();
        row.mapv_inplace(|x| x / total);
    }
    p
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn scalar(x: f64) -> Mat {
    Mat::from_elem((1, 1), x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Gradients with respect to it are available after
    /// [`Tape::backward`]; constants are simply leaves whose gradient is ignored.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, x: f64) -> Var {
        self.leaf(scalar(x))
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a + bias` with `bias` of shape `1 x cols` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let value = self.value(a) + self.value(bias);
        self.push(value, Op::AddBias(a, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        self.push(value, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        self.push(value, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    /// Natural log; inputs must be positive.
    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.push(value, Op::Ln(a))
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        self.push(value, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = m.len().max(1) as f64;
        let value = scalar(m.sum() / n);
        self.push(value, Op::Mean(a))
    }

    /// Sum over columns, giving a `rows x 1` matrix.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::RowSum(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), rows);
        self.push(value, Op::GatherRows(a, rows.to_vec()))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_nll(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lsm = log_softmax_rows(self.value(logits));
        assert_eq!(lsm.nrows(), labels.len(), "softmax_nll: label count");
        let n = labels.len().max(1) as f64;
        let total: f64 = labels.iter().enumerate().map(|(k, &y)| -lsm[[k, y]]).sum();
        self.push(scalar(total / n), Op::SoftmaxNll(logits, labels.to_vec()))
    }

    /// `ln(mean(exp(a)))` over all entries of `a`.
    ///
    /// With `denominator = Some(d)` the backward pass uses `d` in place of the
    /// batch value of `mean(exp(a))`; the forward value is unchanged.
    pub fn log_mean_exp(&mut self, a: Var, denominator: Option<f64>) -> Var {
        let m = self.value(a);
        let max = m.fold(f64::NEG_INFINITY, |x, &y| x.max(y));
        let n = m.len().max(1) as f64;
        let value = max + (m.iter().map(|&x| (x - max).exp()).sum::<f64>() / n).ln();
        self.push(scalar(value), Op::LogMeanExp(a, denominator))
    }

    /// Reverse pass from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Mat::ones(self.shape(loss)));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddBias(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *a, g.clone());
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, &g * *c),
                Op::AddScalar(a) => acc(&mut grads, *a, g.clone()),
                Op::Tanh(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(&node.value).for_each(|gi, &y| *gi *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gi, &x| if x <= 0.0 { *gi = 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gi, &x| *gi *= sigmoid(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, &g * &node.value),
                Op::Ln(a) => acc(&mut grads, *a, &g / self.value(*a)),
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gi, &x| {
                        if x < *lo || x > *hi {
                            *gi = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Square(a) => acc(&mut grads, *a, &g * &(self.value(*a) * 2.0)),
                Op::Sum(a) => {
                    let ga = Mat::from_elem(self.shape(*a), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let shape = self.shape(*a);
                    let n = (shape.0 * shape.1).max(1) as f64;
                    acc(&mut grads, *a, Mat::from_elem(shape, g[[0, 0]] / n));
                }
                Op::RowSum(a) => {
                    let (rows, cols) = self.shape(*a);
                    let ga = Mat::from_shape_fn((rows, cols), |(r, _)| g[[r, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        acc(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    let w = g.ncols();
                    ga.slice_mut(s![.., *start..*start + w]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, rows) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(k);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxNll(logits, labels) => {
                    let mut p = softmax_rows(self.value(*logits));
                    let n = labels.len().max(1) as f64;
                    for (k, &y) in labels.iter().enumerate() {
                        p[[k, y]] -= 1.0;
                    }
                    p *= g[[0, 0]] / n;
                    acc(&mut grads, *logits, p);
                }
                Op::LogMeanExp(a, denominator) => {
                    let m = self.value(*a);
                    let n = m.len().max(1) as f64;
                    let log_denom = match denominator {
                        Some(d) => d.ln(),
                        None => node.value[[0, 0]],
                    };
                    let ga = m.mapv(|x| g[[0, 0]] * (x - log_denom).exp() / n);
                    acc(&mut grads, *a, ga);
                }
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.dim()).collect();
        let mut grads = grads;
        grads.resize(self.nodes.len(), None);
        Grads { grads, shapes }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn random(rng: &mut rand_chacha::ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.5..1.5))
    }

    /// Central-difference check of d(build(x))/dx for a scalar-valued graph.
    fn check(x0: Mat, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = build(&mut tape, x);
        let analytic = tape.backward(y).wrt(x);
        let h = 1e-6;
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp[[r, c]] += delta;
                let mut t = Tape::new();
                let x = t.leaf(xp);
                let y = build(&mut t, x);
                t.scalar(y)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[[r, c]];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "entry ({r},{c}): analytic {a} numeric {numeric}");
        }
    }

    #[test]
    fn matmul_bias_tanh_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let w = random(&mut rng, 3, 2);
        let b = random(&mut rng, 1, 2);
        check(random(&mut rng, 4, 3), |t, x| {
            let w = t.leaf(w.clone());
            let b = t.leaf(b.clone());
            let h = t.matmul(x, w);
            let h = t.add_bias(h, b);
            let h = t.tanh(h);
            let h = t.square(h);
            t.sum(h)
        });
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let other = random(&mut rng, 3, 3);
        check(random(&mut rng, 3, 3), |t, x| {
            let o = t.leaf(other.clone());
            let a = t.mul(x, o);
            let b = t.exp(x);
            let c = t.softplus(a);
            let c = t.ln(c);
            let d = t.sub(b, c);
            let d = t.scale(d, 0.7);
            let d = t.add_scalar(d, 2.0);
            let e = t.row_sum(d);
            let e = t.square(e);
            t.mean(e)
        });
    }

    #[test]
    fn structural_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        check(random(&mut rng, 4, 3), |t, x| {
            let g = t.gather_rows(x, &[2, 0, 2, 3]);
            let a = t.slice_cols(g, 1, 2);
            let b = t.concat_cols(&[a, g]);
            let b = t.tanh(b);
            let b = t.square(b);
            t.sum(b)
        });
    }

    #[test]
    fn softmax_nll_and_log_mean_exp_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        check(random(&mut rng, 5, 3), |t, x| t.softmax_nll(x, &[0, 2, 1, 1, 0]));
        check(random(&mut rng, 6, 1), |t, x| t.log_mean_exp(x, None));
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut t = Tape::new();
        let x = t.leaf(array![[-20.0, 0.5, 20.0]]);
        let c = t.clamp(x, -10.0, 10.0);
        let s = t.sum(c);
        let g = t.backward(s).wrt(x);
        assert_eq!(g, array![[0.0, 1.0, 0.0]]);
        assert_eq!(t.value(c), &array![[-10.0, 0.5, 10.0]]);
    }

    #[test]
    fn log_mean_exp_with_fixed_denominator() {
        let mut t = Tape::new();
        let x = t.leaf(array![[0.0], [0.0]]);
        let y = t.log_mean_exp(x, Some(2.0));
        assert!(t.scalar(y).abs() < 1e-15);
        let g = t.backward(y).wrt(x);
        // exp(0) / (2 * 2)
        assert!((g[[0, 0]] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0]]);
        let unused = t.leaf(array![[3.0]]);
        let s = t.sum(x);
        let g = t.backward(s);
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused), array![[0.0]]);
    }
}
