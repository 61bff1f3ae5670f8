//! Reverse-mode differentiation over small dense matrix graphs.
//!
//! A [`Tape`] records one loss evaluation. Nodes hold matrix values (batch
//! rows by feature columns); the tape is rebuilt for every evaluation.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a` (r×c) plus a 1×c row broadcast over rows.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Exp(Var),
    Softplus(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Column(Var, usize),
    Concat(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node after a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v` (zeros when `v` does not
    /// influence the loss).
    pub fn wrt(&self, v: Var) -> Array2<f64> {
        match &self.adjoints[v.0] {
            Some(a) => a.clone(),
            None => Array2::zeros(self.shapes[v.0]),
        }
    }
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else if v < -30.0 {
        v.exp()
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Parameters and constants both enter as leaves.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).row(0).to_owned();
        let v = self.value(a) + &r;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// log(1 + e^a), elementwise.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        self.push(v, Op::Softplus(a))
    }

    /// log σ(a) = -softplus(-a).
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let na = self.scale(a, -1.0);
        let sp = self.softplus(na);
        self.scale(sp, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let val = self.value(a);
        let s = val.sum() / val.len().max(1) as f64;
        self.push(Array2::from_elem((1, 1), s), Op::Mean(a))
    }

    pub fn column(&mut self, a: Var, j: usize) -> Var {
        let col = self.value(a).column(j).to_owned().insert_axis(Axis(1));
        self.push(col, Op::Column(a, j))
    }

    /// Horizontal concatenation. All parts must share the row count.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat: row counts differ");
        self.push(v, Op::Concat(parts.to_vec()))
    }

    /// Backward sweep from a scalar loss.
    pub fn grad(&self, loss: Var) -> Result<Gradients> {
        let shape = self.nodes[loss.0].value.dim();
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "gradient requested for non-scalar loss of shape {shape:?}"
            )));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Array2::ones((1, 1)));

        fn acc(adj: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut adj[v.0] {
                Some(a) => *a += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..n).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut adj, *row, gr);
                    acc(&mut adj, *a, g.clone());
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *b, -&g);
                    acc(&mut adj, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut adj, *a, &g * *c),
                Op::Tanh(a) => {
                    let d = node.value.mapv(|t| 1.0 - t * t);
                    acc(&mut adj, *a, &g * &d);
                }
                Op::Exp(a) => acc(&mut adj, *a, &g * &node.value),
                Op::Softplus(a) => {
                    let d = self.value(*a).mapv(sigmoid);
                    acc(&mut adj, *a, &g * &d);
                }
                Op::Square(a) => {
                    let d = self.value(*a) * 2.0;
                    acc(&mut adj, *a, &g * &d);
                }
                Op::Clamp(a, lo, hi) => {
                    let mask = self
                        .value(*a)
                        .mapv(|x| if x >= *lo && x <= *hi { 1.0 } else { 0.0 });
                    acc(&mut adj, *a, &g * &mask);
                }
                Op::Sum(a) => {
                    let s = g[[0, 0]];
                    acc(&mut adj, *a, Array2::from_elem(self.value(*a).dim(), s));
                }
                Op::Mean(a) => {
                    let dim = self.value(*a).dim();
                    let s = g[[0, 0]] / (dim.0 * dim.1).max(1) as f64;
                    acc(&mut adj, *a, Array2::from_elem(dim, s));
                }
                Op::Column(a, j) => {
                    let mut full = Array2::zeros(self.value(*a).dim());
                    full.column_mut(*j).assign(&g.column(0));
                    acc(&mut adj, *a, full);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        let slice = g.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        acc(&mut adj, *p, slice);
                        offset += w;
                    }
                }
            }
            adj[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.dim()).collect();
        Ok(Gradients {
            adjoints: adj,
            shapes,
        })
    }
}

/// Maximum relative discrepancy between an analytic gradient and central
/// differences of `f` with step `h`. Relative error uses `max(|a|, |b|, 1e-3)`
/// in the denominator so that near-zero gradients compare absolutely.
pub fn max_rel_grad_error(
    f: &mut dyn FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    h: f64,
) -> f64 {
    let mut p = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let fp = f(&p);
        p[i] = orig - h;
        let fm = f(&p);
        p[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let denom = fd.abs().max(analytic[i].abs()).max(1e-3);
        worst = worst.max((fd - analytic[i]).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use ndarray::array;

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let p = t.leaf(array![[3.0]]);
        let l = t.square(p);
        let s = t.sum(l);
        let g = t.grad(s).unwrap();
        assert_eq!(g.wrt(p)[[0, 0]], 6.0);
    }

    #[test]
    fn log_sigmoid_gradient_at_zero() {
        let mut t = Tape::new();
        let p = t.leaf(array![[0.0]]);
        let l = t.log_sigmoid(p);
        let g = t.grad(l).unwrap();
        assert!((g.wrt(p)[[0, 0]] - 0.5).abs() < 1e-15);
        assert!((t.scalar(l) - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut t = Tape::new();
        let p = t.leaf(array![[1.0, 2.0]]);
        let q = t.tanh(p);
        assert!(matches!(t.grad(q), Err(Error::Contract(_))));
    }

    #[test]
    fn unreached_leaf_has_zero_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(array![[1.0, 2.0]]);
        let b = t.leaf(array![[5.0]]);
        let s = t.sum(a);
        let g = t.grad(s).unwrap();
        assert_eq!(g.wrt(b), array![[0.0]]);
    }

    fn two_layer_loss(t: &mut Tape, x: &Array2<f64>, params: &[Array2<f64>]) -> (Var, Vec<Var>) {
        let vars: Vec<Var> = params.iter().map(|p| t.leaf(p.clone())).collect();
        let xv = t.leaf(x.clone());
        let h = t.matmul(xv, vars[0]);
        let h = t.add_row(h, vars[1]);
        let h = t.tanh(h);
        let o = t.matmul(h, vars[2]);
        let o = t.add_row(o, vars[3]);
        let c0 = t.column(o, 0);
        let c1 = t.column(o, 1);
        let c1 = t.clamp(c1, -2.0, 2.0);
        let e = t.exp(c1);
        let prod = t.mul(c0, e);
        let sp = t.softplus(prod);
        let sq = t.square(c0);
        let both = t.concat(&[sp, sq]);
        let diff = t.sub(both, both);
        let tot = t.add(both, diff);
        let m = t.mean(tot);
        (m, vars)
    }

    #[test]
    fn random_two_layer_network_matches_finite_differences() {
        let mut rng = RngStream::new(5, 0);
        let mut mk = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| 0.7 * rng.normal())
        };
        let x = mk(7, 3);
        let params = vec![mk(3, 5), mk(1, 5), mk(5, 2), mk(1, 2)];
        let mut t = Tape::new();
        let (loss, vars) = two_layer_loss(&mut t, &x, &params);
        let g = t.grad(loss).unwrap();

        let flat: Vec<f64> = params.iter().flat_map(|p| p.iter().copied()).collect();
        let analytic: Vec<f64> = vars.iter().flat_map(|&v| g.wrt(v).into_iter()).collect();
        let shapes: Vec<_> = params.iter().map(|p| p.dim()).collect();
        let mut f = |w: &[f64]| {
            let mut off = 0;
            let ps: Vec<Array2<f64>> = shapes
                .iter()
                .map(|&(r, c)| {
                    let a = Array2::from_shape_vec((r, c), w[off..off + r * c].to_vec()).unwrap();
                    off += r * c;
                    a
                })
                .collect();
            let mut t = Tape::new();
            let (l, _) = two_layer_loss(&mut t, &x, &ps);
            t.scalar(l)
        };
        let err = max_rel_grad_error(&mut f, &flat, &analytic, 1e-5);
        assert!(err < 1e-4, "max relative error {err}");
    }
}
