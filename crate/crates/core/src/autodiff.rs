//! Reverse-mode automatic differentiation on matrix-valued nodes.
//!
//! The tape is an append-only record of primitive operations; a single
//! backward pass accumulates adjoints for every parameter leaf into a
//! flat gradient vector. Primitives cover exactly what the model needs:
//! dense arithmetic, matmul, matexp (Frechet adjoint via the augmented
//! block matrix), Cholesky, PSD solve, log-determinant, the usual
//! activations and reductions, and small structural ops.

use crate::error::{Error, Result};
use crate::mat::{cholesky, matexp, CholFactor, Mat};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
pub enum AsmEntry {
    /// Constant entry.
    C(f64),
    /// Scalar (1x1) node.
    V(Var),
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    /// Parameter leaf; adjoints land at this offset of the gradient vector.
    Leaf { offset: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Neg(usize),
    /// Elementwise; either operand may be 1x1 and broadcasts.
    Mul(usize, usize),
    /// Elementwise; denominator may be 1x1 and broadcasts.
    Div(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    MatExp(usize),
    /// Lower Cholesky factor (jitter ladder as in matcore).
    Chol { a: usize },
    SolvePsd { a: usize, b: usize, chol: CholFactor },
    LogDetPsd { a: usize, chol: CholFactor },
    Ln(usize),
    Exp(usize),
    Sqrt(usize),
    Softplus(usize),
    Relu(usize),
    Tanh(usize),
    /// Sum of all entries, yielding 1x1.
    Sum(usize),
    Scale(usize, f64),
    Slice { src: usize, r0: usize, c0: usize },
    Assemble { entries: Vec<AsmEntry> },
    /// value = M + diag(v) for a column vector v.
    AddDiag { m: usize, v: usize },
    /// value = I_n (x) src.
    KronId { n_blocks: usize, src: usize },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Append-only computation tape.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_scalar()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Const)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Mat::scalar(x))
    }

    /// Parameter leaf whose adjoint accumulates into
    /// grad[offset .. offset + rows*cols] in row-major order.
    pub fn leaf(&mut self, m: Mat, offset: usize) -> Var {
        self.push(m, Op::Leaf { offset })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.add(&self.nodes[b.0].value);
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.sub(&self.nodes[b.0].value);
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.neg();
        self.push(v, Op::Neg(a.0))
    }

    fn broadcast_apply(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        if a.shape() == b.shape() {
            let mut out = a.clone();
            for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
                *x = f(*x, *y);
            }
            out
        } else if b.shape() == (1, 1) {
            let s = b.as_scalar();
            let mut out = a.clone();
            for x in out.data_mut() {
                *x = f(*x, s);
            }
            out
        } else if a.shape() == (1, 1) {
            let s = a.as_scalar();
            let mut out = b.clone();
            for x in out.data_mut() {
                *x = f(s, *x);
            }
            out
        } else {
            panic!(
                "elementwise op shape mismatch: {:?} vs {:?}",
                a.shape(),
                b.shape()
            );
        }
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = Self::broadcast_apply(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = Self::broadcast_apply(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x / y);
        self.push(v, Op::Div(a.0, b.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.transpose();
        self.push(v, Op::Transpose(a.0))
    }

    pub fn matexp(&mut self, a: Var) -> Result<Var> {
        let v = matexp(&self.nodes[a.0].value)?;
        Ok(self.push(v, Op::MatExp(a.0)))
    }

    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let f = cholesky(&self.nodes[a.0].value)?;
        Ok(self.push(f.lower().clone(), Op::Chol { a: a.0 }))
    }

    /// X = A^{-1} B for symmetric positive-definite A.
    pub fn solve_psd(&mut self, a: Var, b: Var) -> Result<Var> {
        let chol = cholesky(&self.nodes[a.0].value)?;
        let x = chol.solve(&self.nodes[b.0].value)?;
        Ok(self.push(x, Op::SolvePsd { a: a.0, b: b.0, chol }))
    }

    pub fn logdet_psd(&mut self, a: Var) -> Result<Var> {
        let chol = cholesky(&self.nodes[a.0].value)?;
        let v = Mat::scalar(chol.logdet());
        Ok(self.push(v, Op::LogDetPsd { a: a.0, chol }))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut v = self.nodes[a.0].value.clone();
        for x in v.data_mut() {
            *x = f(*x);
        }
        self.push(v, op)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0) + (-x.abs()).exp().ln_1p(), Op::Softplus(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Mat::scalar(s), Op::Sum(a.0))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.nodes[a.0].value.scale(s);
        self.push(v, Op::Scale(a.0, s))
    }

    pub fn slice(&mut self, src: Var, r0: usize, c0: usize, rows: usize, cols: usize) -> Var {
        let v = self.nodes[src.0].value.block(r0, c0, rows, cols);
        self.push(v, Op::Slice { src: src.0, r0, c0 })
    }

    /// Builds a matrix from scalar nodes and constants.
    pub fn assemble(&mut self, rows: usize, cols: usize, entries: Vec<AsmEntry>) -> Var {
        assert_eq!(entries.len(), rows * cols, "assemble entry count");
        let mut v = Mat::zeros(rows, cols);
        for (i, e) in entries.iter().enumerate() {
            let x = match e {
                AsmEntry::C(c) => *c,
                AsmEntry::V(var) => self.nodes[var.0].value.as_scalar(),
            };
            v.data_mut()[i] = x;
        }
        self.push(v, Op::Assemble { entries })
    }

    pub fn add_diag(&mut self, m: Var, v: Var) -> Var {
        let mv = &self.nodes[m.0].value;
        let vv = &self.nodes[v.0].value;
        assert!(mv.is_square() && vv.cols() == 1 && vv.rows() == mv.rows(), "add_diag shapes");
        let mut out = mv.clone();
        for i in 0..mv.rows() {
            let x = out.get(i, i) + vv.get(i, 0);
            out.set(i, i, x);
        }
        self.push(out, Op::AddDiag { m: m.0, v: v.0 })
    }

    pub fn kron_id(&mut self, n_blocks: usize, src: Var) -> Var {
        let v = crate::mat::kron(&Mat::identity(n_blocks), &self.nodes[src.0].value);
        self.push(v, Op::KronId { n_blocks, src: src.0 })
    }

    /// Reverse pass from a scalar output; adjoints of parameter leaves are
    /// accumulated into `grad` (indexed by leaf offsets).
    pub fn backward(&self, out: Var, grad: &mut [f64]) -> Result<()> {
        if self.nodes[out.0].value.shape() != (1, 1) {
            return Err(Error::InvalidArgument(
                "backward requires a scalar output node".into(),
            ));
        }
        let mut adj: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        adj[out.0] = Some(Mat::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Leaf { offset } => {
                    let o = *offset;
                    for (k, &x) in g.data().iter().enumerate() {
                        grad[o + k] += x;
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g.neg());
                }
                Op::Neg(a) => acc(&mut adj, *a, g.neg()),
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    acc(&mut adj, *a, reduce_to(&Tape::broadcast_apply(&g, bv, |x, y| x * y), av.shape()));
                    acc(&mut adj, *b, reduce_to(&Tape::broadcast_apply(&g, av, |x, y| x * y), bv.shape()));
                }
                Op::Div(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let da = Tape::broadcast_apply(&g, bv, |x, y| x / y);
                    acc(&mut adj, *a, reduce_to(&da, av.shape()));
                    let val = &self.nodes[i].value;
                    // d/db (a/b) = -(a/b)/b
                    let tmp = Tape::broadcast_apply(val, bv, |v, y| -v / y);
                    let db = g.hadamard(&tmp);
                    acc(&mut adj, *b, reduce_to(&db, bv.shape()));
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    acc(&mut adj, *a, g.matmul_nt(bv));
                    acc(&mut adj, *b, av.transpose().matmul(&g));
                }
                Op::Transpose(a) => acc(&mut adj, *a, g.transpose()),
                Op::MatExp(a) => {
                    let av = &self.nodes[*a].value;
                    acc(&mut adj, *a, frechet_adjoint(av, &g)?);
                }
                Op::Chol { a } => {
                    let l = &self.nodes[i].value;
                    acc(&mut adj, *a, chol_backward(l, &g));
                }
                Op::SolvePsd { a, b, chol } => {
                    let x = &self.nodes[i].value;
                    let bbar = chol.solve(&g)?;
                    acc(&mut adj, *a, bbar.matmul_nt(x).neg());
                    acc(&mut adj, *b, bbar);
                }
                Op::LogDetPsd { a, chol } => {
                    let n = chol.dim();
                    let inv = chol.solve(&Mat::identity(n))?;
                    acc(&mut adj, *a, inv.scale(g.as_scalar()));
                }
                Op::Ln(a) => {
                    let av = &self.nodes[*a].value;
                    acc(&mut adj, *a, Tape::broadcast_apply(&g, av, |x, y| x / y));
                }
                Op::Exp(a) => {
                    acc(&mut adj, *a, g.hadamard(&self.nodes[i].value));
                }
                Op::Sqrt(a) => {
                    let val = &self.nodes[i].value;
                    acc(&mut adj, *a, Tape::broadcast_apply(&g, val, |x, y| 0.5 * x / y));
                }
                Op::Softplus(a) => {
                    let av = &self.nodes[*a].value;
                    acc(
                        &mut adj,
                        *a,
                        Tape::broadcast_apply(&g, av, |x, y| x / (1.0 + (-y).exp())),
                    );
                }
                Op::Relu(a) => {
                    let av = &self.nodes[*a].value;
                    acc(
                        &mut adj,
                        *a,
                        Tape::broadcast_apply(&g, av, |x, y| if y > 0.0 { x } else { 0.0 }),
                    );
                }
                Op::Tanh(a) => {
                    let val = &self.nodes[i].value;
                    acc(
                        &mut adj,
                        *a,
                        Tape::broadcast_apply(&g, val, |x, y| x * (1.0 - y * y)),
                    );
                }
                Op::Sum(a) => {
                    let shape = self.nodes[*a].value.shape();
                    let gs = g.as_scalar();
                    acc(&mut adj, *a, Mat::from_fn(shape.0, shape.1, |_, _| gs));
                }
                Op::Scale(a, s) => acc(&mut adj, *a, g.scale(*s)),
                Op::Slice { src, r0, c0 } => {
                    let shape = self.nodes[*src].value.shape();
                    let mut full = Mat::zeros(shape.0, shape.1);
                    full.set_block(*r0, *c0, &g);
                    acc(&mut adj, *src, full);
                }
                Op::Assemble { entries } => {
                    for (k, e) in entries.iter().enumerate() {
                        if let AsmEntry::V(var) = e {
                            acc(&mut adj, var.0, Mat::scalar(g.data()[k]));
                        }
                    }
                }
                Op::AddDiag { m, v } => {
                    let n = g.rows();
                    let diag = Mat::col((0..n).map(|k| g.get(k, k)).collect());
                    acc(&mut adj, *m, g.clone());
                    acc(&mut adj, *v, diag);
                }
                Op::KronId { n_blocks, src } => {
                    let (dr, dc) = self.nodes[*src].value.shape();
                    let mut s = Mat::zeros(dr, dc);
                    for b in 0..*n_blocks {
                        s = s.add(&g.block(b * dr, b * dc, dr, dc));
                    }
                    acc(&mut adj, *src, s);
                }
            }
        }
        Ok(())
    }
}

fn acc(adj: &mut [Option<Mat>], idx: usize, delta: Mat) {
    match &mut adj[idx] {
        Some(m) => *m = m.add(&delta),
        slot => *slot = Some(delta),
    }
}

/// Collapses a broadcast adjoint back to the operand's shape.
fn reduce_to(g: &Mat, shape: (usize, usize)) -> Mat {
    if g.shape() == shape {
        g.clone()
    } else if shape == (1, 1) {
        Mat::scalar(g.data().iter().sum())
    } else {
        panic!("cannot reduce {:?} to {:?}", g.shape(), shape);
    }
}

/// Adjoint of matexp: the Frechet derivative of exp at A^T applied to the
/// output adjoint, read off the top-right block of the augmented
/// exponential exp([[A^T, G], [0, A^T]]).
fn frechet_adjoint(a: &Mat, g: &Mat) -> Result<Mat> {
    let n = a.rows();
    let at = a.transpose();
    let mut aug = Mat::zeros(2 * n, 2 * n);
    aug.set_block(0, 0, &at);
    aug.set_block(n, n, &at);
    aug.set_block(0, n, g);
    let e = matexp(&aug)?;
    Ok(e.block(0, n, n, n))
}

/// Standard Cholesky reverse: with P = Phi(L^T tril(Lbar)) where Phi keeps
/// the lower triangle and halves the diagonal, the input adjoint is
/// sym(L^{-T} P L^{-1}).
fn chol_backward(l: &Mat, lbar_raw: &Mat) -> Mat {
    let n = l.rows();
    // The factor's strict upper triangle is identically zero, so adjoint
    // entries there carry no sensitivity.
    let mut lbar = lbar_raw.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            lbar.set(i, j, 0.0);
        }
    }
    let mut p = l.transpose().matmul(&lbar);
    for i in 0..n {
        for j in 0..n {
            if j > i {
                p.set(i, j, 0.0);
            } else if j == i {
                p.set(i, j, 0.5 * p.get(i, j));
            }
        }
    }
    // Solve L^T Y = P, then Z^T = L^{-T} Y^T gives Z = Y L^{-1}.
    let fac = CholFactorView { lower: l };
    let y = fac.solve_lower_t(&p);
    let z = fac.solve_lower_t(&y.transpose()).transpose();
    z.add(&z.transpose()).scale(0.5)
}

/// Triangular solves against a borrowed lower factor.
struct CholFactorView<'a> {
    lower: &'a Mat,
}

impl CholFactorView<'_> {
    fn solve_lower_t(&self, b: &Mat) -> Mat {
        let n = self.lower.rows();
        let k = b.cols();
        let mut x = b.clone();
        for c in 0..k {
            for i in (0..n).rev() {
                let mut s = x.get(i, c);
                for j in (i + 1)..n {
                    s -= self.lower.get(j, i) * x.get(j, c);
                }
                x.set(i, c, s / self.lower.get(i, i));
            }
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Central finite differences through an arbitrary rebuildable graph.
    fn fd_gradient(
        build: &dyn Fn(&mut Tape, &[Mat]) -> Var,
        inputs: &[Mat],
        h: f64,
    ) -> Vec<Vec<f64>> {
        let mut grads = Vec::new();
        for (which, m) in inputs.iter().enumerate() {
            let mut g = vec![0.0; m.data().len()];
            for k in 0..m.data().len() {
                let eval = |delta: f64| {
                    let mut perturbed: Vec<Mat> = inputs.to_vec();
                    perturbed[which].data_mut()[k] += delta;
                    let mut tape = Tape::new();
                    let out = build(&mut tape, &perturbed);
                    tape.scalar_value(out)
                };
                g[k] = (eval(h) - eval(-h)) / (2.0 * h);
            }
            grads.push(g);
        }
        grads
    }

    /// Runs the tape gradient and compares against finite differences.
    fn check_grad(build: &dyn Fn(&mut Tape, &[Mat]) -> Var, inputs: &[Mat], tol: f64) {
        // Leaf offsets are laid out consecutively.
        let total: usize = inputs.iter().map(|m| m.data().len()).sum();
        let mut tape = Tape::new();
        let out = build(&mut tape, inputs);
        let mut grad = vec![0.0; total];
        tape.backward(out, &mut grad).unwrap();

        let fd = fd_gradient(build, inputs, 1e-6);
        let flat_fd: Vec<f64> = fd.into_iter().flatten().collect();
        let scale = flat_fd
            .iter()
            .chain(grad.iter())
            .fold(0.0_f64, |a, &x| a.max(x.abs()))
            .max(1e-6);
        for (k, (a, b)) in grad.iter().zip(&flat_fd).enumerate() {
            let rel = (a - b).abs() / scale;
            assert!(rel < tol, "coordinate {k}: ad {a} vs fd {b} (rel {rel})");
        }
    }

    /// Builds leaves for all inputs at consecutive offsets.
    fn leaves(tape: &mut Tape, inputs: &[Mat]) -> Vec<Var> {
        let mut offset = 0;
        inputs
            .iter()
            .map(|m| {
                let v = tape.leaf(m.clone(), offset);
                offset += m.data().len();
                v
            })
            .collect()
    }

    fn rand_mat(rng: &mut StdRng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| 2.0 * (rng.random::<f64>() - 0.5))
    }

    #[test]
    fn product_rule() {
        // d(x*y)/dx = y.
        let build = |tape: &mut Tape, ins: &[Mat]| {
            let vs = leaves(tape, ins);
            tape.mul(vs[0], vs[1])
        };
        let inputs = vec![Mat::scalar(3.0), Mat::scalar(-1.7)];
        let mut tape = Tape::new();
        let out = build(&mut tape, &inputs);
        let mut grad = vec![0.0; 2];
        tape.backward(out, &mut grad).unwrap();
        assert_eq!(grad[0], -1.7);
        assert_eq!(grad[1], 3.0);
    }

    #[test]
    fn arithmetic_and_activations() {
        let mut rng = StdRng::seed_from_u64(51);
        let x = rand_mat(&mut rng, 3, 2);
        let y = rand_mat(&mut rng, 3, 2);
        let s = Mat::scalar(0.7);
        let build = |tape: &mut Tape, ins: &[Mat]| {
            let vs = leaves(tape, ins);
            let a = tape.add(vs[0], vs[1]);
            let b = tape.tanh(a);
            let c = tape.mul(b, vs[2]);
            let d = tape.softplus(c);
            let e = tape.sub(d, vs[0]);
            let f = tape.relu(e);
            let g = tape.div(f, vs[2]);
            tape.sum(g)
        };
        check_grad(&build, &[x, y, s], 1e-6);
    }

    #[test]
    fn exp_ln_sqrt_chain() {
        let mut rng = StdRng::seed_from_u64(52);
        let x = Mat::from_fn(2, 2, |_, _| 0.5 + rng.random::<f64>());
        let build = |tape: &mut Tape, ins: &[Mat]| {
            let vs = leaves(tape, ins);
            let a = tape.sqrt(vs[0]);
            let b = tape.ln(a);
            let c = tape.exp(b);
            tape.sum(c)
        };
        check_grad(&build, &[x], 1e-6);
    }

    #[test]
    fn matmul_transpose_scale_slice() {
        let mut rng = StdRng::seed_from_u64(53);
        let a = rand_mat(&mut rng, 3, 2);
        let b = rand_mat(&mut rng, 3, 3);
        let build = |tape: &mut Tape, ins: &[Mat]| {
            let vs = leaves(tape, ins);
            let at = tape.transpose(vs[0]);
            let prod = tape.matmul(at, vs[1]); // 2x3
            let sliced = tape.slice(prod, 0, 1, 2, 2);
            let scaled = tape.scale(sliced, 1.3);
            tape.sum(scaled)
        };
        check_grad(&build, &[a, b], 1e-6);
    }

    #[test]
    fn matexp_frechet_adjoint() {
        let mut rng = StdRng::seed_from_u64(54);
        for _ in 0..5 {
            let a = rand_mat(&mut rng, 3, 3);
            let w = rand_mat(&mut rng, 3, 3);
            let build = |tape: &mut Tape, ins: &[Mat]| {
                let vs = leaves(tape, ins);
                let e = tape.matexp(vs[0]).unwrap();
                let prod = tape.mul(e, vs[1]);
                tape.sum(prod)
            };
            check_grad(&build, &[a, w.clone()], 1e-6);
        }
    }

    #[test]
    fn cholesky_backward_through_psd_construction() {
        let mut rng = StdRng::seed_from_u64(55);
        let x = rand_mat(&mut rng, 3, 3);
        let w = rand_mat(&mut rng, 3, 3);
        let build = |tape: &mut Tape, ins: &[Mat]| {
            let vs = leaves(tape, ins);
            // A = X X^T + 2I is positive definite for any X.
            let xt = tape.transpose(vs[0]);
            let xxt = tape.matmul(vs[0], xt);
            let eye = tape.constant(Mat::identity(3).scale(2.0));
            let a = tape.add(xxt, eye);
            let l = tape.cholesky(a).unwrap();
            let prod = tape.mul(l, vs[1]);
            tape.sum(prod)
        };
        check_grad(&build, &[x, w], 1e-5);
    }

    #[test]
    fn solve_psd_and_logdet_backward() {
        let mut rng = StdRng::seed_from_u64(56);
        let x = rand_mat(&mut rng, 3, 3);
        let b = rand_mat(&mut rng, 3, 2);
        let build = |tape: &mut Tape, ins: &[Mat]| {
            let vs = leaves(tape, ins);
            let xt = tape.transpose(vs[0]);
            let xxt = tape.matmul(vs[0], xt);
            let eye = tape.constant(Mat::identity(3).scale(1.5));
            let a = tape.add(xxt, eye);
            let sol = tape.solve_psd(a, vs[1]).unwrap();
            let ssum = tape.sum(sol);
            let ld = tape.logdet_psd(a).unwrap();
            tape.add(ssum, ld)
        };
        check_grad(&build, &[x, b], 1e-5);
    }

    #[test]
    fn assemble_add_diag_kron_id() {
        let mut rng = StdRng::seed_from_u64(57);
        let s1 = Mat::scalar(0.8 + rng.random::<f64>());
        let s2 = Mat::scalar(rng.random::<f64>() - 0.5);
        let d = Mat::from_fn(4, 1, |_, _| 0.5 + rng.random::<f64>());
        let build = |tape: &mut Tape, ins: &[Mat]| {
            let vs = leaves(tape, ins);
            let m = tape.assemble(
                2,
                2,
                vec![
                    AsmEntry::V(vs[0]),
                    AsmEntry::C(0.3),
                    AsmEntry::V(vs[1]),
                    AsmEntry::V(vs[0]),
                ],
            );
            let big = tape.kron_id(2, m); // 4x4
            let withdiag = tape.add_diag(big, vs[2]);
            let sq = tape.mul(withdiag, withdiag);
            tape.sum(sq)
        };
        check_grad(&build, &[s1, s2, d], 1e-6);
    }

    #[test]
    fn backward_rejects_non_scalar_output() {
        let mut tape = Tape::new();
        let v = tape.leaf(Mat::zeros(2, 2), 0);
        let mut grad = vec![0.0; 4];
        assert!(tape.backward(v, &mut grad).is_err());
    }

    #[test]
    fn gradient_accumulates_across_reused_nodes() {
        // f = x*x + x => f' = 2x + 1.
        let mut tape = Tape::new();
        let x = tape.leaf(Mat::scalar(1.5), 0);
        let sq = tape.mul(x, x);
        let f = tape.add(sq, x);
        let mut grad = vec![0.0; 1];
        tape.backward(f, &mut grad).unwrap();
        assert!((grad[0] - 4.0).abs() < 1e-14);
    }
}
