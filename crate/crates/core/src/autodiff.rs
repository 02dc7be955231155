//! Reverse-mode automatic differentiation over real arrays.
//!
//! A [`Tape`] records array-valued operations in execution order; calling
//! [`Tape::backward`] on a scalar result walks the records once in reverse and
//! accumulates adjoints for every leaf.
//!
//! Complex arrays are stored as interleaved `(re, im)` pairs and flagged as
//! complex on their node. For a real loss `L` the adjoint of a complex entry
//! `z` is `dL/dRe z + i dL/dIm z`, which turns every complex-linear backward
//! rule into multiplication by the conjugate transpose.
//!
//! Operations panic on shape mismatches and on variables from another tape,
//! the same way slice indexing panics; [`Tape::backward`] reports misuse of
//! the loss as an [`AutodiffError`].

use std::cell::{Ref, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::AutodiffError;
use crate::fft::CenteredDft;
use crate::tensor::{kernels, C64};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Sin(usize),
    Cos(usize),
    Sqrt(usize),
    SqrtShift(usize),
    AbsSmooth(usize),
    Sum(usize),
    Mean(usize),
    SumGroups { a: usize, group: usize },
    AsComplex(usize),
    CMul(usize, usize),
    CAbs2(usize),
    ModeContract { t: usize, m: usize, mode: usize },
    NormalizeChannels { a: usize, channels: usize, floor: f64 },
    NormalizedDerivative { s: usize, ds: usize, channels: usize, floor: f64 },
    CoilImages { m: usize, s: usize },
    SelectRows { a: usize, rows: Vec<usize> },
    Dft { a: usize, dft: CenteredDft },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    complex: bool,
    needs_grad: bool,
    op: Op,
}

impl Node {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Append-only record of array operations.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn cplx(v: &[f64]) -> &[C64] {
    bytemuck::cast_slice(v)
}

fn cplx_mut(v: &mut [f64]) -> &mut [C64] {
    bytemuck::cast_slice_mut(v)
}

fn to_real(v: Vec<C64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len() * 2);
    for z in v {
        out.push(z.re);
        out.push(z.im);
    }
    out
}

fn shape_str(shape: &[usize]) -> String {
    format!("{shape:?}")
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every record. Variables created before the reset become invalid.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.id = NEXT_TAPE.fetch_add(1, Ordering::Relaxed);
    }

    fn check(&self, v: Var) -> usize {
        assert!(v.tape == self.id, "{}", AutodiffError::ForeignVariable);
        v.index
    }

    fn push(&self, value: Vec<f64>, shape: Vec<usize>, complex: bool, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(
            value.len(),
            shape.iter().product::<usize>() * if complex { 2 } else { 1 }
        );
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            shape,
            complex,
            needs_grad,
            op,
        });
        Var {
            tape: self.id,
            index: nodes.len() - 1,
        }
    }

    /// Differentiable real leaf.
    pub fn leaf(&self, value: Vec<f64>, shape: &[usize]) -> Var {
        assert_eq!(value.len(), shape.iter().product::<usize>(), "leaf length/shape mismatch");
        self.push(value, shape.to_vec(), false, true, Op::Leaf)
    }

    /// Differentiable complex leaf; `value` holds interleaved pairs.
    pub fn complex_leaf(&self, value: Vec<f64>, shape: &[usize]) -> Var {
        assert_eq!(value.len(), 2 * shape.iter().product::<usize>(), "leaf length/shape mismatch");
        self.push(value, shape.to_vec(), true, true, Op::Leaf)
    }

    /// Non-differentiable real input.
    pub fn constant(&self, value: Vec<f64>, shape: &[usize]) -> Var {
        assert_eq!(value.len(), shape.iter().product::<usize>(), "constant length/shape mismatch");
        self.push(value, shape.to_vec(), false, false, Op::Constant)
    }

    /// Non-differentiable complex input.
    pub fn complex_constant(&self, value: &[C64], shape: &[usize]) -> Var {
        assert_eq!(value.len(), shape.iter().product::<usize>(), "constant length/shape mismatch");
        self.push(to_real(value.to_vec()), shape.to_vec(), true, false, Op::Constant)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(vec![value], &[1])
    }

    /// Borrow the raw (interleaved for complex) value of a variable.
    pub fn value(&self, v: Var) -> Ref<'_, [f64]> {
        let i = self.check(v);
        Ref::map(self.nodes.borrow(), |n| n[i].value.as_slice())
    }

    /// Complex view of a complex variable.
    pub fn complex_value(&self, v: Var) -> Vec<C64> {
        assert!(self.is_complex(v), "variable is real");
        cplx(&self.value(v)).to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "variable is not a real scalar");
        val[0]
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        let i = self.check(v);
        self.nodes.borrow()[i].shape.clone()
    }

    pub fn is_complex(&self, v: Var) -> bool {
        let i = self.check(v);
        self.nodes.borrow()[i].complex
    }

    fn meta(&self, v: Var) -> (Vec<usize>, bool, bool) {
        let i = self.check(v);
        let n = &self.nodes.borrow()[i];
        (n.shape.clone(), n.complex, n.needs_grad)
    }

    fn binary_same(&self, a: Var, b: Var, what: &str) -> (Vec<usize>, bool, bool) {
        let (sa, ca, ga) = self.meta(a);
        let (sb, cb, gb) = self.meta(b);
        assert!(
            sa == sb && ca == cb,
            "{what}: operand shapes differ ({} vs {})",
            shape_str(&sa),
            shape_str(&sb)
        );
        (sa, ca, ga || gb)
    }

    fn map2(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let va = self.value(a);
        let vb = self.value(b);
        va.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)).collect()
    }

    fn map1(&self, a: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.value(a).iter().map(|&x| f(x)).collect()
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (shape, complex, g) = self.binary_same(a, b, "add");
        let v = self.map2(a, b, |x, y| x + y);
        self.push(v, shape, complex, g, Op::Add(a.index, b.index))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (shape, complex, g) = self.binary_same(a, b, "sub");
        let v = self.map2(a, b, |x, y| x - y);
        self.push(v, shape, complex, g, Op::Sub(a.index, b.index))
    }

    /// Elementwise product of real arrays.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (shape, complex, g) = self.binary_same(a, b, "mul");
        assert!(!complex, "mul: use cmul for complex operands");
        let v = self.map2(a, b, |x, y| x * y);
        self.push(v, shape, complex, g, Op::Mul(a.index, b.index))
    }

    /// Multiplication by a real constant (real or complex operand).
    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let (shape, complex, g) = self.meta(a);
        let v = self.map1(a, |x| x * factor);
        self.push(v, shape, complex, g, Op::Scale(a.index, factor))
    }

    fn row_meta(&self, a: Var, row: Var, what: &str) -> (Vec<usize>, usize, bool) {
        let (sa, ca, ga) = self.meta(a);
        let (sr, cr, gr) = self.meta(row);
        assert!(!ca && !cr, "{what}: real operands required");
        assert_eq!(sa.len(), 2, "{what}: left operand must be a matrix");
        let k = sa[1];
        assert_eq!(sr.iter().product::<usize>(), k, "{what}: row length must equal column count");
        (sa, k, ga || gr)
    }

    /// `a[p, j] + row[j]` for a real matrix `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let (shape, k, g) = self.row_meta(a, row, "add_row");
        let v = {
            let va = self.value(a);
            let vr = self.value(row);
            va.iter().enumerate().map(|(i, &x)| x + vr[i % k]).collect()
        };
        self.push(v, shape, false, g, Op::AddRow(a.index, row.index))
    }

    /// `a[p, j] * row[j]` for a real matrix `a`.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let (shape, k, g) = self.row_meta(a, row, "mul_row");
        let v = {
            let va = self.value(a);
            let vr = self.value(row);
            va.iter().enumerate().map(|(i, &x)| x * vr[i % k]).collect()
        };
        self.push(v, shape, false, g, Op::MulRow(a.index, row.index))
    }

    /// Real matrix product `(m x k) * (k x n)`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (sa, ca, ga) = self.meta(a);
        let (sb, cb, gb) = self.meta(b);
        assert!(!ca && !cb, "matmul: real operands required");
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: incompatible shapes {} and {}",
            shape_str(&sa),
            shape_str(&sb)
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let va = self.value(a);
            let vb = self.value(b);
            kernels::real_gemm(m, k, n, &va, k, 1, &vb, n, 1, &mut out, n, 1, false);
        }
        self.push(out, vec![m, n], false, ga || gb, Op::MatMul { a: a.index, b: b.index, m, k, n })
    }

    fn unary_real(&self, a: Var, what: &str) -> (Vec<usize>, bool) {
        let (shape, complex, g) = self.meta(a);
        assert!(!complex, "{what}: real operand required");
        (shape, g)
    }

    pub fn sin(&self, a: Var) -> Var {
        let (shape, g) = self.unary_real(a, "sin");
        let v = self.map1(a, f64::sin);
        self.push(v, shape, false, g, Op::Sin(a.index))
    }

    pub fn cos(&self, a: Var) -> Var {
        let (shape, g) = self.unary_real(a, "cos");
        let v = self.map1(a, f64::cos);
        self.push(v, shape, false, g, Op::Cos(a.index))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let (shape, g) = self.unary_real(a, "sqrt");
        let v = self.map1(a, f64::sqrt);
        self.push(v, shape, false, g, Op::Sqrt(a.index))
    }

    /// `sqrt(x + shift)`, finite-gradient square root for non-negative inputs.
    pub fn sqrt_shift(&self, a: Var, shift: f64) -> Var {
        let (shape, g) = self.unary_real(a, "sqrt_shift");
        let v = self.map1(a, |x| (x + shift).sqrt());
        self.push(v, shape, false, g, Op::SqrtShift(a.index))
    }

    /// Smoothed absolute value `sqrt(x^2 + delta^2)`.
    pub fn abs_smooth(&self, a: Var, delta: f64) -> Var {
        let (shape, g) = self.unary_real(a, "abs_smooth");
        let v = self.map1(a, |x| (x * x + delta * delta).sqrt());
        self.push(v, shape, false, g, Op::AbsSmooth(a.index))
    }

    pub fn sum(&self, a: Var) -> Var {
        let (_, g) = self.unary_real(a, "sum");
        let s = self.value(a).iter().sum();
        self.push(vec![s], vec![1], false, g, Op::Sum(a.index))
    }

    pub fn mean(&self, a: Var) -> Var {
        let (_, g) = self.unary_real(a, "mean");
        let s = {
            let v = self.value(a);
            v.iter().sum::<f64>() / v.len() as f64
        };
        self.push(vec![s], vec![1], false, g, Op::Mean(a.index))
    }

    /// Sums consecutive groups of `group` entries of a real array; the result
    /// has shape `[len / group]`.
    pub fn sum_groups(&self, a: Var, group: usize) -> Var {
        let (shape, g) = self.unary_real(a, "sum_groups");
        let len: usize = shape.iter().product();
        assert!(group > 0 && len.is_multiple_of(group), "sum_groups: group must divide the length");
        let v: Vec<f64> = self.value(a).chunks(group).map(|c| c.iter().sum()).collect();
        self.push(v, vec![len / group], false, g, Op::SumGroups { a: a.index, group })
    }

    /// Reinterprets a real array whose last axis holds `(re, im)` pairs as a
    /// complex array with that axis halved.
    pub fn as_complex(&self, a: Var) -> Var {
        let (mut shape, g) = self.unary_real(a, "as_complex");
        let last = shape.last_mut().expect("as_complex: empty shape");
        assert!(*last % 2 == 0, "as_complex: last axis must have even length");
        *last /= 2;
        let v = self.value(a).to_vec();
        self.push(v, shape, true, g, Op::AsComplex(a.index))
    }

    /// Elementwise complex product.
    pub fn cmul(&self, a: Var, b: Var) -> Var {
        let (shape, complex, g) = self.binary_same(a, b, "cmul");
        assert!(complex, "cmul: complex operands required");
        let v = {
            let va = self.value(a);
            let vb = self.value(b);
            to_real(cplx(&va).iter().zip(cplx(&vb)).map(|(x, y)| x * y).collect())
        };
        self.push(v, shape, true, g, Op::CMul(a.index, b.index))
    }

    /// Squared modulus of a complex array (real result, same shape).
    pub fn cabs2(&self, a: Var) -> Var {
        let (shape, complex, g) = self.meta(a);
        assert!(complex, "cabs2: complex operand required");
        let v = cplx(&self.value(a)).iter().map(|z| z.norm_sqr()).collect();
        self.push(v, shape, false, g, Op::CAbs2(a.index))
    }

    /// Contracts axis `mode` of complex tensor `t` with complex matrix
    /// `m` of shape `P x t.shape[mode]`.
    pub fn mode_contract(&self, t: Var, m: Var, mode: usize) -> Var {
        let (st, ct, gt) = self.meta(t);
        let (sm, cm, gm) = self.meta(m);
        assert!(ct && cm, "mode_contract: complex operands required");
        assert!(mode < st.len(), "mode_contract: mode {mode} out of range");
        assert!(
            sm.len() == 2 && sm[1] == st[mode],
            "mode_contract: matrix {} incompatible with axis {mode} of {}",
            shape_str(&sm),
            shape_str(&st)
        );
        let rows = sm[0];
        let out = {
            let vt = self.value(t);
            let vm = self.value(m);
            kernels::contract_mode(cplx(&vt), &st, mode, cplx(&vm), rows)
        };
        let mut shape = st;
        shape[mode] = rows;
        self.push(
            to_real(out),
            shape,
            true,
            gt || gm,
            Op::ModeContract {
                t: t.index,
                m: m.index,
                mode,
            },
        )
    }

    /// Normalizes a complex `[channels, ...]` array to unit Euclidean norm
    /// along the leading axis at every trailing position. Norms below `floor`
    /// are replaced by `floor`.
    pub fn normalize_channels(&self, a: Var, floor: f64) -> Var {
        let (shape, complex, g) = self.meta(a);
        assert!(complex && shape.len() >= 2, "normalize_channels: complex [C, ...] operand required");
        let channels = shape[0];
        let points: usize = shape[1..].iter().product();
        let out = {
            let va = self.value(a);
            let z = cplx(&va);
            let mut out = z.to_vec();
            for p in 0..points {
                let r = channel_norm(z, channels, points, p).max(floor);
                for c in 0..channels {
                    out[c * points + p] /= r;
                }
            }
            out
        };
        self.push(
            to_real(out),
            shape,
            true,
            g,
            Op::NormalizeChannels {
                a: a.index,
                channels,
                floor,
            },
        )
    }

    /// Directional derivative of the channel normalization: given the raw
    /// field `s` and its derivative `ds` along one axis (both complex
    /// `[channels, ...]`), returns the derivative of `s / |s|`.
    pub fn normalized_derivative(&self, s: Var, ds: Var, floor: f64) -> Var {
        let (shape, complex, g) = self.binary_same(s, ds, "normalized_derivative");
        assert!(complex && shape.len() >= 2, "normalized_derivative: complex [C, ...] operands required");
        let channels = shape[0];
        let points: usize = shape[1..].iter().product();
        let out = {
            let vs = self.value(s);
            let vd = self.value(ds);
            let (x, v) = (cplx(&vs), cplx(&vd));
            let mut out = vec![C64::new(0.0, 0.0); x.len()];
            for p in 0..points {
                let r = channel_norm(x, channels, points, p);
                if r < floor {
                    for c in 0..channels {
                        out[c * points + p] = v[c * points + p] / floor;
                    }
                    continue;
                }
                let dot: f64 = (0..channels)
                    .map(|c| {
                        let (a, b) = (x[c * points + p], v[c * points + p]);
                        a.re * b.re + a.im * b.im
                    })
                    .sum();
                let r3 = r * r * r;
                for c in 0..channels {
                    let i = c * points + p;
                    out[i] = v[i] / r - x[i] * (dot / r3);
                }
            }
            out
        };
        self.push(
            to_real(out),
            shape,
            true,
            g,
            Op::NormalizedDerivative {
                s: s.index,
                ds: ds.index,
                channels,
                floor,
            },
        )
    }

    /// Pointwise products of an image stack `m: [T, G...]` with channel maps
    /// `s: [C, G...]`, giving `[T, C, G...]`.
    pub fn coil_images(&self, m: Var, s: Var) -> Var {
        let (sm, cm, gm) = self.meta(m);
        let (ss, cs, gs) = self.meta(s);
        assert!(cm && cs, "coil_images: complex operands required");
        assert!(
            sm.len() >= 2 && ss.len() == sm.len() && sm[1..] == ss[1..],
            "coil_images: spatial shapes differ ({} vs {})",
            shape_str(&sm),
            shape_str(&ss)
        );
        let (frames, coils) = (sm[0], ss[0]);
        let points: usize = sm[1..].iter().product();
        let out = {
            let vm = self.value(m);
            let vs = self.value(s);
            let (zm, zs) = (cplx(&vm), cplx(&vs));
            let mut out = Vec::with_capacity(frames * coils * points);
            for t in 0..frames {
                let mt = &zm[t * points..(t + 1) * points];
                for c in 0..coils {
                    let sc = &zs[c * points..(c + 1) * points];
                    out.extend(mt.iter().zip(sc).map(|(a, b)| a * b));
                }
            }
            out
        };
        let mut shape = vec![frames, coils];
        shape.extend_from_slice(&sm[1..]);
        self.push(to_real(out), shape, true, gm || gs, Op::CoilImages { m: m.index, s: s.index })
    }

    /// Gathers entries along the leading axis.
    pub fn select_rows(&self, a: Var, rows: &[usize]) -> Var {
        let (shape, complex, g) = self.meta(a);
        let row_len: usize = shape[1..].iter().product::<usize>() * if complex { 2 } else { 1 };
        assert!(rows.iter().all(|&r| r < shape[0]), "select_rows: row index out of range");
        let v = {
            let va = self.value(a);
            let mut out = Vec::with_capacity(rows.len() * row_len);
            for &r in rows {
                out.extend_from_slice(&va[r * row_len..(r + 1) * row_len]);
            }
            out
        };
        let mut new_shape = shape;
        new_shape[0] = rows.len();
        self.push(
            v,
            new_shape,
            complex,
            g,
            Op::SelectRows {
                a: a.index,
                rows: rows.to_vec(),
            },
        )
    }

    /// Centered unitary DFT over the trailing axes described by `dft`.
    pub fn dft(&self, a: Var, dft: &CenteredDft) -> Var {
        let (shape, complex, g) = self.meta(a);
        assert!(complex, "dft: complex operand required");
        let k = dft.shape().len();
        assert!(
            shape.len() >= k && shape[shape.len() - k..] == *dft.shape(),
            "dft: trailing axes {} do not match transform {}",
            shape_str(&shape),
            shape_str(dft.shape())
        );
        let mut v = self.value(a).to_vec();
        dft.forward(cplx_mut(&mut v));
        self.push(
            v,
            shape,
            true,
            g,
            Op::Dft {
                a: a.index,
                dft: dft.clone(),
            },
        )
    }

    /// Reverse sweep from a real scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        if loss.tape != self.id {
            return Err(AutodiffError::ForeignVariable);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.index];
        if root.complex || root.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(root.shape.clone()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        adj[loss.index] = Some(vec![1.0]);
        for i in (0..=loss.index).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf | Op::Constant) || !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            propagate(&nodes, node, &g, &mut adj);
        }
        let grads = nodes
            .iter()
            .zip(adj)
            .map(|(n, a)| if matches!(n.op, Op::Leaf) { a } else { None })
            .collect();
        Ok(Gradients { tape: self.id, grads })
    }
}

fn channel_norm(z: &[C64], channels: usize, points: usize, p: usize) -> f64 {
    (0..channels).map(|c| z[c * points + p].norm_sqr()).sum::<f64>().sqrt()
}

fn accumulate(adj: &mut [Option<Vec<f64>>], nodes: &[Node], idx: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[idx].needs_grad {
        return;
    }
    let len = nodes[idx].value.len();
    let slot = adj[idx].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) => {
            for &p in [a, b].iter() {
                accumulate(adj, nodes, *p, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
        }
        Op::Sub(a, b) => {
            accumulate(adj, nodes, *a, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            accumulate(adj, nodes, *b, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(adj, nodes, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * vb[i];
                }
            });
            accumulate(adj, nodes, *b, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * va[i];
                }
            });
        }
        Op::Scale(a, f) => {
            accumulate(adj, nodes, *a, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += f * y));
        }
        Op::AddRow(a, row) => {
            let k = nodes[*row].value.len();
            accumulate(adj, nodes, *a, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            accumulate(adj, nodes, *row, |s| {
                for (i, y) in g.iter().enumerate() {
                    s[i % k] += y;
                }
            });
        }
        Op::MulRow(a, row) => {
            let (va, vr) = (&nodes[*a].value, &nodes[*row].value);
            let k = vr.len();
            accumulate(adj, nodes, *a, |s| {
                for (i, y) in g.iter().enumerate() {
                    s[i] += y * vr[i % k];
                }
            });
            accumulate(adj, nodes, *row, |s| {
                for (i, y) in g.iter().enumerate() {
                    s[i % k] += y * va[i];
                }
            });
        }
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            // dA = G B^T, dB = A^T G
            accumulate(adj, nodes, *a, |s| kernels::real_gemm(m, n, k, g, n, 1, vb, 1, n, s, k, 1, true));
            accumulate(adj, nodes, *b, |s| kernels::real_gemm(k, m, n, va, 1, k, g, n, 1, s, n, 1, true));
        }
        Op::Sin(a) => {
            let va = &nodes[*a].value;
            accumulate(adj, nodes, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * va[i].cos();
                }
            });
        }
        Op::Cos(a) => {
            let va = &nodes[*a].value;
            accumulate(adj, nodes, *a, |s| {
                for i in 0..s.len() {
                    s[i] -= g[i] * va[i].sin();
                }
            });
        }
        Op::Sqrt(a) | Op::SqrtShift(a) => {
            // d sqrt(u) = 1 / (2 sqrt(u)); the output already holds sqrt(u)
            let out = &node.value;
            accumulate(adj, nodes, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * 0.5 / out[i];
                }
            });
        }
        Op::AbsSmooth(a) => {
            let va = &nodes[*a].value;
            let out = &node.value;
            accumulate(adj, nodes, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * va[i] / out[i];
                }
            });
        }
        Op::Sum(a) => {
            accumulate(adj, nodes, *a, |s| s.iter_mut().for_each(|x| *x += g[0]));
        }
        Op::Mean(a) => {
            let w = g[0] / nodes[*a].value.len() as f64;
            accumulate(adj, nodes, *a, |s| s.iter_mut().for_each(|x| *x += w));
        }
        Op::SumGroups { a, group } => {
            accumulate(adj, nodes, *a, |s| {
                for (i, x) in s.iter_mut().enumerate() {
                    *x += g[i / group];
                }
            });
        }
        Op::AsComplex(a) => {
            accumulate(adj, nodes, *a, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
        }
        Op::CMul(a, b) => {
            let (za, zb, gz) = (cplx(&nodes[*a].value), cplx(&nodes[*b].value), cplx(g));
            accumulate(adj, nodes, *a, |s| {
                for (i, x) in cplx_mut(s).iter_mut().enumerate() {
                    *x += gz[i] * zb[i].conj();
                }
            });
            accumulate(adj, nodes, *b, |s| {
                for (i, x) in cplx_mut(s).iter_mut().enumerate() {
                    *x += gz[i] * za[i].conj();
                }
            });
        }
        Op::CAbs2(a) => {
            let za = cplx(&nodes[*a].value);
            accumulate(adj, nodes, *a, |s| {
                for (i, x) in cplx_mut(s).iter_mut().enumerate() {
                    *x += za[i] * (2.0 * g[i]);
                }
            });
        }
        Op::ModeContract { t, m, mode } => {
            let (nt, nm) = (&nodes[*t], &nodes[*m]);
            let gz = cplx(g);
            if nt.needs_grad {
                let back = kernels::contract_mode_adjoint(gz, &node.shape, *mode, cplx(&nm.value), nt.shape[*mode]);
                accumulate(adj, nodes, *t, |s| add_complex(s, &back));
            }
            if nm.needs_grad {
                let gm = kernels::contract_mode_matrix_grad(gz, cplx(&nt.value), &nt.shape, *mode, node.shape[*mode]);
                accumulate(adj, nodes, *m, |s| add_complex(s, &gm));
            }
        }
        Op::NormalizeChannels { a, channels, floor } => {
            let x = cplx(&nodes[*a].value);
            let gz = cplx(g);
            let points = x.len() / channels;
            accumulate(adj, nodes, *a, |s| {
                let s = cplx_mut(s);
                for p in 0..points {
                    let r = channel_norm(x, *channels, points, p);
                    if r < *floor {
                        for c in 0..*channels {
                            s[c * points + p] += gz[c * points + p] / *floor;
                        }
                        continue;
                    }
                    // g_x = g / r - x (x . g) / r^3 in the real-pair inner product
                    let dot: f64 = (0..*channels)
                        .map(|c| re_dot(x[c * points + p], gz[c * points + p]))
                        .sum();
                    let r3 = r * r * r;
                    for c in 0..*channels {
                        let i = c * points + p;
                        s[i] += gz[i] / r - x[i] * (dot / r3);
                    }
                }
            });
        }
        Op::NormalizedDerivative { s: sx, ds, channels, floor } => {
            let x = cplx(&nodes[*sx].value);
            let v = cplx(&nodes[*ds].value);
            let gz = cplx(g);
            let points = x.len() / channels;
            let ch = *channels;
            let mut gx = vec![C64::new(0.0, 0.0); x.len()];
            let mut gv = vec![C64::new(0.0, 0.0); x.len()];
            for p in 0..points {
                let r = channel_norm(x, ch, points, p);
                if r < *floor {
                    for c in 0..ch {
                        gv[c * points + p] = gz[c * points + p] / *floor;
                    }
                    continue;
                }
                let (mut xv, mut xg, mut vg) = (0.0, 0.0, 0.0);
                for c in 0..ch {
                    let i = c * points + p;
                    xv += re_dot(x[i], v[i]);
                    xg += re_dot(x[i], gz[i]);
                    vg += re_dot(v[i], gz[i]);
                }
                let r3 = r * r * r;
                let r5 = r3 * r * r;
                for c in 0..ch {
                    let i = c * points + p;
                    gv[i] = gz[i] / r - x[i] * (xg / r3);
                    gx[i] = -x[i] * (vg / r3) - gz[i] * (xv / r3) - v[i] * (xg / r3) + x[i] * (3.0 * xv * xg / r5);
                }
            }
            accumulate(adj, nodes, *sx, |s| add_complex(s, &gx));
            accumulate(adj, nodes, *ds, |s| add_complex(s, &gv));
        }
        Op::CoilImages { m, s } => {
            let (zm, zs, gz) = (cplx(&nodes[*m].value), cplx(&nodes[*s].value), cplx(g));
            let frames = nodes[*m].shape[0];
            let coils = nodes[*s].shape[0];
            let points = zm.len() / frames;
            accumulate(adj, nodes, *m, |acc| {
                let acc = cplx_mut(acc);
                for t in 0..frames {
                    for c in 0..coils {
                        let go = &gz[(t * coils + c) * points..(t * coils + c + 1) * points];
                        for p in 0..points {
                            acc[t * points + p] += go[p] * zs[c * points + p].conj();
                        }
                    }
                }
            });
            accumulate(adj, nodes, *s, |acc| {
                let acc = cplx_mut(acc);
                for t in 0..frames {
                    for c in 0..coils {
                        let go = &gz[(t * coils + c) * points..(t * coils + c + 1) * points];
                        for p in 0..points {
                            acc[c * points + p] += go[p] * zm[t * points + p].conj();
                        }
                    }
                }
            });
        }
        Op::SelectRows { a, rows } => {
            let row_len = g.len() / rows.len().max(1);
            accumulate(adj, nodes, *a, |s| {
                for (j, &r) in rows.iter().enumerate() {
                    for q in 0..row_len {
                        s[r * row_len + q] += g[j * row_len + q];
                    }
                }
            });
        }
        Op::Dft { a, dft } => {
            // unitary: the adjoint is the inverse transform
            let mut back = g.to_vec();
            dft.inverse(cplx_mut(&mut back));
            accumulate(adj, nodes, *a, |s| s.iter_mut().zip(&back).for_each(|(x, y)| *x += y));
        }
    }
}

fn re_dot(a: C64, b: C64) -> f64 {
    a.re * b.re + a.im * b.im
}

fn add_complex(s: &mut [f64], z: &[C64]) {
    for (x, y) in cplx_mut(s).iter_mut().zip(z) {
        *x += y;
    }
}

/// Leaf adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Adjoint of a leaf, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        assert!(v.tape == self.tape, "{}", AutodiffError::ForeignVariable);
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    /// Adjoint of a leaf with zeros for unused leaves.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(v).len()],
        }
    }
}
