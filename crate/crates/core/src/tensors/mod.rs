//! Dense row-major `f64` tensors and the deterministic generator behind
//! every random draw in the crate.
//!
//! Image-like values use the `(batch, C, H, W)` axis convention throughout.

mod rng;

pub use rng::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Pointwise operations accepted by [`Tensor::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementOp {
    Add,
    Sub,
    Mul,
    Div,
    /// Multiply by a scalar operand.
    Scale,
    Abs,
    Square,
    Sqrt,
}

/// Right-hand side of a binary pointwise operation.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
}

impl From<f64> for Operand<'_> {
    fn from(v: f64) -> Self {
        Operand::Scalar(v)
    }
}

impl<'a> From<&'a Tensor> for Operand<'a> {
    fn from(t: &'a Tensor) -> Self {
        Operand::Tensor(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
    Min,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {} elements but {} were given",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::invalid(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Size of one entry along axis 0.
    pub fn row_len(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            numel(&self.shape[1..])
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Borrow the `i`-th entry along axis 0.
    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.row_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Copy of the `i`-th entry along axis 0, with that axis dropped.
    pub fn index_axis0(&self, i: usize) -> Tensor {
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.row(i).to_vec(),
        }
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_axis0(&self, start: usize, end: usize) -> Tensor {
        let n = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * n..end * n].to_vec(),
        }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: first.shape.clone(),
                    right: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Concatenate along axis 0.
    pub fn concat(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for t in items {
            if t.rank() == 0 || &t.shape[1..] != tail {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: first.shape.clone(),
                    right: t.shape.clone(),
                });
            }
            rows += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        Ok(Tensor { shape, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pointwise `op(self, rhs)`. Unary ops ignore `rhs`; `Scale` needs a scalar.
    pub fn elementwise<'a>(&self, op: ElementOp, rhs: impl Into<Operand<'a>>) -> Result<Tensor> {
        let rhs = rhs.into();
        let unary = |f: fn(f64) -> f64| -> Result<Tensor> { Ok(self.map(f)) };
        match op {
            ElementOp::Abs => return unary(f64::abs),
            ElementOp::Square => return unary(|v| v * v),
            ElementOp::Sqrt => return unary(f64::sqrt),
            _ => {}
        }
        let f: fn(f64, f64) -> f64 = match op {
            ElementOp::Add => |a, b| a + b,
            ElementOp::Sub => |a, b| a - b,
            ElementOp::Mul | ElementOp::Scale => |a, b| a * b,
            ElementOp::Div => |a, b| a / b,
            _ => unreachable!(),
        };
        match rhs {
            Operand::Scalar(b) => Ok(self.map(|a| f(a, b))),
            Operand::Tensor(_) if op == ElementOp::Scale => {
                Err(Error::invalid("scale expects a scalar operand"))
            }
            Operand::Tensor(b) => {
                if b.shape != self.shape {
                    return Err(Error::ShapeMismatch {
                        op: "elementwise",
                        left: self.shape.clone(),
                        right: b.shape.clone(),
                    });
                }
                Ok(Tensor {
                    shape: self.shape.clone(),
                    data: self
                        .data
                        .iter()
                        .zip(&b.data)
                        .map(|(&x, &y)| f(x, y))
                        .collect(),
                })
            }
        }
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.elementwise(ElementOp::Add, rhs)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.elementwise(ElementOp::Sub, rhs)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.elementwise(ElementOp::Mul, rhs)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.elementwise(ElementOp::Div, rhs)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// Reduce over `axes` (duplicates ignored); the reduced axes are removed.
    /// An empty axis set reduces over every axis.
    pub fn reduce(&self, op: ReduceOp, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        for &axis in axes {
            if axis >= rank {
                return Err(Error::InvalidAxis { axis, rank });
            }
        }
        let reduced: Vec<bool> = (0..rank)
            .map(|a| axes.is_empty() || axes.contains(&a))
            .collect();
        let out_shape: Vec<usize> = (0..rank)
            .filter(|&a| !reduced[a])
            .map(|a| self.shape[a])
            .collect();
        let count: usize = (0..rank)
            .filter(|&a| reduced[a])
            .map(|a| self.shape[a])
            .product();
        if count == 0 && matches!(op, ReduceOp::Max | ReduceOp::Min | ReduceOp::Mean) {
            return Err(Error::invalid(format!("{op:?} over an empty set")));
        }
        let init = match op {
            ReduceOp::Sum | ReduceOp::Mean => 0.0,
            ReduceOp::Max => f64::NEG_INFINITY,
            ReduceOp::Min => f64::INFINITY,
        };
        let mut out = vec![init; numel(&out_shape)];
        // Walk the input in row-major order, tracking the output offset.
        let mut index = vec![0usize; rank];
        for &v in &self.data {
            let mut o = 0;
            for a in 0..rank {
                if !reduced[a] {
                    o = o * self.shape[a] + index[a];
                }
            }
            let slot = &mut out[o];
            *slot = match op {
                ReduceOp::Sum | ReduceOp::Mean => *slot + v,
                ReduceOp::Max => slot.max(v),
                ReduceOp::Min => slot.min(v),
            };
            for a in (0..rank).rev() {
                index[a] += 1;
                if index[a] < self.shape[a] {
                    break;
                }
                index[a] = 0;
            }
        }
        if op == ReduceOp::Mean {
            let inv = 1.0 / count as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(Tensor {
            shape: out_shape,
            data: out,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// 2-D matrix product. Both operands must be rank 2.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &rhs.data, false, &mut out, false);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// i.i.d. standard normal draws.
    pub fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(shape);
        rng.fill_normal(&mut t.data);
        t
    }
}

/// `out (+)= op(a) * op(b)` for row-major buffers, where `a` is logically `m x k`
/// and `b` is `k x n` after the optional transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    out: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides describe exactly the buffers checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(a.elementwise(ElementOp::Scale, 0.0).unwrap().data(), &[0.0, 0.0]);
        let ones = t(&[2], &[1.0, 1.0]);
        let d = t(&[2], &[2.0, 4.0]);
        assert_eq!(ones.div(&d).unwrap().data(), &[0.5, 0.25]);
        assert_eq!(
            t(&[2], &[-4.0, 9.0]).elementwise(ElementOp::Abs, 0.0).unwrap().data(),
            &[4.0, 9.0]
        );
        assert_eq!(
            t(&[2], &[4.0, 9.0]).elementwise(ElementOp::Sqrt, 0.0).unwrap().data(),
            &[2.0, 3.0]
        );
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn reduce_examples() {
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.reduce(ReduceOp::Sum, &[1]).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(m.reduce(ReduceOp::Sum, &[0]).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(t(&[2], &[2.0, 4.0]).reduce(ReduceOp::Mean, &[]).unwrap().item().unwrap(), 3.0);
        assert_eq!(t(&[2], &[-1.0, -5.0]).reduce(ReduceOp::Max, &[0]).unwrap().item().unwrap(), -1.0);
        assert_eq!(t(&[2], &[-1.0, -5.0]).reduce(ReduceOp::Min, &[0]).unwrap().item().unwrap(), -5.0);
        assert!(matches!(
            m.reduce(ReduceOp::Sum, &[2]),
            Err(Error::InvalidAxis { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn reduce_middle_axis() {
        let x = Tensor::new(vec![2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
        let r = x.reduce(ReduceOp::Sum, &[1]).unwrap();
        assert_eq!(r.shape(), &[2, 2]);
        assert_eq!(r.data(), &[6.0, 9.0, 24.0, 27.0]);
    }

    #[test]
    fn sum_over_empty_is_zero() {
        let e = Tensor::zeros(&[0, 3]);
        assert_eq!(e.reduce(ReduceOp::Sum, &[]).unwrap().item().unwrap(), 0.0);
        assert!(e.reduce(ReduceOp::Max, &[]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(i2.matmul(&a).unwrap(), a);
        let r = t(&[1, 2], &[1.0, 2.0]).matmul(&t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.data(), &[11.0]);
        assert!(a.matmul(&Tensor::zeros(&[3, 1])).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(11);
        let a = Tensor::randn(&mut rng, &[5, 7]);
        let b = Tensor::randn(&mut rng, &[7, 3]);
        let c = a.matmul(&b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += a.data()[i * 7 + k] * b.data()[k * 3 + j];
                }
                assert!((c.data()[i * 3 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_gemm_variants() {
        let mut rng = Rng::new(5);
        let a = Tensor::randn(&mut rng, &[4, 3]);
        let b = Tensor::randn(&mut rng, &[4, 2]);
        // a^T b : 3x2
        let mut out = vec![0.0; 6];
        gemm(3, 4, 2, a.data(), true, b.data(), false, &mut out, false);
        for i in 0..3 {
            for j in 0..2 {
                let s: f64 = (0..4).map(|k| a.data()[k * 3 + i] * b.data()[k * 2 + j]).sum();
                assert!((out[i * 2 + j] - s).abs() < 1e-12);
            }
        }
        // b a^T? use a (4x3) times a^T (3x4)
        let mut out2 = vec![0.0; 16];
        gemm(4, 3, 4, a.data(), false, a.data(), true, &mut out2, false);
        for i in 0..4 {
            for j in 0..4 {
                let s: f64 = (0..3).map(|k| a.data()[i * 3 + k] * a.data()[j * 3 + k]).sum();
                assert!((out2[i * 4 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn randn_moments() {
        let mut rng = Rng::new(2024);
        let x = Tensor::randn(&mut rng, &[1_000_000]);
        let mean = x.mean();
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn randn_is_deterministic() {
        let a = Tensor::randn(&mut Rng::new(9), &[64]);
        let b = Tensor::randn(&mut Rng::new(9), &[64]);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn stack_concat_slices() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.index_axis0(1), b);
        let c = Tensor::concat(&[&s, &s]).unwrap();
        assert_eq!(c.shape(), &[4, 2]);
        assert_eq!(c.slice_axis0(2, 3).data(), &[1.0, 2.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
            (1usize..40).prop_flat_map(|n| {
                (
                    proptest::collection::vec(-1e3f64..1e3, n),
                    proptest::collection::vec(-1e3f64..1e3, n),
                )
            })
        }

        proptest! {
            #[test]
            fn add_commutes((a, b) in vec_pair()) {
                let ta = Tensor::from_vec(a);
                let tb = Tensor::from_vec(b);
                prop_assert_eq!(ta.add(&tb).unwrap(), tb.add(&ta).unwrap());
            }

            #[test]
            fn sum_splits_over_concat((a, b) in vec_pair()) {
                let ta = Tensor::from_vec(a);
                let tb = Tensor::from_vec(b);
                let whole = Tensor::concat(&[&ta, &tb]).unwrap().reduce(ReduceOp::Sum, &[]).unwrap().item().unwrap();
                let parts = ta.sum() + tb.sum();
                let scale = ta.data().iter().chain(tb.data()).map(|v| v.abs()).sum::<f64>().max(1.0);
                prop_assert!((whole - parts).abs() <= 1e-12 * scale);
            }
        }
    }
}
