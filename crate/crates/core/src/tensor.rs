//! Dense row-major tensors and the elementwise / linear primitives the rest of
//! the crate is built from.
//!
//! Layout is row-major with the innermost axis last; for feature maps that is
//! `[channels, depth, height, width]` with width contiguous.

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(invalid!("tensor axes must be positive, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        assert!(shape.iter().all(|&d| d > 0), "zero-length axis in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        assert!(n > 0, "zero-length axis in {shape:?}");
        Self {
            shape,
            data: (0..n).map(f).collect(),
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.shape.clone())
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

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn into_shape(self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same("add_assign", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn check_same(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn check_shape(&self, op: &'static str, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(op, &self.shape, expected));
        }
        Ok(())
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                acc * d + i
            })
    }

    /// Concatenates along axis 0. All trailing axes must agree.
    pub fn concat0(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| invalid!("concat of zero tensors"))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.len()).sum());
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::shape("concat0", &first.shape, &p.shape));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Tensor::new(shape, data)
    }

    /// Rows `start..end` of axis 0.
    pub fn slice0(&self, start: usize, end: usize) -> Result<Tensor> {
        if start >= end || end > self.shape[0] {
            return Err(invalid!(
                "slice {start}..{end} of axis of length {}",
                self.shape[0]
            ));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::new(shape, self.data[start * inner..end * inner].to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Sigmoid,
}

/// Second operand of [`elementwise`]; unary ops take `None`.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
    None,
}

pub fn elementwise(op: Elementwise, a: &Tensor, b: Operand<'_>) -> Result<Tensor> {
    use Elementwise::*;
    let binary = |f: fn(f64, f64) -> f64| -> Result<Tensor> {
        match b {
            Operand::Tensor(t) => {
                a.check_same("elementwise", t)?;
                Ok(Tensor {
                    shape: a.shape.clone(),
                    data: a.data.iter().zip(&t.data).map(|(&x, &y)| f(x, y)).collect(),
                })
            }
            Operand::Scalar(s) => Ok(a.map(|x| f(x, s))),
            Operand::None => Err(invalid!("{op:?} needs a second operand")),
        }
    };
    match op {
        Add => binary(|x, y| x + y),
        Sub => binary(|x, y| x - y),
        Mul => binary(|x, y| x * y),
        Scale => match b {
            Operand::Scalar(s) => Ok(a.map(|x| x * s)),
            _ => Err(invalid!("scale takes a scalar operand")),
        },
        Relu => Ok(relu(a)),
        Sigmoid => Ok(sigmoid(a)),
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(Elementwise::Add, a, Operand::Tensor(b))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(Elementwise::Sub, a, Operand::Tensor(b))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(Elementwise::Mul, a, Operand::Tensor(b))
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    a.map(|x| x * s)
}

pub fn relu(a: &Tensor) -> Tensor {
    a.map(|x| x.max(0.0))
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    a.map(sigmoid_scalar)
}

/// Gradient of ReLU given the forward *output* (or input; the mask is the same).
pub fn relu_backward(forward: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    forward.check_same("relu_backward", upstream)?;
    let mut g = upstream.clone();
    relu_mask_in_place(forward.data(), g.data_mut());
    Ok(g)
}

pub(crate) fn relu_mask_in_place(forward: &[f64], grad: &mut [f64]) {
    for (gv, &y) in grad.iter_mut().zip(forward) {
        if y <= 0.0 {
            *gv = 0.0;
        }
    }
}

/// Gradient of the sigmoid given its output `y`.
pub fn sigmoid_backward(y: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    y.check_same("sigmoid_backward", upstream)?;
    Ok(Tensor {
        shape: y.shape.clone(),
        data: y
            .data
            .iter()
            .zip(&upstream.data)
            .map(|(&s, &g)| g * s * (1.0 - s))
            .collect(),
    })
}

/// `W · v` for `W: [m, n]`, `v: [n]`.
pub fn matvec(w: &Tensor, v: &Tensor) -> Result<Tensor> {
    if w.rank() != 2 || v.rank() != 1 || w.shape[1] != v.shape[0] {
        return Err(Error::shape("matvec", &w.shape, &v.shape));
    }
    let n = w.shape[1];
    let data = w
        .data
        .chunks_exact(n)
        .map(|row| row.iter().zip(&v.data).map(|(a, b)| a * b).sum())
        .collect();
    Tensor::new(vec![w.shape[0]], data)
}

/// Returns `(dL/dW, dL/dv)` for `y = W · v` given `dL/dy`.
pub fn matvec_backward(w: &Tensor, v: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    if w.rank() != 2 || upstream.shape() != [w.shape[0]] || v.shape() != [w.shape[1]] {
        return Err(Error::shape("matvec_backward", &w.shape, &upstream.shape));
    }
    let (m, n) = (w.shape[0], w.shape[1]);
    let mut gw = Tensor::zeros(vec![m, n]);
    let mut gv = Tensor::zeros(vec![n]);
    for i in 0..m {
        let g = upstream.data[i];
        let row = &w.data[i * n..(i + 1) * n];
        let grow = &mut gw.data[i * n..(i + 1) * n];
        for j in 0..n {
            grow[j] = g * v.data[j];
            gv.data[j] += g * row[j];
        }
    }
    Ok((gw, gv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(relu(&t(&[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(sigmoid(&t(&[0.0])).data(), &[0.5]);
        assert_eq!(add(&t(&[1.0, 2.0]), &t(&[3.0, 4.0])).unwrap().data(), &[4.0, 6.0]);
        let s = elementwise(Elementwise::Scale, &t(&[1.0, -2.0]), Operand::Scalar(3.0)).unwrap();
        assert_eq!(s.data(), &[3.0, -6.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let err = add(&t(&[1.0, 2.0]), &t(&[1.0, 2.0, 3.0])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn matvec_examples() {
        let id = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matvec(&id, &t(&[3.0, 7.0])).unwrap().data(), &[3.0, 7.0]);
        let w = Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 2.0]).unwrap();
        assert_eq!(matvec(&w, &t(&[1.0, 1.0])).unwrap().data(), &[2.0, 2.0]);
        let z = Tensor::zeros(vec![3, 4]);
        assert_eq!(
            matvec(&z, &t(&[1.0, -2.0, 3.0, 4.0])).unwrap().data(),
            &[0.0, 0.0, 0.0]
        );
        assert!(matvec(&z, &t(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn concat_and_slice() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = Tensor::concat0(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.slice0(1, 3).unwrap(), b);
    }

    #[test]
    fn sigmoid_extremes_stay_in_open_interval() {
        let y = sigmoid(&t(&[-30.0, 30.0]));
        assert!(y.data()[0] > 0.0 && y.data()[1] < 1.0);
    }

    proptest! {
        #[test]
        fn sigmoid_is_symmetric(x in -40.0f64..40.0) {
            prop_assert!((sigmoid_scalar(x) + sigmoid_scalar(-x) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn ops_commute_with_reshape(v in prop::collection::vec(-5.0f64..5.0, 6)) {
            let a = Tensor::new(vec![6], v.clone()).unwrap();
            let b = Tensor::new(vec![2, 3], v).unwrap();
            prop_assert_eq!(relu(&a).into_data(), relu(&b).into_data());
            prop_assert_eq!(sigmoid(&a).into_data(), sigmoid(&b).into_data());
        }

        #[test]
        fn add_mul_commute_and_scale_distributes(
            a in prop::collection::vec(-20i32..20, 5),
            b in prop::collection::vec(-20i32..20, 5),
            s in -5i32..5,
        ) {
            let a = Tensor::from_vec(a.into_iter().map(f64::from).collect());
            let b = Tensor::from_vec(b.into_iter().map(f64::from).collect());
            prop_assert_eq!(add(&a, &b).unwrap(), add(&b, &a).unwrap());
            prop_assert_eq!(mul(&a, &b).unwrap(), mul(&b, &a).unwrap());
            let s = f64::from(s);
            prop_assert_eq!(
                scale(&add(&a, &b).unwrap(), s),
                add(&scale(&a, s), &scale(&b, s)).unwrap()
            );
        }
    }
}
