//! Differentiable primitives on [`Var`].

use std::sync::Arc;

use super::kernels::{self, ConvGeom, PoolGeom};
use super::tape::{Op, Var};
use super::{numel, Tensor};
use crate::error::{shape_err, Error, Result};

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for d in 0..rank {
        let da = if d + a.len() >= rank {
            a[d + a.len() - rank]
        } else {
            1
        };
        let db = if d + b.len() >= rank {
            b[d + b.len() - rank]
        } else {
            1
        };
        out[d] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("shapes {:?} and {:?} do not broadcast", a, b)),
        };
    }
    Ok(out)
}

// fallible, so these can't be the std operator traits
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape(), other.tape()) {
            Ok(())
        } else {
            Err(Error::Precondition(
                "operands live on different tapes".into(),
            ))
        }
    }

    /// Broadcast both operands to a common shape.
    fn aligned(self, other: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        self.same_tape(&other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa == sb {
            return Ok((self, other));
        }
        let target = broadcast_shape(&sa, &sb)?;
        Ok((self.expand(&target)?, other.expand(&target)?))
    }

    fn binary(
        self,
        other: Var<'t>,
        f: impl Fn(f32, f32) -> f32,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        let (a, b) = self.aligned(other)?;
        let value = a.value().zip_map(&b.value(), f)?;
        a.tape().push(value, op(a.id(), b.id()))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |x, y| x + y, Op::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |x, y| x - y, Op::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |x, y| x * y, Op::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.mul(other.powf(-1.0)?)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.tape()
            .push(self.value().map(|x| -x), Op::Neg(self.id()))
    }

    pub fn scale(self, s: f32) -> Result<Var<'t>> {
        self.tape()
            .push(self.value().map(|x| x * s), Op::Scale(self.id(), s))
    }

    pub fn add_scalar(self, s: f32) -> Result<Var<'t>> {
        self.tape()
            .push(self.value().map(|x| x + s), Op::AddScalar(self.id()))
    }

    /// Elementwise product with a fixed tensor of the same shape.
    pub fn mul_const(self, c: &Tensor) -> Result<Var<'t>> {
        let value = self.value().zip_map(c, |x, y| x * y)?;
        self.tape().push(value, Op::MulConst(self.id(), c.clone()))
    }

    pub fn powf(self, p: f32) -> Result<Var<'t>> {
        self.tape()
            .push(self.value().map(|x| x.powf(p)), Op::Powf(self.id(), p))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.tape()
            .push(self.value().map(f32::exp), Op::Exp(self.id()))
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.tape()
            .push(self.value().map(f32::ln), Op::Log(self.id()))
    }

    pub fn expand(self, shape: &[usize]) -> Result<Var<'t>> {
        let src = self.value();
        if src.shape() == shape {
            return Ok(self);
        }
        let data = kernels::expand(src.data(), src.shape(), shape)?;
        self.tape().push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Expand(self.id()),
        )
    }

    /// Sum down to a shape that broadcasts back to the current one.
    pub fn sum_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let src = self.value();
        if src.shape() == shape {
            return Ok(self);
        }
        let data = kernels::sum_to(src.data(), src.shape(), shape)?;
        self.tape().push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::SumTo(self.id()),
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Result<Var<'t>> {
        self.sum_to(&[])
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().numel() as f32;
        self.sum()?.scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        self.tape().push(value, Op::Reshape(self.id()))
    }

    /// Transpose of a matrix.
    pub fn t(self) -> Result<Var<'t>> {
        let v = self.value();
        let &[r, c] = v.shape() else {
            return Err(shape_err!("transpose wants a matrix, got {:?}", v.shape()));
        };
        let data = kernels::transpose(v.data(), r, c);
        self.tape().push(
            Tensor::from_parts(vec![c, r], data),
            Op::Transpose(self.id()),
        )
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return Err(shape_err!(
                "matmul wants matrices, got {:?} and {:?}",
                a.shape(),
                b.shape()
            ));
        };
        if k != k2 {
            return Err(shape_err!(
                "matmul inner dimensions differ: {:?} x {:?}",
                a.shape(),
                b.shape()
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
        self.tape().push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(self.id(), other.id()),
        )
    }

    /// 2-d convolution of a BCHW input with an OIKK weight.
    pub fn conv2d(self, weight: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.same_tape(&weight)?;
        let (x, w) = (self.value(), weight.value());
        let geom = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
        let out = kernels::conv2d(x.data(), w.data(), &geom);
        let value = Tensor::from_parts(geom.output_shape().to_vec(), out);
        self.tape().push(
            value,
            Op::Conv {
                x: self.id(),
                w: weight.id(),
                geom,
            },
        )
    }

    pub(crate) fn conv_back_input(self, weight: Var<'t>, geom: ConvGeom) -> Result<Var<'t>> {
        let (gy, w) = (self.value(), weight.value());
        check_shape(
            gy.shape(),
            &geom.output_shape(),
            "conv2d_back_input gradient",
        )?;
        check_shape(w.shape(), &geom.weight_shape(), "conv2d_back_input weight")?;
        let out = kernels::conv2d_back_input(gy.data(), w.data(), &geom);
        let value = Tensor::from_parts(geom.input_shape().to_vec(), out);
        self.tape().push(
            value,
            Op::ConvBackInput {
                gy: self.id(),
                w: weight.id(),
                geom,
            },
        )
    }

    /// Called on the convolution input `x` with the output gradient `gy`.
    pub(crate) fn conv_back_weight(self, gy: Var<'t>, geom: ConvGeom) -> Result<Var<'t>> {
        let (x, g) = (self.value(), gy.value());
        check_shape(x.shape(), &geom.input_shape(), "conv2d_back_weight input")?;
        check_shape(
            g.shape(),
            &geom.output_shape(),
            "conv2d_back_weight gradient",
        )?;
        let out = kernels::conv2d_back_weight(x.data(), g.data(), &geom);
        let value = Tensor::from_parts(geom.weight_shape().to_vec(), out);
        self.tape().push(
            value,
            Op::ConvBackWeight {
                x: self.id(),
                gy: gy.id(),
                geom,
            },
        )
    }

    pub fn avg_pool2d(self, kernel: usize, stride: usize, pad: usize) -> Result<Var<'t>> {
        let geom = PoolGeom::new(&self.shape(), kernel, stride, pad)?;
        self.avg_pool_geom(geom)
    }

    pub(crate) fn avg_pool_geom(self, geom: PoolGeom) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        if shape.len() != 4
            || shape[0] * shape[1] != geom.planes
            || shape[2] != geom.height
            || shape[3] != geom.width
        {
            return Err(shape_err!(
                "avg_pool: input {:?} does not match geometry",
                shape
            ));
        }
        let out = kernels::avg_pool(x.data(), &geom);
        let value = Tensor::from_parts(vec![shape[0], shape[1], geom.out_h(), geom.out_w()], out);
        self.tape().push(value, Op::AvgPool { x: self.id(), geom })
    }

    pub(crate) fn avg_pool_adjoint(self, geom: PoolGeom, input_shape: &[usize]) -> Result<Var<'t>> {
        let out = kernels::avg_pool_adjoint(self.value().data(), &geom);
        self.tape().push(
            Tensor::from_parts(input_shape.to_vec(), out),
            Op::AvgPoolAdjoint {
                gy: self.id(),
                geom,
            },
        )
    }

    /// Max pooling; the backward pass routes gradient to the window argmax.
    pub fn max_pool2d(self, kernel: usize, stride: usize, pad: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let geom = PoolGeom::new(&shape, kernel, stride, pad)?;
        let idx = kernels::max_pool_argmax(self.value().data(), &geom);
        self.gather(
            Arc::new(idx),
            &[shape[0], shape[1], geom.out_h(), geom.out_w()],
        )
    }

    /// `out.flat[i] = self.flat[idx[i]]`, reshaped to `shape`.
    pub fn gather(self, idx: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t>> {
        let src = self.value();
        if numel(shape) != idx.len() {
            return Err(shape_err!(
                "gather: {} indices for output shape {:?}",
                idx.len(),
                shape
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.numel()) {
            return Err(shape_err!(
                "gather index {} out of range {}",
                bad,
                src.numel()
            ));
        }
        let value = Tensor::from_parts(shape.to_vec(), kernels::gather(src.data(), &idx));
        self.tape().push(value, Op::Gather { x: self.id(), idx })
    }

    /// Adjoint of [`Var::gather`]: scatter-add into a zero tensor of `shape`.
    pub fn scatter(self, idx: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t>> {
        let src = self.value();
        if src.numel() != idx.len() {
            return Err(shape_err!(
                "scatter: {} values for {} indices",
                src.numel(),
                idx.len()
            ));
        }
        let value = Tensor::from_parts(
            shape.to_vec(),
            kernels::scatter_add(src.data(), &idx, numel(shape)),
        );
        self.tape().push(value, Op::Scatter { x: self.id(), idx })
    }

    /// Select rows (entries of the leading axis) in the given order.
    pub fn rows(self, which: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let n = *shape
            .first()
            .ok_or_else(|| shape_err!("rows() on a scalar"))?;
        let row = numel(&shape[1..]);
        let mut idx = Vec::with_capacity(which.len() * row);
        for &r in which {
            if r >= n {
                return Err(shape_err!("row {} out of range {}", r, n));
            }
            idx.extend(r * row..(r + 1) * row);
        }
        let mut out_shape = shape;
        out_shape[0] = which.len();
        self.gather(Arc::new(idx), &out_shape)
    }

    /// Element `i` of a vector, as a scalar.
    pub fn index(self, i: usize) -> Result<Var<'t>> {
        self.gather(Arc::new(vec![i]), &[])
    }

    /// Solve `self * x = rhs` for square `self`.
    pub fn solve(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let (a, b) = (self.value(), rhs.value());
        let (&[n, n2], &[n3, m]) = (a.shape(), b.shape()) else {
            return Err(shape_err!(
                "solve wants matrices, got {:?} and {:?}",
                a.shape(),
                b.shape()
            ));
        };
        if n != n2 || n != n3 {
            return Err(shape_err!(
                "solve: system {:?} with rhs {:?}",
                a.shape(),
                b.shape()
            ));
        }
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::Numeric("non-finite input to linear solve".into()));
        }
        let x = kernels::solve(a.data(), b.data(), n, m)?;
        self.tape().push(
            Tensor::from_parts(vec![n, m], x),
            Op::Solve(self.id(), rhs.id()),
        )
    }
}

fn check_shape(actual: &[usize], expected: &[usize], what: &str) -> Result<()> {
    if actual == expected {
        Ok(())
    } else {
        Err(shape_err!(
            "{}: expected {:?}, got {:?}",
            what,
            expected,
            actual
        ))
    }
}
