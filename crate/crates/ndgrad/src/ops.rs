use crate::tape::{find_tape, NodeOp};
use crate::tensor::{
    broadcast_shape, broadcast_strides, for_each_broadcast2, reduce_to_shape, strides_for, Tensor,
};
use crate::{NdError, Result, Scalar};

/// Primitive kinds accepted by [`primitive_apply`].
#[derive(Clone, Debug)]
pub enum PrimKind {
    Add,
    MulBroadcast,
    Matmul,
    ContractLastAxis,
    Exp,
    Log,
    Softplus,
    Sigmoid,
    Silu,
    Reshape(Vec<usize>),
    Concat(usize),
    Slice { axis: usize, start: usize, len: usize },
    SumAxis(usize),
    MeanAxis(usize),
}

/// Applies one primitive to `inputs`, recording it on the active tape when
/// any input is traced.
pub fn primitive_apply<S: Scalar>(kind: &PrimKind, inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let need = |n: usize| -> Result<()> {
        if inputs.len() != n {
            return Err(NdError::InvalidArgument(format!(
                "{:?} expects {} inputs, got {}",
                kind,
                n,
                inputs.len()
            )));
        }
        Ok(())
    };
    match kind {
        PrimKind::Add => {
            need(2)?;
            inputs[0].add(inputs[1])
        }
        PrimKind::MulBroadcast => {
            need(2)?;
            inputs[0].mul(inputs[1])
        }
        PrimKind::Matmul => {
            need(2)?;
            inputs[0].matmul(inputs[1])
        }
        PrimKind::ContractLastAxis => {
            need(2)?;
            inputs[0].contract_last(inputs[1])
        }
        PrimKind::Exp => {
            need(1)?;
            inputs[0].exp()
        }
        PrimKind::Log => {
            need(1)?;
            inputs[0].log()
        }
        PrimKind::Softplus => {
            need(1)?;
            inputs[0].softplus()
        }
        PrimKind::Sigmoid => {
            need(1)?;
            inputs[0].sigmoid()
        }
        PrimKind::Silu => {
            need(1)?;
            inputs[0].silu()
        }
        PrimKind::Reshape(shape) => {
            need(1)?;
            inputs[0].reshape(shape)
        }
        PrimKind::Concat(axis) => concat(inputs, *axis),
        PrimKind::Slice { axis, start, len } => {
            need(1)?;
            inputs[0].slice(*axis, *start, *len)
        }
        PrimKind::SumAxis(axis) => {
            need(1)?;
            inputs[0].sum_axis(*axis)
        }
        PrimKind::MeanAxis(axis) => {
            need(1)?;
            inputs[0].mean_axis(*axis)
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum PrimOp {
    Add,
    Mul,
    Matmul,
    ContractLast,
    Exp,
    Log,
    Softplus,
    Sigmoid,
    Silu,
    Reshape,
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    SumAxis { axis: usize },
    MeanAxis { axis: usize },
}

fn record<S: Scalar>(
    name: &'static str,
    op: PrimOp,
    inputs: &[&Tensor<S>],
    output: Tensor<S>,
) -> Result<Tensor<S>> {
    output.ensure_finite(name)?;
    match find_tape(name, inputs)? {
        None => Ok(output),
        Some(tape) => {
            let vals = inputs.iter().map(|t| t.detach()).collect();
            let ids = inputs.iter().map(|t| t.node.as_ref().map(|n| n.id)).collect();
            Ok(tape.record(NodeOp::Prim(op), vals, ids, output))
        }
    }
}

/// Splits a shape at `axis` into (outer, extent, inner) element counts.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(NdError::ShapeMismatch {
            op,
            details: format!("axis {} out of range for shape {:?}", axis, shape),
        });
    }
    Ok(())
}

impl<S: Scalar> Tensor<S> {
    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let out = bin_elementwise("add", self, rhs, |a, b| a + b)?;
        record("add", PrimOp::Add, &[self, rhs], out)
    }

    /// Elementwise product with trailing-axis broadcasting.
    pub fn mul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let out = bin_elementwise("mul", self, rhs, |a, b| a * b)?;
        record("mul", PrimOp::Mul, &[self, rhs], out)
    }

    /// 2-D matrix product, O(m·k·n).
    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let out = matmul_data(self, rhs)?;
        record("matmul", PrimOp::Matmul, &[self, rhs], out)
    }

    /// Contracts the last axis of both operands (per-position dot product),
    /// broadcasting over the leading axes. O(prod(lead)·L).
    pub fn contract_last(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let out = contract_last_data(self, rhs)?;
        record("contract_last", PrimOp::ContractLast, &[self, rhs], out)
    }

    pub fn exp(&self) -> Result<Tensor<S>> {
        let out = self.map_data(|v| v.exp());
        record("exp", PrimOp::Exp, &[self], out)
    }

    pub fn log(&self) -> Result<Tensor<S>> {
        let out = self.map_data(|v| v.ln());
        record("log", PrimOp::Log, &[self], out)
    }

    pub fn softplus(&self) -> Result<Tensor<S>> {
        let out = self.map_data(|v| v.softplus());
        record("softplus", PrimOp::Softplus, &[self], out)
    }

    pub fn sigmoid(&self) -> Result<Tensor<S>> {
        let out = self.map_data(|v| v.sigmoid());
        record("sigmoid", PrimOp::Sigmoid, &[self], out)
    }

    pub fn silu(&self) -> Result<Tensor<S>> {
        let out = self.map_data(|v| v * v.sigmoid());
        record("silu", PrimOp::Silu, &[self], out)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(NdError::ShapeMismatch {
                op: "reshape",
                details: format!("cannot reshape {:?} to {:?}", self.shape(), shape),
            });
        }
        let out = Tensor::from_parts(shape.to_vec(), self.data().to_vec());
        record("reshape", PrimOp::Reshape, &[self], out)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<S>> {
        check_axis("slice", self.shape(), axis)?;
        let (outer, extent, inner) = axis_split(self.shape(), axis);
        if start + len > extent {
            return Err(NdError::ShapeMismatch {
                op: "slice",
                details: format!(
                    "range {}..{} exceeds extent {} of axis {}",
                    start,
                    start + len,
                    extent,
                    axis
                ),
            });
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        let src = self.data();
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let out = Tensor::from_parts(out_shape, data);
        record("slice", PrimOp::Slice { axis, start }, &[self], out)
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<S>> {
        check_axis("sum_axis", self.shape(), axis)?;
        let out = reduce_axis_data(self, axis, false);
        record("sum_axis", PrimOp::SumAxis { axis }, &[self], out)
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<S>> {
        check_axis("mean_axis", self.shape(), axis)?;
        if self.shape()[axis] == 0 {
            return Err(NdError::InvalidArgument("mean over empty axis".into()));
        }
        let out = reduce_axis_data(self, axis, true);
        record("mean_axis", PrimOp::MeanAxis { axis }, &[self], out)
    }

    // Conveniences that desugar to the primitive set.

    pub fn neg(&self) -> Result<Tensor<S>> {
        self.mul(&Tensor::scalar(-S::one()))
    }

    pub fn sub(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.add(&rhs.neg()?)
    }

    pub fn scale(&self, c: S) -> Result<Tensor<S>> {
        self.mul(&Tensor::scalar(c))
    }

    pub fn add_scalar(&self, c: S) -> Result<Tensor<S>> {
        self.add(&Tensor::scalar(c))
    }

    pub fn sum_all(&self) -> Result<Tensor<S>> {
        self.reshape(&[self.numel()])?.sum_axis(0)
    }

    pub fn mean_all(&self) -> Result<Tensor<S>> {
        self.reshape(&[self.numel()])?.mean_axis(0)
    }

    fn map_data(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor::from_parts(self.shape().to_vec(), self.data().iter().map(|&v| f(v)).collect())
    }
}

/// Concatenates tensors along `axis`. All operands must share rank and every
/// extent except the one being joined.
pub fn concat<S: Scalar>(inputs: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
    if inputs.is_empty() {
        return Err(NdError::InvalidArgument("concat of zero tensors".into()));
    }
    let first = inputs[0].shape();
    check_axis("concat", first, axis)?;
    let mut joined = 0usize;
    for t in inputs {
        let s = t.shape();
        if s.len() != first.len()
            || s.iter().enumerate().any(|(d, &e)| d != axis && e != first[d])
        {
            return Err(NdError::ShapeMismatch {
                op: "concat",
                details: format!("incompatible shapes {:?} and {:?}", first, s),
            });
        }
        joined += s[axis];
    }
    let mut out_shape = first.to_vec();
    out_shape[axis] = joined;
    let (outer, _, inner) = axis_split(&out_shape, axis);
    let mut data = vec![S::zero(); outer * joined * inner];
    for o in 0..outer {
        let mut at = 0usize;
        for t in inputs {
            let extent = t.shape()[axis];
            let src = &t.data()[o * extent * inner..(o + 1) * extent * inner];
            let dst = (o * joined + at) * inner;
            data[dst..dst + extent * inner].copy_from_slice(src);
            at += extent;
        }
    }
    let out = Tensor::from_parts(out_shape, data);
    record("concat", PrimOp::Concat { axis }, inputs, out)
}

fn bin_elementwise<S: Scalar>(
    op: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let a_str = broadcast_strides(a.shape(), &out_shape);
    let b_str = broadcast_strides(b.shape(), &out_shape);
    let mut data = vec![S::zero(); out_shape.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast2(&out_shape, &a_str, &b_str, |lin, ao, bo| {
        data[lin] = f(ad[ao], bd[bo]);
    });
    Ok(Tensor::from_parts(out_shape, data))
}

fn matmul_data<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(NdError::ShapeMismatch {
            op: "matmul",
            details: format!("expected (m,k)x(k,n), got {:?} x {:?}", sa, sb),
        });
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![S::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        for l in 0..k {
            let av = ad[i * k + l];
            if av == S::zero() {
                continue;
            }
            let brow = &bd[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

fn transpose2d<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let (m, n) = (t.shape()[0], t.shape()[1]);
    let src = t.data();
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

/// Broadcast strides of the leading (non-contracted) axes of `shape` within
/// `out_lead`, in elements of the full buffer.
fn lead_strides(shape: &[usize], out_lead: &[usize]) -> Vec<usize> {
    let native = strides_for(shape);
    let lead = &shape[..shape.len() - 1];
    let offset = out_lead.len() - lead.len();
    let mut out = vec![0; out_lead.len()];
    for d in 0..out_lead.len() {
        if d >= offset && lead[d - offset] != 1 {
            out[d] = native[d - offset];
        }
    }
    out
}

fn contract_last_data<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.is_empty() || sb.is_empty() || sa[sa.len() - 1] != sb[sb.len() - 1] {
        return Err(NdError::ShapeMismatch {
            op: "contract_last",
            details: format!("last axes must match, got {:?} and {:?}", sa, sb),
        });
    }
    let l = sa[sa.len() - 1];
    let out_lead = broadcast_shape("contract_last", &sa[..sa.len() - 1], &sb[..sb.len() - 1])?;
    let a_str = lead_strides(sa, &out_lead);
    let b_str = lead_strides(sb, &out_lead);
    let mut data = vec![S::zero(); out_lead.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast2(&out_lead, &a_str, &b_str, |lin, ao, bo| {
        let mut acc = S::zero();
        for i in 0..l {
            acc += ad[ao + i] * bd[bo + i];
        }
        data[lin] = acc;
    });
    Ok(Tensor::from_parts(out_lead, data))
}

fn reduce_axis_data<S: Scalar>(t: &Tensor<S>, axis: usize, mean: bool) -> Tensor<S> {
    let (outer, extent, inner) = axis_split(t.shape(), axis);
    let mut out_shape = t.shape().to_vec();
    out_shape.remove(axis);
    let mut data = vec![S::zero(); outer * inner];
    let src = t.data();
    for o in 0..outer {
        for m in 0..extent {
            let base = (o * extent + m) * inner;
            let dst = &mut data[o * inner..(o + 1) * inner];
            for (d, &v) in dst.iter_mut().zip(&src[base..base + inner]) {
                *d += v;
            }
        }
    }
    if mean {
        let denom = S::from_usize(extent).expect("extent fits scalar");
        for v in &mut data {
            *v = *v / denom;
        }
    }
    Tensor::from_parts(out_shape, data)
}

impl PrimOp {
    pub(crate) fn backward<S: Scalar>(
        &self,
        inputs: &[Tensor<S>],
        output: &Tensor<S>,
        grad: &Tensor<S>,
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let g = grad.data();
        Ok(match self {
            PrimOp::Add => {
                let ga = reduce_to_shape(g, grad.shape(), inputs[0].shape());
                let gb = reduce_to_shape(g, grad.shape(), inputs[1].shape());
                vec![
                    Some(Tensor::from_parts(inputs[0].shape().to_vec(), ga)),
                    Some(Tensor::from_parts(inputs[1].shape().to_vec(), gb)),
                ]
            }
            PrimOp::Mul => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let a_str = broadcast_strides(a.shape(), grad.shape());
                let b_str = broadcast_strides(b.shape(), grad.shape());
                let mut ga = vec![S::zero(); a.numel()];
                let mut gb = vec![S::zero(); b.numel()];
                let (ad, bd) = (a.data(), b.data());
                for_each_broadcast2(grad.shape(), &a_str, &b_str, |lin, ao, bo| {
                    ga[ao] += g[lin] * bd[bo];
                    gb[bo] += g[lin] * ad[ao];
                });
                vec![
                    Some(Tensor::from_parts(a.shape().to_vec(), ga)),
                    Some(Tensor::from_parts(b.shape().to_vec(), gb)),
                ]
            }
            PrimOp::Matmul => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let ga = matmul_data(grad, &transpose2d(b))?;
                let gb = matmul_data(&transpose2d(a), grad)?;
                vec![Some(ga), Some(gb)]
            }
            PrimOp::ContractLast => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let l = a.shape()[a.shape().len() - 1];
                let a_str = lead_strides(a.shape(), grad.shape());
                let b_str = lead_strides(b.shape(), grad.shape());
                let mut ga = vec![S::zero(); a.numel()];
                let mut gb = vec![S::zero(); b.numel()];
                let (ad, bd) = (a.data(), b.data());
                for_each_broadcast2(grad.shape(), &a_str, &b_str, |lin, ao, bo| {
                    let gv = g[lin];
                    for i in 0..l {
                        ga[ao + i] += gv * bd[bo + i];
                        gb[bo + i] += gv * ad[ao + i];
                    }
                });
                vec![
                    Some(Tensor::from_parts(a.shape().to_vec(), ga)),
                    Some(Tensor::from_parts(b.shape().to_vec(), gb)),
                ]
            }
            PrimOp::Exp => {
                let gx = output.data().iter().zip(g).map(|(&o, &gv)| o * gv).collect();
                vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), gx))]
            }
            PrimOp::Log => {
                let gx = inputs[0].data().iter().zip(g).map(|(&x, &gv)| gv / x).collect();
                vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), gx))]
            }
            PrimOp::Softplus => {
                let gx = inputs[0].data().iter().zip(g).map(|(&x, &gv)| gv * x.sigmoid()).collect();
                vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), gx))]
            }
            PrimOp::Sigmoid => {
                let gx = output
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&o, &gv)| gv * o * (S::one() - o))
                    .collect();
                vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), gx))]
            }
            PrimOp::Silu => {
                let gx = inputs[0]
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| {
                        let s = x.sigmoid();
                        gv * s * (S::one() + x * (S::one() - s))
                    })
                    .collect();
                vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), gx))]
            }
            PrimOp::Reshape => {
                vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), g.to_vec()))]
            }
            PrimOp::Concat { axis } => {
                let mut grads = Vec::with_capacity(inputs.len());
                let mut at = 0usize;
                for t in inputs {
                    let extent = t.shape()[*axis];
                    grads.push(Some(slice_data(grad, *axis, at, extent)));
                    at += extent;
                }
                grads
            }
            PrimOp::Slice { axis, start } => {
                let src_shape = inputs[0].shape();
                let (outer, extent, inner) = axis_split(src_shape, *axis);
                let len = grad.shape()[*axis];
                let mut gx = vec![S::zero(); inputs[0].numel()];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![Some(Tensor::from_parts(src_shape.to_vec(), gx))]
            }
            PrimOp::SumAxis { axis } | PrimOp::MeanAxis { axis } => {
                let src_shape = inputs[0].shape();
                let (outer, extent, inner) = axis_split(src_shape, *axis);
                let scale = match self {
                    PrimOp::MeanAxis { .. } => {
                        S::one() / S::from_usize(extent).expect("extent fits scalar")
                    }
                    _ => S::one(),
                };
                let mut gx = vec![S::zero(); inputs[0].numel()];
                for o in 0..outer {
                    for m in 0..extent {
                        let base = (o * extent + m) * inner;
                        for i in 0..inner {
                            gx[base + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(src_shape.to_vec(), gx))]
            }
        })
    }
}

fn slice_data<S: Scalar>(t: &Tensor<S>, axis: usize, start: usize, len: usize) -> Tensor<S> {
    let (outer, extent, inner) = axis_split(t.shape(), axis);
    let mut out_shape = t.shape().to_vec();
    out_shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    let src = t.data();
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        data.extend_from_slice(&src[base..base + len * inner]);
    }
    Tensor::from_parts(out_shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_mul_over_rows() {
        let a = Tensor::<f64>::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![10.0, 20.0]).unwrap();
        let out = a.mul(&b).unwrap();
        assert_eq!(out.data(), &[10.0, 40.0, 30.0, 80.0]);
    }

    #[test]
    fn exp_of_zeros_is_ones() {
        let z = Tensor::<f64>::zeros(&[3]);
        assert_eq!(z.exp().unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn linear_loss_gradient() {
        let tape = crate::Tape::<f64>::new();
        let w = tape.param(Tensor::from_vec(vec![2], vec![2.0, 3.0]).unwrap());
        let x = Tensor::from_vec(vec![2], vec![5.0, 7.0]).unwrap();
        let loss = w.mul(&x).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.wrt(&w).unwrap().data(), &[5.0, 7.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let tape = crate::Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(0.0));
        let loss = x.sigmoid().unwrap();
        let grads = loss.backward().unwrap();
        assert!((grads.wrt(&x).unwrap().item().unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn log_rejects_non_finite_output() {
        let x = Tensor::<f64>::from_vec(vec![1], vec![-1.0]).unwrap();
        assert!(matches!(x.log(), Err(NdError::NonFinite { .. })));
    }

    #[test]
    fn mismatched_tapes_error() {
        let t1 = crate::Tape::<f64>::new();
        let t2 = crate::Tape::<f64>::new();
        let a = t1.param(Tensor::scalar(1.0));
        let b = t2.param(Tensor::scalar(2.0));
        assert!(matches!(a.add(&b), Err(NdError::TapeMismatch { .. })));
    }
}
