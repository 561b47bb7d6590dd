//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! also a topological order, so the backward pass is a single reverse sweep.
//! Parameter nodes borrow their values from a [`ParamSet`] instead of copying.

use crate::error::{Error, Result};
use crate::net::ops::{self, ConvGeom};
use crate::net::params::{ParamGrads, ParamId, ParamSet};
use crate::net::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d {
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Upsample {
        x: NodeId,
        factor: usize,
    },
    InstanceNorm {
        x: NodeId,
        inv_std: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
}

/// Result of a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: ParamGrads<T>,
    inputs: Vec<(NodeId, Vec<T>)>,
}

impl<T> Gradients<T> {
    /// Gradient for an input created with [`Graph::input_with_grad`].
    pub fn input(&self, id: NodeId) -> Option<&[T]> {
        self.inputs
            .iter()
            .find(|(n, _)| *n == id)
            .map(|(_, g)| g.as_slice())
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, op: Op<T>, value: Option<Tensor<T>>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Input, Some(value), false)
    }

    pub fn input_with_grad(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Input, Some(value), true)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.push(Op::Param(id), None, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        let node = &self.nodes[id.0];
        match (&node.op, &node.value) {
            (Op::Param(pid), _) => &self.params.get(*pid).value,
            (_, Some(v)) => v,
            (_, None) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
    ) -> Result<NodeId> {
        let out = ops::conv2d_forward(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &geom,
        )?;
        let rg = self.needs(x) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
            },
            Some(out),
            rg,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.needs(x);
        self.push(Op::Relu(x), Some(out), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "add of {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), Some(out), rg))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut channels = Vec::with_capacity(xs.len());
        for &x in xs {
            let (xn, xc, xh, xw) = self.value(x).dims4()?;
            if (xn, xh, xw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat of {:?} with {:?}",
                    self.value(x).shape(),
                    self.value(*first).shape()
                )));
            }
            channels.push(xc);
        }
        let total: usize = channels.iter().sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total * hw);
        for ni in 0..n {
            for (&x, &c) in xs.iter().zip(&channels) {
                let src = self.value(x).data();
                data.extend_from_slice(&src[ni * c * hw..(ni + 1) * c * hw]);
            }
        }
        let out = Tensor::from_vec(&[n, total, h, w], data)?;
        let rg = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(Op::Concat(xs.to_vec()), Some(out), rg))
    }

    pub fn upsample(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let out = ops::upsample_forward(self.value(x), factor)?;
        let rg = self.needs(x);
        Ok(self.push(Op::Upsample { x, factor }, Some(out), rg))
    }

    pub fn instance_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let (out, inv_std) = ops::instance_norm_forward(self.value(x))?;
        let rg = self.needs(x);
        Ok(self.push(Op::InstanceNorm { x, inv_std }, Some(out), rg))
    }

    /// Propagates `seed` (the loss gradient with respect to `output`) back
    /// to every parameter and every gradient-tracking input.
    pub fn backward(&self, output: NodeId, seed: &[T]) -> Result<Gradients<T>> {
        if seed.len() != self.value(output).numel() {
            return Err(Error::Shape(format!(
                "seed gradient has {} entries, output has {}",
                seed.len(),
                self.value(output).numel()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed.to_vec());
        let mut param_grads = ParamGrads::zeros_like(self.params);
        let mut input_grads = Vec::new();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => input_grads.push((NodeId(idx), g)),
                Op::Param(pid) => {
                    let dst = param_grads.get_mut(*pid);
                    dst.iter_mut().zip(&g).for_each(|(d, &v)| *d += v);
                }
                Op::Conv2d {
                    x,
                    weight,
                    bias,
                    geom,
                } => {
                    let cg = ops::conv2d_backward(
                        self.value(*x),
                        self.value(*weight),
                        geom,
                        &g,
                        self.needs(*x),
                    )?;
                    if let Some(dx) = cg.input {
                        self.accumulate(&mut grads, *x, dx);
                    }
                    self.accumulate(&mut grads, *weight, cg.weight);
                    if let Some(b) = bias {
                        self.accumulate(&mut grads, *b, cg.bias);
                    }
                }
                Op::Relu(x) => {
                    let y = node.value.as_ref().unwrap().data();
                    let dx = g
                        .iter()
                        .zip(y)
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g);
                }
                Op::Concat(xs) => {
                    let (n, total, h, w) = node.value.as_ref().unwrap().dims4()?;
                    let hw = h * w;
                    let mut offset = 0;
                    for &x in xs {
                        let c = self.value(x).dims4()?.1;
                        if self.needs(x) {
                            let mut dx = Vec::with_capacity(n * c * hw);
                            for ni in 0..n {
                                let start = (ni * total + offset) * hw;
                                dx.extend_from_slice(&g[start..start + c * hw]);
                            }
                            self.accumulate(&mut grads, x, dx);
                        }
                        offset += c;
                    }
                }
                Op::Upsample { x, factor } => {
                    let dx = ops::upsample_backward(self.value(*x).shape(), *factor, &g)?;
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::InstanceNorm { x, inv_std } => {
                    let dx = ops::instance_norm_backward(node.value.as_ref().unwrap(), inv_std, &g)?;
                    self.accumulate(&mut grads, *x, dx);
                }
            }
        }
        input_grads.reverse();
        Ok(Gradients {
            params: param_grads,
            inputs: input_grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], id: NodeId, g: Vec<T>) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    /// Scalar objective `sum(out * probe)` and its gradient by central differences.
    fn fd_check(
        build: &dyn Fn(&mut Graph<'_, f64>, NodeId) -> Result<NodeId>,
        x: &Tensor<f64>,
        params: &ParamSet<f64>,
        probe_seed: u64,
    ) -> f64 {
        let mut g = Graph::new(params);
        let xi = g.input_with_grad(x.clone());
        let out = build(&mut g, xi).unwrap();
        let mut rng = SplitMix64::new(probe_seed);
        let probe: Vec<f64> = (0..g.value(out).numel()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let grads = g.backward(out, &probe).unwrap();
        let analytic_x = grads.input(xi).unwrap().to_vec();

        let objective = |xv: &Tensor<f64>, ps: &ParamSet<f64>| {
            let mut g = Graph::new(ps);
            let xi = g.input(xv.clone());
            let out = build(&mut g, xi).unwrap();
            g.value(out).data().iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-4;
        let mut worst = 0.0f64;
        let mut compare = |a: f64, n: f64| {
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            worst = worst.max(err);
        };
        for (i, &a) in analytic_x.iter().enumerate() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            compare(a, (objective(&xp, params) - objective(&xm, params)) / (2.0 * h));
        }
        for (pi, p) in params.iter().enumerate() {
            for i in 0..p.value.numel() {
                let mut pp = params.clone();
                pp.get_mut(ParamId(pi)).value.data_mut()[i] += h;
                let mut pm = params.clone();
                pm.get_mut(ParamId(pi)).value.data_mut()[i] -= h;
                let num = (objective(x, &pp) - objective(x, &pm)) / (2.0 * h);
                compare(grads.params.get(ParamId(pi))[i], num);
            }
        }
        worst
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = SplitMix64::new(5);
        for geom in [
            ConvGeom::new(1, 1, 1),
            ConvGeom::new(2, 1, 1),
            ConvGeom::new(1, 2, 2),
            ConvGeom::new(2, 2, 1),
        ] {
            let mut ps = ParamSet::new();
            let w = ps.add("backbone.w", random(&[3, 2, 3, 3], &mut rng)).unwrap();
            let b = ps.add("backbone.b", random(&[3], &mut rng)).unwrap();
            let x = random(&[2, 2, 6, 7], &mut rng);
            let build = move |g: &mut Graph<'_, f64>, xi: NodeId| {
                let wn = g.param(w);
                let bn = g.param(b);
                g.conv2d(xi, wn, Some(bn), geom)
            };
            let worst = fd_check(&build, &x, &ps, 1);
            assert!(worst < 1e-6, "{geom:?}: rel err {worst}");
        }
    }

    #[test]
    fn pointwise_conv_gradients() {
        let mut rng = SplitMix64::new(6);
        let mut ps = ParamSet::new();
        let w = ps.add("head.w", random(&[4, 3, 1, 1], &mut rng)).unwrap();
        let x = random(&[1, 3, 5, 5], &mut rng);
        let build = move |g: &mut Graph<'_, f64>, xi: NodeId| {
            let wn = g.param(w);
            g.conv2d(xi, wn, None, ConvGeom::new(1, 1, 0))
        };
        assert!(fd_check(&build, &x, &ps, 2) < 1e-6);
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = SplitMix64::new(7);
        let mut ps = ParamSet::new();
        let w = ps.add("head.w", random(&[2, 3, 3, 3], &mut rng)).unwrap();
        let x = random(&[2, 3, 4, 4], &mut rng);
        let build = move |g: &mut Graph<'_, f64>, xi: NodeId| {
            let wn = g.param(w);
            let a = g.conv2d(xi, wn, None, ConvGeom::new(1, 1, 1))?;
            let n = g.instance_norm(a)?;
            let r = g.relu(n);
            let s = g.add(r, a)?;
            let c = g.concat(&[s, xi, a])?;
            g.upsample(c, 4)
        };
        let worst = fd_check(&build, &x, &ps, 3);
        assert!(worst < 1e-5, "rel err {worst}");
    }

    #[test]
    fn dilated_conv_equals_zero_inflated_kernel() {
        let mut rng = SplitMix64::new(8);
        let k3 = random(&[2, 2, 3, 3], &mut rng);
        let mut k5 = Tensor::<f64>::zeros(&[2, 2, 5, 5]);
        for o in 0..2 {
            for i in 0..2 {
                for a in 0..3 {
                    for b in 0..3 {
                        k5.data_mut()[((o * 2 + i) * 5 + 2 * a) * 5 + 2 * b] =
                            k3.data()[((o * 2 + i) * 3 + a) * 3 + b];
                    }
                }
            }
        }
        let x = random(&[1, 2, 9, 8], &mut rng);
        let dilated = ops::conv2d_forward(&x, &k3, None, &ConvGeom::new(1, 2, 2)).unwrap();
        let dense = ops::conv2d_forward(&x, &k5, None, &ConvGeom::new(1, 1, 2)).unwrap();
        assert_eq!(dilated.shape(), dense.shape());
        for (a, b) in dilated.data().iter().zip(dense.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_and_concat_values() {
        let ps = ParamSet::<f32>::new();
        let mut g = Graph::new(&ps);
        let a = g.input(Tensor::from_vec(&[1, 1, 1, 2], vec![-1.0, 2.0]).unwrap());
        let r = g.relu(a);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);

        let x = g.input(Tensor::from_vec(&[1, 2, 1, 1], vec![1.0, 2.0]).unwrap());
        let y = g.input(Tensor::from_vec(&[1, 3, 1, 1], vec![3.0, 4.0, 5.0]).unwrap());
        let c = g.concat(&[x, y]).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 5, 1, 1]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn shape_errors() {
        let ps = ParamSet::<f32>::new();
        let mut g = Graph::new(&ps);
        let a = g.input(Tensor::zeros(&[1, 1, 2, 2]));
        let b = g.input(Tensor::zeros(&[1, 1, 2, 3]));
        assert!(g.add(a, b).is_err());
        assert!(g.concat(&[a, b]).is_err());
        assert!(g.backward(a, &[0.0; 3]).is_err());
    }
}
