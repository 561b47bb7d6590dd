//! Finite-difference check of a small network's parameter gradients in
//! double precision.

use ordsurf::net::{NetConfig, OrdinalNet, ParamId, Real, Tensor};
use ordsurf::ordinal::{ordinal_loss_and_grad, OrdinalLogits};
use ordsurf::{ClassMap, SplitMix64};

fn loss(net: &OrdinalNet<f64>, x: &Tensor<f64>, c: &ClassMap) -> f64 {
    let pass = net.forward(x.clone()).unwrap();
    let l = OrdinalLogits::new(c.width(), c.height(), c.k(), pass.output().data().to_vec()).unwrap();
    ordinal_loss_and_grad(&l, c).unwrap().0
}

fn main() {
    let (k, s) = (4, 16);
    let mut net = OrdinalNet::<f64>::new(NetConfig::tiny(k), 1).unwrap();
    let mut rng = SplitMix64::new(2);
    // the output layer starts at zero, which would hide most of the chain
    for p in net.params_mut().iter_mut() {
        if p.name.starts_with("head.out") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-0.5, 0.5));
        }
    }
    let x = Tensor::from_vec(&[1, 3, s, s], (0..3 * s * s).map(|_| rng.next_f64()).collect()).unwrap();
    let c = ClassMap::new(s, s, k, (0..s * s).map(|_| rng.below(k as u64) as u16).collect()).unwrap();

    let pass = net.forward(x.clone()).unwrap();
    let l = OrdinalLogits::new(s, s, k, pass.output().data().to_vec()).unwrap();
    let (_, g) = ordinal_loss_and_grad(&l, &c).unwrap();
    let grads = net.backward(&pass, &g).unwrap();

    let h = 1e-4;
    for pi in 0..net.params().len() {
        let id = ParamId(pi);
        let n = net.params().get(id).value.numel();
        let mut worst = 0.0f64;
        for i in (0..n).step_by(n.div_ceil(8)) {
            let v = net.params().get(id).value.data()[i];
            let mut probe = net.clone();
            probe.params_mut().get_mut(id).value.data_mut()[i] = v + h;
            let up = loss(&probe, &x, &c);
            probe.params_mut().get_mut(id).value.data_mut()[i] = v - h;
            let down = loss(&probe, &x, &c);
            let num = (up - down) / (2.0 * h);
            let ana = grads.get(id)[i].as_f64();
            worst = worst.max((ana - num).abs() / ana.abs().max(num.abs()).max(1e-6));
        }
        println!("{:<40} worst relative error {worst:.1e}", net.params().get(id).name);
    }
}
