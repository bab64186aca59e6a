//! Verify analytic gradients against central finite differences, from single
//! layers up to the whole network, in 64-bit arithmetic.

use lstsr::autodiff::{grad_check, BnState, Tensor};
use lstsr::mrunet::{MruNet, MruNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn randn(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_f64_slice(
        shape,
        &(0..n)
            .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
            .collect::<Vec<_>>(),
    )
    .unwrap()
}

fn main() {
    // A convolution with bias, checked at 40 coordinates per tensor.
    let report = grad_check(
        |g, vars| {
            let y = g.conv2d(vars[0], vars[1], vars[2], 1, 1)?;
            let t = g.leaf(Tensor::zeros([2, 4, 8, 8]), false);
            g.mse_loss(y, t)
        },
        &[
            randn([2, 3, 8, 8], 1),
            randn([4, 3, 3, 3], 2),
            randn([1, 4, 1, 1], 3),
        ],
        40,
        1e-5,
        10,
    )
    .expect("conv2d check");
    println!(
        "conv2d:        {} coords, max rel err {:.3e}",
        report.checked, report.max_rel_err
    );

    let report = grad_check(
        |g, vars| {
            let y = g.conv_transpose2d(vars[0], vars[1], vars[2], 2)?;
            let t = g.leaf(Tensor::zeros([2, 3, 10, 10]), false);
            g.mse_loss(y, t)
        },
        &[
            randn([2, 5, 5, 5], 4),
            randn([5, 3, 2, 2], 5),
            randn([1, 3, 1, 1], 6),
        ],
        40,
        1e-5,
        11,
    )
    .expect("conv_transpose2d check");
    println!(
        "conv_t2d:      {} coords, max rel err {:.3e}",
        report.checked, report.max_rel_err
    );

    let report = grad_check(
        |g, vars| {
            let mut bn = BnState::<f64>::new(3, 0.1, 1e-5);
            let y = g.batchnorm2d(vars[0], vars[1], vars[2], &mut bn, true)?;
            let t = g.leaf(Tensor::zeros([4, 3, 6, 6]), false);
            g.mse_loss(y, t)
        },
        &[
            randn([4, 3, 6, 6], 7),
            randn([1, 3, 1, 1], 8),
            randn([1, 3, 1, 1], 9),
        ],
        40,
        1e-5,
        12,
    )
    .expect("batchnorm check");
    println!(
        "batchnorm2d:   {} coords, max rel err {:.3e}",
        report.checked, report.max_rel_err
    );

    // Whole network: every parameter of a small config against the MSE loss.
    let cfg = MruNetConfig {
        levels: 2,
        base_filters: 2,
        seed: 5,
        ..MruNetConfig::default()
    };
    let mut net: MruNet<f64> = MruNet::new(cfg).unwrap();
    // Keep activations away from the ReLU kink, where finite differences
    // are meaningless, and give the zero-initialized head generic values so
    // upstream gradients do not vanish identically.
    for i in 0..net.params().len() {
        if net.param_names()[i].ends_with(".beta") {
            let shape = net.params()[i].shape();
            net.params_mut()[i] = Tensor::full(shape, 1.0);
        }
    }
    let hw = net.param_index("output.conv.weight").unwrap();
    net.params_mut()[hw] = Tensor::from_f64_slice([1, 2, 1, 1], &[0.41, -0.29]).unwrap();
    let hb = net.param_index("output.conv.bias").unwrap();
    net.params_mut()[hb] = Tensor::from_f64_slice([1, 1, 1, 1], &[0.07]).unwrap();
    let x = randn([1, 1, 16, 16], 20);
    let target = randn([1, 1, 16, 16], 21);
    let params = net.params().to_vec();
    let report = grad_check(
        |g, vars| {
            let xv = g.leaf(x.clone(), false);
            let mut bn: Vec<BnState<f64>> = net
                .bn_states()
                .iter()
                .map(|s| BnState::new(s.running_mean.len(), 0.1, 1e-5))
                .collect();
            let mut view = MruNet::new(cfg).unwrap();
            let out = view.forward_from_vars(g, vars, xv, Some(&mut bn), true)?;
            let tv = g.leaf(target.clone(), false);
            g.mse_loss(out, tv)
        },
        &params,
        3,
        1e-5,
        22,
    )
    .expect("network check");
    println!(
        "full network:  {} coords over {} tensors, max rel err {:.3e}",
        report.checked,
        params.len(),
        report.max_rel_err
    );
}
