//! Reverse-mode Jacobians against central finite differences.
//!
//! Every Jacobian row is one vector-Jacobian product with a unit seed; the
//! finite-difference matrix perturbs each target element in turn.

use eptq::fixtures;
use eptq::forward::{finite_diff_jacobian, vjp, Target};
use eptq::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> eptq::Result<()> {
    let graph = fixtures::conv_bn(0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let len: usize = graph.input_shape().iter().product();
    let x = Tensor::new(graph.input_shape().to_vec(), (0..len).map(|_| StandardNormal.sample(&mut rng)).collect())?;
    let d0: usize = graph.output_shape().iter().product();

    let targets = [
        Target::Input,
        Target::Weight("conv".into()),
        Target::Bias("fc".into()),
        Target::Activation("relu".into()),
    ];
    for target in &targets {
        let fd = finite_diff_jacobian(&graph, &x, target, 1e-6)?;
        let mut worst = 0.0f64;
        for i in 0..d0 {
            let mut seed = vec![0.0; d0];
            seed[i] = 1.0;
            let row = &vjp(&graph, &x, &Tensor::vector(seed), std::slice::from_ref(target))?[0];
            for (j, g) in row.data().iter().enumerate() {
                worst = worst.max((g - fd[(i, j)]).abs());
            }
        }
        println!("{target:?}: {d0}x{} Jacobian, max |autodiff - fd| = {worst:.2e}", fd.ncols());
    }
    Ok(())
}
