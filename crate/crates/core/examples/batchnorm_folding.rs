//! Folding batch normalization into the preceding convolution.

use eptq::fixtures;
use eptq::forward::evaluate;
use eptq::graph::fold_batchnorm;
use eptq::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> eptq::Result<()> {
    let graph = fixtures::conv_bn(3);
    let folded = fold_batchnorm(&graph)?;
    let names = |g: &eptq::graph::NetworkGraph| g.layers().iter().map(|l| l.name.clone()).collect::<Vec<_>>().join(" ");
    println!("before: {}", names(&graph));
    println!("after:  {}", names(&folded));
    println!("comparison points after folding: {:?}", folded.comparison_points());

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let len: usize = graph.input_shape().iter().product();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = Tensor::new(graph.input_shape().to_vec(), (0..len).map(|_| StandardNormal.sample(&mut rng)).collect())?;
        let a = evaluate(&graph, &x, None)?;
        let b = evaluate(&folded, &x, None)?;
        for (p, q) in a.data().iter().zip(b.data()) {
            worst = worst.max((p - q).abs());
        }
    }
    println!("max output difference over 100 inputs: {worst:.2e}");
    Ok(())
}
