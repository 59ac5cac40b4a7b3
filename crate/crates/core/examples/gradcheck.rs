//! Compare reverse-mode gradients with central differences on a small
//! composite graph: matmul, layer norm, GELU and a projection to a scalar.
//!
//! cargo run --release --example gradcheck

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use occlm::tensor::{Tape, Tensor, Var};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

/// sum(gelu(layer_norm(x · w)) ⊙ r)
fn build(tape: &mut Tape, v: &[Var]) -> occlm::tensor::Result<Var> {
    let h = tape.matmul(v[0], v[1])?;
    let h = tape.layer_norm(h, v[2], v[3])?;
    let h = tape.gelu(h)?;
    let h = tape.mul(h, v[4])?;
    tape.sum(h)
}

fn loss(inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone()).unwrap()).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.value(out).data()[0] as f64
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let inputs = vec![
        random(&mut rng, &[3, 4]),
        random(&mut rng, &[4, 5]),
        random(&mut rng, &[5]),
        random(&mut rng, &[5]),
        random(&mut rng, &[3, 5]),
    ];
    let names = ["x", "w", "gamma", "beta", "r"];

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();

    let eps = 1e-2f32;
    for (i, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = tape.grad(*var).unwrap().iter().map(|&g| g as f64).collect();
        let numeric: Vec<f64> = (0..inputs[i].numel())
            .map(|j| {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += eps;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= eps;
                (loss(&plus) - loss(&minus)) / (2.0 * eps as f64)
            })
            .collect();
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        println!("{:>6}: {} entries, relative error {:.2e}", names[i], analytic.len(), diff / norm);
    }
}
