//! Compares tape gradients with central differences for a small
//! conv → layer norm → SiLU graph, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vtok::tensor::{Tape, TemporalPadding, Tensor, Var};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
}

fn graph(tape: &mut Tape<f64>, x: Var, w: &Tensor<f64>) -> vtok::Result<Var> {
    let w = tape.constant(w.clone());
    let y = tape.conv3d(x, w, None, [1, 2, 2], TemporalPadding::Causal)?;
    let scale = tape.constant(Tensor::full(&[4], 1.5));
    let shift = tape.constant(Tensor::full(&[4], -0.2));
    let y = tape.layer_norm(y, scale, shift, &[1])?;
    let y = tape.silu(y)?;
    let y = tape.square(y)?;
    tape.mean(y)
}

fn main() -> vtok::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x0 = random(&[1, 3, 4, 6, 6], &mut rng);
    let w = random(&[4, 3, 3, 3, 3], &mut rng);

    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let loss = graph(&mut tape, x, &w)?;
    tape.backward(loss)?;
    let analytic = tape.grad(x);

    let eval = |v: &Tensor<f64>| -> vtok::Result<f64> {
        let mut t = Tape::new();
        let x = t.leaf(v.clone());
        let l = graph(&mut t, x, &w)?;
        Ok(t.value(l).item())
    };
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    let mut x = x0.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let up = eval(&x)?;
        x.data_mut()[i] = orig - eps;
        let down = eval(&x)?;
        x.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
    }
    println!("loss {:.6}", tape.value(loss).item());
    println!("{} inputs checked, max relative error {worst:.2e}", x0.numel());
    println!("conv MACs recorded on the tape: {}", tape.macs());
    Ok(())
}
