//! The tensor core on its own: a tiny conv + softmax model in f64, with
//! reverse-mode gradients compared against central differences.
//!
//! cargo run --release --example autodiff_check

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xfeat::tensor::{conv2d, Tensor};

fn loss(x: &Tensor<f64>, w: &Tensor<f64>) -> xfeat::Result<Tensor<f64>> {
    let y = conv2d(x, w, None, 2, 1)?.relu()?;
    let n = y.shape()[1];
    let rows = y.reshape(&[n, y.len() / n])?.transpose()?;
    rows.log_softmax(1)?.pick(&vec![1; rows.shape()[0]])?.mean()?.scale(-1.0)
}

fn main() -> xfeat::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let x = Tensor::from_vec(draw(2 * 16 * 16), &[1, 2, 16, 16])?;
    let w0 = draw(4 * 2 * 9);
    let w = Tensor::leaf(w0.clone(), &[4, 2, 3, 3], true)?;
    let l = loss(&x, &w)?;
    l.backward()?;
    let grad = w.grad().expect("leaf gradient");
    println!("loss {:.6}", l.item()?);

    let h = 1e-6;
    let mut worst = 0.0f64;
    for k in 0..w0.len() {
        let at = |d: f64| -> xfeat::Result<f64> {
            let mut v = w0.clone();
            v[k] += d;
            loss(&x, &Tensor::from_vec(v, &[4, 2, 3, 3])?)?.item()
        };
        let numeric = (at(h)? - at(-h)?) / (2.0 * h);
        let rel = (grad[k] - numeric).abs() / grad[k].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    println!("{} weights, max relative gradient error {worst:.2e}", w0.len());
    Ok(())
}
