//! Finite-difference check of a small composite expression on the tape.

use lambo::gradcheck::check;
use lambo::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
    let b = Tensor::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));

    // sum(log_softmax(swish(a) @ b))
    let report = check(&[a, b], 1e-5, |tape, v| {
        let t = tape.swish(v[0])?;
        let p = tape.matmul(t, v[1])?;
        let s = tape.log_softmax(p)?;
        tape.sum(s)
    })?;
    for (i, e) in report.relative_errors.iter().enumerate() {
        println!("input {i}: relative error {e:.2e}");
    }
    Ok(())
}
