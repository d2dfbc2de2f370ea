use std::time::Instant;

use agct_tensor::{ConvSpec, Tape, Tensor};

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let (ci, co) = (16, 16);
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::full(&[1, ci, n, n, n], 0.1).with_grad());
    let w = tape.leaf(&Tensor::full(&[co, ci, 3, 3, 3], 0.01).with_grad());
    let t0 = Instant::now();
    let y = tape.conv(x, w, None, ConvSpec::SAME3).unwrap();
    let fwd = t0.elapsed();
    let l = tape.sum(y);
    let t1 = Instant::now();
    tape.backward_leaves(l).unwrap();
    let bwd = t1.elapsed();
    let flop = 2.0 * (n * n * n * ci * co * 27) as f64;
    println!(
        "n={n} fwd {:?} ({:.2} GFLOP/s) bwd {:?} ({:.2} GFLOP/s)",
        fwd,
        flop / fwd.as_secs_f64() / 1e9,
        bwd,
        2.0 * flop / bwd.as_secs_f64() / 1e9
    );
}
