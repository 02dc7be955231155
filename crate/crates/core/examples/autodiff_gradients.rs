//! Records a small computation on a tape, runs reverse mode, and checks one
//! gradient entry against a central difference.

use nfe_mri::autodiff::Tape;

fn loss(w: &[f64]) -> (f64, Vec<f64>) {
    let tape = Tape::new();
    let x = tape.constant(vec![0.1, -0.4, 0.7, 0.2, 0.5, -0.3], &[3, 2]);
    let wv = tape.leaf(w.to_vec(), &[2, 2]);
    let h = tape.sin(tape.matmul(x, wv));
    let l = tape.mean(tape.sqrt_shift(tape.mul(h, h), 1e-12));
    let grads = tape.backward(l).expect("scalar loss");
    (tape.scalar_value(l), grads.wrt(&tape, wv))
}

fn main() {
    let w = vec![1.5, -0.7, 0.3, 2.0];
    let (value, grad) = loss(&w);
    println!("loss {value:.6}, gradient {grad:.6?}");
    let h = 1e-6;
    let mut up = w.clone();
    up[2] += h;
    let mut down = w.clone();
    down[2] -= h;
    let fd = (loss(&up).0 - loss(&down).0) / (2.0 * h);
    println!("d loss / d w[2]: reverse mode {:.8}, finite difference {fd:.8}", grad[2]);
}
