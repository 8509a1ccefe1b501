// Differentiates a small expression on the tape and compares against a
// central difference.

use sage::tensor::{Tape, Tensor};

fn f(x: &[f64], grad: bool) -> (f64, Vec<f64>) {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::new(vec![2, 3], x.to_vec()).unwrap());
    let w = t.constant(Tensor::new(vec![3, 2], vec![0.5, -1.0, 0.25, 0.75, -0.5, 1.5]).unwrap());
    let h = t.matmul(a, w).unwrap();
    let s = t.softmax_rows(h, None).unwrap();
    let g = t.gelu(s).unwrap();
    let y = t.sum(g).unwrap();
    let value = t.value(y).data()[0];
    if !grad {
        return (value, Vec::new());
    }
    t.backward(y).unwrap();
    (value, t.grad(a).unwrap().data().to_vec())
}

pub fn run_example() {
    let x = [0.3, -0.7, 1.1, 0.0, 0.4, -0.2];
    let (y, g) = f(&x, true);
    println!("y = {y:.6}");
    let h = 1e-4;
    for i in 0..x.len() {
        let mut up = x;
        let mut down = x;
        up[i] += h;
        down[i] -= h;
        let numeric = (f(&up, false).0 - f(&down, false).0) / (2.0 * h);
        println!("dy/dx[{i}]  tape {:+.8}  numeric {numeric:+.8}", g[i]);
        assert!((g[i] - numeric).abs() < 1e-7);
    }
}

#[allow(dead_code)]
fn main() {
    run_example();
}
