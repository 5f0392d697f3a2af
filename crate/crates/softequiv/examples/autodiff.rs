//! The tensor engine on its own: taped forward, one backward pass, and a
//! finite-difference cross-check.
//!
//!     cargo run -p softequiv --example autodiff

use softequiv::tensor::Tape;

fn main() {
    // forward: loss = mean(softmax(x W + b) * m)
    let tape: Tape<f64> = Tape::new();
    let x = tape
        .leaf_grad(vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.75], &[2, 3])
        .unwrap();
    let w = tape
        .leaf_grad(vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.5, 0.25, 0.25, -0.1], &[3, 3])
        .unwrap();
    let b = tape.leaf_grad(vec![0.0, 0.1, -0.1], &[3]).unwrap();
    let mask = tape.leaf(vec![1.0, 0.0, 2.0, 0.5, 1.0, 0.0], &[2, 3]).unwrap();

    let logits = x.matmul(w).unwrap().add_bias(b).unwrap();
    let probs = logits.softmax(1).unwrap();
    let loss = probs.mul(mask).unwrap().mean_all();
    println!("loss = {:.6}", loss.item());

    // one reverse sweep fills every requires_grad leaf
    tape.backward(loss).unwrap();
    println!("dL/db = {:?}", tape.grad_or_zeros(b));

    // central finite differences agree
    let f = |bv: &[f64]| {
        let t: Tape<f64> = Tape::new();
        let x = t
            .leaf(vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.75], &[2, 3])
            .unwrap();
        let w = t
            .leaf(vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.5, 0.25, 0.25, -0.1], &[3, 3])
            .unwrap();
        let b = t.leaf(bv.to_vec(), &[3]).unwrap();
        let mask = t.leaf(vec![1.0, 0.0, 2.0, 0.5, 1.0, 0.0], &[2, 3]).unwrap();
        x.matmul(w)
            .unwrap()
            .add_bias(b)
            .unwrap()
            .softmax(1)
            .unwrap()
            .mul(mask)
            .unwrap()
            .mean_all()
            .item()
    };
    let h = 1e-5;
    let analytic = tape.grad_or_zeros(b);
    for i in 0..3 {
        let mut up = vec![0.0, 0.1, -0.1];
        up[i] += h;
        let mut down = vec![0.0, 0.1, -0.1];
        down[i] -= h;
        let fd = (f(&up) - f(&down)) / (2.0 * h);
        println!(
            "b[{i}]: analytic {:+.8} vs finite difference {:+.8}",
            analytic[i], fd
        );
    }

    // a second backward pass on the same tape is rejected
    println!("second backward: {:?}", tape.backward(loss).unwrap_err());
}
