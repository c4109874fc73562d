//! Build a small differentiable computation on the tape, run backward, and
//! spot-check one gradient against central finite differences.
//!
//!     cargo run --example autograd_basics

use anomaly_distill::tensor::{ConvSpec, Tape, Tensor};

fn main() {
    // Forward: loss = mean(relu(conv2d(x, k)))
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(
        Tensor::new(
            vec![1, 1, 3, 3],
            vec![0.5, -1.0, 2.0, 0.3, 1.5, -0.7, 0.9, 0.1, -0.2],
        )
        .unwrap(),
        true,
    );
    let k = tape.leaf(
        Tensor::new(vec![1, 1, 2, 2], vec![1.0, -0.5, 0.25, 0.75]).unwrap(),
        true,
    );
    let y = tape.conv2d(x, k, ConvSpec::unit()).unwrap();
    let a = tape.relu(y);
    let loss = tape.mean(a);
    println!("loss = {:.6}", tape.value(loss).item());

    tape.backward(loss).unwrap();
    let grad_k = tape.grad_tensor(k);
    println!("dloss/dk = {:?}", grad_k.data());

    // Verify dloss/dk[0] numerically.
    let eval = |delta: f64| {
        let mut t = Tape::<f64>::new();
        let xv = t.leaf(
            Tensor::new(
                vec![1, 1, 3, 3],
                vec![0.5, -1.0, 2.0, 0.3, 1.5, -0.7, 0.9, 0.1, -0.2],
            )
            .unwrap(),
            false,
        );
        let kv = t.leaf(
            Tensor::new(vec![1, 1, 2, 2], vec![1.0 + delta, -0.5, 0.25, 0.75]).unwrap(),
            false,
        );
        let y = t.conv2d(xv, kv, ConvSpec::unit()).unwrap();
        let a = t.relu(y);
        let l = t.mean(a);
        t.value(l).item()
    };
    let h = 1e-6;
    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
    println!(
        "dloss/dk[0]: analytic {:.9}, finite-difference {:.9}",
        grad_k.data()[0],
        numeric
    );
    assert!((grad_k.data()[0] - numeric).abs() < 1e-6);
    println!("gradients agree");
}
