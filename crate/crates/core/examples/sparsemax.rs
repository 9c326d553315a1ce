//! Softmax versus sparsemax on a few score vectors.
//!
//! Sparsemax is the Euclidean projection onto the probability simplex, so
//! it can put exactly zero mass on low scores; softmax never does.

use adhoc_fusion::normalize::{softmax, sparsemax, sparsemax_threshold};

fn show(label: &str, v: &[f64]) {
    let cells: Vec<String> = v.iter().map(|x| format!("{x:7.4}")).collect();
    println!("  {label:<10} [{}]", cells.join(", "));
}

fn main() {
    for z in [
        vec![3.0, 1.0],
        vec![0.5, 0.1],
        vec![0.0, 0.0, 0.0],
        vec![1.2, 1.0, 0.1, -2.0, 0.9],
    ] {
        let (tau, support) = sparsemax_threshold(&z);
        println!("z = {z:?}  (tau = {tau:.4}, support size {support})");
        show("softmax", &softmax(&z));
        show("sparsemax", &sparsemax(&z));
        let zeros = sparsemax(&z).iter().filter(|&&p| p == 0.0).count();
        println!("  exact zeros: sparsemax {zeros}, softmax 0\n");
    }
}
