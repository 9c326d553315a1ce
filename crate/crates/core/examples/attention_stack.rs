//! One forward pass through the fusion head, layer by layer.
//!
//! Shows the two structural properties the architecture is built around:
//! inter-channel layers are permutation-equivariant over channels, and the
//! fused embedding has the same width whatever the channel count.

use adhoc_fusion::model::{FusionModel, ModelConfig};
use adhoc_fusion::{Matrix, Normalizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn main() -> adhoc_fusion::Result<()> {
    let config = ModelConfig {
        d_in: 32,
        width: 16,
        heads: 4,
        layers: 3,
        ffn_hidden: 32,
        mode: Normalizer::Sparsemax,
        ..ModelConfig::default()
    };
    let model = FusionModel::init(config, 1)?;
    println!("{} parameters", model.param_count());

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, 6, 32);
    let trace = model.trace(&x)?;
    for (l, heads) in trace.layer_weights.iter().enumerate() {
        let zeros: usize = heads
            .iter()
            .map(|w| w.as_slice().iter().filter(|&&v| v == 0.0).count())
            .sum();
        println!("layer {l}: {} heads, {zeros} exactly-zero attention weights", heads.len());
    }
    println!("fused embedding: {:?}", trace.embedding.shape());

    // Reversing the channels leaves the fused embedding unchanged.
    let perm: Vec<usize> = (0..6).rev().collect();
    let y = model.forward(&x.permute_rows(&perm)?)?;
    println!("max change under channel reversal: {:.2e}", y.max_abs_diff(&trace.embedding));

    for c in [1, 20, 40] {
        let e = model.forward(&random(&mut rng, c, 32))?;
        println!("{c:>2} channels -> embedding {:?}", e.shape());
    }
    Ok(())
}
