//! Fixtures shared by the benchmarks.

use ccreid_core::eval::RetrievalLabels;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` unit-norm embeddings of dimension `dim` with `ids` identities, two
/// cameras and three outfits per identity.
pub fn retrieval_fixture(n: usize, dim: usize, ids: u32, seed: u64) -> (Vec<Vec<f64>>, Vec<RetrievalLabels>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut emb = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        emb.push(v.into_iter().map(|x| x / norm).collect());
        let identity = i as u32 % ids;
        labels.push(RetrievalLabels {
            identity,
            camera: (i as u32 / ids) % 2,
            clothes: identity * 3 + (i as u32 / (2 * ids)) % 3,
        });
    }
    (emb, labels)
}
