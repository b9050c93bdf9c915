#![allow(dead_code)]

use mdat_core::dataio::{DomainDataset, MultiDomainCorpus, SynthConfig};
use mdat_core::margin::{FiniteHypothesisClass, ScoreTable};
use mdat_core::model::Architecture;
use mdat_core::numkernel::{RngState, SparseVector};

/// 2-domain toy corpus: vocab 20, 8 labeled + 4 unlabeled per domain.
pub fn toy_corpus(seed: u64) -> MultiDomainCorpus {
    let mut rng = RngState::new(seed);
    let domains = (0..2)
        .map(|d| {
            let mut ds = DomainDataset::new(format!("toy{d}"));
            for j in 0..12 {
                let x = random_sparse(&mut rng, 20, 5);
                if j < 8 {
                    ds.labeled.push((x, j % 2));
                } else {
                    ds.unlabeled.push(x);
                }
            }
            ds
        })
        .collect();
    MultiDomainCorpus::new(domains, 20, 2).unwrap()
}

pub fn random_sparse(rng: &mut RngState, dim: usize, nnz: usize) -> SparseVector {
    let mut idx = rng.permutation(dim);
    idx.truncate(nnz);
    idx.sort_unstable();
    SparseVector::new(dim, idx.into_iter().map(|i| (i, 0.5 + rng.uniform())).collect()).unwrap()
}

pub fn toy_arch(keep_prob: f64) -> Architecture {
    Architecture {
        input_dim: 20,
        k: 2,
        domains: 2,
        shared_hidden: vec![10],
        d_s: 6,
        specific_hidden: vec![8],
        d_p: 4,
        classifier_hidden: vec![10],
        keep_prob,
    }
}

/// Small benchmark-shaped generator settings for fast tests.
pub fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        vocab_dim: 60,
        labeled_per_domain: 60,
        unlabeled_per_domain: 30,
        test_per_domain: 60,
        doc_len_min: 8,
        doc_len_max: 16,
        min_margin: 2.0,
        seed,
        ..SynthConfig::default()
    }
}

/// Random finite class with scores uniform in `[-1, 1]`.
pub fn random_class(rng: &mut RngState, n: usize, k: usize, size: usize, labeled: bool) -> FiniteHypothesisClass {
    let tables = (0..size)
        .map(|_| {
            let scores: Vec<f64> = (0..n * k).map(|_| 2.0 * rng.uniform() - 1.0).collect();
            let labels = labeled.then(|| (0..n).map(|_| rng.below(k)).collect());
            ScoreTable::new(n, k, scores, labels).unwrap()
        })
        .collect();
    FiniteHypothesisClass::new(tables).unwrap()
}
