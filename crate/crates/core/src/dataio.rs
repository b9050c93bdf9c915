//! Multi-domain corpora: sparse sample files, corpus manifests, k-fold
//! splits, the per-domain minibatch sampler and a synthetic generator with
//! cross-domain polarity flips.
//!
//! Sample file format (UTF-8, one sample per line):
//!
//! ```text
//! # comment
//! 1 0:2 7:1
//! ? 3:1
//! ```
//!
//! The first token is the label (`?` for unlabeled), followed by
//! `index:count` pairs with 0-based, strictly increasing indices.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numkernel::{RngState, SparseVector};

pub type LabeledSample = (SparseVector, usize);

/// One domain: labeled pool `L_i` and unlabeled pool `U_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    pub labeled: Vec<LabeledSample>,
    pub unlabeled: Vec<SparseVector>,
}

impl DomainDataset {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            labeled: Vec::new(),
            unlabeled: Vec::new(),
        }
    }

    pub fn l(&self) -> usize {
        self.labeled.len()
    }

    pub fn u(&self) -> usize {
        self.unlabeled.len()
    }

    /// `n_i = l_i + u_i`.
    pub fn n(&self) -> usize {
        self.l() + self.u()
    }

    /// Sample `j` of the pool `L_i ∪ U_i` (labeled samples first).
    pub fn pooled(&self, j: usize) -> &SparseVector {
        if j < self.l() {
            &self.labeled[j].0
        } else {
            &self.unlabeled[j - self.l()]
        }
    }

    pub fn pooled_iter(&self) -> impl Iterator<Item = &SparseVector> {
        self.labeled.iter().map(|(x, _)| x).chain(self.unlabeled.iter())
    }
}

/// `M` domains sharing one vocabulary and label set.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiDomainCorpus {
    domains: Vec<DomainDataset>,
    vocab_dim: usize,
    k: usize,
}

impl MultiDomainCorpus {
    pub fn new(domains: Vec<DomainDataset>, vocab_dim: usize, k: usize) -> Result<Self> {
        if domains.is_empty() {
            return Err(Error::Config("corpus needs at least one domain".into()));
        }
        if k < 2 {
            return Err(Error::Config(format!("k must be >= 2, got {k}")));
        }
        for d in &domains {
            for x in d.pooled_iter() {
                if x.dim() != vocab_dim {
                    return Err(Error::Shape(format!(
                        "domain {}: sample dim {} != vocab_dim {}",
                        d.name,
                        x.dim(),
                        vocab_dim
                    )));
                }
            }
            if let Some((_, y)) = d.labeled.iter().find(|(_, y)| *y >= k) {
                return Err(Error::Range(format!(
                    "domain {}: label {y} >= k = {k}",
                    d.name
                )));
            }
        }
        Ok(Self {
            domains,
            vocab_dim,
            k,
        })
    }

    pub fn domains(&self) -> &[DomainDataset] {
        &self.domains
    }

    pub fn domain(&self, i: usize) -> &DomainDataset {
        &self.domains[i]
    }

    pub fn m(&self) -> usize {
        self.domains.len()
    }

    pub fn vocab_dim(&self) -> usize {
        self.vocab_dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.name == name)
    }

    /// Copy of the corpus with domain `target`'s labels stripped (its
    /// labeled samples move to the unlabeled pool).
    pub fn without_labels_for(&self, target: usize) -> Self {
        let mut out = self.clone();
        let d = &mut out.domains[target];
        let labeled = std::mem::take(&mut d.labeled);
        let mut pool: Vec<SparseVector> = labeled.into_iter().map(|(x, _)| x).collect();
        pool.append(&mut d.unlabeled);
        d.unlabeled = pool;
        out
    }
}

/// Parse sample lines. Labeled lines go to `labeled`, `?` lines to
/// `unlabeled`.
pub fn parse_sparse_str(
    text: &str,
    vocab_dim: usize,
    name: &str,
    source: &str,
) -> Result<DomainDataset> {
    let mut ds = DomainDataset::new(name);
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let perr = |message: String| Error::Parse {
            path: source.to_string(),
            line: lineno + 1,
            message,
        };
        let mut tokens = line.split_whitespace();
        let label_tok = tokens.next().unwrap_or_default();
        let label = if label_tok == "?" {
            None
        } else {
            Some(
                label_tok
                    .parse::<usize>()
                    .map_err(|_| perr(format!("bad label {label_tok:?}")))?,
            )
        };
        let mut entries = Vec::new();
        for tok in tokens {
            let (i, v) = tok
                .split_once(':')
                .ok_or_else(|| perr(format!("expected index:count, got {tok:?}")))?;
            let idx: usize = i
                .parse()
                .map_err(|_| perr(format!("bad index {i:?}")))?;
            let val: f64 = v
                .parse()
                .map_err(|_| perr(format!("bad count {v:?}")))?;
            if idx >= vocab_dim {
                return Err(Error::Range(format!(
                    "{source}:{}: index {idx} >= vocab_dim {vocab_dim}",
                    lineno + 1
                )));
            }
            entries.push((idx, val));
        }
        let x = SparseVector::new(vocab_dim, entries).map_err(|e| perr(e.to_string()))?;
        match label {
            Some(y) => ds.labeled.push((x, y)),
            None => ds.unlabeled.push(x),
        }
    }
    Ok(ds)
}

pub fn parse_sparse_file(path: &Path, vocab_dim: usize) -> Result<DomainDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_sparse_str(&text, vocab_dim, &name, &path.display().to_string())
}

/// Render one sample line. `f64` display is shortest round-trip, so parsing
/// the line back is lossless.
pub fn format_sample(label: Option<usize>, x: &SparseVector) -> String {
    let mut s = match label {
        Some(y) => y.to_string(),
        None => "?".to_string(),
    };
    for (i, v) in x.iter() {
        let _ = write!(s, " {i}:{v}");
    }
    s
}

pub fn format_labeled(samples: &[LabeledSample]) -> String {
    samples
        .iter()
        .map(|(x, y)| format_sample(Some(*y), x) + "\n")
        .collect()
}

pub fn format_unlabeled(samples: &[SparseVector]) -> String {
    samples
        .iter()
        .map(|x| format_sample(None, x) + "\n")
        .collect()
}

/// Files referenced by one manifest domain entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ManifestDomain {
    pub name: String,
    pub labeled: Option<PathBuf>,
    pub unlabeled: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

/// Corpus manifest: `key = value` lines.
///
/// ```text
/// vocab_dim = 200
/// k = 2
/// domain.books.labeled = books.labeled.txt
/// domain.books.unlabeled = books.unlabeled.txt
/// domain.books.test = books.test.txt
/// meta.bayes_accuracy = 0.95
/// ```
///
/// Relative paths resolve against the manifest's directory. Domains keep
/// their order of first appearance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub vocab_dim: usize,
    pub k: usize,
    pub domains: Vec<ManifestDomain>,
    pub meta: BTreeMap<String, String>,
}

impl Manifest {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut vocab_dim = None;
        let mut k = None;
        let mut domains: Vec<ManifestDomain> = Vec::new();
        let mut meta = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let perr = |message: String| Error::Parse {
                path: source.to_string(),
                line: lineno + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| perr("expected key = value".into()))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "vocab_dim" => {
                    vocab_dim = Some(value.parse().map_err(|_| perr(format!("bad vocab_dim {value:?}")))?)
                }
                "k" => k = Some(value.parse().map_err(|_| perr(format!("bad k {value:?}")))?),
                _ if key.starts_with("meta.") => {
                    meta.insert(key["meta.".len()..].to_string(), value.to_string());
                }
                _ if key.starts_with("domain.") => {
                    let rest = &key["domain.".len()..];
                    let (name, field) = rest
                        .rsplit_once('.')
                        .ok_or_else(|| perr(format!("bad domain key {key:?}")))?;
                    let idx = match domains.iter().position(|d| d.name == name) {
                        Some(i) => i,
                        None => {
                            domains.push(ManifestDomain {
                                name: name.to_string(),
                                ..Default::default()
                            });
                            domains.len() - 1
                        }
                    };
                    let path = Some(PathBuf::from(value));
                    match field {
                        "labeled" => domains[idx].labeled = path,
                        "unlabeled" => domains[idx].unlabeled = path,
                        "test" => domains[idx].test = path,
                        _ => return Err(perr(format!("unknown domain field {field:?}"))),
                    }
                }
                _ => return Err(perr(format!("unknown key {key:?}"))),
            }
        }
        let vocab_dim = vocab_dim.ok_or_else(|| Error::Config(format!("{source}: missing vocab_dim")))?;
        let k = k.ok_or_else(|| Error::Config(format!("{source}: missing k")))?;
        Ok(Self {
            vocab_dim,
            k,
            domains,
            meta,
        })
    }

    pub fn render(&self) -> String {
        let mut s = String::from("# mdat corpus manifest\n");
        let _ = writeln!(s, "vocab_dim = {}", self.vocab_dim);
        let _ = writeln!(s, "k = {}", self.k);
        for d in &self.domains {
            for (field, p) in [("labeled", &d.labeled), ("unlabeled", &d.unlabeled), ("test", &d.test)] {
                if let Some(p) = p {
                    let _ = writeln!(s, "domain.{}.{} = {}", d.name, field, p.display());
                }
            }
        }
        for (k, v) in &self.meta {
            let _ = writeln!(s, "meta.{k} = {v}");
        }
        s
    }
}

/// A corpus loaded from a manifest, with optional per-domain test sets.
#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub corpus: MultiDomainCorpus,
    /// Present only if every domain names a test file.
    pub test: Option<Vec<Vec<LabeledSample>>>,
    pub manifest: Manifest,
}

pub fn load_manifest(path: &Path) -> Result<LoadedCorpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = Manifest::parse(&text, &path.display().to_string())?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let mut domains = Vec::new();
    let mut tests = Vec::new();
    for md in &manifest.domains {
        let mut ds = DomainDataset::new(md.name.clone());
        if let Some(p) = &md.labeled {
            let f = parse_sparse_file(&resolve(p), manifest.vocab_dim)?;
            ds.labeled = f.labeled;
            ds.unlabeled = f.unlabeled;
        }
        if let Some(p) = &md.unlabeled {
            let f = parse_sparse_file(&resolve(p), manifest.vocab_dim)?;
            ds.unlabeled.extend(f.labeled.into_iter().map(|(x, _)| x));
            ds.unlabeled.extend(f.unlabeled);
        }
        if let Some(p) = &md.test {
            let f = parse_sparse_file(&resolve(p), manifest.vocab_dim)?;
            if !f.unlabeled.is_empty() {
                return Err(Error::Config(format!(
                    "test file for domain {} contains unlabeled samples",
                    md.name
                )));
            }
            tests.push(f.labeled);
        }
        domains.push(ds);
    }
    let test = (tests.len() == domains.len()).then_some(tests);
    let corpus = MultiDomainCorpus::new(domains, manifest.vocab_dim, manifest.k)?;
    Ok(LoadedCorpus {
        corpus,
        test,
        manifest,
    })
}

/// Write `corpus` (and optional test sets) as sample files plus
/// `manifest.txt` under `dir`; returns the manifest path. File names are
/// `<domain>.labeled.txt`, `<domain>.unlabeled.txt`, `<domain>.test.txt`.
pub fn write_corpus(
    dir: &Path,
    corpus: &MultiDomainCorpus,
    test: Option<&[Vec<LabeledSample>]>,
    meta: BTreeMap<String, String>,
) -> Result<PathBuf> {
    if let Some(t) = test {
        if t.len() != corpus.m() {
            return Err(Error::Shape(format!("{} test sets for {} domains", t.len(), corpus.m())));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: String, text: String| -> Result<PathBuf> {
        let path = dir.join(&name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(PathBuf::from(name))
    };
    let mut manifest = Manifest {
        vocab_dim: corpus.vocab_dim(),
        k: corpus.k(),
        domains: Vec::new(),
        meta,
    };
    for (i, d) in corpus.domains().iter().enumerate() {
        manifest.domains.push(ManifestDomain {
            name: d.name.clone(),
            labeled: Some(write(format!("{}.labeled.txt", d.name), format_labeled(&d.labeled))?),
            unlabeled: Some(write(format!("{}.unlabeled.txt", d.name), format_unlabeled(&d.unlabeled))?),
            test: match test {
                Some(t) => Some(write(format!("{}.test.txt", d.name), format_labeled(&t[i]))?),
                None => None,
            },
        });
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest.render()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Partition the labeled pool into `folds` near-equal test folds. The
/// unlabeled pool always stays on the train side.
pub fn kfold_split(
    dataset: &DomainDataset,
    folds: usize,
    seed: u64,
) -> Result<Vec<(DomainDataset, Vec<LabeledSample>)>> {
    if folds < 2 {
        return Err(Error::Config(format!("folds must be >= 2, got {folds}")));
    }
    if dataset.l() < folds {
        return Err(Error::Config(format!(
            "domain {} has {} labeled samples, fewer than {folds} folds",
            dataset.name,
            dataset.l()
        )));
    }
    let l = dataset.l();
    let perm = RngState::new(seed).child_named(&dataset.name).permutation(l);
    // fold f covers perm[start_f..start_{f+1}], sizes differ by at most one
    let bounds: Vec<usize> = (0..=folds).map(|f| f * l / folds).collect();
    Ok((0..folds)
        .map(|f| {
            let in_test = |pos: usize| pos >= bounds[f] && pos < bounds[f + 1];
            let mut train = DomainDataset::new(dataset.name.clone());
            let mut test = Vec::with_capacity(bounds[f + 1] - bounds[f]);
            for (pos, &idx) in perm.iter().enumerate() {
                let s = dataset.labeled[idx].clone();
                if in_test(pos) {
                    test.push(s);
                } else {
                    train.labeled.push(s);
                }
            }
            train.unlabeled = dataset.unlabeled.clone();
            (train, test)
        })
        .collect())
}

/// Fold every domain of a corpus with the same fold count and seed.
pub fn kfold_corpus(
    corpus: &MultiDomainCorpus,
    folds: usize,
    seed: u64,
) -> Result<Vec<(MultiDomainCorpus, Vec<Vec<LabeledSample>>)>> {
    let per_domain: Vec<_> = corpus
        .domains()
        .iter()
        .map(|d| kfold_split(d, folds, seed))
        .collect::<Result<_>>()?;
    (0..folds)
        .map(|f| {
            let mut train = Vec::new();
            let mut test = Vec::new();
            for splits in &per_domain {
                train.push(splits[f].0.clone());
                test.push(splits[f].1.clone());
            }
            Ok((MultiDomainCorpus::new(train, corpus.vocab_dim(), corpus.k())?, test))
        })
        .collect()
}

/// One iteration's worth of per-domain batches.
#[derive(Debug, Clone)]
pub struct MiniBatchPair<'a> {
    /// `B^ℓ_i`: labeled batch per domain (empty for label-free domains).
    pub labeled: Vec<Vec<(&'a SparseVector, usize)>>,
    /// `B^u_i`: drawn from `L_i ∪ U_i` with labels stripped.
    pub unlabeled: Vec<Vec<&'a SparseVector>>,
}

impl MiniBatchPair<'_> {
    pub fn m(&self) -> usize {
        self.labeled.len()
    }
}

/// Endless stream of pool indices built from successive permutations.
#[derive(Debug, Clone)]
struct IndexStream {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: RngState,
}

impl IndexStream {
    fn new(n: usize, rng: RngState) -> Self {
        let mut s = Self {
            n,
            order: Vec::new(),
            pos: 0,
            rng,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = self.rng.permutation(self.n);
        self.pos = 0;
    }

    fn take(&mut self, count: usize) -> Vec<usize> {
        (0..count)
            .map(|_| {
                if self.pos == self.n {
                    self.reshuffle();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Per-domain labeled/unlabeled minibatch sampler.
///
/// An epoch is `max(1, ⌊max_i l_i / batch⌋)` iterations. Labeled streams
/// restart from a fresh permutation at each epoch, so the largest labeled
/// pool never repeats a sample within an epoch; smaller pools cycle with a
/// reshuffle whenever exhausted.
#[derive(Debug, Clone)]
pub struct MinibatchSampler<'a> {
    corpus: &'a MultiDomainCorpus,
    batch_size: usize,
    labeled: Vec<Option<IndexStream>>,
    unlabeled: Vec<IndexStream>,
    iters_per_epoch: usize,
    iter: usize,
}

impl<'a> MinibatchSampler<'a> {
    pub fn new(corpus: &'a MultiDomainCorpus, batch_size: usize, rng: &RngState) -> Result<Self> {
        Self::build(corpus, batch_size, rng, false)
    }

    /// Variant that tolerates domains without labeled samples (their
    /// labeled batches are empty), as needed when a target domain's labels
    /// are held out.
    pub fn allowing_unlabeled_domains(
        corpus: &'a MultiDomainCorpus,
        batch_size: usize,
        rng: &RngState,
    ) -> Result<Self> {
        Self::build(corpus, batch_size, rng, true)
    }

    fn build(
        corpus: &'a MultiDomainCorpus,
        batch_size: usize,
        rng: &RngState,
        allow_unlabeled: bool,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        for (i, d) in corpus.domains().iter().enumerate() {
            if d.l() == 0 && !allow_unlabeled {
                return Err(Error::Config(format!("domain {} has no labeled samples", d.name)));
            }
            if d.n() == 0 {
                return Err(Error::Config(format!("domain {} has no samples", d.name)));
            }
            let drng = rng.child(i as u64);
            labeled.push((d.l() > 0).then(|| IndexStream::new(d.l(), drng.child_named("labeled"))));
            unlabeled.push(IndexStream::new(d.n(), drng.child_named("unlabeled")));
        }
        if labeled.iter().all(Option::is_none) {
            return Err(Error::Config("no domain has labeled samples".into()));
        }
        let max_l = corpus.domains().iter().map(DomainDataset::l).max().unwrap_or(0);
        Ok(Self {
            corpus,
            batch_size,
            labeled,
            unlabeled,
            iters_per_epoch: (max_l / batch_size).max(1),
            iter: 0,
        })
    }

    pub fn iters_per_epoch(&self) -> usize {
        self.iters_per_epoch
    }

    pub fn next_batch(&mut self) -> MiniBatchPair<'a> {
        if self.iter > 0 && self.iter.is_multiple_of(self.iters_per_epoch) {
            for s in self.labeled.iter_mut().flatten() {
                s.reshuffle();
            }
        }
        self.iter += 1;
        let b = self.batch_size;
        let corpus = self.corpus;
        let labeled = self
            .labeled
            .iter_mut()
            .zip(corpus.domains())
            .map(|(s, d)| match s {
                Some(s) => s
                    .take(b)
                    .into_iter()
                    .map(|j| (&d.labeled[j].0, d.labeled[j].1))
                    .collect(),
                None => Vec::new(),
            })
            .collect();
        let unlabeled = self
            .unlabeled
            .iter_mut()
            .zip(corpus.domains())
            .map(|(s, d)| s.take(b).into_iter().map(|j| d.pooled(j)).collect())
            .collect();
        MiniBatchPair {
            labeled,
            unlabeled,
        }
    }

    /// All batches of one epoch.
    pub fn epoch(&mut self) -> Vec<MiniBatchPair<'a>> {
        (0..self.iters_per_epoch).map(|_| self.next_batch()).collect()
    }
}

/// Synthetic multi-domain bag-of-features generator settings.
///
/// Each document is a bag of `doc_len` tokens. With probability
/// `topic_boost` a token comes from its domain's topic vocabulary, otherwise
/// uniformly from the whole vocabulary. Every word has a polarity `±1`.
/// Domain `i` scores a document as
/// `shared_strength·Σ_{j∉F} w_j c_j + specific_strength·Σ_{j∈F} o_i w_j c_j`
/// where `F` is the flip set and `o_i = +1` for even `i`, `-1` for odd `i`.
/// Documents with `|score| < min_margin` are rejected; the clean label is
/// `score > 0`, then flipped with probability `noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_domains: usize,
    pub vocab_dim: usize,
    pub labeled_per_domain: usize,
    pub unlabeled_per_domain: usize,
    pub test_per_domain: usize,
    pub shared_strength: f64,
    pub specific_strength: f64,
    pub flip_fraction: f64,
    pub noise: f64,
    pub doc_len_min: usize,
    pub doc_len_max: usize,
    pub min_margin: f64,
    pub topic_fraction: f64,
    pub topic_boost: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_domains: 3,
            vocab_dim: 200,
            labeled_per_domain: 500,
            unlabeled_per_domain: 500,
            test_per_domain: 500,
            shared_strength: 1.0,
            specific_strength: 1.0,
            flip_fraction: 0.3,
            noise: 0.05,
            doc_len_min: 20,
            doc_len_max: 40,
            min_margin: 5.0,
            topic_fraction: 0.1,
            topic_boost: 0.3,
            seed: 0,
        }
    }
}

const MAX_REJECTIONS: usize = 10_000;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_domains == 0 {
            return bad("n_domains must be >= 1".into());
        }
        if self.vocab_dim == 0 {
            return bad("vocab_dim must be >= 1".into());
        }
        if !(self.shared_strength >= 0.0 && self.specific_strength >= 0.0) {
            return bad("signal strengths must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.flip_fraction) {
            return bad(format!("flip_fraction must be in [0, 1], got {}", self.flip_fraction));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return bad(format!("noise must be in [0, 0.5), got {}", self.noise));
        }
        if self.doc_len_min == 0 || self.doc_len_min > self.doc_len_max {
            return bad("need 1 <= doc_len_min <= doc_len_max".into());
        }
        if self.min_margin.is_nan() || self.min_margin <= 0.0 {
            return bad("min_margin must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.topic_fraction) || !(0.0..=1.0).contains(&self.topic_boost) {
            return bad("topic_fraction and topic_boost must be in [0, 1]".into());
        }
        Ok(())
    }

    /// Accuracy of the per-domain Bayes rule: labels are a deterministic
    /// function of the document before noise, so it is `1 - noise`.
    pub fn bayes_accuracy(&self) -> f64 {
        1.0 - self.noise
    }
}

/// Generator output: the training corpus plus held-out labeled test sets
/// and the ground-truth rule.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub corpus: MultiDomainCorpus,
    pub test: Vec<Vec<LabeledSample>>,
    pub bayes_accuracy: f64,
    /// Per-domain word weights of the labeling rule.
    pub domain_weights: Vec<Vec<f64>>,
    pub flip_set: Vec<usize>,
    pub topic_sets: Vec<Vec<usize>>,
}

impl SynthCorpus {
    pub fn rule_score(&self, domain: usize, x: &SparseVector) -> f64 {
        let w = &self.domain_weights[domain];
        x.iter().map(|(j, c)| w[j] * c).sum()
    }

    /// Noise-free label under domain `domain`'s rule.
    pub fn rule_label(&self, domain: usize, x: &SparseVector) -> usize {
        usize::from(self.rule_score(domain, x) > 0.0)
    }
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let root = RngState::new(cfg.seed);
    let v = cfg.vocab_dim;

    let mut prng = root.child_named("polarity");
    let polarity: Vec<f64> = (0..v).map(|_| prng.sign()).collect();

    let n_flip = (cfg.flip_fraction * v as f64).round() as usize;
    let mut flip_set: Vec<usize> = root.child_named("flip").permutation(v)[..n_flip].to_vec();
    flip_set.sort_unstable();
    let mut in_flip = vec![false; v];
    flip_set.iter().for_each(|&j| in_flip[j] = true);

    let n_topic = ((cfg.topic_fraction * v as f64).round() as usize).max(1).min(v);
    let topic_sets: Vec<Vec<usize>> = (0..cfg.n_domains)
        .map(|i| {
            let mut t = root.child_named("topic").child(i as u64).permutation(v)[..n_topic].to_vec();
            t.sort_unstable();
            t
        })
        .collect();

    let domain_weights: Vec<Vec<f64>> = (0..cfg.n_domains)
        .map(|i| {
            let orient = if i % 2 == 0 { 1.0 } else { -1.0 };
            (0..v)
                .map(|j| {
                    if in_flip[j] {
                        cfg.specific_strength * orient * polarity[j]
                    } else {
                        cfg.shared_strength * polarity[j]
                    }
                })
                .collect()
        })
        .collect();

    let draw_doc = |rng: &mut RngState, i: usize| -> Result<(SparseVector, usize)> {
        for _ in 0..MAX_REJECTIONS {
            let len = cfg.doc_len_min + rng.below(cfg.doc_len_max - cfg.doc_len_min + 1);
            let mut counts = vec![0.0; v];
            for _ in 0..len {
                let j = if rng.uniform() < cfg.topic_boost {
                    topic_sets[i][rng.below(n_topic)]
                } else {
                    rng.below(v)
                };
                counts[j] += 1.0;
            }
            let score: f64 = counts.iter().zip(&domain_weights[i]).map(|(c, w)| c * w).sum();
            if score.abs() < cfg.min_margin {
                continue;
            }
            let clean = usize::from(score > 0.0);
            let label = if rng.uniform() < cfg.noise { 1 - clean } else { clean };
            let entries = counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0.0)
                .map(|(j, &c)| (j, c))
                .collect();
            return Ok((SparseVector::new(v, entries)?, label));
        }
        Err(Error::Config(format!(
            "generator rejected {MAX_REJECTIONS} documents in a row; min_margin {} is unreachable",
            cfg.min_margin
        )))
    };

    let mut domains = Vec::with_capacity(cfg.n_domains);
    let mut test = Vec::with_capacity(cfg.n_domains);
    for i in 0..cfg.n_domains {
        let drng = root.child_named("docs").child(i as u64);
        let mut ds = DomainDataset::new(format!("domain{i}"));
        let mut r = drng.child_named("labeled");
        for _ in 0..cfg.labeled_per_domain {
            ds.labeled.push(draw_doc(&mut r, i)?);
        }
        let mut r = drng.child_named("unlabeled");
        for _ in 0..cfg.unlabeled_per_domain {
            ds.unlabeled.push(draw_doc(&mut r, i)?.0);
        }
        let mut r = drng.child_named("test");
        test.push(
            (0..cfg.test_per_domain)
                .map(|_| draw_doc(&mut r, i))
                .collect::<Result<Vec<_>>>()?,
        );
        domains.push(ds);
    }
    Ok(SynthCorpus {
        corpus: MultiDomainCorpus::new(domains, v, 2)?,
        test,
        bayes_accuracy: cfg.bayes_accuracy(),
        domain_weights,
        flip_set,
        topic_sets,
    })
}
