//! Command implementations. Each returns the process exit code or an
//! error that `main` reports as JSON.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;

use mdat_core::bound::{evaluate_mdtc_bound, BoundConfig, BoundSource, SearchConfig};
use mdat_core::dataio::{
    load_manifest, synth_generate, write_corpus, DomainDataset, LabeledSample, MinibatchSampler, MultiDomainCorpus,
    SynthConfig,
};
use mdat_core::margin::{
    discrepancy_divergence_oracle, hdeltah_divergence_oracle, margin_discrepancy_oracle, squared_label_loss,
    zero_one_discrepancy, zero_one_loss,
};
use mdat_core::model::{Architecture, GradCheckConfig, MdatModel};
use mdat_core::numkernel::{format_g, RngState, SparseVector};
use mdat_core::train::{self, crossval_with_workers, evaluate, grad_check_losses};
use mdat_core::{Error, Result};
use serde_json::json;

use crate::instance::load_instance;
use crate::output::{metrics_csv, num6, table, to_json, FILE_DIGITS};
use crate::{BoundArgs, CrossvalArgs, GradcheckArgs, OracleArgs, SynthArgs, TrainArgs};

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn synth(a: &SynthArgs) -> Result<ExitCode> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        n_domains: a.domains.unwrap_or(d.n_domains),
        vocab_dim: a.vocab.unwrap_or(d.vocab_dim),
        labeled_per_domain: a.labeled.unwrap_or(d.labeled_per_domain),
        unlabeled_per_domain: a.unlabeled.unwrap_or(d.unlabeled_per_domain),
        test_per_domain: a.test.unwrap_or(d.test_per_domain),
        flip_fraction: a.flip_fraction.unwrap_or(d.flip_fraction),
        noise: a.noise.unwrap_or(d.noise),
        doc_len_min: a.doc_len_min.unwrap_or(d.doc_len_min),
        doc_len_max: a.doc_len_max.unwrap_or(d.doc_len_max),
        min_margin: a.min_margin.unwrap_or(d.min_margin),
        topic_fraction: a.topic_fraction.unwrap_or(d.topic_fraction),
        topic_boost: a.topic_boost.unwrap_or(d.topic_boost),
        seed: a.seed,
        ..d
    };
    let synth = synth_generate(&cfg)?;
    let g = |x: f64| format_g(x, FILE_DIGITS);
    let meta: BTreeMap<String, String> = [
        ("bayes_accuracy", g(synth.bayes_accuracy)),
        ("generator.seed", cfg.seed.to_string()),
        ("generator.flip_fraction", g(cfg.flip_fraction)),
        ("generator.noise", g(cfg.noise)),
        ("generator.doc_len", format!("{}-{}", cfg.doc_len_min, cfg.doc_len_max)),
        ("generator.min_margin", g(cfg.min_margin)),
        ("generator.topic_fraction", g(cfg.topic_fraction)),
        ("generator.topic_boost", g(cfg.topic_boost)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let manifest = write_corpus(&a.out_dir, &synth.corpus, Some(&synth.test), meta)?;
    let domains: Vec<_> = synth
        .corpus
        .domains()
        .iter()
        .zip(&synth.test)
        .map(|(d, t)| json!({"name": d.name, "labeled": d.l(), "unlabeled": d.u(), "test": t.len()}))
        .collect();
    print!(
        "{}",
        to_json(&json!({
            "manifest": manifest.display().to_string(),
            "vocab_dim": cfg.vocab_dim,
            "bayes_accuracy": synth.bayes_accuracy,
            "domains": domains,
        }))
    );
    Ok(ExitCode::SUCCESS)
}

fn resolve_domain(corpus: &MultiDomainCorpus, name: &str) -> Result<usize> {
    if let Some(i) = corpus.domain_index(name) {
        return Ok(i);
    }
    match name.parse::<usize>() {
        Ok(i) if i < corpus.m() => Ok(i),
        _ => Err(Error::Config(format!("msuda: no domain named {name:?}"))),
    }
}

fn per_domain_json(names: &[String], values: &[f64]) -> serde_json::Value {
    names.iter().zip(values).map(|(n, v)| (n.clone(), json!(v))).collect::<serde_json::Map<_, _>>().into()
}

pub fn train(a: &TrainArgs) -> Result<ExitCode> {
    let rc = a.run.resolve()?;
    let out_dir = rc.require_out_dir()?.to_path_buf();
    let loaded = load_manifest(rc.require_manifest()?)?;
    let corpus = &loaded.corpus;
    let mut cfg = rc.train.clone();
    cfg.msuda_target = rc.msuda.as_deref().map(|n| resolve_domain(corpus, n)).transpose()?;
    let names: Vec<String> = corpus.domains().iter().map(|d| d.name.clone()).collect();

    let outcome = train::train(corpus, loaded.test.as_deref(), &cfg)?;
    create_dir(&out_dir)?;
    write_file(&out_dir.join("metrics.csv"), &metrics_csv(&outcome.reports, &names))?;
    outcome.model.save(&out_dir.join("model.ckpt"))?;

    let test = match &loaded.test {
        Some(t) => Some(evaluate(&outcome.model, t, cfg.msuda_target)?),
        None => None,
    };
    let last = outcome.reports.last().expect("epoch 0 is always reported");
    let first = &outcome.reports[0];
    let diagnostic = match (&first.discrepancy, &last.discrepancy) {
        (Some(i), Some(f)) => json!({
            "initial": per_domain_json(&names, i),
            "final": per_domain_json(&names, f),
        }),
        _ => serde_json::Value::Null,
    };
    let summary = json!({
        "variant": cfg.variant.as_str(),
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "rho": cfg.rho(),
        "domains": names,
        "msuda_target": cfg.msuda_target.map(|t| names[t].clone()),
        "selected_epoch": outcome.selected_epoch,
        "test": test.as_ref().map(|e| json!({
            "per_domain": per_domain_json(&names, &e.per_domain),
            "average": e.average,
        })),
        "final_epoch_average": last.average_accuracy,
        "diagnostic": diagnostic,
        "checkpoint": "model.ckpt",
        "parameter_hash": format!("{:016x}", outcome.model.param_hash(0..outcome.model.params.len())),
        "config": cfg,
    });
    write_file(&out_dir.join("summary.json"), &to_json(&summary))?;

    if let Some(e) = &test {
        let mut rows: Vec<Vec<String>> = names.iter().zip(&e.per_domain).map(|(n, v)| vec![n.clone(), num6(*v)]).collect();
        rows.push(vec!["average".into(), num6(e.average)]);
        print!("{}", table(&["domain", "test accuracy"], &rows));
    }
    println!("selected epoch {} of {}; outputs in {}", outcome.selected_epoch, cfg.epochs, out_dir.display());
    Ok(ExitCode::SUCCESS)
}

pub fn crossval(a: &CrossvalArgs) -> Result<ExitCode> {
    let rc = a.run.resolve()?;
    let loaded = load_manifest(rc.require_manifest()?)?;
    let mut cfg = rc.train.clone();
    cfg.msuda_target = rc.msuda.as_deref().map(|n| resolve_domain(&loaded.corpus, n)).transpose()?;
    let report = crossval_with_workers(&loaded.corpus, rc.folds, &cfg, rc.workers)?;
    let body = json!({
        "variant": cfg.variant.as_str(),
        "seed": cfg.seed,
        "folds": rc.folds,
        "report": report,
        "config": cfg,
    });
    if let Some(dir) = &rc.out_dir {
        create_dir(dir)?;
        write_file(&dir.join("crossval.json"), &to_json(&body))?;
    }
    let mut rows: Vec<Vec<String>> = report
        .domains
        .iter()
        .enumerate()
        .map(|(i, n)| vec![n.clone(), num6(report.mean[i]), num6(report.std[i])])
        .collect();
    rows.push(vec!["average".into(), num6(report.mean_average), num6(report.std_average)]);
    print!("{}", table(&["domain", "mean accuracy", "std"], &rows));
    Ok(ExitCode::SUCCESS)
}

/// Two-domain toy corpus: vocabulary 20, 8 labeled and 4 unlabeled
/// samples per domain.
fn toy_corpus(seed: u64) -> Result<MultiDomainCorpus> {
    let mut rng = RngState::new(seed).child_named("toy-corpus");
    let sparse = |rng: &mut RngState| -> Result<SparseVector> {
        let mut idx = rng.permutation(20);
        idx.truncate(5);
        idx.sort_unstable();
        SparseVector::new(20, idx.into_iter().map(|i| (i, 0.5 + rng.uniform())).collect())
    };
    let mut domains = Vec::new();
    for d in 0..2 {
        let mut ds = DomainDataset::new(format!("toy{d}"));
        for j in 0..8 {
            let x: LabeledSample = (sparse(&mut rng)?, j % 2);
            ds.labeled.push(x);
        }
        for _ in 0..4 {
            ds.unlabeled.push(sparse(&mut rng)?);
        }
        domains.push(ds);
    }
    MultiDomainCorpus::new(domains, 20, 2)
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<ExitCode> {
    let rc = a.run.resolve()?;
    let cfg = &rc.train;
    let corpus = toy_corpus(cfg.seed)?;
    let arch = Architecture {
        input_dim: 20,
        k: 2,
        domains: 2,
        shared_hidden: vec![10],
        d_s: 6,
        specific_hidden: vec![8],
        d_p: 4,
        classifier_hidden: vec![10],
        keep_prob: cfg.arch.keep_prob,
    };
    let mut model = MdatModel::init(arch, cfg.seed)?;
    model.corrupt_backward = a.corrupt_backward;
    let mut sampler = MinibatchSampler::new(&corpus, cfg.batch_size, &RngState::new(cfg.seed))?;
    let batch = sampler.next_batch();
    let check = GradCheckConfig {
        coords: a.coords,
        seed: cfg.seed,
        ..GradCheckConfig::default()
    };
    let reports = grad_check_losses(&model, &batch, cfg.beta, &check)?;
    let passed = reports.iter().all(|(_, r)| r.passed());
    let losses: Vec<_> = reports
        .iter()
        .map(|(loss, r)| {
            json!({
                "loss": loss.name(),
                "passed": r.passed(),
                "max_rel_error": r.max_rel_error(),
                "excluded_kinks": r.excluded_kinks(),
                "components": r.components,
            })
        })
        .collect();
    print!(
        "{}",
        to_json(&json!({
            "passed": passed,
            "tolerance": check.tolerance,
            "step": check.step,
            "coords_per_component": check.coords,
            "excluded_kinks": reports.iter().map(|(_, r)| r.excluded_kinks()).sum::<usize>(),
            "losses": losses,
        }))
    );
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

pub fn oracle(a: &OracleArgs) -> Result<ExitCode> {
    let inst = load_instance(&a.instance)?;
    let class = &inst.class;
    let scorer = class.get(inst.scorer);
    let hdh = hdeltah_divergence_oracle(class, &inst.s1, &inst.s2)?;
    let divergence = match a.loss.as_str() {
        "zero-one" => discrepancy_divergence_oracle(class, &inst.s1, &inst.s2, &zero_one_loss)?,
        _ => discrepancy_divergence_oracle(class, &inst.s1, &inst.s2, &squared_label_loss(class.k()))?,
    };
    let zero_one = zero_one_discrepancy(&scorer.labeling(), class, &inst.s1, &inst.s2)?;
    let margin = a
        .rho
        .iter()
        .map(|&rho| {
            let r = margin_discrepancy_oracle(scorer, class, &inst.s1, &inst.s2, rho)?;
            Ok(json!({"rho": rho, "value": r.value, "argmax": r.argmax}))
        })
        .collect::<Result<Vec<_>>>()?;
    print!(
        "{}",
        to_json(&json!({
            "n": class.n(),
            "k": class.k(),
            "hypotheses": class.len(),
            "scorer": inst.scorer,
            "s1": inst.s1,
            "s2": inst.s2,
            "hdeltah_divergence": hdh,
            "discrepancy_divergence": {"loss": a.loss, "value": divergence},
            "zero_one_discrepancy": zero_one,
            "margin_discrepancy": margin,
        }))
    );
    Ok(ExitCode::SUCCESS)
}

pub fn bound(a: &BoundArgs) -> Result<ExitCode> {
    let rc = a.run.resolve()?;
    let loaded = load_manifest(rc.require_manifest()?)?;
    let model = MdatModel::load(&a.checkpoint)?;
    let corpus = &loaded.corpus;
    let arch = model.arch();
    if arch.input_dim != corpus.vocab_dim() || arch.k != corpus.k() || arch.domains != corpus.m() {
        return Err(Error::Shape(format!(
            "checkpoint expects vocab {}, k {}, M {}; corpus has {}, {}, {}",
            arch.input_dim,
            arch.k,
            arch.domains,
            corpus.vocab_dim(),
            corpus.k(),
            corpus.m()
        )));
    }
    let cfg = BoundConfig {
        rho: a.rho.unwrap_or_else(|| rc.train.rho()),
        delta: a.delta,
        draws: a.draws,
        max_samples: a.max_samples,
        search: SearchConfig {
            scale: a.scale,
            restarts: a.restarts,
            local_steps: a.local_steps,
        },
    };
    let report = evaluate_mdtc_bound(BoundSource::Model { model: &model, corpus }, &cfg, &RngState::new(rc.train.seed))?;
    if a.format == "kv" {
        print!("{}", report.to_kv());
    } else {
        print!("{}", to_json(&report));
    }
    Ok(ExitCode::SUCCESS)
}
