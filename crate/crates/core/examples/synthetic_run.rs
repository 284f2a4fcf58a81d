//! Generates the default synthetic corpus, trains every stage, calibrates on
//! dev and reports test metrics with per-stage timings.
//!
//! `cargo run --release -p cie-core --example synthetic_run [config.toml]`
//!
//! With `CIE_MODEL_DIR` set, trained models are saved there and reused.

use std::time::Instant;

use cie_core::config::RunConfig;
use cie_core::eval::{attribute_errors, micro_metrics, DocTriples};
use cie_core::pipeline::{apply_thresholds, calibrate_thresholds};
use cie_core::synth::{generate, SynthSpec};
use cie_core::workflow::{Models, MENTION_FILE};
use cie_core::Execution;

fn main() -> cie_core::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg = match std::env::args().nth(1) {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::synthetic(),
    };
    let exec = Execution::default();
    let start = Instant::now();
    let corpus = generate(&SynthSpec::default())?;
    let kb = &corpus.kb;
    println!(
        "corpus: {} train docs, {} test docs",
        corpus.train.len(),
        corpus.test.len()
    );

    let cache = std::env::var_os("CIE_MODEL_DIR");
    let models = match &cache {
        Some(dir) if std::path::Path::new(dir).join(MENTION_FILE).exists() => Models::load(dir)?,
        _ => {
            let (models, report) = Models::train(&cfg, kb, &corpus.train, exec)?;
            println!("trained in {:.1}s", start.elapsed().as_secs_f64());
            for (name, t) in [
                ("mention", &report.mention),
                ("biencoder", &report.biencoder),
                ("crossencoder", &report.crossencoder),
                ("relation", &report.relation),
            ] {
                println!("  {name}: epoch losses {:?}", t.epochs);
            }
            if let Some(dir) = &cache {
                models.save(dir)?;
            }
            models
        }
    };

    let pipeline = models.pipeline(kb, cfg.pipeline);
    let grid = cfg.calibration.grid()?;
    let floor = grid.epsilon_m[0];
    let t0 = Instant::now();
    let dev = pipeline.trace_all(&corpus.dev, floor, exec)?;
    let test = pipeline.trace_all(&corpus.test, floor, exec)?;
    println!("traced in {:.1}s", t0.elapsed().as_secs_f64());
    let dev_gold: Vec<_> = corpus
        .dev
        .iter()
        .map(|d| d.triples.iter().cloned().collect())
        .collect();
    let cal = calibrate_thresholds(
        &dev,
        &dev_gold,
        &kb.relations,
        cfg.calibration.beta,
        &grid,
        cfg.calibration.objective,
        exec,
    )?;
    println!("calibrated {:?} dev F = {:.4}", cal.thresholds, cal.score);
    let scored: Vec<DocTriples> = test
        .iter()
        .zip(&corpus.test)
        .map(|(t, d)| DocTriples {
            predicted: apply_thresholds(t, &cal.thresholds, &kb.relations).triple_set(),
            gold: d.triples.iter().cloned().collect(),
        })
        .collect();
    println!("test {}", micro_metrics(&scored));
    let errors = attribute_errors(&test, &corpus.test, &cal.thresholds, &kb.relations)?;
    println!("errors {:?}", errors.counts);
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
