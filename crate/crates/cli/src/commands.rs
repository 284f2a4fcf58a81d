use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use cie_core::config::RunConfig;
use cie_core::eval::{
    attribute_errors, bootstrap_ci, bucket_f1, buckets_csv, macro_metrics, micro_metrics,
    run_ablation, AblationRow, BootstrapCI, BootstrapConfig, DocTriples, ErrorAttribution,
    MacroScope, MetricReport,
};
use cie_core::kg::{
    load_dataset, read_jsonl, relation_frequencies, write_jsonl, AnnotatedDocument, KnowledgeBase,
};
use cie_core::mention::MentionRecognizer;
use cie_core::pipeline::{
    calibrate_thresholds, AsDocument, Objective, Pipeline, Prediction, Thresholds,
};
use cie_core::ranker::CrossEncoder;
use cie_core::relation::{RelationExtractor, RelationMode};
use cie_core::retrieval::{BiEncoder, VectorIndex};
use cie_core::synth::{generate, SynthSpec, DEV_FILE, TEST_FILE, TRAIN_FILE};
use cie_core::train::{LossTrace, TrainConfig};
use cie_core::workflow::{
    build_vocabulary, checkpoint_path, measure_throughput, predicted_entities, relation_file,
    train_biencoder_stage, train_crossencoder_stage, train_mention_stage, train_relation_stage,
    Models, BIENCODER_FILE, CROSSENCODER_FILE, INDEX_FILE, MENTION_FILE, RELATION_FILE, VOCAB_FILE,
};
use cie_core::Execution;

use crate::{
    AblateArgs, BenchArgs, CalibrateArgs, Cli, Command, EvaluateArgs, ExtractArgs, ObjectiveArg,
    Stage, SynthArgs, TrainArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Train { stage } => train(cfg, stage, exec),
        Command::Calibrate(a) => calibrate(cfg, a, exec),
        Command::Extract(a) => extract(&cfg, a, exec),
        Command::Evaluate(a) => evaluate(&cfg, a, exec),
        Command::Ablate(a) => ablate(&cfg, a, exec),
        Command::Bench(a) => bench(&cfg, a, exec),
        Command::Synth(a) => synth(a),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None if cli.synthetic_preset => RunConfig::synthetic(),
        None => RunConfig::default(),
    };
    let paths = &mut cfg.paths;
    for (slot, flag) in [
        (&mut paths.kb_dir, &cli.kb_dir),
        (&mut paths.train, &cli.train),
        (&mut paths.dev, &cli.dev),
        (&mut paths.test, &cli.test),
        (&mut paths.model_dir, &cli.model_dir),
        (&mut paths.thresholds, &cli.thresholds),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(k) = cli.top_k {
        cfg.pipeline.top_k = k;
    }
    Ok(cfg)
}

fn override_train(t: &mut TrainConfig, a: &TrainArgs) {
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    if let Some(b) = a.batch_size {
        t.batch_size = b;
    }
    if let Some(lr) = a.lr {
        t.lr = lr;
    }
}

fn load_kb(cfg: &RunConfig) -> Result<KnowledgeBase> {
    Ok(KnowledgeBase::load_dir(cfg.paths.kb_dir()?)?)
}

fn load_split(path: &Path, kb: &KnowledgeBase) -> Result<Vec<AnnotatedDocument>> {
    Ok(load_dataset(path, Some(&kb.entities))?)
}

fn model_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.paths.model_dir()?.to_path_buf();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_loss(dir: &Path, name: &str, trace: &LossTrace) -> Result<()> {
    write_json(&dir.join(format!("{name}-loss.json")), trace)?;
    println!("{name}: epoch losses {:?}", trace.epochs);
    Ok(())
}

fn train(mut cfg: RunConfig, stage: Stage, exec: Execution) -> Result<()> {
    let kb = load_kb(&cfg)?;
    let docs = load_split(cfg.paths.train()?, &kb)?;
    let dir = model_dir(&cfg)?;
    let vocab = build_vocabulary(&kb, &docs);
    match stage {
        Stage::Mention {
            train,
            max_span_len,
        } => {
            override_train(&mut cfg.mention.train.train, &train);
            if let Some(m) = max_span_len {
                cfg.mention.max_span_len = m;
            }
            let (model, trace) = train_mention_stage(&cfg, &docs, exec)?;
            vocab.save(dir.join(VOCAB_FILE))?;
            model.save(dir.join(MENTION_FILE))?;
            write_loss(&dir, "mention", &trace)
        }
        Stage::Biencoder { train, gamma, beta } => {
            override_train(&mut cfg.biencoder.train, &train);
            if let Some(g) = gamma {
                cfg.biencoder.gamma = g;
            }
            if let Some(b) = beta {
                cfg.biencoder.beta = b;
            }
            let (model, index, trace) = train_biencoder_stage(&cfg, &vocab, &kb, &docs, exec)?;
            model.save(dir.join(BIENCODER_FILE))?;
            index.save(dir.join(INDEX_FILE))?;
            write_loss(&dir, "biencoder", &trace)
        }
        Stage::Crossencoder {
            train,
            rank_negatives,
        } => {
            override_train(&mut cfg.crossencoder.train, &train);
            if let Some(n) = rank_negatives {
                cfg.crossencoder.negatives = n;
            }
            let biencoder = BiEncoder::load(checkpoint_path(&dir, BIENCODER_FILE)?)?;
            let index = VectorIndex::load(checkpoint_path(&dir, INDEX_FILE)?)?;
            let (model, trace) =
                train_crossencoder_stage(&cfg, &vocab, &kb, &docs, &biencoder, &index, exec)?;
            model.save(dir.join(CROSSENCODER_FILE))?;
            write_loss(&dir, "crossencoder", &trace)
        }
        Stage::Relation { train, mode } => {
            override_train(&mut cfg.relation.train, &train);
            if let Some(m) = mode {
                cfg.relation.mode = m;
            }
            let ranker = CrossEncoder::load(checkpoint_path(&dir, CROSSENCODER_FILE)?)?;
            let (model, trace) = train_relation(
                &cfg,
                &kb,
                &docs,
                &ranker,
                cfg.relation.mode,
                cfg.seed,
                &dir,
                exec,
            )?;
            model.save(dir.join(relation_file(cfg.relation.mode, cfg.seed)))?;
            model.save(dir.join(RELATION_FILE))?;
            write_loss(
                &dir,
                &format!("relation-{}-seed{}", cfg.relation.mode, cfg.seed),
                &trace,
            )
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn train_relation(
    cfg: &RunConfig,
    kb: &KnowledgeBase,
    docs: &[AnnotatedDocument],
    ranker: &CrossEncoder,
    mode: RelationMode,
    seed: u64,
    dir: &Path,
    exec: Execution,
) -> Result<(RelationExtractor, LossTrace)> {
    let vocab = build_vocabulary(kb, docs);
    let predicted = if cfg.relation.train_on_predicted {
        let biencoder = BiEncoder::load(checkpoint_path(dir, BIENCODER_FILE)?)?;
        let index = VectorIndex::load(checkpoint_path(dir, INDEX_FILE)?)?;
        Some(predicted_entities(
            cfg, kb, docs, &biencoder, &index, ranker, exec,
        )?)
    } else {
        None
    };
    Ok(train_relation_stage(
        cfg,
        &vocab,
        kb,
        docs,
        ranker,
        predicted.as_deref(),
        mode,
        seed,
        exec,
    )?)
}

fn calibrate(mut cfg: RunConfig, a: CalibrateArgs, exec: Execution) -> Result<()> {
    if let Some(b) = a.beta {
        cfg.calibration.beta = b;
    }
    if let Some(o) = a.objective {
        cfg.calibration.objective = match o {
            ObjectiveArg::Micro => Objective::Micro,
            ObjectiveArg::Macro => Objective::Macro,
        };
    }
    let kb = load_kb(&cfg)?;
    let dev = load_split(cfg.paths.dev()?, &kb)?;
    let models = Models::load(cfg.paths.model_dir()?)?;
    let pipeline = models.pipeline(&kb, cfg.pipeline);
    let grid = cfg.calibration.grid()?;
    let floor = grid.epsilon_m.iter().copied().fold(1.0, f64::min);
    let traces = pipeline.trace_all(&dev, floor, exec)?;
    let gold: Vec<_> = dev
        .iter()
        .map(|d| d.triples.iter().cloned().collect())
        .collect();
    let cal = calibrate_thresholds(
        &traces,
        &gold,
        &kb.relations,
        cfg.calibration.beta,
        &grid,
        cfg.calibration.objective,
        exec,
    )?;
    let out = match a.output {
        Some(p) => p,
        None => cfg.paths.thresholds()?,
    };
    cal.thresholds.save(&out)?;
    let t = cal.thresholds;
    println!(
        "epsilon_m {:.4} epsilon_c {:.4} epsilon_r {:.4} beta {}: dev F {:.4} (P {:.4} R {:.4})",
        t.epsilon_m, t.epsilon_c, t.epsilon_r, t.beta, cal.score, cal.precision, cal.recall
    );
    Ok(())
}

/// An input line for extraction: `tokens`, or whitespace-split `text`.
#[derive(Debug, Deserialize)]
struct InputLine {
    #[serde(default)]
    doc_id: String,
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    text: Option<String>,
}

struct InputDoc {
    doc_id: String,
    tokens: Vec<String>,
}

impl AsDocument for InputDoc {
    fn doc_id(&self) -> &str {
        &self.doc_id
    }

    fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

fn read_inputs(path: &Path) -> Result<Vec<InputDoc>> {
    let lines: Vec<InputLine> = read_jsonl(path)?;
    Ok(lines
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let tokens = match (l.tokens.is_empty(), l.text) {
                (true, Some(text)) => text.split_whitespace().map(str::to_string).collect(),
                _ => l.tokens,
            };
            let doc_id = if l.doc_id.is_empty() {
                i.to_string()
            } else {
                l.doc_id
            };
            InputDoc { doc_id, tokens }
        })
        .collect())
}

fn load_thresholds(cfg: &RunConfig) -> Result<Thresholds> {
    let path = cfg.paths.thresholds()?;
    if !path.exists() {
        bail!(cie_core::Error::Checkpoint(format!(
            "missing thresholds file {}",
            path.display()
        )));
    }
    Ok(Thresholds::load(path)?)
}

fn extract(cfg: &RunConfig, a: ExtractArgs, exec: Execution) -> Result<()> {
    let docs = read_inputs(&a.input)?;
    if docs.is_empty() {
        write_jsonl(&a.output, &Vec::<Prediction>::new())?;
        println!("0 documents");
        return Ok(());
    }
    let mut t = load_thresholds(cfg)?;
    for (slot, flag) in [
        (&mut t.epsilon_m, a.epsilon_m),
        (&mut t.epsilon_c, a.epsilon_c),
        (&mut t.epsilon_r, a.epsilon_r),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    t.validate()?;
    let kb = load_kb(cfg)?;
    let models = Models::load(cfg.paths.model_dir()?)?;
    let pipeline = models.pipeline(&kb, cfg.pipeline);
    let results = pipeline.extract_all(&docs, &t, exec)?;
    let predictions: Vec<Prediction> = results.iter().map(|r| r.prediction()).collect();
    write_jsonl(&a.output, &predictions)?;
    let n: usize = predictions.iter().map(|p| p.triples.len()).sum();
    println!("{} documents, {n} triples", predictions.len());
    Ok(())
}

#[derive(Debug, Serialize)]
struct Report {
    documents: usize,
    micro: MetricReport,
    #[serde(rename = "macro")]
    macro_: MetricReport,
    micro_f1_ci: BootstrapCI,
    micro_f2_ci: BootstrapCI,
    macro_f1_ci: BootstrapCI,
    #[serde(skip_serializing_if = "Option::is_none")]
    attribution: Option<ErrorAttribution>,
}

fn evaluate(cfg: &RunConfig, a: EvaluateArgs, exec: Execution) -> Result<()> {
    let gold_path = match &a.gold {
        Some(p) => p.clone(),
        None => cfg.paths.test()?.to_path_buf(),
    };
    let gold = load_dataset(&gold_path, None)?;
    let predictions: Vec<Prediction> = read_jsonl(&a.predictions)?;
    let mut by_id: HashMap<&str, &Prediction> = HashMap::new();
    for p in &predictions {
        if by_id.insert(&p.doc_id, p).is_some() {
            bail!(cie_core::Error::validation(format!(
                "duplicate prediction for document {}",
                p.doc_id
            )));
        }
    }
    for p in &predictions {
        if !gold.iter().any(|g| g.doc_id == p.doc_id) {
            bail!(cie_core::Error::validation(format!(
                "prediction for unknown document {}",
                p.doc_id
            )));
        }
    }
    let docs: Vec<DocTriples> = gold
        .iter()
        .map(|g| DocTriples {
            predicted: by_id
                .get(g.doc_id.as_str())
                .map(|p| p.triple_set())
                .unwrap_or_default(),
            gold: g.triples.iter().cloned().collect(),
        })
        .collect();
    let scope = cfg.evaluation.macro_scope;
    let universe: Vec<String> = match cfg.paths.kb_dir() {
        Ok(_) if scope == MacroScope::All => load_kb(cfg)?
            .relations
            .records()
            .iter()
            .map(|r| r.id.clone())
            .collect(),
        _ => Vec::new(),
    };
    let micro = micro_metrics(&docs);
    let macro_ = macro_metrics(&docs, scope, &universe);
    let boot = BootstrapConfig {
        samples: cfg.evaluation.bootstrap_samples,
        seed: cfg.evaluation.bootstrap_seed,
        ..BootstrapConfig::default()
    };
    let (micro_f1_ci, micro_f2_ci, macro_f1_ci) = if docs.is_empty() {
        let zero = BootstrapCI {
            mean: 0.0,
            std: 0.0,
            samples: 0,
        };
        (zero, zero, zero)
    } else {
        (
            bootstrap_ci(&docs, |d| micro_metrics(d).f1, &boot, exec)?,
            bootstrap_ci(&docs, |d| micro_metrics(d).f2, &boot, exec)?,
            bootstrap_ci(
                &docs,
                |d| macro_metrics(d, scope, &universe).f1,
                &boot,
                exec,
            )?,
        )
    };

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let frequencies: Option<BTreeMap<String, usize>> = match (&a.frequencies, &cfg.paths.train) {
        (Some(p), _) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(serde_json::from_str(&text)?)
        }
        (None, Some(train)) => Some(relation_frequencies(&load_dataset(train, None)?)),
        (None, None) => None,
    };
    if let Some(freq) = &frequencies {
        let buckets = bucket_f1(&docs, freq);
        std::fs::write(a.out.join("buckets.csv"), buckets_csv(&buckets))?;
        write_json(&a.out.join("buckets.json"), &buckets)?;
    } else {
        log::warn!("no frequency map: set paths.train or pass --frequencies for the bucket table");
    }

    let attribution = if a.attribution {
        let kb = load_kb(cfg)?;
        let t = load_thresholds(cfg)?;
        let models = Models::load(cfg.paths.model_dir()?)?;
        let pipeline = models.pipeline(&kb, cfg.pipeline);
        let traces = pipeline.trace_all(&gold, t.epsilon_m, exec)?;
        Some(attribute_errors(&traces, &gold, &t, &kb.relations)?)
    } else {
        None
    };

    let report = Report {
        documents: docs.len(),
        micro,
        macro_,
        micro_f1_ci,
        micro_f2_ci,
        macro_f1_ci,
        attribution,
    };
    write_json(&a.out.join("report.json"), &report)?;
    println!("{}", report.micro);
    println!("{}", report.macro_);
    println!(
        "micro F1 {}  micro F2 {}  macro F1 {}",
        report.micro_f1_ci, report.micro_f2_ci, report.macro_f1_ci
    );
    if let Some(att) = &report.attribution {
        for (stage, f) in &att.fractions {
            println!("{:<22} {:>6.2}%", stage.as_str(), 100.0 * f);
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SeededRow {
    seed: u64,
    #[serde(flatten)]
    row: AblationRow,
}

#[derive(Debug, Serialize)]
struct ModeSummary {
    mode: RelationMode,
    micro_f1: f64,
    macro_f1: f64,
}

#[derive(Debug, Serialize)]
struct AblationTable {
    seeds: Vec<u64>,
    rows: Vec<SeededRow>,
    mean: Vec<ModeSummary>,
}

fn ablate(cfg: &RunConfig, a: AblateArgs, exec: Execution) -> Result<()> {
    let kb = load_kb(cfg)?;
    let dev = load_split(cfg.paths.dev()?, &kb)?;
    let test = load_split(cfg.paths.test()?, &kb)?;
    let dir = cfg.paths.model_dir()?.to_path_buf();
    let mention = MentionRecognizer::load(checkpoint_path(&dir, MENTION_FILE)?)?;
    let biencoder = BiEncoder::load(checkpoint_path(&dir, BIENCODER_FILE)?)?;
    let index = VectorIndex::load(checkpoint_path(&dir, INDEX_FILE)?)?;
    let ranker = CrossEncoder::load(checkpoint_path(&dir, CROSSENCODER_FILE)?)?;
    let modes = if a.modes.is_empty() {
        &cfg.ablation.modes
    } else {
        &a.modes
    };
    let seeds = if a.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        a.seeds
    };
    let train_docs = if a.train_missing {
        Some(load_split(cfg.paths.train()?, &kb)?)
    } else {
        None
    };

    let mut rows = Vec::new();
    for &seed in &seeds {
        let mut extractors = BTreeMap::new();
        for &mode in modes {
            let name = relation_file(mode, seed);
            let path = dir.join(&name);
            let model = match (&train_docs, path.exists()) {
                (_, true) => RelationExtractor::load(&path)?,
                (Some(docs), false) => {
                    let (model, trace) =
                        train_relation(cfg, &kb, docs, &ranker, mode, seed, &dir, exec)?;
                    model.save(&path)?;
                    write_loss(&dir, &format!("relation-{mode}-seed{seed}"), &trace)?;
                    model
                }
                (None, false) => bail!(cie_core::Error::Checkpoint(format!(
                    "no relation extractor for mode {mode} (seed {seed}): missing {}",
                    path.display()
                ))),
            };
            extractors.insert(mode, model);
        }
        let first = extractors
            .values()
            .next()
            .context("no ablation modes configured")?;
        let pipeline = Pipeline {
            kb: &kb,
            mention: &mention,
            biencoder: &biencoder,
            index: &index,
            ranker: &ranker,
            relation: first,
            config: cfg.pipeline,
            restricted: None,
        };
        let refs: BTreeMap<RelationMode, &RelationExtractor> =
            extractors.iter().map(|(m, x)| (*m, x)).collect();
        let grid = cfg.calibration.grid()?;
        for row in run_ablation(
            &pipeline,
            &refs,
            modes,
            &dev,
            &test,
            &grid,
            cfg.calibration.beta,
            exec,
        )? {
            println!(
                "seed {seed} {:<10} micro F1 {:.4} macro F1 {:.4}",
                row.mode.as_str(),
                row.micro.f1,
                row.macro_.f1
            );
            rows.push(SeededRow { seed, row });
        }
    }
    let mean = modes
        .iter()
        .map(|&mode| {
            let of: Vec<&AblationRow> = rows
                .iter()
                .filter(|r| r.row.mode == mode)
                .map(|r| &r.row)
                .collect();
            let avg =
                |f: fn(&AblationRow) -> f64| of.iter().map(|r| f(r)).sum::<f64>() / of.len() as f64;
            ModeSummary {
                mode,
                micro_f1: avg(|r| r.micro.f1),
                macro_f1: avg(|r| r.macro_.f1),
            }
        })
        .collect::<Vec<_>>();
    println!("{:<10} {:>9} {:>9}", "mode", "micro F1", "macro F1");
    for m in &mean {
        println!(
            "{:<10} {:>9.2} {:>9.2}",
            m.mode.as_str(),
            100.0 * m.micro_f1,
            100.0 * m.macro_f1
        );
    }
    let out = a.output.unwrap_or_else(|| dir.join("ablation.json"));
    write_json(&out, &AblationTable { seeds, rows, mean })
}

fn bench(cfg: &RunConfig, a: BenchArgs, exec: Execution) -> Result<()> {
    if a.runs == 0 {
        bail!(cie_core::Error::validation("--runs must be at least 1"));
    }
    let input = match &a.input {
        Some(p) => p.clone(),
        None => cfg.paths.test()?.to_path_buf(),
    };
    let docs = read_inputs(&input)?;
    if docs.is_empty() {
        bail!(cie_core::Error::validation(format!(
            "no documents in {}",
            input.display()
        )));
    }
    let t = load_thresholds(cfg)?;
    let kb = load_kb(cfg)?;
    let models = Models::load(cfg.paths.model_dir()?)?;
    let pipeline = models.pipeline(&kb, cfg.pipeline);
    let report = measure_throughput(&pipeline, &docs, &t, a.runs, exec)?;
    println!("{report} ({} runs over {} documents)", a.runs, docs.len());
    if let Some(out) = &a.output {
        write_json(out, &report)?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = SynthSpec::default();
    for (slot, flag) in [
        (&mut spec.n_entities, a.entities),
        (&mut spec.n_relations, a.relations),
        (&mut spec.n_types, a.types),
        (&mut spec.n_train, a.train_docs),
        (&mut spec.n_dev, a.dev_docs),
        (&mut spec.n_test, a.test_docs),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(d) = a.determinism {
        spec.type_determinism = d;
    }
    if let Some(s) = a.synth_seed {
        spec.seed = s;
    }
    let corpus = generate(&spec)?;
    corpus.write(&a.out, &spec)?;
    let mut cfg = RunConfig::synthetic();
    cfg.paths.kb_dir = Some(a.out.clone());
    cfg.paths.train = Some(a.out.join(TRAIN_FILE));
    cfg.paths.dev = Some(a.out.join(DEV_FILE));
    cfg.paths.test = Some(a.out.join(TEST_FILE));
    cfg.paths.model_dir = Some(a.out.join("models"));
    cfg.save(a.out.join("run.toml"))?;
    println!(
        "{} entities, {} relations, {}/{}/{} documents; config {}",
        corpus.kb.entities.len(),
        corpus.kb.relations.len(),
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        a.out.join("run.toml").display()
    );
    Ok(())
}
