use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scalant::data::{read_pairs, synth_task, write_corpus, Pair, Vocab};
use scalant::decoding::{beam_search, generate_distill_corpus, greedy_decode_batch, DistillCorpus};
use scalant::evaluation::{bleu, random_search_type2, teacher_forced_stats, CostReport, SearchMetric};
use scalant::model::{checkpoint, materialize, ModelConfig, ParameterStore, WidthSpec};
use scalant::training::{average_checkpoints, train_stage, METRICS_HEADER};

mod config;

use config::{MetricName, RunConfig};

#[derive(Parser)]
#[command(name = "scalant", version, about = "Scalable Transformer training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the run seed and every stage seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the synthetic corpus and vocabulary named in the config.
    Prep {
        #[command(flatten)]
        common: Common,
    },
    /// Runs one training stage.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
    },
    /// Beam-decodes training sources with the stage-2 widest model.
    GenerateTargets {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Scores sub-models on the test set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint stage to evaluate (default: latest present).
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: Option<u8>,
        /// `C:D1,D2,...`; every type-1 width when absent.
        #[arg(long)]
        spec: Option<String>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Random type-2 sub-model search on the validation set.
    Search {
        #[command(flatten)]
        common: Common,
    },
    /// Parameter and FLOPs table.
    Info {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        spec: Option<String>,
    },
    /// Elementwise mean of checkpoints.
    Average {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.stage1.seed = seed;
        cfg.stage2.seed = seed;
        cfg.stage3.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocab> {
    let vocab = Vocab::load(&cfg.data.vocab)
        .with_context(|| format!("missing vocabulary {} (run `prep` first)", cfg.data.vocab.display()))?;
    if vocab.len() != cfg.model.vocab_size {
        bail!(
            "vocabulary has {} entries but model.vocab_size is {}",
            vocab.len(),
            cfg.model.vocab_size
        );
    }
    Ok(vocab)
}

fn load_split(path: &Path, vocab: &Vocab, what: &str) -> Result<Vec<Pair>> {
    let pairs = read_pairs(path, vocab).with_context(|| format!("missing {what} corpus {}", path.display()))?;
    if pairs.is_empty() {
        bail!("{what} corpus {} is empty", path.display());
    }
    Ok(pairs)
}

fn load_checkpoint(path: &Path, cfg: &RunConfig, what: &str) -> Result<ParameterStore> {
    if !path.exists() {
        bail!("missing prerequisite: {what} checkpoint {}", path.display());
    }
    let store = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    if store.config() != &cfg.model {
        bail!("checkpoint {} was trained with a different model config", path.display());
    }
    Ok(store)
}

fn parse_spec(text: &str, model: &ModelConfig) -> Result<WidthSpec> {
    let spec: WidthSpec = text.parse()?;
    spec.validate(model)?;
    Ok(spec)
}

fn cmd_prep(cfg: &RunConfig) -> Result<()> {
    let synth = cfg
        .data
        .synth
        .as_ref()
        .context("config has no [data.synth] section to generate from")?;
    let total = synth.train_pairs + synth.valid_pairs + synth.test_pairs;
    let pairs = synth_task(
        synth.task,
        total,
        cfg.model.vocab_size,
        (synth.min_len, synth.max_len),
        cfg.seed,
    )?;
    let vocab = Vocab::synthetic(cfg.model.vocab_size)?;
    let (train, rest) = pairs.split_at(synth.train_pairs);
    let (valid, test) = rest.split_at(synth.valid_pairs);
    let header = vec![format!("task={} seed={}", synth.task, cfg.seed)];
    for (path, split) in [(&cfg.data.train, train), (&cfg.data.valid, valid), (&cfg.data.test, test)] {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let text: Vec<(String, String)> = split
            .iter()
            .map(|p| (vocab.decode(&p.src), vocab.decode(&p.tgt)))
            .collect();
        write_corpus(path, &header, &text)?;
    }
    vocab.save(&cfg.data.vocab)?;
    println!(
        "wrote {} train / {} valid / {} test pairs and a {}-entry vocabulary",
        train.len(),
        valid.len(),
        test.len(),
        vocab.len()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, stage: u8) -> Result<()> {
    let stage_cfg = cfg.stage(stage)?;
    let corpus = if stage == 3 {
        let path = cfg.distill_path();
        if !path.exists() {
            bail!(
                "missing prerequisite: stage 3 needs the distillation corpus {} (run `generate-targets`)",
                path.display()
            );
        }
        Some(DistillCorpus::load(&path)?)
    } else {
        None
    };
    let mut store = if stage == 1 {
        ParameterStore::init(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?
    } else {
        load_checkpoint(&cfg.checkpoint_path(stage - 1), cfg, &format!("stage-{}", stage - 1))?
    };
    let vocab = load_vocab(cfg)?;
    let train = if stage == 3 {
        Vec::new()
    } else {
        load_split(&cfg.data.train, &vocab, "training")?
    };
    let valid = load_split(&cfg.data.valid, &vocab, "validation")?;
    fs::create_dir_all(&cfg.out_dir)?;
    let metrics_path = cfg.metrics_path();
    let fresh = !metrics_path.exists();
    let mut log = OpenOptions::new().create(true).append(true).open(&metrics_path)?;
    if fresh {
        writeln!(log, "{METRICS_HEADER}")?;
    }
    let report = train_stage(&mut store, &train, &valid, corpus.as_ref(), stage_cfg, Some(&mut log))?;
    let out = cfg.checkpoint_path(stage);
    checkpoint::save(&store, &out)?;
    println!("stage {stage}: {} steps, checkpoint {}", report.steps, out.display());
    if let Some(last) = report.last() {
        for m in &last.metrics {
            println!("  {:<24} val_acc {:.4}  val_nll {:.4}", m.spec.to_string(), m.val_accuracy, m.val_loss);
        }
    }
    Ok(())
}

fn cmd_generate_targets(cfg: &RunConfig, beam: Option<usize>, alpha: Option<f64>) -> Result<()> {
    let teacher_path = cfg.checkpoint_path(2);
    let store = load_checkpoint(&teacher_path, cfg, "stage-2")?;
    let vocab = load_vocab(cfg)?;
    let train = load_split(&cfg.data.train, &vocab, "training")?;
    let limit = cfg.decode.sources_limit.unwrap_or(train.len()).min(train.len());
    let sources: Vec<&[usize]> = train[..limit].iter().map(|p| p.src.as_slice()).collect();
    let mut opts = cfg.distill_options();
    opts.beam = beam.unwrap_or(opts.beam);
    opts.alpha = alpha.unwrap_or(opts.alpha);
    let widest = materialize(&store, &WidthSpec::widest(store.config()))?;
    let corpus = generate_distill_corpus(&widest, &sources, &opts, &teacher_path.display().to_string())?;
    let out = cfg.distill_path();
    corpus.save(&out)?;
    println!(
        "kept {} of {} decoded pairs in {}",
        corpus.len(),
        sources.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, stage: Option<u8>, spec: Option<&str>, beam: Option<usize>, alpha: Option<f64>) -> Result<()> {
    let path = match stage {
        Some(s) => cfg.checkpoint_path(s),
        None => cfg.latest_checkpoint()?,
    };
    let store = load_checkpoint(&path, cfg, "evaluated")?;
    let vocab = load_vocab(cfg)?;
    let test = load_split(&cfg.data.test, &vocab, "test")?;
    let specs = match spec {
        Some(s) => vec![parse_spec(s, &cfg.model)?],
        None => cfg
            .model
            .width_menu
            .iter()
            .map(|&w| WidthSpec::type1(&cfg.model, w))
            .collect(),
    };
    let beam = beam.unwrap_or(cfg.decode.beam);
    let alpha = alpha.unwrap_or(cfg.decode.alpha);
    let max_len = cfg.max_len();
    let refs: Vec<Vec<usize>> = test.iter().map(|p| p.tgt.clone()).collect();
    let mut csv = String::from("spec,params,flops,token_accuracy,bleu\n");
    println!("checkpoint {} on {} test pairs (beam {beam}, alpha {alpha})", path.display(), test.len());
    println!("{:<28} {:>12} {:>10} {:>9} {:>8}", "spec", "params", "GFLOPs", "accuracy", "BLEU");
    for spec in &specs {
        let sub = materialize(&store, spec)?;
        let acc = teacher_forced_stats(&sub, &test)?.accuracy();
        let hyps: Vec<Vec<usize>> = if beam == 1 {
            let srcs: Vec<&[usize]> = test.iter().map(|p| p.src.as_slice()).collect();
            greedy_decode_batch(&sub, &srcs, max_len)?
        } else {
            test.iter()
                .map(|p| Ok(beam_search(&sub, &p.src, beam, alpha, max_len)?.output().to_vec()))
                .collect::<Result<_>>()?
        };
        let score = bleu(&hyps, &refs, 4)?;
        let cost = CostReport::new(&cfg.model, spec, 20, 20)?;
        println!(
            "{:<28} {:>12} {:>10.3} {:>9.4} {:>8.4}",
            spec.to_string(),
            cost.params,
            cost.flops / 1e9,
            acc,
            score
        );
        csv.push_str(&format!("{spec},{},{:.0},{acc:.6},{score:.6}\n", cost.params, cost.flops));
    }
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("eval.csv"), csv)?;
    Ok(())
}

fn cmd_search(cfg: &RunConfig) -> Result<()> {
    let path = match &cfg.search.checkpoint {
        Some(p) => p.clone(),
        None => cfg.latest_checkpoint()?,
    };
    let store = load_checkpoint(&path, cfg, "searched")?;
    let vocab = load_vocab(cfg)?;
    let valid = load_split(&cfg.data.valid, &vocab, "validation")?;
    let valid = &valid[..cfg.search.valid_limit.unwrap_or(valid.len()).clamp(1, valid.len())];
    let menu = if cfg.search.menu.is_empty() {
        cfg.model.width_menu.clone()
    } else {
        cfg.search.menu.clone()
    };
    let metric = match cfg.search.metric {
        MetricName::Accuracy => SearchMetric::Accuracy,
        MetricName::Bleu => SearchMetric::Bleu { max_len: cfg.max_len() },
    };
    let report = random_search_type2(
        &store,
        &menu,
        cfg.search.samples,
        valid,
        cfg.search.top_k,
        cfg.seed,
        metric,
    )?;
    fs::create_dir_all(&cfg.out_dir)?;
    let out = cfg.out_dir.join("search.csv");
    fs::write(&out, report.to_csv())?;
    for (i, e) in report.entries.iter().take(report.top_k).enumerate() {
        println!("{:>3} {:<40} {:.6}", i + 1, e.spec.to_string(), e.metric);
    }
    println!(
        "top-{} {}  widest {:.6}  ({} candidates, report {})",
        report.top_k,
        scalant::evaluation::format_mean_std(report.top_k_mean, report.top_k_std, 4),
        report.widest_metric,
        report.space,
        out.display()
    );
    if let Some(note) = report.widest_note() {
        println!("note: {note}");
    }
    Ok(())
}

fn cmd_info(cfg: &RunConfig, spec: Option<&str>) -> Result<()> {
    let mut specs: Vec<WidthSpec> = cfg
        .model
        .width_menu
        .iter()
        .map(|&w| WidthSpec::type1(&cfg.model, w))
        .collect();
    if let Some(s) = spec {
        specs.push(parse_spec(s, &cfg.model)?);
    }
    println!("{:<28} {:>12} {:>14} {:>10}", "spec", "params (M)", "no-proj (M)", "FLOPs (G)");
    for spec in &specs {
        let c = CostReport::new(&cfg.model, spec, 20, 20)?;
        println!(
            "{:<28} {:>12.2} {:>14.2} {:>10.2}",
            spec.to_string(),
            c.params as f64 / 1e6,
            c.params_without_projections as f64 / 1e6,
            c.flops / 1e9
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prep { common } => cmd_prep(&load_config(&common)?),
        Command::Train { common, stage } => cmd_train(&load_config(&common)?, stage),
        Command::GenerateTargets { common, beam, alpha } => cmd_generate_targets(&load_config(&common)?, beam, alpha),
        Command::Eval {
            common,
            stage,
            spec,
            beam,
            alpha,
        } => cmd_eval(&load_config(&common)?, stage, spec.as_deref(), beam, alpha),
        Command::Search { common } => cmd_search(&load_config(&common)?),
        Command::Info { common, spec } => cmd_info(&load_config(&common)?, spec.as_deref()),
        Command::Average { out, checkpoints } => {
            let store = average_checkpoints(&checkpoints)?;
            checkpoint::save(&store, &out)?;
            println!("averaged {} checkpoints into {}", checkpoints.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
