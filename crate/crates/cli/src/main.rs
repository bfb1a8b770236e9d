//! `timemil` command line: train, evaluate, explain, generate synthetic
//! data, run the entropy experiments and the gradient checks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use serde::Serialize;

use timemil::config::{load_config, AttentionMode, RunConfig};
use timemil::data::{load_checkpoint, parse_ts, save_checkpoint, write_ts, Bag};
use timemil::entropy;
use timemil::gradcheck::{self, Suite};
use timemil::interpret;
use timemil::synthetic;
use timemil::trainer::{self, Metrics, Trainer};
use timemil::{Error, TimeMil};

#[derive(Parser)]
#[command(name = "timemil", version, about = "Multiple instance learning for multivariate time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, a checkpoint and a summary
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Export per-time-step importance
    Explain(ExplainArgs),
    /// Generate the synthetic pulse dataset
    Synth(SynthArgs),
    /// Block entropy, the ordered Bernoulli example and the conditioning check
    Entropy(EntropyArgs),
    /// Compare tape gradients with finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Held-out set evaluated after training
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    attention: Option<AttentionMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// CSV of `bag_id,start,end` ground-truth windows to score against
    #[arg(long)]
    windows: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n_pos: usize,
    #[arg(long)]
    n_neg: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `.ts` output; pulse windows go to `<out>.windows.csv`
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(group(ArgGroup::new("experiment").required(true).args(["text", "prop2", "theorem3"])))]
struct EntropyArgs {
    /// Plain-text corpus for the shuffling experiment
    #[arg(long)]
    text: Option<PathBuf>,
    #[arg(long)]
    prop2: bool,
    #[arg(long)]
    theorem3: bool,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of shuffle seeds per rate
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Block length
    #[arg(long, default_value_t = 2)]
    n: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// all, ops, backbone, wpe, attention, pooling, loss or model
    #[arg(long, default_value = "all")]
    module: String,
}

/// Outcome of a command that ran to completion.
enum Outcome {
    Ok,
    CheckFailed,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Explain(a) => explain(a),
        Command::Synth(a) => synth(a),
        Command::Entropy(a) => entropy_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn print_metrics(label: &str, m: &Metrics) {
    println!(
        "{label}: accuracy {:.4} macro_f1 {:.4} macro_precision {:.4} macro_recall {:.4} auc_roc {:.4}",
        m.accuracy, m.macro_f1, m.macro_precision, m.macro_recall, m.auc_roc
    );
    if !m.skipped_classes.is_empty() {
        println!("  classes absent from labels (left out of macro averages): {:?}", m.skipped_classes);
    }
}

#[derive(Serialize)]
struct Summary {
    dataset: String,
    train_bags: usize,
    validation_bags: usize,
    num_classes: usize,
    num_parameters: usize,
    seed: u64,
    epochs: usize,
    best_epoch: usize,
    final_loss: f64,
    final_train: Metrics,
    validation: Option<Metrics>,
    test: Option<Metrics>,
    config: RunConfig,
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn train(a: TrainArgs) -> Result<Outcome, Error> {
    let mut cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.attention {
        cfg.attention_mode = m;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    let (meta, bags) = parse_ts(&a.data)?;
    let test = a.test.as_ref().map(parse_ts).transpose()?;
    if let Some((tm, _)) = &test {
        if tm.class_labels != meta.class_labels || tm.dimensions != meta.dimensions {
            return Err(Error::Schema("test set labels or dimensions differ from the training set".into()));
        }
    }
    let (train_bags, val_bags) = trainer::split_validation(&bags, cfg.validation_fraction, cfg.seed);
    let model = TimeMil::<f32>::new(cfg.clone(), meta.dimensions, meta.num_classes())?;
    println!(
        "training on {} bags ({} validation), {} parameters",
        train_bags.len(),
        val_bags.len(),
        model.num_parameters()
    );
    let mut tr = Trainer::from_run(model)?;
    let val = (!val_bags.is_empty()).then_some(val_bags.as_slice());
    let fit = tr.fit(&train_bags, val)?;
    create_dir(&a.out)?;
    trainer::write_metrics_csv(&fit.reports, a.out.join("metrics.csv"))?;
    if val.is_some() {
        trainer::write_validation_csv(&fit.reports, a.out.join("validation.csv"))?;
    }
    save_checkpoint(&tr.model, &meta.class_labels, a.out.join("checkpoint"))?;
    let last = fit.reports.last();
    let test_metrics = match &test {
        Some((_, tb)) => Some(trainer::evaluate(&tr.model, tb)?),
        None => None,
    };
    let summary = Summary {
        dataset: meta.name.clone(),
        train_bags: train_bags.len(),
        validation_bags: val_bags.len(),
        num_classes: meta.num_classes(),
        num_parameters: tr.model.num_parameters(),
        seed: cfg.seed,
        epochs: cfg.epochs,
        best_epoch: fit.best_epoch,
        final_loss: last.map_or(f64::NAN, |r| r.loss),
        final_train: match last {
            Some(r) => r.metrics.clone(),
            None => trainer::evaluate(&tr.model, &train_bags)?,
        },
        validation: fit.reports.get(fit.best_epoch).and_then(|r| r.validation.clone()),
        test: test_metrics.clone(),
        config: cfg,
    };
    let spath = a.out.join("summary.json");
    std::fs::write(&spath, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::Io {
        path: spath.clone(),
        source: e,
    })?;
    if let Some(r) = last {
        println!("final epoch loss {:.6}", r.loss);
        print_metrics("train", &r.metrics);
    }
    if let Some(m) = &test_metrics {
        print_metrics("test", m);
    }
    println!("wrote {}", a.out.display());
    Ok(Outcome::Ok)
}

fn load_matching(checkpoint: &Path, data: &Path) -> Result<(TimeMil<f32>, Vec<Bag>), Error> {
    let (model, labels) = load_checkpoint(checkpoint)?;
    let (meta, bags) = parse_ts(data)?;
    if meta.class_labels != labels {
        return Err(Error::Schema(format!(
            "dataset labels {:?} differ from checkpoint labels {labels:?}",
            meta.class_labels
        )));
    }
    Ok((model, bags))
}

fn eval(a: EvalArgs) -> Result<Outcome, Error> {
    let (model, bags) = load_matching(&a.checkpoint, &a.data)?;
    let m = trainer::evaluate(&model, &bags)?;
    print_metrics("eval", &m);
    Ok(Outcome::Ok)
}

fn read_windows(path: &Path) -> Result<Vec<(String, usize, usize)>, Error> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn explain(a: ExplainArgs) -> Result<Outcome, Error> {
    let (model, bags) = load_matching(&a.checkpoint, &a.data)?;
    let maps = bags
        .iter()
        .map(|b| interpret::importance(&model, b))
        .collect::<Result<Vec<_>, _>>()?;
    let items: Vec<_> = bags.iter().zip(&maps).collect();
    interpret::export_importance_csv(&items, &a.out)?;
    println!("wrote {} rows to {}", bags.iter().map(|b| b.t).sum::<usize>(), a.out.display());
    if let Some(wpath) = &a.windows {
        let windows = read_windows(wpath)?;
        let (mut mass, mut prec, mut n, mut share) = (0.0, 0.0, 0usize, 0.0);
        for (id, start, end) in &windows {
            let Some(m) = maps.iter().find(|m| &m.bag_id == id) else {
                return Err(Error::Schema(format!("window for unknown bag '{id}'")));
            };
            let s = interpret::localization_score(m, (*start, *end))?;
            mass += s.mass_in_window;
            prec += s.topk_precision;
            share += (end - start + 1) as f64 / m.importance.len() as f64;
            n += 1;
        }
        if n > 0 {
            let nf = n as f64;
            println!(
                "localization over {n} bags: mean window mass {:.4} ({:.2}x uniform share), mean top-k precision {:.4}",
                mass / nf,
                mass / share,
                prec / nf
            );
        }
    }
    Ok(Outcome::Ok)
}

fn windows_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".windows.csv");
    PathBuf::from(s)
}

fn synth(a: SynthArgs) -> Result<Outcome, Error> {
    let gen = synthetic::gen_dataset(a.n_pos, a.n_neg, a.seed);
    let name = format!("SyntheticPulse{}", a.seed);
    let bags = synthetic::to_bags(&gen, &name);
    if bags.is_empty() {
        return Err(Error::Usage("nothing to generate: n_pos + n_neg is 0".into()));
    }
    write_ts(&a.out, &synthetic::dataset_meta(&name, bags.len()), &bags)?;
    let wpath = windows_path(&a.out);
    let mut w = csv::Writer::from_path(&wpath).map_err(|e| Error::Io {
        path: wpath.clone(),
        source: e.into(),
    })?;
    w.write_record(["bag_id", "start", "end"])?;
    for (b, g) in bags.iter().zip(&gen) {
        if let Some((s, e)) = g.pulse_window {
            w.write_record([b.id.clone(), s.to_string(), e.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::Io { path: wpath.clone(), source: e })?;
    println!(
        "wrote {} bags ({} positive) to {} and pulse windows to {}",
        bags.len(),
        a.n_pos,
        a.out.display(),
        wpath.display()
    );
    Ok(Outcome::Ok)
}

const PROP2_TARGETS: (f64, f64) = (0.70, 1.16);
const PROP2_TOLERANCE: f64 = 0.005;

fn entropy_cmd(a: EntropyArgs) -> Result<Outcome, Error> {
    if a.prop2 {
        let (h0, h1) = entropy::prop2_example();
        println!("ordered: {h0:.4} bits\npermuted: {h1:.4} bits");
        let ok = (h0 - PROP2_TARGETS.0).abs() <= PROP2_TOLERANCE && (h1 - PROP2_TARGETS.1).abs() <= PROP2_TOLERANCE;
        return Ok(if ok { Outcome::Ok } else { Outcome::CheckFailed });
    }
    if a.theorem3 {
        let r = entropy::theorem3_check(a.seed, a.trials, 4, 3)?;
        println!(
            "{} trials, {} violations, gap range [{:.3e}, {:.3e}] bits",
            r.trials,
            r.violations.len(),
            r.min_gap,
            r.max_gap
        );
        for v in &r.violations {
            println!("violation: {v}");
        }
        return Ok(if r.violations.is_empty() { Outcome::Ok } else { Outcome::CheckFailed });
    }
    let path = a.text.expect("clap requires one experiment");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
    let mut rows = Vec::new();
    for &rate in &entropy::SHUFFLE_RATES {
        for &seed in &seeds {
            let chars: Vec<char> = text.chars().collect();
            let s = entropy::shuffle_fraction(&chars, rate, seed)?;
            rows.push(entropy::ShuffleRow {
                rate,
                seed,
                block_entropy: entropy::block_entropy(&s, a.n)?,
            });
        }
    }
    for (rate, mean) in entropy::mean_by_rate(&rows) {
        println!("rate {rate:.2}: mean block entropy {mean:.4} bits");
    }
    if let Some(out) = &a.out {
        entropy::write_shuffle_csv(&rows, out)?;
        println!("wrote {}", out.display());
    }
    Ok(Outcome::Ok)
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<Outcome, Error> {
    let results = if a.module == "all" {
        gradcheck::run_all(a.seed)?
    } else {
        gradcheck::run_suite(a.module.parse::<Suite>()?, a.seed)?
    };
    print!("{}", gradcheck::format_table(&results));
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!(
        "{} checks, {failed} failed, worst relative error {worst:.3e} (tolerance {:.0e})",
        results.len(),
        gradcheck::TOLERANCE
    );
    Ok(if failed == 0 { Outcome::Ok } else { Outcome::CheckFailed })
}
