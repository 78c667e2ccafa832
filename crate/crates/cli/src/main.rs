//! `pkgc`: data generation, labelling, training, evaluation and self-checks.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use persona_kgc::config::RunConfig;
use persona_kgc::corpus::{
    encode_cases, filter_repository, hash_user_key, generate_synthetic, load_corpus, load_memory, load_truth,
    pseudo_labels, retrieve_memory, write_corpus, write_memory, write_truth, DialogueCase,
    EncodedCase, GroundTruth, MemoryRepository, SyntheticSpec, Tokenizer, Vocab, USER_KEY_DIGEST,
};
use persona_kgc::inference::{evaluate, m_sweep, respond, MemoryIndex, Query};
use persona_kgc::metrics::unigram_f1;
use persona_kgc::training::checkpoint::{config_hash, Checkpoint, CHECKPOINT_VERSION};
use persona_kgc::training::{train, LogRecord, TrainState, Until};
use persona_kgc::{selfcheck, Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "pkgc", version, about = "Personalized knowledge-grounded conversation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted ground truth.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the spec file.
        #[arg(long)]
        seed: Option<u64>,
        /// Extra cases per user written to eval.jsonl / eval_truth.jsonl,
        /// sharing the same users and memory.
        #[arg(long, default_value_t = 0)]
        eval_cases_per_user: usize,
        #[arg(long)]
        force: bool,
    },
    /// Write unigram-F1 pseudo labels for every case.
    Label {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        memory: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run the warm-up phase only.
    Warmup {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Warm-up followed by the dual-learning loop.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint, appending to the existing log.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Decode the evaluation split and report metrics.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate freshly initialized parameters instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        untrained: bool,
        #[arg(long)]
        force: bool,
    },
    /// Select memory and knowledge and decode a response for each query.
    Infer {
        #[arg(long)]
        config: PathBuf,
        /// JSONL of {"id"?, "user", "context", "knowledge"}; other keys are ignored.
        /// `user` is an account name or its stored digest.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the oracle checks.
    Selfcheck,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData {
            spec,
            out,
            seed,
            eval_cases_per_user,
            force,
        } => gen_data(&spec, &out, seed, eval_cases_per_user, force),
        Command::Label {
            corpus,
            memory,
            out,
            force,
        } => label(&corpus, &memory, &out, force),
        Command::Warmup { config, force } => run_training(&config, None, force, Until::WarmupDone),
        Command::Train {
            config,
            resume,
            force,
        } => run_training(&config, resume.as_deref(), force, Until::Converged),
        Command::Eval {
            config,
            checkpoint,
            untrained,
            force,
        } => eval(&config, checkpoint.as_deref(), untrained, force),
        Command::Infer {
            config,
            input,
            checkpoint,
        } => infer(&config, &input, checkpoint.as_deref()),
        Command::Selfcheck => run_selfcheck(),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            match &e {
                Error::Config(problems) => {
                    eprintln!("error: invalid configuration");
                    for p in problems {
                        eprintln!("  - {p}");
                    }
                }
                other => eprintln!("error: {other}"),
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Refuse to clobber an existing output unless `force` is set.
fn fresh(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Argument(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_jsonl(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn gen_data(
    spec_path: &Path,
    out: &Path,
    seed: Option<u64>,
    eval_per_user: usize,
    force: bool,
) -> Result<ExitCode> {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| Error::Config(vec![format!("{}: {e}", spec_path.display())]))?;
    let mut spec: SyntheticSpec =
        toml::from_str(&text).map_err(|e| Error::Config(vec![e.to_string()]))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let mut full = spec.clone();
    full.cases_per_user += eval_per_user;
    let mut corpus = generate_synthetic(&full)?;
    // Cases are laid out round by round, so the tail holds whole rounds.
    let split = spec.num_users * spec.cases_per_user;
    let eval_cases = corpus.cases.split_off(split);
    let eval_truth = corpus.truth.split_off(split);

    let mut names = vec!["corpus.jsonl", "memory.jsonl", "truth.jsonl", "meta.json"];
    if eval_per_user > 0 {
        names.extend(["eval.jsonl", "eval_truth.jsonl"]);
    }
    for n in &names {
        fresh(&out.join(n), force)?;
    }
    fs::create_dir_all(out)?;
    write_jsonl(&out.join("corpus.jsonl"), |w| write_corpus(&corpus.cases, w))?;
    write_jsonl(&out.join("memory.jsonl"), |w| write_memory(&corpus.repo, w))?;
    write_jsonl(&out.join("truth.jsonl"), |w| write_truth(&corpus.truth, w))?;
    if eval_per_user > 0 {
        write_jsonl(&out.join("eval.jsonl"), |w| write_corpus(&eval_cases, w))?;
        write_jsonl(&out.join("eval_truth.jsonl"), |w| write_truth(&eval_truth, w))?;
    }
    let meta = serde_json::json!({
        "user_key_digest": USER_KEY_DIGEST,
        "cases": corpus.cases.len(),
        "eval_cases": eval_cases.len(),
        "users": corpus.repo.entries.len(),
        "spec": spec,
        "planted_table": corpus.planted_table(),
    });
    fs::write(out.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    println!(
        "wrote {} training and {} evaluation cases for {} users to {}",
        corpus.cases.len(),
        eval_cases.len(),
        corpus.repo.entries.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn label(corpus: &Path, memory: &Path, out: &Path, force: bool) -> Result<ExitCode> {
    fresh(out, force)?;
    let tok = Tokenizer::default();
    let cases = load_corpus(corpus, &tok)?;
    let repo = load_memory(memory, &tok)?;
    let mut lines = Vec::with_capacity(cases.len());
    for case in &cases {
        let mem = retrieve_memory(&repo, &case.user_key).map_err(|_| {
            Error::Data(format!(
                "case {}: user {} has no memory",
                case.id, case.user_key
            ))
        })?;
        let l = pseudo_labels(case, &mem, |a, b| unigram_f1(a, b).unwrap_or(0.0));
        lines.push(serde_json::json!({"id": case.id, "k_bar": l.k_bar, "p_bar": l.p_bar}).to_string());
    }
    let mut w = create(out)?;
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    println!("labelled {} cases", cases.len());
    Ok(ExitCode::SUCCESS)
}

/// Cases and memory after length/count filtering. Cases whose user was
/// filtered out are dropped along with their ground truth.
struct Loaded {
    cases: Vec<DialogueCase>,
    repo: MemoryRepository,
    truth: Option<Vec<GroundTruth>>,
}

fn load_split(cfg: &RunConfig, corpus: &Path, truth: Option<&Path>) -> Result<Loaded> {
    let tok = cfg.data.tokenizer();
    let cases = load_corpus(corpus, &tok)?;
    let raw = load_memory(&cfg.data.memory, &tok)?;
    let repo = filter_repository(&raw, cfg.data.filter_rule());
    let truth = truth.map(load_truth).transpose()?;
    if let Some(t) = &truth {
        if t.len() != cases.len() {
            return Err(Error::Data(format!(
                "{} ground-truth records for {} cases",
                t.len(),
                cases.len()
            )));
        }
    }
    let mut kept = Vec::with_capacity(cases.len());
    let mut kept_truth = truth.as_ref().map(|_| Vec::new());
    for (i, case) in cases.into_iter().enumerate() {
        if !raw.entries.contains_key(&case.user_key) {
            return Err(Error::Data(format!(
                "case {}: user {} has no memory",
                case.id, case.user_key
            )));
        }
        if repo.entries.contains_key(&case.user_key) {
            if let (Some(k), Some(t)) = (kept_truth.as_mut(), truth.as_ref()) {
                k.push(t[i].clone());
            }
            kept.push(case);
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(Loaded {
        cases: kept,
        repo,
        truth: kept_truth,
    })
}

fn encode(loaded: &Loaded, vocab: &Vocab) -> Result<Vec<EncodedCase>> {
    encode_cases(&loaded.cases, &loaded.repo, vocab, loaded.truth.as_deref())
}

fn log_path(cfg: &RunConfig) -> PathBuf {
    cfg.output.dir.join("train_log.jsonl")
}

fn run_training(config: &Path, resume: Option<&Path>, force: bool, until: Until) -> Result<ExitCode> {
    let cfg = RunConfig::load(config)?;
    let hash = config_hash(&cfg.model, &cfg.training);
    let loaded = load_split(&cfg, &cfg.data.train, cfg.data.truth.as_deref())?;
    let final_name = match until {
        Until::WarmupDone => "warmup.ckpt.json",
        Until::Converged => "final.ckpt.json",
    };
    let final_path = cfg.output.dir.join(final_name);
    let log = log_path(&cfg);

    let (vocab, mut state) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path, &hash)?;
            (ck.vocab, ck.state)
        }
        None => {
            fresh(&log, force)?;
            fresh(&final_path, force)?;
            let vocab = Vocab::build(&loaded.cases, &loaded.repo);
            let state = TrainState::new(&cfg.model, &cfg.training, vocab.len());
            (vocab, state)
        }
    };
    let cases = encode(&loaded, &vocab)?;
    fs::create_dir_all(&cfg.output.dir)?;
    let mut log_file = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .write(true)
            .append(resume.is_some())
            .truncate(resume.is_none())
            .open(&log)?,
    );
    let save = |state: &TrainState, path: &Path| -> Result<()> {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: hash.clone(),
            vocab: vocab.clone(),
            state: state.clone(),
        }
        .save(path)
    };
    let dir = cfg.output.dir.clone();
    train(
        &mut state,
        &cfg.training,
        &cases,
        until,
        &mut |r: &LogRecord| {
            writeln!(log_file, "{}", serde_json::to_string(r)?)?;
            Ok(())
        },
        &mut |s: &TrainState| {
            save(s, &dir.join(format!("checkpoint-{:06}.json", s.step)))
        },
    )?;
    log_file.flush()?;
    save(&state, &final_path)?;
    println!(
        "{} after {} warm-up and {} dual steps; checkpoint {}",
        if until == Until::WarmupDone { "warm-up finished" } else { "training finished" },
        state.warmup_done,
        state.dual_done,
        final_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_checkpoint(cfg: &RunConfig, path: Option<&Path>) -> Result<Checkpoint> {
    let default = cfg.output.dir.join("final.ckpt.json");
    let path = path.unwrap_or(&default);
    if !path.exists() {
        return Err(Error::State(format!(
            "no checkpoint at {}; train first or pass --checkpoint",
            path.display()
        )));
    }
    Checkpoint::load(path, &config_hash(&cfg.model, &cfg.training))
}

fn eval(config: &Path, checkpoint: Option<&Path>, untrained: bool, force: bool) -> Result<ExitCode> {
    let cfg = RunConfig::load(config)?;
    let report_path = cfg.output.dir.join("eval_report.json");
    let sweep_path = cfg.output.dir.join("m_sweep.json");
    fresh(&report_path, force)?;
    fresh(&sweep_path, force)?;
    let (corpus, truth) = match &cfg.data.eval {
        Some(e) => (e.clone(), cfg.data.eval_truth.clone()),
        None => (cfg.data.train.clone(), cfg.data.truth.clone()),
    };
    let loaded = load_split(&cfg, &corpus, truth.as_deref())?;
    let (vocab, models) = if untrained {
        let train = load_split(&cfg, &cfg.data.train, None)?;
        let vocab = Vocab::build(&train.cases, &train.repo);
        let state = TrainState::new(&cfg.model, &cfg.training, vocab.len());
        (vocab, state.models)
    } else {
        let ck = load_checkpoint(&cfg, checkpoint)?;
        (ck.vocab, ck.state.models)
    };
    let cases = encode(&loaded, &vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
    let report = evaluate(&models, &cases, &cfg.decode, &mut rng)?;
    let sweep = m_sweep(&models, &cases, &[1, 2, 3, 4])?;
    fs::create_dir_all(&cfg.output.dir)?;
    fs::write(&report_path, serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(&sweep_path, serde_json::to_string_pretty(&sweep)? + "\n")?;
    println!("{}", report.metrics.table());
    for (k, v) in &report.metrics.recall {
        println!("Recall@{k} {:.4}", v);
    }
    println!("cases {}; report {}", report.n_cases, report_path.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize)]
struct QueryRecord {
    #[serde(default)]
    id: Option<String>,
    user: String,
    context: Vec<String>,
    knowledge: Vec<String>,
}

fn infer(config: &Path, input: &Path, checkpoint: Option<&Path>) -> Result<ExitCode> {
    let cfg = RunConfig::load(config)?;
    let ck = load_checkpoint(&cfg, checkpoint)?;
    let tok = cfg.data.tokenizer();
    let repo = filter_repository(&load_memory(&cfg.data.memory, &tok)?, cfg.data.filter_rule());
    let index = MemoryIndex::build(&repo, &ck.vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
    let text = fs::read_to_string(input)?;
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: QueryRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        let enc = |s: &String| ck.vocab.encode(&tok.tokenize(s));
        // Accept either the stored digest or the raw account name.
        let user = if repo.entries.contains_key(&rec.user) {
            rec.user.clone()
        } else {
            hash_user_key(&rec.user)
        };
        let query = Query::new(
            rec.context.iter().map(enc).collect(),
            &user,
            rec.knowledge.iter().map(enc).collect(),
            &index,
        )?;
        let r = respond(&ck.state.models, &query, &cfg.decode, &mut rng)?;
        let id = rec.id.unwrap_or_else(|| format!("line{}", n + 1));
        let zp: Vec<String> = r.zp.iter().map(|z| z.to_string()).collect();
        println!("{id}\tzp={}\tzk={}\t{}", zp.join(","), r.zk, ck.vocab.decode(&r.tokens));
    }
    Ok(ExitCode::SUCCESS)
}

fn run_selfcheck() -> Result<ExitCode> {
    let checks = selfcheck::run();
    println!("{}", selfcheck::render(&checks));
    if checks.iter().all(|c| c.passed) {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Error::Numeric("self-check failed".into()))
    }
}
