use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use retina_bow::codebook::{Codebook, KmeansConfig};
use retina_bow::encoder::{encode_image, EncodingMode};
use retina_bow::eval::{
    extract_corpus, extract_file, load_manifest, run_experiment, sweep, train_pipeline, DatasetManifest, ExperimentConfig,
    ExtractionConfig, Label, Report, Timing,
};
use retina_bow::svm::{default_c_grid, CvConfig, SvmModel};
use retina_bow::synth::{generate_corpus, SynthConfig};

#[derive(Parser, Debug)]
#[command(name = "retina-bow", version, about = "Bag-of-visual-words classification of retinal fundus images")]
struct Cli {
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Descriptor cache root.
    #[arg(long, global = true, env = "RETINA_BOW_CACHE")]
    cache: Option<PathBuf>,
    /// Disable sub-pixel SURF refinement.
    #[arg(long = "strict-paper", global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract descriptors for every manifest image into the cache.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build codebooks and a classifier on one split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "A")]
        split: String,
        #[arg(long, default_value = "multiple")]
        mode: EncodingMode,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Train on one split, test on the other, for every mode and K.
    Eval {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, default_value = "A")]
        train_split: String,
        #[arg(long, default_value = "B")]
        test_split: String,
    },
    /// Both cross-dataset directions over the full grid.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, default_value = "A")]
        train_split: String,
        #[arg(long, default_value = "B")]
        test_split: String,
    },
    /// Classify one image with a trained model directory.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Also print the BoW histogram.
        #[arg(long)]
        histogram: bool,
    },
    /// Write a synthetic two-site corpus with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 15)]
        per_class: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

#[derive(Args, Debug, Clone)]
struct FitArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated C values (default 2^-5, 2^-3, ..., 2^15).
    #[arg(long, value_delimiter = ',')]
    c_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Evenly subsample at most this many descriptors per image for k-means.
    #[arg(long)]
    per_image_cap: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct ExperimentArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Encoding modes; repeat or comma-separate (default: all five).
    #[arg(long, value_delimiter = ',')]
    mode: Vec<EncodingMode>,
    #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,50,60,70,80,90,100")]
    k_grid: Vec<usize>,
    #[command(flatten)]
    fit: FitArgs,
}

impl FitArgs {
    fn kmeans(&self) -> KmeansConfig {
        KmeansConfig {
            seed: self.seed,
            ..KmeansConfig::default()
        }
    }

    fn cv(&self) -> CvConfig {
        CvConfig {
            folds: self.folds,
            c_grid: self.c_grid.clone().unwrap_or_else(default_c_grid),
            seed: self.seed,
            ..CvConfig::default()
        }
    }
}

impl ExperimentArgs {
    fn config(&self, train_split: &str, test_split: &str) -> ExperimentConfig {
        ExperimentConfig {
            modes: if self.mode.is_empty() { EncodingMode::ALL.to_vec() } else { self.mode.clone() },
            k_grid: self.k_grid.clone(),
            train_split: train_split.to_ascii_uppercase(),
            test_split: test_split.to_ascii_uppercase(),
            kmeans: self.fit.kmeans(),
            cv: self.fit.cv(),
            per_image_cap: self.fit.per_image_cap,
        }
    }
}

/// Entry of the machine-readable log written as `errors.json`.
#[derive(Serialize, Debug)]
struct LogEntry {
    level: &'static str,
    path: Option<PathBuf>,
    message: String,
}

#[derive(Default)]
struct RunLog {
    entries: Vec<LogEntry>,
}

impl RunLog {
    fn warn(&mut self, path: Option<&Path>, message: String) {
        log::warn!("{}{message}", path.map(|p| format!("{}: ", p.display())).unwrap_or_default());
        self.entries.push(LogEntry {
            level: "warning",
            path: path.map(Path::to_path_buf),
            message,
        });
    }

    fn warnings(&self) -> usize {
        self.entries.iter().filter(|e| e.level == "warning").count()
    }
}

/// Trained artifacts as stored on disk: `pipeline.json` names the codebook
/// and model files next to it.
#[derive(Serialize, Deserialize, Debug)]
struct PipelineFile {
    format: String,
    version: u32,
    mode: EncodingMode,
    k: usize,
    extraction: ExtractionConfig,
    codebooks: Vec<String>,
    model: String,
}

const PIPELINE_FORMAT: &str = "retina-bow/pipeline";

fn extraction(strict: bool) -> ExtractionConfig {
    let cfg = ExtractionConfig::default();
    if strict {
        cfg.without_refinement()
    } else {
        cfg
    }
}

fn manifest(path: &Path) -> Result<DatasetManifest> {
    let m = load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))?;
    m.check_files_exist()?;
    Ok(m)
}

fn cmd_extract(cli: &Cli, manifest_path: &Path, out: &Path, log: &mut RunLog) -> Result<()> {
    let m = manifest(manifest_path)?;
    let root = cli.cache.clone().unwrap_or_else(|| out.join("cache"));
    fs::create_dir_all(&root)?;
    let corpus = extract_corpus(&m, &extraction(cli.strict), Some(&root));
    for (r, f) in m.records.iter().zip(&corpus.features) {
        if let Err(e) = f {
            log.warn(Some(&r.path), e.clone());
        }
    }
    println!(
        "extracted {} images ({} cache hits, {} failed) into {}",
        m.records.len(),
        corpus.cache_hits,
        corpus.failures(),
        root.display()
    );
    Ok(())
}

fn cmd_train(cli: &Cli, manifest_path: &Path, out: &Path, split: &str, mode: EncodingMode, k: usize, fit: &FitArgs, log: &mut RunLog) -> Result<()> {
    let m = manifest(manifest_path)?;
    let split = split.to_ascii_uppercase();
    let subset = DatasetManifest::new(m.records_in(&split).map(|(_, r)| r.clone()).collect())
        .with_context(|| format!("split {split}"))?;
    ensure!(!subset.records.is_empty(), "split {split} is empty");
    let ext = ExtractionConfig {
        kinds: mode.kinds(),
        ..extraction(cli.strict)
    };
    let corpus = extract_corpus(&subset, &ext, cli.cache.as_deref());
    let mut sets = Vec::new();
    let mut labels = Vec::new();
    for (r, f) in subset.records.iter().zip(&corpus.features) {
        match f {
            Ok(s) => {
                sets.push(s);
                labels.push(r.label);
            }
            Err(e) => log.warn(Some(&r.path), e.clone()),
        }
    }
    let pipe = train_pipeline(&sets, &labels, mode, k, &fit.kmeans(), &fit.cv(), fit.per_image_cap)?;
    fs::create_dir_all(out)?;
    let mut names = Vec::new();
    for cb in &pipe.codebooks {
        let name = format!("codebook_{}_k{k}.json", cb.kind);
        fs::write(out.join(&name), cb.to_json()?)?;
        names.push(name);
    }
    fs::write(out.join("model.json"), pipe.model.to_json()?)?;
    let file = PipelineFile {
        format: PIPELINE_FORMAT.into(),
        version: 1,
        mode,
        k,
        extraction: ext,
        codebooks: names,
        model: "model.json".into(),
    };
    fs::write(out.join("pipeline.json"), serde_json::to_vec_pretty(&file)?)?;
    let cv = pipe.cv_curve.iter().find(|p| p.0 == pipe.model.c).map_or(f64::NAN, |p| p.1);
    println!("trained {mode} K={k} on {} images: C={} cv accuracy {cv:.4}%", sets.len(), pipe.model.c);
    Ok(())
}

fn load_pipeline(dir: &Path) -> Result<(PipelineFile, Vec<Codebook>, SvmModel)> {
    let file: PipelineFile = serde_json::from_slice(&fs::read(dir.join("pipeline.json")).with_context(|| format!("reading {}/pipeline.json", dir.display()))?)?;
    ensure!(file.format == PIPELINE_FORMAT && file.version == 1, "unsupported pipeline {} v{}", file.format, file.version);
    let model = SvmModel::from_json(&fs::read(dir.join(&file.model))?)?;
    let books = file
        .codebooks
        .iter()
        .map(|n| Ok(Codebook::from_json(&fs::read(dir.join(n)).with_context(|| format!("reading codebook {n}"))?)?))
        .collect::<Result<Vec<_>>>()?;
    ensure!(books.len() == model.codebook_hashes.len(), "model expects {} codebooks, found {}", model.codebook_hashes.len(), books.len());
    for (b, want) in books.iter().zip(&model.codebook_hashes) {
        let got = b.content_hash()?;
        ensure!(&got == want, "codebook {} hash {got} does not match the model ({want})", b.kind);
    }
    Ok((file, books, model))
}

fn cmd_predict(cli: &Cli, model_dir: &Path, image: &Path, histogram: bool) -> Result<()> {
    let (file, books, model) = load_pipeline(model_dir)?;
    let (features, _) = extract_file(image, &file.extraction, cli.cache.as_deref())?;
    let h = encode_image(&features, &books, file.mode)?;
    let p = model.predict_detailed(&h.values)?;
    let label = Label::from_index(p.class).context("model predicts an unknown class")?;
    println!("class {label}");
    for (m, s) in model.machines.iter().zip(&p.pair_scores) {
        println!("pair {}/{} {s:.6}", Label::from_index(m.positive).map_or("?", Label::name), Label::from_index(m.negative).map_or("?", Label::name));
    }
    for (c, v) in model.classes.iter().zip(&p.votes) {
        println!("votes {} {v}", Label::from_index(*c).map_or("?", Label::name));
    }
    if histogram {
        let values: Vec<String> = h.values.iter().map(|v| format!("{v:.6}")).collect();
        println!("histogram {}", values.join(","));
    }
    Ok(())
}

fn write_report(dir: &Path, report: &Report, timing: &Timing) -> Result<()> {
    report.write_to_dir(dir)?;
    fs::write(dir.join("timing.json"), serde_json::to_vec_pretty(timing)?)?;
    print!("{} -> {}\n{}", report.train_split, report.test_split, report.accuracy_csv());
    Ok(())
}

fn note_excluded(report: &Report, log: &mut RunLog) {
    for e in &report.excluded {
        log.warn(Some(&e.path), e.reason.clone());
    }
}

fn cmd_eval(cli: &Cli, exp: &ExperimentArgs, train: &str, test: &str, log: &mut RunLog) -> Result<()> {
    let m = manifest(&exp.manifest)?;
    let cfg = exp.config(train, test);
    cfg.validate(&m)?;
    let ext = ExtractionConfig {
        kinds: cfg.kinds(),
        ..extraction(cli.strict)
    };
    let t = std::time::Instant::now();
    let corpus = extract_corpus(&m, &ext, cli.cache.as_deref());
    let (report, mut timing) = run_experiment(&cfg, &m, &corpus)?;
    timing.extract = t.elapsed().as_secs_f64() - timing.codebook - timing.encode - timing.train - timing.test;
    note_excluded(&report, log);
    write_report(&exp.out, &report, &timing)
}

fn cmd_sweep(cli: &Cli, exp: &ExperimentArgs, train: &str, test: &str, log: &mut RunLog) -> Result<()> {
    let m = manifest(&exp.manifest)?;
    let cfg = exp.config(train, test);
    let runs = sweep(&cfg, &m, &extraction(cli.strict), cli.cache.as_deref())?;
    for (i, (report, timing)) in runs.iter().enumerate() {
        if i == 0 {
            note_excluded(report, log);
        }
        let dir = exp.out.join(format!("{}_to_{}", report.train_split, report.test_split));
        write_report(&dir, report, timing)?;
    }
    Ok(())
}

fn run(cli: &Cli, log: &mut RunLog) -> Result<()> {
    match &cli.command {
        Command::Extract { manifest, out } => cmd_extract(cli, manifest, out, log),
        Command::Train {
            manifest,
            out,
            split,
            mode,
            k,
            fit,
        } => cmd_train(cli, manifest, out, split, *mode, *k, fit, log),
        Command::Eval { exp, train_split, test_split } => cmd_eval(cli, exp, train_split, test_split, log),
        Command::Sweep { exp, train_split, test_split } => cmd_sweep(cli, exp, train_split, test_split, log),
        Command::Predict { model, image, histogram } => cmd_predict(cli, model, image, *histogram),
        Command::Synth { out, per_class, seed } => {
            if *per_class == 0 {
                bail!("--per-class must be positive");
            }
            let m = generate_corpus(
                out,
                &SynthConfig {
                    per_class: *per_class,
                    seed: *seed,
                },
            )?;
            println!("wrote {} images and manifest.csv to {}", m.records.len(), out.display());
            Ok(())
        }
    }
}

fn out_dir(cmd: &Command) -> Option<&Path> {
    match cmd {
        Command::Extract { out, .. } | Command::Train { out, .. } | Command::Synth { out, .. } => Some(out),
        Command::Eval { exp, .. } | Command::Sweep { exp, .. } => Some(&exp.out),
        Command::Predict { .. } => None,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: --jobs: {e}");
            return ExitCode::FAILURE;
        }
    }
    let mut log = RunLog::default();
    let result = run(&cli, &mut log);
    if let Err(e) = &result {
        log.entries.push(LogEntry {
            level: "error",
            path: None,
            message: format!("{e:#}"),
        });
        eprintln!("error: {e:#}");
    }
    if log.warnings() > 0 {
        eprintln!("{} warning(s)", log.warnings());
    }
    if let Some(dir) = out_dir(&cli.command) {
        let written = fs::create_dir_all(dir).and_then(|_| fs::write(dir.join("errors.json"), serde_json::to_vec_pretty(&log.entries).expect("log entries serialize")));
        if let Err(e) = written {
            eprintln!("error: writing {}: {e}", dir.join("errors.json").display());
            return ExitCode::FAILURE;
        }
    }
    if result.is_ok() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
