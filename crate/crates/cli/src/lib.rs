//! Command-line driver for `sparks-core`.

pub mod config;
pub mod error;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use sparks_core::engine::Layer;
use sparks_core::trainer::{train_quantizer, train_toynet, Dataset, QuantizerProblem, SyntheticBlobs, ToyNet, ToyNetConfig};
use sparks_core::{
    codeword_histogram, infer_detailed, load_model, parse_arch, report, resnet18, save_model, select_equal_interval,
    select_random, select_topn_frequent, sign_binarize, Codebook, ConvPath, FileFormat, IndexCodedModel, InferOptions,
    Mode, SubCodebook,
};

pub use config::{Harness, RunConfig};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "sparks", version, about = "Sub-bit binary kernels by learned codeword selection")]
pub struct Cli {
    /// Seed for every random choice; overrides `seed` in a config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the full 2^(K*K) codebook as a layer-free SPKS file.
    GenCodebook {
        #[arg(short = 'k', long, default_value_t = 3)]
        kernel_size: usize,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run the quantizer or toy-net harness from a key=value config.
    Train { config: PathBuf },
    /// Group a checkpoint or 1-bit/sub-bit model onto an n-word sub-codebook.
    Compress {
        input: PathBuf,
        #[arg(short, long)]
        n: Option<usize>,
        #[arg(long, value_enum, default_value_t = Selector::Topn)]
        selector: Selector,
        /// SPKS file whose sub-codebook is used by `--selector learned`.
        #[arg(long)]
        codebook: Option<PathBuf>,
        /// Write raw 1-bit patterns (SPK1) instead of indices.
        #[arg(long)]
        one_bit: bool,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Accuracy and per-layer timing of a model over a dataset.
    Eval {
        model: PathBuf,
        /// Directory holding `images.u8` and `labels.u8`.
        #[arg(long)]
        data: PathBuf,
        /// Also run the direct convolution path and compare outputs.
        #[arg(long)]
        reference: bool,
        /// Per-layer timing CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Storage and BOPs table for an architecture.
    Report {
        #[arg(long, value_enum, conflicts_with = "arch", required_unless_present = "arch")]
        builtin: Option<Builtin>,
        #[arg(long)]
        arch: Option<PathBuf>,
        /// Comma-separated modes: `1bit` or a sub-codebook size.
        #[arg(long, default_value = "1bit,128,64,32", value_delimiter = ',')]
        modes: Vec<String>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic two-class blob dataset.
    GenData {
        #[arg(long, default_value_t = 128)]
        samples: usize,
        #[arg(short, long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Selector {
    Topn,
    Random,
    Interval,
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Builtin {
    Resnet18,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Csv,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Failed(e.to_string()))?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::GenCodebook { kernel_size, out } => gen_codebook(kernel_size, &out),
        Command::Train { config } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            train(&cfg)
        }
        Command::Compress {
            input,
            n,
            selector,
            codebook,
            one_bit,
            out,
        } => {
            let model = compress(&input, n, selector, codebook.as_deref(), seed.unwrap_or(0))?;
            let format = if one_bit { FileFormat::OneBit } else { FileFormat::SubBit };
            save_model(&model, &out, format)?;
            let sub = model.sub_codebook();
            println!("n: {}", sub.len());
            println!("bits/weight: {:.3}", bits_per_weight(sub));
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Eval {
            model,
            data,
            reference,
            csv,
        } => eval(&model, &data, reference, csv.as_deref()),
        Command::Report {
            builtin,
            arch,
            modes,
            format,
            out,
        } => {
            let table = report_table(builtin, arch.as_deref(), &modes, format)?;
            match out {
                Some(p) => std::fs::write(p, table)?,
                None => print!("{table}"),
            }
            Ok(())
        }
        Command::GenData { samples, out } => {
            if samples == 0 {
                return Err(CliError::Usage("--samples must be >= 1".into()));
            }
            let data = SyntheticBlobs::default().generate(samples, seed.unwrap_or(0))?;
            data.save(&out)?;
            println!("wrote {samples} samples to {}", out.display());
            Ok(())
        }
    }
}

/// `log2(n) / K²`.
pub fn bits_per_weight(sub: &SubCodebook) -> f64 {
    f64::from(sub.index_bits()) / (sub.kernel_size() * sub.kernel_size()) as f64
}

pub fn gen_codebook(kernel_size: usize, out: &Path) -> Result<(), CliError> {
    if !(1..=5).contains(&kernel_size) {
        return Err(CliError::Usage(format!("kernel size {kernel_size} outside 1..=5")));
    }
    let model = IndexCodedModel::new(SubCodebook::full(kernel_size)?, Vec::new())?;
    save_model(&model, out, FileFormat::SubBit)?;
    println!("wrote {} codewords to {}", model.sub_codebook().len(), out.display());
    Ok(())
}

fn csv_file(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let dir = &cfg.out_dir;
    match cfg.harness {
        Harness::Quantizer => {
            let problem = QuantizerProblem::random(cfg.kernel_size, cfg.kernels, cfg.data_seed)?;
            let book = Codebook::new(cfg.kernel_size)?;
            let run = train_quantizer(&problem, &cfg.train, &book)?;
            run.write_loss_csv(csv_file(&dir.join("loss.csv"))?)?;
            run.selection.write_csv(csv_file(&dir.join("selection.csv"))?)?;
            run.gaps.write_csv(csv_file(&dir.join("perm_gap.csv"))?)?;
            let model = IndexCodedModel::new(run.sub.clone(), Vec::new())?;
            save_model(&model, &dir.join("codebook.spks"), FileFormat::SubBit)?;
            println!("final loss: {:.6}", run.final_loss);
            println!("selected: {:?}", run.sub.indices());
        }
        Harness::ToyNet => {
            let data = match (&cfg.images, &cfg.labels) {
                (Some(i), Some(l)) => Dataset::load(i, l)?,
                _ => SyntheticBlobs::default().generate(cfg.samples, cfg.data_seed)?,
            };
            let net_cfg = ToyNetConfig {
                stem_channels: cfg.stem_channels,
                ..ToyNetConfig::default()
            };
            let arch = net_cfg.arch(data.dims(), data.classes().max(2))?;
            let run = train_toynet(&data, &arch, &cfg.train)?;
            run.write_metrics_csv(csv_file(&dir.join("metrics.csv"))?)?;
            run.selection.write_csv(csv_file(&dir.join("selection.csv"))?)?;
            run.gaps.write_csv(csv_file(&dir.join("perm_gap.csv"))?)?;
            save_model(&run.net.export()?, &dir.join("model.spks"), FileFormat::SubBit)?;
            run.net.save_json(&dir.join("checkpoint.json"))?;
            println!("final accuracy: {:.4}", run.final_accuracy);
        }
    }
    println!("outputs in {}", dir.display());
    Ok(())
}

enum Source {
    Net(Box<ToyNet>),
    Model(IndexCodedModel),
}

fn read_source(path: &Path) -> Result<Source, CliError> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(b"SPKS") || bytes.starts_with(b"SPK1") {
        return Ok(Source::Model(load_model(path)?));
    }
    let text = String::from_utf8(bytes)
        .map_err(|_| CliError::Usage(format!("{}: neither a model file nor a JSON checkpoint", path.display())))?;
    Ok(Source::Net(Box::new(ToyNet::from_json(&text)?)))
}

/// Groups `input` onto a sub-codebook picked by `selector`.
pub fn compress(
    input: &Path,
    n: Option<usize>,
    selector: Selector,
    codebook: Option<&Path>,
    seed: u64,
) -> Result<IndexCodedModel, CliError> {
    let source = read_source(input)?;
    let k = match &source {
        Source::Net(net) => net.kernel_size(),
        Source::Model(m) => m.kernel_size(),
    };
    let book = Codebook::new(k)?;
    let need_n = || n.ok_or_else(|| CliError::Usage(format!("--n is required for the {selector:?} selector")));
    let sub = match selector {
        Selector::Topn => {
            let words = match &source {
                Source::Net(net) => net
                    .layers()
                    .iter()
                    .flat_map(|l| l.weights.chunks_exact(k * k))
                    .map(sign_binarize)
                    .collect::<Result<Vec<_>, _>>()?,
                Source::Model(m) => m.kernel_codewords(),
            };
            select_topn_frequent(&codeword_histogram(&words, &book)?, need_n()?)?
        }
        Selector::Random => select_random(seed, need_n()?, &book)?,
        Selector::Interval => select_equal_interval(need_n()?, &book)?,
        Selector::Learned => {
            let learned = match (codebook, &source) {
                (Some(p), _) => load_model(p)?.sub_codebook().clone(),
                (None, Source::Model(m)) => m.sub_codebook().clone(),
                (None, Source::Net(net)) => net
                    .sub_codebook()
                    .cloned()
                    .ok_or_else(|| CliError::Usage("checkpoint has no learned sub-codebook; pass --codebook".into()))?,
            };
            if let Some(n) = n {
                if n != learned.len() {
                    return Err(CliError::Usage(format!("--n {n} but the learned sub-codebook has {}", learned.len())));
                }
            }
            learned
        }
    };
    if sub.kernel_size() != k {
        return Err(CliError::Usage(format!("codebook is for K = {}, input uses K = {k}", sub.kernel_size())));
    }
    match source {
        Source::Net(mut net) => {
            net.set_codebook(Some(sub))?;
            Ok(net.export()?)
        }
        Source::Model(m) => Ok(m.regroup(sub)?),
    }
}

fn layer_kind(l: &Layer) -> &'static str {
    match l {
        Layer::Real(_) => "real_conv",
        Layer::Coded(_) => "coded_conv",
        Layer::Dense(_) => "dense",
    }
}

/// Accuracy and per-layer timing.
#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub samples: usize,
    pub correct: usize,
    pub layer_times: Vec<Duration>,
    /// `Some` when the direct path was run too.
    pub exact_match: Option<bool>,
}

impl EvalSummary {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.samples as f64
    }
}

pub fn evaluate(model: &IndexCodedModel, data: &Dataset, reference: bool) -> Result<EvalSummary, CliError> {
    if data.is_empty() {
        return Err(CliError::Failed("dataset has no samples".into()));
    }
    let mut summary = EvalSummary {
        samples: data.len(),
        correct: 0,
        layer_times: vec![Duration::ZERO; model.layers().len()],
        exact_match: reference.then_some(true),
    };
    let direct = InferOptions {
        path: ConvPath::Direct,
        ..InferOptions::default()
    };
    for i in 0..data.len() {
        let x: Vec<f32> = data.image(i).iter().map(|&v| v as f32).collect();
        let t = infer_detailed(model, &x, data.dims(), InferOptions::default())?;
        for (acc, d) in summary.layer_times.iter_mut().zip(&t.layer_times) {
            *acc += *d;
        }
        let best = t
            .output
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b })
            .0;
        if best == usize::from(data.label(i)) {
            summary.correct += 1;
        }
        if reference {
            let r = infer_detailed(model, &x, data.dims(), direct)?;
            if r.accumulators != t.accumulators || r.output != t.output {
                summary.exact_match = Some(false);
            }
        }
    }
    Ok(summary)
}

pub fn eval(model_path: &Path, data_dir: &Path, reference: bool, csv: Option<&Path>) -> Result<(), CliError> {
    let model = load_model(model_path)?;
    let data = Dataset::load(&data_dir.join("images.u8"), &data_dir.join("labels.u8"))?;
    let s = evaluate(&model, &data, reference)?;
    println!("samples: {}", s.samples);
    println!("accuracy: {:.4}", s.accuracy());
    for (i, (l, t)) in model.layers().iter().zip(&s.layer_times).enumerate() {
        println!("layer {i} {:<10} {:>10.1} us/sample", layer_kind(l), t.as_secs_f64() * 1e6 / s.samples as f64);
    }
    if let Some(path) = csv {
        let mut out = csv_file(path)?;
        writeln!(out, "layer,kind,us_per_sample")?;
        for (i, (l, t)) in model.layers().iter().zip(&s.layer_times).enumerate() {
            writeln!(out, "{i},{},{}", layer_kind(l), t.as_secs_f64() * 1e6 / s.samples as f64)?;
        }
        out.flush()?;
    }
    if let Some(m) = s.exact_match {
        println!("exact-match: {m}");
        if !m {
            return Err(CliError::Failed("LUT and direct paths disagree".into()));
        }
    }
    Ok(())
}

pub fn report_table(
    builtin: Option<Builtin>,
    arch: Option<&Path>,
    modes: &[String],
    format: ReportFormat,
) -> Result<String, CliError> {
    let layers = match (builtin, arch) {
        (Some(Builtin::Resnet18), _) => resnet18(),
        (None, Some(p)) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            parse_arch(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        (None, None) => return Err(CliError::Usage("pass --builtin or --arch".into())),
    };
    let modes = modes
        .iter()
        .map(|m| m.trim().parse::<Mode>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let r = report(&layers, &modes)?;
    Ok(match format {
        ReportFormat::Text => r.to_text(),
        ReportFormat::Csv => r.to_csv(),
    })
}
