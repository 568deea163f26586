//! Batch frontend for the duration-modification pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or file-format error,
//! 3 numerical failure (non-finite loss, infeasible path). Diagnostics go
//! to standard error; `eval` prints its metrics as `key=value` lines on
//! standard output.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use durwarp::align::{
    encode_moves, length_error_ms_per_sec, match_ratio, read_alignment, write_alignment,
    AlignmentFile, WarpPath,
};
use durwarp::config::{load_config, Config};
use durwarp::features::{extract_features, read_features, write_features, HOP_MS};
use durwarp::infer::{modify_duration, write_attention_heatmap};
use durwarp::model::Model;
use durwarp::synth::{warp_features, warp_waveform};
use durwarp::train::{metrics_csv, synth_dataset, train, SyntheticPair};
use durwarp::wav::{read_wav, write_wav};

#[derive(Parser)]
#[command(name = "durwarp", version, about = "Adaptive speech duration modification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract log mel-filterbank features from a wav file
    Extract {
        /// Input PCM16 wav file
        wav: PathBuf,
        /// Output feature file
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Generate a synthetic parallel corpus with known warping paths
    SynthData {
        /// Number of pairs
        #[arg(long)]
        n: usize,
        /// Warp slope bound
        #[arg(long, default_value_t = durwarp::mask::DEFAULT_SLOPE)]
        slope: f64,
        /// Number of length-ratio classes
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Mel bands per synthetic frame
        #[arg(long, default_value_t = 8)]
        mels: usize,
        /// Shortest source length in frames
        #[arg(long, default_value_t = 40)]
        t_min: usize,
        /// Longest source length in frames
        #[arg(long, default_value_t = 120)]
        t_max: usize,
        /// Output directory
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train a model on a generated corpus directory
    Train {
        /// Corpus directory containing manifest.csv
        #[arg(long)]
        data: PathBuf,
        /// key=value config file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Config overrides, repeatable
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Override the schedule seed
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for per-utterance passes
        #[arg(long)]
        jobs: Option<usize>,
        /// Output checkpoint; metrics land next to it as .metrics.csv
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Predict a duration-modified alignment for a source feature file
    Align {
        /// Source feature file
        feat: PathBuf,
        /// Model checkpoint
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = durwarp::mask::DEFAULT_SLOPE)]
        slope: f64,
        #[arg(long, default_value_t = 1)]
        max_consec: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Worker threads
        #[arg(long)]
        jobs: Option<usize>,
        /// Output alignment file
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Time-warp a wav or feature file along an alignment
    Warp {
        /// Input wav or feature file (sniffed by magic)
        input: PathBuf,
        /// Alignment file
        #[arg(long)]
        align: PathBuf,
        /// Output file, same kind as the input
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Compare a predicted alignment against a reference
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Render a model's attention map with the backtracked path overlaid
    PlotAttention {
        /// Source feature file
        feat: PathBuf,
        /// Model checkpoint
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = durwarp::mask::DEFAULT_SLOPE)]
        slope: f64,
        #[arg(long, default_value_t = 1)]
        max_consec: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output PGM image
        #[arg(short, long)]
        output: PathBuf,
    },
}

enum CliError {
    Usage(String),
    Pipeline(durwarp::Error),
}

impl From<durwarp::Error> for CliError {
    fn from(e: durwarp::Error) -> Self {
        CliError::Pipeline(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Pipeline(e) => write!(f, "{e}"),
        }
    }
}

fn pipeline_exit_code(e: &durwarp::Error) -> i32 {
    use durwarp::Error;
    match e {
        Error::NonFinite(_)
        | Error::NoFeasiblePath { .. }
        | Error::AllMasked
        | Error::NotNormalized { .. } => 3,
        _ => 2,
    }
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Pipeline(e)) => {
            eprintln!("error: {e}");
            pipeline_exit_code(&e)
        }
    }
}

fn configure_jobs(jobs: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = jobs {
        if n == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot set --jobs: {e}")))?;
    }
    Ok(())
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Extract { wav, output } => {
            let wave = read_wav(&wav)?;
            let feats = extract_features(&wave)?;
            write_features(&feats, &output)?;
            eprintln!(
                "extracted {} frames x {} mel bands from {}",
                feats.n_frames(),
                feats.n_mels(),
                wav.display()
            );
            Ok(())
        }
        Command::SynthData {
            n,
            slope,
            classes,
            seed,
            mels,
            t_min,
            t_max,
            output,
        } => cmd_synth_data(n, slope, classes, seed, mels, (t_min, t_max), &output),
        Command::Train {
            data,
            config,
            overrides,
            seed,
            jobs,
            output,
        } => {
            configure_jobs(jobs)?;
            cmd_train(&data, config.as_deref(), &overrides, seed, &output)
        }
        Command::Align {
            feat,
            model,
            slope,
            max_consec,
            seed,
            jobs,
            output,
        } => {
            configure_jobs(jobs)?;
            cmd_align(&feat, &model, slope, max_consec, seed, &output)
        }
        Command::Warp {
            input,
            align,
            output,
        } => cmd_warp(&input, &align, &output),
        Command::Eval { pred, truth } => cmd_eval(&pred, &truth),
        Command::PlotAttention {
            feat,
            model,
            slope,
            max_consec,
            seed,
            output,
        } => {
            check_band(slope, max_consec)?;
            let feats = read_features(feat)?;
            let model = Model::load(model, slope, max_consec)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let res = modify_duration(&feats, &model, &mut rng)?;
            write_attention_heatmap(&output, &res.attention, &res.path)?;
            eprintln!(
                "wrote {}x{} attention map to {}",
                res.attention.t_src(),
                res.attention.t_tgt(),
                output.display()
            );
            Ok(())
        }
    }
}

fn check_band(slope: f64, max_consec: usize) -> Result<(), CliError> {
    if !(slope >= 1.0) {
        return Err(CliError::Usage(format!("--slope must be >= 1, got {slope}")));
    }
    if max_consec == 0 {
        return Err(CliError::Usage("--max-consec must be at least 1".into()));
    }
    Ok(())
}

const MANIFEST_HEADER: &str = "id,source_feat,target_feat,align_path,ratio";

fn longest_run(path: &WarpPath) -> usize {
    let mut longest = 0usize;
    let mut run = 0usize;
    let mut last = (1usize, 1usize);
    for w in path.pairs.windows(2) {
        let step = (w[1].0 - w[0].0, w[1].1 - w[0].1);
        if step == (1, 1) {
            run = 0;
        } else if step == last {
            run += 1;
        } else {
            run = 1;
        }
        last = step;
        longest = longest.max(run);
    }
    longest.max(1)
}

fn cmd_synth_data(
    n: usize,
    slope: f64,
    classes: usize,
    seed: u64,
    mels: usize,
    t_range: (usize, usize),
    dir: &Path,
) -> Result<(), CliError> {
    if !(slope >= 1.0) {
        return Err(CliError::Usage(format!("--slope must be >= 1, got {slope}")));
    }
    let pairs = synth_dataset(n, mels, t_range, slope, classes, seed)?;
    fs::create_dir_all(dir).map_err(durwarp::Error::Io)?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for pair in &pairs {
        let src_name = format!("{:04}_src.feat", pair.id);
        let tgt_name = format!("{:04}_tgt.feat", pair.id);
        let align_name = format!("{:04}.align", pair.id);
        write_features(&pair.x, dir.join(&src_name))?;
        write_features(&pair.y, dir.join(&tgt_name))?;
        write_alignment(
            dir.join(&align_name),
            &AlignmentFile {
                t_src: pair.x.n_frames(),
                t_tgt: pair.y.n_frames(),
                slope,
                max_consec: longest_run(&pair.true_path),
                path: pair.true_path.clone(),
            },
        )?;
        manifest.push_str(&format!(
            "{},{},{},{},{}\n",
            pair.id, src_name, tgt_name, align_name, pair.true_ratio
        ));
    }
    fs::write(dir.join("manifest.csv"), manifest).map_err(durwarp::Error::Io)?;
    eprintln!("wrote {} pairs to {}", pairs.len(), dir.display());
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<Vec<SyntheticPair>, CliError> {
    let manifest_path = dir.join("manifest.csv");
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        CliError::Pipeline(durwarp::Error::FileFormat(format!(
            "cannot read {}: {e}",
            manifest_path.display()
        )))
    })?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header.trim() == MANIFEST_HEADER => {}
        other => {
            return Err(CliError::Pipeline(durwarp::Error::FileFormat(format!(
                "manifest header should be {MANIFEST_HEADER:?}, got {other:?}"
            ))))
        }
    }
    let mut pairs = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(CliError::Pipeline(durwarp::Error::FileFormat(format!(
                "manifest line {}: expected 5 fields, got {}",
                lineno + 2,
                fields.len()
            ))));
        }
        let bad = |what: &str| {
            CliError::Pipeline(durwarp::Error::FileFormat(format!(
                "manifest line {}: bad {what}",
                lineno + 2
            )))
        };
        let id: u64 = fields[0].parse().map_err(|_| bad("id"))?;
        let x = read_features(dir.join(fields[1]))?;
        let y = read_features(dir.join(fields[2]))?;
        let alignment = read_alignment(dir.join(fields[3]))?;
        let true_ratio: f64 = fields[4].parse().map_err(|_| bad("ratio"))?;
        alignment
            .path
            .validate(x.n_frames(), y.n_frames(), None, None)
            .map_err(|e| {
                CliError::Pipeline(durwarp::Error::FileFormat(format!(
                    "manifest line {}: alignment does not fit the features: {e}",
                    lineno + 2
                )))
            })?;
        pairs.push(SyntheticPair {
            id,
            class: 0,
            x,
            y,
            true_path: alignment.path,
            true_ratio,
        });
    }
    if pairs.is_empty() {
        return Err(CliError::Pipeline(durwarp::Error::FileFormat(
            "manifest lists no pairs".into(),
        )));
    }
    Ok(pairs)
}

fn cmd_train(
    data: &Path,
    config: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    output: &Path,
) -> Result<(), CliError> {
    let mut cfg = match config {
        Some(path) => load_config(path)?,
        None => Config::default(),
    };
    for pair in overrides {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("--set expects KEY=VALUE, got {pair:?}"))
        })?;
        cfg.apply(key.trim(), value.trim())
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(s) = seed {
        cfg.schedule.seed = s;
    }
    cfg.validate()?;

    let pairs = load_corpus(data)?;
    let mels = pairs[0].x.n_mels();
    if mels != cfg.model.d_in {
        return Err(CliError::Pipeline(durwarp::Error::FileFormat(format!(
            "config d_in={} but the corpus has {mels} mel bands (set d_in={mels})",
            cfg.model.d_in
        ))));
    }

    let mut model = Model::init(cfg.model.clone(), cfg.schedule.seed)?;
    let rows = train(&mut model, &pairs, &cfg.loss, &cfg.schedule)?;
    model.save(output)?;
    let metrics_path = output.with_extension("metrics.csv");
    fs::write(&metrics_path, metrics_csv(&rows)).map_err(durwarp::Error::Io)?;
    if let Some(last) = rows.last() {
        eprintln!(
            "trained {} epochs on {} pairs: loss {:.4}, match {:.3}; wrote {} and {}",
            rows.len(),
            pairs.len(),
            last.loss,
            last.match_ratio,
            output.display(),
            metrics_path.display()
        );
    }
    Ok(())
}

fn cmd_align(
    feat: &Path,
    model_path: &Path,
    slope: f64,
    max_consec: usize,
    seed: u64,
    output: &Path,
) -> Result<(), CliError> {
    check_band(slope, max_consec)?;
    let feats = read_features(feat)?;
    let model = Model::load(model_path, slope, max_consec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = modify_duration(&feats, &model, &mut rng)?;
    write_alignment(
        output,
        &AlignmentFile {
            t_src: feats.n_frames(),
            t_tgt: res.t_hat,
            slope,
            max_consec,
            path: res.path,
        },
    )?;
    eprintln!(
        "aligned {} -> {} frames (ratio {:.3}) into {}",
        feats.n_frames(),
        res.t_hat,
        res.rho_hat,
        output.display()
    );
    Ok(())
}

fn cmd_warp(input: &Path, align: &Path, output: &Path) -> Result<(), CliError> {
    let alignment = read_alignment(align)?;
    let head = {
        let bytes = fs::read(input).map_err(durwarp::Error::Io)?;
        bytes.get(0..4).map(<[u8]>::to_vec)
    };
    match head.as_deref() {
        Some(b"RIFF") => {
            let wave = read_wav(input)?;
            let out = warp_waveform(&wave, &alignment.path, HOP_MS)?;
            write_wav(&out, output)?;
            eprintln!(
                "warped {:.2}s of audio to {:.2}s into {}",
                wave.duration_secs(),
                out.duration_secs(),
                output.display()
            );
        }
        Some(b"DWFT") => {
            let feats = read_features(input)?;
            let out = warp_features(&feats, &alignment.path)?;
            write_features(&out, output)?;
            eprintln!(
                "warped {} frames to {} into {}",
                feats.n_frames(),
                out.n_frames(),
                output.display()
            );
        }
        _ => {
            return Err(CliError::Pipeline(durwarp::Error::FileFormat(format!(
                "{} is neither a wav nor a feature file",
                input.display()
            ))))
        }
    }
    Ok(())
}

fn cmd_eval(pred: &Path, truth: &Path) -> Result<(), CliError> {
    let pred = read_alignment(pred)?;
    let truth = read_alignment(truth)?;
    if pred.t_src != truth.t_src {
        return Err(CliError::Pipeline(durwarp::Error::FileFormat(format!(
            "alignments describe different sources: {} vs {} frames",
            pred.t_src, truth.t_src
        ))));
    }
    let mr = match_ratio(&encode_moves(&pred.path), &encode_moves(&truth.path))?;
    let len_err = length_error_ms_per_sec(pred.t_tgt, truth.t_tgt, HOP_MS)?;
    println!("match_ratio={mr:.3}");
    println!("length_error_ms_per_sec={len_err:.3}");
    Ok(())
}
