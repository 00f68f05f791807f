use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bfpksort::experiment::{run_experiment, ExperimentConfig};
use bfpksort::ksort::{plan_head, HeadWeights, SortOrder};
use bfpksort::report::{emit_report, summarize};
use bfpksort::rope::{default_rope_tables, RopeLayout, DEFAULT_ROPE_BASE};
use bfpksort::tensorio::{self, read_header, Dtype, StoredTensor};
use bfpksort::Error;
use clap::{Parser, Subcommand};

/// Replaces the config's seeds; a single seed or a comma-separated list.
const SEED_ENV: &str = "BFPKSORT_SEED";

#[derive(Parser)]
#[command(
    name = "bfpksort",
    version,
    about = "Norm-sorted BFP key cache experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment grid and write report.csv and report.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Worker threads; defaults to the number of processors.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        order: Option<SortOrder>,
    },
    /// Sort one head's key channels and write the permutation plan.
    Plan {
        #[arg(long)]
        wk: PathBuf,
        #[arg(long)]
        wq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "asc")]
        order: SortOrder,
        /// Remap default rotary tables of this layout along with the channels.
        #[arg(long)]
        rope: Option<RopeLayout>,
        #[arg(long, default_value_t = DEFAULT_ROPE_BASE)]
        rope_base: f64,
        /// Also save the permuted key projection.
        #[arg(long)]
        wk_out: Option<PathBuf>,
        /// Also save the permuted query projection.
        #[arg(long)]
        wq_out: Option<PathBuf>,
    },
    /// Print a tensor file's header and check its payload.
    Inspect { file: PathBuf },
    /// Print the default experiment config.
    DefaultConfig,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) | Error::Json(_) => 2,
        _ => 1,
    }
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, Error> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={s:?} is not a seed list")))
        })
        .collect()
}

fn run(
    config: &Path,
    out_dir: Option<PathBuf>,
    workers: Option<usize>,
    order: Option<SortOrder>,
) -> Result<(), Error> {
    let mut cfg = ExperimentConfig::from_file(config)?;
    if let Ok(s) = std::env::var(SEED_ENV) {
        cfg.seeds = parse_seeds(&s)?;
    }
    if let Some(d) = out_dir {
        cfg.out_dir = d;
    }
    if let Some(o) = order {
        cfg.order = o;
    }
    let workers = match workers {
        Some(0) => return Err(Error::InvalidConfig("--workers must be at least 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let cells = run_experiment(&cfg, workers)?;
    let [csv, json] = emit_report(&cfg.out_dir, &cfg, &cells)?;
    for s in summarize(&cells) {
        let reduction = s
            .median_mse_reduction
            .map_or("n/a".to_string(), |r| format!("{:.1}%", 100.0 * r));
        println!(
            "{}/{}: sorted wins {}/{}, median MSE reduction {reduction}",
            s.format_q, s.format_k, s.sorted_wins, s.seeds
        );
    }
    println!("wrote {}", csv.display());
    println!("wrote {}", json.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn plan(
    wk: &Path,
    wq: &Path,
    out: &Path,
    order: SortOrder,
    rope: Option<RopeLayout>,
    rope_base: f64,
    wk_out: Option<PathBuf>,
    wq_out: Option<PathBuf>,
) -> Result<(), Error> {
    let weights = HeadWeights::new(tensorio::load_matrix(wk)?, tensorio::load_matrix(wq)?)?;
    let tables = rope
        .map(|layout| default_rope_tables(weights.head_dim(), rope_base, layout))
        .transpose()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let plan = plan_head(&weights, tables.as_ref(), order)?;
    let mut json = serde_json::to_vec_pretty(&plan.record())?;
    json.push(b'\n');
    tensorio::write_atomic(out, &json)?;
    println!("wrote {}", out.display());
    for (path, m) in [(wk_out, plan.weights().wk()), (wq_out, plan.weights().wq())] {
        if let Some(path) = path {
            tensorio::save(&path, &StoredTensor::F64(m.to_tensor()))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn inspect(file: &Path) -> Result<(), Error> {
    let bytes = std::fs::read(file).map_err(|e| Error::Io {
        path: file.to_path_buf(),
        source: e,
    })?;
    let h = read_header(&bytes)?;
    println!("file:        {}", file.display());
    println!("version:     {}", h.version);
    let dtype = match h.dtype {
        Dtype::F64 => "f64",
        Dtype::F32 => "f32",
        Dtype::PackedBfp => "packed-bfp",
    };
    println!("dtype:       {dtype} ({})", h.dtype as u32);
    println!("dims:        {:?}", h.dims);
    if let Some((fmt, axis)) = h.packed {
        println!(
            "format:      {fmt} (p={}, b={}, n={})",
            fmt.mantissa_bits(),
            fmt.exponent_bits(),
            fmt.block_size()
        );
        println!("axis:        {axis}");
        println!("block bytes: {}", fmt.block_bytes());
    }
    println!("header:      {} bytes, crc32 {:08x}", h.header_len, h.crc);
    println!("payload:     {} bytes", h.payload_len);
    tensorio::decode(&bytes)?;
    println!("status:      ok");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out_dir,
            workers,
            order,
        } => run(&config, out_dir, workers, order),
        Command::Plan {
            wk,
            wq,
            out,
            order,
            rope,
            rope_base,
            wk_out,
            wq_out,
        } => plan(&wk, &wq, &out, order, rope, rope_base, wk_out, wq_out),
        Command::Inspect { file } => inspect(&file),
        Command::DefaultConfig => serde_json::to_string_pretty(&ExperimentConfig::default())
            .map(|s| println!("{s}"))
            .map_err(Error::from),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
