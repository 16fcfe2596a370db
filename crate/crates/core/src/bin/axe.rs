use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{error, info, warn};
use serde_json::json;

use axe_ptq::bounds::{l1_budget, min_accumulator_bits, outer_accumulator_bits, strict_limits};
use axe_ptq::error::{QuantError, Result};
use axe_ptq::numeric::{Alphabet, AlphabetKind, RoundingMode};
use axe_ptq::pipeline::{quantize_layer, LayerJob, QuantConfig};
use axe_ptq::sweep::{sweep, write_csv, SweepGrid};
use axe_ptq::tensor_io::{read_codes, read_matrix, write_codes};
use axe_ptq::{verify, AccumulatorBudget, AccumulatorRepr};

const EXIT_ERROR: u8 = 1;
const EXIT_CERT_FAILED: u8 = 2;
const EXIT_PARTIAL_SWEEP: u8 = 3;

#[derive(Parser)]
#[command(
    name = "axe",
    version,
    about = "Accumulator-aware post-training quantization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Repr {
    SignMagnitude,
    TwosComplement,
}

impl From<Repr> for AccumulatorRepr {
    fn from(r: Repr) -> Self {
        match r {
            Repr::SignMagnitude => AccumulatorRepr::SignMagnitude,
            Repr::TwosComplement => AccumulatorRepr::TwosComplement,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Quantize one layer and write integer codes plus a JSON report.
    Quantize {
        /// K×C weight tensor.
        #[arg(long)]
        weights: PathBuf,
        /// K×D calibration activations.
        #[arg(long)]
        calib: PathBuf,
        /// JSON quantization config.
        #[arg(long)]
        config: PathBuf,
        /// Output K×C i32 code tensor.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Check integer codes against an accumulator width.
    Verify {
        /// K×C integer code tensor.
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        acc_bits: u32,
        #[arg(long)]
        act_bits: u32,
        #[arg(long)]
        tile: Option<usize>,
        /// Activations are signed instead of unsigned.
        #[arg(long)]
        act_signed: bool,
        #[arg(long, value_enum, default_value = "sign-magnitude")]
        repr: Repr,
        /// Write the certificate here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print closed-form accumulator widths and budgets.
    Bounds {
        #[arg(long)]
        k: u64,
        #[arg(long)]
        m: u32,
        #[arg(long)]
        n: u32,
        #[arg(long)]
        signed: bool,
        /// Accumulator width for budget figures; defaults to the minimum.
        #[arg(long)]
        p: Option<u32>,
        #[arg(long)]
        tile: Option<u64>,
    },
    /// Run a (P, M, N) grid and write a CSV with the Pareto frontier.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out_csv: PathBuf,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> QuantError + '_ {
    move |source| QuantError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn run_quantize(
    weights: &Path,
    calib: &Path,
    config: &Path,
    out: &Path,
    report: &Path,
) -> Result<u8> {
    let cfg: QuantConfig =
        serde_json::from_str(&fs::read_to_string(config).map_err(io_err(config))?)?;
    let job = LayerJob {
        weights: read_matrix(weights)?,
        calib_float: read_matrix(calib)?,
        config: cfg,
    };
    info!(
        "quantizing {}x{} layer with {} calibration samples",
        job.weights.nrows(),
        job.weights.ncols(),
        job.calib_float.ncols()
    );
    let (codes, rep) = quantize_layer(&job)?;
    write_codes(out, &codes)?;
    write_json(report, &rep)?;
    info!(
        "recon error {:e}, sparsity {:.4}",
        rep.recon_error, rep.sparsity
    );
    if rep.pass() {
        Ok(0)
    } else {
        let failed = rep.certificate.as_ref().map_or(0, |c| c.failures().count());
        warn!("{failed} accumulation units exceed the register");
        Ok(EXIT_CERT_FAILED)
    }
}

#[allow(clippy::too_many_arguments)]
fn run_verify(
    codes: &Path,
    acc_bits: u32,
    act_bits: u32,
    tile: Option<usize>,
    act_signed: bool,
    repr: Repr,
    out: Option<&Path>,
) -> Result<u8> {
    let q = read_codes(codes)?;
    let act = if act_signed {
        Alphabet::new(act_bits, AlphabetKind::TwosComplement)?
    } else {
        Alphabet::unsigned(act_bits)?
    };
    if tile == Some(0) {
        return Err(QuantError::InvalidArgument("tile must be >= 1".into()));
    }
    // slack does not enter the check, and at zero every width is feasible
    let budget = AccumulatorBudget::with_slack(acc_bits, tile, act, 0.0, repr.into())?;
    let cert = verify(&q, &budget, None);
    match out {
        Some(p) => write_json(p, &cert)?,
        None => println!("{}", serde_json::to_string_pretty(&cert)?),
    }
    if cert.pass() {
        Ok(0)
    } else {
        warn!(
            "{} units fail; widest needs {} bits",
            cert.failures().count(),
            cert.max_required_bits()
        );
        Ok(EXIT_CERT_FAILED)
    }
}

fn run_bounds(
    k: u64,
    m: u32,
    n: u32,
    signed: bool,
    p: Option<u32>,
    tile: Option<u64>,
) -> Result<u8> {
    let p_star = min_accumulator_bits(k, m, n, signed)?;
    let p = p.unwrap_or(p_star);
    let z = l1_budget(p, n)?;
    let limits = |rounding: RoundingMode| match strict_limits(p, n, rounding.slack()) {
        Ok((a, b)) => json!({ "lower": a, "upper": b }),
        Err(e) => json!({ "error": e.to_string() }),
    };
    let mut out = json!({
        "k": k,
        "weight_bits": m,
        "act_bits": n,
        "signed_acts": signed,
        "min_acc_bits": p_star,
        "acc_bits": p,
        "l1_budget": z,
        "limits_nearest": limits(RoundingMode::Nearest),
        "limits_to_zero": limits(RoundingMode::ToZero),
    });
    if let Some(t) = tile {
        out["tile"] = json!(t);
        out["outer_acc_bits"] = json!(outer_accumulator_bits(p, k, t)?);
    }
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(0)
}

fn run_sweep(grid_path: &Path, out_csv: &Path) -> Result<u8> {
    let grid: SweepGrid =
        serde_json::from_str(&fs::read_to_string(grid_path).map_err(io_err(grid_path))?)?;
    let base = grid_path.parent().unwrap_or(Path::new("."));
    let jobs = grid
        .layers
        .iter()
        .map(|l| l.load(base))
        .collect::<Result<Vec<_>>>()?;
    let rows = sweep(&jobs, &grid);
    let file = fs::File::create(out_csv).map_err(io_err(out_csv))?;
    write_csv(&rows, file)?;
    let bad = rows.iter().filter(|r| !r.ok()).count();
    info!("{} cells, {bad} not ok", rows.len());
    Ok(if bad > 0 { EXIT_PARTIAL_SWEEP } else { 0 })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Quantize {
            weights,
            calib,
            config,
            out,
            report,
        } => run_quantize(&weights, &calib, &config, &out, &report),
        Command::Verify {
            codes,
            acc_bits,
            act_bits,
            tile,
            act_signed,
            repr,
            out,
        } => run_verify(
            &codes,
            acc_bits,
            act_bits,
            tile,
            act_signed,
            repr,
            out.as_deref(),
        ),
        Command::Bounds {
            k,
            m,
            n,
            signed,
            p,
            tile,
        } => run_bounds(k, m, n, signed, p, tile),
        Command::Sweep { grid, out_csv } => run_sweep(&grid, &out_csv),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
