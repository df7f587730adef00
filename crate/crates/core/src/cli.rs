//! Command line front end. JSON results go to stdout, human-readable logs to stderr.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::{json, Value};

use crate::error::{ensure, Result};
use crate::format::{self, bits_per_weight, deserialize, read_header, serialize};
use crate::hessian::{HessianState, DEFAULT_DAMPING};
use crate::quantizer::{
    self, default_rank, proxy_loss, proxy_loss_by_group, GroupOrder, Layout, QuantConfig,
    QuantizeOptions,
};
use crate::tensorio::{self, Precision};

pub const CSV_HEADER: &str = "bpw,loss,d,n,k,int8,lowrank_r,seed";

#[derive(Debug, Parser)]
#[command(
    name = "hvq",
    version,
    about = "Hessian-guided vector quantization of weight matrices"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize an ATQT weight matrix using ATQT calibration activations.
    Quantize(QuantizeArgs),
    /// Write the dense reconstruction of an ATQZ layer as ATQT.
    Dequant(DequantArgs),
    /// Proxy loss of an ATQZ layer against the original weights.
    Eval(EvalArgs),
    /// Bits-per-weight accounting, from hyperparameters or an ATQZ header.
    ReportBits(ReportBitsArgs),
}

#[derive(Debug, Args)]
pub struct Hyper {
    /// Codebook entry dimension.
    #[arg(short = 'd', default_value_t = 2)]
    pub dim: usize,
    /// Entries per codebook.
    #[arg(short = 'n', default_value_t = 64)]
    pub entries: usize,
    /// Rows sharing one codebook.
    #[arg(short = 'k', default_value_t = 1024)]
    pub block_rows: usize,
    #[arg(long)]
    pub codebook_int8: bool,
    /// Low-rank correction rank; without a value, ceil(min(N, M) / 100).
    #[arg(long, num_args = 0..=1, default_missing_value = "auto")]
    pub lowrank_r: Option<String>,
}

impl Hyper {
    fn lowrank_rank(&self, rows: usize, cols: usize) -> Result<usize> {
        match self.lowrank_r.as_deref() {
            None => Ok(0),
            Some("auto") => Ok(default_rank(rows, cols)),
            Some(s) => s.parse().map_err(|_| {
                crate::Error::Validation(format!("--lowrank-r expects a count, got {s:?}"))
            }),
        }
    }
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long, short = 'o')]
    pub out: PathBuf,
    #[command(flatten)]
    pub hyper: Hyper,
    #[arg(long, default_value_t = DEFAULT_DAMPING)]
    pub damping: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Commit column groups left to right instead of greedily.
    #[arg(long)]
    pub fast_order: bool,
    #[arg(long, default_value_t = crate::vq::DEFAULT_MAX_ITERS)]
    pub kmeans_iters: usize,
    #[arg(long, default_value_t = 8)]
    pub flip_passes: usize,
    /// Smaller-n ATQZ layer whose codebooks seed this run (nested initialization).
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DequantArgs {
    #[arg(long)]
    pub layer: PathBuf,
    #[arg(long, short = 'o')]
    pub out: PathBuf,
    #[arg(long, default_value = "fp32")]
    pub precision: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub layer: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DAMPING)]
    pub damping: f64,
    /// Append `bpw,loss,d,n,k,int8,lowrank_r,seed` to this CSV file.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Seed recorded in the CSV row.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReportBitsArgs {
    /// Read hyperparameters and dims from this ATQZ header instead of flags.
    #[arg(long)]
    pub layer: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: Hyper,
    /// Matrix rows for low-rank and file-size accounting (default: k).
    #[arg(long)]
    pub rows: Option<usize>,
    /// Matrix columns for low-rank and file-size accounting (default: k).
    #[arg(long)]
    pub cols: Option<usize>,
}

pub fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::Quantize(a) => cmd_quantize(&a),
        Command::Dequant(a) => cmd_dequant(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::ReportBits(a) => cmd_report_bits(&a),
    }
}

fn load_hessian(calib: &Path, cols: usize, damping: f64) -> Result<HessianState> {
    let batch = tensorio::ingest_calibration(calib, Some(cols))?;
    HessianState::from_batch(&batch, damping)
}

pub fn cmd_quantize(a: &QuantizeArgs) -> Result<Value> {
    let started = Instant::now();
    let w = tensorio::load_matrix(&a.weights)?;
    let hess = load_hessian(&a.calib, w.cols(), a.damping)?;
    let cfg = QuantConfig {
        dim: a.hyper.dim,
        entries: a.hyper.entries,
        block_rows: a.hyper.block_rows,
        damping: a.damping,
        codebook_int8: a.hyper.codebook_int8,
        lowrank_rank: a.hyper.lowrank_rank(w.rows(), w.cols())?,
        seed: a.seed,
        kmeans_max_iters: a.kmeans_iters,
        flip_passes: a.flip_passes,
        order: if a.fast_order {
            GroupOrder::LeftToRight
        } else {
            GroupOrder::Greedy
        },
    };
    let warm = match &a.warm_start {
        Some(p) => Some(deserialize(&fs::read(p)?)?),
        None => None,
    };
    info!(
        "quantizing {}x{} with {cfg}, int8={}, r={}",
        w.rows(),
        w.cols(),
        cfg.codebook_int8,
        cfg.lowrank_rank
    );
    let layer = quantizer::quantize_matrix_with(
        &w,
        &hess,
        &cfg,
        QuantizeOptions {
            warm_start: warm.as_ref(),
            observer: None,
        },
    )?;
    let bytes = serialize(&layer);
    fs::write(&a.out, &bytes)?;

    let before = format::dequantize(&layer.with_lowrank(None)?);
    let after = format::dequantize(&layer);
    let report = bits_per_weight(layer.layout(), w.rows(), w.cols());
    Ok(json!({
        "rows": w.rows(),
        "cols": w.cols(),
        "d": cfg.dim,
        "n": cfg.entries,
        "k": cfg.block_rows,
        "codebook_int8": cfg.codebook_int8,
        "lowrank_r": cfg.lowrank_rank,
        "bits": report,
        "proxy_loss_before_lowrank": proxy_loss(w.as_matrix(), before.as_matrix(), &hess),
        "proxy_loss": proxy_loss(w.as_matrix(), after.as_matrix(), &hess),
        "file_bytes": bytes.len(),
        "wall_time_s": started.elapsed().as_secs_f64(),
        "seed": cfg.seed,
    }))
}

pub fn cmd_dequant(a: &DequantArgs) -> Result<Value> {
    let precision: Precision = a.precision.parse()?;
    let layer = deserialize(&fs::read(&a.layer)?)?;
    let w = format::dequantize(&layer);
    tensorio::store_matrix(&w, &a.out, precision)?;
    Ok(json!({ "rows": w.rows(), "cols": w.cols(), "precision": a.precision }))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Value> {
    let layer = deserialize(&fs::read(&a.layer)?)?;
    let w = tensorio::load_matrix(&a.weights)?;
    ensure!(
        (w.rows(), w.cols()) == (layer.rows(), layer.cols()),
        Validation,
        "layer is {}x{} but weights are {}x{}",
        layer.rows(),
        layer.cols(),
        w.rows(),
        w.cols()
    );
    let hess = load_hessian(&a.calib, w.cols(), a.damping)?;
    let w_hat = format::dequantize(&layer);
    let loss = proxy_loss(w.as_matrix(), w_hat.as_matrix(), &hess);
    let groups = proxy_loss_by_group(w.as_matrix(), w_hat.as_matrix(), &hess, layer.layout().dim);
    let layout = *layer.layout();
    let report = bits_per_weight(&layout, layer.rows(), layer.cols());

    if let Some(path) = &a.csv {
        let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{CSV_HEADER}")?;
        }
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            report.b_total,
            loss,
            layout.dim,
            layout.entries,
            layout.block_rows,
            layout.codebook_int8 as u8,
            layout.lowrank_rank,
            a.seed
        )?;
    }
    Ok(json!({
        "proxy_loss": loss,
        "group_losses": groups,
        "bits": report,
    }))
}

pub fn cmd_report_bits(a: &ReportBitsArgs) -> Result<Value> {
    let (layout, rows, cols) = match &a.layer {
        Some(p) => {
            let bytes = fs::read(p)?;
            let h = read_header(&bytes)?;
            (h.layout, h.rows, h.cols)
        }
        None => {
            let h = &a.hyper;
            let rows = a.rows.unwrap_or(h.block_rows);
            let cols = a.cols.unwrap_or(h.block_rows);
            let layout = Layout {
                dim: h.dim,
                entries: h.entries,
                block_rows: h.block_rows,
                codebook_int8: h.codebook_int8,
                lowrank_rank: h.lowrank_rank(rows, cols)?,
            };
            ensure!(
                layout.dim >= 1 && layout.entries >= 1 && layout.block_rows >= 1,
                Validation,
                "d, n and k must be positive"
            );
            ensure!(
                rows >= 1 && cols >= 1,
                Validation,
                "rows and cols must be positive"
            );
            ensure!(
                layout.lowrank_rank <= rows.min(cols),
                Validation,
                "low-rank rank {} exceeds min({rows}, {cols})",
                layout.lowrank_rank
            );
            (layout, rows, cols)
        }
    };
    let report = bits_per_weight(&layout, rows, cols);
    Ok(json!({
        "d": layout.dim,
        "n": layout.entries,
        "k": layout.block_rows,
        "codebook_int8": layout.codebook_int8,
        "lowrank_r": layout.lowrank_rank,
        "rows": rows,
        "cols": cols,
        "b_c": report.b_c,
        "b_i": report.b_i,
        "b_lr": report.b_lr,
        "b": report.b_total,
        "file_overhead_bytes": report.file_overhead_bytes,
        "file_size_bytes": report.file_size_bytes,
    }))
}
