use std::path::PathBuf;

use anyhow::bail;
use clap::{Args, Subcommand};
use ditforge_core::emulator::{search_configs, EmulatorOptions, PinSpec, SearchSpace};
use ditforge_core::model_spec::{derive_latent_shape, BucketRequest, ClusterSpec, LatentTable, ModelSpec, DEFAULT_PATCH};
use ditforge_core::{from_json_file, to_json_pretty};

use crate::Format;

#[derive(Subcommand)]
pub enum EmuCommand {
    /// Rank every feasible parallelism configuration by estimated MFU.
    Sweep(SweepArgs),
}

#[derive(Args)]
pub struct SweepArgs {
    /// ModelSpec JSON; built-in 30B DiT when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    /// ClusterSpec JSON; built-in 4x8 GPU cluster when omitted.
    #[arg(long)]
    cluster: Option<PathBuf>,
    /// Sample shape FRAMESxHEIGHTxWIDTH.
    #[arg(long)]
    bucket: BucketRequest,
    /// Report the gap of the best configuration matching e.g. `tp=8,sp=1,zero1=1`.
    #[arg(long)]
    pin: Option<PinSpec>,
    /// SearchSpace JSON overriding the default enumeration bounds.
    #[arg(long)]
    space: Option<PathBuf>,
    /// EmulatorOptions JSON (overlap model, kernel efficiency, coefficients).
    #[arg(long)]
    options: Option<PathBuf>,
    #[arg(long)]
    global_batch: Option<u32>,
    /// Report JSON destination; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `text` prints the ranked table to standard output.
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Rows shown by the text table.
    #[arg(long, default_value_t = 20)]
    top: usize,
}

pub fn run(cmd: EmuCommand) -> anyhow::Result<()> {
    match cmd {
        EmuCommand::Sweep(args) => sweep(args),
    }
}

fn sweep(args: SweepArgs) -> anyhow::Result<()> {
    let model: ModelSpec = match &args.model {
        Some(p) => from_json_file(p)?,
        None => ModelSpec::default(),
    };
    let errors = model.validate();
    if !errors.is_empty() {
        bail!("invalid model description: {}", errors.join("; "));
    }
    let cluster: ClusterSpec = match &args.cluster {
        Some(p) => from_json_file(p)?,
        None => ClusterSpec::default(),
    };
    let (errors, warnings) = cluster.validate();
    for w in warnings {
        log::warn!("cluster: {w}");
    }
    if !errors.is_empty() {
        bail!("invalid cluster description: {}", errors.join("; "));
    }
    let mut space: SearchSpace = match &args.space {
        Some(p) => from_json_file(p)?,
        None => SearchSpace::default(),
    };
    if let Some(gb) = args.global_batch {
        space.global_batch = gb;
    }
    let opts: EmulatorOptions = match &args.options {
        Some(p) => from_json_file(p)?,
        None => EmulatorOptions::default(),
    };
    let bucket = derive_latent_shape(args.bucket, &LatentTable::default(), DEFAULT_PATCH)?;
    let report = search_configs(&model, &cluster, &bucket, &space, args.pin.as_ref(), &opts)?;
    log::info!("{} feasible, {} infeasible", report.entries.len(), report.infeasible.len());
    if args.pin.is_some() && report.pinned.is_none() {
        log::warn!("no feasible configuration matches the pin");
    }
    let json = to_json_pretty(&report);
    match args.format {
        Format::Json => crate::emit(args.out.as_deref(), &json),
        Format::Text => {
            if let Some(out) = &args.out {
                crate::emit(Some(out), &json)?;
            }
            let mut text = report.render_text(args.top);
            if report.entries.is_empty() {
                text.push_str(&format!("no feasible configuration; {} rejected\n", report.infeasible.len()));
                for e in report.infeasible.iter().take(args.top) {
                    text.push_str(&format!("  {}: {}\n", e.config, e.reason));
                }
            }
            crate::emit(None, &text)
        }
    }
}
