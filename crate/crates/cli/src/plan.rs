use std::io::{BufRead, BufReader};
use std::path::PathBuf;

use anyhow::{anyhow, Context};
use clap::Args;
use ditforge_core::cost_model::{calibrate, FlopsTable};
use ditforge_core::load_balancer::{BucketConfig, ManifestRecord, Planner};
use ditforge_core::model_spec::BucketRequest;
use ditforge_core::{from_json_file, to_json_pretty};

#[derive(Args)]
pub struct PlanArgs {
    /// Line-delimited JSON clip records {id, frames, height, width, source_url, duration_s}.
    #[arg(long)]
    manifest: PathBuf,
    /// Target shape FRAMESxHEIGHTxWIDTH whose per-sample FLOPs set the batch budget.
    #[arg(long)]
    target: BucketRequest,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Images added per cached video sample.
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    /// Video batches cached before each padding round.
    #[arg(long, default_value_t = 8)]
    cache: usize,
    /// FLOPs table JSON; the bundled table when omitted.
    #[arg(long)]
    flops_table: Option<PathBuf>,
    /// BucketConfig JSON (frame buckets, aspect ratios).
    #[arg(long)]
    buckets: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(args: PlanArgs) -> anyhow::Result<()> {
    let table = match &args.flops_table {
        Some(p) => from_json_file::<FlopsTable>(p)?,
        None => FlopsTable::bundled(),
    };
    let buckets: BucketConfig = match &args.buckets {
        Some(p) => from_json_file(p)?,
        None => BucketConfig::default(),
    };
    let coeffs = calibrate(&table).context("FLOPs table does not calibrate")?.coefficients;
    let cfg = Planner::config_for_target(&table, &coeffs, args.target, args.alpha, args.beta, args.cache)?;
    log::info!("F_target {:.2} TFLOPs, image {:.2} TFLOPs", cfg.f_target, cfg.image_flops);
    let mut planner = Planner::new(cfg, buckets, table, coeffs)?;

    let file = std::fs::File::open(&args.manifest)
        .with_context(|| format!("cannot open manifest {}", args.manifest.display()))?;
    let origin = args.manifest.display();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("{origin}: read failed"))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| anyhow!("{origin}:{}: bad manifest record: {e}", i + 1))?;
        planner.push(&record).with_context(|| format!("{origin}:{}", i + 1))?;
    }
    let plan = planner.finish();
    if plan.image_shortfall > 0 {
        log::warn!("manifest ran out of images: {} padding slots unfilled", plan.image_shortfall);
    }
    crate::emit(args.out.as_deref(), &to_json_pretty(&plan))
}
