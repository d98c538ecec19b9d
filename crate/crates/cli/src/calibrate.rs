use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use ditforge_core::cost_model::{calibrate, Calibration, FlopsTable};

use crate::Format;

#[derive(Args)]
pub struct CalibrateArgs {
    /// FLOPs table: JSON array of {frames, height, width, tflops}. Defaults to the bundled table.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn render_text(cal: &Calibration) -> String {
    let c = &cal.coefficients;
    let mut s = String::new();
    let _ = writeln!(s, "k={}", c.latent_multiplier_k);
    let _ = writeln!(s, "F = c + a*x + b*x^2, x = (H*W/256^2) * latent_frames");
    let _ = writeln!(s, "c={:.6} a={:.6} b={:.6}", c.constant_c, c.linear_a, c.quad_b);
    let _ = writeln!(s, "{:>6} {:>6} {:>6} {:>10} {:>10} {:>9}", "frames", "height", "width", "measured", "predicted", "rel_err");
    for r in &cal.rows {
        let _ = writeln!(
            s,
            "{:>6} {:>6} {:>6} {:>10.2} {:>10.2} {:>8.4}%",
            r.frames,
            r.height,
            r.width,
            r.measured,
            r.predicted,
            r.rel_error * 100.0
        );
    }
    let _ = writeln!(s, "max residual={:.4}%", cal.max_rel_residual * 100.0);
    s
}

pub fn run(args: CalibrateArgs) -> anyhow::Result<()> {
    let table = match &args.table {
        Some(p) => ditforge_core::from_json_file::<FlopsTable>(p)?,
        None => FlopsTable::bundled(),
    };
    let cal = calibrate(&table).context("calibration failed")?;
    let text = match args.format {
        Format::Json => ditforge_core::to_json_pretty(&cal),
        Format::Text => render_text(&cal),
    };
    crate::emit(args.out.as_deref(), &text)
}
