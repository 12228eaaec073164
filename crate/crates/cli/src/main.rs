//! `tinyfusion` — compute statistic-based FPN fusion factors from detection
//! annotations, run the analytic verification suite, and emit sweep configs.
//!
//! Exit codes are a stable contract:
//!   0  success
//!   1  verification check failed
//!   2  I/O failure
//!   3  annotation parse/validation failure
//!   4  invalid configuration or sweep range

use std::fs;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tinyfusion_core::dataset::Severity;
use tinyfusion_core::report::{DatasetSummary, StatsReport};
use tinyfusion_core::verify::run_verification;
use tinyfusion_core::{
    assign_dataset, compute_factors, filter_images, parse_annotations, sweep_plan, validate,
    AlphaFile, AnchorConfig, SweepPlan,
};

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_CONFIG: u8 = 4;

#[derive(Parser)]
#[command(name = "tinyfusion", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute per-level object counts and fusion factors from an annotation file.
    Stats {
        /// Annotation JSON file.
        #[arg(long)]
        annotations: PathBuf,
        /// Anchor config (JSON or TOML); defaults apply for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Keep only images with strictly fewer objects than this.
        #[arg(long, default_value_t = 200)]
        max_objects: usize,
        /// Count zero-overlap ground truths at their argmax level.
        #[arg(long, default_value_t = false)]
        include_zero_overlap: bool,
        /// Where to write the stats report JSON; `alpha.json` lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the analytic self-checks of the micro pyramid.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the verification report JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one run config per fusion-factor value in [min, max].
    Sweep {
        #[arg(long)]
        min: f64,
        #[arg(long)]
        max: f64,
        #[arg(long)]
        step: f64,
        /// JSON object to copy into each generated config.
        #[arg(long)]
        base_config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Stats {
            annotations,
            config,
            max_objects,
            include_zero_overlap,
            out,
        } => cmd_stats(&annotations, config.as_deref(), max_objects, include_zero_overlap, &out),
        Command::Verify { seed, out } => cmd_verify(seed, &out),
        Command::Sweep {
            min,
            max,
            step,
            base_config,
            out_dir,
        } => cmd_sweep(min, max, step, &base_config, &out_dir),
    }
}

fn fail(code: u8, message: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::from(code)
}

fn load_config(path: Option<&Path>) -> Result<AnchorConfig, ExitCode> {
    let Some(path) = path else {
        return Ok(AnchorConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| fail(EXIT_IO, format!("reading {}: {e}", path.display())))?;
    let is_toml = path
        .extension()
        .is_some_and(|ext| ext.eq_ignore_ascii_case("toml"));
    let parsed = if is_toml {
        AnchorConfig::from_toml(&text)
    } else {
        AnchorConfig::from_json(&text)
    };
    parsed.map_err(|e| fail(EXIT_CONFIG, e))
}

fn cmd_stats(
    annotations: &Path,
    config: Option<&Path>,
    max_objects: usize,
    include_zero_overlap: bool,
    out: &Path,
) -> ExitCode {
    let cfg = match load_config(config) {
        Ok(cfg) => cfg,
        Err(code) => return code,
    };
    let Some(max_objects_nz) = NonZeroUsize::new(max_objects) else {
        return fail(EXIT_CONFIG, "--max-objects must be at least 1");
    };
    if cfg.levels.len() != 5 {
        return fail(
            EXIT_CONFIG,
            format!(
                "fusion factors need the five-level pyramid, config has {} levels",
                cfg.levels.len()
            ),
        );
    }

    let raw = match fs::read(annotations) {
        Ok(raw) => raw,
        Err(e) => return fail(EXIT_IO, format!("reading {}: {e}", annotations.display())),
    };
    let dataset = match parse_annotations(&raw) {
        Ok(d) => d,
        Err(e) => return fail(EXIT_DATA, e),
    };

    let report = validate(&dataset);
    for finding in &report.findings {
        match finding.severity {
            Severity::Hard => eprintln!("hard: {}", finding.message),
            Severity::Soft => eprintln!("soft: {}", finding.message),
        }
    }
    if !report.is_valid() {
        return fail(
            EXIT_DATA,
            format!("{} hard validation finding(s)", report.hard_count()),
        );
    }

    let filtered = filter_images(&dataset, max_objects_nz);
    let assignment = match assign_dataset(&filtered, &cfg, include_zero_overlap) {
        Ok(a) => a,
        Err(e) => return fail(EXIT_DATA, e),
    };
    let factors = compute_factors(&assignment.counts);

    if assignment.ground_truths == 0 {
        eprintln!("warning: no ground truths after filtering; all factors are fallbacks");
    }

    let summary = DatasetSummary {
        images: filtered.images.len(),
        images_excluded: dataset.images.len() - filtered.images.len(),
        annotations: filtered.annotations.len(),
        ignored_annotations: filtered.annotations.iter().filter(|a| a.ignore).count(),
        ground_truths: assignment.ground_truths,
        zero_overlap: assignment.zero_overlap,
        zero_overlap_included: include_zero_overlap,
    };
    let stats = StatsReport::new(
        env!("CARGO_PKG_VERSION"),
        chrono::Utc::now().to_rfc3339(),
        max_objects,
        summary,
        cfg,
        &assignment,
        factors,
    );

    if let Err(e) = fs::write(out, stats.to_json_pretty()) {
        return fail(EXIT_IO, format!("writing {}: {e}", out.display()));
    }
    let alpha_path = out.with_file_name("alpha.json");
    let alpha = AlphaFile::new(&factors, &assignment.counts);
    let alpha_json = serde_json::to_string_pretty(&alpha).expect("alpha serialization") + "\n";
    if let Err(e) = fs::write(&alpha_path, alpha_json) {
        return fail(EXIT_IO, format!("writing {}: {e}", alpha_path.display()));
    }

    println!(
        "dataset: {} image(s), {} ground truth(s), {} image(s) excluded by max_objects={}",
        stats.dataset.images, stats.dataset.ground_truths, stats.dataset.images_excluded, max_objects
    );
    let counts = stats.level_counts.as_slice();
    println!(
        "level counts: P2={} P3={} P4={} P5={} P6={}",
        counts[0], counts[1], counts[2], counts[3], counts[4]
    );
    if stats.dataset.zero_overlap > 0 && !include_zero_overlap {
        println!(
            "zero-overlap ground truths excluded: {}",
            stats.dataset.zero_overlap
        );
    }
    println!(
        "fusion factors: a2^3={:.3}{} a3^4={:.3}{} a4^5={:.3}{}",
        factors.alpha[0],
        fallback_tag(factors.fallback[0]),
        factors.alpha[1],
        fallback_tag(factors.fallback[1]),
        factors.alpha[2],
        fallback_tag(factors.fallback[2]),
    );
    println!("report: {}", out.display());
    println!("alpha file: {}", alpha_path.display());
    ExitCode::SUCCESS
}

fn fallback_tag(fallback: bool) -> &'static str {
    if fallback {
        " (fallback)"
    } else {
        ""
    }
}

fn cmd_verify(seed: u64, out: &Path) -> ExitCode {
    let report = run_verification(seed);
    let json = serde_json::to_string_pretty(&report).expect("report serialization") + "\n";
    if let Err(e) = fs::write(out, json) {
        return fail(EXIT_IO, format!("writing {}: {e}", out.display()));
    }
    for check in &report.checks {
        println!(
            "{} {} (max_error={:.3e}, tolerance={:.3e})",
            if check.passed { "pass" } else { "FAIL" },
            check.name,
            check.max_error,
            check.tolerance
        );
    }
    if report.passed {
        println!("all checks passed (seed {seed})");
        ExitCode::SUCCESS
    } else {
        eprintln!("verification failed (seed {seed})");
        ExitCode::from(EXIT_CHECK_FAILED)
    }
}

fn cmd_sweep(min: f64, max: f64, step: f64, base_config: &Path, out_dir: &Path) -> ExitCode {
    let plan = match sweep_plan(min, max, step) {
        Ok(p) => p,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let base_text = match fs::read_to_string(base_config) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_IO, format!("reading {}: {e}", base_config.display())),
    };
    let base: serde_json::Value = match serde_json::from_str(&base_text) {
        Ok(v) => v,
        Err(e) => return fail(EXIT_CONFIG, format!("base config: {e}")),
    };
    let serde_json::Value::Object(base) = base else {
        return fail(EXIT_CONFIG, "base config must be a JSON object");
    };

    if let Err(e) = fs::create_dir_all(out_dir) {
        return fail(EXIT_IO, format!("creating {}: {e}", out_dir.display()));
    }
    for &value in plan.values() {
        let mut config = base.clone();
        config.insert(
            "alpha".to_string(),
            serde_json::json!([value, value, value]),
        );
        let path = out_dir.join(format!("alpha_{}.json", SweepPlan::label(value)));
        let text = serde_json::to_string_pretty(&serde_json::Value::Object(config))
            .expect("config serialization")
            + "\n";
        if let Err(e) = fs::write(&path, text) {
            return fail(EXIT_IO, format!("writing {}: {e}", path.display()));
        }
    }
    println!(
        "wrote {} config(s) to {} (alpha {} .. {}, step {})",
        plan.len(),
        out_dir.display(),
        min,
        max,
        step
    );
    ExitCode::SUCCESS
}
