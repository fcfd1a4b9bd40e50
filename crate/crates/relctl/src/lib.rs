//! Command implementations behind the `relctl` binary.
//!
//! Every command returns a [`RunReport`]. The binary prints it either as
//! aligned text or as JSON and derives the exit code from it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relattn::attn::{masked_self_attention_blockwise, masked_self_attention_naive, AttnConfig};
use relattn::block::BlockDims;
use relattn::checks::{rel_error, run_layout_checks, Bound, CheckResult};
use relattn::corpus::builtin_corpus;
use relattn::export::{bits_csv, bits_pgm, blocks_csv, fmt_e6, levels_csv, levels_pgm, positions_csv};
use relattn::layout::{parse_spec, LayoutSpec};
use relattn::masks::{build_csam, build_mcam};
use relattn::r2pe::assign_positions;
use relattn::synth::seeded_forward;
use relattn::tensor::Tensor2;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Spec {
        path: PathBuf,
        source: relattn::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] relattn::Error),
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, Serialize)]
pub struct CheckLine {
    /// Layout the check ran on.
    pub layout: String,
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub bound: Bound,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl CheckLine {
    fn from_result(layout: &str, r: CheckResult) -> Self {
        Self {
            layout: layout.to_owned(),
            name: r.name,
            passed: r.passed,
            measured: r.measured,
            bound: r.bound,
            detail: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TimingStats {
    pub mean_s: f64,
    pub min_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchTiming {
    pub reps: usize,
    pub naive: TimingStats,
    pub blockwise: TimingStats,
    /// Blockwise mean over naive mean; below 1 means the block kernel is faster.
    pub ratio: f64,
}

/// A named scalar in the report. `bits` carries the exact value when it matters.
#[derive(Debug, Clone, Serialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bits: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: String,
    pub wall_time_s: f64,
    pub checks: Vec<CheckLine>,
    pub metrics: Vec<Metric>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<BenchTiming>,
    pub artifacts: Vec<String>,
}

impl RunReport {
    fn new(command: &str) -> Self {
        Self {
            command: command.to_owned(),
            wall_time_s: 0.0,
            checks: Vec::new(),
            metrics: Vec::new(),
            timing: None,
            artifacts: Vec::new(),
        }
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckLine> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn metric(&mut self, name: &str, value: f64) {
        self.metrics.push(Metric {
            name: name.to_owned(),
            value,
            bits: None,
        });
    }

    /// Text rendering without wall time, so identical runs print identical bytes.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "command: {}", self.command).unwrap();
        for c in &self.checks {
            let bound = match c.bound {
                Bound::AtMost(t) => format!("<= {}", fmt_e6(t)),
                Bound::Above(t) => format!(">  {}", fmt_e6(t)),
            };
            write!(
                out,
                "{} {} {} measured {} bound {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.layout,
                c.name,
                fmt_e6(c.measured),
                bound
            )
            .unwrap();
            if let Some(d) = &c.detail {
                write!(out, " ({d})").unwrap();
            }
            out.push('\n');
        }
        for m in &self.metrics {
            write!(out, "{} = {}", m.name, fmt_e6(m.value)).unwrap();
            if let Some(b) = &m.bits {
                write!(out, " [bits {b}]").unwrap();
            }
            out.push('\n');
        }
        if self.command == "bench" {
            match &self.timing {
                None => out.push_str("timing: none\n"),
                Some(t) => {
                    writeln!(out, "timing: {} reps", t.reps).unwrap();
                    for (name, s) in [("naive", t.naive), ("blockwise", t.blockwise)] {
                        writeln!(out, "  {name}: mean {} s, min {} s", fmt_e6(s.mean_s), fmt_e6(s.min_s))
                            .unwrap();
                    }
                    writeln!(out, "  ratio blockwise/naive: {:.3}", t.ratio).unwrap();
                }
            }
        }
        for a in &self.artifacts {
            writeln!(out, "wrote {a}").unwrap();
        }
        let failed = self.failures().count();
        writeln!(out, "checks: {} passed, {} failed", self.checks.len() - failed, failed).unwrap();
        out
    }
}

pub fn load_spec(path: &Path) -> CliResult<LayoutSpec> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_spec(&text).map_err(|source| CliError::Spec {
        path: path.to_owned(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

fn timed(mut report: RunReport, start: Instant) -> RunReport {
    report.wall_time_s = start.elapsed().as_secs_f64();
    report
}

pub fn cmd_masks(spec_path: &Path, out_dir: &Path) -> CliResult<RunReport> {
    let start = Instant::now();
    let spec = load_spec(spec_path)?;
    fs::create_dir_all(out_dir).map_err(|source| CliError::Io {
        path: out_dir.to_owned(),
        source,
    })?;
    let csam = build_csam(&spec);
    let mcam = build_mcam(&spec);
    let positions = assign_positions(&spec);
    let files: [(&str, Vec<u8>); 6] = [
        ("csam.csv", bits_csv(csam.bits()).into_bytes()),
        ("csam.pgm", bits_pgm(csam.bits())),
        ("mcam.csv", levels_csv(&mcam).into_bytes()),
        ("mcam.pgm", levels_pgm(&mcam)),
        ("positions.csv", positions_csv(&positions).into_bytes()),
        ("blocks.csv", blocks_csv(csam.blocks()).into_bytes()),
    ];
    let mut report = RunReport::new("masks");
    for (name, bytes) in files {
        let path = out_dir.join(name);
        write_file(&path, &bytes)?;
        report.artifacts.push(path.display().to_string());
    }
    report.metric("tokens", spec.n_tokens() as f64);
    report.metric("text_tokens", spec.text_len() as f64);
    report.metric("csam_blocks", csam.blocks().len() as f64);
    report.metric("csam_density", csam.bits().count_ones() as f64 / (spec.n_tokens() as f64).powi(2));
    Ok(timed(report, start))
}

/// Seed for the numeric checks; fixed so reports are reproducible.
pub const CHECK_SEED: u64 = 0x00c0_ffee;

pub enum CheckTarget<'a> {
    Corpus,
    Spec(&'a Path),
}

pub fn cmd_check(target: CheckTarget<'_>) -> CliResult<RunReport> {
    let start = Instant::now();
    let mut report = RunReport::new("check");
    let layouts: Vec<(String, LayoutSpec)> = match target {
        CheckTarget::Corpus => builtin_corpus(),
        CheckTarget::Spec(path) => match load_spec(path) {
            Ok(spec) => vec![(path.display().to_string(), spec)],
            Err(CliError::Spec { path, source }) => {
                // A rejected document is reported as a failed check, not a crash.
                let name = match &source {
                    relattn::Error::Invariant { path, .. } => format!("layout_invariant:{path}"),
                    relattn::Error::Schema { path, .. } => format!("layout_schema:{path}"),
                    _ => "layout_parse".to_owned(),
                };
                report.checks.push(CheckLine {
                    layout: path.display().to_string(),
                    name,
                    passed: false,
                    measured: 1.0,
                    bound: Bound::AtMost(0.0),
                    detail: Some(source.to_string()),
                });
                return Ok(timed(report, start));
            }
            Err(e) => return Err(e),
        },
    };
    for (i, (name, spec)) in layouts.iter().enumerate() {
        for r in run_layout_checks(spec, CHECK_SEED.wrapping_add(i as u64))? {
            report.checks.push(CheckLine::from_result(name, r));
        }
    }
    report.metric("layouts", layouts.len() as f64);
    Ok(timed(report, start))
}

fn time_reps(reps: usize, mut f: impl FnMut() -> CliResult<()>) -> CliResult<TimingStats> {
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        f()?;
        times.push(t0.elapsed().as_secs_f64());
    }
    Ok(TimingStats {
        mean_s: times.iter().sum::<f64>() / reps as f64,
        min_s: times.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

pub fn cmd_bench(spec_path: &Path, head_dim: usize, reps: usize) -> CliResult<RunReport> {
    let start = Instant::now();
    let spec = load_spec(spec_path)?;
    if head_dim == 0 {
        return Err(relattn::Error::Param("head dim must be at least 1".into()).into());
    }
    let csam = build_csam(&spec);
    let n = spec.n_tokens();
    let mut rng = ChaCha8Rng::seed_from_u64(CHECK_SEED);
    let q = Tensor2::randn(n, head_dim, 1.0, &mut rng);
    let k = Tensor2::randn(n, head_dim, 1.0, &mut rng);
    let v = Tensor2::randn(n, head_dim, 1.0, &mut rng);

    let mut report = RunReport::new("bench");
    let naive = masked_self_attention_naive(&q, &k, &v, csam.bits())?;
    let blockwise = masked_self_attention_blockwise(&q, &k, &v, csam.blocks())?;
    let eq = CheckResult::new(
        "bench_equivalence",
        rel_error(blockwise.data(), naive.data()),
        Bound::AtMost(1e-5),
    );
    report.checks.push(CheckLine::from_result(&spec_path.display().to_string(), eq));
    report.metric("tokens", n as f64);
    report.metric("csam_blocks", csam.blocks().len() as f64);
    report.metric("csam_density", csam.bits().count_ones() as f64 / (n as f64).powi(2));
    if !report.all_passed() || reps == 0 {
        return Ok(timed(report, start));
    }
    let naive_t = time_reps(reps, || {
        std::hint::black_box(masked_self_attention_naive(&q, &k, &v, csam.bits())?);
        Ok(())
    })?;
    let block_t = time_reps(reps, || {
        std::hint::black_box(masked_self_attention_blockwise(&q, &k, &v, csam.blocks())?);
        Ok(())
    })?;
    report.timing = Some(BenchTiming {
        reps,
        naive: naive_t,
        blockwise: block_t,
        ratio: block_t.mean_s / naive_t.mean_s,
    });
    Ok(timed(report, start))
}

pub fn cmd_forward(spec_path: &Path, seed: u64, r: f32, d: usize) -> CliResult<RunReport> {
    let start = Instant::now();
    let spec = load_spec(spec_path)?;
    let dims = BlockDims::default();
    let cfg = AttnConfig::new(dims.head_dim).with_r(r).with_d(d);
    let summary = seeded_forward(&spec, dims, seed, &cfg)?;
    let name = spec_path.display().to_string();
    let mut report = RunReport::new("forward");
    report.checks.push(CheckLine::from_result(
        &name,
        CheckResult::new("condition_isolation", summary.condition_residual, Bound::AtMost(1e-6)),
    ));
    if spec.n_conditions() > 0 {
        report.checks.push(CheckLine::from_result(
            &name,
            CheckResult::new("video_response", summary.video_response, Bound::Above(1e-3)),
        ));
    }
    report.metric("seed", seed as f64);
    report.metric("r", r as f64);
    report.metric("d", d as f64);
    report.metric("t", summary.t as f64);
    report.metrics.push(Metric {
        name: "loss".into(),
        value: summary.loss,
        bits: Some(format!("{:016x}", summary.loss.to_bits())),
    });
    report.metric("condition_residual", summary.condition_residual);
    report.metric("video_response", summary.video_response);
    Ok(timed(report, start))
}

/// Applies `RELATTN_THREADS` to the global kernel thread pool.
pub fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("RELATTN_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("RELATTN_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}
