//! Experiment harness behind the `abft` binary.
//!
//! Each command takes a fully resolved [`RunConfig`] and returns an
//! [`Outcome`] carrying the exit code and the text it produced; the binary
//! only parses flags, prints and exits. Keeping it that way lets the
//! integration tests drive the exact same code paths.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use abft_core::grid::KillerMode;
use abft_core::perf::{self, PerfParams, TABLE_NLOC, TABLE_PROCS};
use abft_core::summa::RunManifest;
use abft_core::{distribute, ft_pdgemm, make_scheme, residual_check, spawn_grid, DenseMatrix, FaultPlan, FtError};
use anyhow::{Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Ok = 0,
    Usage = 2,
    CheckFailed = 3,
    Unrecoverable = 4,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        self as i32
    }

    /// The more severe of two outcomes.
    fn worst(self, other: ExitKind) -> ExitKind {
        if other.code() > self.code() {
            other
        } else {
            self
        }
    }
}

/// A configuration mistake; reported with [`ExitKind::Usage`].
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

/// Settings that may come from a TOML config file. Command-line flags
/// override every field.
#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub n: Option<usize>,
    pub nloc: Option<usize>,
    pub q: Option<usize>,
    pub nb: Option<usize>,
    pub seed: Option<u64>,
    pub fault: Option<String>,
    pub iterations: Option<usize>,
    pub params: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }

    /// Field-wise `self` over `fallback`.
    pub fn or(self, fallback: FileConfig) -> FileConfig {
        FileConfig {
            n: self.n.or(fallback.n),
            nloc: self.nloc.or(fallback.nloc),
            q: self.q.or(fallback.q),
            nb: self.nb.or(fallback.nb),
            seed: self.seed.or(fallback.seed),
            fault: self.fault.or(fallback.fault),
            iterations: self.iterations.or(fallback.iterations),
            params: self.params.or(fallback.params),
            out: self.out.or(fallback.out),
        }
    }
}

pub const DEFAULT_NB: usize = 64;
pub const DEFAULT_ITERATIONS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub n: usize,
    pub q: usize,
    pub nb: usize,
    pub seed: u64,
    pub fault: FaultPlan,
    pub iterations: usize,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Validates merged settings. Exactly one of `n` and `nloc` must be set;
    /// `nloc` means `n = (q-1) * nloc`.
    pub fn resolve(c: &FileConfig, default_fault: FaultPlan) -> Result<Self> {
        let q = match c.q {
            Some(q) if q >= 2 => q,
            Some(q) => return usage(format!("--q must be at least 2 (one checksum row and column), got {q}")),
            None => return usage("--q is required"),
        };
        let n = match (c.n, c.nloc) {
            (Some(n), None) => n,
            (None, Some(nloc)) => (q - 1) * nloc,
            (Some(_), Some(_)) => return usage("give exactly one of --n and --nloc"),
            (None, None) => return usage("one of --n or --nloc is required"),
        };
        if n == 0 {
            return usage("matrix size must be positive");
        }
        let nb = c.nb.unwrap_or(DEFAULT_NB);
        if nb == 0 {
            return usage("--nb must be at least 1");
        }
        let iterations = c.iterations.unwrap_or(DEFAULT_ITERATIONS);
        if iterations == 0 {
            return usage("--iterations must be at least 1");
        }
        let fault = match &c.fault {
            Some(spec) => spec
                .parse::<FaultPlan>()
                .map_err(|e| UsageError(format!("--fault: {e}")))?,
            None => default_fault,
        };
        if let Some(bad) = fault.injections.iter().find(|i| i.victim.row >= q || i.victim.col >= q) {
            return usage(format!("--fault: rank {} is outside a {q}x{q} grid", bad.victim));
        }
        Ok(RunConfig {
            n,
            q,
            nb,
            seed: c.seed.unwrap_or(0),
            fault,
            iterations,
            out: c.out.clone(),
        })
    }
}

/// Result of a command: what to print, and how to exit.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub exit: ExitKind,
    pub stdout: String,
}

/// One multiply with verification.
#[derive(Debug, Clone)]
pub struct CaseResult {
    pub manifest: RunManifest,
    pub event_log: String,
    pub exit: ExitKind,
}

/// Operands and the residual probe vector are all drawn from one stream
/// seeded with `seed`, in the order A, B, x.
pub fn operands(n: usize, seed: u64) -> (DenseMatrix, DenseMatrix, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DenseMatrix::random(n, n, &mut rng);
    let b = DenseMatrix::random(n, n, &mut rng);
    let x = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (a, b, x)
}

/// Distributes fresh operands, multiplies under `plan` and checks the
/// result by residual and by checksum consistency.
pub fn run_case(n: usize, q: usize, nb: usize, seed: u64, plan: FaultPlan) -> Result<CaseResult> {
    let (a, b, x) = operands(n, seed);
    let fault = plan.to_string();
    let mut world = spawn_grid(q, plan, seed)?;
    let scheme = make_scheme(1, q - 1, seed)?;
    let fa = distribute(&a, &mut world, nb, &scheme, &scheme, "A")?;
    let fb = distribute(&b, &mut world, nb, &scheme, &scheme, "B")?;
    let mut manifest = RunManifest {
        n,
        nb,
        q,
        seed,
        fault,
        status: String::new(),
        steps: n.div_ceil(nb),
        residual: None,
        consistent: None,
        kills: 0,
        events: 0,
        messages: 0,
        recoveries: Vec::new(),
        error: None,
    };
    let result = ft_pdgemm(&fa, &fb, &mut world);
    manifest.kills = world.kills_fired();
    manifest.events = world.clock();
    manifest.messages = world.stats().sent;
    let exit = match result {
        Ok(out) => {
            manifest.recoveries = out.recoveries;
            let c = out.c.snapshot_global(&world)?;
            let report = residual_check(&a, &b, &c, &x, f64::EPSILON)?;
            let consistent = out.c.check_consistency(&world)?;
            manifest.residual = Some(report);
            manifest.consistent = Some(consistent);
            if report.passed && consistent {
                manifest.status = "ok".into();
                ExitKind::Ok
            } else {
                manifest.status = "check_failed".into();
                ExitKind::CheckFailed
            }
        }
        Err(FtError::Unrecoverable {
            failed,
            step,
            reason,
            recoveries,
        }) => {
            manifest.status = "degraded".into();
            manifest.recoveries = recoveries;
            let failed: Vec<String> = failed.iter().map(|r| format!("({r})")).collect();
            manifest.error = Some(format!(
                "unrecoverable at step {step}: {reason}; failed {}",
                failed.join(" ")
            ));
            ExitKind::Unrecoverable
        }
        Err(FtError::Inconsistent { what, step }) => {
            manifest.status = "check_failed".into();
            manifest.consistent = Some(false);
            manifest.error = Some(format!("{what} inconsistent after recovery at step {step}"));
            ExitKind::CheckFailed
        }
        Err(e) => return Err(e.into()),
    };
    Ok(CaseResult {
        manifest,
        event_log: world.event_log_text(),
        exit,
    })
}

fn write_file(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

/// `run`: one multiply. Writes `manifest.txt` and `events.log` under the
/// output directory, if one is given.
pub fn cmd_run(cfg: &RunConfig) -> Result<Outcome> {
    let case = run_case(cfg.n, cfg.q, cfg.nb, cfg.seed, cfg.fault.clone())?;
    let text = case.manifest.to_text();
    if let Some(dir) = &cfg.out {
        write_file(dir, "manifest.txt", &text)?;
        write_file(dir, "events.log", &case.event_log)?;
    }
    Ok(Outcome {
        exit: case.exit,
        stdout: text,
    })
}

/// Counts of a stress soak.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StressSummary {
    pub iterations: usize,
    pub passed: usize,
    pub recovered: usize,
    pub kills: usize,
    pub residual_failures: usize,
    pub unrecoverable: usize,
}

impl fmt::Display for StressSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iterations = {}\npassed = {}\nrecovered = {}\nkills = {}\nresidual_failures = {}\nunrecoverable = {}\n",
            self.iterations, self.passed, self.recovered, self.kills, self.residual_failures, self.unrecoverable
        )
    }
}

/// The fault plan of stress iteration `i`: a random killer is re-seeded per
/// iteration; scripted plans repeat unchanged.
pub fn iteration_plan(plan: &FaultPlan, i: usize) -> FaultPlan {
    match plan.mode {
        KillerMode::Random { rate, seed } => FaultPlan {
            injections: plan.injections.clone(),
            mode: KillerMode::Random {
                rate,
                seed: seed.wrapping_add(i as u64),
            },
        },
        KillerMode::Scripted => plan.clone(),
    }
}

/// `stress`: `iterations` multiplies with fresh operands, each under the
/// configured fault plan. Stops at the first residual failure and dumps
/// that run's manifest.
pub fn cmd_stress(cfg: &RunConfig) -> Result<(Outcome, StressSummary)> {
    let mut sum = StressSummary::default();
    let mut exit = ExitKind::Ok;
    let mut dump = String::new();
    for i in 0..cfg.iterations {
        let seed = cfg.seed.wrapping_add(i as u64);
        let case = run_case(cfg.n, cfg.q, cfg.nb, seed, iteration_plan(&cfg.fault, i))?;
        sum.iterations += 1;
        sum.kills += case.manifest.kills;
        if !case.manifest.recoveries.is_empty() {
            sum.recovered += 1;
        }
        match case.exit {
            ExitKind::Ok => sum.passed += 1,
            ExitKind::Unrecoverable => sum.unrecoverable += 1,
            _ => sum.residual_failures += 1,
        }
        exit = exit.worst(case.exit);
        if case.exit != ExitKind::Ok {
            if let Some(dir) = &cfg.out {
                write_file(dir, &format!("failed_{i:04}.manifest.txt"), &case.manifest.to_text())?;
            }
            if dump.is_empty() {
                dump = case.manifest.to_text();
            }
        }
        if case.exit == ExitKind::CheckFailed {
            break;
        }
    }
    let mut stdout = sum.to_string();
    if !dump.is_empty() {
        stdout.push_str("\n# first failing run\n");
        stdout.push_str(&dump);
    }
    if let Some(dir) = &cfg.out {
        write_file(dir, "stress_summary.txt", &sum.to_string())?;
    }
    Ok((Outcome { exit, stdout }, sum))
}

/// Loads a params file; without one, the default machine constants with
/// recovery constants fitted to the reference 1-failure row.
pub fn load_params(path: Option<&Path>) -> Result<PerfParams> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading params {}", p.display()))?;
            text.parse::<PerfParams>()
                .map_err(|e| UsageError(format!("params {}: {e}", p.display())).into())
        }
        None => Ok(perf::reference_params()?),
    }
}

/// Model tables as `(file name, csv)` pairs.
pub fn model_tables(params: &PerfParams, nloc: usize) -> Result<Vec<(String, String)>> {
    let weak = perf::weak_scaling_table(nloc, &TABLE_PROCS, params)?;
    let family = perf::weak_scaling_family(&[1000, 2000, 3000, 4000], &TABLE_PROCS, params)?;
    let qs: Vec<usize> = (4..=22).collect();
    let strong = perf::strong_scaling(21000, &qs, params)?;
    Ok(vec![
        ("weak_scaling.csv".into(), perf::to_csv(&weak)),
        ("weak_scaling_family.csv".into(), perf::to_csv(&family)),
        ("strong_scaling.csv".into(), perf::to_csv(&strong)),
    ])
}

/// `model`: prints the weak-scaling table and writes all tables to the
/// output directory, if one is given.
pub fn cmd_model(params: &PerfParams, nloc: Option<usize>, out: Option<&Path>) -> Result<Outcome> {
    let tables = model_tables(params, nloc.unwrap_or(TABLE_NLOC))?;
    if let Some(dir) = out {
        for (name, csv) in &tables {
            write_file(dir, name, csv)?;
        }
        write_file(dir, "params.txt", &params.to_text())?;
    }
    Ok(Outcome {
        exit: ExitKind::Ok,
        stdout: tables[0].1.clone(),
    })
}

fn manifest_field<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(" = ")))
}

/// `verify`: re-executes the run described by a manifest and checks that
/// it reproduces the manifest byte for byte and that it passed.
pub fn cmd_verify(manifest: &Path) -> Result<Outcome> {
    let text = fs::read_to_string(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let field = |k: &str| -> Result<&str> {
        manifest_field(&text, k).ok_or_else(|| UsageError(format!("manifest lacks {k:?}")).into())
    };
    let num = |k: &str| -> Result<u64> {
        field(k)?
            .parse::<u64>()
            .map_err(|e| UsageError(format!("manifest field {k}: {e}")).into())
    };
    let (n, nb, q, seed) = (
        num("n")? as usize,
        num("nb")? as usize,
        num("q")? as usize,
        num("seed")?,
    );
    if q < 2 || nb == 0 || n == 0 {
        return usage("manifest describes an invalid run");
    }
    let plan: FaultPlan = field("fault")?
        .parse()
        .map_err(|e| UsageError(format!("manifest fault: {e}")))?;
    let case = run_case(n, q, nb, seed, plan)?;
    let again = case.manifest.to_text();
    let mut stdout = String::new();
    let exit = if again != text {
        stdout.push_str("reproduced = false\n");
        for (old, new) in text.lines().zip(again.lines()).filter(|(a, b)| a != b) {
            stdout.push_str(&format!("- {old}\n+ {new}\n"));
        }
        ExitKind::CheckFailed
    } else {
        stdout.push_str("reproduced = true\n");
        case.exit
    };
    stdout.push_str(&format!("status = {}\n", case.manifest.status));
    Ok(Outcome { exit, stdout })
}

/// Maps an error to its exit code.
pub fn exit_for(err: &anyhow::Error) -> ExitKind {
    if err.downcast_ref::<UsageError>().is_some() {
        ExitKind::Usage
    } else {
        ExitKind::CheckFailed
    }
}

/// The random killer at one expected kill per run, seeded from `seed`.
pub fn default_stress_fault(seed: u64) -> FaultPlan {
    FaultPlan::random(1.0, seed)
}
