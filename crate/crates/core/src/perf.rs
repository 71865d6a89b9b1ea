//! Analytic timing models.
//!
//! Machine model: `gamma` seconds per flop, `beta` seconds per 8-byte word,
//! `alpha` seconds per message (zero by default; the models are
//! bandwidth-bound). A `q x q` fault tolerant grid spends `(q-1)^2`
//! processors on data and `2q-1` on checksums; rates are always reported
//! as useful flops `2n^3` divided over *all* processors.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Processor counts of the weak-scaling tables.
pub const TABLE_PROCS: [usize; 6] = [64, 81, 100, 121, 256, 484];
/// Local matrix size of the weak-scaling tables.
pub const TABLE_NLOC: usize = 3000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerfError {
    #[error("processor count {0} is not a perfect square")]
    NonSquare(usize),
    #[error("invalid grid side {0} (need q >= 2)")]
    InvalidGrid(usize),
    #[error("matrix size {n} is smaller than the grid side for {p} processors")]
    TooSmall { n: usize, p: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("recovery constants are unfitted: missing {0}")]
    Unfitted(String),
    #[error("underdetermined fit: {0}")]
    Underdetermined(String),
    #[error("params parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerfParams {
    pub gamma: f64,
    pub beta: f64,
    pub alpha: f64,
    pub t_restart: Option<f64>,
    pub t_reduce_per_word: Option<f64>,
    /// Algorithmic block size; sets the length of one detection step.
    pub nb: usize,
}

impl Default for PerfParams {
    /// 3.75 GFLOPS/s per processor and 52.5 MB/s per link.
    fn default() -> Self {
        PerfParams {
            gamma: 1.0 / 3.75e9,
            beta: 8.0 / 52.5e6,
            alpha: 0.0,
            t_restart: None,
            t_reduce_per_word: None,
            nb: 64,
        }
    }
}

impl PerfParams {
    pub fn with_recovery(mut self, t_restart: f64, t_reduce_per_word: f64) -> Self {
        self.t_restart = Some(t_restart);
        self.t_reduce_per_word = Some(t_reduce_per_word);
        self
    }

    pub fn validate(&self) -> Result<(), PerfError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.gamma) && self.gamma > 0.0) {
            return Err(PerfError::InvalidParams(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if !(ok(self.beta) && self.beta > 0.0) {
            return Err(PerfError::InvalidParams(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !ok(self.alpha) {
            return Err(PerfError::InvalidParams(format!(
                "alpha must be nonnegative, got {}",
                self.alpha
            )));
        }
        for (name, v) in [
            ("t_restart", self.t_restart),
            ("t_reduce_per_word", self.t_reduce_per_word),
        ] {
            if let Some(v) = v {
                if !ok(v) {
                    return Err(PerfError::InvalidParams(format!("{name} must be nonnegative, got {v}")));
                }
            }
        }
        if self.nb == 0 {
            return Err(PerfError::InvalidParams("nb must be at least 1".into()));
        }
        Ok(())
    }

    /// `key = value` lines, one per field; unfitted constants are omitted.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "gamma = {:e}\nbeta = {:e}\nalpha = {:e}\nnb = {}\n",
            self.gamma, self.beta, self.alpha, self.nb
        );
        if let Some(t) = self.t_restart {
            s.push_str(&format!("t_restart = {t:e}\n"));
        }
        if let Some(t) = self.t_reduce_per_word {
            s.push_str(&format!("t_reduce_per_word = {t:e}\n"));
        }
        s
    }
}

impl FromStr for PerfParams {
    type Err = PerfError;

    /// Parses `key = value` lines; `#` starts a comment and missing keys
    /// keep their defaults. Accepts the flat subset of TOML.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut p = PerfParams::default();
        for (lineno, raw) in s.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PerfError::Parse(format!("line {}: expected key = value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let num = || {
                v.parse::<f64>()
                    .map_err(|e| PerfError::Parse(format!("line {}: {k}: {e}", lineno + 1)))
            };
            match k {
                "gamma" => p.gamma = num()?,
                "beta" => p.beta = num()?,
                "alpha" => p.alpha = num()?,
                "t_restart" => p.t_restart = Some(num()?),
                "t_reduce_per_word" => p.t_reduce_per_word = Some(num()?),
                "nb" => {
                    p.nb = v
                        .parse()
                        .map_err(|e| PerfError::Parse(format!("line {}: nb: {e}", lineno + 1)))?
                }
                other => return Err(PerfError::Parse(format!("line {}: unknown key {other:?}", lineno + 1))),
            }
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerfPrediction {
    pub procs: usize,
    pub n: f64,
    pub time_total: f64,
    pub time_compute: f64,
    pub time_comm: f64,
    pub time_recovery: f64,
    pub useful_flops: f64,
    pub gflops_per_proc: f64,
    /// Time relative to the plain SUMMA baseline on the same grid, percent.
    pub overhead_pct: Option<f64>,
}

impl PerfPrediction {
    fn new(procs: usize, n: f64, compute: f64, comm: f64, recovery: f64) -> Self {
        let time_total = compute + comm + recovery;
        let useful_flops = 2.0 * n * n * n;
        PerfPrediction {
            procs,
            n,
            time_total,
            time_compute: compute,
            time_comm: comm,
            time_recovery: recovery,
            useful_flops,
            gflops_per_proc: useful_flops / (procs as f64 * time_total) / 1e9,
            overhead_pct: None,
        }
    }

    pub fn gflops_cumulative(&self) -> f64 {
        self.gflops_per_proc * self.procs as f64
    }

    /// Parallel efficiency against one processor doing `2n^3` flops.
    pub fn efficiency(&self, params: &PerfParams) -> f64 {
        self.useful_flops * params.gamma / (self.procs as f64 * self.time_total)
    }
}

/// Flop count used for the compute term of plain SUMMA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlopForm {
    /// `2n^3 / p`.
    #[default]
    Cubic,
    /// `2n^2 (n+1) / p`, counting the extra accumulate per entry.
    WithAccumulate,
}

fn grid_side(p_total: usize) -> Result<usize, PerfError> {
    let s = (p_total as f64).sqrt().round() as usize;
    if s == 0 || s * s != p_total {
        return Err(PerfError::NonSquare(p_total));
    }
    Ok(s)
}

/// Ring pipeline cost: `2 (n + 2 sqrt(p) - 3)` messages of `words` each.
fn pipeline(n: f64, sp: f64, words: f64, params: &PerfParams) -> f64 {
    2.0 * (n + 2.0 * sp - 3.0) * (params.alpha + words * params.beta)
}

fn summa_parts(n: f64, p: usize, sp: f64, params: &PerfParams, form: FlopForm) -> PerfPrediction {
    let flops = match form {
        FlopForm::Cubic => 2.0 * n * n * n,
        FlopForm::WithAccumulate => 2.0 * n * n * (n + 1.0),
    } / p as f64;
    PerfPrediction::new(p, n, flops * params.gamma, pipeline(n, sp, n / sp, params), 0.0)
}

/// Plain SUMMA on `p_total` processors.
pub fn summa_time(n: usize, p_total: usize, params: &PerfParams) -> Result<PerfPrediction, PerfError> {
    summa_time_with(n, p_total, params, FlopForm::Cubic)
}

pub fn summa_time_with(
    n: usize,
    p_total: usize,
    params: &PerfParams,
    form: FlopForm,
) -> Result<PerfPrediction, PerfError> {
    params.validate()?;
    let sp = grid_side(p_total)?;
    if n < sp {
        return Err(PerfError::TooSmall { n, p: p_total });
    }
    Ok(summa_parts(n as f64, p_total, sp as f64, params, form))
}

fn check_grid(q: usize) -> Result<(), PerfError> {
    if q < 2 {
        return Err(PerfError::InvalidGrid(q));
    }
    Ok(())
}

/// The non-resilient baseline for a `q x q` fault tolerant run: the same
/// `n = (q-1) nloc` problem on the same `q^2` processors.
pub fn pblas_time(nloc: usize, q: usize, params: &PerfParams) -> Result<PerfPrediction, PerfError> {
    check_grid(q)?;
    params.validate()?;
    Ok(pblas_f(nloc as f64, q, params))
}

fn pblas_f(nloc: f64, q: usize, params: &PerfParams) -> PerfPrediction {
    let n = (q - 1) as f64 * nloc;
    let mut p = summa_parts(n, q * q, q as f64, params, FlopForm::Cubic);
    p.overhead_pct = Some(100.0);
    p
}

fn abft0_f(nloc: f64, q: usize, params: &PerfParams) -> PerfPrediction {
    let procs = q * q;
    let (qf, n) = (q as f64, (q - 1) as f64 * nloc);
    let big = n + nloc;
    let compute = 2.0 * big * big * n / procs as f64 * params.gamma;
    let comm = pipeline(n, qf, big / qf, params);
    let mut p = PerfPrediction::new(procs, n, compute, comm, 0.0);
    p.overhead_pct = Some(100.0 * p.time_total / pblas_f(nloc, q, params).time_total);
    p
}

/// Checksum-carrying SUMMA with no failure: the encoded operands are
/// `(n + nloc)` wide and every processor, checksum ones included, updates
/// its block at every step.
pub fn abft_time_0f(nloc: usize, q: usize, params: &PerfParams) -> Result<PerfPrediction, PerfError> {
    check_grid(q)?;
    params.validate()?;
    Ok(abft0_f(nloc as f64, q, params))
}

/// Per-phase times of one recovery, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryTimes {
    /// One local rank-`nb` update that may be in progress when the failure
    /// hits.
    pub detection: f64,
    /// Respawn; proportional to the total processor count.
    pub restart: f64,
    /// One pipeline fill and drain.
    pub pushdata: f64,
    /// Reductions rebuilding the three local blocks (A, B and C).
    pub checksum: f64,
}

impl RecoveryTimes {
    pub fn total(&self) -> f64 {
        self.detection + self.restart + self.pushdata + self.checksum
    }
}

fn recovery_f(nloc: f64, q: usize, params: &PerfParams, t_restart: f64, t_reduce: f64) -> RecoveryTimes {
    let (qf, n) = (q as f64, (q - 1) as f64 * nloc);
    RecoveryTimes {
        detection: 2.0 * nloc * nloc * params.nb as f64 * params.gamma,
        restart: t_restart * (q * q) as f64,
        pushdata: 2.0 * (2.0 * qf - 2.0) * (params.alpha + (n + nloc) / qf * params.beta),
        checksum: t_reduce * 3.0 * nloc * nloc,
    }
}

pub fn recovery_times(nloc: usize, q: usize, params: &PerfParams) -> Result<RecoveryTimes, PerfError> {
    check_grid(q)?;
    params.validate()?;
    let (tr, tw) = fitted(params)?;
    Ok(recovery_f(nloc as f64, q, params, tr, tw))
}

fn fitted(params: &PerfParams) -> Result<(f64, f64), PerfError> {
    match (params.t_restart, params.t_reduce_per_word) {
        (Some(a), Some(b)) => Ok((a, b)),
        (None, None) => Err(PerfError::Unfitted("t_restart, t_reduce_per_word".into())),
        (None, _) => Err(PerfError::Unfitted("t_restart".into())),
        (_, None) => Err(PerfError::Unfitted("t_reduce_per_word".into())),
    }
}

/// One failure and its recovery on top of [`abft_time_0f`].
pub fn abft_time_1f(nloc: usize, q: usize, params: &PerfParams) -> Result<PerfPrediction, PerfError> {
    check_grid(q)?;
    params.validate()?;
    let (tr, tw) = fitted(params)?;
    Ok(abft1_f(nloc as f64, q, params, tr, tw))
}

fn abft1_f(nloc: f64, q: usize, params: &PerfParams, tr: f64, tw: f64) -> PerfPrediction {
    let base = abft0_f(nloc, q, params);
    let rec = recovery_f(nloc, q, params, tr, tw);
    let mut p = PerfPrediction::new(base.procs, base.n, base.time_compute, base.time_comm, rec.total());
    p.overhead_pct = Some(100.0 * p.time_total / pblas_f(nloc, q, params).time_total);
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RunKind {
    Pblas,
    Abft0,
    Abft1,
}

impl fmt::Display for RunKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunKind::Pblas => "pblas",
            RunKind::Abft0 => "abft_0f",
            RunKind::Abft1 => "abft_1f",
        })
    }
}

/// A measured (or reference) per-processor rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub kind: RunKind,
    pub nloc: usize,
    pub q: usize,
    pub gflops_per_proc: f64,
}

impl Observation {
    fn time(&self) -> f64 {
        let n = ((self.q - 1) * self.nloc) as f64;
        2.0 * n * n * n / ((self.q * self.q) as f64 * self.gflops_per_proc * 1e9)
    }
}

/// Weighted linear least squares `min sum ((row . x - y) / y)^2` via the
/// normal equations of a two-column system.
fn lsq2(rows: &[([f64; 2], f64)]) -> Option<[f64; 2]> {
    let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &([u, v], y) in rows {
        let (u, v) = (u / y, v / y);
        a11 += u * u;
        a12 += u * v;
        a22 += v * v;
        b1 += u;
        b2 += v;
    }
    let det = a11 * a22 - a12 * a12;
    if !(det.abs() > 1e-12 * (a11 * a22).abs()) {
        return None;
    }
    Some([(b1 * a22 - b2 * a12) / det, (a11 * b2 - a12 * b1) / det])
}

/// Fits `gamma`, `beta` and, if there are 1-failure observations, the two
/// recovery constants.
///
/// Run times are linear in each pair of constants, so each pair is a
/// two-parameter least squares fit on relative time errors (which match
/// relative rate errors to first order and exactly at a perfect fit). The
/// base pair is fitted from PBLAS and 0-failure points first; the recovery
/// pair is then fitted from 1-failure points with the base pair held fixed.
pub fn fit_params(observations: &[Observation], base: &PerfParams) -> Result<PerfParams, PerfError> {
    let mut missing = Vec::new();
    let machine: Vec<&Observation> = observations.iter().filter(|o| o.kind != RunKind::Abft1).collect();
    let failures = observations.len() - machine.len();
    if machine.len() < 2 {
        missing.push(format!("{} more PBLAS or 0-failure observations", 2 - machine.len()));
    }
    if failures == 1 {
        missing.push("1 more 1-failure observation".to_string());
    }
    if !missing.is_empty() {
        return Err(PerfError::Underdetermined(missing.join("; ")));
    }
    for o in observations {
        check_grid(o.q)?;
        if !(o.gflops_per_proc > 0.0) || o.nloc == 0 {
            return Err(PerfError::InvalidParams(format!("bad observation {o:?}")));
        }
    }
    let unit = PerfParams {
        gamma: 1.0,
        beta: 1.0,
        alpha: 0.0,
        ..*base
    };
    let rows: Vec<([f64; 2], f64)> = machine
        .iter()
        .map(|o| {
            let p = match o.kind {
                RunKind::Pblas => pblas_f(o.nloc as f64, o.q, &unit),
                _ => abft0_f(o.nloc as f64, o.q, &unit),
            };
            ([p.time_compute, p.time_comm], o.time())
        })
        .collect();
    let [gamma, beta] =
        lsq2(&rows).ok_or_else(|| PerfError::Underdetermined("observations do not separate gamma from beta".into()))?;
    let mut out = PerfParams {
        gamma,
        beta,
        alpha: 0.0,
        t_restart: None,
        t_reduce_per_word: None,
        nb: base.nb,
    };
    out.validate()?;
    if failures >= 2 {
        let (tr, tw) = fit_recovery(observations, &out)?;
        out = out.with_recovery(tr, tw);
        out.validate()?;
    }
    Ok(out)
}

/// Fits `(t_restart, t_reduce_per_word)` from 1-failure observations with
/// the machine constants of `params` held fixed.
pub fn fit_recovery(observations: &[Observation], params: &PerfParams) -> Result<(f64, f64), PerfError> {
    params.validate()?;
    let fail: Vec<&Observation> = observations.iter().filter(|o| o.kind == RunKind::Abft1).collect();
    if fail.len() < 2 {
        return Err(PerfError::Underdetermined(format!(
            "{} more 1-failure observations",
            2 - fail.len()
        )));
    }
    let rows: Vec<([f64; 2], f64)> = fail
        .iter()
        .map(|o| {
            let nloc = o.nloc as f64;
            let fixed = abft0_f(nloc, o.q, params).time_total + {
                let r = recovery_f(nloc, o.q, params, 0.0, 0.0);
                r.detection + r.pushdata
            };
            let unit = recovery_f(nloc, o.q, params, 1.0, 1.0);
            // time - fixed = t_restart * restart_unit + t_reduce * checksum_unit
            ([unit.restart, unit.checksum], o.time() - fixed)
        })
        .collect();
    // weight by total time, not by the (possibly tiny) residual
    let weighted: Vec<([f64; 2], f64)> = rows
        .iter()
        .zip(&fail)
        .map(|(&([u, v], r), o)| {
            let t = o.time();
            ([u / t, v / t], r / t)
        })
        .collect();
    let [a, b] = lsq_plain(&weighted)
        .ok_or_else(|| PerfError::Underdetermined("1-failure observations do not separate the constants".into()))?;
    Ok((a, b))
}

fn lsq_plain(rows: &[([f64; 2], f64)]) -> Option<[f64; 2]> {
    let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &([u, v], y) in rows {
        a11 += u * u;
        a12 += u * v;
        a22 += v * v;
        b1 += u * y;
        b2 += v * y;
    }
    let det = a11 * a22 - a12 * a12;
    if !(det.abs() > 1e-12 * (a11 * a22).abs()) {
        return None;
    }
    Some([(b1 * a22 - b2 * a12) / det, (a11 * b2 - a12 * b1) / det])
}

/// The reference model rates (GFLOPS/s per processor) at `nloc = 3000`,
/// in [`TABLE_PROCS`] order.
pub mod reference {
    pub const PBLAS: [f64; 6] = [3.09, 3.09, 3.10, 3.10, 3.12, 3.13];
    pub const ABFT_0F: [f64; 6] = [2.49, 2.55, 2.60, 2.65, 2.79, 2.88];
    pub const ABFT_1F: [f64; 6] = [2.40, 2.46, 2.52, 2.53, 2.63, 2.74];
    /// Overheads (percent of the PBLAS time).
    pub const OVERHEAD_0F: [f64; 6] = [129.2, 125.9, 122.7, 118.3, 113.9, 109.4];
    pub const OVERHEAD_1F: [f64; 6] = [134.8, 131.7, 127.1, 123.0, 120.9, 114.7];
    /// Entries of the 1-failure row used to fit the recovery constants:
    /// 121 and 484 processors.
    pub const FIT_COLUMNS: [usize; 2] = [3, 5];
}

/// Recovery constants fitted to two entries of the reference 1-failure
/// row, with default machine constants.
pub fn reference_params() -> Result<PerfParams, PerfError> {
    let base = PerfParams::default();
    let obs: Vec<Observation> = reference::FIT_COLUMNS
        .iter()
        .map(|&i| Observation {
            kind: RunKind::Abft1,
            nloc: TABLE_NLOC,
            q: grid_side(TABLE_PROCS[i]).expect("square"),
            gflops_per_proc: reference::ABFT_1F[i],
        })
        .collect();
    let (tr, tw) = fit_recovery(&obs, &base)?;
    Ok(base.with_recovery(tr, tw))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableRow {
    pub procs: usize,
    pub kind: RunKind,
    pub nloc: f64,
    pub n: f64,
    pub gflops_per_proc: f64,
    pub gflops_cumulative: f64,
    pub overhead_pct: f64,
}

impl TableRow {
    fn from(kind: RunKind, nloc: f64, p: &PerfPrediction) -> Self {
        TableRow {
            procs: p.procs,
            kind,
            nloc,
            n: p.n,
            gflops_per_proc: p.gflops_per_proc,
            gflops_cumulative: p.gflops_cumulative(),
            overhead_pct: p.overhead_pct.unwrap_or(100.0),
        }
    }
}

fn rows_for(nloc: f64, q: usize, params: &PerfParams) -> Vec<TableRow> {
    let mut rows = vec![
        TableRow::from(RunKind::Pblas, nloc, &pblas_f(nloc, q, params)),
        TableRow::from(RunKind::Abft0, nloc, &abft0_f(nloc, q, params)),
    ];
    if let Ok((tr, tw)) = fitted(params) {
        rows.push(TableRow::from(RunKind::Abft1, nloc, &abft1_f(nloc, q, params, tr, tw)));
    }
    rows
}

/// Weak-scaling table: one row per (processor count, run kind). The
/// 1-failure rows appear only when the recovery constants are fitted.
pub fn weak_scaling_table(nloc: usize, procs: &[usize], params: &PerfParams) -> Result<Vec<TableRow>, PerfError> {
    params.validate()?;
    let mut out = Vec::new();
    for &p in procs {
        let q = grid_side(p)?;
        check_grid(q)?;
        out.extend(rows_for(nloc as f64, q, params));
    }
    Ok(out)
}

/// The weak-scaling curve family for several local sizes.
pub fn weak_scaling_family(nlocs: &[usize], procs: &[usize], params: &PerfParams) -> Result<Vec<TableRow>, PerfError> {
    let mut out = Vec::new();
    for &nloc in nlocs {
        out.extend(weak_scaling_table(nloc, procs, params)?);
    }
    Ok(out)
}

/// Strong scaling: the global size `n` is fixed and split over the
/// `(q-1)^2` data processors, so `nloc = n / (q-1)` need not be integral.
pub fn strong_scaling(n: usize, qs: &[usize], params: &PerfParams) -> Result<Vec<TableRow>, PerfError> {
    params.validate()?;
    let mut out = Vec::new();
    for &q in qs {
        check_grid(q)?;
        if n < q {
            return Err(PerfError::TooSmall { n, p: q * q });
        }
        out.extend(rows_for(n as f64 / (q - 1) as f64, q, params));
    }
    Ok(out)
}

pub const CSV_HEADER: &str = "procs,kind,nloc,n,gflops_per_proc_model,gflops_cumulative_model,overhead_pct";

pub fn to_csv(rows: &[TableRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:.4},{:.2},{:.2}\n",
            r.procs, r.kind, r.nloc, r.n, r.gflops_per_proc, r.gflops_cumulative, r.overhead_pct
        ));
    }
    s
}
