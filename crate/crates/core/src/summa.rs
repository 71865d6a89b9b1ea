//! Checksum-carrying SUMMA and its recovery protocol.
//!
//! Operands live on a `q x q` [`GridWorld`]. The data is dealt
//! 2D-block-cyclically over the `(q-1) x (q-1)` compute subgrid; rank
//! `(r, q-1)` holds the row checksums of process row `r`, rank `(q-1, c)`
//! the column checksums of process column `c`, and the corner the cross
//! term. Because `C_F = [A; C_C^T A] [B, B C_R]`, every rank including the
//! checksum ones just applies the ordinary rank-`nb` update each step and
//! the checksums of `C` stay consistent without ever being recomputed.
//!
//! A failure is handled in four phases:
//!
//! 1. detection: survivors keep running the pipeline until each of them
//!    has run into the failure at a communication point;
//! 2. restart: the dead rank is respawned blank;
//! 3. pushdata: survivors that lag behind replay the panels they missed,
//!    so every local `C` block is at the same step `k'`;
//! 4. checksum: the lost blocks of `A`, `B` and `C` are rebuilt from the
//!    other members of their checksum group.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::codec::encode_matrix;
use crate::codec::{recover_erasures, verify_consistency, Blocking, ChecksumScheme, CodecError, EncodedMatrix};
use crate::dense::{gemm_update, DenseError, DenseMatrix, ResidualReport};
use crate::grid::{Axis, CommStats, GridError, GridWorld, Rank};

/// Slot holding the product on every rank.
pub const C_SLOT: &str = "C";
const ROW_PANEL: &str = "row_panel";
const COL_PANEL: &str = "col_panel";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FtError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Dense(#[from] DenseError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unrecoverable failure of {failed:?} at step {step}: {reason}")]
    Unrecoverable {
        failed: Vec<Rank>,
        step: usize,
        reason: String,
        recoveries: Vec<RecoveryReport>,
    },
    #[error("checksums of {what} inconsistent after recovery at step {step}")]
    Inconsistent { what: String, step: usize },
}

/// One dimension's block-cyclic map over `procs` processes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CyclicDim {
    pub len: usize,
    pub nb: usize,
    pub procs: usize,
}

impl CyclicDim {
    /// Local extent of every process; global sizes are zero-padded to a
    /// whole number of blocks per process (at least one).
    pub fn local_len(&self) -> usize {
        let stripe = self.nb * self.procs;
        self.len.div_ceil(stripe).max(1) * self.nb
    }

    pub fn padded_len(&self) -> usize {
        self.local_len() * self.procs
    }

    /// `(process, local index)` of global index `i`.
    pub fn to_local(&self, i: usize) -> (usize, usize) {
        let block = i / self.nb;
        (block % self.procs, (block / self.procs) * self.nb + i % self.nb)
    }

    /// Global index of a local index, or `None` for padding.
    pub fn to_global(&self, proc: usize, local: usize) -> Option<usize> {
        let block = (local / self.nb) * self.procs + proc;
        let i = block * self.nb + local % self.nb;
        (i < self.len).then_some(i)
    }

    /// Number of real (not all-padding) blocks.
    pub fn blocks(&self) -> usize {
        self.len.div_ceil(self.nb)
    }
}

/// 2D block-cyclic layout of a `rows x cols` matrix over a `P x P` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockCyclic {
    pub row_map: CyclicDim,
    pub col_map: CyclicDim,
}

impl BlockCyclic {
    pub fn new(rows: usize, cols: usize, nb: usize, procs: usize) -> Self {
        BlockCyclic {
            row_map: CyclicDim { len: rows, nb, procs },
            col_map: CyclicDim { len: cols, nb, procs },
        }
    }

    pub fn nb(&self) -> usize {
        self.row_map.nb
    }

    pub fn procs(&self) -> usize {
        self.row_map.procs
    }

    pub fn local_shape(&self) -> (usize, usize) {
        (self.row_map.local_len(), self.col_map.local_len())
    }

    /// Owner of global block `(bi, bj)`.
    pub fn block_owner(&self, bi: usize, bj: usize) -> Rank {
        Rank::new(bi % self.procs(), bj % self.procs())
    }

    /// Blocks `(bi, bj)` held by `rank`, row-major.
    pub fn blocks_of(&self, rank: Rank) -> Vec<(usize, usize)> {
        let rows: Vec<usize> = (0..self.row_map.padded_len() / self.nb())
            .filter(|b| b % self.procs() == rank.row)
            .collect();
        let cols: Vec<usize> = (0..self.col_map.padded_len() / self.nb())
            .filter(|b| b % self.procs() == rank.col)
            .collect();
        rows.iter().flat_map(|&i| cols.iter().map(move |&j| (i, j))).collect()
    }
}

/// A matrix distributed over a grid together with its checksums.
#[derive(Debug, Clone, PartialEq)]
pub struct FtMatrix {
    rows: usize,
    cols: usize,
    layout: BlockCyclic,
    slot: String,
    row_scheme: ChecksumScheme,
    col_scheme: ChecksumScheme,
}

impl FtMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nb(&self) -> usize {
        self.layout.nb()
    }

    pub fn layout(&self) -> &BlockCyclic {
        &self.layout
    }

    pub fn slot(&self) -> &str {
        &self.slot
    }

    pub fn row_scheme(&self) -> &ChecksumScheme {
        &self.row_scheme
    }

    pub fn col_scheme(&self) -> &ChecksumScheme {
        &self.col_scheme
    }

    /// True if some rank that should hold a block is dead or has lost it.
    pub fn is_degraded(&self, world: &GridWorld) -> bool {
        world
            .ranks()
            .any(|r| !world.is_alive(r) || world.local(r, &self.slot).is_none())
    }

    fn local_of(&self, world: &GridWorld, r: Rank) -> Result<DenseMatrix, FtError> {
        world.local(r, &self.slot).cloned().ok_or_else(|| {
            FtError::Grid(GridError::MissingSlot {
                rank: r,
                slot: self.slot.clone(),
            })
        })
    }

    /// Reassembles the full checksum form from every rank's memory, in
    /// process-major order (core block `(r, c)` is rank `(r, c)`'s block).
    pub fn snapshot_encoded(&self, world: &GridWorld) -> Result<EncodedMatrix, FtError> {
        let p = self.layout.procs();
        let (lr, lc) = self.layout.local_shape();
        let mut core = DenseMatrix::zeros(p * lr, p * lc);
        let mut rowsum = DenseMatrix::zeros(p * lr, lc);
        let mut colsum = DenseMatrix::zeros(lr, p * lc);
        for r in 0..p {
            for c in 0..p {
                core.set_submatrix(r * lr, c * lc, &self.local_of(world, Rank::new(r, c))?);
            }
            rowsum.set_submatrix(r * lr, 0, &self.local_of(world, Rank::new(r, p))?);
            colsum.set_submatrix(0, r * lc, &self.local_of(world, Rank::new(p, r))?);
        }
        let cross = self.local_of(world, Rank::new(p, p))?;
        Ok(EncodedMatrix {
            core,
            rowsum,
            colsum,
            cross,
            blocking: Blocking::new(p, p),
        })
    }

    /// The distributed data as an ordinary `rows x cols` matrix.
    pub fn snapshot_global(&self, world: &GridWorld) -> Result<DenseMatrix, FtError> {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        let p = self.layout.procs();
        for r in 0..p {
            for c in 0..p {
                let local = self.local_of(world, Rank::new(r, c))?;
                for li in 0..local.rows() {
                    let Some(gi) = self.layout.row_map.to_global(r, li) else {
                        continue;
                    };
                    for lj in 0..local.cols() {
                        if let Some(gj) = self.layout.col_map.to_global(c, lj) {
                            out.as_mut_slice()[gi * self.cols + gj] = local[(li, lj)];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Runs the consistency check on a snapshot. Read-only.
    pub fn check_consistency(&self, world: &GridWorld) -> Result<bool, FtError> {
        let mut e = self.snapshot_encoded(world)?;
        let d = verify_consistency(&mut e, &self.row_scheme, &self.col_scheme)?;
        Ok(d.is_consistent())
    }
}

fn check_schemes(p: usize, row: &ChecksumScheme, col: &ChecksumScheme) -> Result<(), FtError> {
    for s in [row, col] {
        if s.f() != 1 {
            return Err(FtError::Config(format!(
                "only single-checksum schemes are supported on the grid, got f = {}",
                s.f()
            )));
        }
        if s.p() != p {
            return Err(FtError::Config(format!(
                "scheme spans {} holders but the compute subgrid side is {p}",
                s.p()
            )));
        }
    }
    Ok(())
}

/// Deals `a` block-cyclically over the compute subgrid of `world` and
/// places its checksums on the border ranks, under local name `slot`.
///
/// `row_scheme` weights the process columns (row checksums), `col_scheme`
/// the process rows. Dimensions that are not multiples of `nb * (q-1)` are
/// padded with zeros.
pub fn distribute(
    a: &DenseMatrix,
    world: &mut GridWorld,
    nb: usize,
    row_scheme: &ChecksumScheme,
    col_scheme: &ChecksumScheme,
    slot: &str,
) -> Result<FtMatrix, FtError> {
    if nb == 0 {
        return Err(FtError::Config("nb must be at least 1".into()));
    }
    if let Some(dead) = world.failed_ranks().first() {
        return Err(FtError::Grid(GridError::DeadRank(*dead)));
    }
    let p = world.compute_side();
    check_schemes(p, row_scheme, col_scheme)?;
    let layout = BlockCyclic::new(a.rows(), a.cols(), nb, p);
    let (lr, lc) = layout.local_shape();
    let mut core = DenseMatrix::zeros(p * lr, p * lc);
    for i in 0..a.rows() {
        let (pr, li) = layout.row_map.to_local(i);
        for j in 0..a.cols() {
            let (pc, lj) = layout.col_map.to_local(j);
            core.as_mut_slice()[(pr * lr + li) * (p * lc) + pc * lc + lj] = a[(i, j)];
        }
    }
    let enc = encode_matrix(&core, row_scheme, col_scheme, Blocking::new(p, p))?;
    for r in 0..p {
        for c in 0..p {
            world.put(Rank::new(r, c), slot, enc.core.submatrix(r * lr, c * lc, lr, lc));
        }
        world.put(Rank::new(r, p), slot, enc.rowsum.submatrix(r * lr, 0, lr, lc));
        world.put(Rank::new(p, r), slot, enc.colsum.submatrix(0, r * lc, lr, lc));
    }
    world.put(Rank::new(p, p), slot, enc.cross);
    Ok(FtMatrix {
        rows: a.rows(),
        cols: a.cols(),
        layout,
        slot: slot.to_string(),
        row_scheme: row_scheme.clone(),
        col_scheme: col_scheme.clone(),
    })
}

/// Event and traffic counts of one recovery phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseStats {
    pub events: u64,
    pub messages: u64,
    pub words: u64,
}

impl PhaseStats {
    fn between(clock0: u64, s0: CommStats, world: &GridWorld) -> Self {
        let s1 = world.stats();
        PhaseStats {
            events: world.clock() - clock0,
            messages: s1.sent - s0.sent,
            words: s1.words_sent - s0.words_sent,
        }
    }
}

impl fmt::Display for PhaseStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.events, self.messages, self.words)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReport {
    /// Step the scheduler was in when the failure was first observed.
    pub detected_at_step: usize,
    pub failed_at_clock: u64,
    pub recovered_rank: Rank,
    /// Common step every `C` block was brought to; `None` if the failure
    /// hit before any step completed.
    pub consistent_step: Option<usize>,
    pub detection: PhaseStats,
    pub restart: PhaseStats,
    pub pushdata: PhaseStats,
    pub checksum: PhaseStats,
    /// Panels replayed by lagging survivors.
    pub replayed_panels: usize,
    pub success: bool,
}

impl fmt::Display for RecoveryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = self
            .consistent_step
            .map_or_else(|| "none".to_string(), |k| k.to_string());
        write!(
            f,
            "rank={} detected_at_step={} failed_at_clock={} consistent_step={} replayed={} \
             detection={} restart={} pushdata={} checksum={} success={}",
            self.recovered_rank,
            self.detected_at_step,
            self.failed_at_clock,
            k,
            self.replayed_panels,
            self.detection,
            self.restart,
            self.pushdata,
            self.checksum,
            self.success
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdgemmOutput {
    pub c: FtMatrix,
    pub steps: usize,
    pub recoveries: Vec<RecoveryReport>,
}

/// Which checksum group a lost block is rebuilt from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    /// The block's process row.
    Row,
    /// The block's process column.
    Col,
}

/// Default route: data blocks and row-checksum blocks use their process
/// row, column-checksum blocks their process column, so only the corner
/// is ever rebuilt from other checksum data. Either route is valid.
pub fn default_route(world: &GridWorld, target: Rank) -> Route {
    let p = world.compute_side();
    if target.row == p && target.col < p {
        Route::Col
    } else {
        Route::Row
    }
}

/// Recomputes the block `target` should hold for `m` from the other
/// members of one of its checksum groups, delivering it to `target`.
/// Uses only surviving ranks' data; never reads `target`'s memory.
pub fn rebuild_block(world: &mut GridWorld, m: &FtMatrix, target: Rank, route: Route) -> Result<DenseMatrix, FtError> {
    let p = world.compute_side();
    let (r, c) = (target.row, target.col);
    let tag = format!("rebuild_{}", m.slot);
    let line = |i: usize| match route {
        Route::Row => Rank::new(r, i),
        Route::Col => Rank::new(i, c),
    };
    let scheme = match route {
        Route::Row => &m.row_scheme,
        Route::Col => &m.col_scheme,
    };
    // position of target within its group along the route
    let pos = match route {
        Route::Row => c,
        Route::Col => r,
    };
    if pos == p {
        // target is the checksum of its group: re-encode
        let parts: Vec<(Rank, f64)> = (0..p).map(|i| (line(i), scheme.weight(0, i))).collect();
        return Ok(world.reduce(&parts, &m.slot, target, &tag)?);
    }
    // target is a data member of its group: erasure recovery
    let members: Vec<Rank> = (0..=p).map(line).filter(|&x| x != target).collect();
    let got = world.gather(&members, &m.slot, target, &tag)?;
    let mut surviving = BTreeMap::new();
    let mut checksum = None;
    let mut shape = (0, 0);
    for (rank, block) in got {
        shape = block.shape();
        let idx = match route {
            Route::Row => rank.col,
            Route::Col => rank.row,
        };
        if idx == p {
            checksum = Some(block.into_vec());
        } else {
            surviving.insert(idx, block.into_vec());
        }
    }
    let checksum = checksum.expect("checksum holder is a group member");
    let lost = BTreeSet::from([pos]);
    let mut out = recover_erasures(&surviving, &[checksum], &lost, scheme)?;
    let data = out.remove(&pos).expect("recovered index");
    Ok(DenseMatrix::from_vec(shape.0, shape.1, data)?)
}

struct Ctx<'a> {
    a: &'a FtMatrix,
    b: &'a FtMatrix,
    c: &'a FtMatrix,
    steps: usize,
}

fn panel_a(ctx: &Ctx, world: &GridWorld, owner: Rank, s: usize) -> Option<DenseMatrix> {
    let nb = ctx.a.nb();
    let local = world.local(owner, &ctx.a.slot)?;
    let off = (s / ctx.a.layout.procs()) * nb;
    Some(local.submatrix(0, off, local.rows(), nb))
}

fn panel_b(ctx: &Ctx, world: &GridWorld, owner: Rank, s: usize) -> Option<DenseMatrix> {
    let nb = ctx.b.nb();
    let local = world.local(owner, &ctx.b.slot)?;
    let off = (s / ctx.b.layout.procs()) * nb;
    Some(local.submatrix(off, 0, nb, local.cols()))
}

fn update(world: &mut GridWorld, rank: Rank, s: usize) -> Result<bool, FtError> {
    let done = world.compute(rank, "gemm", 0, |st| -> Result<(), DenseError> {
        let (_, ap) = &st.buffers[ROW_PANEL];
        let (_, bp) = &st.buffers[COL_PANEL];
        let (ap, bp) = (ap.clone(), bp.clone());
        let c = st.slots.get_mut(C_SLOT).expect("C allocated");
        gemm_update(c, &ap, &bp)?;
        st.progress = Some(s);
        Ok(())
    });
    match done {
        Some(r) => {
            r?;
            Ok(true)
        }
        None => Ok(false),
    }
}

fn has_panels(world: &GridWorld, rank: Rank, s: usize) -> bool {
    let st = world.rank(rank);
    matches!(st.buffers.get(ROW_PANEL), Some((k, _)) if *k == s)
        && matches!(st.buffers.get(COL_PANEL), Some((k, _)) if *k == s)
}

/// One outer-product step. Line broadcasts that run into a failure are
/// abandoned and their participants halt; everybody else carries on.
fn run_step(ctx: &Ctx, world: &mut GridWorld, s: usize) -> Result<(), FtError> {
    world.begin_step(s);
    let q = world.q();
    let p = world.compute_side();
    let owner = s % p;
    let empty = DenseMatrix::zeros(0, 0);
    for r in 0..q {
        let root = Rank::new(r, owner);
        let panel = panel_a(ctx, world, root, s).filter(|_| world.is_alive(root) && !world.is_notified(root));
        match world.ring_broadcast(Axis::Row, r, root, ROW_PANEL, s, panel.as_ref().unwrap_or(&empty)) {
            Ok(_) | Err(GridError::Notice(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    for c in 0..q {
        let root = Rank::new(owner, c);
        let panel = panel_b(ctx, world, root, s).filter(|_| world.is_alive(root) && !world.is_notified(root));
        match world.ring_broadcast(Axis::Col, c, root, COL_PANEL, s, panel.as_ref().unwrap_or(&empty)) {
            Ok(_) | Err(GridError::Notice(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    let ranks: Vec<Rank> = world.ranks().collect();
    for rank in ranks {
        if world.is_alive(rank) && !world.is_notified(rank) && has_panels(world, rank, s) {
            update(world, rank, s)?;
        }
    }
    Ok(())
}

/// Final synchronization: every block of `C` is gathered to rank (0,0).
fn collect(ctx: &Ctx, world: &mut GridWorld) -> Result<bool, FtError> {
    world.begin_step(ctx.steps);
    let all: Vec<Rank> = world.ranks().collect();
    match world.gather(&all, C_SLOT, Rank::new(0, 0), "collect") {
        Ok(_) => Ok(true),
        Err(GridError::Notice(_)) => Ok(false),
        Err(e) => Err(e.into()),
    }
}

/// Multiplies `a` by `b`, leaving the product (with checksums) in slot
/// [`C_SLOT`] of every rank and recovering from single failures on the
/// way.
pub fn ft_pdgemm(a: &FtMatrix, b: &FtMatrix, world: &mut GridWorld) -> Result<PdgemmOutput, FtError> {
    ft_pdgemm_observed(a, b, world, |_, _, _| {})
}

/// [`ft_pdgemm`] with a hook called after every step that all ranks
/// completed without a pending failure.
pub fn ft_pdgemm_observed(
    a: &FtMatrix,
    b: &FtMatrix,
    world: &mut GridWorld,
    mut observer: impl FnMut(usize, &GridWorld, &FtMatrix),
) -> Result<PdgemmOutput, FtError> {
    if a.cols != b.rows {
        return Err(FtError::Dense(DenseError::Dimension {
            what: "ft_pdgemm",
            lhs: (a.rows, a.cols),
            rhs: (b.rows, b.cols),
        }));
    }
    if a.nb() != b.nb() {
        return Err(FtError::Config(format!("block sizes differ: {} vs {}", a.nb(), b.nb())));
    }
    let p = world.compute_side();
    if a.layout.procs() != p || b.layout.procs() != p {
        return Err(FtError::Config("operands were distributed on a different grid".into()));
    }
    if a.slot == C_SLOT || b.slot == C_SLOT {
        return Err(FtError::Config(format!("operand slot name {C_SLOT:?} is reserved")));
    }
    if let Some(dead) = world.failed_ranks().first() {
        return Err(FtError::Grid(GridError::DeadRank(*dead)));
    }
    let c = FtMatrix {
        rows: a.rows,
        cols: b.cols,
        layout: BlockCyclic::new(a.rows, b.cols, a.nb(), p),
        slot: C_SLOT.to_string(),
        row_scheme: b.row_scheme.clone(),
        col_scheme: a.col_scheme.clone(),
    };
    let (lr, lc) = c.layout.local_shape();
    let ranks: Vec<Rank> = world.ranks().collect();
    for &r in &ranks {
        world.put(r, C_SLOT, DenseMatrix::zeros(lr, lc));
        let st = world.rank_mut(r);
        st.progress = None;
        st.buffers.clear();
    }
    let steps = a.layout.col_map.blocks();
    let q = world.q() as u64;
    world.arm_random_killer(steps, 4 * q * (q - 1) + q * q);
    let ctx = Ctx { a, b, c: &c, steps };

    let mut recoveries = Vec::new();
    let mut s = 0;
    loop {
        let finished = if s < steps {
            run_step(&ctx, world, s)?;
            false
        } else {
            collect(&ctx, world)?
        };
        if world.failed_ranks().is_empty() && ranks.iter().all(|&r| !world.is_notified(r)) {
            if finished {
                break;
            }
            observer(s, world, &c);
            s += 1;
            continue;
        }
        // phase 1: keep the pipeline going until every survivor has seen
        // the failure
        let detected_at_step = s;
        let mut probe = s + 1;
        while !world.all_live_notified() {
            if probe < steps {
                run_step(&ctx, world, probe)?;
            } else {
                collect(&ctx, world)?;
            }
            probe += 1;
            if probe > s + 2 * world.q() + 2 {
                return Err(unrecoverable(
                    world,
                    s,
                    "failure was never observed by every survivor",
                    recoveries,
                ));
            }
        }
        let report = match recover_ctx(&ctx, world, detected_at_step) {
            Ok(r) => r,
            Err(FtError::Unrecoverable {
                failed, step, reason, ..
            }) => {
                return Err(FtError::Unrecoverable {
                    failed,
                    step,
                    reason,
                    recoveries,
                })
            }
            Err(e) => return Err(e),
        };
        s = report.consistent_step.map_or(0, |k| k + 1);
        recoveries.push(report);
    }
    Ok(PdgemmOutput { c, steps, recoveries })
}

fn unrecoverable(world: &GridWorld, step: usize, reason: &str, recoveries: Vec<RecoveryReport>) -> FtError {
    FtError::Unrecoverable {
        failed: world.failed_ranks(),
        step,
        reason: reason.to_string(),
        recoveries,
    }
}

/// Runs the restart, pushdata and checksum phases for the single failed
/// rank of `world`, given the operands and the partial product of an
/// interrupted [`ft_pdgemm`].
pub fn recover(
    world: &mut GridWorld,
    a: &FtMatrix,
    b: &FtMatrix,
    c: &FtMatrix,
    detected_at_step: usize,
) -> Result<RecoveryReport, FtError> {
    let ctx = Ctx {
        a,
        b,
        c,
        steps: a.layout.col_map.blocks(),
    };
    recover_ctx(&ctx, world, detected_at_step)
}

fn recover_ctx(ctx: &Ctx, world: &mut GridWorld, detected_at_step: usize) -> Result<RecoveryReport, FtError> {
    let failed = world.failed_ranks();
    if failed.len() != 1 {
        return Err(unrecoverable(
            world,
            detected_at_step,
            &format!(
                "{} simultaneous failures exceed the single-failure tolerance",
                failed.len()
            ),
            Vec::new(),
        ));
    }
    let dead = failed[0];
    let (fail_clock, fail_stats) = world.failure_snapshot(dead).unwrap_or((world.clock(), world.stats()));
    let detection = PhaseStats::between(fail_clock, fail_stats, world);
    let abort = |world: &GridWorld, why: String| unrecoverable(world, detected_at_step, &why, Vec::new());

    // phase 2: restart
    let (t0, s0) = (world.clock(), world.stats());
    world.mark("restart");
    world.respawn(dead)?;
    let restart = PhaseStats::between(t0, s0, world);

    // phase 3: pushdata
    let (t0, s0) = (world.clock(), world.stats());
    world.mark("pushdata");
    let ranks: Vec<Rank> = world.ranks().collect();
    let target = ranks
        .iter()
        .filter(|&&r| r != dead)
        .filter_map(|&r| world.rank(r).progress)
        .max();
    let mut replayed = 0;
    if let Some(k) = target {
        for &laggard in &ranks {
            if laggard == dead {
                continue;
            }
            let from = world.rank(laggard).progress.map_or(0, |x| x + 1);
            for s in from..=k {
                replay_step(ctx, world, laggard, dead, s)
                    .map_err(|e| abort(world, format!("failure during pushdata: {e}")))?;
                replayed += 1;
            }
        }
    }
    let pushdata = PhaseStats::between(t0, s0, world);

    // phase 4: checksum
    let (t0, s0) = (world.clock(), world.stats());
    world.mark("checksum");
    for m in [ctx.a, ctx.b, ctx.c] {
        if world.local(dead, &m.slot).is_none() {
            restore(world, m, dead).map_err(|e| abort(world, format!("failure during checksum rebuild: {e}")))?;
        }
    }
    world.rank_mut(dead).progress = target;
    let checksum = PhaseStats::between(t0, s0, world);
    if !world.failed_ranks().is_empty() {
        return Err(abort(world, "failure during recovery".into()));
    }
    for m in [ctx.a, ctx.b, ctx.c] {
        if !m.check_consistency(world)? {
            return Err(FtError::Inconsistent {
                what: m.slot.clone(),
                step: detected_at_step,
            });
        }
    }
    world.mark("recovered");
    Ok(RecoveryReport {
        detected_at_step,
        failed_at_clock: fail_clock,
        recovered_rank: dead,
        consistent_step: target,
        detection,
        restart,
        pushdata,
        checksum,
        replayed_panels: replayed,
        success: true,
    })
}

fn restore(world: &mut GridWorld, m: &FtMatrix, target: Rank) -> Result<(), FtError> {
    let route = default_route(world, target);
    let block = rebuild_block(world, m, target, route)?;
    world.put(target, &m.slot, block);
    Ok(())
}

/// Brings `laggard` forward by step `s`: fetches the two panels from a
/// peer that still buffers them, or else from the panel owner (rebuilding
/// the owner's operand block first if it is the respawned rank).
fn replay_step(ctx: &Ctx, world: &mut GridWorld, laggard: Rank, dead: Rank, s: usize) -> Result<(), FtError> {
    let p = world.compute_side();
    let row_owner = Rank::new(laggard.row, s % p);
    let col_owner = Rank::new(s % p, laggard.col);
    fetch_panel(ctx, world, laggard, dead, s, Axis::Row, row_owner)?;
    fetch_panel(ctx, world, laggard, dead, s, Axis::Col, col_owner)?;
    update(world, laggard, s)?;
    Ok(())
}

fn fetch_panel(
    ctx: &Ctx,
    world: &mut GridWorld,
    laggard: Rank,
    dead: Rank,
    s: usize,
    axis: Axis,
    owner: Rank,
) -> Result<(), FtError> {
    let (buffer, m) = match axis {
        Axis::Row => (ROW_PANEL, ctx.a),
        Axis::Col => (COL_PANEL, ctx.b),
    };
    let buffered = |world: &GridWorld, r: Rank| matches!(world.rank(r).buffers.get(buffer), Some((k, _)) if *k == s);
    if buffered(world, laggard) {
        return Ok(());
    }
    let index = match axis {
        Axis::Row => laggard.row,
        Axis::Col => laggard.col,
    };
    let peer = world
        .line(axis, index)
        .into_iter()
        .find(|&r| r != laggard && r != dead && buffered(world, r));
    let panel = if let Some(peer) = peer {
        let panel = world.rank(peer).buffers[buffer].1.clone();
        let tag = format!("replay_{buffer}");
        world.send(peer, laggard, &tag, panel)?;
        world.recv(laggard, peer)?.into_matrix().expect("matrix payload")
    } else {
        if world.local(owner, &m.slot).is_none() {
            restore(world, m, owner)?;
        }
        let panel = match axis {
            Axis::Row => panel_a(ctx, world, owner, s),
            Axis::Col => panel_b(ctx, world, owner, s),
        }
        .expect("owner holds its operand block");
        if owner != laggard {
            let tag = format!("replay_{buffer}");
            world.send(owner, laggard, &tag, panel)?;
            world.recv(laggard, owner)?.into_matrix().expect("matrix payload")
        } else {
            panel
        }
    };
    world.rank_mut(laggard).buffers.insert(buffer.to_string(), (s, panel));
    Ok(())
}

/// Outcome of a single run, in a stable text form.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub n: usize,
    pub nb: usize,
    pub q: usize,
    pub seed: u64,
    pub fault: String,
    pub status: String,
    pub steps: usize,
    pub residual: Option<ResidualReport>,
    pub consistent: Option<bool>,
    pub kills: usize,
    pub events: u64,
    pub messages: u64,
    pub recoveries: Vec<RecoveryReport>,
    pub error: Option<String>,
}

impl RunManifest {
    /// `key = value` lines in fixed order; no timestamps.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("n", self.n.to_string());
        kv("nb", self.nb.to_string());
        kv("q", self.q.to_string());
        kv("seed", self.seed.to_string());
        kv("fault", self.fault.clone());
        kv("status", self.status.clone());
        kv("steps", self.steps.to_string());
        match &self.residual {
            Some(r) => {
                kv("residual", format!("{:e}", r.residual));
                kv("residual_threshold", format!("{:e}", r.threshold));
                kv("residual_passed", r.passed.to_string());
            }
            None => {
                kv("residual", "none".into());
                kv("residual_threshold", "none".into());
                kv("residual_passed", "false".into());
            }
        }
        kv(
            "consistent",
            self.consistent.map_or_else(|| "unknown".to_string(), |c| c.to_string()),
        );
        kv("kills", self.kills.to_string());
        kv("events", self.events.to_string());
        kv("messages", self.messages.to_string());
        kv("recoveries", self.recoveries.len().to_string());
        for (i, r) in self.recoveries.iter().enumerate() {
            kv(&format!("recovery.{i}"), r.to_string());
        }
        if let Some(e) = &self.error {
            kv("error", e.replace('\n', " "));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::make_scheme;
    use crate::dense::matmul;
    use crate::grid::{spawn_grid, FaultPlan};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schemes(p: usize) -> ChecksumScheme {
        make_scheme(1, p, 0).unwrap()
    }

    fn setup(
        n: usize,
        q: usize,
        nb: usize,
        plan: FaultPlan,
        seed: u64,
    ) -> (GridWorld, FtMatrix, FtMatrix, DenseMatrix, DenseMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DenseMatrix::random(n, n, &mut rng);
        let b = DenseMatrix::random(n, n, &mut rng);
        let mut w = spawn_grid(q, plan, seed).unwrap();
        let s = schemes(q - 1);
        let fa = distribute(&a, &mut w, nb, &s, &s, "A").unwrap();
        let fb = distribute(&b, &mut w, nb, &s, &s, "B").unwrap();
        (w, fa, fb, a, b)
    }

    #[test]
    fn cyclic_map_round_trip() {
        let d = CyclicDim {
            len: 11,
            nb: 2,
            procs: 3,
        };
        assert_eq!(d.local_len(), 4);
        assert_eq!(d.padded_len(), 12);
        for i in 0..11 {
            let (p, l) = d.to_local(i);
            assert_eq!(d.to_global(p, l), Some(i));
        }
        assert_eq!(d.to_global(2, 3), None);
        assert_eq!(d.blocks(), 6);
    }

    #[test]
    fn distribute_4x4_one_block_each() {
        let a = DenseMatrix::from_rows(&[
            [1.0, 2.0, 3.0, 4.0],
            [5.0, 6.0, 7.0, 8.0],
            [9.0, 10.0, 11.0, 12.0],
            [13.0, 14.0, 15.0, 16.0],
        ]);
        let mut w = spawn_grid(3, FaultPlan::none(), 0).unwrap();
        let s = schemes(2);
        let fa = distribute(&a, &mut w, 2, &s, &s, "A").unwrap();
        assert_eq!(w.local(Rank::new(0, 1), "A").unwrap(), &a.submatrix(0, 2, 2, 2));
        // rowsum of process row 0 = block(0,0) + block(0,1)
        assert_eq!(
            w.local(Rank::new(0, 2), "A").unwrap(),
            &DenseMatrix::from_rows(&[[4.0, 6.0], [12.0, 14.0]])
        );
        assert_eq!(
            w.local(Rank::new(2, 0), "A").unwrap(),
            &DenseMatrix::from_rows(&[[10.0, 12.0], [18.0, 20.0]])
        );
        assert_eq!(
            w.local(Rank::new(2, 2), "A").unwrap(),
            &DenseMatrix::from_rows(&[[24.0, 28.0], [40.0, 44.0]])
        );
        assert_eq!(fa.snapshot_global(&w).unwrap(), a);
        assert!(fa.check_consistency(&w).unwrap());
    }

    #[test]
    fn distribute_6x6_wraps_cyclically() {
        let a = DenseMatrix::from_vec(6, 6, (0..36).map(f64::from).collect()).unwrap();
        let mut w = spawn_grid(3, FaultPlan::none(), 0).unwrap();
        let s = schemes(2);
        let fa = distribute(&a, &mut w, 2, &s, &s, "A").unwrap();
        assert_eq!(
            fa.layout().blocks_of(Rank::new(0, 0)),
            vec![(0, 0), (0, 2), (2, 0), (2, 2)]
        );
        let local = w.local(Rank::new(0, 0), "A").unwrap();
        assert_eq!(local.shape(), (4, 4));
        // local (2,2) is global block (2,2), i.e. entry (4,4)
        assert_eq!(local[(2, 2)], a[(4, 4)]);
        assert_eq!(local[(0, 2)], a[(0, 4)]);
        assert_eq!(fa.snapshot_global(&w).unwrap(), a);
    }

    #[test]
    fn zero_matrix_zero_checksums() {
        let mut w = spawn_grid(3, FaultPlan::none(), 0).unwrap();
        let s = schemes(2);
        distribute(&DenseMatrix::zeros(5, 5), &mut w, 2, &s, &s, "Z").unwrap();
        for r in w.ranks().collect::<Vec<_>>() {
            assert!(w.local(r, "Z").unwrap().as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identity_product() {
        let mut w = spawn_grid(3, FaultPlan::none(), 0).unwrap();
        let s = schemes(2);
        let i8 = DenseMatrix::identity(8);
        let a = distribute(&i8, &mut w, 2, &s, &s, "A").unwrap();
        let b = distribute(&i8, &mut w, 2, &s, &s, "B").unwrap();
        let out = ft_pdgemm(&a, &b, &mut w).unwrap();
        assert_eq!(out.steps, 4);
        assert!(out.recoveries.is_empty());
        assert_eq!(out.c.snapshot_global(&w).unwrap(), i8);
        assert!(out.c.check_consistency(&w).unwrap());
    }

    #[test]
    fn product_matches_dense_and_padding() {
        for (n, q, nb) in [(8, 3, 2), (7, 4, 3), (5, 3, 4), (1, 2, 1)] {
            let (mut w, fa, fb, a, b) = setup(n, q, nb, FaultPlan::none(), 1);
            let out = ft_pdgemm(&fa, &fb, &mut w).unwrap();
            let c = out.c.snapshot_global(&w).unwrap();
            let want = matmul(&a, &b).unwrap();
            assert!(c.max_abs_diff(&want) <= n as f64 * f64::EPSILON * 10.0, "{n} {q} {nb}");
            assert!(out.c.check_consistency(&w).unwrap());
        }
    }

    #[test]
    fn checksums_consistent_after_every_step() {
        let (mut w, fa, fb, ..) = setup(12, 3, 2, FaultPlan::none(), 2);
        let mut seen = Vec::new();
        ft_pdgemm_observed(&fa, &fb, &mut w, |s, world, c| {
            assert!(c.check_consistency(world).unwrap(), "step {s}");
            seen.push(s);
        })
        .unwrap();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
    }

    fn fault_free(n: usize, q: usize, nb: usize, seed: u64) -> DenseMatrix {
        let (mut w, fa, fb, ..) = setup(n, q, nb, FaultPlan::none(), seed);
        let out = ft_pdgemm(&fa, &fb, &mut w).unwrap();
        out.c.snapshot_global(&w).unwrap()
    }

    #[test]
    fn compute_rank_failure_mid_run() {
        let want = fault_free(8, 3, 2, 3);
        let (mut w, fa, fb, ..) = setup(8, 3, 2, FaultPlan::kill_at_step(Rank::new(1, 1), 2), 3);
        let out = ft_pdgemm(&fa, &fb, &mut w).unwrap();
        assert_eq!(out.recoveries.len(), 1);
        let rep = &out.recoveries[0];
        assert!(rep.success);
        assert_eq!(rep.recovered_rank, Rank::new(1, 1));
        assert_eq!(rep.consistent_step, Some(1));
        let c = out.c.snapshot_global(&w).unwrap();
        assert!(c.max_abs_diff(&want) <= 1e-10);
    }

    #[test]
    fn checksum_rank_failure() {
        let want = fault_free(12, 3, 2, 4);
        for victim in [Rank::new(0, 2), Rank::new(2, 1), Rank::new(2, 2)] {
            let (mut w, fa, fb, ..) = setup(12, 3, 2, FaultPlan::kill_at_step(victim, 3), 4);
            let out = ft_pdgemm(&fa, &fb, &mut w).unwrap();
            assert_eq!(out.recoveries[0].recovered_rank, victim);
            assert!(out.c.snapshot_global(&w).unwrap().max_abs_diff(&want) <= 1e-10);
            assert!(out.c.check_consistency(&w).unwrap());
        }
    }

    #[test]
    fn failure_before_any_update_redistributes() {
        let (mut w, fa, fb, ..) = setup(8, 3, 2, FaultPlan::kill_at_step(Rank::new(0, 1), 0), 5);
        let before_a = w.local(Rank::new(0, 1), "A").unwrap().clone();
        let before_b = w.local(Rank::new(0, 1), "B").unwrap().clone();
        let out = ft_pdgemm(&fa, &fb, &mut w).unwrap();
        let rep = &out.recoveries[0];
        assert_eq!(rep.consistent_step, None);
        assert_eq!(rep.replayed_panels, 0);
        assert!(w.local(Rank::new(0, 1), "A").unwrap().max_abs_diff(&before_a) <= 1e-15);
        assert!(w.local(Rank::new(0, 1), "B").unwrap().max_abs_diff(&before_b) <= 1e-15);
    }

    #[test]
    fn rebuilt_block_is_rowsum_minus_peers() {
        // 4x4 on a 3x3 world: every rank holds one 2x2 block
        let (mut w, fa, fb, ..) = setup(4, 3, 2, FaultPlan::none(), 6);
        let out = ft_pdgemm(&fa, &fb, &mut w).unwrap();
        let victim = Rank::new(1, 0);
        let rowsum = w.local(Rank::new(1, 2), C_SLOT).unwrap().clone();
        let peer = w.local(Rank::new(1, 1), C_SLOT).unwrap().clone();
        let original = w.local(victim, C_SLOT).unwrap().clone();
        w.kill(victim);
        w.respawn(victim).unwrap();
        let rebuilt = rebuild_block(&mut w, &out.c, victim, Route::Row).unwrap();
        let by_hand = rowsum.sub(&peer).unwrap();
        assert!(rebuilt.max_abs_diff(&by_hand) <= 1e-15);
        assert!(rebuilt.max_abs_diff(&original) <= 1e-14);
    }

    #[test]
    fn corner_rebuilds_agree_by_row_and_column() {
        let (mut w, fa, fb, ..) = setup(12, 3, 2, FaultPlan::none(), 7);
        let out = ft_pdgemm(&fa, &fb, &mut w).unwrap();
        let corner = Rank::new(2, 2);
        let original = w.local(corner, C_SLOT).unwrap().clone();
        w.kill(corner);
        w.respawn(corner).unwrap();
        let by_row = rebuild_block(&mut w, &out.c, corner, Route::Row).unwrap();
        let by_col = rebuild_block(&mut w, &out.c, corner, Route::Col).unwrap();
        let tol = 50.0 * 12.0 * f64::EPSILON * crate::dense::frobenius_norm(&original);
        assert!(by_row.max_abs_diff(&by_col) <= tol);
        assert!(by_row.max_abs_diff(&original) <= tol);
    }

    #[test]
    fn every_route_recovers_every_rank() {
        let (mut w, fa, fb, ..) = setup(6, 3, 1, FaultPlan::none(), 8);
        let out = ft_pdgemm(&fa, &fb, &mut w).unwrap();
        for victim in w.ranks().collect::<Vec<_>>() {
            let original = w.local(victim, C_SLOT).unwrap().clone();
            w.kill(victim);
            w.respawn(victim).unwrap();
            for route in [Route::Row, Route::Col] {
                let got = rebuild_block(&mut w, &out.c, victim, route).unwrap();
                assert!(got.max_abs_diff(&original) <= 1e-12, "{victim} {route:?}");
            }
            w.put(victim, C_SLOT, original);
            for m in [&fa, &fb] {
                let route = default_route(&w, victim);
                let blk = rebuild_block(&mut w, m, victim, route).unwrap();
                w.put(victim, m.slot(), blk);
            }
        }
    }

    #[test]
    fn double_failure_is_unrecoverable() {
        let plan: FaultPlan = "rank=0,0@step=1;rank=1,1@step=1".parse().unwrap();
        let (mut w, fa, fb, ..) = setup(8, 3, 2, plan, 9);
        match ft_pdgemm(&fa, &fb, &mut w) {
            Err(FtError::Unrecoverable { failed, .. }) => assert_eq!(failed.len(), 2),
            other => panic!("{other:?}"),
        }
        assert!(fa.is_degraded(&w));
    }

    #[test]
    fn failure_during_collect_is_recovered() {
        let want = fault_free(8, 3, 2, 10);
        let (mut w, fa, fb, ..) = setup(8, 3, 2, FaultPlan::kill_at_step(Rank::new(1, 0), 4), 10);
        let out = ft_pdgemm(&fa, &fb, &mut w).unwrap();
        assert_eq!(out.recoveries[0].consistent_step, Some(3));
        assert!(out.c.snapshot_global(&w).unwrap().max_abs_diff(&want) <= 1e-10);
    }

    #[test]
    fn message_conservation_with_failures() {
        let (mut w, fa, fb, ..) = setup(8, 3, 2, FaultPlan::kill_at_step(Rank::new(1, 1), 2), 11);
        ft_pdgemm(&fa, &fb, &mut w).unwrap();
        let s = w.stats();
        assert_eq!(s.sent, s.delivered + s.discarded + w.in_flight());
    }

    #[test]
    fn rejects_bad_operands() {
        let (mut w, fa, ..) = setup(4, 3, 2, FaultPlan::none(), 0);
        let s = schemes(2);
        let wide = distribute(&DenseMatrix::zeros(5, 4), &mut w, 2, &s, &s, "W").unwrap();
        assert!(ft_pdgemm(&fa, &wide, &mut w).is_err());
        let s3 = schemes(3);
        assert!(distribute(&DenseMatrix::zeros(4, 4), &mut w, 2, &s3, &s3, "X").is_err());
        assert!(distribute(&DenseMatrix::zeros(4, 4), &mut w, 0, &s, &s, "X").is_err());
    }
}
