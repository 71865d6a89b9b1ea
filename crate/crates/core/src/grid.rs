//! Deterministic simulated process grid.
//!
//! A [`GridWorld`] is a `q x q` array of virtual ranks driven by a single
//! sequential scheduler. Every send, receive, local compute, failure, notice
//! and respawn is appended to an ordered event log. Identical seeds, fault
//! plans and call sequences always produce identical logs.
//!
//! Failures follow a notify-on-communication model. A killed rank just
//! stops. Survivors find out only when one of their own sends, receives or
//! collectives touches the dead rank, or touches a rank that already knows.
//! Local compute never observes a failure.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dense::{DenseError, DenseMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rank {
    pub row: usize,
    pub col: usize,
}

impl Rank {
    pub const fn new(row: usize, col: usize) -> Self {
        Rank { row, col }
    }
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.row, self.col)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Row,
    Col,
}

/// When a scripted injection fires.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trigger {
    /// Once the global event clock reaches this value.
    AtClock(u64),
    /// Once the scheduler is in `step` (or later) and at least `offset`
    /// events into it. Steps past the last compute step are the final
    /// collection phase, so a trigger always fires in a complete run.
    AtStep { step: usize, offset: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Injection {
    pub victim: Rank,
    pub trigger: Trigger,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KillerMode {
    Scripted,
    /// `rate` is the expected number of kills per run: `floor(rate)` kills
    /// plus one more with probability `fract(rate)`, each at a uniformly
    /// random step, event offset and victim.
    Random {
        rate: f64,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaultPlan {
    pub injections: Vec<Injection>,
    pub mode: KillerMode,
}

impl FaultPlan {
    pub fn none() -> Self {
        FaultPlan {
            injections: Vec::new(),
            mode: KillerMode::Scripted,
        }
    }

    pub fn scripted(injections: Vec<Injection>) -> Self {
        FaultPlan {
            injections,
            mode: KillerMode::Scripted,
        }
    }

    pub fn random(rate: f64, seed: u64) -> Self {
        FaultPlan {
            injections: Vec::new(),
            mode: KillerMode::Random { rate, seed },
        }
    }

    /// Kill `victim` at the first event of `step`.
    pub fn kill_at_step(victim: Rank, step: usize) -> Self {
        Self::scripted(vec![Injection {
            victim,
            trigger: Trigger::AtStep { step, offset: 0 },
        }])
    }

    pub fn is_empty(&self) -> bool {
        self.injections.is_empty() && !matches!(self.mode, KillerMode::Random { rate, .. } if rate > 0.0)
    }

    /// Draws the random killer's injections for a run of `steps` steps of
    /// roughly `events_per_step` events each on a `q x q` grid.
    pub fn materialize_random(&self, q: usize, steps: usize, events_per_step: u64) -> Vec<Injection> {
        let KillerMode::Random { rate, seed } = self.mode else {
            return Vec::new();
        };
        if rate <= 0.0 || steps == 0 {
            return Vec::new();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut kills = rate.floor() as usize;
        if rng.gen::<f64>() < rate.fract() {
            kills += 1;
        }
        (0..kills)
            .map(|_| Injection {
                victim: Rank::new(rng.gen_range(0..q), rng.gen_range(0..q)),
                trigger: Trigger::AtStep {
                    step: rng.gen_range(0..steps),
                    offset: rng.gen_range(0..events_per_step.max(1)),
                },
            })
            .collect()
    }
}

impl fmt::Display for FaultPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = self
            .injections
            .iter()
            .map(|inj| match inj.trigger {
                Trigger::AtStep { step, offset: 0 } => format!("rank={}@step={step}", inj.victim),
                Trigger::AtStep { step, offset } => format!("rank={}@step={step}+{offset}", inj.victim),
                Trigger::AtClock(c) => format!("rank={}@clock={c}", inj.victim),
            })
            .collect();
        if let KillerMode::Random { rate, seed } = self.mode {
            parts.push(format!("random:rate={rate},seed={seed}"));
        }
        if parts.is_empty() {
            write!(f, "none")
        } else {
            write!(f, "{}", parts.join(";"))
        }
    }
}

impl FromStr for FaultPlan {
    type Err = GridError;

    /// Grammar: `none`, `rank=R,C@step=K[+OFFSET]`, `rank=R,C@clock=N`,
    /// `random:rate=F,seed=S`, several joined with `;`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |msg: String| GridError::FaultSpec(msg);
        let mut plan = FaultPlan::none();
        for item in s.split(';').map(str::trim).filter(|t| !t.is_empty()) {
            if item == "none" {
                continue;
            }
            if let Some(rest) = item.strip_prefix("random:") {
                let (mut rate, mut seed) = (None, None);
                for kv in rest.split(',') {
                    match kv.trim().split_once('=') {
                        Some(("rate", v)) => rate = Some(v.parse::<f64>().map_err(|e| bad(format!("{kv}: {e}")))?),
                        Some(("seed", v)) => seed = Some(v.parse::<u64>().map_err(|e| bad(format!("{kv}: {e}")))?),
                        _ => return Err(bad(format!("unknown random killer field {kv:?}"))),
                    }
                }
                let rate = rate.ok_or_else(|| bad("random killer needs rate=".into()))?;
                if !(rate >= 0.0 && rate.is_finite()) {
                    return Err(bad(format!("rate must be a nonnegative number, got {rate}")));
                }
                plan.mode = KillerMode::Random {
                    rate,
                    seed: seed.unwrap_or(0),
                };
                continue;
            }
            let rest = item
                .strip_prefix("rank=")
                .ok_or_else(|| bad(format!("expected rank=R,C@step=K, got {item:?}")))?;
            let (rank, when) = rest
                .split_once('@')
                .ok_or_else(|| bad(format!("missing '@' in {item:?}")))?;
            let (r, c) = rank
                .split_once(',')
                .ok_or_else(|| bad(format!("rank must be R,C in {item:?}")))?;
            let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| bad(format!("{t:?}: {e}")));
            let victim = Rank::new(parse(r)?, parse(c)?);
            let trigger = if let Some(k) = when.strip_prefix("step=") {
                let (step, offset) = match k.split_once('+') {
                    Some((s, o)) => (parse(s)?, parse(o)? as u64),
                    None => (parse(k)?, 0),
                };
                Trigger::AtStep { step, offset }
            } else if let Some(n) = when.strip_prefix("clock=") {
                Trigger::AtClock(parse(n)? as u64)
            } else {
                return Err(bad(format!("unknown trigger {when:?}")));
            };
            plan.injections.push(Injection { victim, trigger });
        }
        Ok(plan)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Matrix(DenseMatrix),
    Control(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub tag: String,
    pub payload: Payload,
    pub src: Rank,
    pub dst: Rank,
    pub size_words: usize,
}

impl Message {
    pub fn into_matrix(self) -> Option<DenseMatrix> {
        match self.payload {
            Payload::Matrix(m) => Some(m),
            Payload::Control(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Send,
    Recv,
    Compute,
    Fail,
    Notice,
    Respawn,
    Sync,
    Discard,
    Phase,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EventKind::Send => "send",
            EventKind::Recv => "recv",
            EventKind::Compute => "compute",
            EventKind::Fail => "fail",
            EventKind::Notice => "notice",
            EventKind::Respawn => "respawn",
            EventKind::Sync => "sync",
            EventKind::Discard => "discard",
            EventKind::Phase => "phase",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub clock: u64,
    pub kind: EventKind,
    pub src: Option<Rank>,
    pub dst: Option<Rank>,
    pub tag: String,
    pub size_words: usize,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = |x: Option<Rank>| x.map_or_else(|| "-".to_string(), |r| r.to_string());
        write!(
            f,
            "{} {} {} {} {} {}",
            self.clock,
            self.kind,
            r(self.src),
            r(self.dst),
            self.tag,
            self.size_words
        )
    }
}

/// Raised at a communication point that touched a failed rank, or a rank
/// already busy handling a failure.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FailureNotice {
    pub observed_by: Rank,
    pub failed: Vec<Rank>,
    pub clock: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("failure notice at {} (clock {}): failed ranks {:?}", .0.observed_by, .0.clock, .0.failed)]
    Notice(FailureNotice),
    #[error("invalid grid side {0} (need q >= 2)")]
    InvalidGrid(usize),
    #[error("rank {0} out of range")]
    OutOfRange(Rank),
    #[error("protocol error: rank {0} is not failed")]
    NotFailed(Rank),
    #[error("rank {0} is dead")]
    DeadRank(Rank),
    #[error("no message from {src} to {dst}")]
    NoMessage { src: Rank, dst: Rank },
    #[error("rank {rank} has no local slot {slot:?}")]
    MissingSlot { rank: Rank, slot: String },
    #[error("bad fault spec: {0}")]
    FaultSpec(String),
    #[error(transparent)]
    Dense(#[from] DenseError),
}

impl GridError {
    pub fn is_notice(&self) -> bool {
        matches!(self, GridError::Notice(_))
    }
}

/// Per-rank record.
#[derive(Clone, Debug, Default)]
pub struct RankState {
    pub alive: bool,
    pub incarnation: u32,
    /// Set once this rank has observed a failure and stopped normal work.
    pub notified: bool,
    pub known_failures: BTreeSet<Rank>,
    pub slots: BTreeMap<String, DenseMatrix>,
    /// Last received broadcast per buffer name, tagged with its step.
    pub buffers: BTreeMap<String, (usize, DenseMatrix)>,
    /// Last completed algorithm step.
    pub progress: Option<usize>,
}

impl RankState {
    fn fresh() -> Self {
        RankState {
            alive: true,
            ..Default::default()
        }
    }

    fn wipe(&mut self) {
        self.notified = false;
        self.known_failures.clear();
        self.slots.clear();
        self.buffers.clear();
        self.progress = None;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CommStats {
    pub sent: u64,
    pub delivered: u64,
    pub discarded: u64,
    pub words_sent: u64,
}

#[derive(Clone, Debug)]
struct Armed {
    injection: Injection,
    fired: bool,
}

#[derive(Clone, Debug)]
pub struct GridWorld {
    q: usize,
    seed: u64,
    ranks: Vec<RankState>,
    mailboxes: BTreeMap<(Rank, Rank), VecDeque<Message>>,
    clock: u64,
    plan: FaultPlan,
    armed: Vec<Armed>,
    random_armed: bool,
    step: usize,
    step_clock: u64,
    fail_clock: BTreeMap<Rank, (u64, CommStats)>,
    events: Vec<Event>,
    stats: CommStats,
}

/// Builds a `q x q` world. Row `q-1` and column `q-1` hold checksums; the
/// `(q-1) x (q-1)` remainder holds data.
pub fn spawn_grid(q: usize, fault_plan: FaultPlan, seed: u64) -> Result<GridWorld, GridError> {
    if q < 2 {
        return Err(GridError::InvalidGrid(q));
    }
    for inj in &fault_plan.injections {
        if inj.victim.row >= q || inj.victim.col >= q {
            return Err(GridError::OutOfRange(inj.victim));
        }
    }
    let armed = fault_plan
        .injections
        .iter()
        .map(|&injection| Armed {
            injection,
            fired: false,
        })
        .collect();
    Ok(GridWorld {
        q,
        seed,
        ranks: (0..q * q).map(|_| RankState::fresh()).collect(),
        mailboxes: BTreeMap::new(),
        clock: 0,
        plan: fault_plan,
        armed,
        random_armed: false,
        step: 0,
        step_clock: 0,
        fail_clock: BTreeMap::new(),
        events: Vec::new(),
        stats: CommStats::default(),
    })
}

impl GridWorld {
    pub fn q(&self) -> usize {
        self.q
    }

    /// Side of the data-holding subgrid.
    pub fn compute_side(&self) -> usize {
        self.q - 1
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fault_plan(&self) -> &FaultPlan {
        &self.plan
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn stats(&self) -> CommStats {
        self.stats
    }

    pub fn in_flight(&self) -> u64 {
        self.mailboxes.values().map(|q| q.len() as u64).sum()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// One line per event: `clock kind src dst tag size_words`.
    pub fn event_log_text(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            s.push_str(&e.to_string());
            s.push('\n');
        }
        s
    }

    pub fn ranks(&self) -> impl Iterator<Item = Rank> + '_ {
        (0..self.q * self.q).map(|i| Rank::new(i / self.q, i % self.q))
    }

    pub fn is_checksum_rank(&self, r: Rank) -> bool {
        r.row == self.q - 1 || r.col == self.q - 1
    }

    /// All ranks on one process row or column, in index order.
    pub fn line(&self, axis: Axis, index: usize) -> Vec<Rank> {
        (0..self.q)
            .map(|i| match axis {
                Axis::Row => Rank::new(index, i),
                Axis::Col => Rank::new(i, index),
            })
            .collect()
    }

    fn idx(&self, r: Rank) -> usize {
        assert!(r.row < self.q && r.col < self.q, "rank {r} out of range");
        r.row * self.q + r.col
    }

    pub fn rank(&self, r: Rank) -> &RankState {
        &self.ranks[self.idx(r)]
    }

    pub fn rank_mut(&mut self, r: Rank) -> &mut RankState {
        let i = self.idx(r);
        &mut self.ranks[i]
    }

    pub fn is_alive(&self, r: Rank) -> bool {
        self.rank(r).alive
    }

    pub fn is_notified(&self, r: Rank) -> bool {
        self.rank(r).notified
    }

    pub fn failed_ranks(&self) -> Vec<Rank> {
        self.ranks().filter(|&r| !self.is_alive(r)).collect()
    }

    pub fn all_live_notified(&self) -> bool {
        self.ranks().filter(|&r| self.is_alive(r)).all(|r| self.is_notified(r))
    }

    /// Clock of the most recent failure of `r`.
    pub fn failure_clock(&self, r: Rank) -> Option<u64> {
        self.fail_clock.get(&r).map(|(c, _)| *c)
    }

    /// Clock and communication counters at the most recent failure of `r`.
    pub fn failure_snapshot(&self, r: Rank) -> Option<(u64, CommStats)> {
        self.fail_clock.get(&r).copied()
    }

    pub fn local(&self, r: Rank, slot: &str) -> Option<&DenseMatrix> {
        self.rank(r).slots.get(slot)
    }

    /// Places data directly into a rank's memory. No event is logged; use
    /// for initial distribution only.
    pub fn put(&mut self, r: Rank, slot: &str, m: DenseMatrix) {
        self.rank_mut(r).slots.insert(slot.to_string(), m);
    }

    fn log(&mut self, kind: EventKind, src: Option<Rank>, dst: Option<Rank>, tag: &str, size_words: usize) {
        self.events.push(Event {
            clock: self.clock,
            kind,
            src,
            dst,
            tag: tag.to_string(),
            size_words,
        });
        self.clock += 1;
    }

    /// Logs a marker event, e.g. a recovery phase boundary.
    pub fn mark(&mut self, tag: &str) {
        self.log(EventKind::Phase, None, None, tag, 0);
    }

    pub fn begin_step(&mut self, step: usize) {
        self.step = step;
        self.step_clock = self.clock;
    }

    /// Arms the random killer, if the plan has one, for a run of the given
    /// shape. Only the first call has an effect.
    pub fn arm_random_killer(&mut self, steps: usize, events_per_step: u64) {
        if self.random_armed {
            return;
        }
        self.random_armed = true;
        for injection in self.plan.materialize_random(self.q, steps, events_per_step) {
            self.armed.push(Armed {
                injection,
                fired: false,
            });
        }
    }

    /// Number of injections that have fired so far.
    pub fn kills_fired(&self) -> usize {
        self.armed.iter().filter(|a| a.fired).count()
    }

    pub fn kills_armed(&self) -> usize {
        self.armed.len()
    }

    /// Fires every injection whose trigger has elapsed. A victim that is
    /// already dead is left armed until it has been respawned.
    pub fn step_fault_check(&mut self) {
        for i in 0..self.armed.len() {
            let Armed { injection, fired } = self.armed[i];
            if fired {
                continue;
            }
            let due = match injection.trigger {
                Trigger::AtClock(c) => self.clock >= c,
                Trigger::AtStep { step, offset } => {
                    self.step > step || (self.step == step && self.clock - self.step_clock >= offset)
                }
            };
            if due && self.is_alive(injection.victim) {
                self.armed[i].fired = true;
                self.kill(injection.victim);
            }
        }
    }

    /// Kills `r` immediately. Its memory is lost; messages already in
    /// flight to it stay queued until it is respawned.
    pub fn kill(&mut self, r: Rank) {
        if !self.is_alive(r) {
            return;
        }
        let st = self.rank_mut(r);
        st.alive = false;
        st.wipe();
        self.fail_clock.insert(r, (self.clock, self.stats));
        self.log(EventKind::Fail, Some(r), Some(r), "-", 0);
    }

    /// Puts each live rank of `ranks` into the notified state and records
    /// what it learned.
    pub fn notify(&mut self, ranks: &[Rank], failed: &[Rank], tag: &str) {
        let src = failed.first().copied();
        for &r in ranks {
            if !self.is_alive(r) {
                continue;
            }
            let st = self.rank_mut(r);
            let news = failed.iter().any(|f| !st.known_failures.contains(f));
            if st.notified && !news {
                continue;
            }
            st.notified = true;
            st.known_failures.extend(failed.iter().copied());
            self.log(EventKind::Notice, src, Some(r), tag, 0);
        }
    }

    /// Leaves the notified state on every live rank. Known failures are
    /// kept until the dead rank is respawned.
    pub fn clear_notices(&mut self) {
        for st in &mut self.ranks {
            st.notified = false;
        }
    }

    /// What a rank that has to talk to `peer` learns when `peer` cannot
    /// take part: the peer itself if it is dead, otherwise what it knows.
    fn blocking_failures(&self, peer: Rank) -> Option<Vec<Rank>> {
        if !self.is_alive(peer) {
            Some(vec![peer])
        } else if self.is_notified(peer) {
            let mut known: Vec<Rank> = self.rank(peer).known_failures.iter().copied().collect();
            if known.is_empty() {
                known = self.failed_ranks();
            }
            Some(known)
        } else {
            None
        }
    }

    fn raise(&mut self, observed_by: Rank, failed: Vec<Rank>, audience: &[Rank], tag: &str) -> GridError {
        let clock = self.clock;
        let mut everyone = vec![observed_by];
        everyone.extend(audience.iter().copied().filter(|&r| r != observed_by));
        self.notify(&everyone, &failed, tag);
        GridError::Notice(FailureNotice {
            observed_by,
            failed,
            clock,
        })
    }

    pub fn send(&mut self, src: Rank, dst: Rank, tag: &str, payload: DenseMatrix) -> Result<(), GridError> {
        self.send_payload(src, dst, tag, Payload::Matrix(payload))
    }

    pub fn send_payload(&mut self, src: Rank, dst: Rank, tag: &str, payload: Payload) -> Result<(), GridError> {
        self.step_fault_check();
        if !self.is_alive(src) {
            return Err(GridError::DeadRank(src));
        }
        if let Some(failed) = self.blocking_failures(dst) {
            return Err(self.raise(src, failed, &[], tag));
        }
        let size_words = match &payload {
            Payload::Matrix(m) => m.rows() * m.cols(),
            Payload::Control(_) => 1,
        };
        self.mailboxes.entry((src, dst)).or_default().push_back(Message {
            tag: tag.to_string(),
            payload,
            src,
            dst,
            size_words,
        });
        self.stats.sent += 1;
        self.stats.words_sent += size_words as u64;
        self.log(EventKind::Send, Some(src), Some(dst), tag, size_words);
        Ok(())
    }

    /// Takes the oldest message on the `src -> dst` channel.
    pub fn recv(&mut self, dst: Rank, src: Rank) -> Result<Message, GridError> {
        self.step_fault_check();
        if !self.is_alive(dst) {
            return Err(GridError::DeadRank(dst));
        }
        if let Some(msg) = self.mailboxes.get_mut(&(src, dst)).and_then(VecDeque::pop_front) {
            self.stats.delivered += 1;
            self.log(EventKind::Recv, Some(src), Some(dst), &msg.tag.clone(), msg.size_words);
            return Ok(msg);
        }
        if let Some(failed) = self.blocking_failures(src) {
            return Err(self.raise(dst, failed, &[], "recv"));
        }
        Err(GridError::NoMessage { src, dst })
    }

    fn recv_matrix(&mut self, dst: Rank, src: Rank) -> Result<DenseMatrix, GridError> {
        let msg = self.recv(dst, src)?;
        let tag = msg.tag.clone();
        msg.into_matrix()
            .ok_or_else(|| GridError::FaultSpec(format!("expected a matrix payload for {tag}")))
    }

    /// Local computation on one rank. Returns `None` if the rank is dead.
    /// Never raises a failure notice.
    pub fn compute<R>(
        &mut self,
        r: Rank,
        tag: &str,
        size_words: usize,
        f: impl FnOnce(&mut RankState) -> R,
    ) -> Option<R> {
        self.step_fault_check();
        if !self.is_alive(r) {
            return None;
        }
        self.log(EventKind::Compute, Some(r), Some(r), tag, size_words);
        Some(f(self.rank_mut(r)))
    }

    /// Passes `payload` hop by hop around the ring of `axis` line `index`,
    /// starting at `root`, and stores it in buffer `buffer` of every rank
    /// reached (root included), tagged with `step`.
    ///
    /// Ranks the root already knows to be dead are skipped. Running into a
    /// dead rank, or a rank already handling a failure, aborts the ring and
    /// notifies every live participant. Returns the ranks that received the
    /// payload.
    pub fn ring_broadcast(
        &mut self,
        axis: Axis,
        index: usize,
        root: Rank,
        buffer: &str,
        step: usize,
        payload: &DenseMatrix,
    ) -> Result<Vec<Rank>, GridError> {
        let line = self.line(axis, index);
        let start = line
            .iter()
            .position(|&r| r == root)
            .ok_or(GridError::OutOfRange(root))?;
        let known: BTreeSet<Rank> = if self.is_alive(root) {
            self.rank(root).known_failures.clone()
        } else {
            BTreeSet::new()
        };
        let ring: Vec<Rank> = (0..line.len())
            .map(|i| line[(start + i) % line.len()])
            .filter(|r| *r == root || !known.contains(r))
            .collect();

        self.step_fault_check();
        if let Some(failed) = self.blocking_failures(root) {
            // the rest of the ring is left waiting on the root
            let Some(&first) = ring.iter().skip(1).find(|&&r| self.is_alive(r)) else {
                return Ok(Vec::new());
            };
            return Err(self.raise(first, failed, &ring, buffer));
        }
        self.rank_mut(root)
            .buffers
            .insert(buffer.to_string(), (step, payload.clone()));

        let mut delivered = Vec::new();
        for hop in ring.windows(2) {
            let (s, d) = (hop[0], hop[1]);
            if !self.is_alive(s) {
                // s died after receiving; d waits on it
                if !self.is_alive(d) {
                    continue;
                }
                return Err(self.raise(d, vec![s], &ring, buffer));
            }
            if let Err(e) = self.send(s, d, buffer, payload.clone()) {
                return Err(match e {
                    GridError::Notice(n) => self.raise(n.observed_by, n.failed, &ring, buffer),
                    GridError::DeadRank(_) => {
                        let Some(&w) = ring.iter().find(|&&r| r != s && self.is_alive(r)) else {
                            return Ok(delivered);
                        };
                        self.raise(w, vec![s], &ring, buffer)
                    }
                    other => other,
                });
            }
            match self.recv_matrix(d, s) {
                Ok(m) => {
                    self.rank_mut(d).buffers.insert(buffer.to_string(), (step, m));
                    delivered.push(d);
                }
                // d died on receipt; the message stays queued for its dead
                // incarnation and the next hop reports it
                Err(GridError::DeadRank(_)) => {}
                Err(GridError::Notice(n)) => return Err(self.raise(n.observed_by, n.failed, &ring, buffer)),
                Err(other) => return Err(other),
            }
        }
        Ok(delivered)
    }

    /// Checks that every rank in `group` can take part in a collective.
    fn collective_guard(&mut self, group: &[Rank], tag: &str) -> Result<(), GridError> {
        self.step_fault_check();
        let mut failed = BTreeSet::new();
        for &r in group {
            if let Some(f) = self.blocking_failures(r) {
                failed.extend(f);
            }
        }
        if failed.is_empty() {
            return Ok(());
        }
        let Some(&observer) = group.iter().find(|&&r| self.is_alive(r)) else {
            return Err(GridError::DeadRank(group[0]));
        };
        Err(self.raise(observer, failed.into_iter().collect(), group, tag))
    }

    fn slot_of(&self, r: Rank, slot: &str) -> Result<DenseMatrix, GridError> {
        self.local(r, slot).cloned().ok_or_else(|| GridError::MissingSlot {
            rank: r,
            slot: slot.to_string(),
        })
    }

    /// Weighted sum `sum_i w_i * slot_i` delivered to `root`, accumulated in
    /// ascending rank order. Aborts with a notice to every participant if
    /// any of them has failed; nothing is delivered in that case.
    pub fn reduce(
        &mut self,
        participants: &[(Rank, f64)],
        slot: &str,
        root: Rank,
        tag: &str,
    ) -> Result<DenseMatrix, GridError> {
        let mut parts = participants.to_vec();
        parts.sort_by_key(|(r, _)| *r);
        let mut group: Vec<Rank> = parts.iter().map(|(r, _)| *r).collect();
        if !group.contains(&root) {
            group.push(root);
        }
        self.collective_guard(&group, tag)?;
        let mut acc: Option<DenseMatrix> = None;
        for (r, w) in parts {
            let contribution = if r == root {
                self.slot_of(r, slot)?.scaled(w)
            } else {
                let m = self.slot_of(r, slot)?.scaled(w);
                self.send(r, root, tag, m)
                    .and_then(|_| self.recv_matrix(root, r))
                    .map_err(|e| self.abort_collective(e, &group, tag))?
            };
            match acc.as_mut() {
                None => {
                    let mut z = DenseMatrix::zeros(contribution.rows(), contribution.cols());
                    z.axpy(1.0, &contribution)?;
                    acc = Some(z);
                }
                Some(a) => a.axpy(1.0, &contribution)?,
            }
        }
        acc.ok_or_else(|| GridError::MissingSlot {
            rank: root,
            slot: slot.to_string(),
        })
    }

    /// Collects `slot` from every participant at `root`, in ascending rank
    /// order.
    pub fn gather(
        &mut self,
        participants: &[Rank],
        slot: &str,
        root: Rank,
        tag: &str,
    ) -> Result<Vec<(Rank, DenseMatrix)>, GridError> {
        let mut parts = participants.to_vec();
        parts.sort();
        let mut group = parts.clone();
        if !group.contains(&root) {
            group.push(root);
        }
        self.collective_guard(&group, tag)?;
        let mut out = Vec::with_capacity(parts.len());
        for r in parts {
            let m = self.slot_of(r, slot)?;
            if r == root {
                out.push((r, m));
                continue;
            }
            self.send(r, root, tag, m)
                .map_err(|e| self.abort_collective(e, &group, tag))?;
            let m = self
                .recv_matrix(root, r)
                .map_err(|e| self.abort_collective(e, &group, tag))?;
            out.push((r, m));
        }
        Ok(out)
    }

    fn abort_collective(&mut self, e: GridError, group: &[Rank], tag: &str) -> GridError {
        match e {
            GridError::Notice(n) => self.raise(n.observed_by, n.failed, group, tag),
            GridError::DeadRank(dead) => match group.iter().find(|&&r| self.is_alive(r)) {
                Some(&w) => self.raise(w, vec![dead], group, tag),
                None => GridError::DeadRank(dead),
            },
            other => other,
        }
    }

    /// Replaces failed rank `r` with a blank incarnation.
    ///
    /// Messages still queued for the dead incarnation are discarded. The
    /// respawn is a global synchronization: every live rank logs a sync
    /// event, leaves the notified state and forgets `r` as failed.
    pub fn respawn(&mut self, r: Rank) -> Result<(), GridError> {
        if self.is_alive(r) {
            return Err(GridError::NotFailed(r));
        }
        let stale: Vec<(Rank, Rank)> = self
            .mailboxes
            .iter()
            .filter(|((_, dst), q)| *dst == r && !q.is_empty())
            .map(|(k, _)| *k)
            .collect();
        for key in stale {
            let msgs: Vec<Message> = self
                .mailboxes
                .get_mut(&key)
                .map(|q| q.drain(..).collect())
                .unwrap_or_default();
            for m in msgs {
                self.stats.discarded += 1;
                self.log(EventKind::Discard, Some(m.src), Some(m.dst), &m.tag, m.size_words);
            }
        }
        let st = self.rank_mut(r);
        st.wipe();
        st.alive = true;
        st.incarnation += 1;
        self.log(EventKind::Respawn, None, Some(r), "-", 0);
        let live: Vec<Rank> = self.ranks().filter(|&x| x != r && self.is_alive(x)).collect();
        for x in live {
            let st = self.rank_mut(x);
            st.notified = false;
            st.known_failures.remove(&r);
            self.log(EventKind::Sync, Some(r), Some(x), "respawn", 0);
        }
        Ok(())
    }
}
