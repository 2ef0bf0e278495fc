//! Distributed initial bi-tree construction.
//!
//! The protocol proceeds in rounds, one per length class `[2^(r-1), 2^r)`.
//! Each round holds `lambda1 * ceil(log2 n)` slot-pairs. Per slot-pair every
//! active node is a broadcaster with probability `p`, else a listener:
//! broadcasters transmit in the first slot; a listener that decoded a
//! broadcast from within the round's length class acknowledges with
//! probability `p` in the second slot, storing the link pair. A broadcaster
//! decoding an ack addressed to it stores the pair and becomes inactive; the
//! acknowledging listener is its parent. The last active node is the root.
//!
//! A listener can store a failed link (its ack may be lost to interference);
//! [`reconcile_stray_links`] drops records not held by both endpoints.
//!
//! Rounds whose length class contains no active pair are fast-forwarded:
//! no acceptance is possible in them, so skipping the slots cannot change
//! any outcome (substreams are keyed by slot index, so later draws are
//! unaffected).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Instance, ModelParams, NodeId, FEAS_TOL};
use crate::rng::{salt, RngStream};
use crate::sim::{resolve_slot, Message, MessageTag, NodeAction, Trace};
use crate::tree::BiTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Constants from the analysis; p is astronomically small.
    Theory,
    /// Desk-scale constants; every invariant check still runs.
    Practical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitParams {
    pub mode: InitMode,
    /// Broadcaster (and acknowledgment) probability, at most 1/2.
    pub p: f64,
    /// Slot-pairs per round are `lambda1 * ceil(log2 n)`.
    pub lambda1: f64,
}

impl Default for InitParams {
    fn default() -> Self {
        InitParams::practical(0.25, 64.0)
    }
}

impl InitParams {
    pub fn practical(p: f64, lambda1: f64) -> Self {
        InitParams {
            mode: InitMode::Practical,
            p,
            lambda1,
        }
    }

    /// Theory constants: `p = (64 (1 + 6 beta 2^alpha / (alpha - 2)))^-1`
    /// and `lambda1 = 80 / p^2`.
    pub fn theory(model: &ModelParams) -> Self {
        let p = theory_p_bound(model);
        InitParams {
            mode: InitMode::Theory,
            p,
            lambda1: 80.0 / (p * p),
        }
    }

    pub fn validate(&self, model: &ModelParams) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 0.5) {
            return Err(Error::bad_input(format!("p must be in (0, 1/2], got {}", self.p)));
        }
        if !(self.lambda1 >= 1.0) {
            return Err(Error::bad_input(format!("lambda1 must be >= 1, got {}", self.lambda1)));
        }
        if self.mode == InitMode::Theory {
            let bound = theory_p_bound(model);
            if self.p > bound * (1.0 + 1e-12) {
                return Err(Error::bad_input(format!(
                    "theory mode requires p <= {bound}, got {}",
                    self.p
                )));
            }
            if self.lambda1 < 80.0 / (self.p * self.p) * (1.0 - 1e-12) {
                return Err(Error::bad_input(format!(
                    "theory mode requires lambda1 = 80 / p^2 >= {}, got {}",
                    80.0 / (self.p * self.p),
                    self.lambda1
                )));
            }
        }
        Ok(())
    }

    pub fn slot_pairs_per_round(&self, n: usize) -> u64 {
        (self.lambda1 * f64::from(ceil_log2(n))).ceil() as u64
    }
}

pub fn theory_p_bound(model: &ModelParams) -> f64 {
    1.0 / (64.0 * (1.0 + 6.0 * model.beta * 2f64.powf(model.alpha) / (model.alpha - 2.0)))
}

pub fn ceil_log2(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}

/// Smallest round whose length class `[2^(r-1), 2^r)` contains `d`.
/// Comparison-based so it is exactly consistent with the acceptance rule.
pub fn round_of_length(d: f64) -> u32 {
    let mut r = 1u32;
    while d >= pow2(r) && r < 64 {
        r += 1;
    }
    r
}

#[inline]
pub fn pow2(r: u32) -> f64 {
    (1u64 << r) as f64
}

/// Transmit power for round `r`: `2 beta N 2^(r alpha)`, which guarantees
/// `c(u, v) <= 2 beta` for every `d(u, v)` in the round's class. A zero noise
/// floor is substituted with 1 (any positive power works then, the formula
/// would degenerate to 0).
pub fn round_power(r: u32, model: &ModelParams) -> f64 {
    2.0 * model.beta * model.noise_floor() * 2f64.powf(f64::from(r) * model.alpha)
}

/// A link pair as stored by a node: `child -> parent` formed in `round`,
/// stamped with the broadcast and ack slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairRecord {
    pub child: NodeId,
    pub parent: NodeId,
    pub slot_up: u64,
    pub slot_down: u64,
    pub round: u32,
}

/// Keeps a pair only when both endpoints recorded it (the broadcaster records
/// only on ack decode, so one-sided records are listener-side strays).
/// Returns the kept pairs and the stray records.
pub fn reconcile_stray_links(
    stores: &BTreeMap<NodeId, Vec<PairRecord>>,
) -> (Vec<PairRecord>, Vec<PairRecord>) {
    let mut count: BTreeMap<PairRecord, usize> = BTreeMap::new();
    for records in stores.values() {
        for r in records {
            *count.entry(*r).or_insert(0) += 1;
        }
    }
    let mut kept = Vec::new();
    let mut strays = Vec::new();
    for (rec, c) in count {
        match c {
            2 => kept.push(rec),
            1 => strays.push(rec),
            _ => unreachable!("a pair record can live in at most two stores"),
        }
    }
    (kept, strays)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub active_at_start: usize,
    /// Minimum distance between active nodes at round start (None if fewer
    /// than two are active).
    pub min_active_dist: Option<f64>,
    /// Whether that minimum is at least `2^(r-1)`.
    pub distance_invariant_ok: bool,
    /// No active pair lies in this round's length class; slots elapse with
    /// nothing happening.
    pub fast_forwarded: bool,
    pub links_formed: usize,
    pub stray_records: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RoundLog {
    pub rounds: Vec<RoundRecord>,
    pub total_slots: u64,
    pub stray_links: usize,
}

impl RoundLog {
    pub fn distance_invariant_held(&self) -> bool {
        self.rounds.iter().all(|r| r.distance_invariant_ok)
    }
}

#[derive(Debug)]
pub struct InitRun {
    pub tree: BiTree,
    pub trace: Trace,
    pub log: RoundLog,
}

/// Diagnostic payload when more than one active node remains.
#[derive(Debug)]
pub struct InitFailure {
    pub active: Vec<NodeId>,
    /// Reconciled links that did form (a forest).
    pub forest: Vec<PairRecord>,
    pub trace: Trace,
    pub log: RoundLog,
}

impl From<Box<InitFailure>> for Error {
    fn from(f: Box<InitFailure>) -> Error {
        Error::NotConnected {
            active: f.active.len(),
        }
    }
}

/// Runs the construction on the whole instance.
pub fn run_init(
    inst: &Instance,
    params: &InitParams,
    model: &ModelParams,
    seed: u64,
) -> std::result::Result<InitRun, Box<InitFailure>> {
    let participants: Vec<usize> = (0..inst.len()).collect();
    run_init_on(inst, &participants, params, model, seed)
}

/// Runs the construction on a subset of nodes (used by the capacity loop,
/// whose iterations re-run the protocol on the surviving top-level nodes).
pub fn run_init_on(
    inst: &Instance,
    participants: &[usize],
    params: &InitParams,
    model: &ModelParams,
    seed: u64,
) -> std::result::Result<InitRun, Box<InitFailure>> {
    params.validate(model).expect("invalid init params");
    model.validate().expect("invalid model params");

    let n = inst.len();
    let rng = RngStream::new(seed);
    let mut trace = Trace::default();
    let mut log = RoundLog::default();
    let mut stores: Vec<Vec<PairRecord>> = vec![Vec::new(); n];

    let mut active: Vec<bool> = vec![false; n];
    for &i in participants {
        active[i] = true;
    }
    let mut active_list: Vec<usize> = participants.to_vec();
    active_list.sort_unstable();
    active_list.dedup();

    if active_list.len() <= 1 {
        let root = inst.id_of(*active_list.first().expect("at least one participant"));
        let tree = BiTree::from_uplinks(inst, root, Vec::new()).expect("empty tree");
        return Ok(InitRun { tree, trace, log });
    }

    // Rounds cover every possible active-pair distance.
    let max_pair_dist = {
        let mut m: f64 = 0.0;
        for (a, &i) in active_list.iter().enumerate() {
            for &j in &active_list[a + 1..] {
                m = m.max(inst.dist_idx(i, j));
            }
        }
        m
    };
    let rounds = round_of_length(max_pair_dist);
    let pairs_per_round = params.slot_pairs_per_round(active_list.len());

    let mut slot: u64 = 0;
    'rounds: for r in 1..=rounds {
        if active_list.len() == 1 {
            break;
        }
        let lo = pow2(r - 1);
        let hi = pow2(r);

        let mut min_active = f64::INFINITY;
        let mut any_in_class = false;
        for (a, &i) in active_list.iter().enumerate() {
            for &j in &active_list[a + 1..] {
                let d = inst.dist_idx(i, j);
                min_active = min_active.min(d);
                if d >= lo && d < hi {
                    any_in_class = true;
                }
            }
        }

        let round_rec_idx = log.rounds.len();
        log.rounds.push(RoundRecord {
            round: r,
            active_at_start: active_list.len(),
            min_active_dist: Some(min_active),
            distance_invariant_ok: min_active >= lo - FEAS_TOL,
            fast_forwarded: !any_in_class,
            links_formed: 0,
            stray_records: 0,
        });

        if !any_in_class {
            slot += 2 * pairs_per_round;
            continue;
        }

        let power = round_power(r, model);
        for _pair in 0..pairs_per_round {
            if active_list.len() == 1 {
                break 'rounds;
            }
            let slot1 = slot + 1;
            let slot2 = slot + 2;
            slot = slot2;

            // First slot: broadcasters transmit, other active nodes listen.
            let mut actions = vec![NodeAction::Idle; n];
            let mut broadcaster = vec![false; n];
            for &i in &active_list {
                let id = inst.id_of(i);
                if rng.coin(u64::from(id), slot1, salt::ROLE) < params.p {
                    broadcaster[i] = true;
                    let node = &inst.nodes()[i];
                    actions[i] = NodeAction::Transmit {
                        message: Message {
                            sender: id,
                            x: node.x,
                            y: node.y,
                            tag: MessageTag::Broadcast,
                        },
                        power,
                    };
                } else {
                    actions[i] = NodeAction::Listen;
                }
            }
            let out1 = resolve_slot(inst, model, slot1, &actions).expect("valid actions");
            trace.push_outcome(inst, &out1);

            // Second slot: qualifying listeners acknowledge with probability
            // p; broadcasters listen for acks.
            let mut actions2 = vec![NodeAction::Idle; n];
            for &i in &active_list {
                if broadcaster[i] {
                    actions2[i] = NodeAction::Listen;
                }
            }
            for &v in &active_list {
                if broadcaster[v] {
                    continue;
                }
                let Some(msg) = out1.decoded[v] else { continue };
                if msg.tag != MessageTag::Broadcast {
                    continue;
                }
                let u = inst.idx(msg.sender).expect("sender exists");
                let d = inst.dist_idx(u, v);
                if !(d >= lo && d < hi) {
                    continue; // outside this round's class: ignored
                }
                let v_id = inst.id_of(v);
                if rng.coin(u64::from(v_id), slot2, salt::ACK) < params.p {
                    stores[v].push(PairRecord {
                        child: msg.sender,
                        parent: v_id,
                        slot_up: slot1,
                        slot_down: slot2,
                        round: r,
                    });
                    let node = &inst.nodes()[v];
                    actions2[v] = NodeAction::Transmit {
                        message: Message {
                            sender: v_id,
                            x: node.x,
                            y: node.y,
                            tag: MessageTag::Ack { target: msg.sender },
                        },
                        power,
                    };
                }
            }
            let out2 = resolve_slot(inst, model, slot2, &actions2).expect("valid actions");
            trace.push_outcome(inst, &out2);

            let mut formed = false;
            for &u in &active_list {
                if !broadcaster[u] {
                    continue;
                }
                let Some(msg) = out2.decoded[u] else { continue };
                let MessageTag::Ack { target } = msg.tag else { continue };
                let u_id = inst.id_of(u);
                if target != u_id {
                    continue; // addressed to someone else
                }
                stores[u].push(PairRecord {
                    child: u_id,
                    parent: msg.sender,
                    slot_up: slot1,
                    slot_down: slot2,
                    round: r,
                });
                active[u] = false;
                formed = true;
                log.rounds[round_rec_idx].links_formed += 1;
            }
            if formed {
                active_list.retain(|&i| active[i]);
            }
        }
    }

    log.total_slots = slot;

    let store_map: BTreeMap<NodeId, Vec<PairRecord>> = stores
        .iter()
        .enumerate()
        .filter(|(_, recs)| !recs.is_empty())
        .map(|(i, recs)| (inst.id_of(i), recs.clone()))
        .collect();
    let (kept, strays) = reconcile_stray_links(&store_map);
    log.stray_links = strays.len();
    for s in &strays {
        if let Some(rec) = log.rounds.iter_mut().find(|rr| rr.round == s.round) {
            rec.stray_records += 1;
        }
    }

    if active_list.len() != 1 {
        return Err(Box::new(InitFailure {
            active: active_list.iter().map(|&i| inst.id_of(i)).collect(),
            forest: kept,
            trace,
            log,
        }));
    }

    let root = inst.id_of(active_list[0]);
    let uplinks: Vec<(NodeId, NodeId, u64, u32, f64)> = kept
        .iter()
        .map(|p| {
            (
                p.child,
                p.parent,
                p.slot_up,
                p.round,
                round_power(p.round, model),
            )
        })
        .collect();
    match BiTree::from_uplinks(inst, root, uplinks) {
        Ok(tree) => Ok(InitRun { tree, trace, log }),
        Err(_) => {
            // A node with two uplinks or a missing span would be a protocol
            // bug; surface it as a failure rather than panicking.
            Err(Box::new(InitFailure {
                active: vec![root],
                forest: kept,
                trace,
                log,
            }))
        }
    }
}

/// Per-node link counts of a tree, with the largest and the empirical tail.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DegreeStats {
    /// degree -> number of nodes with that degree.
    pub histogram: BTreeMap<usize, usize>,
    pub max_degree: usize,
}

pub fn degree_stats(tree: &BiTree) -> DegreeStats {
    let degrees = tree.degrees();
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    for (_, d) in &degrees {
        *histogram.entry(*d).or_insert(0) += 1;
    }
    DegreeStats {
        max_degree: degrees.values().copied().max().unwrap_or(0),
        histogram,
    }
}

impl DegreeStats {
    /// Fraction of nodes with degree >= d.
    pub fn exceedance(&self, d: usize) -> f64 {
        let total: usize = self.histogram.values().sum();
        if total == 0 {
            return 0.0;
        }
        let at_least: usize = self
            .histogram
            .iter()
            .filter(|(deg, _)| **deg >= d)
            .map(|(_, c)| *c)
            .sum();
        at_least as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{c_factor, Node};

    fn inst_from(points: &[(f64, f64)]) -> Instance {
        Instance::new(
            points
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| Node {
                    id: i as NodeId,
                    x,
                    y,
                })
                .collect(),
        )
        .unwrap()
    }

    fn grid(rows: usize, cols: usize) -> Instance {
        let mut pts = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                pts.push((c as f64, r as f64));
            }
        }
        inst_from(&pts)
    }

    #[test]
    fn round_power_values() {
        let m = ModelParams::default();
        assert_eq!(round_power(1, &m), 16.0);
        assert_eq!(round_power(2, &m), 128.0);
    }

    #[test]
    fn round_power_keeps_c_factor_below_two_beta() {
        let m = ModelParams::default();
        for r in 1..=10u32 {
            let d = pow2(r) * (1.0 - 1e-9);
            let inst = Instance::new_unnormalized(vec![
                Node { id: 0, x: 0.0, y: 0.0 },
                Node { id: 1, x: d, y: 0.0 },
            ])
            .unwrap();
            let l = inst.link(0, 1).unwrap();
            let c = c_factor(&l, round_power(r, &m), &m).unwrap();
            assert!(c <= 2.0 * m.beta + 1e-9, "round {r}: c = {c}");
        }
    }

    #[test]
    fn round_of_length_matches_class_membership() {
        for &d in &[1.0, 1.5, 2.0, 3.99, 4.0, 1023.0, 1024.0] {
            let r = round_of_length(d);
            assert!(d >= pow2(r - 1) && d < pow2(r), "d={d} r={r}");
        }
    }

    #[test]
    fn single_node_is_trivial_tree() {
        let inst = inst_from(&[(5.0, 5.0)]);
        let run = run_init(&inst, &InitParams::default(), &ModelParams::default(), 1).unwrap();
        assert_eq!(run.tree.root(), 0);
        assert!(run.tree.is_empty());
        assert_eq!(run.log.total_slots, 0);
        assert!(run.trace.records.is_empty());
    }

    #[test]
    fn two_nodes_connect() {
        let inst = inst_from(&[(0.0, 0.0), (1.0, 0.0)]);
        let run = run_init(&inst, &InitParams::default(), &ModelParams::default(), 3).unwrap();
        assert_eq!(run.tree.len(), 1);
        let l = &run.tree.links()[0];
        assert_eq!(l.round, 1);
        assert!(l.length >= 1.0 && l.length < 2.0);
    }

    #[test]
    fn grid_4x4_connects_and_verifies() {
        let inst = grid(4, 4);
        let params = InitParams::default();
        let model = ModelParams::default();
        let run = run_init(&inst, &params, &model, 11).unwrap();
        assert_eq!(run.tree.len(), 15);
        assert!(run.tree.links().iter().all(|l| l.stamp >= 1));
        // Every link's length lies in its round's class: exact, by the
        // acceptance rule.
        for l in run.tree.links() {
            assert!(l.length >= pow2(l.round - 1) && l.length < pow2(l.round));
        }
        // Each node's sole uplink is its last stamped link.
        for node in run.tree.nodes() {
            if node == run.tree.root() {
                continue;
            }
            let up = run.tree.uplink_of(node).unwrap();
            for l in run.tree.links() {
                if l.parent == node {
                    assert!(l.stamp < up.stamp, "node {node}");
                }
            }
        }
        assert!(crate::sim::verify_trace(&inst, &model, &run.trace).is_ok());
    }

    #[test]
    fn runs_are_deterministic() {
        let inst = grid(3, 3);
        let a = run_init(&inst, &InitParams::default(), &ModelParams::default(), 9).unwrap();
        let b = run_init(&inst, &InitParams::default(), &ModelParams::default(), 9).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.tree, b.tree);
    }

    #[test]
    fn slot_budget_respected() {
        let inst = grid(4, 4);
        let params = InitParams::default();
        for seed in 0..5 {
            let run = run_init(&inst, &params, &ModelParams::default(), seed).unwrap();
            let bound = 2 * params.slot_pairs_per_round(16)
                * u64::from(round_of_length(inst.delta()));
            assert!(run.log.total_slots <= bound);
        }
    }

    #[test]
    fn far_pair_fast_forwards_early_rounds() {
        // Two nodes at distance 1 plus one far away: after the unit pair
        // resolves, intermediate empty classes are skipped.
        let inst = inst_from(&[(0.0, 0.0), (1.0, 0.0), (100.0, 0.0)]);
        let run = run_init(&inst, &InitParams::default(), &ModelParams::default(), 5).unwrap();
        assert!(run.log.rounds.iter().any(|r| r.fast_forwarded));
        assert_eq!(run.tree.len(), 2);
    }

    #[test]
    fn reconcile_drops_one_sided_records() {
        let pair = PairRecord {
            child: 0,
            parent: 1,
            slot_up: 1,
            slot_down: 2,
            round: 1,
        };
        let stray = PairRecord {
            child: 2,
            parent: 1,
            slot_up: 1,
            slot_down: 2,
            round: 1,
        };
        let mut stores: BTreeMap<NodeId, Vec<PairRecord>> = BTreeMap::new();
        stores.insert(0, vec![pair]);
        stores.insert(1, vec![pair, stray]); // listener also stored a failed ack
        let (kept, strays) = reconcile_stray_links(&stores);
        assert_eq!(kept, vec![pair]);
        assert_eq!(strays, vec![stray]);
    }

    #[test]
    fn theory_params_validate() {
        let m = ModelParams::default();
        let t = InitParams::theory(&m);
        assert!(t.validate(&m).is_ok());
        assert!((t.p - 1.0 / 3136.0).abs() < 1e-12);
        // Practical p above the theory bound is rejected in theory mode.
        let bad = InitParams {
            mode: InitMode::Theory,
            p: 0.25,
            lambda1: 64.0,
        };
        assert!(bad.validate(&m).is_err());
    }

    #[test]
    fn degree_stats_path_tree() {
        let inst = inst_from(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        let tree = BiTree::from_uplinks(
            &inst,
            2,
            vec![(0, 1, 1, 1, 16.0), (1, 2, 2, 1, 16.0)],
        )
        .unwrap();
        let stats = degree_stats(&tree);
        assert_eq!(stats.max_degree, 2);
        assert_eq!(stats.histogram.values().sum::<usize>(), 3);
    }
}
