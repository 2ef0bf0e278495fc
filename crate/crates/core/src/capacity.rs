//! Capacity-driven tree rebuilding: degree-filtered subtree, feasible-subset
//! selectors, the prefix interference condition, power assignment, and the
//! outer loop that interleaves construction and selection.
//!
//! The outer loop repeatedly builds an initial tree on the surviving
//! top-level nodes, extracts the low-degree subtree `T(M)`, selects a
//! feasible subset `T'` of it (by mean-power sampling or by the two-slot
//! phase selector), schedules `T'` in one new slot, and recurses on the nodes
//! whose parent link was not selected. Selection runs on the channel
//! time-division multiplexed with the existing tree's traffic; the iteration
//! log keeps the two slot budgets apart.
//!
//! Selectors measure interference the way receivers would: total incoming
//! affectance from the concurrent transmitters, with half-duplex vetoes (a
//! node cannot receive while transmitting). With `beta >= 1` this makes every
//! selected set node-disjoint.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::analysis::upsilon;
use crate::error::{Error, Result};
use crate::init::{run_init_on, InitParams};
use crate::model::{
    affectance, dual_link, Instance, Link, LinkSet, ModelParams, NodeId, PowerAssignment, FEAS_TOL,
};
use crate::rng::{salt, RngStream};
use crate::scheduler::Schedule;
use crate::tree::BiTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CapacityMode {
    Mean,
    Arbitrary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CapacityParams {
    /// Degree threshold for `T(M)`. The analysis value is `160 / p^2`, far
    /// above any degree that occurs at desk scale; the default actually
    /// filters.
    pub rho: f64,
    /// Mean-power sampling constant: transmit probability is
    /// `1 / (4 gamma1 upsilon)`.
    pub gamma1: f64,
    /// Duality constant in (0, 1); when unset, derived as
    /// `beta / ((1 + eps) 2 beta)`.
    pub gamma2: Option<f64>,
    /// Selection threshold of the two-slot selector.
    pub tau: f64,
    /// Phase transmit probability of the two-slot selector.
    pub p_cap: f64,
    /// Multiplier for the upsilon value.
    pub upsilon_kappa: f64,
    /// Contraction-rate guess for the mean-mode iteration cap; when unset,
    /// `1 / (4 upsilon)`.
    pub delta_hat_mean: Option<f64>,
    /// Contraction-rate guess for the arbitrary-mode iteration cap.
    pub delta_hat_arbitrary: f64,
    /// Power assignment targets SINR `beta (1 + margin)`.
    pub power_margin: f64,
    pub power_tolerance: f64,
    pub power_max_iter: u32,
    /// Iteration retries (new seed) when power assignment fails.
    pub max_retries: u32,
}

impl Default for CapacityParams {
    fn default() -> Self {
        CapacityParams {
            rho: 16.0,
            gamma1: 4.0,
            gamma2: None,
            tau: 0.2,
            p_cap: 0.5,
            upsilon_kappa: 1.0,
            delta_hat_mean: None,
            delta_hat_arbitrary: 1.0 / 8.0,
            power_margin: 1.0,
            power_tolerance: 1e-6,
            power_max_iter: 10_000,
            max_retries: 3,
        }
    }
}

impl CapacityParams {
    /// Threshold from the degree analysis: `160 / p^2`.
    pub fn theory_rho(p: f64) -> f64 {
        160.0 / (p * p)
    }

    pub fn gamma2(&self, model: &ModelParams) -> f64 {
        self.gamma2
            .unwrap_or_else(|| model.beta / ((1.0 + model.epsilon) * 2.0 * model.beta))
    }

    pub fn validate(&self, model: &ModelParams) -> Result<()> {
        if !(self.rho >= 1.0) {
            return Err(Error::bad_input(format!("rho must be >= 1, got {}", self.rho)));
        }
        let g2 = self.gamma2(model);
        if !(g2 > 0.0 && g2 < 1.0) {
            return Err(Error::bad_input(format!("gamma2 must be in (0, 1), got {g2}")));
        }
        if !(self.tau > 0.0) {
            return Err(Error::bad_input(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.p_cap > 0.0 && self.p_cap <= 0.5) {
            return Err(Error::bad_input(format!(
                "p_cap must be in (0, 1/2], got {}",
                self.p_cap
            )));
        }
        if !(self.gamma1 > 0.0) {
            return Err(Error::bad_input(format!("gamma1 must be > 0, got {}", self.gamma1)));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// T(M)
// ---------------------------------------------------------------------------

/// Links of the tree whose both endpoints have degree at most `rho`, with
/// their formation rounds (the phase key). Realized distributedly by one
/// sweep through the existing network; the sweep cost is accounted as one
/// tree-schedule pass of control traffic.
#[derive(Debug, Clone)]
pub struct LowDegreeSubtree {
    pub links: LinkSet,
    pub rounds: Vec<u32>,
}

pub fn extract_low_degree(tree: &BiTree, inst: &Instance, rho: f64) -> Result<LowDegreeSubtree> {
    let degrees = tree.degrees();
    let mut links = Vec::new();
    let mut rounds = Vec::new();
    for l in tree.links() {
        if degrees[&l.child] as f64 <= rho && degrees[&l.parent] as f64 <= rho {
            links.push(inst.link(l.child, l.parent)?);
            rounds.push(l.round);
        }
    }
    Ok(LowDegreeSubtree {
        links: LinkSet::new(links),
        rounds,
    })
}

// ---------------------------------------------------------------------------
// Selection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseLog {
    pub round: u32,
    pub offered: usize,
    pub transmitted: usize,
    pub selected: usize,
}

/// Outcome of a selector run over an input link set.
#[derive(Debug, Clone, Default)]
pub struct SelectionResult {
    /// Indices into the input set, in selection order.
    pub selected: Vec<usize>,
    /// Measured incoming affectance of each selected link at selection time.
    pub forward_load: Vec<f64>,
    /// Measured incoming affectance of the dual at selection time (0 when
    /// the selector has no reverse slot).
    pub reverse_load: Vec<f64>,
    pub phases: Vec<PhaseLog>,
    /// Simulated selection slots consumed.
    pub slots: u64,
}

/// One slot-pair of mean-power sampling: each link transmits with iid
/// probability `1 / (4 gamma1 upsilon)`; a link is selected iff its
/// transmission succeeds and the acknowledgment across its dual succeeds.
/// The selected set is feasible under mean power by affectance monotonicity.
pub fn sample_feasible_mean(
    inst: &Instance,
    model: &ModelParams,
    tm: &LinkSet,
    upsilon_value: f64,
    gamma1: f64,
    seed: u64,
) -> Result<SelectionResult> {
    let mut result = SelectionResult::default();
    if tm.is_empty() {
        return Ok(result);
    }
    result.slots = 2;
    let power = PowerAssignment::mean_for(tm, model);
    let powers: Vec<f64> = tm
        .links
        .iter()
        .map(|l| power.resolve(l, model))
        .collect::<Result<_>>()?;

    let rng = RngStream::new(seed);
    let p_tx = 1.0 / (4.0 * gamma1 * upsilon_value.max(1.0));
    let tx: Vec<usize> = (0..tm.len())
        .filter(|&i| {
            let l = &tm.links[i];
            rng.coin(u64::from(l.sender), 1, salt::SAMPLE) < p_tx
        })
        .collect();

    let senders: Vec<(NodeId, f64)> = tx.iter().map(|&i| (tm.links[i].sender, powers[i])).collect();
    let mut forward: Vec<(usize, f64)> = Vec::new();
    for &i in &tx {
        let l = &tm.links[i];
        if senders.iter().any(|&(s, _)| s == l.receiver) {
            continue; // receiver busy transmitting
        }
        let load = crate::model::affectance_sum(inst, model, &senders, l, powers[i])?;
        if load <= 1.0 + FEAS_TOL {
            forward.push((i, load));
        }
    }

    // Acknowledgment sub-slot: duals of the successful links transmit.
    let ack_senders: Vec<(NodeId, f64)> = forward
        .iter()
        .map(|&(i, _)| (tm.links[i].receiver, power.resolve(&dual_link(&tm.links[i]), model)))
        .map(|(id, p)| p.map(|p| (id, p)))
        .collect::<Result<_>>()?;
    for &(i, fwd_load) in &forward {
        let d = dual_link(&tm.links[i]);
        if ack_senders.iter().any(|&(s, _)| s == d.receiver) {
            continue;
        }
        let d_power = power.resolve(&d, model)?;
        let load = crate::model::affectance_sum(inst, model, &ack_senders, &d, d_power)?;
        if load <= 1.0 + FEAS_TOL {
            result.selected.push(i);
            result.forward_load.push(fwd_load);
            result.reverse_load.push(load);
        }
    }
    result.phases.push(PhaseLog {
        round: 0,
        offered: tm.len(),
        transmitted: tx.len(),
        selected: result.selected.len(),
    });
    Ok(result)
}

/// The two-slot-per-phase selector with linear power. Phase `i` offers the
/// links formed in round `i`; phases run in ascending round order, so links
/// are offered in ascending length classes and each link is offered exactly
/// once.
///
/// First slot: the selected set transmits, offered links transmit with iid
/// probability `p_cap`, and an offered link survives iff its measured
/// incoming relative interference is at most `tau / 4`. Second slot: duals
/// of the selected set transmit, duals of the survivors transmit with iid
/// probability `gamma2^2 p_cap` and succeed iff the dual's measured
/// interference is at most `gamma2 tau / 4`. Links succeeding in both
/// directions join the selected set.
pub fn distr_cap(
    inst: &Instance,
    model: &ModelParams,
    tm: &LowDegreeSubtree,
    params: &CapacityParams,
    seed: u64,
) -> Result<SelectionResult> {
    params.validate(model)?;
    let mut result = SelectionResult::default();
    if tm.links.is_empty() {
        return Ok(result);
    }
    let gamma2 = params.gamma2(model);
    let power = PowerAssignment::linear_for(model);
    let powers: Vec<f64> = tm
        .links
        .links
        .iter()
        .map(|l| power.resolve(l, model))
        .collect::<Result<_>>()?;
    let rng = RngStream::new(seed);

    // Phases: ascending rounds.
    let mut by_round: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &r) in tm.rounds.iter().enumerate() {
        by_round.entry(r).or_default().push(i);
    }

    let mut selected: Vec<usize> = Vec::new();
    let mut forward_load: Vec<f64> = Vec::new();
    let mut reverse_load: Vec<f64> = Vec::new();

    for (phase_idx, (&round, offered)) in by_round.iter().enumerate() {
        let slot1 = 2 * phase_idx as u64 + 1;
        let slot2 = slot1 + 1;
        result.slots += 2;

        // Slot 1: selected set plus coin-flipping offered links, linear power.
        let mut tx1: Vec<(NodeId, f64)> = selected
            .iter()
            .map(|&i| (tm.links.links[i].sender, powers[i]))
            .collect();
        let mut contenders: Vec<usize> = Vec::new();
        for &i in offered {
            let l = &tm.links.links[i];
            if rng.coin(u64::from(l.sender), slot1, salt::CAP_FWD) < params.p_cap {
                contenders.push(i);
                tx1.push((l.sender, powers[i]));
            }
        }

        let mut survived: Vec<(usize, f64)> = Vec::new();
        for &i in &contenders {
            let l = &tm.links.links[i];
            if tx1.iter().any(|&(s, _)| s == l.receiver) {
                continue; // half-duplex
            }
            let load = crate::model::affectance_sum(inst, model, &tx1, l, powers[i])?;
            if load <= params.tau / 4.0 + FEAS_TOL {
                survived.push((i, load));
            }
        }

        // Slot 2: dual direction.
        let mut tx2: Vec<(NodeId, f64)> = selected
            .iter()
            .map(|&i| (tm.links.links[i].receiver, powers[i]))
            .collect();
        let mut dual_contenders: Vec<(usize, f64)> = Vec::new();
        for &(i, fwd) in &survived {
            let d = dual_link(&tm.links.links[i]);
            if rng.coin(u64::from(d.sender), slot2, salt::CAP_REV) < gamma2 * gamma2 * params.p_cap
            {
                dual_contenders.push((i, fwd));
                tx2.push((d.sender, powers[i]));
            }
        }

        let mut phase_selected = 0usize;
        for &(i, fwd) in &dual_contenders {
            let d = dual_link(&tm.links.links[i]);
            if tx2.iter().any(|&(s, _)| s == d.receiver) {
                continue;
            }
            let load = crate::model::affectance_sum(inst, model, &tx2, &d, powers[i])?;
            if load <= gamma2 * params.tau / 4.0 + FEAS_TOL {
                selected.push(i);
                forward_load.push(fwd);
                reverse_load.push(load);
                phase_selected += 1;
            }
        }
        result.phases.push(PhaseLog {
            round,
            offered: offered.len(),
            transmitted: contenders.len(),
            selected: phase_selected,
        });
    }

    result.selected = selected;
    result.forward_load = forward_load;
    result.reverse_load = reverse_load;
    Ok(result)
}

// ---------------------------------------------------------------------------
// Prefix interference condition
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KesselheimReport {
    pub pass: bool,
    /// `a^L_P(l) + a^U_l(P)` per link, aligned with the input order.
    pub values: Vec<f64>,
    /// Index and value of the worst link.
    pub worst: Option<(usize, f64)>,
}

/// For each link `l` with prefix `P(l)` (links no longer than `l` in the
/// tie-broken order), verifies `a^L_P(l) + a^U_l(P) <= tau`.
pub fn kesselheim_check(
    inst: &Instance,
    model: &ModelParams,
    set: &LinkSet,
    tau: f64,
) -> Result<KesselheimReport> {
    let linear = PowerAssignment::linear_for(model);
    let uniform = PowerAssignment::uniform_for(set, model);
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| {
        let la = &set.links[a];
        let lb = &set.links[b];
        la.length
            .partial_cmp(&lb.length)
            .unwrap()
            .then(la.sender.cmp(&lb.sender))
            .then(la.receiver.cmp(&lb.receiver))
    });

    let mut values = vec![0.0; set.len()];
    for (pos, &i) in order.iter().enumerate() {
        let l = &set.links[i];
        let lin_l = linear.resolve(l, model)?;
        let uni_l = uniform.resolve(l, model)?;
        let mut total = 0.0;
        for &j in &order[..pos] {
            let l2 = &set.links[j];
            let lin_l2 = linear.resolve(l2, model)?;
            let uni_l2 = uniform.resolve(l2, model)?;
            // Linear-power interference of the prefix on l.
            total += affectance(inst, model, l2.sender, lin_l2, l, lin_l)?;
            // Uniform-power interference of l on the prefix.
            total += affectance(inst, model, l.sender, uni_l, l2, uni_l2)?;
        }
        values[i] = total;
    }

    let worst = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
        .map(|(i, &v)| (i, v));
    Ok(KesselheimReport {
        pass: values.iter().all(|&v| v <= tau + FEAS_TOL),
        values,
        worst,
    })
}

// ---------------------------------------------------------------------------
// Power assignment
// ---------------------------------------------------------------------------

/// Fixed-point power control: every receiver repeatedly requests the power
/// that makes its SINR exactly `beta (1 + margin)` against the current
/// interference. Converges iff the normalized interference system has
/// spectral radius below 1; under zero noise the iteration runs normalized
/// and converges to the dominant direction.
pub fn assign_power(
    inst: &Instance,
    model: &ModelParams,
    set: &LinkSet,
    margin: f64,
    tolerance: f64,
    max_iter: u32,
) -> Result<(PowerAssignment, u32)> {
    if set.is_empty() {
        return Ok((PowerAssignment::explicit(BTreeMap::new()), 0));
    }
    let m = set.len();
    let target = model.beta * (1.0 + margin);
    let d_alpha: Vec<f64> = set
        .links
        .iter()
        .map(|l| l.length.powf(model.alpha))
        .collect();

    // gain[i][j]: path gain from link j's sender to link i's receiver;
    // zero between links sharing a sender (one node, one signal).
    let mut gain = vec![vec![0.0f64; m]; m];
    for i in 0..m {
        let ri = inst.idx(set.links[i].receiver)?;
        for j in 0..m {
            if i == j || set.links[j].sender == set.links[i].sender {
                continue;
            }
            let sj = inst.idx(set.links[j].sender)?;
            let dp = inst.dist_pow_idx(sj, ri, model.alpha);
            if dp == 0.0 {
                return Err(Error::NotPowerFeasible { iterations: 0 });
            }
            gain[i][j] = 1.0 / dp;
        }
    }

    let zero_noise = model.noise == 0.0;
    let base: Vec<f64> = d_alpha
        .iter()
        .map(|&da| target * model.noise * da)
        .collect();
    let mut p: Vec<f64> = if zero_noise {
        d_alpha.clone() // any positive start; direction is what converges
    } else {
        base.clone()
    };
    let ceiling = 1e12 * p.iter().fold(1.0f64, |a, &b| a.max(b));

    for it in 1..=max_iter {
        let mut next = vec![0.0f64; m];
        for i in 0..m {
            let interference: f64 = (0..m).map(|j| gain[i][j] * p[j]).sum();
            next[i] = target * d_alpha[i] * interference + base[i];
        }
        if zero_noise {
            let norm = next.iter().fold(0.0f64, |a, &b| a.max(b));
            if norm == 0.0 {
                // No interference at all: any positive assignment works.
                let powers = set
                    .links
                    .iter()
                    .zip(&d_alpha)
                    .map(|(l, &da)| ((l.sender, l.receiver), target.max(1.0) * da))
                    .collect();
                return Ok((PowerAssignment::explicit(powers), it));
            }
            // Normalized update: growth factor below 1 means the system
            // contracts and a feasible direction exists.
            let growth: f64 = norm
                / p.iter().fold(0.0f64, |a, &b| a.max(b));
            let scaled: Vec<f64> = next.iter().map(|&x| x / norm).collect();
            let settled = scaled
                .iter()
                .zip(&p)
                .all(|(&a, &b)| (a - b).abs() <= tolerance * b.max(1e-300));
            p = scaled;
            if settled {
                if growth < 1.0 - FEAS_TOL {
                    let peak = d_alpha.iter().fold(0.0f64, |a, &b| a.max(b));
                    let powers = set
                        .links
                        .iter()
                        .zip(&p)
                        .map(|(l, &x)| ((l.sender, l.receiver), x * peak.max(1.0)))
                        .collect();
                    return Ok((PowerAssignment::explicit(powers), it));
                }
                return Err(Error::NotPowerFeasible { iterations: it });
            }
            continue;
        }

        let diverged = next.iter().any(|&x| x > ceiling);
        if diverged {
            return Err(Error::NotPowerFeasible { iterations: it });
        }
        let settled = next
            .iter()
            .zip(&p)
            .all(|(&a, &b)| (a - b).abs() <= tolerance * b.max(1e-300));
        p = next;
        if settled {
            let powers = set
                .links
                .iter()
                .zip(&p)
                .map(|(l, &x)| ((l.sender, l.receiver), x))
                .collect();
            return Ok((PowerAssignment::explicit(powers), it));
        }
    }
    Err(Error::NotPowerFeasible {
        iterations: max_iter,
    })
}

// ---------------------------------------------------------------------------
// TreeViaCapacity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub participants: usize,
    /// Construction and sweep traffic (odd TDM slots).
    pub control_slots: u64,
    /// Selection slot-pairs (even TDM slots).
    pub selection_slots: u64,
    pub init_connected: bool,
    pub tm_size: usize,
    pub selected: usize,
    pub power_retries: u32,
}

#[derive(Debug)]
pub struct CapacityRun {
    pub tree: BiTree,
    pub schedule: Schedule,
    pub iterations: Vec<IterationRecord>,
    pub retries: u32,
}

struct IterTree {
    /// (child, parent, round) of each formed uplink.
    uplinks: Vec<(NodeId, NodeId, u32)>,
    connected: bool,
    slots: u64,
}

pub fn tree_via_capacity(
    inst: &Instance,
    model: &ModelParams,
    init_params: &InitParams,
    params: &CapacityParams,
    mode: CapacityMode,
    seed: u64,
) -> Result<CapacityRun> {
    params.validate(model)?;
    init_params.validate(model)?;
    let n = inst.len();
    let stream = RngStream::new(seed);
    let ups = upsilon(inst, params.upsilon_kappa);
    let delta_hat = match mode {
        CapacityMode::Mean => params.delta_hat_mean.unwrap_or(1.0 / (4.0 * ups)),
        CapacityMode::Arbitrary => params.delta_hat_arbitrary,
    };
    let max_iterations =
        (10.0 * (1.0 / delta_hat) * (n as f64).log2().max(1.0)).ceil() as u32;

    let mut alive: Vec<usize> = (0..n).collect();
    let mut acc: Vec<(NodeId, NodeId, u64, u32, f64)> = Vec::new();
    let mut explicit_powers: BTreeMap<(NodeId, NodeId), f64> = BTreeMap::new();
    let mut slot_groups: Vec<Vec<Link>> = Vec::new();
    let mut iterations: Vec<IterationRecord> = Vec::new();
    let mut total_retries = 0u32;

    let mut iteration = 0u32;
    while alive.len() > 1 {
        iteration += 1;
        if iteration > max_iterations {
            return Err(Error::IterationBudgetExceeded {
                max_iterations,
                remaining: alive.len(),
            });
        }

        let mut attempt = 0u32;
        let (tm, selection, assignment, iter_tree) = loop {
            let attempt_stream = stream.derive(u64::from(iteration) * 8 + u64::from(attempt));
            let iter_tree = build_iter_tree(inst, &alive, init_params, model, &attempt_stream);
            let tm = low_degree_of(inst, &iter_tree.uplinks, params.rho)?;
            let selection = match mode {
                CapacityMode::Mean => sample_feasible_mean(
                    inst,
                    model,
                    &tm.links,
                    ups,
                    params.gamma1,
                    attempt_stream.derive(2).seed(),
                )?,
                CapacityMode::Arbitrary => distr_cap(
                    inst,
                    model,
                    &tm,
                    params,
                    attempt_stream.derive(2).seed(),
                )?,
            };
            if mode == CapacityMode::Arbitrary && !selection.selected.is_empty() {
                let chosen =
                    LinkSet::new(selection.selected.iter().map(|&i| tm.links.links[i]).collect());
                match assign_power(
                    inst,
                    model,
                    &chosen,
                    params.power_margin,
                    params.power_tolerance,
                    params.power_max_iter,
                ) {
                    Ok((pa, _)) => break (tm, selection, Some(pa), iter_tree),
                    Err(Error::NotPowerFeasible { .. }) if attempt < params.max_retries => {
                        attempt += 1;
                        total_retries += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                }
            }
            break (tm, selection, None, iter_tree);
        };

        iterations.push(IterationRecord {
            iteration,
            participants: alive.len(),
            control_slots: iter_tree.slots,
            selection_slots: selection.slots,
            init_connected: iter_tree.connected,
            tm_size: tm.links.len(),
            selected: selection.selected.len(),
            power_retries: attempt,
        });

        if selection.selected.is_empty() {
            continue;
        }

        let slot_no = slot_groups.len() as u64 + 1;
        let mut group = Vec::new();
        let mut removed: Vec<NodeId> = Vec::new();
        for &i in &selection.selected {
            let link = tm.links.links[i];
            let power = match (&assignment, mode) {
                (Some(pa), _) => pa.resolve(&link, model)?,
                (None, _) => PowerAssignment::mean_for(&tm.links, model).resolve(&link, model)?,
            };
            acc.push((link.sender, link.receiver, slot_no, iteration, power));
            if let Some(pa) = &assignment {
                explicit_powers.insert((link.sender, link.receiver), pa.resolve(&link, model)?);
            }
            group.push(link);
            removed.push(link.sender);
        }
        slot_groups.push(group);

        let before = alive.len();
        alive.retain(|&i| !removed.contains(&inst.id_of(i)));
        debug_assert!(alive.len() < before, "selection must shrink the top level");
    }

    let root = inst.id_of(alive[0]);
    let tree = BiTree::from_uplinks(inst, root, acc)?;
    let schedule_power = match mode {
        CapacityMode::Arbitrary => PowerAssignment::explicit(explicit_powers),
        CapacityMode::Mean => {
            let all = tree.uplink_set(inst)?;
            PowerAssignment::mean_for(&all, model)
        }
    };
    // Re-stamp stored powers under the final context (the mean scale is
    // global; per-iteration selection used the subtree's scale, and a larger
    // scale only lowers affectance).
    let final_powers: BTreeMap<(NodeId, NodeId), f64> = tree
        .links()
        .iter()
        .map(|l| {
            let link = inst.link(l.child, l.parent)?;
            Ok(((l.child, l.parent), schedule_power.resolve(&link, model)?))
        })
        .collect::<Result<_>>()?;
    let tree = tree.with_powers(&final_powers)?;

    Ok(CapacityRun {
        tree,
        schedule: Schedule {
            slots: slot_groups,
            power: schedule_power,
        },
        iterations,
        retries: total_retries,
    })
}

fn build_iter_tree(
    inst: &Instance,
    alive: &[usize],
    init_params: &InitParams,
    model: &ModelParams,
    stream: &RngStream,
) -> IterTree {
    match run_init_on(inst, alive, init_params, model, stream.derive(1).seed()) {
        Ok(run) => IterTree {
            uplinks: run
                .tree
                .links()
                .iter()
                .map(|l| (l.child, l.parent, l.round))
                .collect(),
            connected: true,
            // Control traffic: the construction itself plus one sweep pass
            // over the new tree to mark T(M) membership.
            slots: run.log.total_slots + u64::from(run.tree.schedule_length()),
        },
        Err(failure) => IterTree {
            uplinks: failure
                .forest
                .iter()
                .map(|p| (p.child, p.parent, p.round))
                .collect(),
            connected: false,
            slots: failure.log.total_slots,
        },
    }
}

fn low_degree_of(
    inst: &Instance,
    uplinks: &[(NodeId, NodeId, u32)],
    rho: f64,
) -> Result<LowDegreeSubtree> {
    let mut degree: BTreeMap<NodeId, usize> = BTreeMap::new();
    for &(c, p, _) in uplinks {
        *degree.entry(c).or_insert(0) += 1;
        *degree.entry(p).or_insert(0) += 1;
    }
    let mut links = Vec::new();
    let mut rounds = Vec::new();
    for &(c, p, r) in uplinks {
        if degree[&c] as f64 <= rho && degree[&p] as f64 <= rho {
            links.push(inst.link(c, p)?);
            rounds.push(r);
        }
    }
    Ok(LowDegreeSubtree {
        links: LinkSet::new(links),
        rounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::verify_bi_tree;
    use crate::model::{is_feasible, Node};

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
    fn extract_low_degree_cases() {
        let inst = inst_from(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)]);
        let chain = BiTree::from_uplinks(
            &inst,
            3,
            vec![(0, 1, 1, 1, 16.0), (1, 2, 2, 1, 16.0), (2, 3, 3, 1, 16.0)],
        )
        .unwrap();
        // All degrees at most rho: everything kept.
        let tm = extract_low_degree(&chain, &inst, 16.0).unwrap();
        assert_eq!(tm.links.len(), 3);

        // A hub of degree rho + 1: hub-incident links excluded, rest kept.
        let star_pts: Vec<(f64, f64)> = vec![
            (0.0, 0.0),
            (1.0, 0.0),
            (0.0, 1.0),
            (-1.0, 0.0),
            (0.0, -1.0),
            (2.0, 0.0),
        ];
        let inst2 = inst_from(&star_pts);
        // hub 0 with children 2, 3, 4 ... root is 5 via 1.
        let star = BiTree::from_uplinks(
            &inst2,
            5,
            vec![
                (2, 0, 1, 1, 16.0),
                (3, 0, 1, 1, 16.0),
                (4, 0, 1, 1, 16.0),
                (0, 1, 2, 1, 16.0),
                (1, 5, 3, 1, 16.0),
            ],
        )
        .unwrap();
        assert_eq!(star.degree(0), 4);
        let tm = extract_low_degree(&star, &inst2, 3.0).unwrap();
        // Only the 1 -> 5 link avoids the hub.
        assert_eq!(tm.links.len(), 1);
        assert_eq!(tm.links.links[0].sender, 1);

        // Empty tree.
        let inst3 = inst_from(&[(0.0, 0.0)]);
        let empty = BiTree::from_uplinks(&inst3, 0, vec![]).unwrap();
        assert!(extract_low_degree(&empty, &inst3, 2.0).unwrap().links.is_empty());
    }

    #[test]
    fn sample_feasible_mean_cases() {
        let model = ModelParams::default();
        let inst = inst_from(&[(0.0, 0.0), (1.0, 0.0)]);
        // Empty input.
        let empty = sample_feasible_mean(&inst, &model, &LinkSet::default(), 2.0, 4.0, 1).unwrap();
        assert!(empty.selected.is_empty());

        // Single link, sampling probability forced to 1 via gamma1 and
        // upsilon floor: selected with no interference.
        let tm = LinkSet::new(vec![inst.link(0, 1).unwrap()]);
        let sel = sample_feasible_mean(&inst, &model, &tm, 1.0, 0.25, 7).unwrap();
        assert_eq!(sel.selected, vec![0]);
        assert_eq!(sel.forward_load[0], 0.0);

        // Output is feasible under mean power (every seed).
        let inst2 = grid(3, 3);
        let run = crate::init::run_init(&inst2, &InitParams::default(), &model, 4).unwrap();
        let tm = extract_low_degree(&run.tree, &inst2, 16.0).unwrap();
        for seed in 0..50 {
            let sel = sample_feasible_mean(&inst2, &model, &tm.links, 2.0, 1.0, seed).unwrap();
            let chosen =
                LinkSet::new(sel.selected.iter().map(|&i| tm.links.links[i]).collect());
            let power = PowerAssignment::mean_for(&tm.links, &model);
            assert!(is_feasible(&inst2, &model, &chosen, &power).unwrap().feasible);
            // Node-disjoint at beta >= 1.
            let mut nodes: Vec<NodeId> = chosen
                .links
                .iter()
                .flat_map(|l| [l.sender, l.receiver])
                .collect();
            nodes.sort_unstable();
            let before = nodes.len();
            nodes.dedup();
            assert_eq!(nodes.len(), before);
        }
    }

    #[test]
    fn distr_cap_cases() {
        let model = ModelParams::default();
        let params = CapacityParams::default();
        let inst = inst_from(&[(0.0, 0.0), (1.0, 0.0)]);

        // Empty input.
        let empty = distr_cap(
            &inst,
            &model,
            &LowDegreeSubtree {
                links: LinkSet::default(),
                rounds: vec![],
            },
            &params,
            3,
        )
        .unwrap();
        assert!(empty.selected.is_empty());

        // Single link: find a seed where both coin flips fire; zero
        // interference passes every threshold.
        let tm = LowDegreeSubtree {
            links: LinkSet::new(vec![inst.link(0, 1).unwrap()]),
            rounds: vec![1],
        };
        let seed = (0..500u64)
            .find(|&s| {
                distr_cap(&inst, &model, &tm, &params, s)
                    .unwrap()
                    .selected
                    .len()
                    == 1
            })
            .expect("some seed selects the lone link");
        let sel = distr_cap(&inst, &model, &tm, &params, seed).unwrap();
        assert_eq!(sel.forward_load[0], 0.0);
        assert_eq!(sel.reverse_load[0], 0.0);
    }

    #[test]
    fn distr_cap_output_passes_kesselheim_and_lemma_pair() {
        let model = ModelParams::default();
        let params = CapacityParams::default();
        let inst = grid(4, 4);
        let gamma2 = params.gamma2(&model);
        let mut nonempty = 0;
        for seed in 0..200u64 {
            let run = match crate::init::run_init(&inst, &InitParams::default(), &model, seed) {
                Ok(r) => r,
                Err(_) => continue,
            };
            let tm = extract_low_degree(&run.tree, &inst, params.rho).unwrap();
            let sel = distr_cap(&inst, &model, &tm, &params, seed ^ 0xabc).unwrap();
            if sel.selected.is_empty() {
                continue;
            }
            nonempty += 1;
            let chosen: Vec<Link> = sel.selected.iter().map(|&i| tm.links.links[i]).collect();
            let set = LinkSet::new(chosen.clone());
            let rep = kesselheim_check(&inst, &model, &set, params.tau).unwrap();
            assert!(rep.pass, "seed {seed}: worst {:?}", rep.worst);

            // Feasibility lemma pair, recomputed directly: for each selected
            // link and its shorter-or-equal selected prefix L,
            // a^L_L(l) <= tau/4 and a^L_{L_d}(l_d) <= gamma2 tau/4.
            let linear = PowerAssignment::linear_for(&model);
            for (k, l) in chosen.iter().enumerate() {
                let prefix: Vec<Link> = chosen
                    .iter()
                    .enumerate()
                    .filter(|&(j, c)| j != k && c.order_le(l))
                    .map(|(_, c)| *c)
                    .collect();
                let fwd: Vec<(NodeId, f64)> = prefix
                    .iter()
                    .map(|c| (c.sender, linear.resolve(c, &model).unwrap()))
                    .collect();
                let a_fwd = crate::model::affectance_sum(
                    &inst,
                    &model,
                    &fwd,
                    l,
                    linear.resolve(l, &model).unwrap(),
                )
                .unwrap();
                assert!(a_fwd <= params.tau / 4.0 + 1e-9, "forward lemma: {a_fwd}");
                let rev: Vec<(NodeId, f64)> = prefix
                    .iter()
                    .map(|c| (c.receiver, linear.resolve(c, &model).unwrap()))
                    .collect();
                let ld = dual_link(l);
                let a_rev = crate::model::affectance_sum(
                    &inst,
                    &model,
                    &rev,
                    &ld,
                    linear.resolve(&ld, &model).unwrap(),
                )
                .unwrap();
                assert!(
                    a_rev <= gamma2 * params.tau / 4.0 + 1e-9,
                    "reverse lemma: {a_rev}"
                );
            }
        }
        assert!(nonempty >= 50, "only {nonempty} non-empty selections");
    }

    #[test]
    fn kesselheim_cases() {
        let model = ModelParams::default();
        // Singleton passes for any positive tau.
        let inst = inst_from(&[(0.0, 0.0), (1.0, 0.0)]);
        let single = LinkSet::new(vec![inst.link(0, 1).unwrap()]);
        assert!(kesselheim_check(&inst, &model, &single, 1e-6).unwrap().pass);

        // The conflicting pair from the kernel examples fails at tau = 0.2.
        let inst2 = Instance::new_unnormalized(vec![
            Node { id: 0, x: 0.0, y: 0.0 },
            Node { id: 1, x: 1.0, y: 0.0 },
            Node { id: 2, x: 1.5, y: 0.0 },
            Node { id: 3, x: 0.5, y: 0.0 },
        ])
        .unwrap();
        let pair = LinkSet::new(vec![inst2.link(0, 1).unwrap(), inst2.link(2, 3).unwrap()]);
        let rep = kesselheim_check(&inst2, &model, &pair, 0.2).unwrap();
        assert!(!rep.pass);
        assert!(rep.worst.unwrap().1 > 0.2);
    }

    #[test]
    fn assign_power_single_link_closed_form() {
        let model = ModelParams::default();
        let inst = inst_from(&[(0.0, 0.0), (1.5, 0.0)]);
        let set = LinkSet::new(vec![inst.link(0, 1).unwrap()]);
        // Normalization rescales 1.5 to 1; margin 1 gives P = 2 beta N d^a.
        let (pa, iters) = assign_power(&inst, &model, &set, 1.0, 1e-9, 100).unwrap();
        let p = pa.resolve(&set.links[0], &model).unwrap();
        assert!((p - 2.0).abs() < 1e-9, "p = {p}");
        assert!(iters <= 2);
    }

    #[test]
    fn assign_power_two_far_links_converges() {
        let model = ModelParams::default();
        let inst = inst_from(&[(0.0, 0.0), (1.0, 0.0), (100.0, 0.0), (101.0, 0.0)]);
        let set = LinkSet::new(vec![inst.link(0, 1).unwrap(), inst.link(2, 3).unwrap()]);
        let (pa, _) = assign_power(&inst, &model, &set, 1.0, 1e-6, 10_000).unwrap();
        let tx: Vec<(NodeId, f64)> = set
            .links
            .iter()
            .map(|l| (l.sender, pa.resolve(l, &model).unwrap()))
            .collect();
        for l in &set.links {
            let r = crate::model::sinr_ratio(&inst, &model, l, &tx, pa.resolve(l, &model).unwrap())
                .unwrap();
            assert!(r >= model.beta * (1.0 - 1e-6), "sinr {r}");
        }
    }

    #[test]
    fn assign_power_capped_conflict_diverges() {
        let model = ModelParams::default();
        let inst = Instance::new_unnormalized(vec![
            Node { id: 0, x: 0.0, y: 0.0 },
            Node { id: 1, x: 1.0, y: 0.0 },
            Node { id: 2, x: 1.5, y: 0.0 },
            Node { id: 3, x: 0.5, y: 0.0 },
        ])
        .unwrap();
        let set = LinkSet::new(vec![inst.link(0, 1).unwrap(), inst.link(2, 3).unwrap()]);
        let err = assign_power(&inst, &model, &set, 1.0, 1e-6, 10_000).unwrap_err();
        assert!(matches!(err, Error::NotPowerFeasible { .. }));
    }

    #[test]
    fn tvc_trivial_and_two_nodes() {
        let model = ModelParams::default();
        let init = InitParams::default();
        let cap = CapacityParams::default();

        let single = inst_from(&[(0.0, 0.0)]);
        let run = tree_via_capacity(&single, &model, &init, &cap, CapacityMode::Mean, 1).unwrap();
        assert!(run.tree.is_empty());
        assert_eq!(run.schedule.slot_count(), 0);

        let pair = inst_from(&[(0.0, 0.0), (1.0, 0.0)]);
        for mode in [CapacityMode::Mean, CapacityMode::Arbitrary] {
            let run = tree_via_capacity(&pair, &model, &init, &cap, mode, 5).unwrap();
            assert_eq!(run.tree.len(), 1);
            assert_eq!(run.schedule.slot_count(), 1);
            let rep = verify_bi_tree(&pair, &model, &run.tree, &run.tree.stored_powers()).unwrap();
            assert!(rep.pass, "{:?}", rep.failures);
        }
    }

    #[test]
    fn tvc_grid_verifies_both_modes() {
        let model = ModelParams::default();
        let init = InitParams::default();
        let cap = CapacityParams::default();
        let inst = grid(4, 4);
        for (mode, seed) in [(CapacityMode::Mean, 3u64), (CapacityMode::Arbitrary, 3u64)] {
            let run = tree_via_capacity(&inst, &model, &init, &cap, mode, seed).unwrap();
            assert_eq!(run.tree.len(), 15);
            let rep = verify_bi_tree(&inst, &model, &run.tree, &run.tree.stored_powers()).unwrap();
            assert!(rep.pass, "{mode:?}: {:?}", rep.failures);
            let srep = crate::scheduler::verify_schedule(&inst, &model, &run.schedule).unwrap();
            assert!(srep.pass, "{mode:?}: {:?}", srep.violation);
            // One schedule slot per selecting iteration, stamps match.
            assert_eq!(
                run.schedule.slot_count() as u32,
                run.tree.schedule_length()
            );
        }
    }
}
