//! Structural measures of link sets and the bi-tree/schedule verifier.
//!
//! Sparsity is computed exactly: the supremum of `|B ∩ L(8 rad(B))|` over all
//! closed balls is attained at a minimum enclosing ball of at most three link
//! endpoints, because shrinking any ball to the MEB of the endpoints it
//! contains can only lower the radius, which only enlarges the set of
//! qualifying lengths. Candidates are therefore radius-zero balls at
//! endpoints, diameter circles of endpoint pairs, and circumcircles of
//! endpoint triples. Balls with radius above `maxlen / 8` count nothing and
//! are skipped, which keeps the enumeration local.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{
    affectance, dual_link, is_feasible, Instance, Link, LinkSet, ModelParams, NodeId,
    PowerAssignment, FEAS_TOL,
};
use crate::tree::BiTree;

// ---------------------------------------------------------------------------
// Sparsity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BallWitness {
    pub center: (f64, f64),
    pub radius: f64,
    /// Indices (into the input set) of the qualifying links.
    pub links: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparsityReport {
    pub psi: usize,
    pub witness: Option<BallWitness>,
}

#[derive(Clone, Copy)]
struct Ball {
    cx: f64,
    cy: f64,
    r: f64,
}

fn circumcircle(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> Option<Ball> {
    let d = 2.0 * (a.0 * (b.1 - c.1) + b.0 * (c.1 - a.1) + c.0 * (a.1 - b.1));
    if d.abs() < 1e-12 {
        return None; // collinear: covered by pair diameters
    }
    let a2 = a.0 * a.0 + a.1 * a.1;
    let b2 = b.0 * b.0 + b.1 * b.1;
    let c2 = c.0 * c.0 + c.1 * c.1;
    let ux = (a2 * (b.1 - c.1) + b2 * (c.1 - a.1) + c2 * (a.1 - b.1)) / d;
    let uy = (a2 * (c.0 - b.0) + b2 * (a.0 - c.0) + c2 * (b.0 - a.0)) / d;
    let r = (a.0 - ux).hypot(a.1 - uy);
    Some(Ball {
        cx: ux,
        cy: uy,
        r,
    })
}

/// Exact psi-sparsity of a link set.
pub fn sparsity(inst: &Instance, set: &LinkSet) -> Result<SparsityReport> {
    if set.is_empty() {
        return Ok(SparsityReport {
            psi: 0,
            witness: None,
        });
    }

    // Unique endpoints.
    let mut endpoints: Vec<usize> = Vec::new();
    for l in &set.links {
        endpoints.push(inst.idx(l.sender)?);
        endpoints.push(inst.idx(l.receiver)?);
    }
    endpoints.sort_unstable();
    endpoints.dedup();
    let pos: Vec<(f64, f64)> = endpoints
        .iter()
        .map(|&i| (inst.nodes()[i].x, inst.nodes()[i].y))
        .collect();

    // Links sorted by length descending, so per-candidate counting can stop
    // at the 8 * rad cutoff.
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| {
        set.links[b]
            .length
            .partial_cmp(&set.links[a].length)
            .unwrap()
            .then(a.cmp(&b))
    });
    let link_pts: Vec<((f64, f64), (f64, f64), f64)> = set
        .links
        .iter()
        .map(|l| {
            let s = inst.idx(l.sender).unwrap();
            let r = inst.idx(l.receiver).unwrap();
            Ok((
                (inst.nodes()[s].x, inst.nodes()[s].y),
                (inst.nodes()[r].x, inst.nodes()[r].y),
                l.length,
            ))
        })
        .collect::<Result<_>>()?;

    let max_len = set.max_length();
    let cutoff = max_len / 8.0 + FEAS_TOL;

    let mut candidates: Vec<Ball> = Vec::new();
    for &(x, y) in &pos {
        candidates.push(Ball { cx: x, cy: y, r: 0.0 });
    }
    let m = pos.len();
    for i in 0..m {
        for j in (i + 1)..m {
            let d = (pos[i].0 - pos[j].0).hypot(pos[i].1 - pos[j].1);
            if d > 2.0 * cutoff {
                continue;
            }
            candidates.push(Ball {
                cx: 0.5 * (pos[i].0 + pos[j].0),
                cy: 0.5 * (pos[i].1 + pos[j].1),
                r: 0.5 * d,
            });
            for k in (j + 1)..m {
                let djk = (pos[j].0 - pos[k].0).hypot(pos[j].1 - pos[k].1);
                let dik = (pos[i].0 - pos[k].0).hypot(pos[i].1 - pos[k].1);
                if djk > 2.0 * cutoff || dik > 2.0 * cutoff {
                    continue;
                }
                if let Some(ball) = circumcircle(pos[i], pos[j], pos[k]) {
                    if ball.r <= cutoff {
                        candidates.push(ball);
                    }
                }
            }
        }
    }

    let count_ball = |ball: &Ball| -> Vec<usize> {
        let mut hits = Vec::new();
        let min_len = 8.0 * ball.r - FEAS_TOL;
        let reach = ball.r + FEAS_TOL;
        for &li in &order {
            let (s, r, len) = link_pts[li];
            if len < min_len {
                break;
            }
            let ds = (s.0 - ball.cx).hypot(s.1 - ball.cy);
            let dr = (r.0 - ball.cx).hypot(r.1 - ball.cy);
            if ds <= reach || dr <= reach {
                hits.push(li);
            }
        }
        hits
    };

    let best = candidates
        .par_iter()
        .enumerate()
        .map(|(ci, ball)| (count_ball(ball).len(), ci))
        .reduce(
            || (0usize, usize::MAX),
            |a, b| {
                // Highest count wins; earliest candidate breaks ties.
                if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                    b
                } else {
                    a
                }
            },
        );

    if best.0 == 0 {
        return Ok(SparsityReport {
            psi: 0,
            witness: None,
        });
    }
    let ball = &candidates[best.1];
    let mut links = count_ball(ball);
    links.sort_unstable();
    Ok(SparsityReport {
        psi: best.0,
        witness: Some(BallWitness {
            center: (ball.cx, ball.cy),
            radius: ball.r,
            links,
        }),
    })
}

// ---------------------------------------------------------------------------
// Independence
// ---------------------------------------------------------------------------

/// Pair condition `d(x, y') d(y, x') >= q^2 d(x, y) d(x', y')` for
/// `l = (x, y)`, `l2 = (x', y')`.
pub fn independence_check(inst: &Instance, l: &Link, l2: &Link, q: f64) -> Result<bool> {
    let cross = inst.dist(l.sender, l2.receiver)? * inst.dist(l.receiver, l2.sender)?;
    Ok(cross >= q * q * l.length * l2.length)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndependencePartition {
    /// Class index per link, aligned with the input order.
    pub class_of: Vec<usize>,
    pub class_count: usize,
    pub c: f64,
}

/// Greedy coloring of the non-independence conflict graph, processing links
/// in the ascending tie-broken length order.
pub fn partition_independent(
    inst: &Instance,
    set: &LinkSet,
    c: f64,
) -> Result<IndependencePartition> {
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

    let mut class_of = vec![usize::MAX; set.len()];
    let mut class_count = 0usize;
    for (pos, &li) in order.iter().enumerate() {
        let mut used = vec![false; class_count];
        for &lj in &order[..pos] {
            if !independence_check(inst, &set.links[li], &set.links[lj], c)? {
                used[class_of[lj]] = true;
            }
        }
        let class = used.iter().position(|&u| !u).unwrap_or(class_count);
        if class == class_count {
            class_count += 1;
        }
        class_of[li] = class;
    }
    Ok(IndependencePartition {
        class_of,
        class_count,
        c,
    })
}

// ---------------------------------------------------------------------------
// f-values and amenability
// ---------------------------------------------------------------------------

/// Uniform and linear power contexts used by the mixed f-value.
#[derive(Debug, Clone)]
pub struct DualPowerContext {
    pub uniform: PowerAssignment,
    pub linear: PowerAssignment,
}

impl DualPowerContext {
    pub fn for_set(set: &LinkSet, params: &ModelParams) -> Self {
        DualPowerContext {
            uniform: PowerAssignment::uniform_for(set, params),
            linear: PowerAssignment::linear_for(params),
        }
    }
}

/// `f_l(l') = a^U_{l'}(l) + a^L_l(l')` when `l <= l'` in the global
/// tie-broken length order, else 0.
pub fn f_value(
    inst: &Instance,
    params: &ModelParams,
    ctx: &DualPowerContext,
    l: &Link,
    l2: &Link,
) -> Result<f64> {
    if !l.order_le(l2) {
        return Ok(0.0);
    }
    let u_power_l = ctx.uniform.resolve(l, params)?;
    let u_power_l2 = ctx.uniform.resolve(l2, params)?;
    let a_u = affectance(inst, params, l2.sender, u_power_l2, l, u_power_l)?;
    let lin_l = ctx.linear.resolve(l, params)?;
    let lin_l2 = ctx.linear.resolve(l2, params)?;
    let a_l = affectance(inst, params, l.sender, lin_l, l2, lin_l2)?;
    Ok(a_u + a_l)
}

/// `max over l in L of sum over l' in L of f_l(l')` (self term excluded:
/// probing links outside L is unbounded, so the quantifier runs over L).
pub fn amenability(inst: &Instance, params: &ModelParams, set: &LinkSet) -> Result<f64> {
    let ctx = DualPowerContext::for_set(set, params);
    let mut eta: f64 = 0.0;
    for (i, l) in set.links.iter().enumerate() {
        let mut sum = 0.0;
        for (j, l2) in set.links.iter().enumerate() {
            if i == j {
                continue;
            }
            sum += f_value(inst, params, &ctx, l, l2)?;
        }
        eta = eta.max(sum);
    }
    Ok(eta)
}

// ---------------------------------------------------------------------------
// Upsilon
// ---------------------------------------------------------------------------

/// `kappa * max(1, log2 log2 max(delta, 4) + log2 n)`.
pub fn upsilon(inst: &Instance, kappa: f64) -> f64 {
    let delta = inst.delta().max(4.0);
    let n = inst.len() as f64;
    kappa * (delta.log2().log2() + n.log2()).max(1.0)
}

// ---------------------------------------------------------------------------
// Bi-tree verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub pass: bool,
    pub spanning_ok: bool,
    pub aggregation_order_ok: bool,
    pub dissemination_order_ok: bool,
    pub slots_feasible: bool,
    pub failures: Vec<String>,
}

impl VerifyReport {
    fn passing() -> Self {
        VerifyReport {
            pass: true,
            spanning_ok: true,
            aggregation_order_ok: true,
            dissemination_order_ok: true,
            slots_feasible: true,
            failures: Vec::new(),
        }
    }
}

/// Checks that (a) uplinks span the tree's nodes and reach the root,
/// (b) every uplink is stamped after all links in its child's subtree,
/// (c) the dissemination stamps carry the opposite order, and (d) each
/// stamped slot's link group is feasible under the declared powers.
pub fn verify_bi_tree(
    inst: &Instance,
    params: &ModelParams,
    tree: &BiTree,
    power: &PowerAssignment,
) -> Result<VerifyReport> {
    let mut report = VerifyReport::passing();
    let mut fail = |flag: &mut bool, failures: &mut Vec<String>, msg: String| {
        *flag = false;
        failures.push(msg);
    };

    // (a) every non-root node has an uplink and reaches the root.
    let nodes = tree.nodes();
    for &node in &nodes {
        if node == tree.root() {
            continue;
        }
        let mut cur = node;
        let mut hops = 0usize;
        loop {
            match tree.uplink_of(cur) {
                None => {
                    fail(
                        &mut report.spanning_ok,
                        &mut report.failures,
                        format!("node {cur} has no uplink and is not the root"),
                    );
                    break;
                }
                Some(l) => {
                    cur = l.parent;
                    hops += 1;
                    if cur == tree.root() {
                        break;
                    }
                    if hops > tree.len() {
                        fail(
                            &mut report.spanning_ok,
                            &mut report.failures,
                            format!("cycle reached from node {node}"),
                        );
                        break;
                    }
                }
            }
        }
    }

    // (b) + (c) per-edge ordering, which extends to whole subtrees by
    // induction.
    for l in tree.links() {
        if let Some(up) = tree.uplink_of(l.parent) {
            if l.stamp >= up.stamp {
                fail(
                    &mut report.aggregation_order_ok,
                    &mut report.failures,
                    format!(
                        "link {}->{} stamped {} not before parent uplink stamped {}",
                        l.child, l.parent, l.stamp, up.stamp
                    ),
                );
            }
            if l.down_stamp <= up.down_stamp {
                fail(
                    &mut report.dissemination_order_ok,
                    &mut report.failures,
                    format!(
                        "downlink to {} stamped {} not after downlink to {} stamped {}",
                        l.child, l.down_stamp, l.parent, up.down_stamp
                    ),
                );
            }
        }
    }

    // (d) slot groups feasible under the declared powers, both directions.
    let mut by_stamp: std::collections::BTreeMap<u32, Vec<Link>> = Default::default();
    let mut by_down: std::collections::BTreeMap<u32, Vec<Link>> = Default::default();
    for l in tree.links() {
        let up = inst.link(l.child, l.parent)?;
        by_stamp.entry(l.stamp).or_default().push(up);
        by_down.entry(l.down_stamp).or_default().push(dual_link(&up));
    }
    for (direction, groups) in [("uplink", &by_stamp), ("downlink", &by_down)] {
        for (stamp, links) in groups {
            let rep = is_feasible(inst, params, &LinkSet::new(links.clone()), power)?;
            if !rep.feasible {
                fail(
                    &mut report.slots_feasible,
                    &mut report.failures,
                    format!("{direction} slot {stamp} infeasible"),
                );
            }
        }
    }

    report.pass = report.spanning_ok
        && report.aggregation_order_ok
        && report.dissemination_order_ok
        && report.slots_feasible;
    Ok(report)
}

/// Latency of a verified bi-tree: a convergecast or broadcast completes in
/// one schedule pass, any node-to-node message in two (up, then down).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub convergecast_slots: u32,
    pub broadcast_slots: u32,
    pub pairwise_slots: u32,
}

pub fn latency(tree: &BiTree) -> LatencyReport {
    let s = tree.schedule_length();
    LatencyReport {
        convergecast_slots: s,
        broadcast_slots: s,
        pairwise_slots: 2 * s,
    }
}
