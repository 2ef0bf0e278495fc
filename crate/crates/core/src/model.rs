//! Geometry, link algebra, power assignments, affectance, and SINR
//! feasibility. This is the mathematical kernel every other module calls.
//!
//! All types are immutable after construction and all operations are pure
//! functions, so they are safe to use from parallel batch workers without
//! coordination.
//!
//! Conventions:
//! - instances are normalized so the minimum pairwise distance is 1;
//! - a sender's self-affectance on its own link is 0;
//! - feasibility comparisons use an absolute slack of [`FEAS_TOL`] to avoid
//!   boundary flapping.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute slack for feasibility and decode comparisons.
pub const FEAS_TOL: f64 = 1e-9;

/// Relative tolerance for instance normalization (min distance vs 1).
pub const NORM_TOL: f64 = 1e-12;

pub type NodeId = u32;

/// SINR model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    /// Path-loss exponent, must exceed 2.
    pub alpha: f64,
    /// Required SINR threshold.
    pub beta: f64,
    /// Ambient noise.
    pub noise: f64,
    /// Affectance cap constant: per-sender affectance is capped at 1 + epsilon.
    pub epsilon: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            alpha: 3.0,
            beta: 1.0,
            noise: 1.0,
            epsilon: 0.1,
        }
    }
}

impl ModelParams {
    /// Noise value used when sizing powers; a zero floor is substituted with
    /// 1 so the headroom formulas stay positive (any positive power works
    /// under zero noise).
    pub fn noise_floor(&self) -> f64 {
        if self.noise > 0.0 {
            self.noise
        } else {
            1.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 2.0) {
            return Err(Error::bad_input(format!("alpha must be > 2, got {}", self.alpha)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::bad_input(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::bad_input(format!("noise must be >= 0, got {}", self.noise)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::bad_input(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }

    /// The affectance cap 1 + epsilon.
    pub fn cap(&self) -> f64 {
        1.0 + self.epsilon
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub x: f64,
    pub y: f64,
}

struct DistCache {
    n: usize,
    dist: Vec<f64>,
    /// (alpha, dist^alpha) for the first alpha seen.
    pow: OnceLock<(u64, Vec<f64>)>,
}

impl DistCache {
    fn build(nodes: &[Node]) -> Self {
        let n = nodes.len();
        let mut dist = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = (nodes[i].x - nodes[j].x).hypot(nodes[i].y - nodes[j].y);
                dist[i * n + j] = d;
                dist[j * n + i] = d;
            }
        }
        DistCache {
            n,
            dist,
            pow: OnceLock::new(),
        }
    }

    #[inline]
    fn d(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.n + j]
    }

    #[inline]
    fn d_pow(&self, i: usize, j: usize, alpha: f64) -> f64 {
        let (key, table) = self.pow.get_or_init(|| {
            (
                alpha.to_bits(),
                self.dist.iter().map(|d| d.powf(alpha)).collect(),
            )
        });
        if *key == alpha.to_bits() {
            table[i * self.n + j]
        } else {
            self.d(i, j).powf(alpha)
        }
    }
}

/// Immutable planar point set with unique ids, normalized so the minimum
/// pairwise distance is 1. `delta` is the maximum pairwise distance after
/// normalization (1 for a single-point instance, by convention).
pub struct Instance {
    nodes: Vec<Node>,
    index: BTreeMap<NodeId, usize>,
    min_dist: f64,
    delta: f64,
    cache: DistCache,
}

impl std::fmt::Debug for Instance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Instance")
            .field("n", &self.nodes.len())
            .field("delta", &self.delta)
            .finish()
    }
}

impl Instance {
    /// Builds an instance from raw points, rescaling so that the minimum
    /// pairwise distance becomes 1 (the protocol convention).
    pub fn new(raw: Vec<Node>) -> Result<Instance> {
        Instance::build(raw, true)
    }

    /// Builds an instance keeping coordinates as given. The affectance and
    /// feasibility operations are well defined on any point set; only the
    /// round-based protocols assume the normalized convention.
    pub fn new_unnormalized(raw: Vec<Node>) -> Result<Instance> {
        Instance::build(raw, false)
    }

    fn build(raw: Vec<Node>, normalize: bool) -> Result<Instance> {
        if raw.is_empty() {
            return Err(Error::bad_input("instance needs at least one node"));
        }
        let mut index = BTreeMap::new();
        for (i, node) in raw.iter().enumerate() {
            if index.insert(node.id, i).is_some() {
                return Err(Error::bad_input(format!("duplicate node id {}", node.id)));
            }
            if !node.x.is_finite() || !node.y.is_finite() {
                return Err(Error::bad_input(format!("non-finite position for node {}", node.id)));
            }
        }

        let mut min_raw = f64::INFINITY;
        for i in 0..raw.len() {
            for j in (i + 1)..raw.len() {
                let d = (raw[i].x - raw[j].x).hypot(raw[i].y - raw[j].y);
                if d < min_raw {
                    min_raw = d;
                }
            }
        }
        if raw.len() >= 2 && min_raw <= 0.0 {
            return Err(Error::bad_input("coincident points in instance"));
        }

        let scale = if normalize && raw.len() >= 2 { 1.0 / min_raw } else { 1.0 };
        let nodes: Vec<Node> = raw
            .into_iter()
            .map(|n| Node {
                id: n.id,
                x: n.x * scale,
                y: n.y * scale,
            })
            .collect();

        let mut min_dist = f64::INFINITY;
        let mut delta: f64 = 0.0;
        for i in 0..nodes.len() {
            for j in (i + 1)..nodes.len() {
                let d = (nodes[i].x - nodes[j].x).hypot(nodes[i].y - nodes[j].y);
                min_dist = min_dist.min(d);
                delta = delta.max(d);
            }
        }
        if nodes.len() < 2 {
            min_dist = 1.0;
            delta = 1.0;
        }
        debug_assert!(!normalize || (min_dist - 1.0).abs() <= NORM_TOL * 10.0);

        let cache = DistCache::build(&nodes);
        Ok(Instance {
            nodes,
            index,
            min_dist,
            delta,
            cache,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn min_dist(&self) -> f64 {
        self.min_dist
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn idx(&self, id: NodeId) -> Result<usize> {
        self.index
            .get(&id)
            .copied()
            .ok_or_else(|| Error::bad_input(format!("unknown node id {id}")))
    }

    pub fn id_of(&self, idx: usize) -> NodeId {
        self.nodes[idx].id
    }

    #[inline]
    pub fn dist_idx(&self, i: usize, j: usize) -> f64 {
        self.cache.d(i, j)
    }

    #[inline]
    pub fn dist_pow_idx(&self, i: usize, j: usize, alpha: f64) -> f64 {
        self.cache.d_pow(i, j, alpha)
    }

    pub fn dist(&self, a: NodeId, b: NodeId) -> Result<f64> {
        Ok(self.dist_idx(self.idx(a)?, self.idx(b)?))
    }

    /// Constructs a link between two existing, distinct nodes.
    pub fn link(&self, sender: NodeId, receiver: NodeId) -> Result<Link> {
        if sender == receiver {
            return Err(Error::bad_input(format!("link {sender}->{receiver} has equal endpoints")));
        }
        let length = self.dist(sender, receiver)?;
        Ok(Link {
            sender,
            receiver,
            length,
        })
    }
}

/// Directed sender -> receiver pair with its derived length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub sender: NodeId,
    pub receiver: NodeId,
    pub length: f64,
}

impl Link {
    /// Global tie-broken ordering key: (length, sender, receiver).
    pub fn order_key(&self) -> (f64, NodeId, NodeId) {
        (self.length, self.sender, self.receiver)
    }

    pub fn order_le(&self, other: &Link) -> bool {
        let a = self.order_key();
        let b = other.order_key();
        (a.0, a.1, a.2) <= (b.0, b.1, b.2)
    }
}

/// The dual reverses sender and receiver.
pub fn dual_link(l: &Link) -> Link {
    Link {
        sender: l.receiver,
        receiver: l.sender,
        length: l.length,
    }
}

/// Ordered collection of links.
#[derive(Debug, Clone, Default)]
pub struct LinkSet {
    pub links: Vec<Link>,
}

impl LinkSet {
    pub fn new(links: Vec<Link>) -> Self {
        LinkSet { links }
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn senders(&self) -> Vec<NodeId> {
        let mut s: Vec<NodeId> = self.links.iter().map(|l| l.sender).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn receivers(&self) -> Vec<NodeId> {
        let mut r: Vec<NodeId> = self.links.iter().map(|l| l.receiver).collect();
        r.sort_unstable();
        r.dedup();
        r
    }

    /// Number of links incident on each node.
    pub fn degrees(&self) -> BTreeMap<NodeId, usize> {
        let mut deg = BTreeMap::new();
        for l in &self.links {
            *deg.entry(l.sender).or_insert(0) += 1;
            *deg.entry(l.receiver).or_insert(0) += 1;
        }
        deg
    }

    pub fn max_length(&self) -> f64 {
        self.links.iter().fold(0.0, |m, l| m.max(l.length))
    }

    /// Links sorted by the global tie-broken length order.
    pub fn sorted_by_length(&self) -> Vec<Link> {
        let mut v = self.links.clone();
        v.sort_by(|a, b| {
            a.length
                .partial_cmp(&b.length)
                .unwrap()
                .then(a.sender.cmp(&b.sender))
                .then(a.receiver.cmp(&b.receiver))
        });
        v
    }
}

/// Maps each link to its dual; an involution.
pub fn dual_set(set: &LinkSet) -> LinkSet {
    LinkSet::new(set.links.iter().map(dual_link).collect())
}

/// Power assignment resolving each link to the sender's transmit power.
///
/// The `mean` and `linear` kinds carry a multiplicative scale. Helpers pick
/// the scale so that every link has enough headroom over noise for
/// `c(u, v) <= 2 beta` (the longest link sits exactly at 2 beta).
#[derive(Debug, Clone, PartialEq)]
pub enum PowerAssignment {
    Uniform { power: f64 },
    Mean { scale: f64 },
    Linear { scale: f64 },
    Explicit { powers: BTreeMap<(NodeId, NodeId), f64> },
}

impl PowerAssignment {
    pub fn uniform(power: f64) -> Self {
        PowerAssignment::Uniform { power }
    }

    /// Uniform power sized for a link set: `2 beta N maxlen^alpha`.
    pub fn uniform_for(set: &LinkSet, params: &ModelParams) -> Self {
        let max_len = set.max_length().max(1.0);
        PowerAssignment::Uniform {
            power: 2.0 * params.beta * params.noise_floor() * max_len.powf(params.alpha),
        }
    }

    /// Mean power `scale * d^(alpha/2)` with scale `2 beta N maxlen^(alpha/2)`.
    pub fn mean_for(set: &LinkSet, params: &ModelParams) -> Self {
        let max_len = set.max_length().max(1.0);
        PowerAssignment::Mean {
            scale: 2.0 * params.beta * params.noise_floor() * max_len.powf(params.alpha / 2.0),
        }
    }

    /// Linear power `scale * d^alpha` with scale `2 beta N`, giving
    /// `c(u, v) = 2 beta` for every link.
    pub fn linear_for(params: &ModelParams) -> Self {
        PowerAssignment::Linear {
            scale: 2.0 * params.beta * params.noise_floor(),
        }
    }

    pub fn explicit(powers: BTreeMap<(NodeId, NodeId), f64>) -> Self {
        PowerAssignment::Explicit { powers }
    }

    pub fn resolve(&self, link: &Link, params: &ModelParams) -> Result<f64> {
        let p = match self {
            PowerAssignment::Uniform { power } => *power,
            PowerAssignment::Mean { scale } => scale * link.length.powf(params.alpha / 2.0),
            PowerAssignment::Linear { scale } => scale * link.length.powf(params.alpha),
            PowerAssignment::Explicit { powers } => *powers
                .get(&(link.sender, link.receiver))
                .ok_or_else(|| {
                    Error::bad_input(format!(
                        "no explicit power for link {}->{}",
                        link.sender, link.receiver
                    ))
                })?,
        };
        if !(p > 0.0) {
            return Err(Error::bad_input(format!(
                "non-positive power {p} for link {}->{}",
                link.sender, link.receiver
            )));
        }
        Ok(p)
    }

    pub fn kind_str(&self) -> &'static str {
        match self {
            PowerAssignment::Uniform { .. } => "uniform",
            PowerAssignment::Mean { .. } => "mean",
            PowerAssignment::Linear { .. } => "linear",
            PowerAssignment::Explicit { .. } => "explicit",
        }
    }
}

/// `c(u, v) = beta / (1 - beta N d^alpha / P)`, the per-link factor relating
/// affectance to interference. Requires the signal to exceed the bare noise
/// requirement; always at least beta.
pub fn c_factor(link: &Link, power: f64, params: &ModelParams) -> Result<f64> {
    let required = params.beta * params.noise * link.length.powf(params.alpha);
    if power <= required {
        return Err(Error::NoiseDominated {
            sender: link.sender,
            receiver: link.receiver,
            power,
            required,
        });
    }
    Ok(params.beta / (1.0 - required / power))
}

/// Affectance of sender `w` (transmitting at `w_power`) on link `l`
/// (whose own sender transmits at `l_power`):
/// `min{1 + eps, c(u, v) (P_w / P_u) (d(u, v) / d(w, v))^alpha}`.
///
/// Self-affectance is 0 by convention. A receiver acting as an interferer
/// contributes normally (distance 0 hits the cap).
pub fn affectance(
    inst: &Instance,
    params: &ModelParams,
    w: NodeId,
    w_power: f64,
    l: &Link,
    l_power: f64,
) -> Result<f64> {
    if w == l.sender {
        return Ok(0.0);
    }
    let c = c_factor(l, l_power, params)?;
    let wi = inst.idx(w)?;
    let ri = inst.idx(l.receiver)?;
    let d_wv_pow = inst.dist_pow_idx(wi, ri, params.alpha);
    let raw = c * (w_power / l_power) * (l.length.powf(params.alpha) / d_wv_pow);
    Ok(params.cap().min(raw))
}

/// Sum of per-sender affectances on `l` over a set of (sender, power).
pub fn affectance_sum(
    inst: &Instance,
    params: &ModelParams,
    senders: &[(NodeId, f64)],
    l: &Link,
    l_power: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for &(w, p) in senders {
        total += affectance(inst, params, w, p, l, l_power)?;
    }
    Ok(total)
}

/// Matrix of pairwise affectances: entry (i, j) is the affectance of link
/// i's sender on link j. Diagonal is 0.
pub fn affectance_matrix(
    inst: &Instance,
    params: &ModelParams,
    set: &LinkSet,
    power: &PowerAssignment,
) -> Result<Vec<Vec<f64>>> {
    let powers: Vec<f64> = set
        .links
        .iter()
        .map(|l| power.resolve(l, params))
        .collect::<Result<_>>()?;
    let mut m = vec![vec![0.0; set.len()]; set.len()];
    for (i, li) in set.links.iter().enumerate() {
        for (j, lj) in set.links.iter().enumerate() {
            if i == j {
                continue;
            }
            m[i][j] = affectance(inst, params, li.sender, powers[i], lj, powers[j])?;
        }
    }
    Ok(m)
}

/// Why a link set fails feasibility.
#[derive(Debug, Clone, PartialEq)]
pub enum Infeasibility {
    /// Total incoming affectance exceeded 1.
    Overload { link_index: usize, load: f64 },
    /// The link cannot succeed even alone.
    NoiseDominated { link_index: usize },
}

/// Feasibility verdict with per-link incoming affectance (slack view).
#[derive(Debug, Clone)]
pub struct FeasibilityReport {
    pub feasible: bool,
    /// Total incoming affectance per link (capped per sender); NaN when the
    /// link is noise-dominated.
    pub loads: Vec<f64>,
    pub failures: Vec<Infeasibility>,
}

/// A set is feasible iff every link's total incoming affectance is at most 1
/// (with [`FEAS_TOL`] slack). Interference from links sharing a sender is
/// excluded: one node transmits a single signal.
pub fn is_feasible(
    inst: &Instance,
    params: &ModelParams,
    set: &LinkSet,
    power: &PowerAssignment,
) -> Result<FeasibilityReport> {
    let mut loads = Vec::with_capacity(set.len());
    let mut failures = Vec::new();
    let powers: Vec<f64> = set
        .links
        .iter()
        .map(|l| power.resolve(l, params))
        .collect::<Result<_>>()?;

    for (j, lj) in set.links.iter().enumerate() {
        match c_factor(lj, powers[j], params) {
            Err(_) => {
                loads.push(f64::NAN);
                failures.push(Infeasibility::NoiseDominated { link_index: j });
            }
            Ok(_) => {
                let mut load = 0.0;
                for (i, li) in set.links.iter().enumerate() {
                    if i == j || li.sender == lj.sender {
                        continue;
                    }
                    load += affectance(inst, params, li.sender, powers[i], lj, powers[j])?;
                }
                loads.push(load);
                if load > 1.0 + FEAS_TOL {
                    failures.push(Infeasibility::Overload {
                        link_index: j,
                        load,
                    });
                }
            }
        }
    }

    Ok(FeasibilityReport {
        feasible: failures.is_empty(),
        loads,
        failures,
    })
}

/// Left side of the SINR inequality at `l`'s receiver, given the set of
/// concurrent transmitters. Returns 0 when `l`'s sender is not transmitting.
/// Success means the ratio is at least beta.
pub fn sinr_ratio(
    inst: &Instance,
    params: &ModelParams,
    l: &Link,
    transmitters: &[(NodeId, f64)],
    l_power: f64,
) -> Result<f64> {
    if !transmitters.iter().any(|&(id, _)| id == l.sender) {
        return Ok(0.0);
    }
    let ri = inst.idx(l.receiver)?;
    let signal = l_power / l.length.powf(params.alpha);
    let mut interference = 0.0;
    for &(w, p) in transmitters {
        if w == l.sender {
            continue;
        }
        let wi = inst.idx(w)?;
        let d_pow = inst.dist_pow_idx(wi, ri, params.alpha);
        if d_pow == 0.0 {
            return Ok(0.0); // interferer at the receiver swamps it
        }
        interference += p / d_pow;
    }
    Ok(signal / (params.noise + interference))
}
