//! Rooted bi-tree: an aggregation (convergecast) tree plus the dual
//! dissemination tree using the same links reversed, with mirrored slot
//! stamps.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{dual_link, Instance, Link, LinkSet, NodeId, PowerAssignment};

/// One uplink of the tree: `child -> parent`, stamped with its aggregation
/// slot. `round` is the length class the link was formed in (0 when the tree
/// was not built by the round-based construction), and `power` the transmit
/// power the link was formed/selected with.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeLink {
    pub child: NodeId,
    pub parent: NodeId,
    pub length: f64,
    /// Aggregation slot stamp, 1-based, compressed.
    pub stamp: u32,
    /// Dissemination slot stamp for the dual link.
    pub down_stamp: u32,
    pub round: u32,
    pub power: f64,
}

/// Rooted spanning structure with an uplink per non-root node. Downlinks are
/// the duals of the uplinks; their stamps are stored separately so the
/// dissemination reversal is an explicit, testable step.
#[derive(Debug, Clone, PartialEq)]
pub struct BiTree {
    root: NodeId,
    links: Vec<TreeLink>,
    by_child: BTreeMap<NodeId, usize>,
}

impl BiTree {
    /// Builds a tree from raw uplinks. Stamps are compressed to 1..k
    /// preserving order (links sharing a raw stamp share a slot), and
    /// dissemination stamps are initialized to the reversed order.
    pub fn from_uplinks(
        inst: &Instance,
        root: NodeId,
        uplinks: Vec<(NodeId, NodeId, u64, u32, f64)>,
    ) -> Result<BiTree> {
        inst.idx(root)?;
        let mut raw_stamps: Vec<u64> = uplinks.iter().map(|&(_, _, s, _, _)| s).collect();
        raw_stamps.sort_unstable();
        raw_stamps.dedup();
        let rank: BTreeMap<u64, u32> = raw_stamps
            .iter()
            .enumerate()
            .map(|(i, &s)| (s, (i + 1) as u32))
            .collect();
        let k = raw_stamps.len() as u32;

        let mut links = Vec::with_capacity(uplinks.len());
        for (child, parent, raw, round, power) in uplinks {
            if child == root {
                return Err(Error::bad_input("root cannot have an uplink"));
            }
            let length = inst.dist(child, parent)?;
            let stamp = rank[&raw];
            links.push(TreeLink {
                child,
                parent,
                length,
                stamp,
                down_stamp: k + 1 - stamp,
                round,
                power,
            });
        }
        links.sort_by(|a, b| a.stamp.cmp(&b.stamp).then(a.child.cmp(&b.child)));
        let mut by_child = BTreeMap::new();
        for (i, l) in links.iter().enumerate() {
            if by_child.insert(l.child, i).is_some() {
                return Err(Error::bad_input(format!("node {} has two uplinks", l.child)));
            }
        }
        Ok(BiTree {
            root,
            links,
            by_child,
        })
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn links(&self) -> &[TreeLink] {
        &self.links
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    /// Nodes spanned by the tree (root plus all children).
    pub fn nodes(&self) -> Vec<NodeId> {
        let mut v: Vec<NodeId> = self.links.iter().map(|l| l.child).collect();
        v.push(self.root);
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn uplink_of(&self, node: NodeId) -> Option<&TreeLink> {
        self.by_child.get(&node).map(|&i| &self.links[i])
    }

    /// Number of distinct aggregation slots.
    pub fn schedule_length(&self) -> u32 {
        self.links.iter().map(|l| l.stamp).max().unwrap_or(0)
    }

    /// Number of links incident on `node` (undirected neighbor count).
    pub fn degree(&self, node: NodeId) -> usize {
        self.links
            .iter()
            .filter(|l| l.child == node || l.parent == node)
            .count()
    }

    pub fn degrees(&self) -> BTreeMap<NodeId, usize> {
        let mut deg: BTreeMap<NodeId, usize> = BTreeMap::new();
        for node in self.nodes() {
            deg.insert(node, 0);
        }
        for l in &self.links {
            *deg.get_mut(&l.child).unwrap() += 1;
            *deg.get_mut(&l.parent).unwrap() += 1;
        }
        deg
    }

    /// The aggregation side as a plain link set (child -> parent).
    pub fn uplink_set(&self, inst: &Instance) -> Result<LinkSet> {
        let links = self
            .links
            .iter()
            .map(|l| inst.link(l.child, l.parent))
            .collect::<Result<Vec<Link>>>()?;
        Ok(LinkSet::new(links))
    }

    /// The dissemination side (parent -> child).
    pub fn downlink_set(&self, inst: &Instance) -> Result<LinkSet> {
        Ok(LinkSet::new(
            self.uplink_set(inst)?.links.iter().map(dual_link).collect(),
        ))
    }

    /// Explicit power assignment covering both directions with the stored
    /// per-link powers (the dual uses the same power: equal length).
    pub fn stored_powers(&self) -> PowerAssignment {
        let mut powers = BTreeMap::new();
        for l in &self.links {
            powers.insert((l.child, l.parent), l.power);
            powers.insert((l.parent, l.child), l.power);
        }
        PowerAssignment::explicit(powers)
    }

    /// Replaces stored powers (used when an explicit assignment is computed
    /// after construction).
    pub fn with_powers(mut self, powers: &BTreeMap<(NodeId, NodeId), f64>) -> Result<BiTree> {
        for l in &mut self.links {
            l.power = *powers.get(&(l.child, l.parent)).ok_or_else(|| {
                Error::bad_input(format!("missing power for {}->{}", l.child, l.parent))
            })?;
        }
        Ok(self)
    }
}

/// Recomputes dissemination stamps as `max_stamp + 1 - stamp`, giving the
/// root-to-leaves order ("same schedule in opposite order"). Idempotent.
pub fn reverse_dissemination_schedule(tree: &BiTree) -> BiTree {
    let k = tree.schedule_length();
    let mut out = tree.clone();
    for l in &mut out.links {
        l.down_stamp = k + 1 - l.stamp;
    }
    out
}
