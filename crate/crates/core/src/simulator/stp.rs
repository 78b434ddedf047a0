//! Spanning-tree role election over the switch graph.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::fdi::PortRef;
use crate::powermodel::StpRole;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bridge {
    pub id: String,
    pub priority: u32,
}

/// An operational switch-to-switch link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StpLink {
    pub a: PortRef,
    pub b: PortRef,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StpOutcome {
    /// Root bridge of each bridge's component.
    pub roots: BTreeMap<String, String>,
    /// Hop count to the root.
    pub distance: BTreeMap<String, u32>,
    /// Role of every port on a link between two bridges.
    pub roles: BTreeMap<PortRef, StpRole>,
}

impl StpOutcome {
    /// Links whose two ends both forward.
    pub fn active_links<'a>(&self, links: &'a [StpLink]) -> Vec<&'a StpLink> {
        links
            .iter()
            .filter(|l| {
                let fwd = |p: &PortRef| {
                    matches!(
                        self.roles.get(p),
                        Some(StpRole::Root) | Some(StpRole::Designated)
                    )
                };
                fwd(&l.a) && fwd(&l.b)
            })
            .collect()
    }

    /// Bridges whose root changed or whose ports present in both outcomes
    /// changed role. Bridges absent from either side are left out.
    pub fn participants(&self, before: &StpOutcome) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for (bridge, root) in &self.roots {
            let Some(old_root) = before.roots.get(bridge) else {
                continue;
            };
            if old_root != root {
                out.insert(bridge.clone());
            }
        }
        for (port, role) in &self.roles {
            if before.roots.contains_key(&port.device)
                && before.roles.get(port).is_some_and(|old| old != role)
            {
                out.insert(port.device.clone());
            }
        }
        out
    }
}

/// Elects a root per connected component, lowest `(priority, id)`, then
/// assigns roles by shortest path to the root. Ties between candidate root
/// ports go to the lowest `(peer priority, peer id, peer port, own port)`;
/// on every other link the end nearer the root (then lower bridge id, then
/// lower port id) is designated and the far end blocks.
pub fn stp_converge(bridges: &[Bridge], links: &[StpLink]) -> StpOutcome {
    let prio: BTreeMap<&str, u32> = bridges
        .iter()
        .map(|b| (b.id.as_str(), b.priority))
        .collect();
    let links: Vec<&StpLink> = links
        .iter()
        .filter(|l| {
            prio.contains_key(l.a.device.as_str()) && prio.contains_key(l.b.device.as_str())
        })
        .collect();
    let mut adj: BTreeMap<&str, Vec<(&PortRef, &PortRef)>> = BTreeMap::new();
    for l in &links {
        adj.entry(l.a.device.as_str())
            .or_default()
            .push((&l.a, &l.b));
        adj.entry(l.b.device.as_str())
            .or_default()
            .push((&l.b, &l.a));
    }
    let key = |id: &str| (prio[id], id.to_string());

    let mut out = StpOutcome::default();
    let mut seen = BTreeSet::new();
    let mut order: Vec<&str> = prio.keys().copied().collect();
    order.sort_by_key(|id| key(id));
    for start in order {
        if seen.contains(start) {
            continue;
        }
        // `start` is the lowest-keyed unseen bridge, hence its component's root.
        let mut queue = VecDeque::from([start]);
        seen.insert(start);
        out.distance.insert(start.to_string(), 0);
        let mut component = vec![start];
        while let Some(b) = queue.pop_front() {
            let d = out.distance[b];
            for (_, peer) in adj.get(b).map(Vec::as_slice).unwrap_or_default() {
                let p = peer.device.as_str();
                if seen.insert(p) {
                    out.distance.insert(p.to_string(), d + 1);
                    component.push(p);
                    queue.push_back(p);
                }
            }
        }
        for b in component {
            out.roots.insert(b.to_string(), start.to_string());
        }
    }

    let mut root_port: BTreeMap<&str, &PortRef> = BTreeMap::new();
    for (b, ports) in &adj {
        let d = out.distance[*b];
        if d == 0 {
            continue;
        }
        let best = ports
            .iter()
            .filter(|(_, peer)| out.distance[&peer.device] + 1 == d)
            .min_by_key(|(own, peer)| (key(&peer.device), peer.port, own.port));
        if let Some((own, _)) = best {
            root_port.insert(b, own);
        }
    }
    for l in &links {
        let is_root = |p: &PortRef| root_port.get(p.device.as_str()) == Some(&p);
        let (ra, rb) = if is_root(&l.a) {
            (StpRole::Root, StpRole::Designated)
        } else if is_root(&l.b) {
            (StpRole::Designated, StpRole::Root)
        } else {
            let rank = |p: &PortRef| (out.distance[&p.device], key(&p.device), p.port);
            if rank(&l.a) < rank(&l.b) {
                (StpRole::Designated, StpRole::Blocking)
            } else {
                (StpRole::Blocking, StpRole::Designated)
            }
        };
        out.roles.insert(l.a.clone(), ra);
        out.roles.insert(l.b.clone(), rb);
    }
    out
}
